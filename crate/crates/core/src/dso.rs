//! Online optimization loop: propose in latent space, relabel with the
//! oracle, select into the shifting buffer, improve the model.
//!
//! Proposals condition on `y* + δ_y`, where `y*` is an anchor taken from the
//! upper end of the buffer. Selected entries keep one persistent Langevin
//! chain each for the improvement step.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, Dtype};
use crate::model::{HeadKind, Lpt, PropertySpec};
use crate::oracles::{Constraint, Oracle};
use crate::sampler::{chain_rng, sample_conditional, ChainBank, LangevinConfig};
use crate::seqcore::{decode, encode, format_dataset, load_dataset, write_atomic, LabeledSample, RankedSample, ShiftingDataset, TokenSeq};
use crate::tensor::Mat;
use crate::trainer::{buffer_weights, AdamW, TrainConfig, Trainer, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "k")]
pub enum AnchorRule {
    Max,
    /// Mean of the top-K ranking scores; falls back to the max when the
    /// buffer holds fewer than K entries.
    MeanTopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum DeltaY {
    /// Fraction of the current buffer's score range.
    RangeFraction(f64),
    /// Fixed increment in oracle units.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    /// `z0 ~ p(z0 | y = y* + δ_y)` by Langevin dynamics.
    Conditional,
    /// `z0 ~ N(0, I)`, ignoring the predictor.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInit {
    /// Fresh `N(0, I)` draw when a buffer slot changes owner.
    Gaussian,
    /// Start from the latent that proposed the new entry.
    ProposalLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    /// Keep the top `capacity` entries.
    TopN,
    /// Keep everything ever labeled.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsoConfig {
    pub m_proposals: usize,
    pub capacity: usize,
    pub delta_y: DeltaY,
    pub anchor: AnchorRule,
    pub max_iters: usize,
    pub oracle_budget: u64,
    pub patience: usize,
    /// Feasibility constraints on oracle outputs. Empty means "take them from
    /// the oracle definition".
    pub constraints: Vec<Constraint>,
    pub from_scratch: bool,
    /// Every proposal starts with this glyph string.
    pub prefix: Option<String>,
    pub temperature: f64,
    pub proposal_langevin: LangevinConfig,
    pub train_langevin: LangevinConfig,
    pub persistent_chains: bool,
    pub train: TrainConfig,
    /// Epochs over `D⁰` before the first iteration.
    pub initial_epochs: usize,
    pub proposal_source: ProposalSource,
    pub chain_init: ChainInit,
    pub buffer_policy: BufferPolicy,
    /// `k` for the per-iteration `mean_top_k` and the report's top-k table.
    pub report_k: usize,
    /// Label proposals with the model's own predictions instead of the oracle.
    pub self_label: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for DsoConfig {
    fn default() -> Self {
        DsoConfig {
            m_proposals: 250,
            capacity: 500,
            delta_y: DeltaY::RangeFraction(0.05),
            anchor: AnchorRule::MeanTopK(100),
            max_iters: 25,
            oracle_budget: 20_000,
            patience: 3,
            constraints: Vec::new(),
            from_scratch: false,
            prefix: None,
            temperature: 1.0,
            proposal_langevin: LangevinConfig::default(),
            train_langevin: LangevinConfig {
                n_steps: 2,
                ..LangevinConfig::default()
            },
            persistent_chains: true,
            train: TrainConfig::online(250),
            initial_epochs: 10,
            proposal_source: ProposalSource::Conditional,
            chain_init: ChainInit::Gaussian,
            buffer_policy: BufferPolicy::TopN,
            report_k: 100,
            self_label: false,
            checkpoint_dir: None,
        }
    }
}

impl DsoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m_proposals == 0 || self.capacity == 0 || self.report_k == 0 {
            return bad("m_proposals, capacity and report_k must be positive".into());
        }
        if self.oracle_budget < self.m_proposals as u64 {
            return bad(format!(
                "oracle_budget {} is below m_proposals {}",
                self.oracle_budget, self.m_proposals
            ));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if let Weighting::TopN(n) = self.train.weights {
            if self.buffer_policy == BufferPolicy::TopN && n > self.capacity {
                return bad(format!("top_n {n} exceeds buffer capacity {}", self.capacity));
            }
        }
        if self.self_label && !self.constraints.is_empty() {
            return bad("self-labeling supports unconstrained runs only".into());
        }
        match self.delta_y {
            DeltaY::RangeFraction(f) | DeltaY::Absolute(f) if !f.is_finite() => return bad("delta_y must be finite".into()),
            _ => {}
        }
        if matches!(self.anchor, AnchorRule::MeanTopK(0)) {
            return bad("anchor k must be positive".into());
        }
        self.proposal_langevin.validate()?;
        self.train_langevin.validate()?;
        self.train.validate()
    }
}

/// Predictor heads matching a run: one regression head on the primary
/// objective, one binary head per constraint.
pub fn properties_for(constraints: &[Constraint], sigma2: f64) -> Vec<PropertySpec> {
    let mut p = vec![PropertySpec::regression("primary", sigma2)];
    p.extend((0..constraints.len()).map(|i| PropertySpec::binary(format!("feasible{i}"))));
    p
}

/// Ranking score: the primary objective, zeroed when any constraint fails.
pub fn rank_score(y: &[f64], constraints: &[Constraint]) -> f64 {
    if constraints.iter().all(|c| c.holds(y)) {
        y[0]
    } else {
        0.0
    }
}

/// Affine standardization of the primary objective, fixed from `D⁰`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub sd: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        TargetScaler { mean, sd }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    BudgetExhausted,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub c_t: Option<f64>,
    pub best: f64,
    pub mean_top_k: f64,
    /// Mean ranking score of the best `report_k` unique sequences proposed
    /// (and labeled) in this iteration.
    pub proposal_top_k_mean: f64,
    pub queries_used: u64,
    pub new_labeled: usize,
    pub budget_exhausted: bool,
    /// Posterior-sampling gradient evaluations spent in this iteration's improvement step.
    pub posterior_grad_evals: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub sequence: String,
    pub y: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub t: usize,
    pub buffer: ShiftingDataset,
    pub bank: ChainBank,
    pub queries_used: u64,
    pub best_ever: Option<RankedSample>,
    pub threshold_history: Vec<f64>,
    pub stall: usize,
    /// Ranking score of every metered oracle query, in query order.
    pub query_scores: Vec<f64>,
    pub scaler: TargetScaler,
    pub iterations: Vec<IterRecord>,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: DsoConfig,
    pub constraints: Vec<Constraint>,
    pub oracle: Option<serde_json::Value>,
    pub self_labeled: bool,
    pub stop_reason: Option<StopReason>,
    pub queries_used: u64,
    pub best_ever: Option<Scored>,
    pub threshold_history: Vec<f64>,
    pub iterations: Vec<IterRecord>,
    pub top_k: Vec<Scored>,
    pub query_scores: Vec<f64>,
}

impl RunReport {
    /// Report JSON with timing fields zeroed, for byte comparisons.
    pub fn to_json_untimed(&self) -> Result<String> {
        let mut r = self.clone();
        r.iterations.iter_mut().for_each(|it| it.wall_ms = 0);
        Ok(serde_json::to_string_pretty(&r)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        let mut csv = String::from("t,c_t\n");
        for it in &self.iterations {
            if let Some(c) = it.c_t {
                csv.push_str(&format!("{},{}\n", it.t, c));
            }
        }
        write_atomic(&dir.join("thresholds.csv"), csv.as_bytes())
    }
}

pub struct RunOutcome {
    pub model: Lpt,
    pub state: RunState,
    pub report: RunReport,
}

pub struct Dso<'o> {
    cfg: DsoConfig,
    seed: u64,
    oracle: &'o Oracle,
    constraints: Vec<Constraint>,
    model: Lpt,
    trainer: Trainer,
    state: RunState,
    prefix: TokenSeq,
}

fn stream(seed: u64, tag: u64, t: usize) -> u64 {
    let mut rng = chain_rng(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15), 0, t as u64);
    rand::Rng::random(&mut rng)
}

const TAG_PROPOSAL: u64 = 1;
const TAG_GENERATE: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_BANK: u64 = 4;

impl<'o> Dso<'o> {
    /// Sets up `D⁰` (top-n of `initial`, or prior samples when starting from
    /// scratch) and fits the model to it.
    pub fn new(model: Lpt, initial: &[LabeledSample], oracle: &'o Oracle, cfg: DsoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if model.vocab() != oracle.vocab() {
            return Err(Error::VocabMismatch);
        }
        let constraints = if cfg.constraints.is_empty() {
            oracle.constraints()
        } else {
            cfg.constraints.clone()
        };
        if let Some(c) = constraints.iter().find(|c| c.objective >= oracle.n_objectives()) {
            return Err(Error::dims(format!("objective < {}", oracle.n_objectives()), c.objective));
        }
        check_heads(&model, constraints.len())?;
        if initial.is_empty() && !cfg.from_scratch {
            return Err(Error::EmptyBatch);
        }
        let prefix = match &cfg.prefix {
            Some(p) if !p.is_empty() => {
                let probe = crate::seqcore::Vocabulary::new(model.vocab().symbols().to_vec(), model.vocab().max_len(), true)?;
                encode(p, &probe)?
            }
            _ => TokenSeq::new(Vec::new()),
        };
        if prefix.len() >= model.vocab().max_len() {
            return Err(Error::PrefixTooLong {
                len: prefix.len(),
                max_len: model.vocab().max_len(),
            });
        }
        let capacity = match cfg.buffer_policy {
            BufferPolicy::TopN => cfg.capacity,
            BufferPolicy::Union => usize::MAX,
        };
        let trainer = Trainer::new(&model, cfg.train.clone())?;
        let bank = ChainBank::new(0, model.latent_dim(), cfg.persistent_chains, stream(seed, TAG_BANK, 0));
        let mut dso = Dso {
            state: RunState {
                t: 0,
                buffer: ShiftingDataset::new(capacity),
                bank,
                queries_used: 0,
                best_ever: None,
                threshold_history: Vec::new(),
                stall: 0,
                query_scores: Vec::new(),
                scaler: TargetScaler { mean: 0.0, sd: 1.0 },
                iterations: Vec::new(),
                stop: None,
            },
            cfg,
            seed,
            oracle,
            constraints,
            model,
            trainer,
            prefix,
        };
        let seeds: Vec<LabeledSample> = if dso.cfg.from_scratch {
            let props = dso.propose_with(ProposalSource::Prior, &[])?;
            dso.relabel(&props)?.0
        } else {
            initial.to_vec()
        };
        if let Some(index) = seeds.iter().position(|s| !s.y_is_oracle) {
            return Err(Error::UnlabeledProposal { index });
        }
        for s in &seeds {
            if s.y.len() != oracle.n_objectives() {
                return Err(Error::dims(oracle.n_objectives(), s.y.len()));
            }
        }
        let cons = dso.constraints.clone();
        let d0 = ShiftingDataset::new(dso.cfg.capacity).merge(&seeds, |s| rank_score(&s.y, &cons))?;
        let primary: Vec<f64> = d0.entries().iter().map(|e| e.sample.y[0]).collect();
        dso.state.scaler = TargetScaler::fit(&primary);
        dso.install_buffer(d0);
        if let Some(c) = dso.state.buffer.threshold() {
            dso.state.threshold_history.push(c);
        }
        dso.state.best_ever = dso.state.buffer.entries().first().cloned();
        if dso.cfg.initial_epochs > 0 {
            let epochs = dso.cfg.train.epochs;
            dso.trainer.cfg.epochs = dso.cfg.initial_epochs;
            let r = dso.improve(0);
            dso.trainer.cfg.epochs = epochs;
            r?;
        }
        Ok(dso)
    }

    pub fn model(&self) -> &Lpt {
        &self.model
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn rank(&self, y: &[f64]) -> f64 {
        rank_score(y, &self.constraints)
    }

    /// Model-side labels: the standardized primary objective plus one
    /// feasibility indicator per constraint.
    pub fn model_labels(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![self.state.scaler.scale(y[0])];
        out.extend(self.constraints.iter().map(|c| if c.holds(y) { 1.0 } else { 0.0 }));
        out
    }

    /// Replaces the buffer, carrying chain states for entries that stayed.
    fn install_buffer(&mut self, next: ShiftingDataset) {
        let d = self.model.latent_dim();
        let old: HashMap<&TokenSeq, usize> = self
            .state
            .buffer
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (&e.sample.x, i))
            .collect();
        let mut states = Vec::with_capacity(next.len());
        let mut ages = Vec::with_capacity(next.len());
        for (slot, e) in next.entries().iter().enumerate() {
            let kept = old
                .get(&e.sample.x)
                .filter(|&&j| self.state.buffer.entries()[j].sample == e.sample && j < self.state.bank.len());
            match kept {
                Some(&j) => {
                    states.push(self.state.bank.state(j).to_vec());
                    ages.push(self.state.bank.age(j));
                }
                None => {
                    let init = match (self.cfg.chain_init, &e.sample.z0) {
                        (ChainInit::ProposalLatent, Some(z0)) => z0.clone(),
                        _ => self.state.bank.fresh_state(slot, d),
                    };
                    states.push(init);
                    ages.push(0);
                }
            }
        }
        self.state.bank.reset_chains(states, ages);
        self.state.buffer = next;
    }

    fn anchor(&self) -> f64 {
        let scores: Vec<f64> = self.state.buffer.scores().collect();
        match self.cfg.anchor {
            AnchorRule::MeanTopK(k) if scores.len() >= k => scores[..k].iter().sum::<f64>() / k as f64,
            _ => scores[0],
        }
    }

    fn delta(&self) -> f64 {
        match self.cfg.delta_y {
            DeltaY::Absolute(v) => v,
            DeltaY::RangeFraction(f) => {
                let s: Vec<f64> = self.state.buffer.scores().collect();
                f * (s[0] - s[s.len() - 1])
            }
        }
    }

    /// Conditioning target in model label space.
    pub fn target(&self) -> Vec<f64> {
        let mut y = vec![self.state.scaler.scale(self.anchor() + self.delta())];
        y.extend(self.constraints.iter().map(|_| 1.0));
        y
    }

    /// `m` proposals with predictor-made labels (`y_is_oracle = false`).
    pub fn propose(&self) -> Result<Vec<LabeledSample>> {
        if self.state.buffer.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.propose_with(self.cfg.proposal_source, &self.target())
    }

    fn propose_with(&self, source: ProposalSource, target: &[f64]) -> Result<Vec<LabeledSample>> {
        let t = self.state.t;
        let d = self.model.latent_dim();
        let mut bank = ChainBank::new(self.cfg.m_proposals, d, false, stream(self.seed, TAG_PROPOSAL, t));
        let (z0s, prompts) = match source {
            ProposalSource::Conditional => sample_conditional(&self.model, target, &mut bank, &self.cfg.proposal_langevin)?,
            ProposalSource::Prior => {
                let z0s = bank.states().to_vec();
                let prompts = z0s.iter().map(|z| self.model.prior_forward(z)).collect::<Result<Vec<Mat>>>()?;
                (z0s, prompts)
            }
        };
        let gen_seed = stream(self.seed, TAG_GENERATE, t);
        z0s.into_par_iter()
            .zip(prompts.par_iter())
            .enumerate()
            .map(|(i, (z0, z))| {
                let mut rng = chain_rng(gen_seed, i, t as u64);
                let x = self.model.generate(z, &self.prefix, &mut rng, self.cfg.temperature)?;
                let pred = self.model.predict(z)?;
                let mut y = vec![self.state.scaler.unscale(pred[0])];
                y.extend(&pred[1..]);
                Ok(LabeledSample {
                    z0: Some(z0),
                    x,
                    y,
                    y_is_oracle: false,
                })
            })
            .collect()
    }

    /// Oracle labels for the unique proposals, within budget. Already-known
    /// sequences are free. Returns the labeled batch and whether the budget
    /// cut it short.
    pub fn relabel(&mut self, proposals: &[LabeledSample]) -> Result<(Vec<LabeledSample>, bool)> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(proposals.len());
        let mut exhausted = false;
        for p in proposals {
            if !seen.insert(&p.x) {
                continue;
            }
            let y = if self.cfg.self_label {
                p.y.clone()
            } else if self.oracle.is_cached(&p.x) {
                self.oracle.query(&p.x)?
            } else if self.state.queries_used < self.cfg.oracle_budget {
                let before = self.oracle.queries();
                let y = self.oracle.query(&p.x)?;
                self.state.queries_used += self.oracle.queries() - before;
                self.state.query_scores.push(self.rank(&y));
                y
            } else {
                exhausted = true;
                continue;
            };
            out.push(LabeledSample {
                z0: p.z0.clone(),
                x: p.x.clone(),
                y,
                y_is_oracle: true,
            });
        }
        Ok((out, exhausted))
    }

    /// Merges labeled proposals into the buffer and updates the stall counter.
    pub fn select(&mut self, labeled: &[LabeledSample]) -> Result<()> {
        let cons = self.constraints.clone();
        let before_c = self.state.buffer.threshold();
        let before_len = self.state.buffer.len();
        let next = self.state.buffer.merge(labeled, |s| rank_score(&s.y, &cons))?;
        let c = next.threshold();
        let grew = next.len() > before_len;
        let progressed = match (before_c, c) {
            (Some(a), Some(b)) => b > a,
            _ => grew,
        };
        self.state.stall = if progressed { 0 } else { self.state.stall + 1 };
        if let Some(c) = c {
            if let Some(&last) = self.state.threshold_history.last() {
                assert!(c >= last, "threshold decreased: {last} -> {c}");
            }
            self.state.threshold_history.push(c);
        }
        if let Some(top) = next.entries().first() {
            let better = self.state.best_ever.as_ref().is_none_or(|b| top.score > b.score);
            if better {
                self.state.best_ever = Some(top.clone());
            }
        }
        self.install_buffer(next);
        Ok(())
    }

    /// Weighted maximum-likelihood passes over the buffer. Returns the
    /// posterior-sampling gradient evaluations spent.
    pub fn improve(&mut self, t: usize) -> Result<u64> {
        let data: Vec<LabeledSample> = self
            .state
            .buffer
            .entries()
            .iter()
            .map(|e| LabeledSample {
                z0: None,
                x: e.sample.x.clone(),
                y: self.model_labels(&e.sample.y),
                y_is_oracle: true,
            })
            .collect();
        let scheme = match self.cfg.train.weights {
            Weighting::TopN(n) => Weighting::TopN(n.min(data.len())),
            w => w,
        };
        let weights = buffer_weights(&self.state.buffer, scheme)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream(self.seed, TAG_SHUFFLE, t));
        let before = self.state.bank.grad_evals();
        self.trainer
            .fit(&mut self.model, &data, &weights, &mut self.state.bank, &self.cfg.train_langevin, &mut rng)?;
        Ok(self.state.bank.grad_evals() - before)
    }

    /// One propose → relabel → select → improve round.
    pub fn step(&mut self) -> Result<Option<StopReason>> {
        let start = Instant::now();
        self.state.t += 1;
        let t = self.state.t;
        let proposals = self.propose()?;
        let (labeled, cut) = self.relabel(&proposals)?;
        let new_labeled = labeled.iter().filter(|s| !self.state.buffer.contains(&s.x)).count();
        self.select(&labeled)?;
        let out_of_budget = cut || self.state.queries_used >= self.cfg.oracle_budget;
        let stop = if out_of_budget {
            Some(StopReason::BudgetExhausted)
        } else if self.state.stall >= self.cfg.patience {
            Some(StopReason::Stalled)
        } else if t >= self.cfg.max_iters {
            Some(StopReason::MaxIters)
        } else {
            None
        };
        let evals = if stop.is_none() { self.improve(t)? } else { 0 };
        let mut batch: Vec<f64> = labeled.iter().map(|s| self.rank(&s.y)).collect();
        batch.sort_by(|a, b| b.total_cmp(a));
        batch.truncate(self.cfg.report_k);
        let k = self.cfg.report_k.min(self.state.buffer.len());
        let record = IterRecord {
            t,
            c_t: self.state.buffer.threshold(),
            best: self.state.best_ever.as_ref().map_or(f64::NEG_INFINITY, |b| b.score),
            mean_top_k: self.state.buffer.scores().take(k).sum::<f64>() / k.max(1) as f64,
            proposal_top_k_mean: batch.iter().sum::<f64>() / batch.len().max(1) as f64,
            queries_used: self.state.queries_used,
            new_labeled,
            budget_exhausted: out_of_budget,
            posterior_grad_evals: evals,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "iteration {t}: c_t={:?} best={:.4} mean_top_k={:.4} queries={}",
            record.c_t,
            record.best,
            record.mean_top_k,
            record.queries_used
        );
        self.state.iterations.push(record);
        self.state.stop = stop;
        if let Some(dir) = self.cfg.checkpoint_dir.clone() {
            self.save_checkpoint(&dir)?;
        }
        Ok(stop)
    }

    /// Runs until a stop condition. On error the current state is
    /// checkpointed (when a directory is configured) before returning.
    pub fn run_to_end(&mut self) -> Result<()> {
        if self.cfg.self_label {
            log::warn!("self-labeling run: buffer labels come from the model, not the oracle");
        }
        while self.state.stop.is_none() {
            if let Err(e) = self.step() {
                if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                    let _ = self.save_checkpoint(&dir);
                }
                return Err(e);
            }
        }
        Ok(())
    }

    fn scored(&self, r: &RankedSample) -> Scored {
        Scored {
            sequence: decode(&r.sample.x, self.model.vocab()),
            y: r.sample.y.clone(),
            score: r.score,
        }
    }

    pub fn report(&self) -> RunReport {
        let k = self.cfg.report_k.min(self.state.buffer.len());
        RunReport {
            seed: self.seed,
            config: self.cfg.clone(),
            constraints: self.constraints.clone(),
            oracle: self.oracle.def().and_then(|d| serde_json::to_value(d).ok()),
            self_labeled: self.cfg.self_label,
            stop_reason: self.state.stop,
            queries_used: self.state.queries_used,
            best_ever: self.state.best_ever.as_ref().map(|b| self.scored(b)),
            threshold_history: self.state.threshold_history.clone(),
            iterations: self.state.iterations.clone(),
            top_k: self.state.buffer.entries()[..k].iter().map(|e| self.scored(e)).collect(),
            query_scores: self.state.query_scores.clone(),
        }
    }

    /// Writes `model.ckpt` (lossless, with optimizer moments, chain states
    /// and the run state), `buffer.tsv` + sidecar, and the oracle memo.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut ck = Checkpoint::from_model(&self.model, self.seed)
            .with_counter("iteration", self.state.t as u64)
            .with_counter("queries_used", self.state.queries_used);
        self.trainer.opt.save_into(&self.model, &mut ck);
        ck.push_tensor("chains.states", self.state.bank.to_mat());
        ck.extra = serde_json::json!({ "run_state": self.state, "config": self.cfg });
        ck.save(dir.join("model.ckpt"), Dtype::F64)?;
        self.state.buffer.save_snapshot(&dir.join("buffer.tsv"), self.model.vocab(), self.state.t)?;
        let memo: Vec<LabeledSample> = self
            .oracle
            .memo_entries()
            .into_iter()
            .map(|(x, y)| LabeledSample::oracle(x, y))
            .collect();
        write_atomic(&dir.join("oracle_memo.tsv"), format_dataset(&memo, self.model.vocab()).as_bytes())
    }

    /// Continues a run from `save_checkpoint` output, restoring the oracle
    /// memo so previously labeled sequences stay free.
    pub fn resume(dir: &Path, oracle: &'o Oracle) -> Result<Self> {
        let ck = Checkpoint::load(dir.join("model.ckpt"))?;
        let model = ck.to_model()?;
        let cfg: DsoConfig = serde_json::from_value(ck.extra["config"].clone())?;
        let mut state: RunState = serde_json::from_value(ck.extra["run_state"].clone())?;
        if let Some(m) = ck.tensor("chains.states") {
            let states: Vec<Vec<f64>> = (0..m.rows).map(|r| m.row(r).to_vec()).collect();
            let ages = state.bank.ages().to_vec();
            state.bank.reset_chains(states, ages);
        }
        let constraints = if cfg.constraints.is_empty() {
            oracle.constraints()
        } else {
            cfg.constraints.clone()
        };
        let mut trainer = Trainer::new(&model, cfg.train.clone())?;
        trainer.opt = AdamW::load_from(&model, &ck)?;
        let prefix = match &cfg.prefix {
            Some(p) if !p.is_empty() => {
                let probe = crate::seqcore::Vocabulary::new(model.vocab().symbols().to_vec(), model.vocab().max_len(), true)?;
                encode(p, &probe)?
            }
            _ => TokenSeq::new(Vec::new()),
        };
        for s in load_dataset(dir.join("oracle_memo.tsv"), model.vocab())? {
            oracle.preload(s.x, s.y);
        }
        Ok(Dso {
            seed: ck.seed,
            cfg,
            oracle,
            constraints,
            model,
            trainer,
            state,
            prefix,
        })
    }

    pub fn into_outcome(self) -> RunOutcome {
        let report = self.report();
        RunOutcome {
            model: self.model,
            state: self.state,
            report,
        }
    }
}

fn check_heads(model: &Lpt, n_constraints: usize) -> Result<()> {
    let n = model.n_properties();
    if n != 1 + n_constraints {
        return Err(Error::dims(format!("{} predictor heads", 1 + n_constraints), n));
    }
    if !matches!(model.property(0).kind, HeadKind::Regression { .. }) {
        return Err(Error::Config("head 0 must be a regression head".into()));
    }
    if (1..n).any(|h| model.property(h).kind != HeadKind::Binary) {
        return Err(Error::Config("constraint heads must be binary".into()));
    }
    Ok(())
}

/// The full loop: `D⁰` setup, then iterations until a stop condition.
pub fn run(model: Lpt, initial: &[LabeledSample], oracle: &Oracle, cfg: &DsoConfig, seed: u64) -> Result<RunOutcome> {
    let mut dso = Dso::new(model, initial, oracle, cfg.clone(), seed)?;
    dso.run_to_end()?;
    Ok(dso.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::oracles::{enumerate_space, Direction, LandscapeParams, MotifParams, OracleDef};

    fn table(seed: u64) -> Oracle {
        Oracle::from_def(&OracleDef::Table(LandscapeParams::new(4, seed))).unwrap()
    }

    fn model_for(oracle: &Oracle, n_constraints: usize) -> Lpt {
        let mut mc = ModelConfig::desk(oracle.vocab().clone());
        mc.k_tokens = 2;
        mc.k_dim = 2;
        mc.prior_hidden = 8;
        mc.embed = 8;
        mc.ff_hidden = 16;
        mc.blocks = 1;
        mc.properties = properties_for(&vec![Constraint { objective: 1, direction: Direction::Less, bound: 0.0 }; n_constraints], 0.25);
        Lpt::new(mc, 3).unwrap()
    }

    /// The lower half of the space, labeled without touching the meter.
    fn initial(oracle: &Oracle, n: usize) -> Vec<LabeledSample> {
        let mut all: Vec<LabeledSample> = enumerate_space(oracle.vocab())
            .unwrap()
            .into_iter()
            .map(|x| {
                let y = oracle.peek(&x);
                LabeledSample::oracle(x, y)
            })
            .collect();
        all.sort_by(|a, b| a.y[0].total_cmp(&b.y[0]));
        all.truncate(n);
        all
    }

    fn small_cfg() -> DsoConfig {
        DsoConfig {
            m_proposals: 16,
            capacity: 24,
            max_iters: 4,
            oracle_budget: 200,
            patience: 10,
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::online(12)
            },
            initial_epochs: 1,
            report_k: 10,
            ..DsoConfig::default()
        }
    }

    #[test]
    fn target_is_max_with_zero_delta() {
        let o = table(1);
        let cfg = DsoConfig {
            delta_y: DeltaY::Absolute(0.0),
            anchor: AnchorRule::Max,
            ..small_cfg()
        };
        let dso = Dso::new(model_for(&o, 0), &initial(&o, 40), &o, cfg, 0).unwrap();
        let max = dso.state().buffer.scores().next().unwrap();
        assert!((dso.state().scaler.unscale(dso.target()[0]) - max).abs() < 1e-9);
    }

    #[test]
    fn anchor_falls_back_to_max_for_small_buffers() {
        let o = table(1);
        let cfg = DsoConfig {
            delta_y: DeltaY::RangeFraction(0.0),
            anchor: AnchorRule::MeanTopK(1000),
            ..small_cfg()
        };
        let dso = Dso::new(model_for(&o, 0), &initial(&o, 40), &o, cfg, 0).unwrap();
        assert_eq!(dso.anchor(), dso.state().buffer.scores().next().unwrap());
        let s: Vec<f64> = dso.state().buffer.scores().collect();
        let cfg = DsoConfig {
            anchor: AnchorRule::MeanTopK(5),
            delta_y: DeltaY::RangeFraction(0.05),
            ..small_cfg()
        };
        let dso = Dso::new(model_for(&o, 0), &initial(&o, 40), &o, cfg, 0).unwrap();
        assert!((dso.anchor() - s[..5].iter().sum::<f64>() / 5.0).abs() < 1e-12);
        assert!((dso.delta() - 0.05 * (s[0] - s[s.len() - 1])).abs() < 1e-12);
    }

    #[test]
    fn proposals_respect_prefix() {
        let o = table(2);
        let cfg = DsoConfig {
            prefix: Some("GA".into()),
            ..small_cfg()
        };
        let dso = Dso::new(model_for(&o, 0), &initial(&o, 40), &o, cfg, 0).unwrap();
        let props = dso.propose().unwrap();
        assert_eq!(props.len(), 16);
        for p in &props {
            assert_eq!(&p.x.tokens()[..2], &[2, 0]);
            assert!(!p.y_is_oracle);
            assert_eq!(p.x.len(), 4);
        }
        let long = DsoConfig {
            prefix: Some("GATT".into()),
            ..small_cfg()
        };
        assert!(matches!(
            Dso::new(model_for(&o, 0), &initial(&o, 40), &o, long, 0),
            Err(Error::PrefixTooLong { .. })
        ));
    }

    #[test]
    fn relabel_is_memoized_and_metered() {
        let o = table(3);
        let mut dso = Dso::new(model_for(&o, 0), &initial(&o, 40), &o, small_cfg(), 0).unwrap();
        let props = dso.propose().unwrap();
        let unique: HashSet<&TokenSeq> = props.iter().map(|p| &p.x).collect();
        let (labeled, cut) = dso.relabel(&props).unwrap();
        assert!(!cut);
        assert_eq!(labeled.len(), unique.len());
        let used = dso.state().queries_used;
        assert_eq!(used, o.queries());
        assert!(used <= unique.len() as u64);
        assert_eq!(dso.state().query_scores.len() as u64, used);
        let (again, _) = dso.relabel(&props).unwrap();
        assert_eq!(dso.state().queries_used, used);
        assert_eq!(again, labeled);
        for s in &labeled {
            assert!(s.y_is_oracle);
            assert_eq!(s.y, o.peek(&s.x));
        }
    }

    #[test]
    fn budget_truncates_the_batch() {
        let o = table(4);
        let cfg = DsoConfig {
            oracle_budget: 20,
            max_iters: 50,
            ..small_cfg()
        };
        let out = run(model_for(&o, 0), &initial(&o, 40), &o, &cfg, 1).unwrap();
        assert_eq!(out.report.stop_reason, Some(StopReason::BudgetExhausted));
        assert!(out.report.queries_used <= 20);
        assert_eq!(o.queries(), out.report.queries_used);
        assert!(out.report.iterations.last().unwrap().budget_exhausted);
    }

    #[test]
    fn constrained_ranking_zeroes_infeasible() {
        let c = [Constraint { objective: 1, direction: Direction::Greater, bound: 0.4 }];
        assert_eq!(rank_score(&[10.0, 0.3], &c), 0.0);
        assert_eq!(rank_score(&[10.0, 0.5], &c), 10.0);
        assert_eq!(rank_score(&[-2.0, 0.0], &[]), -2.0);
    }

    #[test]
    fn constraint_heads_are_checked() {
        let o = table(5);
        let cfg = DsoConfig {
            constraints: vec![Constraint { objective: 0, direction: Direction::Greater, bound: 0.0 }],
            ..small_cfg()
        };
        assert!(Dso::new(model_for(&o, 0), &initial(&o, 40), &o, cfg.clone(), 0).is_err());
        let dso = Dso::new(model_for(&o, 1), &initial(&o, 40), &o, cfg, 0).unwrap();
        assert_eq!(dso.target().len(), 2);
        assert_eq!(dso.target()[1], 1.0);
        let y = [0.5];
        assert_eq!(dso.model_labels(&y)[1], 1.0);
        assert_eq!(dso.model_labels(&[-0.5])[1], 0.0);
    }

    #[test]
    fn constant_oracle_stalls() {
        let def = OracleDef::Motif(MotifParams {
            alphabet: "ACGT".into(),
            max_len: 4,
            variable_length: false,
            motifs: Vec::new(),
            length_penalty: 0.0,
        });
        let o = Oracle::from_def(&def).unwrap();
        let cfg = DsoConfig {
            patience: 2,
            max_iters: 30,
            oracle_budget: 10_000,
            ..small_cfg()
        };
        let out = run(model_for(&o, 0), &initial(&o, 40), &o, &cfg, 2).unwrap();
        assert_eq!(out.report.stop_reason, Some(StopReason::Stalled));
        assert_eq!(out.report.iterations.len(), 2);
        assert!(out.report.threshold_history.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn thresholds_never_decrease() {
        let o = table(6);
        let cfg = DsoConfig {
            max_iters: 6,
            ..small_cfg()
        };
        let out = run(model_for(&o, 0), &initial(&o, 60), &o, &cfg, 3).unwrap();
        let h = &out.report.threshold_history;
        assert!(h.len() >= 2);
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
        let best = out.report.best_ever.unwrap().score;
        assert!(out.report.iterations.iter().all(|it| it.best <= best));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small_cfg();
        let a = table(7);
        let b = table(7);
        let ra = run(model_for(&a, 0), &initial(&a, 40), &a, &cfg, 9).unwrap();
        let rb = run(model_for(&b, 0), &initial(&b, 40), &b, &cfg, 9).unwrap();
        assert_eq!(ra.report.to_json_untimed().unwrap(), rb.report.to_json_untimed().unwrap());
        assert!(ra.model == rb.model);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DsoConfig {
            max_iters: 4,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        let a = table(8);
        let mut full = Dso::new(model_for(&a, 0), &initial(&a, 40), &a, cfg.clone(), 5).unwrap();
        full.step().unwrap();
        full.step().unwrap();
        let b = table(8);
        let mut resumed = Dso::resume(dir.path(), &b).unwrap();
        assert_eq!(b.queries(), 0);
        full.run_to_end().unwrap();
        resumed.run_to_end().unwrap();
        assert_eq!(full.report().to_json_untimed().unwrap(), resumed.report().to_json_untimed().unwrap());
        assert!(full.model() == resumed.model());
    }

    #[test]
    fn self_labeling_skips_the_oracle() {
        let o = table(9);
        let cfg = DsoConfig {
            self_label: true,
            max_iters: 2,
            ..small_cfg()
        };
        let out = run(model_for(&o, 0), &initial(&o, 40), &o, &cfg, 4).unwrap();
        assert!(out.report.self_labeled);
        assert_eq!(out.report.queries_used, 0);
        assert_eq!(o.queries(), 0);
        let bad = DsoConfig {
            self_label: true,
            constraints: vec![Constraint { objective: 0, direction: Direction::Greater, bound: 0.0 }],
            ..small_cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn from_scratch_spends_budget_on_seeds() {
        let o = table(10);
        let cfg = DsoConfig {
            from_scratch: true,
            max_iters: 1,
            ..small_cfg()
        };
        let dso = Dso::new(model_for(&o, 0), &[], &o, cfg, 0).unwrap();
        assert!(dso.state().queries_used > 0);
        assert!(dso.state().queries_used <= 16);
        assert!(matches!(Dso::new(model_for(&o, 0), &[], &o, small_cfg(), 0), Err(Error::EmptyBatch)));
    }
}
