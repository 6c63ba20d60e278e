//! Approximate maximum-likelihood training.
//!
//! Each step draws `z0_i ~ p(z0 | x_i, y_i)` with short-run Langevin chains,
//! evaluates the per-sample log-joint gradient at that point and takes one
//! AdamW step on the weighted mean. Pretraining drops the property term from
//! both the posterior target and the gradient, leaving γ untouched.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::params::{Group, ParamGrads};
use crate::model::{Evidence, LogLik, Lpt};
use crate::sampler::{sample_posterior_at, ChainBank, LangevinConfig};
use crate::seqcore::{LabeledSample, ShiftingDataset};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sequences only: `log p(x)`.
    Pretrain,
    Finetune,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum Weighting {
    Uniform,
    /// `w_i = 1/N` on the top-N buffer entries, zero elsewhere.
    TopN(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_weights")]
    pub weights: Weighting,
    /// Posterior samples averaged per data point.
    #[serde(default = "default_posterior_samples")]
    pub posterior_samples: usize,
    /// Global gradient-norm ceiling before the optimizer step.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Keep α fixed (the prior transform stays at its initial value).
    #[serde(default)]
    pub freeze_prior: bool,
}

fn default_weight_decay() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weights() -> Weighting {
    Weighting::Uniform
}
fn default_posterior_samples() -> usize {
    1
}

impl TrainConfig {
    fn base(mode: Mode, lr_max: f64, epochs: usize, weights: Weighting) -> Self {
        TrainConfig {
            mode,
            lr_max,
            lr_min: 7.5e-5,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: 32,
            epochs,
            weights,
            posterior_samples: 1,
            clip_grad_norm: None,
            freeze_prior: false,
        }
    }

    pub fn pretrain() -> Self {
        Self::base(Mode::Pretrain, 7.5e-4, 30, Weighting::Uniform)
    }

    pub fn finetune() -> Self {
        Self::base(Mode::Finetune, 3e-4, 10, Weighting::Uniform)
    }

    pub fn online(top_n: usize) -> Self {
        Self::base(Mode::Online, 3e-4, 3, Weighting::TopN(top_n))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return bad("need lr_max >= lr_min > 0");
        }
        if self.batch_size == 0 || self.posterior_samples == 0 {
            return bad("batch_size and posterior_samples must be positive");
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("invalid optimizer hyperparameters");
        }
        if matches!(self.weights, Weighting::TopN(0)) {
            return bad("top_n must be positive");
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-sample weights: `1/N` on the top-N entries (buffer order already
/// encodes tie-breaking), zero elsewhere.
pub fn weighted_objective(buffer: &ShiftingDataset, n: usize) -> Result<Vec<f64>> {
    if n > buffer.len() || n == 0 {
        return Err(Error::NTooLarge { n, len: buffer.len() });
    }
    Ok((0..buffer.len()).map(|i| if i < n { 1.0 / n as f64 } else { 0.0 }).collect())
}

/// Decoupled-weight-decay Adam. Moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Lpt) -> Self {
        let zeros: Vec<Mat> = model.params().iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Ascent step along `grads` (gradients of the log-likelihood). Groups in
    /// `frozen` and parameters without a gradient are left bitwise unchanged.
    pub fn step(&mut self, model: &mut Lpt, grads: &ParamGrads, lr: f64, cfg: &TrainConfig, frozen: &[Group]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (id, p) in model.params_mut().iter_mut().enumerate() {
            if frozen.contains(&p.group) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
                v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
                let update = (m.data[k] / bc1) / ((v.data[k] / bc2).sqrt() + cfg.eps);
                let w = &mut p.value.data[k];
                *w += lr * update - lr * decay * *w;
            }
        }
    }

    pub fn save_into(&self, model: &Lpt, ck: &mut Checkpoint) {
        for ((p, m), v) in model.params().iter().zip(&self.m).zip(&self.v) {
            ck.push_tensor(format!("adam.m.{}", p.name), m.clone());
            ck.push_tensor(format!("adam.v.{}", p.name), v.clone());
        }
        ck.counters.insert("adam.t".into(), self.t);
    }

    pub fn load_from(model: &Lpt, ck: &Checkpoint) -> Result<Self> {
        let fetch = |kind: &str, name: &str| {
            ck.tensor(&format!("adam.{kind}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))
        };
        let mut opt = AdamW::new(model);
        for (i, p) in model.params().iter().enumerate() {
            opt.m[i] = fetch("m", &p.name)?;
            opt.v[i] = fetch("v", &p.name)?;
        }
        opt.t = ck.counters.get("adam.t").copied().unwrap_or(0);
        Ok(opt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mode: Mode,
    pub loglik_x: f64,
    pub loglik_y: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    step: u64,
    total_steps: u64,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(model: &Lpt, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            opt: AdamW::new(model),
            cfg,
            step: 0,
            total_steps: 0,
            log: None,
        })
    }

    /// Appends one JSON line per step to `path`.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Restarts the learning-rate schedule over `total` steps.
    pub fn restart_schedule(&mut self, total: u64) {
        self.step = 0;
        self.total_steps = total;
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.cfg.lr_max, self.cfg.lr_min)
    }

    fn frozen(&self) -> Vec<Group> {
        let mut f = Vec::new();
        if self.cfg.mode == Mode::Pretrain {
            f.push(Group::Gamma);
        }
        if self.cfg.freeze_prior {
            f.push(Group::Alpha);
        }
        f
    }

    /// One posterior-sampling plus optimizer step on `data[batch[k]]`, with
    /// chain `batch[k]` of `bank` serving sample `k` and `weights[k]` its
    /// (unnormalized) weight.
    pub fn mle_step(
        &mut self,
        model: &mut Lpt,
        data: &[LabeledSample],
        batch: &[usize],
        weights: &[f64],
        bank: &mut ChainBank,
        lcfg: &LangevinConfig,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        assert_eq!(batch.len(), weights.len());
        let pretrain = self.cfg.mode == Mode::Pretrain;
        let evidence: Vec<Evidence> = batch
            .iter()
            .map(|&i| {
                let s = &data[i];
                Evidence::new(Some(&s.x), if pretrain { None } else { Some(&s.y[..]) })
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        if !(wsum > 0.0) {
            return Err(Error::EmptyBatch);
        }
        let k = self.cfg.posterior_samples;
        let mut total = ParamGrads::zeros_like(model.params());
        let mut ll = LogLik { x: 0.0, y: 0.0 };
        for _ in 0..k {
            sample_posterior_at(model, &evidence, batch, bank, lcfg)?;
            let per: Vec<(LogLik, ParamGrads)> = evidence
                .par_iter()
                .zip(batch.par_iter())
                .map(|(ev, &i)| model.param_grad(ev, bank.state(i)))
                .collect::<Result<_>>()?;
            // fixed summation order keeps runs reproducible
            for ((l, g), w) in per.iter().zip(weights) {
                let c = w / (wsum * k as f64);
                total.add_scaled(c, g);
                ll.x += c * l.x;
                ll.y += c * l.y;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteGradient {
                chain: batch[0],
                z0: bank.state(batch[0]).to_vec(),
            });
        }
        let grad_norm = total.norm();
        if let Some(limit) = self.cfg.clip_grad_norm {
            if grad_norm > limit {
                let mut clipped = ParamGrads::zeros_like(model.params());
                clipped.add_scaled(limit / grad_norm, &total);
                total = clipped;
            }
        }
        let lr = self.current_lr();
        let frozen = self.frozen();
        self.opt.step(model, &total, lr, &self.cfg, &frozen);
        self.step += 1;
        let metrics = StepMetrics {
            step: self.step,
            mode: self.cfg.mode,
            loglik_x: ll.x,
            loglik_y: if pretrain { 0.0 } else { ll.y },
            grad_norm,
            lr,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&metrics)?;
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(metrics)
    }

    /// `mle_step` in pretraining form: sequences only.
    pub fn pretrain_step(
        &mut self,
        model: &mut Lpt,
        data: &[LabeledSample],
        batch: &[usize],
        bank: &mut ChainBank,
        lcfg: &LangevinConfig,
    ) -> Result<StepMetrics> {
        if self.cfg.mode != Mode::Pretrain {
            return Err(Error::Config("pretrain_step needs a pretrain-mode trainer".into()));
        }
        let w = vec![1.0; batch.len()];
        self.mle_step(model, data, batch, &w, bank, lcfg)
    }

    /// Runs `cfg.epochs` epochs and restarts the cosine schedule to span them.
    /// An epoch is `data.len()` samples drawn from the entries with nonzero
    /// weight (shuffled passes, repeated as needed), so the step count does
    /// not depend on the weighting. `bank` must hold one chain per data entry.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        model: &mut Lpt,
        data: &[LabeledSample],
        weights: &[f64],
        bank: &mut ChainBank,
        lcfg: &LangevinConfig,
        rng: &mut R,
    ) -> Result<Vec<StepMetrics>> {
        if data.len() != weights.len() || data.len() != bank.len() {
            return Err(Error::dims(data.len(), format!("{} weights / {} chains", weights.len(), bank.len())));
        }
        let mut active: Vec<usize> = (0..data.len()).filter(|&i| weights[i] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::EmptyBatch);
        }
        // pass sizes within one epoch
        let mut passes = Vec::new();
        let mut left = data.len();
        while left > 0 {
            passes.push(left.min(active.len()));
            left -= passes[passes.len() - 1];
        }
        let bs = self.cfg.batch_size;
        let per_epoch: u64 = passes.iter().map(|p| p.div_ceil(bs) as u64).sum();
        self.restart_schedule(per_epoch * self.cfg.epochs as u64);
        let mut out = Vec::new();
        for _ in 0..self.cfg.epochs {
            let mut batches = Vec::new();
            for &take in &passes {
                active.shuffle(rng);
                batches.extend(active[..take].chunks(bs).map(<[usize]>::to_vec));
            }
            for chunk in &batches {
                let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
                out.push(self.mle_step(model, data, chunk, &w, bank, lcfg)?);
            }
        }
        Ok(out)
    }
}

/// Weights for a buffer under `scheme`.
pub fn buffer_weights(buffer: &ShiftingDataset, scheme: Weighting) -> Result<Vec<f64>> {
    match scheme {
        Weighting::Uniform => {
            if buffer.is_empty() {
                return Err(Error::EmptyBatch);
            }
            Ok(vec![1.0 / buffer.len() as f64; buffer.len()])
        }
        Weighting::TopN(n) => weighted_objective(buffer, n.min(buffer.len())),
    }
}

/// Mean per-token negative log-likelihood of `data` under the model, with
/// each sequence's latent drawn from its posterior (a held-out perplexity proxy).
pub fn mean_token_nll(model: &Lpt, data: &[LabeledSample], lcfg: &LangevinConfig, seed: u64) -> Result<f64> {
    let evidence: Vec<Evidence> = data.iter().map(|s| Evidence::new(Some(&s.x), None)).collect();
    let mut bank = ChainBank::new(data.len(), model.latent_dim(), false, seed);
    let all: Vec<usize> = (0..data.len()).collect();
    sample_posterior_at(model, &evidence, &all, &mut bank, lcfg)?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for (i, s) in data.iter().enumerate() {
        let z = model.prior_forward(bank.state(i))?;
        let (total, per) = model.decoder_logprob(&s.x, &z)?;
        nll -= total;
        tokens += per.len();
    }
    Ok(nll / tokens.max(1) as f64)
}
