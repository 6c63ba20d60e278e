//! End-to-end drivers shared by the CLI and the experiment tests: offline
//! data, pretraining, finetuning, optimization and the ablation variants.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dso::{self, DsoConfig, ProposalSource, RunOutcome, TargetScaler};
use crate::error::{Error, Result};
use crate::harness::config::{OfflineSpec, RunConfig};
use crate::model::Lpt;
use crate::oracles::{enumerate_space, quantile, Constraint, Oracle};
use crate::sampler::{ChainBank, LangevinConfig};
use crate::seqcore::{load_dataset, LabeledSample, TokenSeq};
use crate::trainer::{StepMetrics, TrainConfig, Trainer, Weighting};

/// One toggled mechanism relative to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "variant", content = "lambda")]
pub enum Variant {
    Full,
    /// Proposals from `z0 ~ N(0, I)` pushed through the prior.
    PriorSampling,
    /// Every buffer entry weighted equally.
    UniformWeights,
    SingleIteration,
    /// The prior transform stays at its identity initialization throughout.
    FrozenPrior,
    /// Guidance weight on the predictor term during proposal sampling.
    Lambda(f64),
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::PriorSampling,
        Variant::UniformWeights,
        Variant::SingleIteration,
        Variant::FrozenPrior,
    ];
    pub const LAMBDAS: [f64; 5] = [1.0, 5.0, 20.0, 40.0, 80.0];

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::PriorSampling => "prior-sampling".into(),
            Variant::UniformWeights => "uniform-weights".into(),
            Variant::SingleIteration => "single-iteration".into(),
            Variant::FrozenPrior => "frozen-prior".into(),
            Variant::Lambda(l) => format!("lambda-{l}"),
        }
    }

    /// Whether the variant needs its own pretrained model.
    pub fn changes_pretraining(&self) -> bool {
        matches!(self, Variant::FrozenPrior)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            Variant::Full => {}
            Variant::PriorSampling => cfg.dso.proposal_source = ProposalSource::Prior,
            Variant::UniformWeights => cfg.dso.train.weights = Weighting::Uniform,
            Variant::SingleIteration => cfg.dso.max_iters = 1,
            Variant::FrozenPrior => {
                cfg.pretrain.freeze_prior = true;
                cfg.finetune.freeze_prior = true;
                cfg.dso.train.freeze_prior = true;
            }
            Variant::Lambda(l) => cfg.dso.proposal_langevin.guidance_weight = l,
        }
    }
}

/// Constraints in effect for a run: the DSO override or the oracle's own.
pub fn constraints_for(dso: &DsoConfig, oracle: &Oracle) -> Vec<Constraint> {
    if dso.constraints.is_empty() {
        oracle.constraints()
    } else {
        dso.constraints.clone()
    }
}

/// Offline data. Labels come from the objective directly and are not
/// charged to any budget.
pub fn build_offline(spec: &OfflineSpec, oracle: &Oracle, seed: u64) -> Result<Vec<LabeledSample>> {
    match spec {
        OfflineSpec::File { path } => {
            let data = load_dataset(path, oracle.vocab())?;
            if let Some(s) = data.iter().find(|s| s.y.len() != oracle.n_objectives()) {
                return Err(Error::dims(oracle.n_objectives(), s.y.len()));
            }
            Ok(data)
        }
        OfflineSpec::Random { n, below_quantile } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cap = match below_quantile {
                Some(q) if *q < 1.0 => Some(quantile(oracle, 0, *q)?),
                _ => None,
            };
            let keep = |y: &[f64]| cap.is_none_or(|c| y[0] < c);
            let vocab = oracle.vocab();
            let mut out = Vec::with_capacity(*n);
            if vocab.space_size() <= crate::oracles::MAX_TABLE {
                let mut space = enumerate_space(vocab)?;
                space.shuffle(&mut rng);
                for x in space {
                    let y = oracle.peek(&x);
                    if keep(&y) {
                        out.push(LabeledSample::oracle(x, y));
                        if out.len() == *n {
                            break;
                        }
                    }
                }
            } else {
                if cap.is_some() {
                    return Err(Error::Config("below_quantile needs an enumerable space".into()));
                }
                let mut seen = std::collections::HashSet::new();
                while out.len() < *n {
                    let x = random_sequence(vocab, &mut rng);
                    if seen.insert(x.clone()) {
                        let y = oracle.peek(&x);
                        out.push(LabeledSample::oracle(x, y));
                    }
                }
            }
            if out.len() < *n {
                return Err(Error::NotEnoughUnique { k: *n, have: out.len() });
            }
            Ok(out)
        }
    }
}

fn random_sequence(vocab: &crate::seqcore::Vocabulary, rng: &mut ChaCha8Rng) -> TokenSeq {
    use rand::Rng;
    let len = if vocab.is_fixed_length() {
        vocab.max_len()
    } else {
        rng.random_range(1..=vocab.max_len())
    };
    TokenSeq::from_ids(&(0..len).map(|_| rng.random_range(0..vocab.n_symbols())).collect::<Vec<_>>())
}

pub fn new_model(cfg: &RunConfig, oracle: &Oracle, seed: u64) -> Result<Lpt> {
    let cons = constraints_for(&cfg.dso, oracle);
    Lpt::new(cfg.model.to_config(oracle.vocab().clone(), &cons), seed)
}

/// Model-side labels for finetuning: standardized primary objective plus
/// one feasibility indicator per constraint.
pub fn standardize(data: &[LabeledSample], constraints: &[Constraint]) -> Vec<LabeledSample> {
    let primary: Vec<f64> = data.iter().map(|s| s.y[0]).collect();
    let scaler = TargetScaler::fit(&primary);
    data.iter()
        .map(|s| {
            let mut y = vec![scaler.scale(s.y[0])];
            y.extend(constraints.iter().map(|c| if c.holds(&s.y) { 1.0 } else { 0.0 }));
            LabeledSample::oracle(s.x.clone(), y)
        })
        .collect()
}

/// Uniformly weighted training with fresh-chain posterior sampling.
pub fn train(
    model: &mut Lpt,
    data: &[LabeledSample],
    tc: &TrainConfig,
    posterior: &LangevinConfig,
    seed: u64,
    log: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    if tc.epochs == 0 || data.is_empty() {
        return Ok(Vec::new());
    }
    let mut trainer = Trainer::new(model, tc.clone())?;
    if let Some(p) = log {
        trainer.log_to(p)?;
    }
    let mut bank = ChainBank::new(data.len(), model.latent_dim(), false, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trainer.fit(model, data, &vec![1.0; data.len()], &mut bank, posterior, &mut rng)
}

/// Offline data plus a pretrained and finetuned model.
pub struct Prepared {
    pub offline: Vec<LabeledSample>,
    pub model: Lpt,
}

pub fn prepare(cfg: &RunConfig, seed: u64, log_dir: Option<&Path>) -> Result<Prepared> {
    let oracle = Oracle::from_def(&cfg.oracle)?;
    let offline = build_offline(&cfg.offline, &oracle, seed)?;
    let mut model = new_model(cfg, &oracle, seed)?;
    let log = |name: &str| log_dir.map(|d| d.join(name));
    train(&mut model, &offline, &cfg.pretrain, &cfg.posterior, seed, log("pretrain_metrics.jsonl").as_deref())?;
    let labeled = standardize(&offline, &constraints_for(&cfg.dso, &oracle));
    train(&mut model, &labeled, &cfg.finetune, &cfg.posterior, seed + 1, log("finetune_metrics.jsonl").as_deref())?;
    Ok(Prepared { offline, model })
}

/// Runs the optimization loop against a fresh (empty-memo) oracle.
pub fn optimize(cfg: &RunConfig, prepared: &Prepared, seed: u64) -> Result<RunOutcome> {
    let oracle = Oracle::from_def(&cfg.oracle)?;
    dso::run(prepared.model.clone(), &prepared.offline, &oracle, &cfg.dso, seed)
}

/// Prepares and optimizes one variant of `base`.
pub fn run_variant(base: &RunConfig, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    let prepared = prepare(&cfg, seed, None)?;
    optimize(&cfg, &prepared, seed)
}

/// Runs several variants on one seed, pretraining once for all variants
/// that share the pretraining configuration.
pub fn run_variants(base: &RunConfig, variants: &[Variant], seed: u64) -> Result<Vec<(Variant, RunOutcome)>> {
    let mut shared: Option<Prepared> = None;
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        let outcome = if v.changes_pretraining() {
            optimize(&cfg, &prepare(&cfg, seed, None)?, seed)?
        } else {
            if shared.is_none() {
                shared = Some(prepare(base, seed, None)?);
            }
            optimize(&cfg, shared.as_ref().unwrap(), seed)?
        };
        out.push((v, outcome));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{LandscapeParams, OracleDef};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::example();
        cfg.oracle = OracleDef::Table(LandscapeParams::new(4, 3));
        cfg.offline = OfflineSpec::Random {
            n: 60,
            below_quantile: Some(0.5),
        };
        cfg.model.k_dim = 4;
        cfg.model.embed = 8;
        cfg.model.prior_hidden = 8;
        cfg.model.ff_hidden = 16;
        cfg.model.blocks = 1;
        cfg.pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        cfg.dso.m_proposals = 16;
        cfg.dso.capacity = 32;
        cfg.dso.max_iters = 2;
        cfg.dso.initial_epochs = 1;
        cfg.dso.train = TrainConfig {
            epochs: 1,
            ..TrainConfig::online(16)
        };
        cfg
    }

    #[test]
    fn offline_respects_quantile() {
        let cfg = tiny();
        let oracle = Oracle::from_def(&cfg.oracle).unwrap();
        let data = build_offline(&cfg.offline, &oracle, 1).unwrap();
        let median = quantile(&oracle, 0, 0.5).unwrap();
        assert_eq!(data.len(), 60);
        assert!(data.iter().all(|s| s.y[0] < median));
        let unique: std::collections::HashSet<_> = data.iter().map(|s| &s.x).collect();
        assert_eq!(unique.len(), 60);
        assert_eq!(oracle.queries(), 0);
        let too_many = OfflineSpec::Random {
            n: 200,
            below_quantile: Some(0.5),
        };
        assert!(matches!(build_offline(&too_many, &oracle, 1), Err(Error::NotEnoughUnique { .. })));
    }

    #[test]
    fn variants_toggle_one_thing() {
        let base = tiny();
        for v in Variant::ABLATIONS {
            let mut cfg = base.clone();
            v.apply(&mut cfg);
            assert_ne!(cfg, base, "{}", v.name());
            let mut dso = cfg.dso.clone();
            match v {
                Variant::PriorSampling => dso.proposal_source = base.dso.proposal_source,
                Variant::UniformWeights => dso.train.weights = base.dso.train.weights,
                Variant::SingleIteration => dso.max_iters = base.dso.max_iters,
                Variant::FrozenPrior => dso.train.freeze_prior = false,
                _ => unreachable!(),
            }
            assert_eq!(dso, base.dso);
        }
    }

    #[test]
    fn frozen_prior_keeps_identity_transform() {
        let mut cfg = tiny();
        Variant::FrozenPrior.apply(&mut cfg);
        let oracle = Oracle::from_def(&cfg.oracle).unwrap();
        let init = new_model(&cfg, &oracle, 5).unwrap();
        let out = run_variant(&tiny(), Variant::FrozenPrior, 5).unwrap();
        for (a, b) in init.params().iter().zip(out.model.params().iter()) {
            if a.group == crate::model::params::Group::Alpha {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn shared_pretraining_matches_separate_runs() {
        let cfg = tiny();
        let both = run_variants(&cfg, &[Variant::Full, Variant::Lambda(5.0)], 2).unwrap();
        let solo = run_variant(&cfg, Variant::Lambda(5.0), 2).unwrap();
        assert_eq!(both[1].1.report.to_json_untimed().unwrap(), solo.report.to_json_untimed().unwrap());
        assert_ne!(both[0].1.report.to_json_untimed().unwrap(), solo.report.to_json_untimed().unwrap());
    }
}
