//! Langevin dynamics over the latent noise vector `z0`.
//!
//! Two targets are used: the training posterior `p(z0 | x, y)` and the
//! property-conditioned `p0(z0) · p(y | U_α(z0))^λ` used to propose new
//! sequences. Chains live in a [`ChainBank`], which is either persistent
//! (warm-started from its previous states) or re-drawn from `N(0, I)` on
//! every call.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Evidence, Lpt};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub n_steps: usize,
    /// Weight on the predictor term (the inverse of a guidance variance).
    pub guidance_weight: f64,
    /// 1.0 for proper Langevin dynamics, 0.0 for noiseless gradient ascent.
    pub noise_scale: f64,
    /// Per-chain gradient norm ceiling applied before each update.
    pub clip_norm: Option<f64>,
    /// Divide the step size by `guidance_weight`, keeping the discretization
    /// stable when the predictor term is sharpened.
    pub scale_step_by_guidance: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            step_size: 0.1,
            n_steps: 15,
            guidance_weight: 1.0,
            noise_scale: 1.0,
            clip_norm: Some(100.0),
            scale_step_by_guidance: true,
        }
    }
}

impl LangevinConfig {
    pub fn effective_step(&self) -> f64 {
        if self.scale_step_by_guidance {
            self.step_size / self.guidance_weight
        } else {
            self.step_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("langevin step_size must be positive".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("langevin n_steps must be at least 1".into()));
        }
        if !(self.guidance_weight > 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Config("guidance_weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_scale) {
            return Err(Error::Config("noise_scale must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Deterministic per-chain RNG stream for `(seed, chain, call)`.
pub fn chain_rng(seed: u64, chain: usize, call: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(call.wrapping_add(0x5bd1_e995))));
    rng.set_stream(chain as u64);
    rng
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainBank {
    states: Vec<Vec<f64>>,
    ages: Vec<u64>,
    persistent: bool,
    seed: u64,
    calls: u64,
    grad_evals: u64,
}

impl ChainBank {
    /// `m` chains in `d` dimensions, initialized from `N(0, I)`.
    pub fn new(m: usize, d: usize, persistent: bool, seed: u64) -> Self {
        let states = (0..m)
            .map(|i| standard_normal_vec(d, &mut chain_rng(seed, i, u64::MAX)))
            .collect();
        ChainBank {
            states,
            ages: vec![0; m],
            persistent,
            seed,
            calls: 0,
            grad_evals: 0,
        }
    }

    pub fn from_states(states: Vec<Vec<f64>>, persistent: bool, seed: u64) -> Self {
        let m = states.len();
        ChainBank {
            states,
            ages: vec![0; m],
            persistent,
            seed,
            calls: 0,
            grad_evals: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_persistent(&self) -> bool {
        self.persistent
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn ages(&self) -> &[u64] {
        &self.ages
    }

    pub fn age(&self, i: usize) -> u64 {
        self.ages[i]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Total gradient evaluations performed by this bank.
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    /// Replaces the bank's chains, carrying over ages given by `ages`.
    pub fn reset_chains(&mut self, states: Vec<Vec<f64>>, ages: Vec<u64>) {
        assert_eq!(states.len(), ages.len());
        self.states = states;
        self.ages = ages;
    }

    /// Fresh `N(0, I)` state for a chain slot (used when a slot changes owner).
    pub fn fresh_state(&self, slot: usize, d: usize) -> Vec<f64> {
        standard_normal_vec(d, &mut chain_rng(self.seed ^ 0xa5a5_a5a5, slot, self.calls))
    }

    /// Chain states as an `m × d` matrix, for checkpoints.
    pub fn to_mat(&self) -> Mat {
        let d = self.states.first().map_or(0, Vec::len);
        Mat::from_vec(self.len(), d, self.states.concat())
    }

    /// Advances every chain `cfg.n_steps` steps under `target`, which maps
    /// `(chain index, z0)` to `(log density, gradient)`.
    pub fn advance<F>(&mut self, cfg: &LangevinConfig, target: F) -> Result<()>
    where
        F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
    {
        let all: Vec<usize> = (0..self.len()).collect();
        self.advance_at(&all, cfg, target)
    }

    /// Advances only the listed chains. `target` receives the position within
    /// `chains` (not the chain index) so callers can zip it with a batch.
    pub fn advance_at<F>(&mut self, chains: &[usize], cfg: &LangevinConfig, target: F) -> Result<()>
    where
        F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
    {
        cfg.validate()?;
        if let Some(&bad) = chains.iter().find(|&&c| c >= self.len()) {
            return Err(Error::dims(format!("chain index < {}", self.len()), bad));
        }
        let call = self.calls;
        self.calls += 1;
        let evals = AtomicU64::new(0);
        let persistent = self.persistent;
        let seed = self.seed;
        let states = &self.states;
        let updated: Vec<Vec<f64>> = chains
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = chain_rng(seed, i, call);
                let mut z = if persistent {
                    states[i].clone()
                } else {
                    standard_normal_vec(states[i].len(), &mut rng)
                };
                for _ in 0..cfg.n_steps {
                    let grad_fn = |v: &[f64]| {
                        evals.fetch_add(1, Ordering::Relaxed);
                        target(k, v)
                    };
                    z = langevin_step(grad_fn, &z, cfg, &mut rng).map_err(|e| match e {
                        Error::NonFiniteGradient { z0, .. } => Error::NonFiniteGradient { chain: i, z0 },
                        other => other,
                    })?;
                }
                Ok(z)
            })
            .collect::<Result<_>>()?;
        for (&i, z) in chains.iter().zip(updated) {
            self.states[i] = z;
            self.ages[i] += cfg.n_steps as u64;
        }
        self.grad_evals += evals.into_inner();
        Ok(())
    }
}

/// One update `z0' = z0 + s·∇log π(z0) + √(2s)·noise_scale·ε`.
pub fn langevin_step<F, R>(mut grad_fn: F, z0: &[f64], cfg: &LangevinConfig, rng: &mut R) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    let (_, mut g) = grad_fn(z0);
    if g.len() != z0.len() {
        return Err(Error::dims(z0.len(), g.len()));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            chain: 0,
            z0: z0.to_vec(),
        });
    }
    if let Some(limit) = cfg.clip_norm {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > limit {
            let k = limit / norm;
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
    let s = cfg.effective_step();
    let noise = (2.0 * s).sqrt() * cfg.noise_scale;
    Ok(z0
        .iter()
        .zip(&g)
        .map(|(z, gv)| {
            let eps: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            z + s * gv + noise * eps
        })
        .collect())
}

/// Advances one chain per item towards `p(z0 | x, y)` (guidance fixed at 1).
pub fn sample_posterior(model: &Lpt, items: &[Evidence], bank: &mut ChainBank, cfg: &LangevinConfig) -> Result<()> {
    if items.len() != bank.len() {
        return Err(Error::dims(format!("{} chains", items.len()), format!("{} chains", bank.len())));
    }
    let all: Vec<usize> = (0..bank.len()).collect();
    sample_posterior_at(model, items, &all, bank, cfg)
}

/// Like [`sample_posterior`], pairing `items[k]` with chain `chains[k]`.
pub fn sample_posterior_at(
    model: &Lpt,
    items: &[Evidence],
    chains: &[usize],
    bank: &mut ChainBank,
    cfg: &LangevinConfig,
) -> Result<()> {
    if items.len() != chains.len() {
        return Err(Error::dims(items.len(), chains.len()));
    }
    let origin = vec![0.0; model.latent_dim()];
    for ev in items {
        // validates x/y against the model once, up front
        model.joint_logpost_grad(&Evidence { guidance: 1.0, ..*ev }, &origin)?;
    }
    bank.advance_at(chains, cfg, |k, z0| {
        model.logpost_grad_unchecked(&Evidence { guidance: 1.0, ..items[k] }, z0)
    })
}

/// Advances every chain towards `p0(z0) · Π p(y_target | U_α(z0))^λ` and
/// returns the chain states with their prompts `U_α(z0)`.
pub fn sample_conditional(
    model: &Lpt,
    y_target: &[f64],
    bank: &mut ChainBank,
    cfg: &LangevinConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Mat>)> {
    if let Some(bad) = y_target.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidLabel(*bad));
    }
    let ev = Evidence::new(None, Some(y_target)).with_guidance(cfg.guidance_weight);
    model.joint_logpost_grad(&ev, &vec![0.0; model.latent_dim()])?;
    bank.advance(cfg, |_, z0| model.logpost_grad_unchecked(&ev, z0))?;
    let prompts = bank
        .states()
        .iter()
        .map(|z0| model.prior_forward(z0))
        .collect::<Result<Vec<_>>>()?;
    Ok((bank.states().to_vec(), prompts))
}
