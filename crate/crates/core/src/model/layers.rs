//! Parameter layout and initialization for the three model factors.

use rand::Rng;

use super::params::{Group, ParamStore};
use super::ModelConfig;
use crate::tensor::Mat;

fn linear<R: Rng>(store: &mut ParamStore, name: &str, group: Group, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.add(name, group, true, Mat::randn(fan_in, fan_out, std, rng))
}

fn bias(store: &mut ParamStore, name: &str, group: Group, width: usize) -> usize {
    store.add(name, group, false, Mat::zeros(1, width))
}

fn norm(store: &mut ParamStore, name: &str, group: Group, width: usize) -> (usize, usize) {
    let g = store.add(
        format!("{name}.gain"),
        group,
        false,
        Mat::from_vec(1, width, vec![1.0; width]),
    );
    let b = bias(store, &format!("{name}.bias"), group, width);
    (g, b)
}

/// Row-shift matrix: `(S · X)[i] = X[i + offset]` (zero outside).
pub(super) fn shift(k: usize, offset: isize) -> Mat {
    let mut s = Mat::zeros(k, k);
    for i in 0..k {
        let j = i as isize + offset;
        if j >= 0 && (j as usize) < k {
            s.set(i, j as usize, 1.0);
        }
    }
    s
}

/// Average-pool pairs of rows (`ceil(k/2) × k`) and the matching nearest
/// upsample (`k × ceil(k/2)`).
pub(super) fn pool_and_upsample(k: usize) -> (Mat, Mat) {
    let half = k.div_ceil(2);
    let mut pool = Mat::zeros(half, k);
    let mut up = Mat::zeros(k, half);
    for i in 0..k {
        let p = i / 2;
        let members = if 2 * p + 1 < k { 2.0 } else { 1.0 };
        pool.set(p, i, 1.0 / members);
        up.set(i, p, 1.0);
    }
    (pool, up)
}

/// Residual 1-D U-Net over the prompt-token axis. The output convolution
/// starts at zero so the transform is the identity at initialization.
#[derive(Debug, Clone, PartialEq)]
pub(super) struct PriorIds {
    pub conv_in_w: [usize; 3],
    pub conv_in_b: usize,
    pub mid_w: usize,
    pub mid_b: usize,
    pub merge_w: usize,
    pub merge_b: usize,
    pub conv_out_w: [usize; 3],
    pub conv_out_b: usize,
}

impl PriorIds {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (kd, h) = (cfg.k_dim, cfg.prior_hidden);
        let g = Group::Alpha;
        let taps = if cfg.k_tokens == 1 { 1 } else { 3 };
        let tap_std = 1.0 / ((kd * taps) as f64).sqrt();
        let conv_in_w = [0, 1, 2].map(|j| store.add(format!("prior.conv_in.w{j}"), g, true, Mat::randn(kd, h, tap_std, rng)));
        let conv_in_b = bias(store, "prior.conv_in.b", g, h);
        let mid_w = linear(store, "prior.mid.w", g, h, h, rng);
        let mid_b = bias(store, "prior.mid.b", g, h);
        let merge_w = linear(store, "prior.merge.w", g, 2 * h, h, rng);
        let merge_b = bias(store, "prior.merge.b", g, h);
        let conv_out_w = [0, 1, 2].map(|j| store.add(format!("prior.conv_out.w{j}"), g, true, Mat::zeros(h, kd)));
        let conv_out_b = bias(store, "prior.conv_out.b", g, kd);
        PriorIds {
            conv_in_w,
            conv_in_b,
            mid_w,
            mid_b,
            merge_w,
            merge_b,
            conv_out_w,
            conv_out_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct BlockIds {
    pub ln1: (usize, usize),
    pub self_attn: AttnIds,
    pub ln2: (usize, usize),
    pub cross_attn: AttnIds,
    pub ln3: (usize, usize),
    /// `(w1, b1, w2, b2)`
    pub ff: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct DecoderIds {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockIds>,
    pub ln_f: (usize, usize),
    pub out_w: usize,
    pub out_b: usize,
}

impl DecoderIds {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let g = Group::Beta;
        let e = cfg.embed;
        let vocab = &cfg.vocab;
        let tok_emb = store.add("decoder.tok_emb", g, true, Mat::randn(vocab.n_inputs(), e, 0.5, rng));
        let pos_emb = store.add("decoder.pos_emb", g, true, Mat::randn(vocab.max_len(), e, 0.5, rng));
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let p = format!("decoder.block{b}");
                let attn = |store: &mut ParamStore, rng: &mut R, kind: &str, kv_width: usize| AttnIds {
                    q: linear(store, &format!("{p}.{kind}.q"), g, e, e, rng),
                    k: linear(store, &format!("{p}.{kind}.k"), g, kv_width, e, rng),
                    v: linear(store, &format!("{p}.{kind}.v"), g, kv_width, e, rng),
                    o: linear(store, &format!("{p}.{kind}.o"), g, e, e, rng),
                };
                let ln1 = norm(store, &format!("{p}.ln1"), g, e);
                let self_attn = attn(store, rng, "self", e);
                let ln2 = norm(store, &format!("{p}.ln2"), g, e);
                let cross_attn = attn(store, rng, "cross", cfg.k_dim);
                let ln3 = norm(store, &format!("{p}.ln3"), g, e);
                let ff = (
                    linear(store, &format!("{p}.ff.w1"), g, e, cfg.ff_hidden, rng),
                    bias(store, &format!("{p}.ff.b1"), g, cfg.ff_hidden),
                    linear(store, &format!("{p}.ff.w2"), g, cfg.ff_hidden, e, rng),
                    bias(store, &format!("{p}.ff.b2"), g, e),
                );
                BlockIds {
                    ln1,
                    self_attn,
                    ln2,
                    cross_attn,
                    ln3,
                    ff,
                }
            })
            .collect();
        let ln_f = norm(store, "decoder.ln_f", g, e);
        let out_w = linear(store, "decoder.out.w", g, e, vocab.n_outputs(), rng);
        let out_b = bias(store, "decoder.out.b", g, vocab.n_outputs());
        DecoderIds {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            out_w,
            out_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct PredictorIds {
    pub layers: Vec<(usize, usize)>,
}

impl PredictorIds {
    pub fn init<R: Rng>(cfg: &ModelConfig, head: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let g = Group::Gamma;
        let d = cfg.latent_dim();
        let h = cfg.predictor_width();
        let n = cfg.predictor_layers;
        let layers = (0..n)
            .map(|l| {
                let fan_in = if l == 0 { d } else { h };
                let fan_out = if l + 1 == n { 1 } else { h };
                (
                    linear(store, &format!("predictor{head}.l{l}.w"), g, fan_in, fan_out, rng),
                    bias(store, &format!("predictor{head}.l{l}.b"), g, fan_out),
                )
            })
            .collect();
        PredictorIds { layers }
    }
}
