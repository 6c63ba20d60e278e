//! The latent prompt transformer: a learnable prior transform from Gaussian
//! noise to prompt vectors, a causal decoder that cross-attends to the prompt
//! at every block, and property predictor heads on the flattened prompt.

pub mod checkpoint;
mod layers;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{TokenSeq, Vocabulary};
use crate::tape::{sigmoid, Gradients, Tape, Var};
use crate::tensor::Mat;
use layers::{DecoderIds, PredictorIds, PriorIds};
use params::{Group, ParamGrads, ParamStore};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Gaussian likelihood with fixed observation variance.
    Regression { sigma2: f64 },
    /// Bernoulli likelihood through a sigmoid.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: HeadKind,
}

impl PropertySpec {
    pub fn regression(name: impl Into<String>, sigma2: f64) -> Self {
        PropertySpec {
            name: name.into(),
            kind: HeadKind::Regression { sigma2 },
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        PropertySpec {
            name: name.into(),
            kind: HeadKind::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: Vocabulary,
    /// Number of prompt vectors.
    #[serde(default = "defaults::k_tokens")]
    pub k_tokens: usize,
    /// Width of each prompt vector.
    #[serde(default = "defaults::k_dim")]
    pub k_dim: usize,
    /// Channel width inside the prior transform.
    #[serde(default = "defaults::prior_hidden")]
    pub prior_hidden: usize,
    #[serde(default = "defaults::embed")]
    pub embed: usize,
    #[serde(default = "defaults::blocks")]
    pub blocks: usize,
    #[serde(default = "defaults::heads")]
    pub attn_heads: usize,
    #[serde(default = "defaults::ff_hidden")]
    pub ff_hidden: usize,
    /// Hidden width of predictor MLPs; defaults to `embed`.
    #[serde(default)]
    pub predictor_hidden: Option<usize>,
    /// Linear layers per predictor head (1 gives a linear head).
    #[serde(default = "defaults::predictor_layers")]
    pub predictor_layers: usize,
    #[serde(default)]
    pub properties: Vec<PropertySpec>,
}

mod defaults {
    pub fn k_tokens() -> usize {
        2
    }
    pub fn k_dim() -> usize {
        16
    }
    pub fn prior_hidden() -> usize {
        32
    }
    pub fn embed() -> usize {
        32
    }
    pub fn blocks() -> usize {
        2
    }
    pub fn heads() -> usize {
        2
    }
    pub fn ff_hidden() -> usize {
        64
    }
    pub fn predictor_layers() -> usize {
        3
    }
}

impl ModelConfig {
    /// Desk-scale defaults for the given vocabulary with one regression head.
    pub fn desk(vocab: Vocabulary) -> Self {
        ModelConfig {
            vocab,
            k_tokens: defaults::k_tokens(),
            k_dim: defaults::k_dim(),
            prior_hidden: defaults::prior_hidden(),
            embed: defaults::embed(),
            blocks: defaults::blocks(),
            attn_heads: defaults::heads(),
            ff_hidden: defaults::ff_hidden(),
            predictor_hidden: None,
            predictor_layers: defaults::predictor_layers(),
            properties: vec![PropertySpec::regression("y", 1.0)],
        }
    }

    /// Four 256-wide prompt vectors, three decoder blocks of width 256.
    pub fn large(vocab: Vocabulary) -> Self {
        ModelConfig {
            k_tokens: 4,
            k_dim: 256,
            prior_hidden: 256,
            embed: 256,
            blocks: 3,
            attn_heads: 4,
            ff_hidden: 1024,
            ..Self::desk(vocab)
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.k_tokens * self.k_dim
    }

    pub fn predictor_width(&self) -> usize {
        self.predictor_hidden.unwrap_or(self.embed)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_tokens", self.k_tokens),
            ("k_dim", self.k_dim),
            ("prior_hidden", self.prior_hidden),
            ("embed", self.embed),
            ("attn_heads", self.attn_heads),
            ("ff_hidden", self.ff_hidden),
            ("predictor_layers", self.predictor_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.embed % self.attn_heads != 0 {
            return Err(Error::Config("model.embed must be divisible by attn_heads".into()));
        }
        for p in &self.properties {
            if let HeadKind::Regression { sigma2 } = p.kind {
                if !(sigma2 > 0.0 && sigma2.is_finite()) {
                    return Err(Error::Config(format!("property {} needs sigma2 > 0", p.name)));
                }
            }
        }
        Ok(())
    }
}

/// What the log-density in latent space conditions on.
#[derive(Debug, Clone, Copy)]
pub struct Evidence<'a> {
    pub x: Option<&'a TokenSeq>,
    /// One label per property head.
    pub y: Option<&'a [f64]>,
    /// Multiplier on the predictor terms only.
    pub guidance: f64,
}

impl<'a> Evidence<'a> {
    pub fn new(x: Option<&'a TokenSeq>, y: Option<&'a [f64]>) -> Self {
        Evidence { x, y, guidance: 1.0 }
    }

    pub fn with_guidance(mut self, guidance: f64) -> Self {
        self.guidance = guidance;
        self
    }
}

/// Log-likelihood terms reported alongside gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lpt {
    cfg: ModelConfig,
    store: ParamStore,
    prior: PriorIds,
    decoder: DecoderIds,
    predictors: Vec<PredictorIds>,
    shifts: [Mat; 3],
    pool: Option<(Mat, Mat)>,
}

impl Lpt {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let prior = PriorIds::init(&cfg, &mut store, &mut rng);
        let decoder = DecoderIds::init(&cfg, &mut store, &mut rng);
        let predictors = (0..cfg.properties.len())
            .map(|i| PredictorIds::init(&cfg, i, &mut store, &mut rng))
            .collect();
        let k = cfg.k_tokens;
        let shifts = [layers::shift(k, -1), Mat::identity(k), layers::shift(k, 1)];
        let pool = (k >= 2).then(|| layers::pool_and_upsample(k));
        let model = Lpt {
            cfg,
            store,
            prior,
            decoder,
            predictors,
            shifts,
            pool,
        };
        log::debug!("model with {} parameters", model.store.scalar_count());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.cfg.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim()
    }

    pub fn n_properties(&self) -> usize {
        self.predictors.len()
    }

    pub fn property(&self, i: usize) -> &PropertySpec {
        &self.cfg.properties[i]
    }

    /// Parameter id of the decoder's output projection weight and bias.
    pub fn output_projection_ids(&self) -> (usize, usize) {
        (self.decoder.out_w, self.decoder.out_b)
    }

    /// Parameter ids of a predictor head's layers as `(weight, bias)` pairs.
    pub fn predictor_layer_ids(&self, head: usize) -> &[(usize, usize)] {
        &self.predictors[head].layers
    }

    fn check_z0(&self, z0: &[f64]) -> Result<()> {
        if z0.len() != self.latent_dim() {
            return Err(Error::dims(self.latent_dim(), z0.len()));
        }
        Ok(())
    }

    fn check_prompt(&self, z: &Mat) -> Result<()> {
        if z.shape() != (self.cfg.k_tokens, self.cfg.k_dim) {
            return Err(Error::dims(
                format!("{}x{}", self.cfg.k_tokens, self.cfg.k_dim),
                format!("{}x{}", z.rows, z.cols),
            ));
        }
        Ok(())
    }

    // ---- tape-level building blocks ----

    /// `U_α(z0)` on the tape; `z0` is a `1 × d` node.
    pub(crate) fn prior_on(&self, t: &mut Tape, z0: Var) -> Var {
        let (k, kd) = (self.cfg.k_tokens, self.cfg.k_dim);
        let x = t.reshape(z0, k, kd);
        let p = &self.prior;
        let h1 = self.conv3(t, x, &p.conv_in_w, p.conv_in_b);
        let h1 = t.silu(h1);
        let (pool, up) = match &self.pool {
            Some((pool, up)) => (Some(t.constant(pool.clone())), Some(t.constant(up.clone()))),
            None => (None, None),
        };
        let m = match pool {
            Some(pm) => t.matmul(pm, h1),
            None => h1,
        };
        let w = t.param(p.mid_w);
        let b = t.param(p.mid_b);
        let h2 = t.matmul(m, w);
        let h2 = t.add_row(h2, b);
        let h2 = t.silu(h2);
        let u = match up {
            Some(um) => t.matmul(um, h2),
            None => h2,
        };
        let cat = t.concat_cols(&[h1, u]);
        let w = t.param(p.merge_w);
        let b = t.param(p.merge_b);
        let h3 = t.matmul(cat, w);
        let h3 = t.add_row(h3, b);
        let h3 = t.silu(h3);
        let out = self.conv3(t, h3, &p.conv_out_w, p.conv_out_b);
        t.add(x, out)
    }

    /// Kernel-3 convolution along the prompt-token axis with zero padding.
    fn conv3(&self, t: &mut Tape, x: Var, w: &[usize; 3], b: usize) -> Var {
        let mut acc = None;
        for (j, &wid) in w.iter().enumerate() {
            if self.cfg.k_tokens == 1 && j != 1 {
                continue;
            }
            let shifted = if j == 1 {
                x
            } else {
                let s = t.constant(self.shifts[j].clone());
                t.matmul(s, x)
            };
            let wv = t.param(wid);
            let term = t.matmul(shifted, wv);
            acc = Some(match acc {
                Some(a) => t.add(a, term),
                None => term,
            });
        }
        let bias = t.param(b);
        t.add_row(acc.expect("at least the centre tap"), bias)
    }

    /// Decoder logits (`inputs.len() × n_outputs`) for the given input ids.
    pub(crate) fn decoder_logits_on(&self, t: &mut Tape, z: Var, inputs: &[usize]) -> Var {
        let d = &self.decoder;
        let n = inputs.len();
        let tok = t.param(d.tok_emb);
        let h = t.embed(tok, inputs);
        let pos = t.param(d.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let p = t.embed(pos, &positions);
        let mut h = t.add(h, p);
        for block in &d.blocks {
            let g = t.param(block.ln1.0);
            let b = t.param(block.ln1.1);
            let a = t.layer_norm(h, g, b);
            let sa = self.attention(t, a, a, &block.self_attn, true);
            h = t.add(h, sa);
            let g = t.param(block.ln2.0);
            let b = t.param(block.ln2.1);
            let a = t.layer_norm(h, g, b);
            let ca = self.attention(t, a, z, &block.cross_attn, false);
            h = t.add(h, ca);
            let g = t.param(block.ln3.0);
            let b = t.param(block.ln3.1);
            let a = t.layer_norm(h, g, b);
            let w1 = t.param(block.ff.0);
            let b1 = t.param(block.ff.1);
            let w2 = t.param(block.ff.2);
            let b2 = t.param(block.ff.3);
            let f = t.matmul(a, w1);
            let f = t.add_row(f, b1);
            let f = t.silu(f);
            let f = t.matmul(f, w2);
            let f = t.add_row(f, b2);
            h = t.add(h, f);
        }
        let g = t.param(d.ln_f.0);
        let b = t.param(d.ln_f.1);
        let h = t.layer_norm(h, g, b);
        let w = t.param(d.out_w);
        let b = t.param(d.out_b);
        let logits = t.matmul(h, w);
        t.add_row(logits, b)
    }

    fn attention(&self, t: &mut Tape, query_src: Var, kv_src: Var, ids: &layers::AttnIds, causal: bool) -> Var {
        let heads = self.cfg.attn_heads;
        let dh = self.cfg.embed / heads;
        let wq = t.param(ids.q);
        let wk = t.param(ids.k);
        let wv = t.param(ids.v);
        let wo = t.param(ids.o);
        let q = t.matmul(query_src, wq);
        let k = t.matmul(kv_src, wk);
        let v = t.matmul(kv_src, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hidx in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, hidx * dh, dh),
                    t.slice_cols(k, hidx * dh, dh),
                    t.slice_cols(v, hidx * dh, dh),
                )
            };
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, scale);
            let pr = t.softmax(s, causal);
            outs.push(t.matmul(pr, vh));
        }
        let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
        t.matmul(cat, wo)
    }

    /// Input ids, targets and allowed-class counts for teacher forcing on `x`.
    fn teacher_forcing(&self, x: &TokenSeq) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let vocab = &self.cfg.vocab;
        let mut inputs = Vec::with_capacity(x.len() + 1);
        inputs.push(vocab.bos_id());
        let mut targets: Vec<usize> = x.ids().collect();
        if let Some(eos) = vocab.eos_id() {
            if x.len() < vocab.max_len() {
                targets.push(eos);
            }
        }
        inputs.extend(targets.iter().take(targets.len() - 1).copied());
        let allowed = (0..targets.len()).map(|i| self.allowed_at(i)).collect();
        (inputs, targets, allowed)
    }

    /// Classes that may be emitted at position `i`; EOS is barred at position 0
    /// so every sequence has at least one symbol.
    fn allowed_at(&self, i: usize) -> usize {
        let vocab = &self.cfg.vocab;
        if i == 0 {
            vocab.n_symbols()
        } else {
            vocab.n_outputs()
        }
    }

    /// `1 × T` per-token log-probabilities of `x` given prompt `z`.
    pub(crate) fn decoder_logprob_on(&self, t: &mut Tape, z: Var, x: &TokenSeq) -> Var {
        let (inputs, targets, allowed) = self.teacher_forcing(x);
        let logits = self.decoder_logits_on(t, z, &inputs);
        t.log_softmax_pick(logits, &targets, &allowed)
    }

    /// Raw head output: the mean for regression, the logit for binary heads.
    pub(crate) fn predictor_on(&self, t: &mut Tape, head: usize, z: Var) -> Var {
        let d = self.latent_dim();
        let mut h = t.reshape(z, 1, d);
        let layers = &self.predictors[head].layers;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let wv = t.param(w);
            let bv = t.param(b);
            h = t.matmul(h, wv);
            h = t.add_row(h, bv);
            if i + 1 < layers.len() {
                h = t.silu(h);
            }
        }
        h
    }

    pub(crate) fn predictor_logprob_on(&self, t: &mut Tape, head: usize, y: f64, z: Var) -> Var {
        let out = self.predictor_on(t, head, z);
        match self.cfg.properties[head].kind {
            HeadKind::Regression { sigma2 } => {
                let neg = t.scale(out, -1.0);
                let resid = t.add_const(neg, y);
                let sq = t.mul(resid, resid);
                let scaled = t.scale(sq, -0.5 / sigma2);
                t.add_const(scaled, -0.5 * (LN_2PI + sigma2.ln()))
            }
            HeadKind::Binary => {
                // y·log σ(a) + (1−y)·log σ(−a)
                if y == 1.0 {
                    t.log_sigmoid(out)
                } else {
                    let neg = t.scale(out, -1.0);
                    t.log_sigmoid(neg)
                }
            }
        }
    }

    fn check_labels(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n_properties() {
            return Err(Error::dims(
                format!("{} labels", self.n_properties()),
                format!("{} labels", y.len()),
            ));
        }
        for (spec, &v) in self.cfg.properties.iter().zip(y) {
            match spec.kind {
                HeadKind::Binary if v != 0.0 && v != 1.0 => return Err(Error::InvalidLabel(v)),
                HeadKind::Regression { .. } if !v.is_finite() => return Err(Error::InvalidLabel(v)),
                _ => {}
            }
        }
        Ok(())
    }

    /// Builds `log p0(z0) + log p(x|z) + λ Σ log p(y|z)` (terms present per
    /// `ev`) on the tape. Returns the total and the separate x / y terms.
    pub(crate) fn log_joint_on(
        &self,
        t: &mut Tape,
        z0: Var,
        ev: &Evidence,
        include_prior: bool,
    ) -> (Var, Option<Var>, Option<Var>) {
        let z = self.prior_on(t, z0);
        let mut terms = Vec::new();
        if include_prior {
            let sq = t.mul(z0, z0);
            let s = t.sum_all(sq);
            let s = t.scale(s, -0.5);
            let d = self.latent_dim() as f64;
            terms.push(t.add_const(s, -0.5 * d * LN_2PI));
        }
        let x_term = ev.x.map(|x| {
            let per = self.decoder_logprob_on(t, z, x);
            t.sum_all(per)
        });
        terms.extend(x_term);
        let y_term = ev.y.map(|y| {
            let mut acc: Option<Var> = None;
            for (head, &label) in y.iter().enumerate() {
                let lp = self.predictor_logprob_on(t, head, label, z);
                acc = Some(match acc {
                    Some(a) => t.add(a, lp),
                    None => lp,
                });
            }
            acc.unwrap_or_else(|| t.constant(Mat::scalar(0.0)))
        });
        if let Some(y) = y_term {
            terms.push(if ev.guidance == 1.0 { y } else { t.scale(y, ev.guidance) });
        }
        let mut total = terms[0];
        for &v in &terms[1..] {
            total = t.add(total, v);
        }
        (total, x_term, y_term)
    }

    // ---- public operations ----

    /// `z = U_α(z0)` as a `k_tokens × k_dim` matrix.
    pub fn prior_forward(&self, z0: &[f64]) -> Result<Mat> {
        self.check_z0(z0)?;
        let mut t = Tape::new(&self.store, false);
        let v = t.constant(Mat::row_vector(z0.to_vec()));
        let z = self.prior_on(&mut t, v);
        Ok(t.value(z).clone())
    }

    /// Vector-Jacobian product `(∂z/∂z0)ᵀ · cot` of the prior transform.
    pub fn prior_vjp(&self, z0: &[f64], cot: &Mat) -> Result<Vec<f64>> {
        self.check_z0(z0)?;
        self.check_prompt(cot)?;
        let mut t = Tape::new(&self.store, false);
        let v = t.input(Mat::row_vector(z0.to_vec()));
        let z = self.prior_on(&mut t, v);
        let c = t.constant(cot.clone());
        let prod = t.mul(z, c);
        let s = t.sum_all(prod);
        let g = t.backward(s);
        Ok(g.of(v).map(|m| m.data.clone()).unwrap_or_else(|| vec![0.0; z0.len()]))
    }

    /// `(Σ_t log p(x_t | x_<t, z), per-token terms)`.
    pub fn decoder_logprob(&self, x: &TokenSeq, z: &Mat) -> Result<(f64, Vec<f64>)> {
        self.check_prompt(z)?;
        self.cfg.vocab.check(x)?;
        let mut t = Tape::new(&self.store, false);
        let zv = t.constant(z.clone());
        let per = self.decoder_logprob_on(&mut t, zv, x);
        let per = t.value(per).data.clone();
        Ok((per.iter().sum(), per))
    }

    /// Next-token log-probabilities after `prefix` (masked classes get `-inf`).
    pub fn next_token_logprobs(&self, z: &Mat, prefix: &TokenSeq) -> Result<Vec<f64>> {
        self.check_prompt(z)?;
        let mut t = Tape::new(&self.store, false);
        let zv = t.constant(z.clone());
        let mut inputs = vec![self.cfg.vocab.bos_id()];
        inputs.extend(prefix.ids());
        let logits = self.decoder_logits_on(&mut t, zv, &inputs);
        let lv = t.value(logits);
        Ok(masked_log_softmax(lv.row(lv.rows - 1), self.allowed_at(prefix.len()), 1.0))
    }

    /// Ancestral sampling from `p(x | z)` starting after `prefix`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        z: &Mat,
        prefix: &TokenSeq,
        rng: &mut R,
        temperature: f64,
    ) -> Result<TokenSeq> {
        self.check_prompt(z)?;
        let vocab = &self.cfg.vocab;
        if prefix.len() >= vocab.max_len() {
            return Err(Error::PrefixTooLong {
                len: prefix.len(),
                max_len: vocab.max_len(),
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let mut tokens: Vec<usize> = prefix.ids().collect();
        let mut t = Tape::new(&self.store, false);
        let zv = t.constant(z.clone());
        while tokens.len() < vocab.max_len() {
            let mut inputs = Vec::with_capacity(tokens.len() + 1);
            inputs.push(vocab.bos_id());
            inputs.extend(&tokens);
            let logits = self.decoder_logits_on(&mut t, zv, &inputs);
            let lv = t.value(logits);
            let lp = masked_log_softmax(lv.row(lv.rows - 1), self.allowed_at(tokens.len()), temperature);
            let next = sample_categorical(&lp, rng);
            if Some(next) == vocab.eos_id() {
                break;
            }
            tokens.push(next);
        }
        Ok(TokenSeq::from_ids(&tokens))
    }

    /// Raw head outputs pushed through their link: the predicted mean for
    /// regression heads, `P(y = 1)` for binary heads.
    pub fn predict(&self, z: &Mat) -> Result<Vec<f64>> {
        self.check_prompt(z)?;
        let mut t = Tape::new(&self.store, false);
        let zv = t.constant(z.clone());
        Ok((0..self.n_properties())
            .map(|h| {
                let out = self.predictor_on(&mut t, h, zv);
                let v = t.value(out).data[0];
                match self.cfg.properties[h].kind {
                    HeadKind::Regression { .. } => v,
                    HeadKind::Binary => sigmoid(v),
                }
            })
            .collect())
    }

    pub fn predictor_logprob(&self, head: usize, y: f64, z: &Mat) -> Result<f64> {
        self.check_prompt(z)?;
        if head >= self.n_properties() {
            return Err(Error::dims(format!("head < {}", self.n_properties()), head));
        }
        match self.cfg.properties[head].kind {
            HeadKind::Binary if y != 0.0 && y != 1.0 => return Err(Error::InvalidLabel(y)),
            HeadKind::Regression { .. } if !y.is_finite() => return Err(Error::InvalidLabel(y)),
            _ => {}
        }
        let mut t = Tape::new(&self.store, false);
        let zv = t.constant(z.clone());
        let lp = self.predictor_logprob_on(&mut t, head, y, zv);
        Ok(t.value(lp).data[0])
    }

    /// Gradient of a head's log-likelihood w.r.t. the prompt matrix.
    pub fn predictor_logprob_grad_z(&self, head: usize, y: f64, z: &Mat) -> Result<(f64, Mat)> {
        let value = self.predictor_logprob(head, y, z)?;
        let mut t = Tape::new(&self.store, false);
        let zv = t.input(z.clone());
        let lp = self.predictor_logprob_on(&mut t, head, y, zv);
        let g = t.backward(lp);
        Ok((value, g.of(zv).cloned().unwrap_or_else(|| Mat::zeros(z.rows, z.cols))))
    }

    /// `log p0(z0) + [x] log p(x|z) + λ [y] Σ log p(y|z)` and its gradient in `z0`.
    pub fn joint_logpost_grad(&self, ev: &Evidence, z0: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_z0(z0)?;
        if ev.x.is_none() && ev.y.is_none() {
            return Err(Error::Config("posterior needs a sequence or labels".into()));
        }
        if let Some(x) = ev.x {
            self.cfg.vocab.check(x)?;
        }
        if let Some(y) = ev.y {
            self.check_labels(y)?;
        }
        Ok(self.logpost_grad_unchecked(ev, z0))
    }

    pub(crate) fn logpost_grad_unchecked(&self, ev: &Evidence, z0: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new(&self.store, false);
        let v = t.input(Mat::row_vector(z0.to_vec()));
        let (total, _, _) = self.log_joint_on(&mut t, v, ev, true);
        let value = t.value(total).data[0];
        let g = t.backward(total);
        let grad = g.of(v).map(|m| m.data.clone()).unwrap_or_else(|| vec![0.0; z0.len()]);
        (value, grad)
    }

    /// Per-sample learning gradient at a fixed posterior draw `z0`:
    /// `∇θ [log p(x|U_α(z0)) + Σ log p(y|U_α(z0))]`, with only the terms
    /// present in `ev`. The prior density of `z0` carries no parameters.
    pub fn param_grad(&self, ev: &Evidence, z0: &[f64]) -> Result<(LogLik, ParamGrads)> {
        self.check_z0(z0)?;
        if let Some(x) = ev.x {
            self.cfg.vocab.check(x)?;
        }
        if let Some(y) = ev.y {
            self.check_labels(y)?;
        }
        if ev.x.is_none() && ev.y.is_none() {
            return Ok((LogLik::default(), ParamGrads::zeros_like(&self.store)));
        }
        let mut t = Tape::new(&self.store, true);
        let v = t.constant(Mat::row_vector(z0.to_vec()));
        let (total, xt, yt) = self.log_joint_on(&mut t, v, &Evidence { guidance: 1.0, ..*ev }, false);
        let ll = LogLik {
            x: xt.map(|v| t.value(v).data[0]).unwrap_or(0.0),
            y: yt.map(|v| t.value(v).data[0]).unwrap_or(0.0),
        };
        let Gradients { params, .. } = t.backward(total);
        Ok((ll, params.expect("parameter tracking enabled")))
    }

    /// Log-likelihood value only (no gradients).
    pub fn loglik(&self, ev: &Evidence, z0: &[f64]) -> Result<LogLik> {
        self.check_z0(z0)?;
        let mut t = Tape::new(&self.store, false);
        let v = t.constant(Mat::row_vector(z0.to_vec()));
        let (_, xt, yt) = self.log_joint_on(&mut t, v, &Evidence { guidance: 1.0, ..*ev }, false);
        Ok(LogLik {
            x: xt.map(|v| t.value(v).data[0]).unwrap_or(0.0),
            y: yt.map(|v| t.value(v).data[0]).unwrap_or(0.0),
        })
    }

    pub fn group_of(&self, id: usize) -> Group {
        self.store.get(id).group
    }
}

fn masked_log_softmax(logits: &[f64], allowed: usize, temperature: f64) -> Vec<f64> {
    let row: Vec<f64> = logits[..allowed].iter().map(|v| v / temperature).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut out: Vec<f64> = row.iter().map(|v| v - lse).collect();
    out.resize(logits.len(), f64::NEG_INFINITY);
    out
}

fn sample_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests;
