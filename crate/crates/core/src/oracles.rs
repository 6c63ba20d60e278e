//! Synthetic oracle functions and the metered, memoizing wrapper the
//! optimization loop queries.
//!
//! Every oracle is a pure function of its definition ([`OracleDef`]), so two
//! oracles built from the same JSON agree bit for bit.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{load_dataset, TokenSeq, Vocabulary};

/// Largest space a table oracle will tabulate.
pub const MAX_TABLE: f64 = (1u64 << 20) as f64;

/// A deterministic scorer over one vocabulary.
pub trait Objective: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn n_objectives(&self) -> usize;
    fn eval(&self, x: &TokenSeq) -> Vec<f64>;
    /// Known `(min, max)` of each objective, if any.
    fn range(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Greater,
    Less,
}

/// `y[objective] > bound` (or `<`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub objective: usize,
    pub direction: Direction,
    pub bound: f64,
}

impl Constraint {
    pub fn holds(&self, y: &[f64]) -> bool {
        let v = y[self.objective];
        match self.direction {
            Direction::Greater => v > self.bound,
            Direction::Less => v < self.bound,
        }
    }
}

fn default_alphabet() -> String {
    "ACGT".into()
}
fn default_motifs() -> usize {
    3
}
fn default_motif_len() -> usize {
    4
}
fn default_pairs() -> usize {
    12
}

/// Shape of the seeded landscape shared by the table and smooth-hash kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeParams {
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_motifs")]
    pub motifs: usize,
    #[serde(default = "default_motif_len")]
    pub motif_len: usize,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Amplitude of the per-sequence hashed term in `[-roughness, roughness]`.
    #[serde(default)]
    pub roughness: f64,
    /// Table only: report `(s - min) / (max - min)` instead of raw scores.
    #[serde(default)]
    pub normalized: bool,
}

impl LandscapeParams {
    pub fn new(length: usize, seed: u64) -> Self {
        LandscapeParams {
            alphabet: default_alphabet(),
            length,
            seed,
            motifs: default_motifs(),
            motif_len: default_motif_len(),
            pairs: default_pairs(),
            roughness: 0.0,
            normalized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifParams {
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    pub max_len: usize,
    #[serde(default)]
    pub variable_length: bool,
    /// `(pattern, weight)`; patterns are glyph strings.
    pub motifs: Vec<(String, f64)>,
    #[serde(default)]
    pub length_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDef {
    pub oracle: OracleDef,
    pub direction: Direction,
    pub bound: f64,
}

/// Oracle definition file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleDef {
    Table(LandscapeParams),
    SmoothHash(LandscapeParams),
    Motif(MotifParams),
    Composite {
        primary: Box<OracleDef>,
        #[serde(default)]
        constraints: Vec<ConstraintDef>,
    },
    Noisy {
        base: Box<OracleDef>,
        sigma_pct: f64,
        seed: u64,
        /// Range estimate for bases without a known range.
        #[serde(default)]
        range: Option<(f64, f64)>,
    },
    /// Scores read from a `sequence<TAB>score` file; unknown sequences score `missing`.
    File {
        path: PathBuf,
        #[serde(default = "default_alphabet")]
        alphabet: String,
        length: usize,
        #[serde(default)]
        missing: f64,
    },
}

impl OracleDef {
    pub fn build(&self) -> Result<Box<dyn Objective>> {
        Ok(match self {
            OracleDef::Table(p) => Box::new(TableOracle::new(p)?),
            OracleDef::SmoothHash(p) => {
                if p.normalized {
                    return Err(Error::UnknownRange);
                }
                Box::new(Landscape::new(p)?)
            }
            OracleDef::Motif(p) => Box::new(MotifOracle::new(p)?),
            OracleDef::Composite { primary, constraints } => {
                let members = constraints.iter().map(|c| c.oracle.build()).collect::<Result<Vec<_>>>()?;
                Box::new(CompositeOracle::new(primary.build()?, members)?)
            }
            OracleDef::Noisy {
                base,
                sigma_pct,
                seed,
                range,
            } => Box::new(NoisyOracle::new(base.build()?, *sigma_pct, *seed, *range)?),
            OracleDef::File {
                path,
                alphabet,
                length,
                missing,
            } => {
                let vocab = Vocabulary::from_chars(alphabet, *length, false)?;
                let rows = load_dataset(path, &vocab)?;
                Box::new(LookupOracle::new(vocab, rows.into_iter().map(|s| (s.x, s.y)), *missing)?)
            }
        })
    }

    /// Constraints implied by a composite definition, indexed into its output vector.
    pub fn constraints(&self) -> Vec<Constraint> {
        match self {
            OracleDef::Composite { constraints, .. } => constraints
                .iter()
                .enumerate()
                .map(|(i, c)| Constraint {
                    objective: i + 1,
                    direction: c.direction,
                    bound: c.bound,
                })
                .collect(),
            OracleDef::Noisy { base, .. } => base.constraints(),
            _ => Vec::new(),
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of `(seed, tokens)`.
pub fn seq_hash(seed: u64, x: &TokenSeq) -> u64 {
    let mut h = mix(seed ^ 0x243f_6a88_85a3_08d3);
    for &t in x.tokens() {
        h = mix(h ^ t as u64);
    }
    mix(h ^ x.len() as u64)
}

/// Seeded fitness landscape: per-site effects, position-weight-matrix motif
/// matches (best offset) and pairwise epistasis, plus an optional hashed
/// roughness term. Evaluated lazily; this is the `smooth_hash` kind.
#[derive(Debug, Clone)]
pub struct Landscape {
    vocab: Vocabulary,
    seed: u64,
    site: Vec<Vec<f64>>,
    pwms: Vec<(f64, Vec<Vec<f64>>)>,
    pairs: Vec<(usize, usize, Vec<Vec<f64>>)>,
    roughness: f64,
}

impl Landscape {
    pub fn new(p: &LandscapeParams) -> Result<Self> {
        let vocab = Vocabulary::from_chars(&p.alphabet, p.length, false)?;
        let v = vocab.n_symbols();
        let len = p.length;
        if p.motif_len == 0 || p.motif_len > len {
            return Err(Error::Config(format!("motif_len must lie in 1..={len}")));
        }
        if len < 2 && p.pairs > 0 {
            return Err(Error::Config("epistatic pairs need length >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let normal = |scale: f64, rng: &mut ChaCha8Rng| scale * rng.sample::<f64, _>(StandardNormal);
        let site = (0..len).map(|_| (0..v).map(|_| normal(0.5, &mut rng)).collect()).collect();
        let pwms = (0..p.motifs)
            .map(|_| {
                let w = rng.random_range(0.5..1.5);
                let m = (0..p.motif_len).map(|_| (0..v).map(|_| normal(1.0, &mut rng)).collect()).collect();
                (w, m)
            })
            .collect();
        let pairs = (0..p.pairs)
            .map(|_| {
                let i = rng.random_range(0..len);
                let mut j = rng.random_range(0..len - 1);
                if j >= i {
                    j += 1;
                }
                let table = (0..v).map(|_| (0..v).map(|_| normal(0.7, &mut rng)).collect()).collect();
                (i.min(j), i.max(j), table)
            })
            .collect();
        Ok(Landscape {
            vocab,
            seed: p.seed,
            site,
            pwms,
            pairs,
            roughness: p.roughness,
        })
    }

    pub fn score(&self, x: &TokenSeq) -> f64 {
        let t: Vec<usize> = x.ids().collect();
        let mut s: f64 = t.iter().enumerate().map(|(i, &a)| self.site[i][a]).sum();
        for (w, pwm) in &self.pwms {
            let best = (0..=t.len() - pwm.len())
                .map(|o| pwm.iter().enumerate().map(|(p, row)| row[t[o + p]]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            s += w * best;
        }
        for (i, j, table) in &self.pairs {
            s += table[t[*i]][t[*j]];
        }
        if self.roughness != 0.0 {
            let u = (seq_hash(self.seed, x) >> 11) as f64 / (1u64 << 53) as f64;
            s += self.roughness * (2.0 * u - 1.0);
        }
        s
    }
}

impl Objective for Landscape {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn n_objectives(&self) -> usize {
        1
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        vec![self.score(x)]
    }
}

/// Fully tabulated [`Landscape`] with its exact range.
#[derive(Debug, Clone)]
pub struct TableOracle {
    landscape: Landscape,
    table: Vec<f64>,
    min: f64,
    max: f64,
    normalized: bool,
}

impl TableOracle {
    pub fn new(p: &LandscapeParams) -> Result<Self> {
        let landscape = Landscape::new(p)?;
        let size = landscape.vocab.space_size();
        if size > MAX_TABLE {
            return Err(Error::SpaceTooLarge { size });
        }
        let table: Vec<f64> = (0..size as usize)
            .into_par_iter()
            .map(|i| landscape.score(&index_to_seq(i, &landscape.vocab)))
            .collect();
        let min = table.iter().copied().fold(f64::INFINITY, f64::min);
        let max = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > min, "degenerate table oracle");
        Ok(TableOracle {
            landscape,
            table,
            min,
            max,
            normalized: p.normalized,
        })
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn normalize(&self, score: f64) -> f64 {
        (score - self.min) / (self.max - self.min)
    }
}

impl Objective for TableOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.landscape.vocab
    }
    fn n_objectives(&self) -> usize {
        1
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        let s = self.table[seq_to_index(x, &self.landscape.vocab)];
        vec![if self.normalized { self.normalize(s) } else { s }]
    }
    fn range(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![if self.normalized { (0.0, 1.0) } else { (self.min, self.max) }])
    }
}

/// Base-|V| index of a fixed-length sequence (first token most significant).
pub fn seq_to_index(x: &TokenSeq, vocab: &Vocabulary) -> usize {
    let v = vocab.n_symbols();
    x.ids().fold(0, |acc, t| acc * v + t)
}

pub fn index_to_seq(mut i: usize, vocab: &Vocabulary) -> TokenSeq {
    let v = vocab.n_symbols();
    let mut ids = vec![0; vocab.max_len()];
    for slot in ids.iter_mut().rev() {
        *slot = i % v;
        i /= v;
    }
    TokenSeq::from_ids(&ids)
}

/// Every sequence in the vocabulary's space, in index order (shorter first
/// for variable-length vocabularies).
pub fn enumerate_space(vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let size = vocab.space_size();
    if size > MAX_TABLE {
        return Err(Error::SpaceTooLarge { size });
    }
    let v = vocab.n_symbols();
    let lengths: Vec<usize> = if vocab.is_fixed_length() {
        vec![vocab.max_len()]
    } else {
        (1..=vocab.max_len()).collect()
    };
    let mut out = Vec::with_capacity(size as usize);
    for len in lengths {
        let count = v.pow(len as u32);
        for mut i in 0..count {
            let mut ids = vec![0; len];
            for slot in ids.iter_mut().rev() {
                *slot = i % v;
                i /= v;
            }
            out.push(TokenSeq::from_ids(&ids));
        }
    }
    Ok(out)
}

/// `Σ weight · (overlapping occurrences of pattern) − length_penalty · len(x)`.
#[derive(Debug, Clone)]
pub struct MotifOracle {
    vocab: Vocabulary,
    motifs: Vec<(TokenSeq, f64)>,
    length_penalty: f64,
}

impl MotifOracle {
    pub fn new(p: &MotifParams) -> Result<Self> {
        let vocab = Vocabulary::from_chars(&p.alphabet, p.max_len, p.variable_length)?;
        let motifs = p
            .motifs
            .iter()
            .map(|(pat, w)| {
                // patterns may be shorter than a fixed task length
                let probe = Vocabulary::from_chars(&p.alphabet, pat.chars().count().max(1), true)?;
                Ok((crate::seqcore::encode(pat, &probe)?, *w))
            })
            .collect::<Result<_>>()?;
        Ok(MotifOracle {
            vocab,
            motifs,
            length_penalty: p.length_penalty,
        })
    }

    pub fn count(x: &TokenSeq, pattern: &TokenSeq) -> usize {
        let (x, p) = (x.tokens(), pattern.tokens());
        if p.is_empty() || p.len() > x.len() {
            return 0;
        }
        x.windows(p.len()).filter(|w| *w == p).count()
    }
}

impl Objective for MotifOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn n_objectives(&self) -> usize {
        1
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        let hits: f64 = self.motifs.iter().map(|(p, w)| w * Self::count(x, p) as f64).sum();
        vec![hits - self.length_penalty * x.len() as f64]
    }
}

/// `[y1, y2, …]` from a primary oracle and constraint oracles.
pub struct CompositeOracle {
    primary: Box<dyn Objective>,
    members: Vec<Box<dyn Objective>>,
}

impl CompositeOracle {
    pub fn new(primary: Box<dyn Objective>, members: Vec<Box<dyn Objective>>) -> Result<Self> {
        if members.iter().any(|m| m.vocab() != primary.vocab()) {
            return Err(Error::VocabMismatch);
        }
        Ok(CompositeOracle { primary, members })
    }
}

impl Objective for CompositeOracle {
    fn vocab(&self) -> &Vocabulary {
        self.primary.vocab()
    }
    fn n_objectives(&self) -> usize {
        self.primary.n_objectives() + self.members.iter().map(|m| m.n_objectives()).sum::<usize>()
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        let mut y = self.primary.eval(x);
        for m in &self.members {
            y.extend(m.eval(x));
        }
        y
    }
    fn range(&self) -> Option<Vec<(f64, f64)>> {
        let mut r = self.primary.range()?;
        for m in &self.members {
            r.extend(m.range()?);
        }
        Some(r)
    }
}

/// Adds `e ~ N(0, (sigma_pct · range)²)` per objective, drawn once per
/// sequence from a hash of `(seed, x)` so repeated queries agree.
pub struct NoisyOracle {
    base: Box<dyn Objective>,
    sigmas: Vec<f64>,
    seed: u64,
    range: Option<Vec<(f64, f64)>>,
}

impl NoisyOracle {
    pub fn new(base: Box<dyn Objective>, sigma_pct: f64, seed: u64, estimate: Option<(f64, f64)>) -> Result<Self> {
        if !(sigma_pct >= 0.0 && sigma_pct.is_finite()) {
            return Err(Error::Config("sigma_pct must be a non-negative fraction".into()));
        }
        let range = match (base.range(), estimate) {
            (Some(r), _) => r,
            (None, Some(r)) => vec![r; base.n_objectives()],
            (None, None) => return Err(Error::UnknownRange),
        };
        let sigmas = range.iter().map(|(lo, hi)| sigma_pct * (hi - lo)).collect();
        Ok(NoisyOracle {
            range: base.range(),
            base,
            sigmas,
            seed,
        })
    }
}

impl Objective for NoisyOracle {
    fn vocab(&self) -> &Vocabulary {
        self.base.vocab()
    }
    fn n_objectives(&self) -> usize {
        self.base.n_objectives()
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        let mut y = self.base.eval(x);
        if self.sigmas.iter().all(|&s| s == 0.0) {
            return y;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seq_hash(self.seed, x));
        for (v, s) in y.iter_mut().zip(&self.sigmas) {
            let e: f64 = rng.sample(StandardNormal);
            *v += s * e;
        }
        y
    }
    /// The noiseless range, for normalization.
    fn range(&self) -> Option<Vec<(f64, f64)>> {
        self.range.clone()
    }
}

/// Scores looked up from a labeled file.
pub struct LookupOracle {
    vocab: Vocabulary,
    scores: HashMap<TokenSeq, Vec<f64>>,
    width: usize,
    missing: f64,
}

impl LookupOracle {
    pub fn new(vocab: Vocabulary, rows: impl IntoIterator<Item = (TokenSeq, Vec<f64>)>, missing: f64) -> Result<Self> {
        let scores: HashMap<_, _> = rows.into_iter().collect();
        let width = scores.values().next().map_or(1, Vec::len);
        if scores.values().any(|y| y.len() != width) {
            return Err(Error::Config("score file rows have differing widths".into()));
        }
        Ok(LookupOracle {
            vocab,
            scores,
            width,
            missing,
        })
    }
}

impl Objective for LookupOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn n_objectives(&self) -> usize {
        self.width
    }
    fn eval(&self, x: &TokenSeq) -> Vec<f64> {
        self.scores.get(x).cloned().unwrap_or_else(|| vec![self.missing; self.width])
    }
}

/// Budget-metered, memoizing oracle. `queries()` counts cache misses only.
pub struct Oracle {
    inner: Box<dyn Objective>,
    def: Option<OracleDef>,
    memo: Mutex<HashMap<TokenSeq, Vec<f64>>>,
    queries: AtomicU64,
}

impl Oracle {
    pub fn new(inner: Box<dyn Objective>) -> Self {
        Oracle {
            inner,
            def: None,
            memo: Mutex::new(HashMap::new()),
            queries: AtomicU64::new(0),
        }
    }

    pub fn from_def(def: &OracleDef) -> Result<Self> {
        let mut o = Self::new(def.build()?);
        o.def = Some(def.clone());
        Ok(o)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_def(&serde_json::from_str(&text)?)
    }

    pub fn def(&self) -> Option<&OracleDef> {
        self.def.as_ref()
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    pub fn n_objectives(&self) -> usize {
        self.inner.n_objectives()
    }

    pub fn range(&self) -> Option<Vec<(f64, f64)>> {
        self.inner.range()
    }

    /// Constraints declared by the definition (empty for plain oracles).
    pub fn constraints(&self) -> Vec<Constraint> {
        self.def.as_ref().map(OracleDef::constraints).unwrap_or_default()
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn is_cached(&self, x: &TokenSeq) -> bool {
        self.memo.lock().unwrap().contains_key(x)
    }

    /// Metered evaluation.
    pub fn query(&self, x: &TokenSeq) -> Result<Vec<f64>> {
        self.vocab().check(x)?;
        if let Some(y) = self.memo.lock().unwrap().get(x) {
            return Ok(y.clone());
        }
        let y = self.inner.eval(x);
        let mut memo = self.memo.lock().unwrap();
        // another thread may have filled the slot meanwhile; count once
        if let Some(prev) = memo.get(x) {
            return Ok(prev.clone());
        }
        memo.insert(x.clone(), y.clone());
        self.queries.fetch_add(1, Ordering::SeqCst);
        Ok(y)
    }

    /// Seeds the memo without charging a query (used when resuming a run).
    pub fn preload(&self, x: TokenSeq, y: Vec<f64>) {
        self.memo.lock().unwrap().entry(x).or_insert(y);
    }

    /// Memo contents in token order.
    pub fn memo_entries(&self) -> Vec<(TokenSeq, Vec<f64>)> {
        let mut v: Vec<_> = self.memo.lock().unwrap().iter().map(|(x, y)| (x.clone(), y.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Unmetered evaluation, for evaluation and brute-force reference only.
    pub fn peek(&self, x: &TokenSeq) -> Vec<f64> {
        self.inner.eval(x)
    }
}

/// Exhaustive scan of an enumerable oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub size: usize,
    pub max: f64,
    pub argmax: String,
    pub min: f64,
    /// Ranking scores sorted descending.
    #[serde(skip)]
    pub sorted: Vec<f64>,
}

impl BruteForce {
    /// Score a result must reach to lie within the best `fraction` of the space.
    pub fn top_fraction_threshold(&self, fraction: f64) -> f64 {
        let k = ((fraction * self.size as f64).ceil() as usize).clamp(1, self.size);
        self.sorted[k - 1]
    }

    /// Normalized `(s - min) / (max - min)`.
    pub fn normalize(&self, s: f64) -> f64 {
        (s - self.min) / (self.max - self.min)
    }
}

/// Scans every sequence, ranking by `rank(y)`; infeasible sequences can be
/// excluded by returning `None`.
pub fn brute_force<F>(oracle: &Oracle, rank: F) -> Result<BruteForce>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let vocab = oracle.vocab();
    let space = enumerate_space(vocab)?;
    let scored: Vec<(usize, f64)> = space
        .par_iter()
        .enumerate()
        .filter_map(|(i, x)| rank(&oracle.peek(x)).map(|s| (i, s)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Config("no sequence satisfies the ranking filter".into()));
    }
    let (best_i, max) = scored
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    let mut sorted: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(BruteForce {
        size: space.len(),
        max,
        argmax: crate::seqcore::decode(&space[best_i], vocab),
        min: *sorted.last().unwrap(),
        sorted,
    })
}

/// The value below which a `fraction` of the space lies for one objective
/// (used to place a constraint bound).
pub fn quantile(oracle: &Oracle, objective: usize, fraction: f64) -> Result<f64> {
    let space = enumerate_space(oracle.vocab())?;
    let mut vals: Vec<f64> = space.par_iter().map(|x| oracle.peek(x)[objective]).collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let k = ((fraction * vals.len() as f64) as usize).min(vals.len() - 1);
    Ok(vals[k])
}
