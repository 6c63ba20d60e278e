//! Vocabularies, token sequences, labeled samples and the capacity-bounded
//! shifting buffer that the optimization loop selects into.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of glyphs plus the sequence-length contract.
///
/// Symbol `i` has token id `i`. Variable-length vocabularies reserve
/// `eos_id = |symbols|`; the begin-of-sequence id comes right after and is
/// only ever fed to the decoder, never emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    max_len: usize,
    variable_length: bool,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    pub const MAX_SYMBOLS: usize = 64;

    pub fn new(symbols: Vec<String>, max_len: usize, variable_length: bool) -> Result<Self> {
        if symbols.is_empty() || symbols.len() > Self::MAX_SYMBOLS {
            return Err(Error::Config(format!(
                "vocabulary needs 1..={} symbols, got {}",
                Self::MAX_SYMBOLS,
                symbols.len()
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let mut lookup = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Config("empty glyph in vocabulary".into()));
            }
            if lookup.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate glyph {s:?}")));
            }
        }
        Ok(Vocabulary {
            symbols,
            max_len,
            variable_length,
            lookup,
        })
    }

    /// One glyph per character of `alphabet`.
    pub fn from_chars(alphabet: &str, max_len: usize, variable_length: bool) -> Result<Self> {
        Self::new(alphabet.chars().map(String::from).collect(), max_len, variable_length)
    }

    /// Fixed-length DNA alphabet `ACGT`.
    pub fn dna(len: usize) -> Self {
        Self::from_chars("ACGT", len, false).expect("static vocabulary")
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_fixed_length(&self) -> bool {
        !self.variable_length
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.variable_length.then_some(self.symbols.len())
    }

    pub fn bos_id(&self) -> usize {
        self.symbols.len() + usize::from(self.variable_length)
    }

    /// Number of classes the decoder can emit (symbols plus EOS when present).
    pub fn n_outputs(&self) -> usize {
        self.symbols.len() + usize::from(self.variable_length)
    }

    /// Rows of the decoder's input embedding table (outputs plus BOS).
    pub fn n_inputs(&self) -> usize {
        self.n_outputs() + 1
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn check(&self, seq: &TokenSeq) -> Result<()> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::SequenceTooShort);
        }
        if len > self.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max_len: self.max_len,
            });
        }
        if self.is_fixed_length() && len != self.max_len {
            return Err(Error::WrongLength {
                len,
                expected: self.max_len,
            });
        }
        if let Some(pos) = seq.tokens().iter().position(|&t| t as usize >= self.n_symbols()) {
            return Err(Error::UnknownSymbol {
                glyph: format!("#{}", seq.tokens()[pos]),
                position: pos,
            });
        }
        Ok(())
    }

    /// Number of distinct sequences the vocabulary admits, as a float so that
    /// huge spaces do not overflow.
    pub fn space_size(&self) -> f64 {
        let v = self.n_symbols() as f64;
        if self.is_fixed_length() {
            v.powi(self.max_len as i32)
        } else {
            (1..=self.max_len).map(|l| v.powi(l as i32)).sum()
        }
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            symbols: Vec<String>,
            max_len: usize,
            #[serde(default)]
            variable_length: bool,
        }
        let raw = Raw::deserialize(de)?;
        let mut v = Vocabulary::new(raw.symbols, raw.max_len, raw.variable_length)
            .map_err(serde::de::Error::custom)?;
        v.rebuild_lookup();
        Ok(v)
    }
}

/// A sequence of symbol ids. Ordering is lexicographic on ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(Vec<u16>);

impl TokenSeq {
    pub fn new(tokens: Vec<u16>) -> Self {
        TokenSeq(tokens)
    }

    pub fn from_ids(ids: &[usize]) -> Self {
        TokenSeq(ids.iter().map(|&i| i as u16).collect())
    }

    pub fn tokens(&self) -> &[u16] {
        &self.0
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&t| t as usize)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn starts_with(&self, prefix: &TokenSeq) -> bool {
        self.0.starts_with(&prefix.0)
    }
}

/// Tokenizes `text` by longest glyph match.
pub fn encode(text: &str, vocab: &Vocabulary) -> Result<TokenSeq> {
    if text.is_empty() {
        return Err(Error::SequenceTooShort);
    }
    let longest = vocab.symbols.iter().map(|s| s.len()).max().unwrap_or(1);
    let mut tokens = Vec::new();
    let mut rest = text;
    let mut position = 0;
    while !rest.is_empty() {
        let mut matched = None;
        let mut cut = longest.min(rest.len());
        while cut > 0 {
            if rest.is_char_boundary(cut) {
                if let Some(&id) = vocab.lookup.get(&rest[..cut]) {
                    matched = Some((id, cut));
                    break;
                }
            }
            cut -= 1;
        }
        let Some((id, used)) = matched else {
            let glyph = rest.chars().next().map(String::from).unwrap_or_default();
            return Err(Error::UnknownSymbol { glyph, position });
        };
        tokens.push(id as u16);
        position += rest[..used].chars().count();
        rest = &rest[used..];
    }
    if tokens.len() > vocab.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: vocab.max_len,
        });
    }
    Ok(TokenSeq(tokens))
}

pub fn decode(seq: &TokenSeq, vocab: &Vocabulary) -> String {
    seq.ids()
        .map(|i| vocab.symbols.get(i).map(String::as_str).unwrap_or("?"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Latent noise vector that produced (or explains) `x`, when known.
    pub z0: Option<Vec<f64>>,
    pub x: TokenSeq,
    /// One entry per objective.
    pub y: Vec<f64>,
    /// True when every entry of `y` came from an oracle call.
    pub y_is_oracle: bool,
}

impl LabeledSample {
    pub fn oracle(x: TokenSeq, y: Vec<f64>) -> Self {
        LabeledSample {
            z0: None,
            x,
            y,
            y_is_oracle: true,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a `sequence<TAB>score[<TAB>score...]` file.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<LabeledSample>> {
    parse_dataset(&read_text(path.as_ref())?, vocab)
}

pub fn parse_dataset(text: &str, vocab: &Vocabulary) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let seq = fields.next().unwrap_or_default();
        let y = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad score {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if y.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "expected sequence<TAB>score".into(),
            });
        }
        let x = encode(seq, vocab)?;
        vocab.check(&x)?;
        out.push(LabeledSample::oracle(x, y));
    }
    Ok(out)
}

/// Like [`load_dataset`] but scores are optional; used for sequence-only pretraining.
pub fn load_sequences(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let text = read_text(path.as_ref())?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let seq = line.split('\t').next().unwrap_or_default();
        let x = encode(seq, vocab)?;
        vocab.check(&x)?;
        out.push(x);
    }
    Ok(out)
}

pub fn format_dataset<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&decode(&s.x, vocab));
        for v in &s.y {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample: LabeledSample,
    /// Ranking score assigned when the sample entered the buffer.
    pub score: f64,
}

/// The online buffer: at most `capacity` oracle-labeled samples kept in
/// descending ranking order, one copy per distinct sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftingDataset {
    capacity: usize,
    entries: Vec<RankedSample>,
}

impl ShiftingDataset {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ShiftingDataset {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[RankedSample] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [RankedSample] {
        &mut self.entries
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.score)
    }

    /// Ranking score of the n-th entry once the buffer is full; `None` before.
    pub fn threshold(&self) -> Option<f64> {
        self.is_full().then(|| self.entries[self.capacity - 1].score)
    }

    pub fn contains(&self, x: &TokenSeq) -> bool {
        self.entries.iter().any(|e| &e.sample.x == x)
    }

    /// Top-n of the union of the buffer and `proposals` under `rank`,
    /// deduplicated by sequence.
    ///
    /// Ties are broken in favour of incumbents, then by lexicographic token
    /// order, so repeated merges of the same proposals are idempotent.
    pub fn merge<F>(&self, proposals: &[LabeledSample], rank: F) -> Result<ShiftingDataset>
    where
        F: Fn(&LabeledSample) -> f64,
    {
        if let Some(index) = proposals.iter().position(|p| !p.y_is_oracle) {
            return Err(Error::UnlabeledProposal { index });
        }
        let mut slots: HashMap<TokenSeq, usize> = HashMap::new();
        let mut pool: Vec<(RankedSample, bool)> = Vec::with_capacity(self.len() + proposals.len());
        let incumbents = self.entries.iter().map(|e| (e.clone(), true));
        let newcomers = proposals.iter().map(|p| {
            let ranked = RankedSample {
                score: rank(p),
                sample: p.clone(),
            };
            (ranked, false)
        });
        for (cand, incumbent) in incumbents.chain(newcomers) {
            match slots.get(&cand.sample.x) {
                Some(&slot) => {
                    if cand.score > pool[slot].0.score {
                        pool[slot] = (cand, incumbent);
                    }
                }
                None => {
                    slots.insert(cand.sample.x.clone(), pool.len());
                    pool.push((cand, incumbent));
                }
            }
        }
        pool.sort_by(|(a, a_inc), (b, b_inc)| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| b_inc.cmp(a_inc))
                // stable sort: tied incumbents keep their previous order
                .then_with(|| if *a_inc { Ordering::Equal } else { a.sample.x.cmp(&b.sample.x) })
        });
        pool.truncate(self.capacity);
        let merged = ShiftingDataset {
            capacity: self.capacity,
            entries: pool.into_iter().map(|(r, _)| r).collect(),
        };
        if let (Some(old), Some(new)) = (self.threshold(), merged.threshold()) {
            assert!(new >= old, "selection threshold decreased: {old} -> {new}");
        }
        Ok(merged)
    }

    /// Writes the buffer as a dataset file plus a `.json` sidecar holding
    /// `{iteration, threshold, capacity}`.
    pub fn save_snapshot(&self, path: &Path, vocab: &Vocabulary, iteration: usize) -> Result<()> {
        let body = format_dataset(self.entries.iter().map(|e| &e.sample), vocab);
        write_atomic(path, body.as_bytes())?;
        let sidecar = serde_json::json!({
            "iteration": iteration,
            "threshold": self.threshold(),
            "capacity": self.capacity,
        });
        write_atomic(
            &path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?.as_bytes(),
        )
    }
}

/// Keeps the samples in `entries` order but with a fresh uniqueness check;
/// used when seeding a buffer from an offline dataset.
pub fn dedup_samples(samples: &[LabeledSample]) -> Vec<LabeledSample> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.x.clone()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(tokens: &[usize], score: f64) -> LabeledSample {
        LabeledSample::oracle(TokenSeq::from_ids(tokens), vec![score])
    }

    fn buffer(scores: &[(usize, f64)], capacity: usize) -> ShiftingDataset {
        let props: Vec<_> = scores.iter().map(|&(t, s)| sample(&[t], s)).collect();
        ShiftingDataset::new(capacity).merge(&props, |s| s.y[0]).unwrap()
    }

    #[test]
    fn encode_maps_by_symbol_order() {
        let v = Vocabulary::dna(4);
        assert_eq!(encode("ACGT", &v).unwrap().tokens(), &[0, 1, 2, 3]);
        assert!(matches!(encode("", &v), Err(Error::SequenceTooShort)));
        match encode("ACGX", &v) {
            Err(Error::UnknownSymbol { glyph, position }) => {
                assert_eq!(glyph, "X");
                assert_eq!(position, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(encode("ACGTA", &v), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn encode_prefers_longest_glyph() {
        let v = Vocabulary::new(vec!["C".into(), "Cl".into(), "l".into()], 8, true).unwrap();
        assert_eq!(encode("CClC", &v).unwrap().tokens(), &[0, 1, 0]);
        assert_eq!(decode(&encode("ClCl", &v).unwrap(), &v), "ClCl");
    }

    #[test]
    fn special_ids() {
        let fixed = Vocabulary::dna(8);
        assert_eq!(fixed.eos_id(), None);
        assert_eq!(fixed.bos_id(), 4);
        assert_eq!(fixed.n_outputs(), 4);
        let var = Vocabulary::from_chars("AB", 5, true).unwrap();
        assert_eq!(var.eos_id(), Some(2));
        assert_eq!(var.bos_id(), 3);
        assert_eq!(var.n_inputs(), 4);
        assert!(Vocabulary::from_chars("AA", 3, false).is_err());
    }

    #[test]
    fn dataset_parsing() {
        let v = Vocabulary::dna(4);
        let d = parse_dataset("# seq\tscore\nACGT\t0.5\nTTTT\t-1.0\n", &v).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].y, vec![0.5]);
        assert_eq!(d[1].y, vec![-1.0]);
        assert!(d.iter().all(|s| s.y_is_oracle && s.z0.is_none()));
        match parse_dataset("ACGT 0.5\n", &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let multi = parse_dataset("ACGT\t1\t2.5\n", &v).unwrap();
        assert_eq!(multi[0].y, vec![1.0, 2.5]);
        assert!(matches!(
            parse_dataset("ACGN\t1\n", &v),
            Err(Error::UnknownSymbol { .. })
        ));
    }

    #[test]
    fn merge_keeps_top_n() {
        let b = buffer(&[(0, 3.0), (1, 2.0), (2, 1.0)], 3);
        assert_eq!(b.threshold(), Some(1.0));
        let merged = b.merge(&[sample(&[3], 5.0), sample(&[4], 0.0)], |s| s.y[0]).unwrap();
        assert_eq!(merged.scores().collect::<Vec<_>>(), vec![5.0, 3.0, 2.0]);
        assert_eq!(merged.threshold(), Some(2.0));
        assert_eq!(b.merge(&[], |s| s.y[0]).unwrap(), b);
    }

    #[test]
    fn merge_dedups_to_higher_score() {
        let b = buffer(&[(0, 3.0), (1, 2.0), (2, 1.0)], 3);
        let merged = b.merge(&[sample(&[0], 4.0)], |s| s.y[0]).unwrap();
        assert_eq!(merged.scores().collect::<Vec<_>>(), vec![4.0, 2.0, 1.0]);
        let lower = b.merge(&[sample(&[0], 0.5)], |s| s.y[0]).unwrap();
        assert_eq!(lower, b);
    }

    #[test]
    fn merge_rejects_predictor_labels() {
        let mut p = sample(&[0], 1.0);
        p.y_is_oracle = false;
        assert!(matches!(
            ShiftingDataset::new(2).merge(&[p], |s| s.y[0]),
            Err(Error::UnlabeledProposal { index: 0 })
        ));
    }

    #[test]
    fn ties_favour_incumbents_then_lexicographic() {
        let b = buffer(&[(5, 1.0), (6, 1.0)], 2);
        assert_eq!(b.entries()[0].sample.x, TokenSeq::from_ids(&[5]));
        let merged = b.merge(&[sample(&[0], 1.0)], |s| s.y[0]).unwrap();
        assert_eq!(merged, b);
    }

    #[test]
    fn snapshot_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::dna(1);
        let b = buffer(&[(0, 3.0), (1, 2.0)], 2);
        let path = dir.path().join("buffer.tsv");
        b.save_snapshot(&path, &v, 4).unwrap();
        let back = load_dataset(&path, &v).unwrap();
        assert_eq!(back.len(), 2);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["iteration"], 4);
        assert_eq!(side["threshold"], 2.0);
        assert_eq!(side["capacity"], 2);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(ids in proptest::collection::vec(0usize..4, 1..=8)) {
            let v = Vocabulary::from_chars("ACGT", 8, true).unwrap();
            let s = decode(&TokenSeq::from_ids(&ids), &v);
            let back = encode(&s, &v).unwrap();
            prop_assert_eq!(decode(&back, &v), s);
        }

        #[test]
        fn merges_keep_invariants(
            batches in proptest::collection::vec(
                proptest::collection::vec((0usize..30, -5i32..5), 0..12), 1..8),
            capacity in 1usize..10,
        ) {
            let mut b = ShiftingDataset::new(capacity);
            let mut last = None;
            for batch in batches {
                let props: Vec<_> = batch.iter().map(|&(t, s)| sample(&[t], s as f64)).collect();
                let next = b.merge(&props, |s| s.y[0]).unwrap();
                prop_assert_eq!(&next.merge(&props, |s| s.y[0]).unwrap(), &next);
                prop_assert!(next.len() <= capacity);
                let scores: Vec<f64> = next.scores().collect();
                prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
                let uniq: HashSet<_> = next.entries().iter().map(|e| e.sample.x.clone()).collect();
                prop_assert_eq!(uniq.len(), next.len());
                if let (Some(old), Some(new)) = (last, next.threshold()) {
                    prop_assert!(new >= old);
                }
                last = next.threshold().or(last);
                b = next;
            }
        }
    }
}
