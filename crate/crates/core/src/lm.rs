//! Interpolated Kneser–Ney n-gram models over unit sequences, plus the scorer
//! contract shared with externally computed score tables.
//!
//! Event space: unit ids `0..vocab_size` and, when enabled, an end-of-sequence
//! symbol `EOS = vocab_size`. Every sequence is left-padded with `order - 1`
//! copies of a context-only `BOS = vocab_size + 1`. All log-probabilities are
//! natural logs.
//!
//! For a context `h` of length `m - 1` seen at order `m`:
//!
//! ```text
//! p_m(w | h) = max(c_m(h w) - D_m, 0) / c_m(h ·)
//!            + D_m · N1+(h ·) / c_m(h ·) · p_{m-1}(w | h')
//! ```
//!
//! where `h'` drops the oldest symbol, `c_n` are raw counts, `c_m` for `m < n`
//! are continuation counts (number of distinct left extensions), and `p_0` is
//! uniform over the event space. Unseen contexts fall through to `p_{m-1}`.
//!
//! Model file layout (little-endian): magic `SNGM`, version u16, order u32,
//! vocab u32, flags u32 (bit 0: EOS enabled), then for every order `m = 1..=n`:
//! discount f64, entry count u64, and that many entries of `m` u32 symbols
//! followed by a u64 count, sorted lexicographically by symbols.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const NGRAM_MAGIC: [u8; 4] = *b"SNGM";
pub const NGRAM_VERSION: u16 = 1;
pub const DEFAULT_ORDER: usize = 5;
pub const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discount {
    /// `n1 / (n1 + 2 n2)` from count-of-counts, 0.75 when that is undefined or zero.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub order: usize,
    pub discount: Discount,
    /// Predict an end-of-sequence symbol after every sequence.
    pub use_eos: bool,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            order: DEFAULT_ORDER,
            discount: Discount::Auto,
            use_eos: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct ContextStat {
    total: u64,
    distinct: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Level {
    discount: f64,
    counts: HashMap<Vec<u32>, u64>,
    contexts: HashMap<Vec<u32>, ContextStat>,
}

impl Level {
    fn from_counts(counts: HashMap<Vec<u32>, u64>, discount: f64) -> Self {
        let mut contexts: HashMap<Vec<u32>, ContextStat> = HashMap::new();
        for (gram, &c) in &counts {
            let stat = contexts.entry(gram[..gram.len() - 1].to_vec()).or_default();
            stat.total += c;
            stat.distinct += 1;
        }
        Level {
            discount,
            counts,
            contexts,
        }
    }
}

/// A trained interpolated Kneser–Ney model.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab_size: usize,
    use_eos: bool,
    /// `levels[m - 1]` holds the order-`m` statistics.
    levels: Vec<Level>,
}

fn auto_discount(counts: &HashMap<Vec<u32>, u64>) -> f64 {
    let n1 = counts.values().filter(|&&c| c == 1).count() as f64;
    let n2 = counts.values().filter(|&&c| c == 2).count() as f64;
    let d = n1 / (n1 + 2.0 * n2);
    if d.is_finite() && d > 0.0 {
        d
    } else {
        FALLBACK_DISCOUNT
    }
}

/// Trains a model on `corpus`; every unit must be below `vocab_size`.
pub fn train_ngram<S: AsRef<[u32]>>(corpus: &[S], vocab_size: usize, config: &NgramConfig) -> Result<NgramModel> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if config.order == 0 {
        return Err(Error::invalid("n-gram order must be >= 1"));
    }
    if vocab_size == 0 || vocab_size + 2 > u32::MAX as usize {
        return Err(Error::invalid(format!("vocabulary size {vocab_size} out of range")));
    }
    if let Discount::Fixed(d) = config.discount {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::invalid(format!("fixed discount must lie in (0, 1], got {d}")));
        }
    }
    let n = config.order;
    let eos = vocab_size as u32;
    let bos = vocab_size as u32 + 1;
    let mut top: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut padded = Vec::new();
    let mut predicted = 0usize;
    for seq in corpus {
        let seq = seq.as_ref();
        if let Some(u) = seq.iter().find(|&&u| u as usize >= vocab_size) {
            return Err(Error::invalid(format!("unit {u} outside vocabulary of {vocab_size}")));
        }
        padded.clear();
        padded.resize(n - 1, bos);
        padded.extend_from_slice(seq);
        if config.use_eos {
            padded.push(eos);
        }
        for gram in padded.windows(n) {
            *top.entry(gram.to_vec()).or_insert(0) += 1;
            predicted += 1;
        }
    }
    if predicted == 0 {
        return Err(Error::Empty("training tokens"));
    }

    let mut by_order: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); n];
    by_order[n - 1] = top;
    for m in (1..n).rev() {
        let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
        for gram in by_order[m].keys() {
            *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        by_order[m - 1] = cont;
    }
    let levels = by_order
        .into_iter()
        .map(|counts| {
            let d = match config.discount {
                Discount::Fixed(d) => d,
                Discount::Auto => auto_discount(&counts),
            };
            Level::from_counts(counts, d)
        })
        .collect();
    Ok(NgramModel {
        order: n,
        vocab_size,
        use_eos: config.use_eos,
        levels,
    })
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn use_eos(&self) -> bool {
        self.use_eos
    }

    pub fn eos(&self) -> Option<u32> {
        self.use_eos.then_some(self.vocab_size as u32)
    }

    pub fn bos(&self) -> u32 {
        self.vocab_size as u32 + 1
    }

    /// Number of symbols a prediction ranges over (units plus EOS when enabled).
    pub fn event_space(&self) -> usize {
        self.vocab_size + usize::from(self.use_eos)
    }

    pub fn discounts(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.discount).collect()
    }

    /// `p(w | context)`. Only the last `order - 1` context symbols are used;
    /// shorter contexts are left-padded with BOS.
    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        let want = self.order - 1;
        let mut full = Vec::with_capacity(self.order);
        if context.len() < want {
            full.resize(want - context.len(), self.bos());
            full.extend_from_slice(context);
        } else {
            full.extend_from_slice(&context[context.len() - want..]);
        }
        self.prob_full(&full, w, &mut Vec::with_capacity(self.order))
    }

    fn prob_full(&self, context: &[u32], w: u32, key: &mut Vec<u32>) -> f64 {
        let mut p = 1.0 / self.event_space() as f64;
        for (m, level) in self.levels.iter().enumerate() {
            let ctx = &context[context.len() - m..];
            let Some(stat) = level.contexts.get(ctx) else {
                continue;
            };
            key.clear();
            key.extend_from_slice(ctx);
            key.push(w);
            let c = level.counts.get(key.as_slice()).copied().unwrap_or(0) as f64;
            let total = stat.total as f64;
            let d = level.discount;
            p = (c - d).max(0.0) / total + d * stat.distinct as f64 / total * p;
        }
        p
    }

    fn check_units(&self, units: &[u32]) -> Result<()> {
        match units.iter().find(|&&u| u as usize >= self.vocab_size) {
            Some(u) => Err(Error::invalid(format!(
                "unit {u} outside vocabulary of {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Total natural-log probability of `units`, including the EOS term when enabled.
    pub fn sequence_logprob(&self, units: &[u32]) -> Result<f64> {
        self.check_units(units)?;
        let mut padded = vec![self.bos(); self.order - 1];
        padded.extend_from_slice(units);
        if let Some(eos) = self.eos() {
            padded.push(eos);
        }
        let mut key = Vec::with_capacity(self.order);
        Ok(padded
            .windows(self.order)
            .map(|g| self.prob_full(&g[..self.order - 1], g[self.order - 1], &mut key).ln())
            .sum())
    }

    /// Number of predictions `sequence_logprob` sums over.
    pub fn predicted_tokens(&self, len: usize) -> usize {
        len + usize::from(self.use_eos)
    }

    /// Log-probability divided by the number of predicted tokens (0 when there are none).
    pub fn normalized_logprob(&self, units: &[u32]) -> Result<f64> {
        let lp = self.sequence_logprob(units)?;
        let n = self.predicted_tokens(units.len());
        Ok(if n == 0 { 0.0 } else { lp / n as f64 })
    }

    pub fn perplexity<S: AsRef<[u32]>>(&self, corpus: &[S]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Empty("evaluation corpus"));
        }
        let mut total = 0.0;
        let mut tokens = 0usize;
        for seq in corpus {
            let seq = seq.as_ref();
            total += self.sequence_logprob(seq)?;
            tokens += self.predicted_tokens(seq.len());
        }
        if tokens == 0 {
            return Err(Error::Empty("evaluation tokens"));
        }
        Ok((-total / tokens as f64).exp())
    }

    /// Contexts of full length seen at the highest order, in sorted order.
    pub fn seen_contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.levels[self.order - 1].contexts.keys().cloned().collect();
        out.sort();
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&NGRAM_MAGIC);
        out.extend_from_slice(&NGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&u32::from(self.use_eos).to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&level.discount.to_le_bytes());
            let sorted: BTreeMap<&Vec<u32>, &u64> = level.counts.iter().collect();
            out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
            for (gram, count) in sorted {
                for s in gram {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend_from_slice(&count.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != NGRAM_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: NGRAM_MAGIC,
                found,
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != NGRAM_VERSION {
            return Err(Error::VersionMismatch {
                expected: NGRAM_VERSION,
                found: version,
            });
        }
        let order = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let use_eos = r.u32()? & 1 == 1;
        if order == 0 || vocab_size == 0 {
            return Err(Error::invalid("model header has zero order or vocabulary"));
        }
        let mut levels = Vec::with_capacity(order);
        for m in 1..=order {
            let discount = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let entries = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let mut counts = HashMap::with_capacity(entries.min(1 << 20));
            for _ in 0..entries {
                let gram = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let c = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                counts.insert(gram, c);
            }
            levels.push(Level::from_counts(counts, discount));
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(NgramModel {
            order,
            vocab_size,
            use_eos,
            levels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read_bytes(path)?, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::SizeMismatch {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Which member of a stimulus pair is being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pos,
    Neg,
}

/// One stimulus handed to a scorer.
#[derive(Debug, Clone, Copy)]
pub struct Stimulus<'a> {
    pub pair_id: &'a str,
    pub side: Side,
    pub units: &'a [u32],
}

/// Anything that assigns a natural-log likelihood to a stimulus.
pub trait Scorer: Sync {
    fn logprob(&self, stimulus: &Stimulus<'_>) -> Result<f64>;
}

/// Scores stimuli with an n-gram model, optionally per predicted token.
#[derive(Debug, Clone, Copy)]
pub struct NgramScorer<'a> {
    pub model: &'a NgramModel,
    pub normalize: bool,
}

impl Scorer for NgramScorer<'_> {
    fn logprob(&self, stimulus: &Stimulus<'_>) -> Result<f64> {
        if self.normalize {
            self.model.normalized_logprob(stimulus.units)
        } else {
            self.model.sequence_logprob(stimulus.units)
        }
    }
}

/// Externally computed `(pos_logprob, neg_logprob)` per pair id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub scores: BTreeMap<String, (f64, f64)>,
}

impl ScoreTable {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("{origin}:{}", lineno + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, pos, neg] = cols[..] else {
                return Err(Error::parse(loc(), "expected pair_id<TAB>pos_logprob<TAB>neg_logprob"));
            };
            if id.is_empty() {
                return Err(Error::parse(loc(), "empty pair id"));
            }
            let num = |s: &str| -> Result<f64> {
                let v = s
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(loc(), format!("bad score {s:?}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::parse(loc(), format!("non-finite score {s:?}")))
                }
            };
            let entry = (num(pos)?, num(neg)?);
            if scores.insert(id.to_string(), entry).is_some() {
                return Err(Error::parse(loc(), format!("duplicate pair id {id:?}")));
            }
        }
        Ok(ScoreTable { scores })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, (pos, neg)) in &self.scores {
            let _ = writeln!(out, "{id}\t{pos}\t{neg}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_tsv().as_bytes())
    }
}

pub fn load_external_scores(source: &Path) -> Result<ScoreTable> {
    ScoreTable::parse(&fsutil::read_to_string(source)?, &source.display().to_string())
}

impl Scorer for ScoreTable {
    fn logprob(&self, stimulus: &Stimulus<'_>) -> Result<f64> {
        let (pos, neg) = self.scores.get(stimulus.pair_id).ok_or_else(|| Error::Scoring {
            pair_id: stimulus.pair_id.to_string(),
            message: "pair missing from score table".to_string(),
        })?;
        Ok(match stimulus.side {
            Side::Pos => *pos,
            Side::Neg => *neg,
        })
    }
}
