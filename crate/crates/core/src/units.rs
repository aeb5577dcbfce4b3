//! The tokenization pipeline (segment, pool, assign, deduplicate), unit corpus
//! files, token statistics and time-aligned unit diffs.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{validate_utt_id, UtteranceRecord};
use crate::fsutil;
use crate::quantize::{assign, Codebook};
use crate::segment::{segment, Segmentation, SegmentationPlan};

/// The `(N, K)` identity of a tokenizer: how utterances were segmented and how
/// many clusters the codebook has.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub segmentation: Segmentation,
    pub k: usize,
}

impl fmt::Display for TokenizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.segmentation, self.k)
    }
}

/// Discrete units of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub utt_id: String,
    pub units: Vec<u32>,
    /// `(start_ms, end_ms)` per unit; after deduplication a span covers the whole collapsed run.
    pub spans: Option<Vec<(f64, f64)>>,
    pub dedup: bool,
    /// Number of segment-level units before deduplication.
    pub source_len: usize,
    pub config: Option<TokenizerConfig>,
}

impl UnitSequence {
    pub fn new(utt_id: impl Into<String>, units: Vec<u32>) -> Self {
        let source_len = units.len();
        UnitSequence {
            utt_id: utt_id.into(),
            units,
            spans: None,
            dedup: false,
            source_len,
            config: None,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Collapses every run of equal adjacent units to a single occurrence.
pub fn deduplicate(units: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(units.len());
    for &u in units {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    out
}

/// Deduplicates units and merges the spans of each collapsed run.
pub fn deduplicate_with_spans(units: &[u32], spans: &[(f64, f64)]) -> (Vec<u32>, Vec<(f64, f64)>) {
    debug_assert_eq!(units.len(), spans.len());
    let mut out_units: Vec<u32> = Vec::with_capacity(units.len());
    let mut out_spans: Vec<(f64, f64)> = Vec::with_capacity(units.len());
    for (&u, &span) in units.iter().zip(spans) {
        if out_units.last() == Some(&u) {
            out_spans.last_mut().expect("spans track units").1 = span.1;
        } else {
            out_units.push(u);
            out_spans.push(span);
        }
    }
    (out_units, out_spans)
}

fn plan_label(plan: &SegmentationPlan) -> Segmentation {
    match plan {
        SegmentationPlan::Fixed { width_ms } => Segmentation::Fixed { width_ms: *width_ms },
        SegmentationPlan::Variable { .. } => Segmentation::Variable {
            level: "variable".to_string(),
        },
    }
}

/// Runs segmentation, pooling, nearest-centroid assignment and (optionally)
/// deduplication on one utterance.
pub fn encode(
    record: &UtteranceRecord,
    plan: &SegmentationPlan,
    codebook: &Codebook,
    dedup: bool,
) -> Result<UnitSequence> {
    if record.features.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            got: record.features.dim(),
        });
    }
    let pooled = segment(&record.features, plan)?;
    let units = assign(codebook, &pooled.segments)?;
    let spans = pooled.spans_ms();
    let source_len = units.len();
    let (units, spans) = if dedup {
        deduplicate_with_spans(&units, &spans)
    } else {
        (units, spans)
    };
    let segmentation = codebook.meta.segmentation.clone().unwrap_or_else(|| plan_label(plan));
    Ok(UnitSequence {
        utt_id: record.utt_id.clone(),
        units,
        spans: Some(spans),
        dedup,
        source_len,
        config: Some(TokenizerConfig {
            segmentation,
            k: codebook.k(),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceCounts {
    pub utt_id: String,
    pub pre_dedup: usize,
    pub post_dedup: usize,
}

/// Token totals of a corpus before and after deduplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub config: TokenizerConfig,
    pub total_tokens_pre_dedup: usize,
    pub total_tokens_post_dedup: usize,
    pub per_utterance: Vec<UtteranceCounts>,
}

pub fn corpus_stats(corpus: &[UnitSequence], config: &TokenizerConfig) -> Result<CorpusStats> {
    let mut per_utterance = Vec::with_capacity(corpus.len());
    for seq in corpus {
        if let Some(c) = &seq.config {
            if c != config {
                return Err(Error::invalid(format!(
                    "utterance {:?} was tokenized with {c}, expected {config}",
                    seq.utt_id
                )));
            }
        }
        let post = if seq.dedup {
            seq.units.len()
        } else {
            deduplicate(&seq.units).len()
        };
        per_utterance.push(UtteranceCounts {
            utt_id: seq.utt_id.clone(),
            pre_dedup: seq.source_len.max(seq.units.len()),
            post_dedup: post,
        });
    }
    Ok(CorpusStats {
        config: config.clone(),
        total_tokens_pre_dedup: per_utterance.iter().map(|u| u.pre_dedup).sum(),
        total_tokens_post_dedup: per_utterance.iter().map(|u| u.post_dedup).sum(),
        per_utterance,
    })
}

/// One interval of the merged timeline of two unit sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffInterval {
    pub start_ms: f64,
    pub end_ms: f64,
    pub unit_a: Option<u32>,
    pub unit_b: Option<u32>,
    pub differs: bool,
}

/// Cuts the union timeline of `a` and `b` at every span boundary of either and
/// reports the unit each sequence holds in every piece.
pub fn align_diff(a: &UnitSequence, b: &UnitSequence) -> Result<Vec<DiffInterval>> {
    let spans_a = a
        .spans
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{:?} carries no spans", a.utt_id)))?;
    let spans_b = b
        .spans
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{:?} carries no spans", b.utt_id)))?;
    let mut cuts: Vec<f64> = spans_a.iter().chain(spans_b).flat_map(|&(s, e)| [s, e]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let active = |spans: &[(f64, f64)], units: &[u32], cursor: &mut usize, t: f64| {
        while *cursor < spans.len() && spans[*cursor].1 <= t {
            *cursor += 1;
        }
        (*cursor < spans.len() && spans[*cursor].0 <= t).then(|| units[*cursor])
    };
    let (mut ca, mut cb) = (0, 0);
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (start_ms, end_ms) = (w[0], w[1]);
        let unit_a = active(spans_a, &a.units, &mut ca, start_ms);
        let unit_b = active(spans_b, &b.units, &mut cb, start_ms);
        out.push(DiffInterval {
            start_ms,
            end_ms,
            unit_a,
            unit_b,
            differs: unit_a != unit_b,
        });
    }
    Ok(out)
}

/// Formats a unit corpus: an optional `#` header with the tokenizer config and
/// one `utt_id<TAB>u1 u2 ...` line per utterance.
pub fn format_unit_corpus(corpus: &[UnitSequence]) -> String {
    let mut out = String::new();
    if let Some(first) = corpus.first() {
        if let Some(c) = &first.config {
            let _ = writeln!(out, "#segmentation={};k={};dedup={}", c.segmentation, c.k, first.dedup);
        }
    }
    for seq in corpus {
        out.push_str(&seq.utt_id);
        out.push('\t');
        push_joined(&mut out, seq.units.iter());
        out.push('\n');
    }
    out
}

fn push_joined<T: fmt::Display>(out: &mut String, items: impl Iterator<Item = T>) {
    for (i, item) in items.enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{item}");
    }
}

/// Formats the span sibling file: `utt_id<TAB>s1:e1 s2:e2 ...` in milliseconds.
pub fn format_span_file(corpus: &[UnitSequence]) -> Result<String> {
    let mut out = String::new();
    for seq in corpus {
        let spans = seq
            .spans
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{:?} carries no spans", seq.utt_id)))?;
        out.push_str(&seq.utt_id);
        out.push('\t');
        push_joined(&mut out, spans.iter().map(|(s, e)| format!("{s}:{e}")));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_unit_corpus(text: &str, origin: &str) -> Result<Vec<UnitSequence>> {
    let mut config = None;
    let mut dedup = false;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let loc = || format!("{origin}:{}", lineno + 1);
        if let Some(header) = line.strip_prefix('#') {
            let (c, d) = parse_corpus_header(header).map_err(|m| Error::parse(loc(), m))?;
            config = c;
            dedup = d;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(loc(), "expected utt_id<TAB>units"))?;
        validate_utt_id(id).map_err(|e| Error::parse(loc(), e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(loc(), format!("duplicate utterance {id:?}")));
        }
        let units = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::parse(loc(), format!("bad unit {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut seq = UnitSequence::new(id, units);
        seq.dedup = dedup;
        seq.config = config.clone();
        out.push(seq);
    }
    Ok(out)
}

fn parse_corpus_header(header: &str) -> std::result::Result<(Option<TokenizerConfig>, bool), String> {
    let mut segmentation = None;
    let mut k = None;
    let mut dedup = false;
    for field in header.split(';').filter(|f| !f.trim().is_empty()) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {field:?}"))?;
        match key.trim() {
            "segmentation" => segmentation = Some(value.parse::<Segmentation>().map_err(|e| e.to_string())?),
            "k" => k = Some(value.trim().parse::<usize>().map_err(|e| e.to_string())?),
            "dedup" => dedup = value.trim().parse::<bool>().map_err(|e| e.to_string())?,
            _ => {}
        }
    }
    let config = match (segmentation, k) {
        (Some(segmentation), Some(k)) => Some(TokenizerConfig { segmentation, k }),
        _ => None,
    };
    Ok((config, dedup))
}

/// Attaches spans from a span file to already parsed sequences (matched by id).
pub fn parse_span_file(text: &str, corpus: &mut [UnitSequence], origin: &str) -> Result<()> {
    let index: std::collections::HashMap<String, usize> =
        corpus.iter().enumerate().map(|(i, s)| (s.utt_id.clone(), i)).collect();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("{origin}:{}", lineno + 1);
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(loc(), "expected utt_id<TAB>spans"))?;
        let &i = index
            .get(id)
            .ok_or_else(|| Error::parse(loc(), format!("unknown utterance {id:?}")))?;
        let spans = rest
            .split_whitespace()
            .map(|t| {
                let (s, e) = t
                    .split_once(':')
                    .ok_or_else(|| Error::parse(loc(), format!("bad span {t:?}")))?;
                let s = s.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()))?;
                let e = e.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()))?;
                Ok((s, e))
            })
            .collect::<Result<Vec<_>>>()?;
        if spans.len() != corpus[i].units.len() {
            return Err(Error::parse(
                loc(),
                format!("{} spans for {} units", spans.len(), corpus[i].units.len()),
            ));
        }
        corpus[i].spans = Some(spans);
    }
    Ok(())
}

pub fn span_path(units_path: &Path) -> PathBuf {
    let mut name = units_path.as_os_str().to_owned();
    name.push(".spans");
    PathBuf::from(name)
}

/// Saves the unit corpus and, when every sequence has spans, the `.spans` sibling.
pub fn save_unit_corpus(path: &Path, corpus: &[UnitSequence]) -> Result<()> {
    fsutil::write_atomic(path, format_unit_corpus(corpus).as_bytes())?;
    if !corpus.is_empty() && corpus.iter().all(|s| s.spans.is_some()) {
        fsutil::write_atomic(&span_path(path), format_span_file(corpus)?.as_bytes())?;
    }
    Ok(())
}

/// Loads a unit corpus and its `.spans` sibling when present.
pub fn load_unit_corpus(path: &Path) -> Result<Vec<UnitSequence>> {
    let origin = path.display().to_string();
    let mut corpus = parse_unit_corpus(&fsutil::read_to_string(path)?, &origin)?;
    let spans = span_path(path);
    if spans.exists() {
        parse_span_file(
            &fsutil::read_to_string(&spans)?,
            &mut corpus,
            &spans.display().to_string(),
        )?;
    }
    Ok(corpus)
}
