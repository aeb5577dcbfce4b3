//! Fixed-width and boundary-driven segmentation with mean pooling.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{validate_utt_id, FeatureMatrix};
use crate::fsutil;

/// How an utterance is cut into segments before pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentationPlan {
    /// Consecutive segments of `width_ms`; the last one may be shorter.
    Fixed { width_ms: u32 },
    /// Exclusive segment end indices in frames; the last equals the frame count.
    Variable { ends: Vec<usize> },
}

impl SegmentationPlan {
    pub fn validate_for(&self, frames: usize, hop_ms: f32) -> Result<()> {
        match self {
            SegmentationPlan::Fixed { width_ms } => frames_per_segment(*width_ms, hop_ms).map(|_| ()),
            SegmentationPlan::Variable { ends } => validate_ends(ends, frames),
        }
    }
}

/// Label for the segmentation axis of an experiment grid: a fixed width or a
/// named variable-boundary source such as `syllable`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    Fixed { width_ms: u32 },
    Variable { level: String },
}

impl fmt::Display for Segmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segmentation::Fixed { width_ms } => write!(f, "{width_ms}"),
            Segmentation::Variable { level } => f.write_str(level),
        }
    }
}

impl FromStr for Segmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::invalid("empty segmentation label"));
        }
        match s.parse::<u32>() {
            Ok(width_ms) => Ok(Segmentation::Fixed { width_ms }),
            Err(_) => Ok(Segmentation::Variable { level: s.to_string() }),
        }
    }
}

/// Mean-pooled segment vectors and the frame spans they cover.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSequence {
    pub dim: usize,
    pub hop_ms: f32,
    /// `spans.len() × dim` row-major segment means.
    pub segments: Vec<f32>,
    /// Half-open `[start, end)` frame intervals, one per segment.
    pub spans: Vec<(usize, usize)>,
}

impl PooledSequence {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.segments[i * self.dim..(i + 1) * self.dim]
    }

    /// Spans converted to milliseconds.
    pub fn spans_ms(&self) -> Vec<(f64, f64)> {
        let hop = self.hop_ms as f64;
        self.spans
            .iter()
            .map(|&(s, e)| (s as f64 * hop, e as f64 * hop))
            .collect()
    }
}

/// Number of frames in one fixed-width segment.
pub fn frames_per_segment(width_ms: u32, hop_ms: f32) -> Result<usize> {
    if !(hop_ms.is_finite() && hop_ms > 0.0) {
        return Err(Error::invalid(format!("hop_ms must be > 0, got {hop_ms}")));
    }
    let ratio = width_ms as f64 / hop_ms as f64;
    let frames = ratio.round();
    if frames < 1.0 || (ratio - frames).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "segment width {width_ms} ms is not a positive multiple of the {hop_ms} ms hop"
        )));
    }
    Ok(frames as usize)
}

fn validate_ends(ends: &[usize], frames: usize) -> Result<()> {
    if ends.is_empty() {
        return if frames == 0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("no boundaries given for {frames} frames")))
        };
    }
    let mut prev = 0usize;
    for &end in ends {
        if end <= prev {
            return Err(Error::invalid(format!(
                "segment ends must be strictly ascending and positive: {end} after {prev}"
            )));
        }
        if end > frames {
            return Err(Error::invalid(format!("segment end {end} exceeds {frames} frames")));
        }
        prev = end;
    }
    if prev != frames {
        return Err(Error::invalid(format!(
            "final segment end {prev} does not equal frame count {frames}"
        )));
    }
    Ok(())
}

fn pool(features: &FeatureMatrix, spans: Vec<(usize, usize)>) -> PooledSequence {
    let dim = features.dim();
    let mut segments = Vec::with_capacity(spans.len() * dim);
    let mut acc = vec![0f64; dim];
    for &(start, end) in &spans {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for frame in start..end {
            for (a, v) in acc.iter_mut().zip(features.row(frame)) {
                *a += *v as f64;
            }
        }
        let n = (end - start) as f64;
        segments.extend(acc.iter().map(|a| (a / n) as f32));
    }
    PooledSequence {
        dim,
        hop_ms: features.hop_ms(),
        segments,
        spans,
    }
}

/// Cuts `features` into `width_ms` segments and mean-pools each one. A trailing
/// remainder shorter than the width is kept as its own segment.
pub fn segment_fixed(features: &FeatureMatrix, width_ms: u32) -> Result<PooledSequence> {
    let step = frames_per_segment(width_ms, features.hop_ms())?;
    let frames = features.frames();
    let spans = (0..frames)
        .step_by(step)
        .map(|start| (start, (start + step).min(frames)))
        .collect();
    Ok(pool(features, spans))
}

/// Mean-pools the segments delimited by exclusive end indices `ends`.
pub fn segment_variable(features: &FeatureMatrix, ends: &[usize]) -> Result<PooledSequence> {
    validate_ends(ends, features.frames())?;
    let mut prev = 0;
    let spans = ends
        .iter()
        .map(|&end| {
            let span = (prev, end);
            prev = end;
            span
        })
        .collect();
    Ok(pool(features, spans))
}

pub fn segment(features: &FeatureMatrix, plan: &SegmentationPlan) -> Result<PooledSequence> {
    match plan {
        SegmentationPlan::Fixed { width_ms } => segment_fixed(features, *width_ms),
        SegmentationPlan::Variable { ends } => segment_variable(features, ends),
    }
}

/// Distribution of segment widths across variable plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub count: usize,
    /// `(width_ms, occurrences)` in ascending width order.
    pub histogram: Vec<(f64, usize)>,
}

/// Width statistics over every segment of every plan. For an even number of
/// segments the median is the lower of the two middle widths.
pub fn width_stats(plans: &[SegmentationPlan], hop_ms: f32) -> Result<WidthStats> {
    if plans.is_empty() {
        return Err(Error::Empty("segmentation plans"));
    }
    if !(hop_ms.is_finite() && hop_ms > 0.0) {
        return Err(Error::invalid(format!("hop_ms must be > 0, got {hop_ms}")));
    }
    let mut widths = Vec::new();
    for plan in plans {
        let SegmentationPlan::Variable { ends } = plan else {
            return Err(Error::invalid("width statistics need variable plans"));
        };
        let mut prev = 0usize;
        for &end in ends {
            if end <= prev {
                return Err(Error::invalid("segment ends must be strictly ascending"));
            }
            widths.push(end - prev);
            prev = end;
        }
    }
    if widths.is_empty() {
        return Err(Error::Empty("segments"));
    }
    widths.sort_unstable();
    let hop = hop_ms as f64;
    let median_ms = widths[(widths.len() - 1) / 2] as f64 * hop;
    let mean_ms = widths.iter().sum::<usize>() as f64 / widths.len() as f64 * hop;
    let mut hist = BTreeMap::new();
    for w in &widths {
        *hist.entry(*w).or_insert(0usize) += 1;
    }
    Ok(WidthStats {
        median_ms,
        mean_ms,
        count: widths.len(),
        histogram: hist.into_iter().map(|(w, c)| (w as f64 * hop, c)).collect(),
    })
}

/// Parses a boundary file: `utt_id\te1 e2 ... eM` per line.
pub fn parse_boundaries(text: &str, origin: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{origin}:{}", lineno + 1);
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(loc(), "expected utt_id<TAB>ends"))?;
        validate_utt_id(id).map_err(|e| Error::parse(loc(), e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(loc(), format!("duplicate utterance {id:?}")));
        }
        let ends = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::parse(loc(), format!("bad frame index {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id.to_string(), ends));
    }
    Ok(out)
}

pub fn load_boundaries(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    parse_boundaries(&fsutil::read_to_string(path)?, &path.display().to_string())
}

pub fn format_boundaries<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut out = String::new();
    for (id, ends) in rows {
        out.push_str(id);
        out.push('\t');
        for (i, e) in ends.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{e}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(frames: usize, dim: usize) -> FeatureMatrix {
        let values = (0..frames * dim).map(|v| (v as f32) * 0.5 - 3.0).collect();
        FeatureMatrix::new(dim, 20.0, values).unwrap()
    }

    #[test]
    fn hop_width_is_identity() {
        let m = matrix(10, 3);
        let p = segment_fixed(&m, 20).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.segments, m.values());
    }

    #[test]
    fn eighty_ms_on_ten_frames() {
        let m = matrix(10, 2);
        let p = segment_fixed(&m, 80).unwrap();
        assert_eq!(p.spans, vec![(0, 4), (4, 8), (8, 10)]);
        // frames 8 and 9 are [5.0, 5.5] and [6.0, 6.5]
        assert_eq!(p.row(2), &[5.5, 6.0]);
        assert_eq!(p.row(0), &[-1.5, -1.0]);
    }

    #[test]
    fn two_hundred_ms_reduces_by_ten() {
        let p = segment_fixed(&matrix(100, 1), 200).unwrap();
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn non_multiple_width_is_rejected() {
        assert!(segment_fixed(&matrix(4, 1), 30).is_err());
        assert!(segment_fixed(&matrix(4, 1), 0).is_err());
        assert!(segment_fixed(&matrix(4, 1), 10).is_err());
    }

    #[test]
    fn empty_input_has_no_segments() {
        let m = FeatureMatrix::empty(2, 20.0).unwrap();
        assert!(segment_fixed(&m, 80).unwrap().is_empty());
        assert!(segment_variable(&m, &[]).unwrap().is_empty());
    }

    #[test]
    fn variable_single_segment_is_global_mean() {
        let m = FeatureMatrix::new(1, 20.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let p = segment_variable(&m, &[6]).unwrap();
        assert_eq!(p.segments, vec![4.0]);
    }

    #[test]
    fn variable_widths_two_one_three() {
        let m = FeatureMatrix::new(1, 20.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let p = segment_variable(&m, &[2, 3, 6]).unwrap();
        assert_eq!(p.spans, vec![(0, 2), (2, 3), (3, 6)]);
        assert_eq!(p.segments, vec![1.5, 3.0, 6.0]);
        assert_eq!(p.spans_ms(), vec![(0.0, 40.0), (40.0, 60.0), (60.0, 120.0)]);
    }

    #[test]
    fn variable_rejects_bad_ends() {
        let m = matrix(6, 1);
        assert!(segment_variable(&m, &[3, 2, 6]).is_err());
        assert!(segment_variable(&m, &[2, 7]).is_err());
        assert!(segment_variable(&m, &[2, 5]).is_err());
        assert!(segment_variable(&m, &[0, 6]).is_err());
        assert!(segment_variable(&m, &[]).is_err());
    }

    fn plan(ends: &[usize]) -> SegmentationPlan {
        SegmentationPlan::Variable { ends: ends.to_vec() }
    }

    #[test]
    fn odd_median() {
        // widths 40, 60, 80 ms
        let s = width_stats(&[plan(&[2, 5, 9])], 20.0).unwrap();
        assert_eq!(s.median_ms, 60.0);
        assert_eq!(s.mean_ms, 60.0);
        assert_eq!(s.histogram, vec![(40.0, 1), (60.0, 1), (80.0, 1)]);
    }

    #[test]
    fn even_median_takes_lower_middle() {
        // widths 20, 40, 60, 200 ms across two plans
        let s = width_stats(&[plan(&[1, 3]), plan(&[3, 13])], 20.0).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(s.median_ms, 40.0);
    }

    #[test]
    fn width_stats_errors() {
        assert!(width_stats(&[], 20.0).is_err());
        assert!(width_stats(&[SegmentationPlan::Fixed { width_ms: 40 }], 20.0).is_err());
        assert!(width_stats(&[plan(&[])], 20.0).is_err());
    }

    #[test]
    fn boundary_file_round_trip() {
        let text = "a\t2 3 6\nb\t\n";
        let rows = parse_boundaries(text, "b").unwrap();
        assert_eq!(rows, vec![("a".to_string(), vec![2, 3, 6]), ("b".to_string(), vec![])]);
        let back = format_boundaries(rows.iter().map(|(i, e)| (i.as_str(), e.as_slice())));
        assert_eq!(back, text);
        assert!(parse_boundaries("a\t1 x\n", "b").is_err());
        assert!(parse_boundaries("a 1 2\n", "b").is_err());
    }

    #[test]
    fn segmentation_labels_parse() {
        assert_eq!(
            "80".parse::<Segmentation>().unwrap(),
            Segmentation::Fixed { width_ms: 80 }
        );
        assert_eq!("syllable".parse::<Segmentation>().unwrap().to_string(), "syllable");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fixed_spans_tile_and_count(frames in 0usize..120, dim in 1usize..5, mult in 1u32..15) {
                let m = matrix(frames, dim);
                let p = segment_fixed(&m, mult * 20).unwrap();
                prop_assert_eq!(p.len(), frames.div_ceil(mult as usize));
                let mut cursor = 0;
                for &(s, e) in &p.spans {
                    prop_assert_eq!(s, cursor);
                    prop_assert!(e > s);
                    cursor = e;
                }
                prop_assert_eq!(cursor, frames);
            }

            #[test]
            fn variable_rows_are_span_means(frames in 1usize..60, cuts in proptest::collection::btree_set(1usize..60, 0..10)) {
                let m = matrix(frames, 2);
                let mut ends: Vec<usize> = cuts.into_iter().filter(|&c| c < frames).collect();
                ends.push(frames);
                let p = segment_variable(&m, &ends).unwrap();
                for (i, &(s, e)) in p.spans.iter().enumerate() {
                    for d in 0..2 {
                        let mean = (s..e).map(|f| m.row(f)[d] as f64).sum::<f64>() / (e - s) as f64;
                        prop_assert!((p.row(i)[d] as f64 - mean).abs() <= 1e-6 * mean.abs().max(1.0));
                    }
                }
            }
        }
    }
}
