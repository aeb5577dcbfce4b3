//! Paired-stimuli zero-shot evaluation: a pair counts as solved when the
//! correct stimulus gets the higher likelihood. Exact ties earn half credit, so
//! a constant scorer sits at the 0.5 chance rate.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::lm::{Scorer, Side, Stimulus};
use crate::segment::Segmentation;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Benchmark {
    Sblimp,
    Swuggy,
    ProsSyntax,
    ProsLexical,
    Tsc,
    Custom(String),
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Benchmark::Sblimp => "sblimp",
            Benchmark::Swuggy => "swuggy",
            Benchmark::ProsSyntax => "pros_syntax",
            Benchmark::ProsLexical => "pros_lexical",
            Benchmark::Tsc => "tsc",
            Benchmark::Custom(name) => name,
        })
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "" => return Err(Error::invalid("empty benchmark name")),
            "sblimp" => Benchmark::Sblimp,
            "swuggy" => Benchmark::Swuggy,
            "pros_syntax" | "pros-syntax" => Benchmark::ProsSyntax,
            "pros_lexical" | "pros-lexical" => Benchmark::ProsLexical,
            "tsc" => Benchmark::Tsc,
            other => Benchmark::Custom(other.to_string()),
        })
    }
}

impl Serialize for Benchmark {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Benchmark {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusPair {
    pub pair_id: String,
    pub benchmark: Benchmark,
    pub category: String,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

/// Outcome of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub category: String,
    pub pos_logprob: f64,
    pub neg_logprob: f64,
    /// 1 when the correct stimulus wins, 0 when it loses, 0.5 on an exact tie.
    pub credit: f64,
}

impl PairResult {
    pub fn is_tie(&self) -> bool {
        self.credit == 0.5
    }
}

/// Grid coordinates and seed of the run a report belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunConfig {
    pub segmentation: Segmentation,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub count: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: Benchmark,
    pub config: Option<RunConfig>,
    pub accuracy: f64,
    pub tie_rate: f64,
    pub pair_count: usize,
    pub per_category: BTreeMap<String, CategoryScore>,
}

fn credit(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos < neg {
        0.0
    } else {
        0.5
    }
}

/// Scores every pair. Fails with the id of the first (in input order) pair the
/// scorer could not handle.
pub fn score_pairs<S: Scorer + ?Sized>(scorer: &S, pairs: &[StimulusPair]) -> Result<Vec<PairResult>> {
    let scored: Vec<Result<PairResult>> = pairs
        .par_iter()
        .map(|p| {
            let side = |side, units: &[u32]| {
                scorer
                    .logprob(&Stimulus {
                        pair_id: &p.pair_id,
                        side,
                        units,
                    })
                    .map_err(|e| Error::Scoring {
                        pair_id: p.pair_id.clone(),
                        message: e.to_string(),
                    })
            };
            let pos = side(Side::Pos, &p.pos)?;
            let neg = side(Side::Neg, &p.neg)?;
            if !(pos.is_finite() && neg.is_finite()) {
                return Err(Error::Scoring {
                    pair_id: p.pair_id.clone(),
                    message: format!("non-finite scores ({pos}, {neg})"),
                });
            }
            Ok(PairResult {
                pair_id: p.pair_id.clone(),
                category: p.category.clone(),
                pos_logprob: pos,
                neg_logprob: neg,
                credit: credit(pos, neg),
            })
        })
        .collect();
    scored.into_iter().collect()
}

/// Mean credit per category; categories without pairs do not appear.
pub fn split_by_category(results: &[PairResult]) -> BTreeMap<String, f64> {
    category_scores(results)
        .into_iter()
        .map(|(c, s)| (c, s.accuracy))
        .collect()
}

fn category_scores(results: &[PairResult]) -> BTreeMap<String, CategoryScore> {
    let mut acc: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.category.clone()).or_default();
        e.0 += r.credit;
        e.1 += 1;
        e.2 += usize::from(r.is_tie());
    }
    acc.into_iter()
        .map(|(c, (sum, count, ties))| {
            (
                c,
                CategoryScore {
                    accuracy: sum / count as f64,
                    count,
                    ties,
                },
            )
        })
        .collect()
}

pub fn report_from_results(
    benchmark: Benchmark,
    config: Option<RunConfig>,
    results: &[PairResult],
) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Empty("pair results"));
    }
    let n = results.len() as f64;
    let total: f64 = results.iter().map(|r| r.credit).sum();
    let ties = results.iter().filter(|r| r.is_tie()).count();
    Ok(EvalReport {
        benchmark,
        config,
        accuracy: total / n,
        tie_rate: ties as f64 / n,
        pair_count: results.len(),
        per_category: category_scores(results),
    })
}

fn validate_pairs(pairs: &[StimulusPair]) -> Result<Benchmark> {
    let first = pairs.first().ok_or(Error::Empty("stimulus pairs"))?;
    let mut ids = HashSet::with_capacity(pairs.len());
    for p in pairs {
        if p.benchmark != first.benchmark {
            return Err(Error::invalid(format!(
                "pair {:?} belongs to {}, expected {}",
                p.pair_id, p.benchmark, first.benchmark
            )));
        }
        if p.category.is_empty() {
            return Err(Error::invalid(format!("pair {:?} has an empty category", p.pair_id)));
        }
        if !ids.insert(p.pair_id.as_str()) {
            return Err(Error::invalid(format!("duplicate pair id {:?}", p.pair_id)));
        }
    }
    Ok(first.benchmark.clone())
}

/// Scores all pairs of one benchmark and summarizes them.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, pairs: &[StimulusPair]) -> Result<EvalReport> {
    evaluate_detailed(scorer, pairs, None).map(|(report, _)| report)
}

pub fn evaluate_detailed<S: Scorer + ?Sized>(
    scorer: &S,
    pairs: &[StimulusPair],
    config: Option<RunConfig>,
) -> Result<(EvalReport, Vec<PairResult>)> {
    let benchmark = validate_pairs(pairs)?;
    let results = score_pairs(scorer, pairs)?;
    Ok((report_from_results(benchmark, config, &results)?, results))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Seed-averaged metrics of one `(benchmark, N, K)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub benchmark: Benchmark,
    pub segmentation: Segmentation,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub pair_count: usize,
    pub accuracy: MeanStd,
    pub tie_rate: MeanStd,
    pub per_category: BTreeMap<String, MeanStd>,
}

pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    let first = reports.first().ok_or(Error::Empty("reports"))?;
    let cfg = first
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("report carries no run config"))?;
    for r in reports {
        let same = r.benchmark == first.benchmark
            && r.config
                .as_ref()
                .is_some_and(|c| c.segmentation == cfg.segmentation && c.k == cfg.k);
        if !same {
            return Err(Error::invalid(format!(
                "cannot aggregate {} ({:?}) with {} ({:?})",
                r.benchmark, r.config, first.benchmark, first.config
            )));
        }
    }
    let metric = |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let categories: BTreeSet<&String> = reports.iter().flat_map(|r| r.per_category.keys()).collect();
    let per_category = categories
        .into_iter()
        .map(|c| {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.per_category.get(c).map(|s| s.accuracy))
                .collect();
            (c.clone(), MeanStd::of(&vals))
        })
        .collect();
    Ok(SeedAggregate {
        benchmark: first.benchmark.clone(),
        segmentation: cfg.segmentation.clone(),
        k: cfg.k,
        seeds: reports
            .iter()
            .filter_map(|r| r.config.as_ref().map(|c| c.seed))
            .collect(),
        pair_count: first.pair_count,
        accuracy: metric(&|r| r.accuracy),
        tie_rate: metric(&|r| r.tie_rate),
        per_category,
    })
}

/// Groups reports by `(benchmark, segmentation, k)` and aggregates each group.
pub fn aggregate_all(reports: &[EvalReport]) -> Result<Vec<SeedAggregate>> {
    let mut groups: BTreeMap<(Benchmark, Segmentation, usize), Vec<EvalReport>> = BTreeMap::new();
    for r in reports {
        let c = r
            .config
            .as_ref()
            .ok_or_else(|| Error::invalid("report carries no run config"))?;
        groups
            .entry((r.benchmark.clone(), c.segmentation.clone(), c.k))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| aggregate_seeds(g)).collect()
}

/// A metric laid out with segmentations as rows and cluster sizes as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMatrix {
    pub rows: Vec<Segmentation>,
    pub cols: Vec<usize>,
    /// `cells[row][col]`; `None` where no run exists.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl GridMatrix {
    pub fn get(&self, row: &Segmentation, k: usize) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|&x| x == k)?;
        self.cells[r][c]
    }

    pub fn present(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N\\K");
        for k in &self.cols {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            let _ = write!(out, "{row}");
            for cell in cells {
                out.push(',');
                if let Some(v) = cell {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("grid csv", "empty file"))?;
        let cols = header
            .split(',')
            .skip(1)
            .map(|k| {
                k.parse::<usize>()
                    .map_err(|e| Error::parse("grid csv header", e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            rows.push(fields.next().unwrap_or_default().parse::<Segmentation>()?);
            let row = fields
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>()
                            .map(Some)
                            .map_err(|e| Error::parse(format!("grid csv row {}", i + 2), e.to_string()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols.len() {
                return Err(Error::parse(format!("grid csv row {}", i + 2), "wrong number of cells"));
            }
            cells.push(row);
        }
        Ok(GridMatrix { rows, cols, cells })
    }
}

/// Best cluster size of one segmentation row by cross-benchmark average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestK {
    pub segmentation: Segmentation,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTables {
    pub per_benchmark: BTreeMap<Benchmark, GridMatrix>,
    /// Mean over benchmarks; a cell is present only when every benchmark has it.
    pub average: GridMatrix,
    pub best_k: Vec<BestK>,
}

/// Row-wise argmax over present cells; ties go to the smaller `k`.
pub fn best_k_per_row(grid: &GridMatrix) -> Vec<BestK> {
    grid.rows
        .iter()
        .zip(&grid.cells)
        .filter_map(|(row, cells)| {
            let mut best: Option<(usize, f64)> = None;
            for (&k, cell) in grid.cols.iter().zip(cells) {
                if let Some(v) = cell {
                    if best.is_none_or(|(_, b)| *v > b) {
                        best = Some((k, *v));
                    }
                }
            }
            best.map(|(k, accuracy)| BestK {
                segmentation: row.clone(),
                k,
                accuracy,
            })
        })
        .collect()
}

pub fn grid_table(aggregates: &[SeedAggregate]) -> Result<GridTables> {
    if aggregates.is_empty() {
        return Err(Error::Empty("aggregates"));
    }
    let rows: Vec<Segmentation> = aggregates
        .iter()
        .map(|a| a.segmentation.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cols: Vec<usize> = aggregates
        .iter()
        .map(|a| a.k)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let empty = || vec![vec![None; cols.len()]; rows.len()];
    let mut per_benchmark: BTreeMap<Benchmark, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    for a in aggregates {
        let r = rows.binary_search(&a.segmentation).expect("row collected above");
        let c = cols.binary_search(&a.k).expect("column collected above");
        let cells = per_benchmark.entry(a.benchmark.clone()).or_insert_with(empty);
        if cells[r][c].replace(a.accuracy.mean).is_some() {
            return Err(Error::invalid(format!(
                "duplicate aggregate for {} at ({}, {})",
                a.benchmark, a.segmentation, a.k
            )));
        }
    }
    let mut average = empty();
    for (r, row) in average.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let vals: Option<Vec<f64>> = per_benchmark.values().map(|m| m[r][c]).collect();
            *cell = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    let average = GridMatrix {
        rows: rows.clone(),
        cols: cols.clone(),
        cells: average,
    };
    let best_k = best_k_per_row(&average);
    Ok(GridTables {
        per_benchmark: per_benchmark
            .into_iter()
            .map(|(b, cells)| {
                (
                    b,
                    GridMatrix {
                        rows: rows.clone(),
                        cols: cols.clone(),
                        cells,
                    },
                )
            })
            .collect(),
        average,
        best_k,
    })
}

/// CSV rows `benchmark,N,K,seed_mean,seed_std,tie_rate,<categories...>`.
pub fn aggregates_to_csv(aggregates: &[SeedAggregate]) -> String {
    let categories: BTreeSet<&String> = aggregates.iter().flat_map(|a| a.per_category.keys()).collect();
    let mut out = String::from("benchmark,N,K,seed_mean,seed_std,tie_rate");
    for c in &categories {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for a in aggregates {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            a.benchmark, a.segmentation, a.k, a.accuracy.mean, a.accuracy.std, a.tie_rate.mean
        );
        for c in &categories {
            out.push(',');
            if let Some(m) = a.per_category.get(*c) {
                let _ = write!(out, "{}", m.mean);
            }
        }
        out.push('\n');
    }
    out
}

/// One line of a benchmark manifest. `pos` and `neg` name either a unit-corpus
/// utterance or a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub pair_id: String,
    pub category: String,
    pub pos: String,
    pub neg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<Benchmark>,
}

pub fn parse_benchmark_manifest(text: &str, origin: &str) -> Result<Vec<BenchmarkEntry>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{origin}:{}", lineno + 1);
        let entry: BenchmarkEntry = serde_json::from_str(line).map_err(|e| Error::parse(loc(), e.to_string()))?;
        if entry.category.is_empty() {
            return Err(Error::parse(loc(), "empty category"));
        }
        if !ids.insert(entry.pair_id.clone()) {
            return Err(Error::parse(loc(), format!("duplicate pair id {:?}", entry.pair_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_benchmark_manifest(path: &Path) -> Result<Vec<BenchmarkEntry>> {
    parse_benchmark_manifest(&fsutil::read_to_string(path)?, &path.display().to_string())
}

pub fn format_benchmark_manifest(entries: &[BenchmarkEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Turns manifest entries into unit pairs, looking each stimulus reference up
/// through `resolve`.
pub fn resolve_pairs(
    entries: &[BenchmarkEntry],
    default_benchmark: &Benchmark,
    mut resolve: impl FnMut(&str) -> Result<Vec<u32>>,
) -> Result<Vec<StimulusPair>> {
    entries
        .iter()
        .map(|e| {
            Ok(StimulusPair {
                pair_id: e.pair_id.clone(),
                benchmark: e.benchmark.clone().unwrap_or_else(|| default_benchmark.clone()),
                category: e.category.clone(),
                pos: resolve(&e.pos)?,
                neg: resolve(&e.neg)?,
            })
        })
        .collect()
}
