//! Grid experiment driver: for every `(segmentation, K, seed)` cell it runs
//! subset → K-means → encode → pack → LM → evaluation, caching each stage's
//! artifact under a content hash of everything that stage depends on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    aggregate_all, aggregates_to_csv, evaluate_detailed, grid_table, load_benchmark_manifest, Benchmark,
    BenchmarkEntry, EvalReport, GridTables, RunConfig, SeedAggregate, StimulusPair,
};
use crate::features::{read_features, sample_subset, CorpusManifest, UtteranceRecord};
use crate::fsutil;
use crate::lm::{load_external_scores, train_ngram, Discount, NgramConfig, NgramModel, NgramScorer, Scorer};
use crate::pack::{pack, PackedDataset, DEFAULT_CHUNK_LEN};
use crate::quantize::{train_kmeans, BatchMode, Codebook, KMeansConfig};
use crate::segment::{frames_per_segment, load_boundaries, segment, Segmentation, SegmentationPlan};
use crate::units::{encode, format_unit_corpus, parse_unit_corpus};

/// Environment variable that supplies the output root when no flag sets it.
pub const OUTPUT_ENV: &str = "UNITKIT_OUTPUT";

pub const DEFAULT_N_VALUES: [u32; 8] = [20, 40, 80, 120, 160, 200, 240, 280];

pub fn default_k_values() -> Vec<usize> {
    (7..=14).map(|e| 1usize << e).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScorerSpec {
    Ngram {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default)]
        discount: Discount,
        #[serde(default = "yes")]
        use_eos: bool,
        /// Compare per-token log-likelihoods instead of sums.
        #[serde(default)]
        normalize: bool,
    },
    /// Pre-computed scores read from `<dir>/<benchmark>/<segmentation>_<k>_<seed>.tsv`.
    External { dir: PathBuf },
}

fn default_order() -> usize {
    crate::lm::DEFAULT_ORDER
}

fn yes() -> bool {
    true
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::Ngram {
            order: default_order(),
            discount: Discount::Auto,
            use_eos: true,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: Benchmark,
    /// JSON-lines pair manifest.
    pub manifest: PathBuf,
    /// Feature manifest whose utterance ids the pair references name. Without
    /// it, references are feature-file paths relative to the pair manifest.
    #[serde(default)]
    pub stimuli: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub batch: BatchMode,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansConfig::new(1);
        KMeansSettings {
            max_iters: d.max_iters,
            rel_tol: d.rel_tol,
            batch: d.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_values: Vec<u32>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub features_manifest: PathBuf,
    /// Hours sampled for K-means training; `None` uses the whole corpus.
    pub kmeans_subset_hours: Option<f64>,
    pub benchmarks: Vec<BenchmarkSpec>,
    pub output_dir: PathBuf,
    pub scorer: ScorerSpec,
    /// Level name → boundary file. Each level adds a grid row.
    pub variable_plans: BTreeMap<String, PathBuf>,
    pub dedup: bool,
    pub chunk_len: usize,
    pub use_separator: bool,
    pub kmeans: KMeansSettings,
    /// Concurrent cells; 0 uses every core.
    pub workers: usize,
    pub spot_check: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_values: DEFAULT_N_VALUES.to_vec(),
            k_values: default_k_values(),
            seeds: vec![0, 1, 2],
            features_manifest: PathBuf::new(),
            kmeans_subset_hours: None,
            benchmarks: Vec::new(),
            output_dir: PathBuf::new(),
            scorer: ScorerSpec::default(),
            variable_plans: BTreeMap::new(),
            dedup: true,
            chunk_len: DEFAULT_CHUNK_LEN,
            use_separator: true,
            kmeans: KMeansSettings::default(),
            workers: 0,
            spot_check: true,
        }
    }
}

impl SweepConfig {
    /// Reads a JSON or (by `.toml` extension) TOML config. Relative paths are
    /// taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let origin = path.display().to_string();
        let mut cfg: SweepConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::parse(&origin, e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::parse(&origin, e.to_string()))?
        };
        cfg.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.features_manifest);
        fix(&mut self.output_dir);
        for b in &mut self.benchmarks {
            fix(&mut b.manifest);
            if let Some(s) = &mut b.stimuli {
                fix(s);
            }
        }
        for p in self.variable_plans.values_mut() {
            fix(p);
        }
        if let ScorerSpec::External { dir } = &mut self.scorer {
            fix(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() && self.variable_plans.is_empty() {
            return Err(Error::invalid("n_values is empty and no variable plans are given"));
        }
        if self.n_values.contains(&0) {
            return Err(Error::invalid("segment widths must be > 0"));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::invalid("k_values must be non-empty and >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be non-empty"));
        }
        if self.benchmarks.is_empty() {
            return Err(Error::invalid("no benchmarks configured"));
        }
        if self.features_manifest.as_os_str().is_empty() {
            return Err(Error::invalid("features_manifest is not set"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::invalid(format!(
                "output_dir is not set (flag, config or ${OUTPUT_ENV})"
            )));
        }
        if self.chunk_len == 0 {
            return Err(Error::invalid("chunk_len must be >= 1"));
        }
        if let Some(h) = self.kmeans_subset_hours {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::invalid("kmeans_subset_hours must be > 0"));
            }
        }
        if let ScorerSpec::Ngram { order: 0, .. } = self.scorer {
            return Err(Error::invalid("n-gram order must be >= 1"));
        }
        if self
            .variable_plans
            .keys()
            .any(|l| l.parse::<u32>().is_ok() || l.is_empty())
        {
            return Err(Error::invalid("variable plan levels must be non-numeric names"));
        }
        Ok(())
    }

    /// Grid rows: fixed widths in ascending order, then variable levels by name.
    pub fn segmentations(&self) -> Vec<Segmentation> {
        let mut rows: Vec<Segmentation> = self
            .n_values
            .iter()
            .map(|&width_ms| Segmentation::Fixed { width_ms })
            .chain(
                self.variable_plans
                    .keys()
                    .map(|level| Segmentation::Variable { level: level.clone() }),
            )
            .collect();
        rows.sort();
        rows.dedup();
        rows
    }

    /// Every `(segmentation, K, seed)` cell in row-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut ks = self.k_values.clone();
        ks.sort_unstable();
        ks.dedup();
        let mut out = Vec::new();
        for s in self.segmentations() {
            for &k in &ks {
                for &seed in &self.seeds {
                    out.push(Cell {
                        segmentation: s.clone(),
                        k,
                        seed,
                    });
                }
            }
        }
        out
    }

    /// Number of distinct `(segmentation, K)` tokenizers.
    pub fn num_tokenizers(&self) -> usize {
        let mut ks = self.k_values.clone();
        ks.sort_unstable();
        ks.dedup();
        self.segmentations().len() * ks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub segmentation: Segmentation,
    pub k: usize,
    pub seed: u64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} K={} seed={}", self.segmentation, self.k, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Subset,
    Kmeans,
    Encode,
    Pack,
    Lm,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Subset,
        Stage::Kmeans,
        Stage::Encode,
        Stage::Pack,
        Stage::Lm,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Subset => "subset",
            Stage::Kmeans => "kmeans",
            Stage::Encode => "encode",
            Stage::Pack => "pack",
            Stage::Lm => "lm",
            Stage::Eval => "eval",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Stage::Subset => "txt",
            Stage::Kmeans => "scbk",
            Stage::Encode => "units",
            Stage::Pack => "packed",
            Stage::Lm => "sngm",
            Stage::Eval => "json",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Content hash identifying one stage artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey([u8; 32]);

impl RunKey {
    /// Hashes the stage name, its parameters and the keys of its inputs.
    pub fn derive<P: Serialize>(stage: &str, params: &P, inputs: &[RunKey]) -> Result<RunKey> {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(params)?);
        for k in inputs {
            h.update(k.0);
        }
        Ok(RunKey(h.finalize().into()))
    }

    pub fn of_bytes(bytes: &[u8]) -> RunKey {
        RunKey(Sha256::digest(bytes).into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub hits: usize,
    pub recomputed: usize,
}

/// Stage artifact store under `<root>/<stage>/<key>.<ext>`.
struct Cache {
    root: PathBuf,
    counts: Mutex<BTreeMap<Stage, StageCounts>>,
    /// When set, every stage is recomputed and compared with the stored bytes
    /// instead of being read back.
    verify: Option<Mutex<Vec<String>>>,
}

impl Cache {
    fn new(root: PathBuf) -> Self {
        Cache {
            root,
            counts: Mutex::new(BTreeMap::new()),
            verify: None,
        }
    }

    fn verifier(root: PathBuf) -> Self {
        Cache {
            verify: Some(Mutex::new(Vec::new())),
            ..Cache::new(root)
        }
    }

    fn path(&self, stage: Stage, key: &RunKey) -> PathBuf {
        self.root
            .join(stage.name())
            .join(format!("{}.{}", key.hex(), stage.extension()))
    }

    fn stage(&self, stage: Stage, key: &RunKey, compute: impl FnOnce() -> Result<Vec<u8>>) -> Result<(Vec<u8>, bool)> {
        let path = self.path(stage, key);
        if let Some(mismatches) = &self.verify {
            let fresh = compute()?;
            match std::fs::read(&path) {
                Ok(stored) if stored == fresh => {}
                Ok(_) => mismatches.lock().unwrap().push(format!("{stage} {key}: bytes differ")),
                Err(e) => mismatches.lock().unwrap().push(format!("{stage} {key}: {e}")),
            }
            return Ok((fresh, false));
        }
        let hit = path.is_file();
        let bytes = if hit {
            fsutil::read_bytes(&path)?
        } else {
            let bytes = compute()?;
            fsutil::write_atomic(&path, &bytes)?;
            bytes
        };
        let mut counts = self.counts.lock().unwrap();
        let c = counts.entry(stage).or_default();
        if hit {
            c.hits += 1;
        } else {
            c.recomputed += 1;
        }
        Ok((bytes, hit))
    }

    fn counts(&self) -> BTreeMap<Stage, StageCounts> {
        self.counts.lock().unwrap().clone()
    }
}

struct LoadedBenchmark {
    name: Benchmark,
    entries: Vec<BenchmarkEntry>,
    /// Reference → record.
    stimuli: HashMap<String, UtteranceRecord>,
    key: RunKey,
}

struct VariablePlan {
    ends: HashMap<String, Vec<usize>>,
    key: RunKey,
}

/// Read-only state shared by every cell.
struct Inputs {
    manifest: CorpusManifest,
    corpus: Vec<UtteranceRecord>,
    index: HashMap<String, usize>,
    corpus_key: RunKey,
    plans: BTreeMap<String, VariablePlan>,
    benchmarks: Vec<LoadedBenchmark>,
}

fn hash_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a UtteranceRecord)>) -> Result<RunKey> {
    let mut h = Sha256::new();
    for (reference, r) in records {
        h.update(reference.as_bytes());
        h.update([0]);
        h.update(r.utt_id.as_bytes());
        h.update([0]);
        h.update(crate::features::encode_features(&r.features)?);
    }
    Ok(RunKey(h.finalize().into()))
}

fn load_inputs(cfg: &SweepConfig) -> Result<Inputs> {
    let manifest = CorpusManifest::load(&cfg.features_manifest)?;
    if manifest.is_empty() {
        return Err(Error::Empty("features manifest"));
    }
    let corpus: Vec<UtteranceRecord> = manifest
        .entries
        .par_iter()
        .map(|e| manifest.read_entry(e))
        .collect::<Result<_>>()?;
    let hop = corpus[0].features.hop_ms();
    let dim = corpus[0].features.dim();
    if let Some(r) = corpus.iter().find(|r| r.features.dim() != dim) {
        return Err(Error::invalid(format!(
            "utterance {:?} has dim {} (expected {dim})",
            r.utt_id,
            r.features.dim()
        )));
    }
    for &n in &cfg.n_values {
        frames_per_segment(n, hop)?;
    }
    let index = corpus.iter().enumerate().map(|(i, r)| (r.utt_id.clone(), i)).collect();
    let corpus_key = hash_records(corpus.iter().map(|r| (r.utt_id.as_str(), r)))?;

    let mut plans = BTreeMap::new();
    for (level, path) in &cfg.variable_plans {
        let rows = load_boundaries(path)?;
        let key = RunKey::of_bytes(&fsutil::read_bytes(path)?);
        plans.insert(
            level.clone(),
            VariablePlan {
                ends: rows.into_iter().collect(),
                key,
            },
        );
    }

    let mut benchmarks = Vec::new();
    for spec in &cfg.benchmarks {
        let entries = load_benchmark_manifest(&spec.manifest)?;
        if entries.is_empty() {
            return Err(Error::Empty("benchmark manifest"));
        }
        let lookup = spec.stimuli.as_ref().map(|p| CorpusManifest::load(p)).transpose()?;
        let base = spec.manifest.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut stimuli = HashMap::new();
        for reference in entries.iter().flat_map(|e| [&e.pos, &e.neg]) {
            if stimuli.contains_key(reference) {
                continue;
            }
            let record = match &lookup {
                Some(m) => {
                    let entry =
                        m.entries.iter().find(|e| &e.utt_id == reference).ok_or_else(|| {
                            Error::invalid(format!("stimulus {reference:?} missing from {}", spec.name))
                        })?;
                    m.read_entry(entry)?
                }
                None => read_features(&base.join(reference))?,
            };
            if record.features.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: record.features.dim(),
                });
            }
            stimuli.insert(reference.clone(), record);
        }
        let mut refs: Vec<(&String, &UtteranceRecord)> = stimuli.iter().collect();
        refs.sort_by(|a, b| a.0.cmp(b.0));
        let stim_key = hash_records(refs.into_iter().map(|(r, rec)| (r.as_str(), rec)))?;
        let manifest_key = RunKey::of_bytes(&fsutil::read_bytes(&spec.manifest)?);
        benchmarks.push(LoadedBenchmark {
            name: spec.name.clone(),
            entries,
            stimuli,
            key: RunKey::derive("benchmark", &spec.name.to_string(), &[manifest_key, stim_key])?,
        });
    }
    Ok(Inputs {
        manifest,
        corpus,
        index,
        corpus_key,
        plans,
        benchmarks,
    })
}

/// Paths of the artifacts one cell produced or reused.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellArtifacts {
    pub codebook: Option<PathBuf>,
    pub units: Option<PathBuf>,
    pub packed: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellStatus {
    Ok,
    Failed { stage: Stage, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub cache_hit: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub status: CellStatus,
    pub stages: Vec<StageRecord>,
    pub artifacts: CellArtifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub cell: Cell,
    pub stages_checked: usize,
    pub mismatches: Vec<String>,
}

impl SpotCheck {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Run log written to `ledger.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub finished_unix_s: u64,
    pub cells: Vec<CellRecord>,
    pub counts: BTreeMap<Stage, StageCounts>,
    pub spot_check: Option<SpotCheck>,
}

impl Ledger {
    pub fn failed_cells(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.status != CellStatus::Ok)
    }

    pub fn recomputations(&self) -> usize {
        self.counts.values().map(|c| c.recomputed).sum()
    }

    pub fn hits(&self) -> usize {
        self.counts.values().map(|c| c.hits).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Every evaluation report, sorted by benchmark then cell.
    pub reports: Vec<EvalReport>,
    pub ledger: Ledger,
    /// `None` when no cell produced a report.
    pub tables: Option<GridTables>,
}

struct CellRunner<'a> {
    cfg: &'a SweepConfig,
    inputs: &'a Inputs,
    cache: &'a Cache,
}

struct StageFailure {
    stage: Stage,
    error: Error,
}

impl CellRunner<'_> {
    fn plan_for(&self, seg: &Segmentation, record: &UtteranceRecord) -> Result<SegmentationPlan> {
        match seg {
            Segmentation::Fixed { width_ms } => Ok(SegmentationPlan::Fixed { width_ms: *width_ms }),
            Segmentation::Variable { level } => {
                let plan = self
                    .inputs
                    .plans
                    .get(level)
                    .ok_or_else(|| Error::invalid(format!("no boundary file for level {level:?}")))?;
                let ends = plan.ends.get(&record.utt_id).ok_or_else(|| {
                    Error::invalid(format!("level {level:?} has no boundaries for {:?}", record.utt_id))
                })?;
                Ok(SegmentationPlan::Variable { ends: ends.clone() })
            }
        }
    }

    fn plan_key(&self, seg: &Segmentation) -> Vec<RunKey> {
        match seg {
            Segmentation::Variable { level } => self.inputs.plans.get(level).map(|p| p.key).into_iter().collect(),
            Segmentation::Fixed { .. } => Vec::new(),
        }
    }

    fn subset_key(&self, seed: u64) -> Result<RunKey> {
        RunKey::derive(
            "subset",
            &(self.cfg.kmeans_subset_hours, seed),
            &[self.inputs.corpus_key],
        )
    }

    fn subset(&self, seed: u64) -> Result<(Vec<u8>, bool)> {
        let key = self.subset_key(seed)?;
        self.cache.stage(Stage::Subset, &key, || {
            let chosen = match self.cfg.kmeans_subset_hours {
                Some(h) => sample_subset(&self.inputs.manifest, h, seed)?,
                None => self.inputs.manifest.clone(),
            };
            let mut out = String::new();
            for e in &chosen.entries {
                out.push_str(&e.utt_id);
                out.push('\n');
            }
            Ok(out.into_bytes())
        })
    }

    fn run(
        &self,
        cell: &Cell,
    ) -> (
        std::result::Result<Vec<EvalReport>, StageFailure>,
        Vec<StageRecord>,
        CellArtifacts,
    ) {
        let mut stages = Vec::new();
        let mut artifacts = CellArtifacts::default();
        let result = self.run_inner(cell, &mut stages, &mut artifacts);
        (result, stages, artifacts)
    }

    fn timed(
        &self,
        stage: Stage,
        key: RunKey,
        stages: &mut Vec<StageRecord>,
        compute: impl FnOnce() -> Result<Vec<u8>>,
    ) -> std::result::Result<Vec<u8>, StageFailure> {
        let start = Instant::now();
        let (bytes, hit) = self
            .cache
            .stage(stage, &key, compute)
            .map_err(|error| StageFailure { stage, error })?;
        stages.push(StageRecord {
            stage,
            key: key.hex(),
            cache_hit: hit,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(bytes)
    }

    fn run_inner(
        &self,
        cell: &Cell,
        stages: &mut Vec<StageRecord>,
        artifacts: &mut CellArtifacts,
    ) -> std::result::Result<Vec<EvalReport>, StageFailure> {
        let fail = |stage| move |error| StageFailure { stage, error };
        let seg = &cell.segmentation;
        let cfg = self.cfg;

        let subset_key = self.subset_key(cell.seed).map_err(fail(Stage::Subset))?;
        let subset = self.timed(Stage::Subset, subset_key, stages, || Ok(self.subset(cell.seed)?.0))?;

        let km_cfg = KMeansConfig {
            k: cell.k,
            max_iters: cfg.kmeans.max_iters,
            rel_tol: cfg.kmeans.rel_tol,
            seed: cell.seed,
            batch: cfg.kmeans.batch,
        };
        let mut inputs = vec![subset_key];
        inputs.extend(self.plan_key(seg));
        let km_key = RunKey::derive("kmeans", &(seg, &km_cfg), &inputs).map_err(fail(Stage::Kmeans))?;
        let km_bytes = self.timed(Stage::Kmeans, km_key, stages, || {
            let ids = String::from_utf8_lossy(&subset);
            let mut vectors = Vec::new();
            let mut dim = 0;
            for id in ids.lines() {
                let idx = *self
                    .inputs
                    .index
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("subset names unknown utterance {id:?}")))?;
                let record = &self.inputs.corpus[idx];
                let pooled = segment(&record.features, &self.plan_for(seg, record)?)?;
                dim = pooled.dim;
                vectors.extend_from_slice(&pooled.segments);
            }
            let mut cb = train_kmeans(&vectors, dim, &km_cfg)?;
            cb.meta.segmentation = Some(seg.clone());
            cb.meta.segment_width_ms = match seg {
                Segmentation::Fixed { width_ms } => Some(*width_ms),
                Segmentation::Variable { .. } => None,
            };
            cb.to_bytes()
        })?;
        artifacts.codebook = Some(self.cache.path(Stage::Kmeans, &km_key));
        let codebook = Codebook::from_bytes(&km_bytes, Path::new("codebook")).map_err(fail(Stage::Kmeans))?;

        let enc_key =
            RunKey::derive("encode", &cfg.dedup, &[km_key, self.inputs.corpus_key]).map_err(fail(Stage::Encode))?;
        let units = self.timed(Stage::Encode, enc_key, stages, || {
            let corpus = self
                .inputs
                .corpus
                .par_iter()
                .map(|r| encode(r, &self.plan_for(seg, r)?, &codebook, cfg.dedup))
                .collect::<Result<Vec<_>>>()?;
            Ok(format_unit_corpus(&corpus).into_bytes())
        })?;
        artifacts.units = Some(self.cache.path(Stage::Encode, &enc_key));

        let pack_key =
            RunKey::derive("pack", &(cfg.chunk_len, cfg.use_separator), &[enc_key]).map_err(fail(Stage::Pack))?;
        let packed = self.timed(Stage::Pack, pack_key, stages, || {
            let corpus = parse_unit_corpus(&String::from_utf8_lossy(&units), "units")?;
            let p = pack(&corpus, cfg.chunk_len, cell.k, cfg.use_separator)?;
            if p.chunks.is_empty() {
                return Err(Error::invalid(format!(
                    "corpus of {} tokens fills no chunk of {}",
                    p.dropped_tail, cfg.chunk_len
                )));
            }
            Ok(p.to_text().into_bytes())
        })?;
        artifacts.packed = Some(self.cache.path(Stage::Pack, &pack_key));

        let (model, scorer_key) = match &cfg.scorer {
            ScorerSpec::Ngram {
                order,
                discount,
                use_eos,
                ..
            } => {
                let lm_cfg = NgramConfig {
                    order: *order,
                    discount: *discount,
                    use_eos: *use_eos,
                };
                let lm_key = RunKey::derive("lm", &lm_cfg, &[pack_key]).map_err(fail(Stage::Lm))?;
                let bytes = self.timed(Stage::Lm, lm_key, stages, || {
                    let p = PackedDataset::parse(&String::from_utf8_lossy(&packed), "packed")?;
                    Ok(train_ngram(&p.segments(), cell.k, &lm_cfg)?.to_bytes())
                })?;
                artifacts.lm = Some(self.cache.path(Stage::Lm, &lm_key));
                let model = NgramModel::from_bytes(&bytes, Path::new("lm")).map_err(fail(Stage::Lm))?;
                (Some(model), lm_key)
            }
            ScorerSpec::External { .. } => (None, pack_key),
        };

        let mut reports = Vec::new();
        for bench in &self.inputs.benchmarks {
            let external = match &cfg.scorer {
                ScorerSpec::External { dir } => {
                    let path = dir
                        .join(bench.name.to_string())
                        .join(format!("{}_{}_{}.tsv", seg, cell.k, cell.seed));
                    let bytes = fsutil::read_bytes(&path).map_err(fail(Stage::Eval))?;
                    Some((path, RunKey::of_bytes(&bytes)))
                }
                ScorerSpec::Ngram { .. } => None,
            };
            let normalize = matches!(cfg.scorer, ScorerSpec::Ngram { normalize: true, .. });
            let mut eval_inputs = vec![scorer_key, km_key, bench.key];
            eval_inputs.extend(external.as_ref().map(|e| e.1));
            let params = (&bench.name.to_string(), cell, cfg.dedup, normalize);
            let eval_key = RunKey::derive("eval", &params, &eval_inputs).map_err(fail(Stage::Eval))?;
            let bytes = self.timed(Stage::Eval, eval_key, stages, || {
                let encode_ref = |reference: &str| -> Result<Vec<u32>> {
                    let record = &bench.stimuli[reference];
                    Ok(encode(record, &self.plan_for(seg, record)?, &codebook, cfg.dedup)?.units)
                };
                let pairs: Vec<StimulusPair> = crate::eval::resolve_pairs(&bench.entries, &bench.name, encode_ref)?;
                let run = Some(RunConfig {
                    segmentation: seg.clone(),
                    k: cell.k,
                    seed: cell.seed,
                });
                let table;
                let ngram;
                let scorer: &dyn Scorer = match (&model, &external) {
                    (Some(m), _) => {
                        ngram = NgramScorer { model: m, normalize };
                        &ngram
                    }
                    (None, Some((path, _))) => {
                        table = load_external_scores(path)?;
                        &table
                    }
                    (None, None) => unreachable!("either an n-gram or an external scorer is configured"),
                };
                let (report, _) = evaluate_detailed(scorer, &pairs, run)?;
                Ok(serde_json::to_vec_pretty(&report)?)
            })?;
            artifacts.reports.push(self.cache.path(Stage::Eval, &eval_key));
            reports.push(serde_json::from_slice(&bytes).map_err(|e| fail(Stage::Eval)(e.into()))?);
        }
        Ok(reports)
    }
}

fn cache_root(cfg: &SweepConfig) -> PathBuf {
    cfg.output_dir.join("cache")
}

/// Runs every cell of the grid, then writes `reports.json`, `ledger.json` and
/// the report tables under `output_dir/report`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let cache = Cache::new(cache_root(cfg));
    let cells = cfg.cells();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let runner = CellRunner {
        cfg,
        inputs: &inputs,
        cache: &cache,
    };
    // the subset is shared by all cells of a seed; build it once up front
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    for &seed in &seeds {
        runner.subset(seed)?;
    }
    let results: Vec<_> = pool.install(|| cells.par_iter().map(|c| (c.clone(), runner.run(c))).collect());

    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (cell, (result, stages, artifacts)) in results {
        let status = match result {
            Ok(r) => {
                reports.extend(r);
                CellStatus::Ok
            }
            Err(StageFailure { stage, error }) => CellStatus::Failed {
                stage,
                message: error.to_string(),
            },
        };
        records.push(CellRecord {
            cell,
            status,
            stages,
            artifacts,
        });
    }
    sort_reports(&mut reports);

    let spot_check = if cfg.spot_check {
        let ok: Vec<&CellRecord> = records.iter().filter(|r| r.status == CellStatus::Ok).collect();
        if ok.is_empty() {
            None
        } else {
            let pick = ok[rand::rng().random_range(0..ok.len())].cell.clone();
            Some(spot_check_cell(cfg, &inputs, &pick)?)
        }
    } else {
        None
    };

    let ledger = Ledger {
        finished_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        cells: records,
        counts: cache.counts(),
        spot_check,
    };
    fsutil::write_atomic(
        &cfg.output_dir.join("ledger.json"),
        &serde_json::to_vec_pretty(&ledger)?,
    )?;
    save_reports(&cfg.output_dir.join("reports.json"), &reports)?;
    let tables = if reports.is_empty() {
        None
    } else {
        Some(emit_report(&reports, &cfg.output_dir.join("report"))?.tables)
    };
    Ok(SweepOutcome {
        reports,
        ledger,
        tables,
    })
}

/// Recomputes every stage of `cell` from scratch and compares each artifact
/// with the cached bytes.
pub fn spot_check(cfg: &SweepConfig, cell: &Cell) -> Result<SpotCheck> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    spot_check_cell(cfg, &inputs, cell)
}

fn spot_check_cell(cfg: &SweepConfig, inputs: &Inputs, cell: &Cell) -> Result<SpotCheck> {
    let cache = Cache::verifier(cache_root(cfg));
    let runner = CellRunner {
        cfg,
        inputs,
        cache: &cache,
    };
    let (result, stages, _) = runner.run(cell);
    if let Err(StageFailure { stage, error }) = result {
        return Err(Error::invalid(format!(
            "spot check of {cell} failed at {stage}: {error}"
        )));
    }
    let mismatches = cache.verify.expect("verifier cache").into_inner().unwrap();
    Ok(SpotCheck {
        cell: cell.clone(),
        stages_checked: stages.len(),
        mismatches,
    })
}

fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        let key = |r: &EvalReport| {
            (
                r.benchmark.clone(),
                r.config.as_ref().map(|c| (c.segmentation.clone(), c.k, c.seed)),
            )
        };
        key(a).cmp(&key(b))
    });
}

pub fn save_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    fsutil::write_atomic(path, &serde_json::to_vec_pretty(reports)?)
}

pub fn load_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fsutil::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

#[derive(Debug, Clone)]
pub struct EmittedReport {
    pub aggregates: Vec<SeedAggregate>,
    pub tables: GridTables,
    pub files: Vec<PathBuf>,
}

pub fn best_k_csv(tables: &GridTables) -> String {
    let mut out = String::from("N,best_K,avg_accuracy\n");
    for b in &tables.best_k {
        let _ = writeln!(out, "{},{},{}", b.segmentation, b.k, b.accuracy);
    }
    out
}

fn summary_text(aggregates: &[SeedAggregate], tables: &GridTables) -> String {
    let mut out = String::new();
    let benchmarks: Vec<String> = tables.per_benchmark.keys().map(|b| b.to_string()).collect();
    let _ = writeln!(out, "benchmarks: {}", benchmarks.join(", "));
    let _ = writeln!(
        out,
        "grid: {} segmentations x {} cluster sizes, {} cells with an average",
        tables.average.rows.len(),
        tables.average.cols.len(),
        tables.average.present()
    );
    let _ = writeln!(out, "\nbest K per segmentation (average accuracy):");
    let _ = writeln!(out, "{:>10} {:>8} {:>10}", "N", "K", "accuracy");
    for b in &tables.best_k {
        let _ = writeln!(
            out,
            "{:>10} {:>8} {:>10.4}",
            b.segmentation.to_string(),
            b.k,
            b.accuracy
        );
    }
    let _ = writeln!(out, "\nper benchmark (mean ± std over seeds):");
    for a in aggregates {
        let _ = writeln!(
            out,
            "{:<14} N={:<8} K={:<6} {:.4} ± {:.4}  ties {:.4}  seeds {}",
            a.benchmark.to_string(),
            a.segmentation.to_string(),
            a.k,
            a.accuracy.mean,
            a.accuracy.std,
            a.tie_rate.mean,
            a.seeds.len()
        );
    }
    out
}

/// Writes per-benchmark and average grids (CSV and JSON), the best-K table,
/// seed aggregates and a plain-text summary into `dir`.
pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<EmittedReport> {
    let aggregates = aggregate_all(reports)?;
    let tables = grid_table(&aggregates)?;
    let mut files = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fsutil::write_atomic(&path, &bytes)?;
        files.push(path);
        Ok(())
    };
    for (bench, grid) in &tables.per_benchmark {
        write(format!("grid_{bench}.csv"), grid.to_csv().into_bytes())?;
        write(format!("grid_{bench}.json"), serde_json::to_vec_pretty(grid)?)?;
    }
    write("grid_average.csv".into(), tables.average.to_csv().into_bytes())?;
    write("grid_average.json".into(), serde_json::to_vec_pretty(&tables.average)?)?;
    write("best_k.csv".into(), best_k_csv(&tables).into_bytes())?;
    write("best_k.json".into(), serde_json::to_vec_pretty(&tables.best_k)?)?;
    write("aggregates.csv".into(), aggregates_to_csv(&aggregates).into_bytes())?;
    write("aggregates.json".into(), serde_json::to_vec_pretty(&aggregates)?)?;
    write("summary.txt".into(), summary_text(&aggregates, &tables).into_bytes())?;
    Ok(EmittedReport {
        aggregates,
        tables,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_eight_by_eight() {
        let cfg = SweepConfig::default();
        assert_eq!(cfg.k_values, vec![128, 256, 512, 1024, 2048, 4096, 8192, 16384]);
        assert_eq!(cfg.num_tokenizers(), 64);
        assert_eq!(cfg.cells().len(), 64 * 3);
    }

    #[test]
    fn validation() {
        let ok = SweepConfig {
            features_manifest: "m.tsv".into(),
            output_dir: "out".into(),
            benchmarks: vec![BenchmarkSpec {
                name: Benchmark::Swuggy,
                manifest: "b.jsonl".into(),
                stimuli: None,
            }],
            ..SweepConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            SweepConfig {
                n_values: vec![],
                ..ok.clone()
            },
            SweepConfig {
                k_values: vec![],
                ..ok.clone()
            },
            SweepConfig {
                seeds: vec![],
                ..ok.clone()
            },
            SweepConfig {
                output_dir: PathBuf::new(),
                ..ok.clone()
            },
            SweepConfig {
                benchmarks: vec![],
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let variable_only = SweepConfig {
            n_values: vec![],
            variable_plans: [("syllable".to_string(), PathBuf::from("s.txt"))].into(),
            ..ok
        };
        variable_only.validate().unwrap();
        assert_eq!(
            variable_only.segmentations(),
            vec![Segmentation::Variable {
                level: "syllable".into()
            }]
        );
    }

    #[test]
    fn run_key_sensitivity() {
        let a = RunKey::of_bytes(b"x");
        let k1 = RunKey::derive("kmeans", &(80, 128), &[a]).unwrap();
        assert_eq!(k1, RunKey::derive("kmeans", &(80, 128), &[a]).unwrap());
        assert_ne!(k1, RunKey::derive("kmeans", &(80, 256), &[a]).unwrap());
        assert_ne!(k1, RunKey::derive("encode", &(80, 128), &[a]).unwrap());
        assert_ne!(
            k1,
            RunKey::derive("kmeans", &(80, 128), &[RunKey::of_bytes(b"y")]).unwrap()
        );
        assert_eq!(k1.hex().len(), 64);
    }

    #[test]
    fn config_files() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("sweep.toml");
        std::fs::write(
            &toml_path,
            r#"
n_values = [40, 80]
k_values = [4]
seeds = [7]
features_manifest = "feats/manifest.tsv"
output_dir = "out"

[scorer]
kind = "ngram"
order = 3

[[benchmarks]]
name = "swuggy"
manifest = "bench.jsonl"
"#,
        )
        .unwrap();
        let cfg = SweepConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.n_values, vec![40, 80]);
        assert_eq!(cfg.features_manifest, dir.path().join("feats/manifest.tsv"));
        assert_eq!(cfg.benchmarks[0].manifest, dir.path().join("bench.jsonl"));
        assert!(matches!(
            cfg.scorer,
            ScorerSpec::Ngram {
                order: 3,
                use_eos: true,
                ..
            }
        ));
        assert!(cfg.dedup);

        let json_path = dir.path().join("sweep.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(SweepConfig::load(&json_path).unwrap(), cfg);

        std::fs::write(&json_path, r#"{"n_valuez": [1]}"#).unwrap();
        assert!(SweepConfig::load(&json_path).is_err());
    }
}
