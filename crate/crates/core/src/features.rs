//! Continuous feature storage: the binary feature file, TSV corpus manifests,
//! subset sampling and a synthetic feature generator.
//!
//! Feature file layout (little-endian):
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `SFEA`              |
//! | 4      | 2    | version (`1`)             |
//! | 6      | 2    | reserved (`0`)            |
//! | 8      | 4    | dim                       |
//! | 12     | 4    | frames                    |
//! | 16     | 4    | hop_ms (f32)              |
//! | 20     | 4·frames·dim | row-major f32 payload |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const FEATURE_MAGIC: [u8; 4] = *b"SFEA";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;

/// Frame hop of the SSL features this toolkit targets, in milliseconds.
pub const DEFAULT_HOP_MS: f32 = 20.0;

const MS_PER_HOUR: f64 = 3_600_000.0;

/// A `frames × dim` sequence of continuous frame vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    hop_ms: f32,
    values: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix from row-major values; `values.len()` must be a multiple of `dim`.
    pub fn new(dim: usize, hop_ms: f32, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dim must be at least 1"));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not form rows of dim {dim}",
                values.len()
            )));
        }
        let m = FeatureMatrix {
            frames: values.len() / dim,
            dim,
            hop_ms,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(dim: usize, hop_ms: f32) -> Result<Self> {
        Self::new(dim, hop_ms, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("feature dim must be at least 1"));
        }
        if !(self.hop_ms.is_finite() && self.hop_ms > 0.0) {
            return Err(Error::invalid(format!("hop_ms must be > 0, got {}", self.hop_ms)));
        }
        if self.values.len() != self.frames * self.dim {
            return Err(Error::invalid(format!(
                "matrix holds {} values, expected {}x{}",
                self.values.len(),
                self.frames,
                self.dim
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature value at frame {}, component {}",
                pos / self.dim,
                pos % self.dim
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hop_ms(&self) -> f32 {
        self.hop_ms
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.dim..(frame + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn duration_ms(&self) -> f64 {
        self.frames as f64 * self.hop_ms as f64
    }
}

/// An utterance identifier together with its features.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub features: FeatureMatrix,
}

impl UtteranceRecord {
    pub fn new(utt_id: impl Into<String>, features: FeatureMatrix) -> Result<Self> {
        let utt_id = utt_id.into();
        validate_utt_id(&utt_id)?;
        Ok(UtteranceRecord { utt_id, features })
    }
}

pub(crate) fn validate_utt_id(utt_id: &str) -> Result<()> {
    if utt_id.is_empty() {
        return Err(Error::invalid("utterance id is empty"));
    }
    if utt_id.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!(
            "utterance id {utt_id:?} contains a tab or newline"
        )));
    }
    Ok(())
}

/// Encodes a matrix into the feature file byte layout.
pub fn encode_features(features: &FeatureMatrix) -> Result<Vec<u8>> {
    features.validate()?;
    let dim = u32::try_from(features.dim).map_err(|_| Error::invalid("dim exceeds u32"))?;
    let frames = u32::try_from(features.frames).map_err(|_| Error::invalid("frame count exceeds u32"))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * features.values.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&features.hop_ms.to_le_bytes());
    for v in &features.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes the feature file byte layout. `origin` is only used in error messages.
pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<FeatureMatrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
            return Err(bad_magic(origin, bytes));
        }
        return Err(Error::SizeMismatch {
            expected: FEATURE_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(bad_magic(origin, bytes));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hop_ms = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = 4 * dim as u64 * frames as u64;
    let found = (bytes.len() - FEATURE_HEADER_LEN) as u64;
    if expected != found {
        return Err(Error::SizeMismatch { expected, found });
    }
    let values = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = FeatureMatrix {
        frames,
        dim,
        hop_ms,
        values,
    };
    m.validate()?;
    Ok(m)
}

fn bad_magic(origin: &Path, bytes: &[u8]) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        path: origin.to_path_buf(),
        expected: FEATURE_MAGIC,
        found,
    }
}

/// Writes the record's features to `destination`. The utterance id is not
/// stored in the file; it lives in the manifest.
pub fn write_features(record: &UtteranceRecord, destination: &Path) -> Result<()> {
    validate_utt_id(&record.utt_id)?;
    let bytes = encode_features(&record.features)?;
    fsutil::write_atomic(destination, &bytes)
}

/// Reads a feature file. The returned record's id is the file stem.
pub fn read_features(source: &Path) -> Result<UtteranceRecord> {
    let features = read_matrix(source)?;
    let utt_id = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid(format!("{} has no file stem", source.display())))?;
    UtteranceRecord::new(utt_id, features)
}

pub fn read_matrix(source: &Path) -> Result<FeatureMatrix> {
    let bytes = fsutil::read_bytes(source)?;
    decode_features(&bytes, source)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Path as written in the manifest; relative paths resolve against the manifest directory.
    pub path: PathBuf,
    pub duration_ms: f64,
}

/// Ordered list of utterances with their feature files and durations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = CorpusManifest {
            base_dir: base_dir.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            validate_utt_id(&e.utt_id)?;
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {:?}", e.utt_id)));
            }
            if !(e.duration_ms.is_finite() && e.duration_ms >= 0.0) {
                return Err(Error::invalid(format!(
                    "utterance {:?} has invalid duration {}",
                    e.utt_id, e.duration_ms
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_ms(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_ms).sum()
    }

    pub fn total_hours(&self) -> f64 {
        self.total_ms() / MS_PER_HOUR
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<UtteranceRecord> {
        let features = read_matrix(&self.resolve(entry))?;
        UtteranceRecord::new(entry.utt_id.clone(), features)
    }

    /// Checks that every entry's duration matches its file within one frame.
    pub fn verify_durations(&self) -> Result<()> {
        for e in &self.entries {
            let m = read_matrix(&self.resolve(e))?;
            if (m.duration_ms() - e.duration_ms).abs() > m.hop_ms() as f64 {
                return Err(Error::invalid(format!(
                    "utterance {:?}: manifest says {} ms, file holds {} ms",
                    e.utt_id,
                    e.duration_ms,
                    m.duration_ms()
                )));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.utt_id, e.path.display(), e.duration_ms);
        }
        out
    }

    pub fn parse_tsv(text: &str, base_dir: impl Into<PathBuf>, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let loc = || format!("{origin}:{}", lineno + 1);
            let mut cols = line.split('\t');
            let (Some(id), Some(path), Some(dur), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(Error::parse(loc(), "expected 3 tab-separated columns"));
            };
            let duration_ms = dur
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(loc(), format!("bad duration {dur:?}: {e}")))?;
            entries.push(ManifestEntry {
                utt_id: id.to_string(),
                path: PathBuf::from(path),
                duration_ms,
            });
        }
        CorpusManifest::new(base_dir, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_tsv(&text, base, &path.display().to_string())
    }

    /// Saves the manifest. Entry paths are written verbatim, so relative paths
    /// should be relative to the directory of `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fsutil::write_atomic(path, self.to_tsv().as_bytes())
    }
}

/// Shuffles the manifest with a seeded RNG and keeps the shortest prefix whose
/// duration reaches `target_hours`. Entries come back in shuffled order, so the
/// last entry is the last one selected.
pub fn sample_subset(manifest: &CorpusManifest, target_hours: f64, seed: u64) -> Result<CorpusManifest> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    if !(target_hours.is_finite() && target_hours > 0.0) {
        return Err(Error::invalid(format!("target_hours must be > 0, got {target_hours}")));
    }
    let target_ms = target_hours * MS_PER_HOUR;
    if manifest.total_ms() < target_ms {
        return Ok(manifest.clone());
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut entries = Vec::new();
    for idx in order {
        if total >= target_ms {
            break;
        }
        let e = &manifest.entries[idx];
        total += e.duration_ms;
        entries.push(e.clone());
    }
    Ok(CorpusManifest {
        base_dir: manifest.base_dir.clone(),
        entries,
    })
}

/// How frames inside one latent-class run are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameShape {
    /// Every frame of a run equals the class prototype (plus noise).
    #[default]
    Piecewise,
    /// Frames glide linearly from the previous run's prototype to the current one.
    Glide,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_utts: usize,
    /// Inclusive range of frames per utterance.
    pub frames_range: (usize, usize),
    pub dim: usize,
    pub num_latent_classes: usize,
    pub noise_scale: f32,
    pub seed: u64,
    #[serde(default = "default_hop")]
    pub hop_ms: f32,
    /// Inclusive range of frames per latent-class run.
    #[serde(default = "default_run_frames")]
    pub run_frames: (usize, usize),
    /// Seed for the class prototypes; defaults to `seed`. Sharing it lets two
    /// corpora with different class dynamics use the same prototypes.
    #[serde(default)]
    pub prototype_seed: Option<u64>,
    /// Row-stochastic class transition matrix. When absent the next class is
    /// uniform over the other classes.
    #[serde(default)]
    pub transitions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub shape: FrameShape,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_hop() -> f32 {
    DEFAULT_HOP_MS
}

fn default_run_frames() -> (usize, usize) {
    (2, 8)
}

fn default_prefix() -> String {
    "utt".to_string()
}

impl SyntheticSpec {
    pub fn new(
        num_utts: usize,
        frames_range: (usize, usize),
        dim: usize,
        num_latent_classes: usize,
        noise_scale: f32,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            num_utts,
            frames_range,
            dim,
            num_latent_classes,
            noise_scale,
            seed,
            hop_ms: DEFAULT_HOP_MS,
            run_frames: default_run_frames(),
            prototype_seed: None,
            transitions: None,
            shape: FrameShape::Piecewise,
            id_prefix: default_prefix(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("synthetic dim must be >= 1"));
        }
        if self.num_latent_classes == 0 {
            return Err(Error::invalid("num_latent_classes must be >= 1"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise_scale must be >= 0"));
        }
        if self.frames_range.0 > self.frames_range.1 {
            return Err(Error::invalid("frames_range is empty"));
        }
        if self.run_frames.0 == 0 || self.run_frames.0 > self.run_frames.1 {
            return Err(Error::invalid(
                "run_frames must be a non-empty range of positive lengths",
            ));
        }
        if !(self.hop_ms.is_finite() && self.hop_ms > 0.0) {
            return Err(Error::invalid("hop_ms must be > 0"));
        }
        if let Some(t) = &self.transitions {
            if t.len() != self.num_latent_classes || t.iter().any(|row| row.len() != self.num_latent_classes) {
                return Err(Error::invalid("transition matrix must be classes x classes"));
            }
            for row in t {
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || row.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid("transition rows need non-negative mass"));
                }
            }
        }
        Ok(())
    }
}

/// A generated utterance with the latent class of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub record: UtteranceRecord,
    pub labels: Vec<usize>,
}

/// Class prototypes used by `spec` (one row per class).
pub fn synthetic_prototypes(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed.unwrap_or(spec.seed) ^ 0x5eed_c1a5);
    (0..spec.num_latent_classes)
        .map(|_| (0..spec.dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

/// Generates the synthetic corpus in memory.
pub fn generate_synthetic_utterances(spec: &SyntheticSpec) -> Result<Vec<SyntheticUtterance>> {
    spec.validate()?;
    let prototypes = synthetic_prototypes(spec);
    let rows = spec
        .transitions
        .as_ref()
        .map(|t| {
            t.iter()
                .map(|row| WeightedIndex::new(row).map_err(|e| Error::invalid(e.to_string())))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.num_latent_classes;
    let mut out = Vec::with_capacity(spec.num_utts);
    for i in 0..spec.num_utts {
        let frames = rng.random_range(spec.frames_range.0..=spec.frames_range.1);
        let mut values = Vec::with_capacity(frames * spec.dim);
        let mut labels = Vec::with_capacity(frames);
        let mut prev: Option<usize> = None;
        while labels.len() < frames {
            let class = match (prev, &rows) {
                (None, _) => rng.random_range(0..classes),
                (Some(p), Some(rows)) => rows[p].sample(&mut rng),
                (Some(_), None) if classes == 1 => 0,
                (Some(p), None) => {
                    let c = rng.random_range(0..classes - 1);
                    if c >= p {
                        c + 1
                    } else {
                        c
                    }
                }
            };
            let run = rng
                .random_range(spec.run_frames.0..=spec.run_frames.1)
                .min(frames - labels.len());
            let target = &prototypes[class];
            let source = &prototypes[prev.unwrap_or(class)];
            for j in 0..run {
                let alpha = (j + 1) as f32 / run as f32;
                for d in 0..spec.dim {
                    let base = match spec.shape {
                        FrameShape::Piecewise => target[d],
                        FrameShape::Glide => source[d] + (target[d] - source[d]) * alpha,
                    };
                    let noise = if spec.noise_scale > 0.0 {
                        spec.noise_scale * rng.sample::<f32, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    values.push(base + noise);
                }
                labels.push(class);
            }
            prev = Some(class);
        }
        let features = FeatureMatrix::new(spec.dim, spec.hop_ms, values)?;
        let record = UtteranceRecord::new(format!("{}{:05}", spec.id_prefix, i), features)?;
        out.push(SyntheticUtterance { record, labels });
    }
    Ok(out)
}

/// Generates the synthetic corpus, writes one feature file per utterance plus
/// `manifest.tsv` into `out_dir`, and returns the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let utts = generate_synthetic_utterances(spec)?;
    write_corpus(utts.iter().map(|u| &u.record), out_dir)
}

/// Writes records as `<out_dir>/<utt_id>.sfea` and saves `<out_dir>/manifest.tsv`.
pub fn write_corpus<'a>(
    records: impl IntoIterator<Item = &'a UtteranceRecord>,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    for record in records {
        let rel = PathBuf::from(format!("{}.sfea", record.utt_id));
        write_features(record, &out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            utt_id: record.utt_id.clone(),
            path: rel,
            duration_ms: record.features.duration_ms(),
        });
    }
    let manifest = CorpusManifest::new(out_dir, entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
