//! K-means codebook training and nearest-centroid assignment.
//!
//! Distances are squared Euclidean on raw features, accumulated in `f64`.
//! Assignment fans out over rayon workers; every reduction (centroid sums,
//! inertia) runs sequentially in input order, so a trained codebook is
//! bit-identical whatever the worker count.

use std::path::Path;

use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::segment::Segmentation;

pub const CODEBOOK_MAGIC: [u8; 4] = *b"SCBK";
pub const CODEBOOK_VERSION: u16 = 1;

/// Points handed to one rayon task during assignment.
const ASSIGN_CHUNK: usize = 256;

/// Number of minibatch iterations without improvement of the smoothed batch
/// inertia before minibatch training stops early.
const MINIBATCH_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BatchMode {
    /// Full Lloyd iterations over every point.
    #[default]
    Full,
    /// Sculley-style minibatch updates with per-centroid learning rates.
    MiniBatch { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Training stops once the relative inertia improvement of an iteration
    /// falls below this value.
    pub rel_tol: f64,
    pub seed: u64,
    pub batch: BatchMode,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig {
            k,
            max_iters: 100,
            rel_tol: 1e-4,
            seed: 0,
            batch: BatchMode::Full,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::invalid("rel_tol must be >= 0"));
        }
        if let BatchMode::MiniBatch { batch_size: 0 } = self.batch {
            return Err(Error::invalid("minibatch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CodebookMeta {
    #[serde(default)]
    pub segmentation: Option<Segmentation>,
    #[serde(default)]
    pub segment_width_ms: Option<u32>,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_inertia: f64,
    #[serde(default)]
    pub num_training_points: usize,
    /// Inertia after initialization followed by the inertia after every iteration.
    #[serde(default)]
    pub inertia_history: Vec<f64>,
}

/// `k × dim` centroids plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    pub meta: CodebookMeta,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>, meta: CodebookMeta) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs k >= 1 and dim >= 1"));
        }
        if centroids.len() != k * dim {
            return Err(Error::invalid(format!(
                "{} centroid values do not match {k}x{dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite centroid value"));
        }
        Ok(Codebook {
            k,
            dim,
            centroids,
            meta,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (u32, f64) {
        nearest(&self.centroids, self.dim, x)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + meta.len() + 4 * self.centroids.len());
        out.extend_from_slice(&CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        const HEADER: usize = 20;
        if bytes.len() < HEADER {
            return Err(Error::SizeMismatch {
                expected: HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        if bytes[..4] != CODEBOOK_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: CODEBOOK_MAGIC,
                found,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CODEBOOK_VERSION {
            return Err(Error::VersionMismatch {
                expected: CODEBOOK_VERSION,
                found: version,
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (k, dim, meta_len) = (word(8), word(12), word(16));
        let expected = (meta_len + 4 * k * dim) as u64;
        let found = (bytes.len() - HEADER) as u64;
        if expected != found {
            return Err(Error::SizeMismatch { expected, found });
        }
        let meta: CodebookMeta = serde_json::from_slice(&bytes[HEADER..HEADER + meta_len])?;
        let centroids = bytes[HEADER + meta_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Codebook::new(k, dim, centroids, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read_bytes(path)?, path)
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

fn assign_all(centroids: &[f32], dim: usize, points: &[f32]) -> Vec<(u32, f64)> {
    points
        .par_chunks(ASSIGN_CHUNK * dim)
        .flat_map_iter(|chunk| chunk.chunks_exact(dim).map(|x| nearest(centroids, dim, x)))
        .collect()
}

fn check_points(points: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::invalid("vector dim must be >= 1"));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: points.len() % dim,
        });
    }
    Ok(points.len() / dim)
}

/// Nearest-centroid unit id for every `codebook.dim()`-sized row of `vectors`.
pub fn assign(codebook: &Codebook, vectors: &[f32]) -> Result<Vec<u32>> {
    check_points(vectors, codebook.dim)?;
    Ok(assign_all(&codebook.centroids, codebook.dim, vectors)
        .into_iter()
        .map(|(c, _)| c)
        .collect())
}

/// Sum of squared distances from every row of `vectors` to its nearest centroid.
pub fn inertia(codebook: &Codebook, vectors: &[f32]) -> Result<f64> {
    check_points(vectors, codebook.dim)?;
    Ok(assign_all(&codebook.centroids, codebook.dim, vectors)
        .iter()
        .map(|(_, d)| *d)
        .sum())
}

/// k-means++ seeding: the first center is uniform, each further center is drawn
/// with probability proportional to the squared distance to the closest chosen
/// center.
fn kmeans_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d: Vec<f64> = points.par_chunks(dim).map(|x| sq_dist(x, row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in min_d.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.unwrap_or(0)
        } else {
            rng.random_range(0..n)
        };
        let c = row(chosen).to_vec();
        min_d.par_iter_mut().zip(points.par_chunks(dim)).for_each(|(m, x)| {
            let d = sq_dist(x, &c);
            if d < *m {
                *m = d;
            }
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Trains a codebook on the rows of `vectors` (each `dim` wide).
pub fn train_kmeans(vectors: &[f32], dim: usize, config: &KMeansConfig) -> Result<Codebook> {
    config.validate()?;
    let n = check_points(vectors, dim)?;
    if n == 0 {
        return Err(Error::Empty("training vectors"));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training vector"));
    }
    if config.k > n {
        return Err(Error::invalid(format!(
            "k = {} exceeds the number of training points ({n})",
            config.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = kmeans_plus_plus(vectors, dim, config.k, &mut rng);
    let (centroids, iterations_run, history) = match config.batch {
        BatchMode::Full => lloyd(vectors, dim, init, config),
        BatchMode::MiniBatch { batch_size } => minibatch(vectors, dim, init, batch_size, config, &mut rng),
    };
    let final_inertia = *history.last().expect("history holds the initial inertia");
    let meta = CodebookMeta {
        segmentation: None,
        segment_width_ms: None,
        seed: config.seed,
        iterations_run,
        final_inertia,
        num_training_points: n,
        inertia_history: history,
    };
    Codebook::new(config.k, dim, centroids, meta)
}

fn lloyd(points: &[f32], dim: usize, mut centroids: Vec<f32>, config: &KMeansConfig) -> (Vec<f32>, usize, Vec<f64>) {
    let k = config.k;
    let mut assignment = assign_all(&centroids, dim, points);
    let mut current: f64 = assignment.iter().map(|(_, d)| *d).sum();
    let mut history = vec![current];
    let mut iterations = 0;
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];

    while iterations < config.max_iters && current > 0.0 {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (x, (c, _)) in points.chunks_exact(dim).zip(&assignment) {
            let c = *c as usize;
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s / n) as f32;
                }
            }
        }
        reseed_empty(points, dim, &mut centroids, &counts, &assignment);

        assignment = assign_all(&centroids, dim, points);
        let next: f64 = assignment.iter().map(|(_, d)| *d).sum();
        iterations += 1;
        history.push(next);
        let improvement = (current - next) / current;
        current = next;
        if improvement < config.rel_tol {
            break;
        }
    }
    (centroids, iterations, history)
}

/// Moves every empty cluster onto a distinct point, taking the points farthest
/// from their current centroid first (ties by lowest index).
fn reseed_empty(points: &[f32], dim: usize, centroids: &mut [f32], counts: &[usize], assignment: &[(u32, f64)]) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..assignment.len()).collect();
    order.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
    for (c, p) in empty.into_iter().zip(order) {
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[p * dim..(p + 1) * dim]);
    }
}

fn minibatch(
    points: &[f32],
    dim: usize,
    init: Vec<f32>,
    batch_size: usize,
    config: &KMeansConfig,
    rng: &mut impl Rng,
) -> (Vec<f32>, usize, Vec<f64>) {
    let n = points.len() / dim;
    let k = config.k;
    let initial: f64 = assign_all(&init, dim, points).iter().map(|(_, d)| *d).sum();
    let mut centers: Vec<f64> = init.iter().map(|v| *v as f64).collect();
    let mut snapshot = init;
    let mut counts = vec![0u64; k];
    let batch_size = batch_size.min(n);
    let mut smoothed: Option<f64> = None;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut iterations = 0;
    let mut batch = vec![0f32; batch_size * dim];

    while iterations < config.max_iters {
        let picked = index::sample(rng, n, batch_size).into_vec();
        for (slot, &p) in batch.chunks_exact_mut(dim).zip(&picked) {
            slot.copy_from_slice(&points[p * dim..(p + 1) * dim]);
        }
        let assigned = assign_all(&snapshot, dim, &batch);
        let batch_inertia = assigned.iter().map(|(_, d)| *d).sum::<f64>() / batch_size as f64;
        for (x, (c, _)) in batch.chunks_exact(dim).zip(&assigned) {
            let c = *c as usize;
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (m, v) in centers[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *m += eta * (*v as f64 - *m);
            }
        }
        for (s, m) in snapshot.iter_mut().zip(&centers) {
            *s = *m as f32;
        }
        iterations += 1;

        let ewa = match smoothed {
            None => batch_inertia,
            Some(prev) => {
                let alpha = (2.0 * batch_size as f64 / (n as f64 + 1.0)).min(1.0);
                prev * (1.0 - alpha) + batch_inertia * alpha
            }
        };
        smoothed = Some(ewa);
        if ewa < best * (1.0 - config.rel_tol) {
            best = ewa;
            stale = 0;
        } else {
            stale += 1;
            if stale >= MINIBATCH_PATIENCE {
                break;
            }
        }
    }
    let final_inertia: f64 = assign_all(&snapshot, dim, points).iter().map(|(_, d)| *d).sum();
    (snapshot, iterations, vec![initial, final_inertia])
}
