//! Toy corpora shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use unitkit::eval::{format_benchmark_manifest, BenchmarkEntry};
use unitkit::features::{generate_synthetic_utterances, write_corpus, SyntheticSpec};

pub const CLASSES: usize = 8;
pub const DIM: usize = 8;
pub const PROTOTYPE_SEED: u64 = 4242;

/// Class `c` moves to `c + step` with probability `stay`, otherwise to any other class.
pub fn cyclic_transitions(classes: usize, step: isize, stay: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let next = (c as isize + step).rem_euclid(classes as isize) as usize;
            (0..classes)
                .map(|j| {
                    if j == next {
                        stay
                    } else if j == c {
                        0.0
                    } else {
                        (1.0 - stay) / (classes - 2) as f64
                    }
                })
                .collect()
        })
        .collect()
}

pub fn language(num_utts: usize, frames: (usize, usize), step: isize, seed: u64, prefix: &str) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(num_utts, frames, DIM, CLASSES, 0.1, seed);
    spec.prototype_seed = Some(PROTOTYPE_SEED);
    spec.transitions = Some(cyclic_transitions(CLASSES, step, 0.9));
    spec.id_prefix = prefix.to_string();
    spec
}

pub struct ToyWorld {
    pub train_manifest: PathBuf,
    pub stimuli_manifest: PathBuf,
    pub bench_manifest: PathBuf,
}

/// Training speech from the "forward" language; each pair puts a fresh forward
/// utterance against a "backward" one built from the same prototypes.
pub fn toy_world(root: &Path, seed: u64, train_utts: usize, pairs: usize) -> ToyWorld {
    let train = generate_synthetic_utterances(&language(train_utts, (60, 120), 1, seed, "train")).unwrap();
    write_corpus(train.iter().map(|u| &u.record), &root.join("train")).unwrap();
    let pos = generate_synthetic_utterances(&language(pairs, (40, 80), 1, seed + 1000, "pos")).unwrap();
    let neg = generate_synthetic_utterances(&language(pairs, (40, 80), -1, seed + 2000, "neg")).unwrap();
    write_corpus(pos.iter().chain(&neg).map(|u| &u.record), &root.join("stimuli")).unwrap();
    let entries: Vec<BenchmarkEntry> = pos
        .iter()
        .zip(&neg)
        .enumerate()
        .map(|(i, (p, n))| BenchmarkEntry {
            pair_id: format!("pair{i:05}"),
            category: if i % 2 == 0 { "even" } else { "odd" }.to_string(),
            pos: p.record.utt_id.clone(),
            neg: n.record.utt_id.clone(),
            benchmark: None,
        })
        .collect();
    let bench_manifest = root.join("bench.jsonl");
    std::fs::write(&bench_manifest, format_benchmark_manifest(&entries).unwrap()).unwrap();
    ToyWorld {
        train_manifest: root.join("train/manifest.tsv"),
        stimuli_manifest: root.join("stimuli/manifest.tsv"),
        bench_manifest,
    }
}
