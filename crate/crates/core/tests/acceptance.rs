//! Acceptance gate. Every criterion prints one PASS/FAIL line; the process exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use unitkit::eval::{evaluate_detailed, Benchmark, StimulusPair};
use unitkit::features::{generate_synthetic_utterances, FeatureMatrix, FrameShape, SyntheticSpec, UtteranceRecord};
use unitkit::lm::{train_ngram, Discount, NgramConfig, NgramScorer, Scorer, Stimulus};
use unitkit::pack::pack;
use unitkit::quantize::{assign, train_kmeans, KMeansConfig};
use unitkit::segment::{segment_fixed, Segmentation, SegmentationPlan};
use unitkit::sweep::{run_sweep, BenchmarkSpec, ScorerSpec, SweepConfig};
use unitkit::units::{deduplicate, encode};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)*));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dedup_criterion() -> Outcome {
    let got = deduplicate(&[54, 54, 54, 88, 88, 3]);
    ensure!(got == vec![54, 88, 3], "example gave {got:?}");
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let len = r.random_range(0..60);
        let alphabet = r.random_range(1..6u32);
        let seq: Vec<u32> = (0..len).map(|_| r.random_range(0..alphabet)).collect();
        // run-length encode, keep the run values
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &u in &seq {
            match runs.last_mut() {
                Some((v, n)) if *v == u => *n += 1,
                _ => runs.push((u, 1)),
            }
        }
        let oracle: Vec<u32> = runs.iter().map(|r| r.0).collect();
        mismatches += usize::from(deduplicate(&seq) != oracle);
    }
    ensure!(mismatches == 0, "{mismatches} mismatches against run-length encoding");
    Ok("example exact, 10000 sequences match run-length encoding".into())
}

fn pooling_criterion() -> Outcome {
    let widths = [20u32, 40, 80, 120, 160, 200, 240, 280];
    let mut r = rng(2);
    let mut worst = 0f64;
    for case in 0..500 {
        let t = r.random_range(0..=200usize);
        let d = r.random_range(1..=32usize);
        let n = widths[r.random_range(0..widths.len())];
        let values: Vec<f32> = (0..t * d).map(|_| r.random_range(-10.0..10.0f32)).collect();
        let m = FeatureMatrix::new(d, 20.0, values.clone()).map_err(|e| e.to_string())?;
        let pooled = segment_fixed(&m, n).map_err(|e| e.to_string())?;
        let per = (n / 20) as usize;
        let expected = t.div_ceil(per);
        ensure!(
            pooled.len() == expected,
            "case {case}: {} segments, expected {expected}",
            pooled.len()
        );
        for s in 0..expected {
            let (lo, hi) = (s * per, ((s + 1) * per).min(t));
            for j in 0..d {
                let mut sum = 0f64;
                for f in lo..hi {
                    sum += values[f * d + j] as f64;
                }
                let mean = sum / (hi - lo) as f64;
                worst = worst.max((pooled.row(s)[j] as f64 - mean).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e} from brute-force means");
    Ok(format!("500 matrices, counts exact, max mean error {worst:.1e}"))
}

fn random_points(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    // a few blobs so that clusters are meaningful
    let centers: Vec<f32> = (0..4 * dim).map(|_| r.random_range(-5.0..5.0)).collect();
    (0..n)
        .flat_map(|_| {
            let c = r.random_range(0..4);
            (0..dim)
                .map(|j| centers[c * dim + j] + r.random_range(-1.0..1.0f32))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn kmeans_criterion() -> Outcome {
    let mut r = rng(3);
    // (a) inertia never increases
    for inst in 0..100 {
        let n = r.random_range(20..400);
        let dim = r.random_range(1..8);
        let k = r.random_range(1..=16.min(n));
        let pts = random_points(&mut r, n, dim);
        let cb = train_kmeans(&pts, dim, &KMeansConfig::new(k).with_seed(inst)).map_err(|e| e.to_string())?;
        let h = &cb.meta.inertia_history;
        for w in h.windows(2) {
            ensure!(
                w[1] <= w[0],
                "(a) instance {inst}: inertia rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }
    // (b) assignment equals an exhaustive nearest-centroid scan
    let mut checked = 0;
    for inst in 0..60 {
        let n = r.random_range(64..=1000);
        let dim = r.random_range(1..10);
        let k = r.random_range(1..=64);
        let pts = random_points(&mut r, n, dim);
        let cb = train_kmeans(&pts, dim, &KMeansConfig::new(k).with_seed(inst)).map_err(|e| e.to_string())?;
        let ids = assign(&cb, &pts).map_err(|e| e.to_string())?;
        for (i, x) in pts.chunks_exact(dim).enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..cb.k() {
                let d: f64 = x
                    .iter()
                    .zip(cb.centroid(c))
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            ensure!(
                ids[i] as usize == best.0,
                "(b) instance {inst} point {i}: {} vs scan {}",
                ids[i],
                best.0
            );
            checked += 1;
        }
    }
    // (c) the four-point line
    for seed in 0..10 {
        let cb = train_kmeans(&[0.0, 1.0, 10.0, 11.0], 1, &KMeansConfig::new(2).with_seed(seed))
            .map_err(|e| e.to_string())?;
        let mut c = cb.centroids().to_vec();
        c.sort_by(f32::total_cmp);
        ensure!(c == vec![0.5, 10.5], "(c) seed {seed}: centroids {c:?}");
        ensure!(
            (cb.meta.final_inertia - 1.0).abs() <= 1e-9,
            "(c) seed {seed}: inertia {}",
            cb.meta.final_inertia
        );
    }
    // (d) noiseless corpus, one cluster per prototype
    for seed in 0..5 {
        let spec = SyntheticSpec::new(30, (20, 60), 8, 6, 0.0, seed);
        let frames: Vec<f32> = generate_synthetic_utterances(&spec)
            .map_err(|e| e.to_string())?
            .iter()
            .flat_map(|u| u.record.features.values().to_vec())
            .collect();
        let cb = train_kmeans(&frames, 8, &KMeansConfig::new(6).with_seed(seed)).map_err(|e| e.to_string())?;
        ensure!(
            cb.meta.final_inertia == 0.0,
            "(d) seed {seed}: inertia {}",
            cb.meta.final_inertia
        );
    }
    Ok(format!(
        "(a) 100 monotone runs, (b) {checked} assignments match, (c) {{0.5, 10.5}} inertia 1, (d) inertia 0"
    ))
}

fn post_dedup_total(records: &[UtteranceRecord], width_ms: u32, k: usize, seed: u64) -> Result<usize, String> {
    let plan = SegmentationPlan::Fixed { width_ms };
    let mut vectors = Vec::new();
    for r in records {
        vectors.extend(
            segment_fixed(&r.features, width_ms)
                .map_err(|e| e.to_string())?
                .segments,
        );
    }
    let cb = train_kmeans(
        &vectors,
        records[0].features.dim(),
        &KMeansConfig::new(k).with_seed(seed),
    )
    .map_err(|e| e.to_string())?;
    let mut total = 0;
    for r in records {
        total += encode(r, &plan, &cb, true).map_err(|e| e.to_string())?.len();
    }
    Ok(total)
}

fn token_trend_criterion() -> Outcome {
    let mut spec = SyntheticSpec::new(150, (150, 300), 8, 8, 0.05, 77);
    spec.shape = FrameShape::Glide;
    let records: Vec<UtteranceRecord> = generate_synthetic_utterances(&spec)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|u| u.record)
        .collect();
    let widths = [20u32, 40, 80, 120, 160, 200, 240, 280];
    let (mut n_ok, mut k_ok) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..5 {
        let by_n: Vec<usize> = widths
            .iter()
            .map(|&w| post_dedup_total(&records, w, 64, seed))
            .collect::<Result<_, _>>()?;
        let by_k: Vec<usize> = [4, 64, 1024]
            .iter()
            .map(|&k| post_dedup_total(&records, 40, k, seed))
            .collect::<Result<_, _>>()?;
        let n_mono = by_n.windows(2).all(|w| w[1] <= w[0]);
        let k_mono = by_k.windows(2).all(|w| w[1] >= w[0]);
        n_ok += usize::from(n_mono);
        k_ok += usize::from(k_mono);
        lines.push(format!("seed {seed}: N {by_n:?} K {by_k:?}"));
    }
    ensure!(
        n_ok >= 3 && k_ok >= 3,
        "N trend held for {n_ok}/5, K trend for {k_ok}/5 seeds; {}",
        lines.join("; ")
    );
    Ok(format!("N trend {n_ok}/5 seeds, K trend {k_ok}/5 seeds"))
}

fn ngram_criterion() -> Outcome {
    // normalization over sampled contexts
    let mut r = rng(5);
    let vocab = 12;
    let corpus: Vec<Vec<u32>> = (0..300)
        .map(|_| {
            (0..r.random_range(1..40))
                .map(|_| r.random_range(0..vocab as u32) % 7)
                .collect()
        })
        .collect();
    let model = train_ngram(&corpus, vocab, &NgramConfig::default()).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for i in 0..100 {
        let len = r.random_range(0..6);
        let ctx: Vec<u32> = if i % 2 == 0 {
            let s = &corpus[r.random_range(0..corpus.len())];
            let end = r.random_range(0..=s.len());
            s[end.saturating_sub(len)..end].to_vec()
        } else {
            (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
        };
        let sum: f64 = (0..model.event_space() as u32).map(|w| model.prob(&ctx, w)).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure!(worst <= 1e-9, "conditional sums off by {worst:e}");

    // hand-worked bigram table, corpus "a b a c a" + "b a b c b", D = 0.75, EOS = 3
    let (a, b, c, eos) = (0u32, 1u32, 2u32, 3u32);
    let cfg = NgramConfig {
        order: 2,
        discount: Discount::Fixed(0.75),
        use_eos: true,
    };
    let m = train_ngram(&[vec![a, b, a, c, a], vec![b, a, b, c, b]], 3, &cfg).map_err(|e| e.to_string())?;
    let bos = m.bos();
    let table: [(&[u32], u32, f64); 12] = [
        (&[a], a, 0.16875),
        (&[a], b, 0.48125),
        (&[a], c, 0.175),
        (&[a], eos, 0.175),
        (&[bos], a, 0.35),
        (&[bos], b, 0.35),
        (&[bos], c, 0.15),
        (&[bos], eos, 0.15),
        (&[c], a, 0.35),
        (&[c], b, 0.35),
        (&[c], c, 0.15),
        (&[c], eos, 0.15),
    ];
    for (ctx, w, want) in table {
        let got = m.prob(ctx, w);
        ensure!((got - want).abs() <= 1e-12, "p({w}|{ctx:?}) = {got}, hand value {want}");
    }

    // uniform source
    let v = 16;
    let draw = |seed| -> Vec<u32> {
        let mut r = rng(seed);
        (0..100_000).map(|_| r.random_range(0..v as u32)).collect()
    };
    let cfg = NgramConfig {
        order: 2,
        discount: Discount::Auto,
        use_eos: false,
    };
    let m = train_ngram(&[draw(6)], v, &cfg).map_err(|e| e.to_string())?;
    let ppl = m.perplexity(&[draw(7)]).map_err(|e| e.to_string())?;
    ensure!(
        (ppl - v as f64).abs() <= 0.05 * v as f64,
        "uniform perplexity {ppl} vs {v}"
    );
    Ok(format!(
        "sums within {worst:.1e}, 12 hand values exact, uniform perplexity {ppl:.3} (V = {v})"
    ))
}

fn pairs(n: usize) -> Vec<StimulusPair> {
    (0..n)
        .map(|i| StimulusPair {
            pair_id: format!("p{i}"),
            benchmark: Benchmark::Custom("protocol".into()),
            category: format!("c{}", i % 4),
            pos: vec![0; 1 + i % 5],
            neg: vec![1; 1 + i % 7],
        })
        .collect()
}

struct Perfect;
impl Scorer for Perfect {
    fn logprob(&self, s: &Stimulus<'_>) -> unitkit::Result<f64> {
        Ok(if s.units[0] == 0 { 0.0 } else { -1.0 })
    }
}

struct Constant;
impl Scorer for Constant {
    fn logprob(&self, _: &Stimulus<'_>) -> unitkit::Result<f64> {
        Ok(-7.25)
    }
}

/// Independent uniform draw per (pair, side), fixed by the seed.
struct RandomScorer(u64);
impl Scorer for RandomScorer {
    fn logprob(&self, s: &Stimulus<'_>) -> unitkit::Result<f64> {
        let id: u64 = s.pair_id[1..].parse().unwrap();
        let side = matches!(s.side, unitkit::lm::Side::Neg) as u64;
        Ok(-rng(self.0 ^ (id * 2 + side).wrapping_mul(0x9e37_79b9_7f4a_7c15)).random::<f64>() * 50.0)
    }
}

struct Transformed<'a, F>(&'a dyn Scorer, F);
impl<F: Fn(f64) -> f64 + Sync> Scorer for Transformed<'_, F> {
    fn logprob(&self, s: &Stimulus<'_>) -> unitkit::Result<f64> {
        Ok((self.1)(self.0.logprob(s)?))
    }
}

fn protocol_criterion() -> Outcome {
    let p = pairs(10_000);
    let (r, _) = evaluate_detailed(&Perfect, &p, None).map_err(|e| e.to_string())?;
    ensure!(
        r.accuracy == 1.0 && r.tie_rate == 0.0,
        "perfect scorer: {} / {}",
        r.accuracy,
        r.tie_rate
    );
    let (r, _) = evaluate_detailed(&Constant, &p, None).map_err(|e| e.to_string())?;
    ensure!(
        r.accuracy == 0.5 && r.tie_rate == 1.0,
        "constant scorer: {} / {}",
        r.accuracy,
        r.tie_rate
    );
    let (r, _) = evaluate_detailed(&RandomScorer(11), &p, None).map_err(|e| e.to_string())?;
    let random_acc = r.accuracy;
    ensure!((random_acc - 0.5).abs() <= 0.02, "random scorer accuracy {random_acc}");

    let small = &p[..1000];
    let base = RandomScorer(12);
    let (_, reference) = evaluate_detailed(&base, small, None).map_err(|e| e.to_string())?;
    let transforms: [(&str, &(dyn Fn(f64) -> f64 + Sync)); 3] = [
        ("affine", &|x| 3.0 * x + 17.0),
        ("exp", &|x| (x / 10.0).exp()),
        ("cube", &|x| x * x * x),
    ];
    for (name, f) in transforms {
        let (_, got) = evaluate_detailed(&Transformed(&base, f), small, None).map_err(|e| e.to_string())?;
        let flips = reference.iter().zip(&got).filter(|(a, b)| a.credit != b.credit).count();
        ensure!(flips == 0, "{name} transform changed {flips} decisions");
    }
    Ok(format!(
        "perfect 1.0, constant 0.5 with ties 1.0, random {random_acc:.4}, 3 transforms x 1000 pairs unchanged"
    ))
}

fn end_to_end_criterion() -> Outcome {
    let mut accs = Vec::new();
    for seed in 0..3u64 {
        let train = generate_synthetic_utterances(&common::language(200, (60, 120), 1, seed, "train"))
            .map_err(|e| e.to_string())?;
        let pos = generate_synthetic_utterances(&common::language(500, (40, 80), 1, seed + 100, "pos"))
            .map_err(|e| e.to_string())?;
        let neg = generate_synthetic_utterances(&common::language(500, (40, 80), -1, seed + 200, "neg"))
            .map_err(|e| e.to_string())?;
        let width_ms = 40;
        let plan = SegmentationPlan::Fixed { width_ms };
        let mut vectors = Vec::new();
        for u in &train {
            vectors.extend(
                segment_fixed(&u.record.features, width_ms)
                    .map_err(|e| e.to_string())?
                    .segments,
            );
        }
        let cb =
            train_kmeans(&vectors, common::DIM, &KMeansConfig::new(16).with_seed(seed)).map_err(|e| e.to_string())?;
        let units = |r: &UtteranceRecord| encode(r, &plan, &cb, true).map_err(|e| e.to_string());
        let corpus = train.iter().map(|u| units(&u.record)).collect::<Result<Vec<_>, _>>()?;
        let packed = pack(&corpus, 2048, 16, true).map_err(|e| e.to_string())?;
        let lm = train_ngram(&packed.segments(), 16, &NgramConfig::default()).map_err(|e| e.to_string())?;
        let pairs = pos
            .iter()
            .zip(&neg)
            .enumerate()
            .map(|(i, (p, n))| {
                Ok(StimulusPair {
                    pair_id: format!("pair{i}"),
                    benchmark: Benchmark::Custom("languages".into()),
                    category: "order".into(),
                    pos: units(&p.record)?.units,
                    neg: units(&n.record)?.units,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let scorer = NgramScorer {
            model: &lm,
            normalize: false,
        };
        let (r, _) = evaluate_detailed(&scorer, &pairs, None).map_err(|e| e.to_string())?;
        accs.push(r.accuracy);
    }
    ensure!(accs.iter().all(|&a| a >= 0.9), "accuracies {accs:?}");
    Ok(format!("N=40 K=16 5-gram, 500 pairs, accuracies {accs:?}"))
}

fn sweep_criterion() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let world = common::toy_world(dir.path(), 21, 60, 80);
    // a second benchmark over the first 40 pairs, with categories renamed
    let second = dir.path().join("second.jsonl");
    let text = std::fs::read_to_string(&world.bench_manifest).map_err(|e| e.to_string())?;
    let lines: String = text
        .lines()
        .take(40)
        .map(|l| l.replace("\"even\"", "\"first\"") + "\n")
        .collect();
    std::fs::write(&second, lines).map_err(|e| e.to_string())?;
    let cfg = SweepConfig {
        n_values: vec![40, 80],
        k_values: vec![4, 16],
        seeds: vec![0, 1],
        features_manifest: world.train_manifest.clone(),
        benchmarks: vec![
            BenchmarkSpec {
                name: Benchmark::Swuggy,
                manifest: world.bench_manifest.clone(),
                stimuli: Some(world.stimuli_manifest.clone()),
            },
            BenchmarkSpec {
                name: Benchmark::Sblimp,
                manifest: second,
                stimuli: Some(world.stimuli_manifest.clone()),
            },
        ],
        output_dir: dir.path().join("out"),
        scorer: ScorerSpec::Ngram {
            order: 4,
            discount: Discount::Auto,
            use_eos: true,
            normalize: false,
        },
        chunk_len: 256,
        ..SweepConfig::default()
    };
    let first = run_sweep(&cfg).map_err(|e| e.to_string())?;
    ensure!(
        first.ledger.failed_cells().count() == 0,
        "failed cells: {:?}",
        first.ledger.failed_cells().collect::<Vec<_>>()
    );
    ensure!(
        first.reports.len() == 16,
        "{} reports, expected 8 cells x 2 benchmarks",
        first.reports.len()
    );
    if let Some(s) = &first.ledger.spot_check {
        ensure!(s.passed(), "spot check mismatches {:?}", s.mismatches);
    }
    let second_run = run_sweep(&cfg).map_err(|e| e.to_string())?;
    ensure!(
        second_run.ledger.recomputations() == 0,
        "rerun recomputed {} stages",
        second_run.ledger.recomputations()
    );

    // scan oracle straight from the reports
    let mut per: BTreeMap<(Segmentation, usize), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &first.reports {
        let c = r.config.as_ref().ok_or("report without config")?;
        per.entry((c.segmentation.clone(), c.k))
            .or_default()
            .entry(r.benchmark.to_string())
            .or_default()
            .push(r.accuracy);
    }
    let mut oracle: BTreeMap<Segmentation, (usize, f64)> = BTreeMap::new();
    for ((seg, k), by_bench) in &per {
        let avg = by_bench
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .sum::<f64>()
            / by_bench.len() as f64;
        let slot = oracle.entry(seg.clone()).or_insert((*k, avg));
        if avg > slot.1 + 1e-12 {
            *slot = (*k, avg);
        }
    }
    let tables = second_run.tables.ok_or("no tables emitted")?;
    ensure!(
        tables.best_k.len() == 2,
        "best-K table has {} rows",
        tables.best_k.len()
    );
    for b in &tables.best_k {
        let (k, acc) = oracle[&b.segmentation];
        ensure!(
            b.k == k && (b.accuracy - acc).abs() <= 1e-12,
            "N={}: best K {} ({}) vs oracle {k} ({acc})",
            b.segmentation,
            b.k,
            b.accuracy
        );
    }
    let csv = std::fs::read_to_string(cfg.output_dir.join("report/best_k.csv")).map_err(|e| e.to_string())?;
    ensure!(
        csv.lines().count() == 3 && csv.starts_with("N,best_K,avg_accuracy"),
        "best_k.csv:\n{csv}"
    );
    let summary: Vec<String> = tables
        .best_k
        .iter()
        .map(|b| format!("N={} K={} {:.3}", b.segmentation, b.k, b.accuracy))
        .collect();
    Ok(format!(
        "2x2x2 grid, {} stage hits on rerun, 0 recomputed; best K {}",
        second_run.ledger.hits(),
        summary.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("dedup", Duration::from_secs(1), dedup_criterion),
        ("pooling", Duration::from_secs(5), pooling_criterion),
        ("kmeans", Duration::from_secs(60), kmeans_criterion),
        ("token-count trends", Duration::from_secs(120), token_trend_criterion),
        ("ngram lm", Duration::from_secs(30), ngram_criterion),
        ("evaluation protocol", Duration::from_secs(10), protocol_criterion),
        (
            "end-to-end discrimination",
            Duration::from_secs(300),
            end_to_end_criterion,
        ),
        ("sweep", Duration::from_secs(300), sweep_criterion),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
