use std::path::Path;
use std::process::{Command, Output};

fn unitkit(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_unitkit"))
        .args(args)
        .env_remove("UNITKIT_OUTPUT")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = unitkit(args);
    assert!(
        out.status.success(),
        "unitkit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a pair manifest matching `pos*` against `neg*` utterances.
fn write_pairs(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        text.push_str(&format!(
            "{{\"pair_id\":\"p{i}\",\"category\":\"c{}\",\"pos\":\"pos{i:05}\",\"neg\":\"neg{i:05}\"}}\n",
            i % 2
        ));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = d.join("train");
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&train),
        "--num-utts",
        "30",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "1",
        "--prototype-seed",
        "9",
    ]);
    let manifest = train.join("manifest.tsv");
    assert!(manifest.is_file());

    let subset = d.join("subset.tsv");
    let out = ok(&[
        "features",
        "sample",
        "--manifest",
        p(&manifest),
        "--hours",
        "0.01",
        "--seed",
        "2",
        "--out",
        p(&subset),
    ]);
    assert!(out.contains("utterances"));

    let cb = d.join("cb.scbk");
    ok(&[
        "kmeans",
        "train",
        "--manifest",
        p(&subset),
        "--width",
        "40",
        "-k",
        "5",
        "--seed",
        "3",
        "--out",
        p(&cb),
    ]);
    let units = d.join("train.units");
    ok(&[
        "encode",
        "--manifest",
        p(&manifest),
        "--codebook",
        p(&cb),
        "--width",
        "40",
        "--out",
        p(&units),
    ]);
    let raw = d.join("raw.units");
    ok(&[
        "encode",
        "--manifest",
        p(&manifest),
        "--codebook",
        p(&cb),
        "--width",
        "40",
        "--no-dedup",
        "--out",
        p(&raw),
    ]);

    let stats: serde_json::Value = serde_json::from_str(&ok(&["stats", "--units", p(&units)])).unwrap();
    assert!(stats["total_tokens_post_dedup"].as_u64().unwrap() <= stats["total_tokens_pre_dedup"].as_u64().unwrap());
    assert_eq!(stats["config"]["k"], 5);

    let diff = ok(&["diff", "--a", p(&units), "--b", p(&raw), "--utt", "utt00000"]);
    assert!(diff.starts_with("start_ms\tend_ms"));

    let packed = d.join("train.packed");
    ok(&["pack", "--units", p(&units), "--chunk-len", "32", "--out", p(&packed)]);
    let lm = d.join("lm.sngm");
    ok(&["lm", "train", "--packed", p(&packed), "--order", "3", "--out", p(&lm)]);
    let scores = ok(&["lm", "score", "--lm", p(&lm), "--units", p(&units)]);
    assert_eq!(scores.lines().count(), 30);

    let stim = d.join("stim");
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&stim),
        "--num-utts",
        "6",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "5",
        "--prototype-seed",
        "9",
        "--prefix",
        "pos",
    ]);
    let stim_neg = d.join("stim_neg");
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&stim_neg),
        "--num-utts",
        "6",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "6",
        "--prototype-seed",
        "9",
        "--prefix",
        "neg",
    ]);
    let stim_units = d.join("stim.units");
    ok(&[
        "encode",
        "--manifest",
        p(&stim.join("manifest.tsv")),
        "--codebook",
        p(&cb),
        "--width",
        "40",
        "--out",
        p(&stim_units),
    ]);
    let neg_units = d.join("neg.units");
    ok(&[
        "encode",
        "--manifest",
        p(&stim_neg.join("manifest.tsv")),
        "--codebook",
        p(&cb),
        "--width",
        "40",
        "--out",
        p(&neg_units),
    ]);
    let mut merged = std::fs::read_to_string(&stim_units).unwrap();
    merged.push_str(
        &std::fs::read_to_string(&neg_units)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect::<String>(),
    );
    let all_units = d.join("all.units");
    std::fs::write(&all_units, merged).unwrap();
    let bench = d.join("bench.jsonl");
    write_pairs(&bench, 6);
    let report = d.join("report.json");
    let out = ok(&[
        "eval",
        "--bench",
        p(&bench),
        "--name",
        "swuggy",
        "--units",
        p(&all_units),
        "--lm",
        p(&lm),
        "--out",
        p(&report),
    ]);
    assert!(out.starts_with("swuggy: accuracy"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["pair_count"], 6);
    assert_eq!(r["per_category"].as_object().unwrap().len(), 2);
}

#[test]
fn eval_with_score_table() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("b.jsonl");
    write_pairs(&bench, 4);
    let scores = dir.path().join("s.tsv");
    std::fs::write(&scores, "p0\t-1\t-2\np1\t-2\t-1\np2\t-3\t-3\np3\t0\t-9\n").unwrap();
    let out = ok(&["eval", "--bench", p(&bench), "--scores", p(&scores)]);
    assert!(out.contains("accuracy 0.6250, ties 0.2500, pairs 4"), "{out}");

    std::fs::write(&scores, "p0\t-1\t-2\n").unwrap();
    let failed = unitkit(&["eval", "--bench", p(&bench), "--scores", p(&scores)]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("p1"));
}

#[test]
fn sweep_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&d.join("train")),
        "--num-utts",
        "30",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "1",
        "--prototype-seed",
        "9",
    ]);
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&d.join("pos")),
        "--num-utts",
        "8",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "5",
        "--prototype-seed",
        "9",
        "--prefix",
        "pos",
    ]);
    ok(&[
        "features",
        "synth",
        "--out-dir",
        p(&d.join("neg")),
        "--num-utts",
        "8",
        "--dim",
        "6",
        "--classes",
        "5",
        "--seed",
        "6",
        "--prototype-seed",
        "9",
        "--prefix",
        "neg",
    ]);
    // benchmark references are feature paths relative to the pair manifest
    let mut text = String::new();
    for i in 0..8 {
        text.push_str(&format!(
            "{{\"pair_id\":\"p{i}\",\"category\":\"all\",\"pos\":\"pos/pos{i:05}.sfea\",\"neg\":\"neg/neg{i:05}.sfea\"}}\n"
        ));
    }
    std::fs::write(d.join("bench.jsonl"), text).unwrap();
    std::fs::write(
        d.join("sweep.toml"),
        r#"
n_values = [40, 80]
k_values = [4, 8]
seeds = [0]
features_manifest = "train/manifest.tsv"
chunk_len = 32

[scorer]
kind = "ngram"
order = 3

[[benchmarks]]
name = "tsc"
manifest = "bench.jsonl"
"#,
    )
    .unwrap();
    let out_dir = d.join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_unitkit"))
        .args(["sweep", "run", "--config", p(&d.join("sweep.toml")), "--workers", "2"])
        .env("UNITKIT_OUTPUT", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("4 cells, 0 failed, 4 reports"), "{stdout}");
    assert!(stdout.contains("spot check"));

    let again = ok(&[
        "sweep",
        "run",
        "--config",
        p(&d.join("sweep.toml")),
        "--output-dir",
        p(&out_dir),
        "--no-spot-check",
    ]);
    assert!(again.contains("stages recomputed 0"), "{again}");

    let rep = d.join("rep");
    let out = ok(&[
        "sweep",
        "report",
        "--reports",
        p(&out_dir.join("reports.json")),
        "--out",
        p(&rep),
    ]);
    assert!(out.starts_with("N,best_K,avg_accuracy\n"));
    assert_eq!(
        std::fs::read(rep.join("grid_average.csv")).unwrap(),
        std::fs::read(out_dir.join("report/grid_average.csv")).unwrap()
    );
}

#[test]
fn sweep_without_output_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"features_manifest":"m.tsv","benchmarks":[{"name":"tsc","manifest":"b.jsonl"}]}"#,
    )
    .unwrap();
    let out = unitkit(&["sweep", "run", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("output_dir"));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(
        !unitkit(&["kmeans", "train", "--manifest", "x", "-k", "2", "--out", "y"])
            .status
            .success()
    );
    assert!(!unitkit(&["nonsense"]).status.success());
}
