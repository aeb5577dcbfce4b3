use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use unitkit::eval::{load_benchmark_manifest, resolve_pairs, Benchmark};
use unitkit::features::{
    generate_synthetic, sample_subset, CorpusManifest, FrameShape, SyntheticSpec, UtteranceRecord,
};
use unitkit::lm::{load_external_scores, Discount, NgramConfig, NgramModel, NgramScorer, Scorer};
use unitkit::pack::{pack, PackedDataset, DEFAULT_CHUNK_LEN};
use unitkit::quantize::{train_kmeans, BatchMode, Codebook, KMeansConfig};
use unitkit::segment::{load_boundaries, segment, Segmentation, SegmentationPlan};
use unitkit::sweep::{emit_report, load_reports, run_sweep, SweepConfig, OUTPUT_ENV};
use unitkit::units::{align_diff, corpus_stats, encode, load_unit_corpus, save_unit_corpus, UnitSequence};

#[derive(Parser)]
#[command(
    name = "unitkit",
    version,
    about = "Speech-unit tokenization and unit language model toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Feature corpus utilities.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Codebook training.
    #[command(subcommand)]
    Kmeans(KmeansCmd),
    /// Turn feature files into unit sequences.
    Encode(EncodeArgs),
    /// Pack a unit corpus into fixed-length chunks.
    Pack(PackArgs),
    /// Unit language model.
    #[command(subcommand)]
    Lm(LmCmd),
    /// Score a paired-stimuli benchmark.
    Eval(EvalArgs),
    /// Compare two tokenizations of one utterance on a shared timeline.
    Diff(DiffArgs),
    /// Token counts of a unit corpus.
    Stats(StatsArgs),
    /// Grid experiments.
    #[command(subcommand)]
    Sweep(SweepCmd),
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Draw a seeded subset of a manifest with a target duration.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic feature corpus with known latent classes.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_utts: usize,
        #[arg(long, default_value_t = 50)]
        min_frames: usize,
        #[arg(long, default_value_t = 150)]
        max_frames: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        prototype_seed: Option<u64>,
        /// Frames glide between class prototypes instead of holding them.
        #[arg(long)]
        glide: bool,
        #[arg(long, default_value = "utt")]
        prefix: String,
    },
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Fixed segment width in ms.
    #[arg(long, short = 'n', conflicts_with = "boundaries")]
    width: Option<u32>,
    /// Boundary file (`utt_id<TAB>end frames`) for variable-width segments.
    #[arg(long)]
    boundaries: Option<PathBuf>,
    /// Name recorded for the variable plan.
    #[arg(long, default_value = "variable")]
    level: String,
}

impl PlanArgs {
    fn load(&self) -> Result<Plans> {
        match (&self.width, &self.boundaries) {
            (Some(w), None) => Ok(Plans::Fixed(*w)),
            (None, Some(path)) => Ok(Plans::Variable {
                level: self.level.clone(),
                ends: load_boundaries(path)?.into_iter().collect(),
            }),
            _ => bail!("give either --width or --boundaries"),
        }
    }
}

enum Plans {
    Fixed(u32),
    Variable {
        level: String,
        ends: HashMap<String, Vec<usize>>,
    },
}

impl Plans {
    fn label(&self) -> Segmentation {
        match self {
            Plans::Fixed(w) => Segmentation::Fixed { width_ms: *w },
            Plans::Variable { level, .. } => Segmentation::Variable { level: level.clone() },
        }
    }

    fn plan(&self, utt_id: &str) -> Result<SegmentationPlan> {
        match self {
            Plans::Fixed(w) => Ok(SegmentationPlan::Fixed { width_ms: *w }),
            Plans::Variable { ends, .. } => Ok(SegmentationPlan::Variable {
                ends: ends
                    .get(utt_id)
                    .with_context(|| format!("no boundaries for {utt_id:?}"))?
                    .clone(),
            }),
        }
    }
}

#[derive(Subcommand)]
enum KmeansCmd {
    /// Train a codebook on pooled segments of a corpus.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, short = 'k')]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on a seeded subset of this many hours.
        #[arg(long)]
        hours: Option<f64>,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
        /// Use minibatch updates with this batch size.
        #[arg(long)]
        minibatch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    /// Keep repeated adjacent units.
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    units: PathBuf,
    /// Vocabulary size; read from the corpus header when omitted.
    #[arg(long, short = 'k')]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_LEN)]
    chunk_len: usize,
    #[arg(long)]
    no_separator: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum LmCmd {
    /// Train an interpolated Kneser-Ney n-gram on a packed dataset.
    Train {
        #[arg(long)]
        packed: PathBuf,
        #[arg(long, default_value_t = 5)]
        order: usize,
        /// Fixed discount; estimated from count-of-counts when omitted.
        #[arg(long)]
        discount: Option<f64>,
        #[arg(long)]
        no_eos: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the log-likelihood of every utterance of a unit corpus.
    Score {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        normalize: bool,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines pair manifest.
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, default_value = "custom")]
    name: String,
    /// Unit corpus holding the stimuli named by the manifest.
    #[arg(long, conflicts_with = "stimuli")]
    units: Option<PathBuf>,
    /// Feature manifest of the stimuli; encoded with --codebook.
    #[arg(long, requires = "codebook")]
    stimuli: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long, conflicts_with = "scores")]
    lm: Option<PathBuf>,
    /// Pre-computed `pair_id<TAB>pos<TAB>neg` log-likelihoods.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    utt: String,
    /// Print only differing intervals.
    #[arg(long)]
    only_diff: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    units: PathBuf,
    /// Include per-utterance counts.
    #[arg(long)]
    per_utterance: bool,
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Run every grid cell, reusing cached stages.
    Run(SweepRunArgs),
    /// Rebuild report tables from a reports.json file.
    Report {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SweepRunArgs {
    /// JSON or TOML sweep config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = OUTPUT_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    features_manifest: Option<PathBuf>,
    #[arg(long)]
    kmeans_subset_hours: Option<f64>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    no_separator: bool,
    #[arg(long)]
    no_spot_check: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Features(cmd) => features(cmd),
        Command::Kmeans(cmd) => kmeans(cmd),
        Command::Encode(args) => encode_cmd(args),
        Command::Pack(args) => pack_cmd(args),
        Command::Lm(cmd) => lm(cmd),
        Command::Eval(args) => eval(args),
        Command::Diff(args) => diff(args),
        Command::Stats(args) => stats(args),
        Command::Sweep(cmd) => sweep(cmd),
    }
}

fn read_corpus(manifest: &CorpusManifest) -> Result<Vec<UtteranceRecord>> {
    manifest
        .entries
        .iter()
        .map(|e| manifest.read_entry(e).map_err(Into::into))
        .collect()
}

fn features(cmd: FeaturesCmd) -> Result<()> {
    match cmd {
        FeaturesCmd::Sample {
            manifest,
            hours,
            seed,
            out,
        } => {
            let m = CorpusManifest::load(&manifest)?;
            let mut subset = sample_subset(&m, hours, seed)?;
            // entry paths are relative to the source manifest; make them absolute
            for e in &mut subset.entries {
                e.path = std::path::absolute(m.resolve(e))?;
            }
            subset.save(&out)?;
            println!(
                "{} of {} utterances, {:.3} h",
                subset.len(),
                m.len(),
                subset.total_hours()
            );
        }
        FeaturesCmd::Synth {
            out_dir,
            num_utts,
            min_frames,
            max_frames,
            dim,
            classes,
            noise,
            seed,
            prototype_seed,
            glide,
            prefix,
        } => {
            let mut spec = SyntheticSpec::new(num_utts, (min_frames, max_frames), dim, classes, noise, seed);
            spec.prototype_seed = prototype_seed;
            spec.id_prefix = prefix;
            if glide {
                spec.shape = FrameShape::Glide;
            }
            let m = generate_synthetic(&spec, &out_dir)?;
            println!(
                "wrote {} utterances ({:.3} h) to {}",
                m.len(),
                m.total_hours(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn kmeans(cmd: KmeansCmd) -> Result<()> {
    let KmeansCmd::Train {
        manifest,
        plan,
        k,
        seed,
        hours,
        max_iters,
        rel_tol,
        minibatch,
        out,
    } = cmd;
    let plans = plan.load()?;
    let mut m = CorpusManifest::load(&manifest)?;
    if let Some(h) = hours {
        m = sample_subset(&m, h, seed)?;
    }
    let mut vectors = Vec::new();
    let mut dim = 0;
    for record in read_corpus(&m)? {
        let pooled = segment(&record.features, &plans.plan(&record.utt_id)?)?;
        dim = pooled.dim;
        vectors.extend_from_slice(&pooled.segments);
    }
    let cfg = KMeansConfig {
        k,
        max_iters,
        rel_tol,
        seed,
        batch: minibatch.map_or(BatchMode::Full, |batch_size| BatchMode::MiniBatch { batch_size }),
    };
    let mut cb = train_kmeans(&vectors, dim, &cfg)?;
    cb.meta.segmentation = Some(plans.label());
    cb.meta.segment_width_ms = match plans {
        Plans::Fixed(w) => Some(w),
        Plans::Variable { .. } => None,
    };
    cb.save(&out)?;
    println!(
        "k={} dim={} points={} iterations={} inertia={}",
        cb.k(),
        cb.dim(),
        cb.meta.num_training_points,
        cb.meta.iterations_run,
        cb.meta.final_inertia
    );
    Ok(())
}

fn encode_all(records: &[UtteranceRecord], plans: &Plans, cb: &Codebook, dedup: bool) -> Result<Vec<UnitSequence>> {
    records
        .iter()
        .map(|r| Ok(encode(r, &plans.plan(&r.utt_id)?, cb, dedup)?))
        .collect()
}

fn encode_cmd(args: EncodeArgs) -> Result<()> {
    let plans = args.plan.load()?;
    let cb = Codebook::load(&args.codebook)?;
    let m = CorpusManifest::load(&args.manifest)?;
    let corpus = encode_all(&read_corpus(&m)?, &plans, &cb, !args.no_dedup)?;
    save_unit_corpus(&args.out, &corpus)?;
    let tokens: usize = corpus.iter().map(UnitSequence::len).sum();
    println!("{} utterances, {tokens} tokens", corpus.len());
    Ok(())
}

fn pack_cmd(args: PackArgs) -> Result<()> {
    let corpus = load_unit_corpus(&args.units)?;
    let k = match args
        .k
        .or_else(|| corpus.iter().find_map(|s| s.config.as_ref().map(|c| c.k)))
    {
        Some(k) => k,
        None => bail!("vocabulary size unknown; pass --k"),
    };
    let p = pack(&corpus, args.chunk_len, k, !args.no_separator)?;
    p.save(&args.out)?;
    println!(
        "{} chunks of {}, dropped tail {}",
        p.chunks.len(),
        p.chunk_len,
        p.dropped_tail
    );
    Ok(())
}

fn lm(cmd: LmCmd) -> Result<()> {
    match cmd {
        LmCmd::Train {
            packed,
            order,
            discount,
            no_eos,
            out,
        } => {
            let p = PackedDataset::load(&packed)?;
            let vocab = p.separator_id.map_or(p.vocab_size, |s| s as usize);
            let cfg = NgramConfig {
                order,
                discount: discount.map_or(Discount::Auto, Discount::Fixed),
                use_eos: !no_eos,
            };
            let model = unitkit::train_ngram(&p.segments(), vocab, &cfg)?;
            model.save(&out)?;
            let d: Vec<String> = model.discounts().iter().map(|d| format!("{d:.4}")).collect();
            println!("order {order}, vocab {vocab}, discounts [{}]", d.join(", "));
        }
        LmCmd::Score { lm, units, normalize } => {
            let model = NgramModel::load(&lm)?;
            let corpus = load_unit_corpus(&units)?;
            for seq in &corpus {
                let lp = if normalize {
                    model.normalized_logprob(&seq.units)?
                } else {
                    model.sequence_logprob(&seq.units)?
                };
                println!("{}\t{lp}", seq.utt_id);
            }
            let all: Vec<&[u32]> = corpus.iter().map(|s| s.units.as_slice()).collect();
            eprintln!("perplexity {}", model.perplexity(&all)?);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let benchmark: Benchmark = args.name.parse()?;
    let entries = load_benchmark_manifest(&args.bench)?;
    let lookup: HashMap<String, Vec<u32>> = match (&args.units, &args.stimuli, &args.codebook) {
        (Some(units), _, _) => load_unit_corpus(units)?
            .into_iter()
            .map(|s| (s.utt_id, s.units))
            .collect(),
        (None, Some(stimuli), Some(codebook)) => {
            let plans = args.plan.load()?;
            let cb = Codebook::load(codebook)?;
            let records = read_corpus(&CorpusManifest::load(stimuli)?)?;
            encode_all(&records, &plans, &cb, !args.no_dedup)?
                .into_iter()
                .map(|s| (s.utt_id, s.units))
                .collect()
        }
        _ if args.scores.is_some() => HashMap::new(),
        _ => bail!("give --units, or --stimuli with --codebook, or --scores"),
    };
    let pairs = resolve_pairs(&entries, &benchmark, |r| {
        if args.scores.is_some() && lookup.is_empty() {
            return Ok(Vec::new());
        }
        lookup
            .get(r)
            .cloned()
            .ok_or_else(|| unitkit::Error::Invalid(format!("stimulus {r:?} not found")))
    })?;
    let model;
    let table;
    let ngram;
    let scorer: &dyn Scorer = match (&args.lm, &args.scores) {
        (Some(path), None) => {
            model = NgramModel::load(path)?;
            ngram = NgramScorer {
                model: &model,
                normalize: args.normalize,
            };
            &ngram
        }
        (None, Some(path)) => {
            table = load_external_scores(path)?;
            &table
        }
        _ => bail!("give exactly one of --lm or --scores"),
    };
    let report = unitkit::evaluate(scorer, &pairs)?;
    println!(
        "{}: accuracy {:.4}, ties {:.4}, pairs {}",
        report.benchmark, report.accuracy, report.tie_rate, report.pair_count
    );
    for (cat, s) in &report.per_category {
        println!("  {cat}: {:.4} ({} pairs)", s.accuracy, s.count);
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &unitkit::EvalReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn find(corpus: Vec<UnitSequence>, utt: &str, path: &Path) -> Result<UnitSequence> {
    corpus
        .into_iter()
        .find(|s| s.utt_id == utt)
        .with_context(|| format!("{utt:?} not in {}", path.display()))
}

fn diff(args: DiffArgs) -> Result<()> {
    let a = find(load_unit_corpus(&args.a)?, &args.utt, &args.a)?;
    let b = find(load_unit_corpus(&args.b)?, &args.utt, &args.b)?;
    let show = |u: Option<u32>| u.map_or("-".to_string(), |u| u.to_string());
    println!("start_ms\tend_ms\ta\tb\tdiffers");
    for iv in align_diff(&a, &b)? {
        if args.only_diff && !iv.differs {
            continue;
        }
        println!(
            "{}\t{}\t{}\t{}\t{}",
            iv.start_ms,
            iv.end_ms,
            show(iv.unit_a),
            show(iv.unit_b),
            u8::from(iv.differs)
        );
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let corpus = load_unit_corpus(&args.units)?;
    let config = match corpus.iter().find_map(|s| s.config.clone()) {
        Some(c) => c,
        None => bail!("{} carries no tokenizer header", args.units.display()),
    };
    let mut s = corpus_stats(&corpus, &config)?;
    if !args.per_utterance {
        s.per_utterance.clear();
    }
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn sweep(cmd: SweepCmd) -> Result<()> {
    match cmd {
        SweepCmd::Run(args) => {
            let mut cfg = SweepConfig::load(&args.config)?;
            if let Some(v) = args.output_dir {
                cfg.output_dir = v;
            }
            if let Some(v) = args.n_values {
                cfg.n_values = v;
            }
            if let Some(v) = args.k_values {
                cfg.k_values = v;
            }
            if let Some(v) = args.seeds {
                cfg.seeds = v;
            }
            if let Some(v) = args.features_manifest {
                cfg.features_manifest = v;
            }
            if let Some(v) = args.kmeans_subset_hours {
                cfg.kmeans_subset_hours = Some(v);
            }
            if let Some(v) = args.chunk_len {
                cfg.chunk_len = v;
            }
            if let Some(v) = args.workers {
                cfg.workers = v;
            }
            cfg.dedup &= !args.no_dedup;
            cfg.use_separator &= !args.no_separator;
            cfg.spot_check &= !args.no_spot_check;

            let out = run_sweep(&cfg)?;
            let l = &out.ledger;
            println!(
                "{} cells, {} failed, {} reports; stages recomputed {}, reused {}",
                l.cells.len(),
                l.failed_cells().count(),
                out.reports.len(),
                l.recomputations(),
                l.hits()
            );
            for c in l.failed_cells() {
                println!("  failed {}: {:?}", c.cell, c.status);
            }
            if let Some(s) = &l.spot_check {
                println!(
                    "spot check {}: {}",
                    s.cell,
                    if s.passed() { "identical" } else { "MISMATCH" }
                );
                if !s.passed() {
                    bail!("cached artifacts differ from recomputation: {:?}", s.mismatches);
                }
            }
            if let Some(t) = &out.tables {
                print!("{}", unitkit::sweep::best_k_csv(t));
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        SweepCmd::Report { reports, out } => {
            let reports = load_reports(&reports)?;
            let emitted = emit_report(&reports, &out)?;
            print!("{}", unitkit::sweep::best_k_csv(&emitted.tables));
            println!("{} files in {}", emitted.files.len(), out.display());
        }
    }
    Ok(())
}
