//! `gaitvlm` — command-line surface of the gait vision-language pipeline.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `decode`, `plot-similarity`,
//! `gradcheck`. Every command exits 0 on success; failures print a one-line
//! JSON error record (`{"error": ..., "cause": [...]}`) to stderr and exit 1.
//! Run directories default to `./runs`; set `GAITVLM_RUN_ROOT` to move them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use gaitvlm_core::checkpoint;
use gaitvlm_core::datasim::{class_profile, generate_dataset, save_dataset};
use gaitvlm_core::decoder::{
    corpus_entry, ids_match_within, train_decoder, DecoderConfig, DecoderModel,
};
use gaitvlm_core::gaitparams::{
    render_sentence, GaitParameterSet, NormalizationStats, ParameterCombination,
};
use gaitvlm_core::gradcheck::{grad_check, GradCheckConfig};
use gaitvlm_core::harness::{
    clip_loss_graph, emit_plots, emit_similarity_map, evaluate, pick_combination, plan_folds,
    read_report, run_ablations, run_cv, classify_fold, CvReport, ExperimentConfig, Pipeline, Task,
    RUN_ROOT_ENV,
};
use gaitvlm_core::numtext::{detokenize, tokenize};
use gaitvlm_core::Tensor;

#[derive(Parser)]
#[command(name = "gaitvlm", version, about = "Knowledge-augmented gait classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config resolution shared by every subcommand: an optional TOML file,
/// then flag overrides on top.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the task: gait-scoring or dementia-group.
    #[arg(long)]
    task: Option<String>,
    /// Disable knowledge-aware prompt tuning (frozen class-name text instead).
    #[arg(long)]
    no_kapt: bool,
    /// Disable numerical text embeddings (numeric alignment term off).
    #[arg(long)]
    no_nte: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = &self.task {
            cfg.task = Task::parse(task)?;
        }
        if self.no_kapt {
            cfg.use_kapt = false;
        }
        if self.no_nte {
            cfg.use_nte = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gait dataset on disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: <run root>/dataset).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run k-fold cross-validation training and write a report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (default: <run root>/<task>-seed<seed>).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Run all four ablation variants instead of the single configured one.
        #[arg(long)]
        ablations: bool,
    },
    /// Re-evaluate saved fold checkpoints against the stored report.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Fold index to evaluate (default: every fold).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Train the sentence decoder and round-trip held-out sentences.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training corpus size.
        #[arg(long, default_value_t = 512)]
        sentences: usize,
        /// Held-out sentences to decode and print.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Save the trained decoder weights to this checkpoint.
        #[arg(long, value_name = "FILE")]
        save: Option<PathBuf>,
        /// Load decoder weights from a checkpoint instead of training.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Emit the value-grid similarity map (and, with --run, all run plots).
    PlotSimilarity {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Completed run directory; emits PCA + loss curves + similarity map there.
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        /// Output directory for the standalone map (default: <run root>/plots).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training-loss gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeded evaluation points.
        #[arg(long, default_value_t = 3)]
        points: usize,
        /// Check at the config's full dimensions instead of the reduced ones.
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cause: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let record = serde_json::json!({ "error": err.to_string(), "cause": cause });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out } => gen_data(&cfg.resolve()?, out),
        Command::Train { cfg, out, ablations } => train(&cfg.resolve()?, out, ablations),
        Command::Eval { run, fold } => eval(&run, fold),
        Command::Decode { cfg, sentences, samples, save, checkpoint } => {
            decode(&cfg.resolve()?, sentences, samples, save, checkpoint)
        }
        Command::PlotSimilarity { cfg, run, out } => plot_similarity(&cfg.resolve()?, run, out),
        Command::Gradcheck { cfg, points, full } => gradcheck(&cfg.resolve()?, points, full),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

fn gen_data(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| run_root().join("dataset"));
    let ds_cfg = cfg.dataset_config();
    let subjects = generate_dataset(&ds_cfg)?;
    save_dataset(&subjects, &ds_cfg, &dir)?;
    let videos: usize = subjects.iter().map(|s| s.videos.len()).sum();
    println!(
        "wrote {} subjects / {} videos ({} classes, separability {}) to {}",
        subjects.len(),
        videos,
        ds_cfg.n_classes(),
        ds_cfg.separability,
        dir.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn print_report(name: &str, report: &CvReport) {
    for (i, m) in report.fold_metrics.iter().enumerate() {
        println!(
            "  fold {i:02}: accuracy {:.4}  macro-F1 {:.4}  ({} videos)",
            m.accuracy, m.macro_f1, m.n_videos
        );
    }
    println!(
        "{name}: accuracy {:.4} ± {:.4}  macro-F1 {:.4} ± {:.4}",
        report.mean_accuracy, report.std_accuracy, report.mean_macro_f1, report.std_macro_f1
    );
}

fn train(cfg: &ExperimentConfig, out: Option<PathBuf>, ablations: bool) -> Result<()> {
    let dir = out.unwrap_or_else(|| {
        let task = match cfg.task {
            Task::GaitScoring => "gait-scoring",
            Task::DementiaGroup => "dementia-group",
        };
        run_root().join(format!("{task}-seed{}", cfg.seed))
    });
    let started = Instant::now();
    if ablations {
        let reports = run_ablations(cfg, &dir)?;
        for (name, report) in &reports {
            print_report(name, report);
        }
    } else {
        let report = run_cv(cfg, Some(&dir))?;
        print_report("overall", &report);
    }
    println!("run artifacts in {} ({:.1}s)", dir.display(), started.elapsed().as_secs_f64());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn eval(run_dir: &Path, fold: Option<usize>) -> Result<()> {
    let report_path = run_dir.join("report.json");
    let report = read_report(&report_path)
        .with_context(|| format!("reading {}", report_path.display()))?;
    let cfg = &report.config;
    let pipe = Pipeline::new(cfg)?;
    let subjects = generate_dataset(&cfg.dataset_config())?;
    let plan = plan_folds(cfg, &subjects)?;
    let folds: Vec<usize> = match fold {
        Some(i) => {
            if i >= plan.folds.len() {
                bail!("fold {i} out of range (run has {} folds)", plan.folds.len());
            }
            vec![i]
        }
        None => (0..plan.folds.len()).collect(),
    };
    for i in folds {
        let ckpt = run_dir.join(format!("fold{i:02}.ckpt"));
        let store = checkpoint::load(&ckpt)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let (predictions, labels) = classify_fold(&pipe, &subjects, &plan.folds[i], &store)?;
        let metrics = evaluate(&predictions, &labels, cfg.task.n_classes())?;
        let stored = &report.fold_metrics[i];
        println!(
            "fold {i:02}: accuracy {:.4}  macro-F1 {:.4}  ({} videos)",
            metrics.accuracy, metrics.macro_f1, metrics.n_videos
        );
        if &metrics != stored {
            bail!("fold {i}: re-evaluated metrics differ from the stored report");
        }
    }
    println!("all re-evaluated folds match the stored report bitwise");
    Ok(())
}

// ── decode ───────────────────────────────────────────────────────────

/// Build a sentence corpus by sampling parameter values from the
/// class-conditional generative profiles, rendering, and encoding.
fn sample_corpus(
    pipe: &Pipeline,
    combo: &ParameterCombination,
    stats: &NormalizationStats,
    n: usize,
    seed: u64,
) -> Result<Vec<(String, (Tensor, Vec<usize>))>> {
    let n_classes = pipe.cfg.task.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let mut values = GaitParameterSet::new(&format!("sample{i:05}"), class);
        for profile in class_profile(class, pipe.cfg.separability) {
            let normal = rand_distr::Normal::new(profile.mean, profile.sigma)?;
            values.set(profile.id, normal.sample(&mut rng))?;
        }
        let sentence = render_sentence(combo, &values)?;
        let seq = tokenize(&sentence, &pipe.vocab, stats)?;
        let reference = detokenize(&seq, &pipe.vocab);
        let entry = corpus_entry(&seq, &pipe.text_enc, &pipe.basis, &pipe.vocab)?;
        out.push((reference, entry));
    }
    Ok(out)
}

fn decode(
    cfg: &ExperimentConfig,
    sentences: usize,
    samples: usize,
    save: Option<PathBuf>,
    ckpt: Option<PathBuf>,
) -> Result<()> {
    if samples == 0 || sentences == 0 {
        bail!("--sentences and --samples must be positive");
    }
    let pipe = Pipeline::new(cfg)?;
    let subjects = generate_dataset(&cfg.dataset_config())?;
    let rows: Vec<GaitParameterSet> = subjects.iter().map(|s| s.params.clone()).collect();
    let stats = NormalizationStats::fit(&rows, 0)?;
    let combo = pick_combination(&rows, cfg.corr_threshold)?;
    println!(
        "parameter combination: [{}]",
        combo.ids().iter().map(|id| id.to_string()).collect::<Vec<_>>().join(", ")
    );

    let corpus = sample_corpus(&pipe, &combo, &stats, sentences + samples, cfg.seed)?;
    let (train_split, held_out) = corpus.split_at(sentences);

    let dec_cfg = DecoderConfig {
        dim: cfg.dim,
        layers: cfg.decoder_layers,
        heads: cfg.heads,
        d_ff: cfg.d_ff,
        max_len: cfg.max_len,
        ordinal_all_tokens: false,
    };
    let mut model = DecoderModel::new(dec_cfg, &pipe.vocab, cfg.seed)?;
    match ckpt {
        Some(path) => {
            let store = checkpoint::load(&path)
                .with_context(|| format!("loading decoder checkpoint {}", path.display()))?;
            model.set_params(store);
            println!("loaded decoder weights from {}", path.display());
        }
        None => {
            let entries: Vec<(Tensor, Vec<usize>)> =
                train_split.iter().map(|(_, e)| e.clone()).collect();
            let started = Instant::now();
            let report =
                train_decoder(&mut model, &entries, cfg.decoder_epochs, cfg.decoder_lr, cfg.seed)?;
            println!(
                "trained on {} sentences for {} epochs in {:.1}s (final mean loss {:.4})",
                entries.len(),
                cfg.decoder_epochs,
                started.elapsed().as_secs_f64(),
                report.epoch_mean_loss.last().unwrap_or(&f64::NAN)
            );
        }
    }

    let mut recovered = 0usize;
    for (reference, (prefix, ids)) in held_out {
        let out = model.decode(prefix, cfg.max_len)?;
        let ok = ids_match_within(ids, &out.dense_ids, &pipe.vocab, 2);
        recovered += ok as usize;
        let decoded = model.decode_to_sentence(prefix, cfg.max_len)?;
        println!("  [{}] reference: {reference}", if ok { "ok" } else { "MISS" });
        println!("         decoded: {decoded}");
    }
    println!(
        "{recovered}/{} held-out sentences recovered (parameter words exact, values within ±2 buckets)",
        held_out.len()
    );
    if let Some(path) = save {
        checkpoint::save(model.params(), &path)?;
        println!("saved decoder weights to {}", path.display());
    }
    Ok(())
}

// ── plot-similarity ──────────────────────────────────────────────────

fn plot_similarity(
    cfg: &ExperimentConfig,
    run: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let files = match run {
        Some(run_dir) => emit_plots(&run_dir)?,
        None => {
            let dir = out.unwrap_or_else(|| run_root().join("plots"));
            std::fs::create_dir_all(&dir)?;
            emit_similarity_map(cfg, &dir)?
        }
    };
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

/// Reduced dimensions keep the finite-difference sweep (two forward passes
/// per trainable scalar) in CLI territory; --full keeps the config's shape.
fn gradcheck_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut small = cfg.clone();
    small.dim = 16;
    small.layers = 2;
    small.heads = 2;
    small.d_ff = 24;
    small.f_in = 4;
    small.frames_per_video = 12;
    small.window = 12;
    small.train_stride = 6;
    small.n_ctx = 2;
    small.n_keywords = 2;
    small.proj_dim = 8;
    small
}

fn gradcheck(cfg: &ExperimentConfig, points: usize, full: bool) -> Result<()> {
    if points == 0 {
        bail!("--points must be positive");
    }
    let base = if full { cfg.clone() } else { gradcheck_config(cfg) };
    base.validate()?;
    let tolerance = 1e-4;
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut point_cfg = base.clone();
        point_cfg.seed = base.seed.wrapping_add(point as u64);
        let pipe = Pipeline::new(&point_cfg)?;
        let store = pipe.init_trainable()?;

        // deterministic synthetic clip + paired sentence embedding
        let mut rng = ChaCha8Rng::seed_from_u64(point_cfg.seed ^ 0x6AD5);
        let normal = rand_distr::Normal::new(0.0, 1.0)?;
        let frames = Tensor::new(
            vec![point_cfg.window, point_cfg.f_in],
            (0..point_cfg.window * point_cfg.f_in).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let subjects = generate_dataset(&point_cfg.dataset_config())?;
        let rows: Vec<GaitParameterSet> = subjects.iter().map(|s| s.params.clone()).collect();
        let stats = NormalizationStats::fit(&rows, 0)?;
        let combo = pick_combination(&rows, point_cfg.corr_threshold)?;
        let sentence = render_sentence(&combo, &subjects[point].params)?;
        let f_num = pipe.sentence_embedding(&sentence, &stats)?;

        let label = point % point_cfg.task.n_classes();
        let (g, loss) =
            clip_loss_graph(&pipe, &store, &frames, label, Some(&f_num), None)?;
        let report = grad_check(&g, loss, &GradCheckConfig::default())?;
        println!(
            "point {point}: max relative error {:.3e} over {} scalars \
             (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
            report.max_rel_err,
            report.checked,
            report.worst_leaf,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst >= tolerance {
        bail!("gradient check failed: max relative error {worst:.3e} >= {tolerance:.0e}");
    }
    println!("gradient check passed: max relative error {worst:.3e} < {tolerance:.0e}");
    Ok(())
}
