//! `lpt`: dataset synthesis, the training stages, evaluation and analysis
//! for long-tailed prompt tuning on a micro vision transformer.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lpt_core::analysis::{cluster_stats, evaluate, export_features, infer, knn_accuracy, match_stats};
use lpt_core::checkpoint::Checkpoint;
use lpt_core::config::RunConfig;
use lpt_core::data::{load_binary_dataset, manifest_text, parse_manifest, save_binary_dataset, write_atomic, Dataset, Split};
use lpt_core::objective::ClassCounts;
use lpt_core::pipeline::synthesize;
use lpt_core::trainer::{eval_split, init_pretrain_model, model_from_checkpoint, prepare_model, reference_mode, train_stage, RunOptions, Stage, StageData};
use lpt_core::vit::Model;

#[derive(Parser)]
#[command(name = "lpt", version, about = "Long-tailed prompt tuning on a micro vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (config key `out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining set and the long-tailed target splits.
    Synth(Common),
    /// Train the backbone on the pretraining domain.
    Pretrain(TrainArgs),
    /// Linear probe on frozen features.
    Probe(TrainArgs),
    /// Shared prompt and classifier.
    Phase1(TrainArgs),
    /// Group prompt pool on top of phase 1.
    Phase2(TrainArgs),
    /// Both prompt types trained together from the pretrained backbone.
    Joint(TrainArgs),
    /// Accuracy report on a dataset.
    Eval(EvalArgs),
    /// Feature and matching analyses.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Number of epochs for this stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the stage's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to the latest trained stage.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Binary dataset; defaults to the target test split.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    what: What,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum What {
    Clusters,
    Knn,
    Matches,
    Export,
}

impl What {
    fn name(self) -> &'static str {
        match self {
            What::Clusters => "clusters",
            What::Knn => "knn",
            What::Matches => "matches",
            What::Export => "export",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(c) => cmd_synth(&c),
        Command::Pretrain(a) => cmd_train(Stage::Pretrain, &a),
        Command::Probe(a) => cmd_train(Stage::Probe, &a),
        Command::Phase1(a) => cmd_train(Stage::Phase1, &a),
        Command::Phase2(a) => cmd_train(Stage::Phase2, &a),
        Command::Joint(a) => cmd_train(Stage::Joint, &a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    overrides.extend_from_slice(extra);
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest")
}

fn checkpoint_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.checkpoint_dir().join(format!("{stage}.ckpt"))
}

fn best_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.checkpoint_dir().join(format!("{stage}.best.ckpt"))
}

/// The model a stage hands on: best-on-val when selection is enabled and a
/// best checkpoint exists, else the latest state.
fn stage_output(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let latest = checkpoint_path(cfg, stage);
    if !latest.exists() {
        bail!(
            "{stage} checkpoint not found at {}; run `lpt {stage}` first",
            latest.display()
        );
    }
    let best = best_path(cfg, stage);
    Ok(if cfg.select_best && best.exists() { best } else { latest })
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    save_binary_dataset(ds, path)?;
    write_atomic(&manifest_path(path), manifest_text(&ds.counts(), &[]).as_bytes())?;
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let dir = cfg.data_dir();
    if is_nonempty_dir(&dir) && !common.force {
        bail!("{} is not empty; pass --force to overwrite", dir.display());
    }
    let sets = synthesize(&cfg)?;
    let files = [
        (&sets.pretrain, cfg.pretrain_file()),
        (&sets.pool, dir.join("target_pool.bin")),
        (&sets.train, cfg.train_file()),
        (&sets.val, cfg.val_file()),
        (&sets.test, cfg.test_file()),
    ];
    for (ds, path) in &files {
        write_dataset(ds, path)?;
        println!("{}: {} images", path.display(), ds.len());
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig, path: &Path, split: Split) -> Result<Dataset> {
    let side = cfg.model.image_side;
    load_binary_dataset(path, side, side, cfg.classes, split).with_context(|| format!("loading {}", path.display()))
}

/// Per-class training counts, from the manifest when present.
fn train_counts(cfg: &RunConfig) -> Result<ClassCounts> {
    let path = cfg.train_file();
    if let Ok(text) = fs::read_to_string(manifest_path(&path)) {
        let rows = parse_manifest(&text)?;
        if rows.len() == cfg.classes {
            return Ok(ClassCounts::new(rows.into_iter().map(|r| r.1).collect()));
        }
    }
    Ok(load_dataset(cfg, &path, Split::Train)?.counts())
}

fn cmd_train(stage: Stage, args: &TrainArgs) -> Result<()> {
    let extra: Vec<(String, String)> = args
        .epochs
        .map(|e| vec![(format!("{stage}.epochs"), e.to_string())])
        .unwrap_or_default();
    let cfg = load_config(&args.common, &extra)?;
    let latest = checkpoint_path(&cfg, stage);
    let log = cfg.log_dir().join(format!("{stage}.jsonl"));
    if latest.exists() && !args.resume && !args.common.force {
        bail!(
            "{} already exists; pass --resume to continue or --force to retrain",
            latest.display()
        );
    }
    let source = match stage.prerequisite() {
        Some(pre) => {
            let path = stage_output(&cfg, pre)?;
            Some(model_from_checkpoint(&cfg, &Checkpoint::load(&path)?).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let model = match &source {
        Some(src) => prepare_model(stage, &cfg, src)?,
        None => init_pretrain_model(&cfg),
    };
    let (train, val) = match stage {
        Stage::Pretrain => (load_dataset(&cfg, &cfg.pretrain_file(), Split::Train)?, None),
        _ => (
            load_dataset(&cfg, &cfg.train_file(), Split::Train)?,
            Some(load_dataset(&cfg, &cfg.val_file(), Split::Val)?),
        ),
    };
    let resume = if args.resume && latest.exists() {
        Some(Checkpoint::load(&latest)?)
    } else {
        None
    };
    if resume.is_none() {
        let _ = fs::remove_file(&log);
        let _ = fs::remove_file(best_path(&cfg, stage));
    }
    let opts = RunOptions {
        checkpoint: Some(latest.clone()),
        best: (stage != Stage::Pretrain).then(|| best_path(&cfg, stage)),
        log: Some(log.clone()),
        resume,
        stop_after: None,
    };
    if reference_mode() {
        eprintln!("reference mode: single-threaded f64 execution");
    }
    let result = train_stage(stage, &cfg, model, &StageData { train: &train, val: val.as_ref() }, &opts)?;
    for rec in &result.history {
        match &rec.val {
            Some(v) => println!("{stage} epoch {} loss {:.4} val {:.2}", rec.epoch, rec.loss, v.overall * 100.0),
            None => println!("{stage} epoch {} loss {:.4}", rec.epoch, rec.loss),
        }
    }
    println!("checkpoint {}", latest.display());
    println!("log {}", log.display());
    Ok(())
}

/// Most advanced stage with a checkpoint.
fn default_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    for stage in [Stage::Phase2, Stage::Joint, Stage::Phase1, Stage::Probe] {
        if checkpoint_path(cfg, stage).exists() {
            return stage_output(cfg, stage);
        }
    }
    bail!("no trained checkpoint under {}; pass --checkpoint", cfg.checkpoint_dir().display())
}

struct Loaded {
    cfg: RunConfig,
    model: Model,
    data: Dataset,
    ckpt: PathBuf,
    data_path: PathBuf,
}

fn load_for_eval(args: &EvalArgs) -> Result<Loaded> {
    let cfg = load_config(&args.common, &[])?;
    let ckpt = match &args.checkpoint {
        Some(p) => p.clone(),
        None => default_checkpoint(&cfg)?,
    };
    let model = model_from_checkpoint(&cfg, &Checkpoint::load(&ckpt)?).with_context(|| format!("loading {}", ckpt.display()))?;
    let data_path = args.data.clone().unwrap_or_else(|| cfg.test_file());
    let data = load_dataset(&cfg, &data_path, Split::Test)?;
    Ok(Loaded {
        cfg,
        model,
        data,
        ckpt,
        data_path,
    })
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".ckpt").trim_end_matches(".bin").replace('.', "_")
}

fn report_path(l: &Loaded, kind: &str, ext: &str) -> PathBuf {
    l.cfg
        .report_dir()
        .join(format!("{kind}-{}-{}.{ext}", stem(&l.ckpt), stem(&l.data_path)))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let l = load_for_eval(args)?;
    let split = eval_split(&l.cfg, &train_counts(&l.cfg)?)?;
    let report = evaluate(&l.model, &l.data, &split, l.cfg.prompt.top_k)?;
    println!("{}", report.summary());
    let path = report_path(&l, "eval", "json");
    write_atomic(&path, format!("{}\n", report.to_json()).as_bytes())?;
    println!("report {}", path.display());
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let l = load_for_eval(&args.eval)?;
    let top_k = l.cfg.prompt.top_k;
    let out = infer(&l.model, &l.data.images, top_k)?;
    let labels = &l.data.labels;
    let (path, body) = match args.what {
        What::Clusters => {
            let stats = cluster_stats(&out.features, labels, l.cfg.distance)?;
            println!(
                "inner mean {:.6}  inter {:.6}  gamma {:.6}  ({} distance)",
                stats.inner.iter().sum::<f64>() / stats.inner.len() as f64,
                stats.inter,
                stats.gamma,
                l.cfg.distance
            );
            (report_path(&l, "clusters", "json"), serde_json::to_string_pretty(&stats)?)
        }
        What::Knn => {
            let gallery = load_dataset(&l.cfg, &l.cfg.train_file(), Split::Train)?;
            let g = infer(&l.model, &gallery.images, top_k)?;
            let acc = knn_accuracy(&g.features, &gallery.labels, &out.features, labels, l.cfg.knn_k)?;
            println!("knn k={} accuracy {:.2}", l.cfg.knn_k, acc * 100.0);
            let body = json!({"k": l.cfg.knn_k, "accuracy": acc, "gallery": l.cfg.train_file(), "queries": labels.len()});
            (report_path(&l, "knn", "json"), serde_json::to_string_pretty(&body)?)
        }
        What::Matches => {
            let (Some(matches), Some(pool)) = (&out.matches, &l.model.pool) else {
                bail!("{} has no prompt pool; matches need a phase-2 checkpoint", l.ckpt.display());
            };
            let stats = match_stats(matches, labels, l.cfg.classes, pool.size())?;
            let mut table = String::from("class samples first second top2_share top2_coverage\n");
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            for c in 0..l.cfg.classes {
                let shares = stats.histogram.top_shares(c, 2);
                table += &format!(
                    "{c} {} {} {} {} {}\n",
                    stats.histogram.samples[c],
                    cell(shares.first().copied()),
                    cell(shares.get(1).copied()),
                    cell(stats.top2_share[c]),
                    cell(stats.top2_coverage[c]),
                );
            }
            print!("{table}");
            (report_path(&l, "matches", "txt"), table)
        }
        What::Export => {
            let path = report_path(&l, "features", "txt");
            export_features(&out.features, labels, l.cfg.model.dim, &path)?;
            println!("features {}", path.display());
            return Ok(());
        }
    };
    write_atomic(&path, format!("{}\n", body.trim_end()).as_bytes())?;
    println!("{} {}", args.what.name(), path.display());
    Ok(())
}
