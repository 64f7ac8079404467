//! Operator surface for the hypergraph event-prediction toolkit: dataset
//! synthesis, two-phase training, evaluation with baselines, streaming
//! prediction, schema validation, and manifest-driven reruns.
//!
//! Flag precedence is flags > config file > built-in defaults. Exit codes:
//! 0 success, 2 configuration/schema/shape errors, 3 data errors, 4 numeric
//! failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hgt_core::error::{Error, Result};
use hgt_core::model::Variant;
use hgt_core::pipeline::{
    rerun_from_manifest, run_evaluation, run_prediction, run_training, synthesize_to_dir,
    RerunOutcome, DEFAULT_EVAL_HORIZONS,
};
use hgt_core::schema::{build_task_schema, validate_schema, GraphSchema, TaskId};
use hgt_core::sim::{precedence_preset, WorkflowSimConfig};
use hgt_core::training::TrainConfig;

#[derive(Parser)]
#[command(
    name = "hgt",
    version,
    about = "Detect and forecast structured interaction events over frame-feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workflow dataset in the normalized layout.
    Synthesize(SynthesizeArgs),
    /// Train a model with the two-phase schedule and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one or more future offsets.
    Evaluate(EvaluateArgs),
    /// Stream per-offset label probabilities for one feature file.
    Predict(PredictArgs),
    /// Check a schema for structural violations.
    ValidateSchema(ValidateSchemaArgs),
    /// Re-execute a recorded run from its manifest.
    Rerun(RerunArgs),
}

#[derive(clap::Args)]
struct SynthesizeArgs {
    /// Simulator config TOML; omitted, the built-in gated workflow is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Root seed (overrides the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences (overrides the config value).
    #[arg(long)]
    sequences: Option<usize>,
    /// Frames per sequence at 1 FPS (overrides the config value).
    #[arg(long)]
    length: Option<usize>,
    /// Frame feature dimensionality (overrides the config value).
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Probability that the safety ordering is obeyed; needs a config whose
    /// workflow has an ordering rule.
    #[arg(long)]
    p_obey: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training config TOML; omitted, defaults for the chosen task apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory in the normalized annotation layout.
    #[arg(long)]
    data: PathBuf,
    /// Run output directory (checkpoints, metrics log, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Task whose canonical graph to train: triplet, cvs, clipping, or
    /// clipping_with_cvs_prior.
    #[arg(long)]
    task: Option<String>,
    /// Schema TOML file; wins over --task.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Root seed (overrides the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Temporal predictor: transformer or recurrent_cell.
    #[arg(long)]
    variant: Option<String>,
    /// Prediction horizon in seconds (overrides config and schema).
    #[arg(long)]
    horizon: Option<usize>,
    /// Past window in seconds (overrides config and schema).
    #[arg(long)]
    past_window: Option<usize>,
    /// Epochs of node-side pretraining; 0 skips straight to joint training.
    #[arg(long)]
    phase1_epochs: Option<usize>,
    /// Epochs of joint training.
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of sequences assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Checkpoint to resume from; the step count continues.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Checkpoint file produced by a training run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Offsets to report, comma-separated or repeated; defaults to 0,4.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,
    /// Task whose canonical schema the checkpoint was trained against.
    #[arg(long)]
    task: Option<String>,
    /// Schema TOML file; wins over --task.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Past window the checkpoint was trained with (overrides the schema).
    #[arg(long)]
    past_window: Option<usize>,
    /// Horizon recorded in the checkpoint's task, needed for the schema
    /// hash to match; the offsets actually rolled out come from --horizon.
    #[arg(long)]
    rollout: Option<usize>,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Checkpoint file produced by a training run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary frame-feature file.
    #[arg(long)]
    features: PathBuf,
    /// Output TSV path; omitted, rows stream to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task whose canonical schema the checkpoint was trained against.
    #[arg(long)]
    task: Option<String>,
    /// Schema TOML file; wins over --task.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Past window in seconds (overrides the schema).
    #[arg(long)]
    past_window: Option<usize>,
    /// Offsets to emit per time point (overrides the schema).
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(clap::Args)]
struct ValidateSchemaArgs {
    /// Schema TOML file to check.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Canonical task schema to check instead of a file.
    #[arg(long)]
    task: Option<String>,
}

#[derive(clap::Args)]
struct RerunArgs {
    /// Manifest written by a previous synthesize/train/evaluate run.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh output directory for the re-executed run.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ValidateSchema(a) => cmd_validate_schema(a),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => WorkflowSimConfig::load(path)?,
        None => precedence_preset(0.9, 20, 120, 16, 0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.sequences {
        cfg.n_sequences = n;
    }
    if let Some(l) = a.length {
        cfg.sequence_length = l;
    }
    if let Some(d) = a.feature_dim {
        cfg.feature_dim = d;
    }
    if let Some(p) = a.p_obey {
        match cfg.ordering.as_mut() {
            Some(rule) => rule.p_obey = p,
            None => {
                return Err(Error::Config(
                    "--p-obey given but the workflow has no ordering rule".into(),
                ))
            }
        }
    }
    let out = synthesize_to_dir(&cfg, &a.out)?;
    println!(
        "wrote {} sequences to {} (manifest {})",
        out.n_sequences,
        out.out_dir.display(),
        out.manifest_path.display()
    );
    Ok(())
}

/// Resolves the graph to operate on: an explicit schema file wins, then a
/// --task name, then the fallback id. Window flags override the result.
fn resolve_schema(
    schema_path: Option<&Path>,
    task: Option<&str>,
    fallback: Option<&TaskId>,
    past_window: Option<usize>,
    horizon: Option<usize>,
) -> Result<GraphSchema> {
    let mut schema = match (schema_path, task) {
        (Some(path), _) => GraphSchema::load(path)?,
        (None, Some(name)) => build_task_schema(&TaskId::parse(name))?,
        (None, None) => match fallback {
            Some(id) => build_task_schema(id)?,
            None => {
                return Err(Error::Config(
                    "no schema given: pass --schema FILE or --task NAME".into(),
                ))
            }
        },
    };
    if let Some(p) = past_window {
        schema.task.past_window = p;
    }
    if let Some(f) = horizon {
        schema.task.horizon = f;
    }
    Ok(schema)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(name) = &a.task {
        cfg.task.id = TaskId::parse(name);
    }
    if let Some(p) = a.past_window {
        cfg.task.past_window = p;
    }
    if let Some(f) = a.horizon {
        cfg.task.horizon = f;
    }
    let mut schema = resolve_schema(
        a.schema.as_deref(),
        a.task.as_deref(),
        Some(&cfg.task.id),
        None,
        None,
    )?;
    // the config's windows define the task; flags already folded in above
    schema.task.past_window = cfg.task.past_window;
    schema.task.horizon = cfg.task.horizon;
    cfg.task = schema.task.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(e) = a.phase1_epochs {
        cfg.phase1_epochs = e;
    }
    if let Some(e) = a.phase2_epochs {
        cfg.phase2_epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let run = run_training(
        &cfg,
        &schema,
        &a.data,
        &a.out,
        a.train_fraction,
        a.resume.as_deref(),
    )?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let best = run
        .outcome
        .history
        .iter()
        .filter_map(|r| r.val_map)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "trained {} epochs ({} train / {} val sequences)",
        run.outcome.history.len(),
        run.train_ids.len(),
        run.val_ids.len()
    );
    if best.is_finite() {
        println!(
            "best val mAP {:.4} at epoch {}",
            run.outcome.best_val_map, run.outcome.best_epoch
        );
    }
    println!(
        "checkpoints: {} (best), {} (last); log {}",
        run.outcome.best_path.display(),
        run.outcome.last_path.display(),
        run.outcome.log_path.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let schema = resolve_schema(
        a.schema.as_deref(),
        a.task.as_deref(),
        None,
        a.past_window,
        a.rollout,
    )?;
    let horizons: Vec<usize> = if a.horizon.is_empty() {
        DEFAULT_EVAL_HORIZONS.to_vec()
    } else {
        a.horizon.clone()
    };
    let run = run_evaluation(&a.checkpoint, &schema, &a.data, &horizons, &a.out)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    for (i, &h) in run.summary.horizons.iter().enumerate() {
        println!(
            "h={h}  mAP {:.4}  (marginal {:.4}, persistence {:.4})",
            run.summary.model_mean_ap[i],
            run.summary.marginal_mean_ap[i],
            run.summary.persistence_mean_ap[i]
        );
    }
    println!(
        "{} windows evaluated; reports in {}",
        run.summary.n_windows,
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    // window flags shape the task itself: the schema hash must match the
    // checkpoint, and the same windows drive the forward pass
    let schema = resolve_schema(
        a.schema.as_deref(),
        a.task.as_deref(),
        None,
        a.past_window,
        a.horizon,
    )?;
    let p = schema.task.past_window;
    let f = schema.task.horizon;
    match &a.out {
        Some(path) => {
            let mut file = std::fs::File::create(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let rows = run_prediction(&a.checkpoint, &schema, &a.features, p, f, &mut file)?;
            eprintln!("wrote {rows} rows to {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            run_prediction(&a.checkpoint, &schema, &a.features, p, f, &mut lock)?;
        }
    }
    Ok(())
}

fn cmd_validate_schema(a: ValidateSchemaArgs) -> Result<()> {
    let schema = resolve_schema(a.schema.as_deref(), a.task.as_deref(), None, None, None)?;
    let violations = validate_schema(&schema);
    if violations.is_empty() {
        println!(
            "ok: {} nodes, {} hyperedges, {} label columns",
            schema.nodes.len(),
            schema.edges.len(),
            schema.task.labels.len()
        );
        Ok(())
    } else {
        for v in &violations {
            eprintln!("{}: {}", v.element, v.rule);
        }
        Err(Error::Config(format!(
            "schema has {} violation(s)",
            violations.len()
        )))
    }
}

fn cmd_rerun(a: RerunArgs) -> Result<()> {
    match rerun_from_manifest(&a.manifest, &a.out)? {
        RerunOutcome::Synthesis(s) => {
            println!("re-synthesized {} sequences into {}", s.n_sequences, s.out_dir.display())
        }
        RerunOutcome::Training(t) => println!(
            "re-trained; log {} ({} epochs)",
            t.outcome.log_path.display(),
            t.outcome.history.len()
        ),
        RerunOutcome::Evaluation(e) => println!(
            "re-evaluated {} windows; reports in {}",
            e.summary.n_windows,
            a.out.display()
        ),
    }
    Ok(())
}
