//! Run orchestration: dataset synthesis, training, evaluation, and
//! streaming prediction over feature files. Every synthesis, training, or
//! evaluation run leaves a `manifest.toml` with enough of a snapshot to
//! re-execute it; [`rerun_from_manifest`] does exactly that.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::load_precomputed;
use crate::data::{load_annotations, split, write_annotations, LabeledSequence};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, before_first_mask, conditional_ap, pr_curve, EvalReport};
use crate::model::{Checkpoint, HgtModel};
use crate::nn::derive_seed;
use crate::plot::{ap_vs_horizon_svg, pr_curve_svg};
use crate::schema::{ElementRef, GraphSchema, CVS_ACHIEVED};
use crate::sim::{simulate, WorkflowSimConfig};
use crate::training::{train, TrainConfig, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Offsets evaluated when the caller does not ask for specific ones.
pub const DEFAULT_EVAL_HORIZONS: [usize; 2] = [0, 4];

/// Reproducibility record written once per synthesis/training/evaluation
/// run. The config snapshot plus the explicit split make the run
/// re-executable without the original command line; timestamps are the one
/// field that varies between otherwise identical runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    /// One of `synthesize`, `train`, `evaluate`.
    pub command: String,
    pub seed: u64,
    /// Unix epoch seconds.
    pub started_at: u64,
    pub finished_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_hash: Option<String>,
    /// TOML snapshot of the config that drove the run.
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub horizons: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_ids: Vec<String>,
    /// Produced files, relative to the run's output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, started_at: u64, config: String) -> RunManifest {
        RunManifest {
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            started_at,
            finished_at: epoch_now(),
            schema_hash: None,
            config,
            schema: None,
            dataset_dir: None,
            checkpoint: None,
            horizons: Vec::new(),
            train_ids: Vec::new(),
            val_ids: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("parse manifest: {e}")))
    }
}

fn epoch_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SynthesisOutcome {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub n_sequences: usize,
    pub sequence_ids: Vec<String>,
}

/// Simulates the configured workflow and writes the dataset in the
/// normalized annotation layout plus a manifest. Deterministic: the same
/// config and seed produce byte-identical data files.
pub fn synthesize_to_dir(cfg: &WorkflowSimConfig, out_dir: &Path) -> Result<SynthesisOutcome> {
    let started = epoch_now();
    let sequences = simulate(cfg)?;
    ensure_dir(out_dir)?;
    write_annotations(out_dir, &sequences)?;
    let mut outputs = vec!["vocabulary.txt".to_string()];
    for s in &sequences {
        outputs.push(format!("{}.ann", s.id));
        if s.features.first().is_some_and(|f| !f.vector.is_empty()) {
            outputs.push(format!("{}.bin", s.id));
        }
    }
    let mut manifest = RunManifest::new("synthesize", cfg.seed, started, cfg.to_toml()?);
    manifest.outputs = outputs;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(SynthesisOutcome {
        out_dir: out_dir.to_path_buf(),
        manifest_path,
        n_sequences: sequences.len(),
        sequence_ids: sequences.into_iter().map(|s| s.id).collect(),
    })
}

// ---------------------------------------------------------------------------
// Dataset loading shared by training and evaluation
// ---------------------------------------------------------------------------

/// Loads a dataset directory and aligns every sequence to the given label
/// columns, projecting when the stored vocabulary is a superset. Checks
/// feature dimensionality up front so the failure names the sequence
/// instead of surfacing later as a shape error mid-training.
fn load_dataset(
    dir: &Path,
    labels: &[String],
    feature_dim: usize,
) -> Result<(Vec<LabeledSequence>, Vec<String>)> {
    let outcome = load_annotations(dir)?;
    if outcome.sequences.is_empty() {
        return Err(Error::Data(format!(
            "{}: dataset holds no sequences",
            dir.display()
        )));
    }
    let mut aligned = Vec::with_capacity(outcome.sequences.len());
    for seq in outcome.sequences {
        let seq = if seq.vocabulary == labels {
            seq
        } else {
            seq.project(labels)?
        };
        let got = seq.features.first().map_or(0, |f| f.vector.len());
        if got != feature_dim {
            return Err(Error::Shape(format!(
                "{}: features have dim {got} but the model encodes dim {feature_dim} \
                 (is the .bin feature file present?)",
                seq.id
            )));
        }
        aligned.push(seq);
    }
    Ok((aligned, outcome.warnings))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainingRun {
    pub outcome: TrainOutcome,
    pub manifest_path: PathBuf,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub warnings: Vec<String>,
}

/// Loads the dataset, splits it by sequence with a seed derived from the
/// training seed, runs the two-phase schedule, and writes a manifest
/// recording the exact split.
pub fn run_training(
    cfg: &TrainConfig,
    schema: &GraphSchema,
    dataset_dir: &Path,
    out_dir: &Path,
    train_fraction: f64,
    resume: Option<&Path>,
) -> Result<TrainingRun> {
    let started = epoch_now();
    let (data, warnings) = load_dataset(dataset_dir, &schema.task.labels, cfg.model.backbone_dim)?;
    let (train_data, val_data) = split(data, train_fraction, derive_seed(cfg.seed, "split"))?;
    finish_training(
        cfg,
        schema,
        dataset_dir,
        out_dir,
        train_data,
        val_data,
        resume,
        warnings,
        started,
    )
}

/// Same as [`run_training`] but with the sequence split given explicitly,
/// as recorded in a manifest. Sequences not named on either side are
/// dropped; unknown or duplicated ids are errors.
pub fn run_training_with_split(
    cfg: &TrainConfig,
    schema: &GraphSchema,
    dataset_dir: &Path,
    out_dir: &Path,
    train_ids: &[String],
    val_ids: &[String],
    resume: Option<&Path>,
) -> Result<TrainingRun> {
    let started = epoch_now();
    let (data, warnings) = load_dataset(dataset_dir, &schema.task.labels, cfg.model.backbone_dim)?;
    let train_set: BTreeSet<&String> = train_ids.iter().collect();
    let val_set: BTreeSet<&String> = val_ids.iter().collect();
    if let Some(id) = train_set.intersection(&val_set).next() {
        return Err(Error::Config(format!(
            "sequence {id} is listed on both sides of the split"
        )));
    }
    let present: BTreeSet<&String> = data.iter().map(|s| &s.id).collect();
    for id in train_set.iter().chain(val_set.iter()) {
        if !present.contains(*id) {
            return Err(Error::Data(format!(
                "split names sequence {id} which the dataset does not contain"
            )));
        }
    }
    let mut train_data = Vec::new();
    let mut val_data = Vec::new();
    for seq in data {
        if train_set.contains(&seq.id) {
            train_data.push(seq);
        } else if val_set.contains(&seq.id) {
            val_data.push(seq);
        }
    }
    finish_training(
        cfg,
        schema,
        dataset_dir,
        out_dir,
        train_data,
        val_data,
        resume,
        warnings,
        started,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_training(
    cfg: &TrainConfig,
    schema: &GraphSchema,
    dataset_dir: &Path,
    out_dir: &Path,
    train_data: Vec<LabeledSequence>,
    val_data: Vec<LabeledSequence>,
    resume: Option<&Path>,
    warnings: Vec<String>,
    started: u64,
) -> Result<TrainingRun> {
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(cfg, schema, &train_data, &val_data, out_dir, resume_ckpt.as_ref())?;
    let train_ids: Vec<String> = train_data.iter().map(|s| s.id.clone()).collect();
    let val_ids: Vec<String> = val_data.iter().map(|s| s.id.clone()).collect();
    let mut manifest = RunManifest::new("train", cfg.seed, started, cfg.to_toml()?);
    manifest.schema_hash = Some(schema.content_hash());
    manifest.schema = Some(schema.to_toml());
    manifest.dataset_dir = Some(dataset_dir.display().to_string());
    manifest.train_ids = train_ids.clone();
    manifest.val_ids = val_ids.clone();
    manifest.outputs = ["metrics.jsonl", "best.json", "last.json"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(TrainingRun {
        outcome,
        manifest_path,
        train_ids,
        val_ids,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-horizon mean scores next to two reference points: the
/// marginal-frequency ranking (constant per-class scores, so the ranking is
/// dataset order) and last-label persistence (the current frame's labels
/// reused as the forecast). NaN marks horizons where no class had a
/// positive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub horizons: Vec<usize>,
    pub model_mean_ap: Vec<f64>,
    pub marginal_mean_ap: Vec<f64>,
    pub persistence_mean_ap: Vec<f64>,
    pub n_windows: usize,
}

#[derive(Debug)]
pub struct EvaluationRun {
    pub reports: Vec<EvalReport>,
    pub summary: EvalSummary,
    pub report_paths: Vec<PathBuf>,
    pub manifest_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Evaluates a checkpoint over a dataset at the requested offsets, writing
/// one report (TOML + flat table + PR chart) per horizon, a summary with
/// baselines, an AP-versus-horizon chart, and a manifest. Refuses when the
/// checkpoint's schema hash does not match the given schema.
pub fn run_evaluation(
    ckpt_path: &Path,
    schema: &GraphSchema,
    dataset_dir: &Path,
    horizons: &[usize],
    out_dir: &Path,
) -> Result<EvaluationRun> {
    let started = epoch_now();
    if horizons.is_empty() {
        return Err(Error::Config("no evaluation horizons requested".into()));
    }
    let mut horizons = horizons.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = HgtModel::from_checkpoint(&ckpt, schema.clone())?;
    let (data, mut warnings) =
        load_dataset(dataset_dir, &schema.task.labels, model.cfg.backbone_dim)?;

    let p = schema.task.past_window;
    let max_h = *horizons.last().unwrap();
    let labels = &schema.task.labels;
    let n_classes = labels.len();
    let achieved_col = labels.iter().position(|l| l == CVS_ACHIEVED);

    // per horizon: model scores, truth; shared: persistence scores, the
    // before-achievement condition at forecast-issue time
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); horizons.len()];
    let mut truths: Vec<Vec<f64>> = vec![Vec::new(); horizons.len()];
    let mut persistence: Vec<f64> = Vec::new();
    let mut condition: Vec<bool> = Vec::new();
    let mut n_windows = 0usize;
    for seq in &data {
        let n = seq.n_frames();
        if n < p + max_h + 1 {
            warnings.push(format!(
                "{}: {} frames is too short for past window {p} and horizon {max_h}, skipped",
                seq.id, n
            ));
            continue;
        }
        let before = achieved_col.map(|c| {
            let flag: Vec<bool> = seq.labels.column(c).iter().map(|&v| v >= 0.5).collect();
            before_first_mask(&flag)
        });
        for t in p..(n - max_h) {
            let window = &seq.features[t - p..=t];
            let pred = model.forward(window, p, max_h)?;
            for (hi, &h) in horizons.iter().enumerate() {
                for c in 0..n_classes {
                    scores[hi].push(pred.probs[(h, c)]);
                    truths[hi].push(seq.labels[(t + h, c)]);
                }
            }
            for c in 0..n_classes {
                persistence.push(seq.labels[(t, c)]);
            }
            if let Some(b) = &before {
                condition.push(b[t]);
            }
            n_windows += 1;
        }
    }
    if n_windows == 0 {
        return Err(Error::Data(format!(
            "no sequence is long enough to evaluate (need {} frames)",
            p + max_h + 1
        )));
    }

    ensure_dir(out_dir)?;
    let persistence = Array2::from_shape_vec((n_windows, n_classes), persistence)
        .expect("row-major persistence scores");
    let edge_labels: Vec<(usize, String)> = schema
        .column_elements()
        .iter()
        .enumerate()
        .filter_map(|(c, el)| match el {
            Some(ElementRef::Edge(_)) if labels[c] != CVS_ACHIEVED => {
                Some((c, labels[c].clone()))
            }
            _ => None,
        })
        .collect();

    let mut reports = Vec::new();
    let mut report_paths = Vec::new();
    let mut summary = EvalSummary {
        horizons: horizons.clone(),
        model_mean_ap: Vec::new(),
        marginal_mean_ap: Vec::new(),
        persistence_mean_ap: Vec::new(),
        n_windows,
    };
    let mut outputs = Vec::new();
    for (hi, &h) in horizons.iter().enumerate() {
        let s = Array2::from_shape_vec((n_windows, n_classes), std::mem::take(&mut scores[hi]))
            .expect("row-major scores");
        let t = Array2::from_shape_vec((n_windows, n_classes), std::mem::take(&mut truths[hi]))
            .expect("row-major truth");
        let mut report = EvalReport::compute(&s, &t, labels, h)?;
        if achieved_col.is_some() {
            for (c, name) in &edge_labels {
                let col_scores: Vec<f64> = s.column(*c).iter().copied().collect();
                let col_truth: Vec<bool> = t.column(*c).iter().map(|&v| v >= 0.5).collect();
                if let Some(ap) = conditional_ap(&col_scores, &col_truth, &condition) {
                    report.add_conditional(name, "before_cvs_achieved", ap);
                }
            }
        }
        summary.model_mean_ap.push(report.mean_ap.unwrap_or(f64::NAN));
        summary
            .marginal_mean_ap
            .push(mean_baseline_ap(&t, |_c, _r| 0.5));
        summary
            .persistence_mean_ap
            .push(mean_baseline_ap(&t, |c, r| persistence[(r, c)]));

        let report_path = out_dir.join(format!("report_h{h}.toml"));
        std::fs::write(&report_path, report.to_toml())
            .map_err(|e| Error::io(report_path.display().to_string(), e))?;
        let table_path = out_dir.join(format!("report_h{h}.tsv"));
        std::fs::write(&table_path, report.to_table())
            .map_err(|e| Error::io(table_path.display().to_string(), e))?;
        let curves: Vec<(String, Vec<(f64, f64)>)> = labels
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let cs: Vec<f64> = s.column(c).iter().copied().collect();
                let cl: Vec<bool> = t.column(c).iter().map(|&v| v >= 0.5).collect();
                (name.clone(), pr_curve(&cs, &cl))
            })
            .collect();
        let chart_path = out_dir.join(format!("pr_h{h}.svg"));
        std::fs::write(
            &chart_path,
            pr_curve_svg(&curves, &format!("precision-recall at offset {h}")),
        )
        .map_err(|e| Error::io(chart_path.display().to_string(), e))?;
        outputs.push(format!("report_h{h}.toml"));
        outputs.push(format!("report_h{h}.tsv"));
        outputs.push(format!("pr_h{h}.svg"));
        reports.push(report);
        report_paths.push(report_path);
    }

    let series = vec![
        (
            "model".to_string(),
            horizons.iter().zip(&summary.model_mean_ap).map(|(&h, &v)| (h, v)).collect(),
        ),
        (
            "marginal".to_string(),
            horizons.iter().zip(&summary.marginal_mean_ap).map(|(&h, &v)| (h, v)).collect(),
        ),
        (
            "persistence".to_string(),
            horizons.iter().zip(&summary.persistence_mean_ap).map(|(&h, &v)| (h, v)).collect(),
        ),
    ];
    let horizon_chart = out_dir.join("ap_vs_horizon.svg");
    std::fs::write(
        &horizon_chart,
        ap_vs_horizon_svg(&series, "mean AP against prediction horizon"),
    )
    .map_err(|e| Error::io(horizon_chart.display().to_string(), e))?;
    outputs.push("ap_vs_horizon.svg".to_string());

    let summary_path = out_dir.join("summary.toml");
    let summary_text = toml::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("serialize summary: {e}")))?;
    std::fs::write(&summary_path, summary_text)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    outputs.push("summary.toml".to_string());

    let mut manifest = RunManifest::new("evaluate", 0, started, String::new());
    manifest.schema_hash = Some(schema.content_hash());
    manifest.schema = Some(schema.to_toml());
    manifest.dataset_dir = Some(dataset_dir.display().to_string());
    manifest.checkpoint = Some(ckpt_path.display().to_string());
    manifest.horizons = horizons;
    manifest.outputs = outputs;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    Ok(EvaluationRun {
        reports,
        summary,
        report_paths,
        manifest_path,
        warnings,
    })
}

/// Mean AP over classes with at least one positive when each frame's score
/// for class `c` comes from `score(c, row)`. Constant scoring functions
/// reproduce the marginal-frequency baseline (ranking = dataset order).
fn mean_baseline_ap(truth: &Array2<f64>, score: impl Fn(usize, usize) -> f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..truth.ncols() {
        let s: Vec<f64> = (0..truth.nrows()).map(|r| score(c, r)).collect();
        let l: Vec<bool> = truth.column(c).iter().map(|&v| v >= 0.5).collect();
        if let Some(ap) = average_precision(&s, &l) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        f64::NAN
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Streams per-offset label probabilities for one feature file. For every
/// time `t` with a full past window the writer receives `f + 1` rows, one
/// per offset, after a single header row. Values print in Rust's shortest
/// round-trip notation, so parsing them back is exact. Returns the number
/// of data rows written.
pub fn run_prediction(
    ckpt_path: &Path,
    schema: &GraphSchema,
    features_path: &Path,
    p: usize,
    f: usize,
    out: &mut dyn std::io::Write,
) -> Result<usize> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = HgtModel::from_checkpoint(&ckpt, schema.clone())?;
    let features = load_precomputed(features_path)?;
    let dim = features.first().map_or(0, |x| x.vector.len());
    if dim != model.cfg.backbone_dim {
        return Err(Error::Shape(format!(
            "{}: features have dim {dim} but the checkpoint encodes dim {}",
            features_path.display(),
            model.cfg.backbone_dim
        )));
    }
    if features.len() < p + 1 {
        return Err(Error::Data(format!(
            "{}: {} frames is shorter than the past window needs ({})",
            features_path.display(),
            features.len(),
            p + 1
        )));
    }
    let mut header = String::from("time\toffset");
    for l in &schema.task.labels {
        header.push('\t');
        header.push_str(l);
    }
    header.push('\n');
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io("prediction output", e))?;
    let mut rows = 0usize;
    for t in p..features.len() {
        let pred = model.forward(&features[t - p..=t], p, f)?;
        for k in 0..=f {
            let mut line = format!("{t}\t{k}");
            for c in 0..pred.probs.ncols() {
                line.push('\t');
                line.push_str(&format!("{}", pred.probs[(k, c)]));
            }
            line.push('\n');
            out.write_all(line.as_bytes())
                .map_err(|e| Error::io("prediction output", e))?;
            rows += 1;
        }
    }
    out.flush().map_err(|e| Error::io("prediction output", e))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Rerun
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum RerunOutcome {
    Synthesis(SynthesisOutcome),
    Training(Box<TrainingRun>),
    Evaluation(Box<EvaluationRun>),
}

/// Re-executes the run a manifest describes, into a fresh output directory.
/// Training reruns reuse the recorded sequence split, so the produced
/// metrics log matches the original byte for byte.
pub fn rerun_from_manifest(manifest_path: &Path, out_dir: &Path) -> Result<RerunOutcome> {
    let m = RunManifest::load(manifest_path)?;
    match m.command.as_str() {
        "synthesize" => {
            let cfg = WorkflowSimConfig::from_toml(&m.config)?;
            synthesize_to_dir(&cfg, out_dir).map(RerunOutcome::Synthesis)
        }
        "train" => {
            let cfg = TrainConfig::from_toml(&m.config)?;
            let schema_text = m
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("train manifest lacks a schema snapshot".into()))?;
            let schema = GraphSchema::from_toml(schema_text)?;
            let dataset = m
                .dataset_dir
                .as_ref()
                .ok_or_else(|| Error::Config("train manifest lacks a dataset path".into()))?;
            run_training_with_split(
                &cfg,
                &schema,
                Path::new(dataset),
                out_dir,
                &m.train_ids,
                &m.val_ids,
                None,
            )
            .map(|r| RerunOutcome::Training(Box::new(r)))
        }
        "evaluate" => {
            let schema_text = m
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("evaluate manifest lacks a schema snapshot".into()))?;
            let schema = GraphSchema::from_toml(schema_text)?;
            let dataset = m
                .dataset_dir
                .as_ref()
                .ok_or_else(|| Error::Config("evaluate manifest lacks a dataset path".into()))?;
            let ckpt = m
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("evaluate manifest lacks a checkpoint path".into()))?;
            run_evaluation(
                Path::new(ckpt),
                &schema,
                Path::new(dataset),
                &m.horizons,
                out_dir,
            )
            .map(|r| RerunOutcome::Evaluation(Box::new(r)))
        }
        other => Err(Error::Config(format!(
            "manifest command \"{other}\" cannot be re-run"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::schema::{build_task_schema, TaskId};
    use crate::sim::precedence_preset;
    use crate::training::EpochRecord;
    use std::sync::OnceLock;

    const FDIM: usize = 8;

    fn dataset_cfg(n: usize, len: usize, seed: u64) -> WorkflowSimConfig {
        precedence_preset(0.9, n, len, FDIM, seed)
    }

    fn micro_schema(p: usize, f: usize) -> GraphSchema {
        let mut s = build_task_schema(&TaskId::ClippingWithCvsPrior).unwrap();
        s.task.past_window = p;
        s.task.horizon = f;
        s
    }

    fn micro_cfg(p: usize, f: usize) -> TrainConfig {
        TrainConfig {
            task: micro_schema(p, f).task,
            model: ModelConfig {
                backbone_dim: FDIM,
                hidden_dim: 16,
                n_heads: 2,
                n_layers: 1,
                dropout: 0.0,
                variant: Variant::Transformer,
            },
            phase1_epochs: 1,
            phase2_epochs: 1,
            learning_rate: 1e-3,
            batch_size: 8,
            resample_target: 0.2,
            resample_cap: 20.0,
            focal_gamma: 0.0,
            seed: 11,
            clip_stride: 3,
            eval_stride: 5,
            early_stop_patience: 10,
            freeze_edge_side_phase1: true,
        }
    }

    struct Fixture {
        _data: tempfile::TempDir,
        data_dir: PathBuf,
        _run_dir: tempfile::TempDir,
        run: TrainingRun,
        schema: GraphSchema,
    }

    static FIXTURE: OnceLock<Fixture> = OnceLock::new();

    /// One trained micro-model shared by the tests that only read it.
    fn fixture() -> &'static Fixture {
        FIXTURE.get_or_init(|| {
            let data = tempfile::tempdir().unwrap();
            synthesize_to_dir(&dataset_cfg(6, 26, 7), data.path()).unwrap();
            let schema = micro_schema(2, 1);
            let cfg = micro_cfg(2, 1);
            let run_dir = tempfile::tempdir().unwrap();
            let run =
                run_training(&cfg, &schema, data.path(), run_dir.path(), 0.7, None).unwrap();
            Fixture {
                data_dir: data.path().to_path_buf(),
                _data: data,
                _run_dir: run_dir,
                run,
                schema,
            }
        })
    }

    fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn synthesis_writes_the_advertised_files_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let out = synthesize_to_dir(&dataset_cfg(10, 12, 3), dir.path()).unwrap();
        assert_eq!(out.n_sequences, 10);
        assert_eq!(files_with_ext(dir.path(), "ann").len(), 10);
        assert_eq!(files_with_ext(dir.path(), "bin").len(), 10);
        assert!(dir.path().join("vocabulary.txt").exists());
        assert!(out.manifest_path.exists());
        let loaded = load_annotations(dir.path()).unwrap();
        assert_eq!(loaded.sequences.len(), 10);
        assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
        for (seq, id) in loaded.sequences.iter().zip(&out.sequence_ids) {
            assert_eq!(&seq.id, id);
            assert_eq!(seq.n_frames(), 12);
        }
    }

    #[test]
    fn synthesis_with_one_seed_is_byte_identical() {
        let cfg = dataset_cfg(4, 15, 21);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize_to_dir(&cfg, a.path()).unwrap();
        synthesize_to_dir(&cfg, b.path()).unwrap();
        for ext in ["ann", "bin"] {
            let fa = files_with_ext(a.path(), ext);
            let fb = files_with_ext(b.path(), ext);
            assert_eq!(fa.len(), fb.len());
            for (pa, pb) in fa.iter().zip(fb.iter()) {
                assert_eq!(
                    std::fs::read(pa).unwrap(),
                    std::fs::read(pb).unwrap(),
                    "{} differs between runs",
                    pa.file_name().unwrap().to_string_lossy()
                );
            }
        }
        assert_eq!(
            std::fs::read(a.path().join("vocabulary.txt")).unwrap(),
            std::fs::read(b.path().join("vocabulary.txt")).unwrap()
        );
        // manifests agree apart from wall-clock fields
        let mut ma = RunManifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
        let mut mb = RunManifest::load(&b.path().join(MANIFEST_FILE)).unwrap();
        ma.started_at = 0;
        ma.finished_at = 0;
        mb.started_at = 0;
        mb.finished_at = 0;
        assert_eq!(
            toml::to_string(&ma).unwrap(),
            toml::to_string(&mb).unwrap()
        );
    }

    #[test]
    fn synthesis_rerun_from_manifest_reproduces_the_dataset() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize_to_dir(&dataset_cfg(3, 14, 9), a.path()).unwrap();
        let out = rerun_from_manifest(&a.path().join(MANIFEST_FILE), b.path()).unwrap();
        assert!(matches!(out, RerunOutcome::Synthesis(_)));
        for pa in files_with_ext(a.path(), "ann") {
            let pb = b.path().join(pa.file_name().unwrap());
            assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        }
    }

    #[test]
    fn training_run_records_the_split_and_reruns_byte_identically() {
        let fx = fixture();
        assert!(fx.run.outcome.best_path.exists());
        assert!(fx.run.outcome.last_path.exists());
        let manifest = RunManifest::load(&fx.run.manifest_path).unwrap();
        assert_eq!(manifest.command, "train");
        assert_eq!(manifest.train_ids.len() + manifest.val_ids.len(), 6);
        let overlap: Vec<_> = manifest
            .train_ids
            .iter()
            .filter(|id| manifest.val_ids.contains(id))
            .collect();
        assert!(overlap.is_empty());
        assert_eq!(manifest.schema_hash.as_deref(), Some(fx.schema.content_hash().as_str()));

        let rerun_dir = tempfile::tempdir().unwrap();
        let rerun = rerun_from_manifest(&fx.run.manifest_path, rerun_dir.path()).unwrap();
        let RerunOutcome::Training(rerun) = rerun else {
            panic!("train manifest must rerun as training")
        };
        assert_eq!(
            std::fs::read(&fx.run.outcome.log_path).unwrap(),
            std::fs::read(&rerun.outcome.log_path).unwrap(),
            "rerun metrics log diverged from the original"
        );
        assert_eq!(
            std::fs::read(&fx.run.outcome.best_path).unwrap(),
            std::fs::read(&rerun.outcome.best_path).unwrap()
        );
    }

    #[test]
    fn evaluation_writes_per_horizon_reports_and_the_mean_recomputes() {
        let fx = fixture();
        // a disobedient dataset guarantees clipping before achievement, so
        // the conditional metric is defined
        let eval_data = tempfile::tempdir().unwrap();
        synthesize_to_dir(
            &precedence_preset(0.0, 6, 26, FDIM, 31),
            eval_data.path(),
        )
        .unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let run = run_evaluation(
            &fx.run.outcome.best_path,
            &fx.schema,
            eval_data.path(),
            &[0, 1],
            out_dir.path(),
        )
        .unwrap();
        assert_eq!(run.reports.len(), 2);
        assert_eq!(run.reports[0].horizon, 0);
        assert_eq!(run.reports[1].horizon, 1);
        for h in [0, 1] {
            assert!(out_dir.path().join(format!("report_h{h}.toml")).exists());
            assert!(out_dir.path().join(format!("report_h{h}.tsv")).exists());
            assert!(out_dir.path().join(format!("pr_h{h}.svg")).exists());
        }
        assert!(out_dir.path().join("ap_vs_horizon.svg").exists());
        assert!(out_dir.path().join("summary.toml").exists());
        for report in &run.reports {
            let recomputed =
                report.per_class_ap.values().sum::<f64>() / report.per_class_ap.len() as f64;
            assert!((report.mean_ap.unwrap() - recomputed).abs() <= 1e-12);
            for (key, ap) in &report.conditional {
                assert!((0.0..=1.0).contains(ap), "{key} = {ap}");
            }
        }
        let duct = crate::schema::triplet_label("clipper", "clip", "cystic_duct");
        assert!(
            run.reports[0]
                .conditional
                .contains_key(&format!("{duct}|before_cvs_achieved")),
            "conditional metrics: {:?}",
            run.reports[0].conditional.keys().collect::<Vec<_>>()
        );
        assert_eq!(run.summary.horizons, vec![0, 1]);
        assert!(run.summary.n_windows > 0);
        for v in run.summary.model_mean_ap.iter().chain(&run.summary.marginal_mean_ap) {
            assert!(v.is_finite() && (0.0..=1.0).contains(v));
        }
        let text = std::fs::read_to_string(out_dir.path().join("summary.toml")).unwrap();
        let parsed: EvalSummary = toml::from_str(&text).unwrap();
        assert_eq!(parsed.n_windows, run.summary.n_windows);
    }

    #[test]
    fn evaluation_rerun_reproduces_the_reports() {
        let fx = fixture();
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        run_evaluation(
            &fx.run.outcome.best_path,
            &fx.schema,
            &fx.data_dir,
            &[0, 1],
            out_a.path(),
        )
        .unwrap();
        let rerun =
            rerun_from_manifest(&out_a.path().join(MANIFEST_FILE), out_b.path()).unwrap();
        assert!(matches!(rerun, RerunOutcome::Evaluation(_)));
        for name in ["report_h0.toml", "report_h1.toml", "summary.toml"] {
            assert_eq!(
                std::fs::read(out_a.path().join(name)).unwrap(),
                std::fs::read(out_b.path().join(name)).unwrap(),
                "{name} differs after rerun"
            );
        }
    }

    #[test]
    fn evaluation_refuses_a_checkpoint_from_another_schema() {
        let fx = fixture();
        let other = micro_schema(2, 2);
        let out_dir = tempfile::tempdir().unwrap();
        let err = run_evaluation(
            &fx.run.outcome.best_path,
            &other,
            &fx.data_dir,
            &[0],
            out_dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn evaluation_needs_at_least_one_usable_window() {
        let fx = fixture();
        let short = tempfile::tempdir().unwrap();
        synthesize_to_dir(&dataset_cfg(3, 3, 2), short.path()).unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let err = run_evaluation(
            &fx.run.outcome.best_path,
            &fx.schema,
            short.path(),
            &[0, 1],
            out_dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("long enough"), "{err}");
    }

    #[test]
    fn prediction_rows_match_the_model_forward_bitwise() {
        let fx = fixture();
        let features_path = fx.data_dir.join("sim000.bin");
        let mut buf = Vec::new();
        let rows =
            run_prediction(&fx.run.outcome.best_path, &fx.schema, &features_path, 2, 1, &mut buf)
                .unwrap();
        let n = load_precomputed(&features_path).unwrap().len();
        assert_eq!(rows, (n - 2) * 2);
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(header[0], "time");
        assert_eq!(header[1], "offset");
        assert_eq!(header.len(), 2 + fx.schema.task.labels.len());

        let ckpt = Checkpoint::load(&fx.run.outcome.best_path).unwrap();
        let model = HgtModel::from_checkpoint(&ckpt, fx.schema.clone()).unwrap();
        let features = load_precomputed(&features_path).unwrap();
        let pred = model.forward(&features[0..=2], 2, 1).unwrap();
        for (k, line) in lines.take(2).enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields[0], "2");
            assert_eq!(fields[1], k.to_string());
            for (c, field) in fields[2..].iter().enumerate() {
                let v: f64 = field.parse().unwrap();
                assert_eq!(v.to_bits(), pred.probs[(k, c)].to_bits());
            }
        }
    }

    #[test]
    fn prediction_window_arithmetic_and_input_checks() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        // exactly past_window + 1 frames -> one valid time, horizon + 1 rows
        let frames: Vec<crate::backbone::FrameFeature> = (0..3)
            .map(|t| crate::backbone::FrameFeature {
                vector: ndarray::Array1::from_elem(FDIM, 0.1 * t as f64),
                time_index: t,
            })
            .collect();
        let minimal = dir.path().join("minimal.bin");
        crate::backbone::write_features(&minimal, &frames).unwrap();
        let mut buf = Vec::new();
        let rows =
            run_prediction(&fx.run.outcome.best_path, &fx.schema, &minimal, 2, 3, &mut buf)
                .unwrap();
        assert_eq!(rows, 4);

        let short = dir.path().join("short.bin");
        crate::backbone::write_features(&short, &frames[..2]).unwrap();
        let mut sink = Vec::new();
        let err = run_prediction(&fx.run.outcome.best_path, &fx.schema, &short, 2, 1, &mut sink)
            .unwrap_err();
        assert!(err.to_string().contains("past window"), "{err}");

        let skinny: Vec<crate::backbone::FrameFeature> = (0..5)
            .map(|t| crate::backbone::FrameFeature {
                vector: ndarray::Array1::zeros(FDIM - 3),
                time_index: t,
            })
            .collect();
        let skinny_path = dir.path().join("skinny.bin");
        crate::backbone::write_features(&skinny_path, &skinny).unwrap();
        let mut sink = Vec::new();
        let err =
            run_prediction(&fx.run.outcome.best_path, &fx.schema, &skinny_path, 2, 1, &mut sink)
                .unwrap_err();
        assert!(err.to_string().contains("dim"), "{err}");
    }

    #[test]
    fn training_projects_wider_vocabularies_onto_the_schema() {
        // dataset carries the with-prior vocabulary; training the plain
        // clipping schema must project the columns down
        let fx = fixture();
        let mut schema = build_task_schema(&TaskId::Clipping).unwrap();
        schema.task.past_window = 2;
        schema.task.horizon = 1;
        let mut cfg = micro_cfg(2, 1);
        cfg.task = schema.task.clone();
        cfg.phase1_epochs = 0;
        let out = tempfile::tempdir().unwrap();
        let run = run_training(&cfg, &schema, &fx.data_dir, out.path(), 0.7, None).unwrap();
        assert_eq!(run.outcome.history.len(), 1);
        let record: EpochRecord = serde_json::from_str(
            std::fs::read_to_string(&run.outcome.log_path)
                .unwrap()
                .lines()
                .next()
                .unwrap(),
        )
        .unwrap();
        assert_eq!(record.phase, 2);
    }

    #[test]
    fn manifest_roundtrips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", 42, 100, "a = 1\n".into());
        m.schema = Some("b = 2\n".into());
        m.dataset_dir = Some("/data".into());
        m.train_ids = vec!["s1".into(), "s2".into()];
        m.val_ids = vec!["s3".into()];
        m.outputs = vec!["metrics.jsonl".into()];
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(toml::to_string(&m).unwrap(), toml::to_string(&back).unwrap());
        assert_eq!(back.seed, 42);
        assert_eq!(back.train_ids, vec!["s1", "s2"]);
        // unknown keys are rejected, catching format drift
        std::fs::write(&path, "version = 1\nbogus = true\n").unwrap();
        assert!(RunManifest::load(&path).is_err());
    }

    #[test]
    fn rerun_rejects_unknown_commands() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("predict", 0, 0, String::new());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let err = rerun_from_manifest(&path, dir.path()).unwrap_err();
        assert!(err.to_string().contains("cannot be re-run"), "{err}");
    }
}
