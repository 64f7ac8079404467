//! Two-phase optimizer: class-balanced clip resampling, cross-entropy over
//! every bound label across the rollout horizon, node-side pretraining
//! followed by joint training.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSequence;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HgtModel, ModelConfig, PredictionBatch};
use crate::nn::{derive_seed, ParamStore, TapeBind};
use crate::schema::{GraphSchema, TaskSpec};

pub const BCE_EPS: f64 = 1e-7;
pub const DEFAULT_RESAMPLE_CAP: f64 = 20.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Positive-rate target the resampler boosts rare classes toward.
    pub resample_target: f64,
    /// Cap on the per-class resampling boost.
    pub resample_cap: f64,
    /// Focal reweighting exponent; 0 disables it.
    pub focal_gamma: f64,
    pub seed: u64,
    /// Start-frame stride when enumerating training windows.
    pub clip_stride: usize,
    /// Start-frame stride when enumerating validation windows.
    pub eval_stride: usize,
    /// Epochs without a validation improvement before a phase stops early.
    pub early_stop_patience: usize,
    /// Keep edge-side parameters fixed during phase 1.
    pub freeze_edge_side_phase1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskSpec {
                id: crate::schema::TaskId::Clipping,
                past_window: 4,
                horizon: 4,
                labels: Vec::new(),
            },
            model: ModelConfig::default(),
            phase1_epochs: 2,
            phase2_epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            resample_target: 0.2,
            resample_cap: DEFAULT_RESAMPLE_CAP,
            focal_gamma: 0.0,
            seed: 0,
            clip_stride: 1,
            eval_stride: 5,
            early_stop_patience: 10,
            freeze_edge_side_phase1: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.resample_target > 0.0 && self.resample_target < 1.0) {
            return Err(Error::Config("resample_target outside (0, 1)".into()));
        }
        if self.resample_cap < 1.0 {
            return Err(Error::Config("resample_cap below 1".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if self.clip_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize train config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }
}

/// One training window: `past_window` frames of context ending at `start`,
/// targets at offsets `0..=horizon` from there.
#[derive(Clone, Debug)]
pub struct ClipIndex {
    /// Position of the sequence in the dataset slice.
    pub seq: usize,
    pub sequence_id: String,
    pub start: usize,
    /// Per class: active anywhere in the target window.
    pub positive: Vec<bool>,
}

/// Enumerates every window `[start - p, start + f]` that fits inside a
/// sequence, stepping `stride` frames between starts.
pub fn build_clip_index(
    data: &[LabeledSequence],
    p: usize,
    f: usize,
    stride: usize,
) -> Result<Vec<ClipIndex>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (si, s) in data.iter().enumerate() {
        let n = s.n_frames();
        if n < p + f + 1 {
            continue;
        }
        let n_classes = s.labels.ncols();
        let mut start = p;
        while start + f < n {
            let mut positive = vec![false; n_classes];
            for t in start..=start + f {
                for c in 0..n_classes {
                    if s.labels[(t, c)] >= 0.5 {
                        positive[c] = true;
                    }
                }
            }
            out.push(ClipIndex {
                seq: si,
                sequence_id: s.id.clone(),
                start,
                positive,
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy between predicted probabilities and binary
/// targets over every offset and label column, with probabilities clamped
/// to `[eps, 1 - eps]`.
pub fn bce_loss(pred: &PredictionBatch, truth: &Array2<f64>) -> Result<f64> {
    if pred.probs.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.probs.dim(),
            truth.dim()
        )));
    }
    let mut total = 0.0;
    for (&p, &y) in pred.probs.iter().zip(truth.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / pred.probs.len() as f64)
}

/// Draws a same-length sample of clips with replacement. Each class with
/// positive rate `q` below `target` boosts the clips containing it by
/// `min(cap, target / q)`; a clip's weight is the largest boost among its
/// positive classes, never below 1, so nothing is ever dropped.
pub fn resample_epoch(
    index: &[ClipIndex],
    target: f64,
    cap: f64,
    seed: u64,
) -> Result<Vec<ClipIndex>> {
    if index.is_empty() {
        return Err(Error::Data("cannot resample an empty clip index".into()));
    }
    let n_classes = index[0].positive.len();
    let n = index.len() as f64;
    let mut rates = vec![0.0f64; n_classes];
    for clip in index {
        for (c, &p) in clip.positive.iter().enumerate() {
            if p {
                rates[c] += 1.0 / n;
            }
        }
    }
    if rates.iter().all(|&q| q == 0.0) {
        eprintln!("warning: no positive clips for any class, resampling uniformly");
    }
    let boost: Vec<f64> = rates
        .iter()
        .map(|&q| if q > 0.0 { (target / q).clamp(1.0, cap) } else { 1.0 })
        .collect();
    let weights: Vec<f64> = index
        .iter()
        .map(|clip| {
            clip.positive
                .iter()
                .enumerate()
                .filter(|&(_, &p)| p)
                .map(|(c, _)| boost[c])
                .fold(1.0f64, f64::max)
        })
        .collect();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(index.len());
    for _ in 0..index.len() {
        let u: f64 = rng.random::<f64>() * total;
        let pos = cumulative.partition_point(|&c| c <= u).min(index.len() - 1);
        out.push(index[pos].clone());
    }
    Ok(out)
}

/// Adaptive moment estimation with bias correction.
struct Adam {
    m: Vec<Option<(Array2<f64>, Array2<f64>)>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n_params: usize) -> Self {
        Adam {
            m: (0..n_params).map(|_| None).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Array2<f64>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads {
            let slot = &mut self.m[*idx];
            if slot.is_none() {
                *slot = Some((Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            }
            let (m, v) = slot.as_mut().unwrap();
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.eps);
            let value = store.value_mut(*idx);
            *value = &*value - &(update * lr);
        }
    }
}

fn cosine_lr(base: f64, step_in_phase: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = step_in_phase as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One line of the append-only metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: Option<f64>,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_val_map: f64,
    pub best_epoch: usize,
    pub final_step: u64,
}

fn clip_features(seq: &LabeledSequence, start: usize, p: usize) -> Array2<f64> {
    let dim = seq.features[0].vector.len();
    let mut feats = Array2::zeros((p + 1, dim));
    for (r, t) in (start - p..=start).enumerate() {
        feats.row_mut(r).assign(&seq.features[t].vector);
    }
    feats
}

fn clip_targets(seq: &LabeledSequence, start: usize, f: usize) -> Array2<f64> {
    let l = seq.labels.ncols();
    let mut truth = Array2::zeros((f + 1, l));
    for (r, t) in (start..=start + f).enumerate() {
        truth.row_mut(r).assign(&seq.labels.row(t));
    }
    truth
}

/// Runs one optimization step over a batch of clips. Returns the batch
/// loss. Gradients for frozen parameters are structurally absent from the
/// tape, so frozen values cannot move.
#[allow(clippy::too_many_arguments)]
fn step_batch(
    model: &mut HgtModel,
    adam: &mut Adam,
    data: &[LabeledSequence],
    batch: &[ClipIndex],
    p: usize,
    f: usize,
    column_mask: &Array2<f64>,
    freeze: &[usize],
    gamma: f64,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = crate::autodiff::Graph::new();
    let mut tb = TapeBind::training(&mut g, &model.store, dropout_seed).freeze(freeze.iter().copied());
    let mut losses = Vec::with_capacity(batch.len());
    for clip in batch {
        let seq = &data[clip.seq];
        let feats = clip_features(seq, clip.start, p);
        let logits = model.build_forward(&mut tb, &feats, p, f)?;
        let truth = clip_targets(seq, clip.start, f);
        let loss = tb
            .g
            .bce_with_logits(logits, truth, column_mask.clone(), gamma);
        losses.push(loss);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = tb.g.add(sum, l);
    }
    let mean = tb.g.affine_scalar(sum, 1.0 / batch.len() as f64, 0.0);
    let loss_value = tb.g.value_of(mean)[(0, 0)];
    if !loss_value.is_finite() {
        // no update; the caller reports which step diverged
        return Ok(loss_value);
    }
    let mut grads = tb.g.backward(mean)?;
    let bindings = tb.into_bindings();
    let mut updates = Vec::with_capacity(bindings.len());
    for (idx, var) in bindings {
        if let Some(grad) = grads.take(var) {
            updates.push((idx, grad));
        }
    }
    updates.sort_by_key(|(idx, _)| *idx);
    adam.step(&mut model.store, &updates, lr);
    Ok(loss_value)
}

struct ValReport {
    loss: f64,
    map: Option<f64>,
    acc: f64,
}

fn validate_model(
    model: &HgtModel,
    data: &[LabeledSequence],
    clips: &[ClipIndex],
    p: usize,
    f: usize,
) -> Result<ValReport> {
    let n_classes = data[0].labels.ncols();
    let mut loss_sum = 0.0;
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut truths: Vec<Vec<bool>> = vec![Vec::new(); n_classes];
    for clip in clips {
        let seq = &data[clip.seq];
        let window: Vec<_> = seq.features[clip.start - p..=clip.start].to_vec();
        let pred = model.forward(&window, p, f)?;
        let truth = clip_targets(seq, clip.start, f);
        loss_sum += bce_loss(&pred, &truth)?;
        for c in 0..n_classes {
            scores[c].push(pred.probs[(f, c)]);
            truths[c].push(truth[(f, c)] >= 0.5);
        }
    }
    let mut aps = Vec::new();
    let mut acc_sum = 0.0;
    for c in 0..n_classes {
        if let Some(ap) = crate::metrics::average_precision(&scores[c], &truths[c]) {
            aps.push(ap);
        }
        acc_sum += crate::metrics::accuracy_at_threshold(&scores[c], &truths[c], 0.5);
    }
    Ok(ValReport {
        loss: loss_sum / clips.len() as f64,
        map: if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        },
        acc: acc_sum / n_classes as f64,
    })
}

/// Runs the two-phase schedule and writes `metrics.jsonl`, `best.json`,
/// and `last.json` under `out_dir`. Phase 1 restricts the loss to
/// node-bound label columns (optionally freezing edge-side parameters);
/// phase 2 trains the joint objective. The best checkpoint is chosen by
/// validation mean average precision at the final offset.
pub fn train(
    cfg: &TrainConfig,
    schema: &GraphSchema,
    train_data: &[LabeledSequence],
    val_data: &[LabeledSequence],
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let violations = crate::schema::validate_schema(schema);
    if let Some(v) = violations.first() {
        return Err(Error::Config(format!(
            "schema invalid: {} ({})",
            v.rule, v.element
        )));
    }
    if schema.task.id != cfg.task.id {
        return Err(Error::Config(format!(
            "schema task {} does not match configured task {}",
            schema.task.id.as_str(),
            cfg.task.id.as_str()
        )));
    }
    let p = cfg.task.past_window;
    let f = cfg.task.horizon;
    let expected_vocab = &schema.task.labels;
    for s in train_data.iter().chain(val_data.iter()) {
        s.validate()?;
        if &s.vocabulary != expected_vocab {
            return Err(Error::Data(format!(
                "{}: vocabulary does not match the schema's label columns",
                s.id
            )));
        }
    }
    let train_ids: BTreeSet<&String> = train_data.iter().map(|s| &s.id).collect();
    for s in val_data {
        if train_ids.contains(&s.id) {
            return Err(Error::Config(format!(
                "sequence {} appears in both the training and validation split",
                s.id
            )));
        }
    }
    let mut model = match resume {
        Some(ckpt) => HgtModel::from_checkpoint(ckpt, schema.clone())?,
        None => HgtModel::new(schema.clone(), cfg.model.clone(), cfg.seed)?,
    };
    let mut step: u64 = resume.map_or(0, |c| c.step);
    let train_index = build_clip_index(train_data, p, f, cfg.clip_stride)?;
    let val_index = build_clip_index(val_data, p, f, cfg.eval_stride)?;
    if train_index.is_empty() || val_index.is_empty() {
        return Err(Error::Data(format!(
            "no usable windows: sequences need at least {} frames",
            p + f + 1
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let best_path = out_dir.join("best.json");
    let last_path = out_dir.join("last.json");
    let mut log = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let label_dim = schema.label_dim();
    let node_mask_row = model.node_column_mask();
    let phase_specs: [(u8, usize); 2] = [(1, cfg.phase1_epochs), (2, cfg.phase2_epochs)];

    let mut history = Vec::new();
    let mut best_val_map = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epoch_no = 0usize;

    for (phase, epochs) in phase_specs {
        if epochs == 0 {
            continue;
        }
        let column_mask = if phase == 1 {
            let mut m = Array2::zeros((f + 1, label_dim));
            for mut row in m.rows_mut() {
                for (c, &keep) in node_mask_row.iter().enumerate() {
                    row[c] = keep;
                }
            }
            m
        } else {
            Array2::ones((f + 1, label_dim))
        };
        let freeze: Vec<usize> = if phase == 1 && cfg.freeze_edge_side_phase1 {
            model.edge_side_indices()
        } else {
            Vec::new()
        };
        let mut adam = Adam::new(model.store.len());
        let n_batches = train_index.len().div_ceil(cfg.batch_size);
        let total_steps = epochs * n_batches;
        let mut step_in_phase = 0usize;
        let mut since_improvement = 0usize;
        for epoch_in_phase in 0..epochs {
            epoch_no += 1;
            let sample = resample_epoch(
                &train_index,
                cfg.resample_target,
                cfg.resample_cap,
                derive_seed(cfg.seed, &format!("resample.{phase}.{epoch_in_phase}")),
            )?;
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for (bi, batch) in sample.chunks(cfg.batch_size).enumerate() {
                let lr = cosine_lr(cfg.learning_rate, step_in_phase, total_steps);
                let loss = step_batch(
                    &mut model,
                    &mut adam,
                    train_data,
                    batch,
                    p,
                    f,
                    &column_mask,
                    &freeze,
                    cfg.focal_gamma,
                    lr,
                    derive_seed(cfg.seed, &format!("dropout.{phase}.{epoch_in_phase}.{bi}")),
                )?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss diverged at phase {phase} epoch {epoch_no} step {}",
                        step + 1
                    )));
                }
                loss_sum += loss;
                batches += 1;
                step += 1;
                step_in_phase += 1;
            }
            let val = validate_model(&model, val_data, &val_index, p, f)?;
            let record = EpochRecord {
                epoch: epoch_no,
                phase,
                train_loss: loss_sum / batches as f64,
                val_loss: val.loss,
                val_map: val.map,
                val_acc: val.acc,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Config(format!("serialize metrics record: {e}")))?;
            writeln!(log, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
            history.push(record);
            let score = val.map.unwrap_or(f64::NEG_INFINITY);
            if score > best_val_map {
                best_val_map = score;
                best_epoch = epoch_no;
                since_improvement = 0;
                model.to_checkpoint(phase, step).save(&best_path)?;
            } else {
                since_improvement += 1;
                if since_improvement >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    model
        .to_checkpoint(if cfg.phase2_epochs > 0 { 2 } else { 1 }, step)
        .save(&last_path)?;
    if !best_path.exists() {
        // no epoch improved on -inf (all-NaN mAP); keep the final state
        model
            .to_checkpoint(if cfg.phase2_epochs > 0 { 2 } else { 1 }, step)
            .save(&best_path)?;
    }
    Ok(TrainOutcome {
        best_path,
        last_path,
        log_path,
        history,
        best_val_map,
        best_epoch,
        final_step: step,
    })
}
