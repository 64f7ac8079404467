//! Synthetic workflow generator.
//!
//! Sequences come from a Markov chain over workflow states. Each state
//! emits labels with configured probabilities; milestone rules make the
//! CVS criteria sticky once confirmed and derive the achieved flag as
//! their conjunction; an ordering rule suppresses gated labels, with a
//! configurable obedience probability, on frames where the flag has not
//! been raised yet. Frame features are a fixed random affine projection
//! of the one-hot state concatenated with the clean label vector, plus
//! Gaussian noise; independent label flips model annotation noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FrameFeature;
use crate::data::LabeledSequence;
use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::schema::{clipping_with_prior_vocabulary, triplet_label, CVS_ACHIEVED, CVS_CRITERIA};

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub name: String,
    /// Transition probabilities to every state, in state order. Must sum to 1.
    pub transitions: Vec<f64>,
    /// Per-label emission probability while in this state. For milestone
    /// criteria this is the per-frame confirmation chance instead.
    #[serde(default)]
    pub emissions: BTreeMap<String, f64>,
}

/// Sticky milestone rule: criteria stay on once confirmed, the achieved
/// label is their conjunction and is never emitted directly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilestoneRule {
    pub criteria: Vec<String>,
    pub achieved: String,
}

/// Ordering rule: on frames where `achieved` (from the milestone rule) is
/// still 0, any gated label is suppressed with probability `p_obey`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingRule {
    pub gated: Vec<String>,
    pub p_obey: f64,
}

/// Label implication applied after sampling: `trigger` active forces every
/// label in `implies` active on the same frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosureRule {
    pub trigger: String,
    pub implies: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSimConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub sequence_length: usize,
    pub feature_dim: usize,
    /// Std dev of the Gaussian noise added to every feature entry.
    pub feature_noise: f64,
    /// Independent per-cell label flip probability, applied last.
    pub label_flip_rate: f64,
    pub vocabulary: Vec<String>,
    pub states: Vec<StateSpec>,
    /// Initial state distribution, in state order. Must sum to 1.
    pub initial: Vec<f64>,
    #[serde(default)]
    pub closures: Vec<ClosureRule>,
    #[serde(default)]
    pub milestone: Option<MilestoneRule>,
    #[serde(default)]
    pub ordering: Option<OrderingRule>,
}

impl WorkflowSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 || self.sequence_length == 0 {
            return Err(Error::Config("need at least one sequence and frame".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.feature_noise < 0.0 || !self.feature_noise.is_finite() {
            return Err(Error::Config("feature_noise must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.label_flip_rate) {
            return Err(Error::Config("label_flip_rate outside [0, 1]".into()));
        }
        if self.vocabulary.is_empty() || self.states.is_empty() {
            return Err(Error::Config("vocabulary and states must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.vocabulary {
            if !seen.insert(v) {
                return Err(Error::Config(format!("duplicate label {v}")));
            }
        }
        let mut snames = std::collections::BTreeSet::new();
        for s in &self.states {
            if !snames.insert(&s.name) {
                return Err(Error::Config(format!("duplicate state {}", s.name)));
            }
        }
        let check_dist = |name: &str, p: &[f64]| -> Result<()> {
            if p.len() != self.states.len() {
                return Err(Error::Config(format!(
                    "{name}: {} entries for {} states",
                    p.len(),
                    self.states.len()
                )));
            }
            if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Config(format!("{name}: probability outside [0, 1]")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Config(format!("{name}: probabilities sum to {s}, not 1")));
            }
            Ok(())
        };
        check_dist("initial", &self.initial)?;
        for s in &self.states {
            check_dist(&format!("state {}", s.name), &s.transitions)?;
            for (label, &p) in &s.emissions {
                if !self.vocabulary.contains(label) {
                    return Err(Error::Config(format!(
                        "state {}: emission for unknown label {label}",
                        s.name
                    )));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "state {}: emission probability {p} for {label}",
                        s.name
                    )));
                }
            }
        }
        if let Some(m) = &self.milestone {
            if m.criteria.is_empty() {
                return Err(Error::Config("milestone rule with no criteria".into()));
            }
            for c in m.criteria.iter().chain(std::iter::once(&m.achieved)) {
                if !self.vocabulary.contains(c) {
                    return Err(Error::Config(format!("milestone label {c} not in vocabulary")));
                }
            }
            for s in &self.states {
                if s.emissions.contains_key(&m.achieved) {
                    return Err(Error::Config(format!(
                        "state {}: the achieved label {} is derived, not emitted",
                        s.name, m.achieved
                    )));
                }
            }
        }
        if let Some(o) = &self.ordering {
            if self.milestone.is_none() {
                return Err(Error::Config("ordering rule requires a milestone rule".into()));
            }
            if !(0.0..=1.0).contains(&o.p_obey) {
                return Err(Error::Config("p_obey outside [0, 1]".into()));
            }
            for g in &o.gated {
                if !self.vocabulary.contains(g) {
                    return Err(Error::Config(format!("gated label {g} not in vocabulary")));
                }
            }
        }
        for c in &self.closures {
            for l in std::iter::once(&c.trigger).chain(c.implies.iter()) {
                if !self.vocabulary.contains(l) {
                    return Err(Error::Config(format!("closure label {l} not in vocabulary")));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize simulator config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: WorkflowSimConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse simulator config: {e}")))?;
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

fn sample_categorical(rng: &mut ChaCha20Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates the configured dataset. Deterministic: the same config always
/// produces bitwise-identical sequences.
pub fn simulate(cfg: &WorkflowSimConfig) -> Result<Vec<LabeledSequence>> {
    cfg.validate()?;
    let n_states = cfg.states.len();
    let n_labels = cfg.vocabulary.len();
    let src_dim = n_states + n_labels;
    let label_idx = |name: &String| cfg.vocabulary.iter().position(|v| v == name).unwrap();

    // fixed projection shared by every sequence of the dataset
    let mut proj_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "projection"));
    let proj_dist = Normal::new(0.0, 1.0 / (src_dim as f64).sqrt()).unwrap();
    let projection =
        Array2::from_shape_fn((cfg.feature_dim, src_dim), |_| proj_dist.sample(&mut proj_rng));

    // per-state emission lists resolved to column indices once
    let emissions: Vec<Vec<(usize, f64)>> = cfg
        .states
        .iter()
        .map(|s| s.emissions.iter().map(|(l, &p)| (label_idx(l), p)).collect())
        .collect();
    let milestone = cfg.milestone.as_ref().map(|m| {
        (
            m.criteria.iter().map(label_idx).collect::<Vec<_>>(),
            label_idx(&m.achieved),
        )
    });
    let ordering = cfg
        .ordering
        .as_ref()
        .map(|o| (o.gated.iter().map(label_idx).collect::<Vec<_>>(), o.p_obey));
    let closures: Vec<(usize, Vec<usize>)> = cfg
        .closures
        .iter()
        .map(|c| (label_idx(&c.trigger), c.implies.iter().map(label_idx).collect()))
        .collect();

    let mut out = Vec::with_capacity(cfg.n_sequences);
    for i in 0..cfg.n_sequences {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, &format!("seq.{i}")));
        let noise_dist = Normal::new(0.0, cfg.feature_noise).unwrap();
        let mut labels = Array2::zeros((cfg.sequence_length, n_labels));
        let mut features = Vec::with_capacity(cfg.sequence_length);
        let mut confirmed = vec![false; milestone.as_ref().map_or(0, |(c, _)| c.len())];
        let mut state = sample_categorical(&mut rng, &cfg.initial);
        for t in 0..cfg.sequence_length {
            if t > 0 {
                state = sample_categorical(&mut rng, &cfg.states[state].transitions);
            }
            let mut frame = vec![0.0f64; n_labels];
            for &(c, p) in &emissions[state] {
                if let Some((crit, _)) = &milestone {
                    // criteria columns use the sticky update below
                    if crit.contains(&c) {
                        continue;
                    }
                }
                if rng.random::<f64>() < p {
                    frame[c] = 1.0;
                }
            }
            if let Some((crit, achieved_col)) = &milestone {
                let hazard: BTreeMap<usize, f64> = emissions[state].iter().copied().collect();
                for (k, &c) in crit.iter().enumerate() {
                    if !confirmed[k] {
                        let p = hazard.get(&c).copied().unwrap_or(0.0);
                        if p > 0.0 && rng.random::<f64>() < p {
                            confirmed[k] = true;
                        }
                    }
                    frame[c] = if confirmed[k] { 1.0 } else { 0.0 };
                }
                frame[*achieved_col] = if confirmed.iter().all(|&b| b) { 1.0 } else { 0.0 };
            }
            if let Some((gated, p_obey)) = &ordering {
                let (_, achieved_col) = milestone.as_ref().unwrap();
                if frame[*achieved_col] == 0.0 && gated.iter().any(|&g| frame[g] == 1.0) {
                    if rng.random::<f64>() < *p_obey {
                        for &g in gated {
                            frame[g] = 0.0;
                        }
                    }
                }
            }
            for (trigger, implies) in &closures {
                if frame[*trigger] == 1.0 {
                    for &c in implies {
                        frame[c] = 1.0;
                    }
                }
            }
            // features project the clean frame, before annotation noise
            let mut source = Array1::zeros(src_dim);
            source[state] = 1.0;
            for c in 0..n_labels {
                source[n_states + c] = frame[c];
            }
            let mut x = projection.dot(&source);
            if cfg.feature_noise > 0.0 {
                for v in x.iter_mut() {
                    *v += noise_dist.sample(&mut rng);
                }
            }
            features.push(FrameFeature {
                vector: x,
                time_index: t as i64,
            });
            if cfg.label_flip_rate > 0.0 {
                for v in frame.iter_mut() {
                    if rng.random::<f64>() < cfg.label_flip_rate {
                        *v = 1.0 - *v;
                    }
                }
            }
            for (c, &v) in frame.iter().enumerate() {
                labels[(t, c)] = v;
            }
        }
        out.push(LabeledSequence {
            id: format!("sim{i:03}"),
            features,
            labels,
            vocabulary: cfg.vocabulary.clone(),
        });
    }
    Ok(out)
}

fn state(name: &str, transitions: Vec<f64>, emissions: &[(&str, f64)]) -> StateSpec {
    StateSpec {
        name: name.into(),
        transitions,
        emissions: emissions.iter().map(|&(l, p)| (l.to_string(), p)).collect(),
    }
}

/// Workflow with the safety ordering active: clipping labels are gated on
/// the achieved flag with the given obedience probability. Labels follow
/// the clipping-with-prior vocabulary.
pub fn precedence_preset(
    p_obey: f64,
    n_sequences: usize,
    sequence_length: usize,
    feature_dim: usize,
    seed: u64,
) -> WorkflowSimConfig {
    let clip_duct = triplet_label("clipper", "clip", "cystic_duct");
    let clip_artery = triplet_label("clipper", "clip", "cystic_artery");
    let c2 = CVS_CRITERIA[0];
    let cp = CVS_CRITERIA[1];
    let ct = CVS_CRITERIA[2];
    WorkflowSimConfig {
        seed,
        n_sequences,
        sequence_length,
        feature_dim,
        feature_noise: 0.25,
        label_flip_rate: 0.01,
        vocabulary: clipping_with_prior_vocabulary(),
        states: vec![
            state("prep", vec![0.80, 0.20, 0.0, 0.0, 0.0, 0.0], &[("clipper", 0.02)]),
            state(
                "dissect",
                vec![0.0, 0.85, 0.15, 0.0, 0.0, 0.0],
                &[
                    ("clipper", 0.03),
                    ("cystic_duct", 0.30),
                    ("cystic_artery", 0.20),
                    (c2, 0.05),
                    (cp, 0.05),
                    (ct, 0.04),
                ],
            ),
            state(
                "expose",
                vec![0.0, 0.0, 0.85, 0.15, 0.0, 0.0],
                &[
                    ("clipper", 0.05),
                    ("cystic_duct", 0.50),
                    ("cystic_artery", 0.40),
                    (c2, 0.20),
                    (cp, 0.18),
                    (ct, 0.16),
                ],
            ),
            state(
                "clip_window",
                vec![0.0, 0.0, 0.0, 0.85, 0.15, 0.0],
                &[
                    ("clipper", 0.70),
                    ("clip", 0.08),
                    ("cystic_duct", 0.55),
                    ("cystic_artery", 0.35),
                    (c2, 0.12),
                    (cp, 0.12),
                    (ct, 0.12),
                    (clip_duct.as_str(), 0.55),
                    (clip_artery.as_str(), 0.40),
                ],
            ),
            state(
                "divide",
                vec![0.0, 0.0, 0.0, 0.0, 0.85, 0.15],
                &[("clipper", 0.10), ("cystic_duct", 0.25), ("cystic_artery", 0.15)],
            ),
            // the workflow cycles so clipping chances recur after the
            // milestone is reached
            state("close", vec![0.20, 0.0, 0.0, 0.0, 0.0, 0.80], &[]),
        ],
        initial: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        closures: vec![
            ClosureRule {
                trigger: clip_duct.clone(),
                implies: vec!["clipper".into(), "clip".into(), "cystic_duct".into()],
            },
            ClosureRule {
                trigger: clip_artery.clone(),
                implies: vec!["clipper".into(), "clip".into(), "cystic_artery".into()],
            },
        ],
        milestone: Some(MilestoneRule {
            criteria: CVS_CRITERIA.iter().map(|s| s.to_string()).collect(),
            achieved: CVS_ACHIEVED.into(),
        }),
        ordering: Some(OrderingRule {
            gated: vec!["clip".into(), clip_duct, clip_artery],
            p_obey,
        }),
    }
}

/// Same workflow shape but clipping fires at one constant rate in every
/// state and no ordering rule applies, so clipping is independent of the
/// achieved flag.
pub fn independent_preset(
    n_sequences: usize,
    sequence_length: usize,
    feature_dim: usize,
    seed: u64,
) -> WorkflowSimConfig {
    let mut cfg = precedence_preset(0.0, n_sequences, sequence_length, feature_dim, seed);
    cfg.ordering = None;
    let clip_duct = triplet_label("clipper", "clip", "cystic_duct");
    let clip_artery = triplet_label("clipper", "clip", "cystic_artery");
    for s in cfg.states.iter_mut() {
        s.emissions.insert(clip_duct.clone(), 0.06);
        s.emissions.insert(clip_artery.clone(), 0.04);
        s.emissions.insert("clip".into(), 0.05);
        s.emissions.insert("clipper".into(), 0.10);
    }
    cfg
}
