//! Dataset adapters and the normalized annotation layout.
//!
//! A dataset directory holds `vocabulary.txt` (one label name per line, line
//! number = class id), one `<id>.ann` text table per sequence (row =
//! `time_index` followed by the active class ids for that frame, one row
//! per frame from time 0), and optionally `<id>.bin` precomputed features
//! in the binary frame-feature format. Sequences without a feature file
//! load with zero-dimensional features so label-only analytics still work.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::backbone::{load_precomputed, write_features, FrameFeature};
use crate::error::{Error, Result};
use crate::schema::{cvs_vocabulary, triplet_vocabulary, TRIPLET_CLASSES};

/// One annotated sequence on the 1 FPS grid.
#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub id: String,
    pub features: Vec<FrameFeature>,
    /// `(n_frames, vocabulary.len())`, entries in {0, 1}.
    pub labels: Array2<f64>,
    pub vocabulary: Vec<String>,
}

impl LabeledSequence {
    pub fn n_frames(&self) -> usize {
        self.labels.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.nrows() {
            return Err(Error::Data(format!(
                "{}: {} feature frames but {} label rows",
                self.id,
                self.features.len(),
                self.labels.nrows()
            )));
        }
        if self.labels.ncols() != self.vocabulary.len() {
            return Err(Error::Data(format!(
                "{}: {} label columns for {} vocabulary names",
                self.id,
                self.labels.ncols(),
                self.vocabulary.len()
            )));
        }
        if self.labels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{}: non-binary label value", self.id)));
        }
        let unique: BTreeSet<&String> = self.vocabulary.iter().collect();
        if unique.len() != self.vocabulary.len() {
            return Err(Error::Data(format!("{}: duplicate vocabulary name", self.id)));
        }
        Ok(())
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == name)
    }

    /// One label column as booleans.
    pub fn column_bool(&self, name: &str) -> Result<Vec<bool>> {
        let c = self
            .label_index(name)
            .ok_or_else(|| Error::Data(format!("{}: unknown label {name}", self.id)))?;
        Ok(self.labels.column(c).iter().map(|&v| v >= 0.5).collect())
    }

    /// Keeps only the named columns, in the given order.
    pub fn project(&self, names: &[String]) -> Result<LabeledSequence> {
        let mut cols = Vec::with_capacity(names.len());
        for n in names {
            cols.push(
                self.label_index(n)
                    .ok_or_else(|| Error::Data(format!("{}: unknown label {n}", self.id)))?,
            );
        }
        let mut labels = Array2::zeros((self.n_frames(), names.len()));
        for (j, &c) in cols.iter().enumerate() {
            labels.column_mut(j).assign(&self.labels.column(c));
        }
        Ok(LabeledSequence {
            id: self.id.clone(),
            features: self.features.clone(),
            labels,
            vocabulary: names.to_vec(),
        })
    }
}

/// Loader result: sequences plus non-fatal findings.
#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub sequences: Vec<LabeledSequence>,
    pub warnings: Vec<String>,
}

fn read_vocabulary(dir: &Path) -> Result<Option<Vec<String>>> {
    let path = dir.join("vocabulary.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let vocab: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    Ok(Some(vocab))
}

/// Loads every `.ann` sequence under `dir` against its vocabulary file.
pub fn load_annotations(dir: &Path) -> Result<LoadOutcome> {
    let mut out = LoadOutcome::default();
    let vocab = match read_vocabulary(dir)? {
        Some(v) => v,
        None => {
            out.warnings
                .push(format!("{}: no vocabulary.txt, nothing loaded", dir.display()));
            return Ok(out);
        }
    };
    let mut ann_files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ann"))
        .collect();
    ann_files.sort();
    if ann_files.is_empty() {
        out.warnings
            .push(format!("{}: no .ann sequences found", dir.display()));
        return Ok(out);
    }
    for path in ann_files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let t: i64 = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::Data(format!("{id}.ann row {}: bad time index", lineno + 1)))?;
            if t != rows.len() as i64 {
                return Err(Error::Data(format!(
                    "{id}.ann row {}: time index {t} but expected {} (1 FPS grid)",
                    lineno + 1,
                    rows.len()
                )));
            }
            let mut ids = Vec::new();
            for p in parts {
                let c: usize = p.parse().map_err(|_| {
                    Error::Data(format!("{id}.ann row {}: bad class id \"{p}\"", lineno + 1))
                })?;
                if c >= vocab.len() {
                    return Err(Error::Data(format!(
                        "{id}.ann row {}: class id {c} outside vocabulary of {}",
                        lineno + 1,
                        vocab.len()
                    )));
                }
                ids.push(c);
            }
            rows.push(ids);
        }
        let mut labels = Array2::zeros((rows.len(), vocab.len()));
        for (t, ids) in rows.iter().enumerate() {
            for &c in ids {
                labels[(t, c)] = 1.0;
            }
        }
        let bin = dir.join(format!("{id}.bin"));
        let features = if bin.exists() {
            let f = load_precomputed(&bin)?;
            if f.len() != rows.len() {
                return Err(Error::Data(format!(
                    "{id}: {} feature frames but {} annotation rows",
                    f.len(),
                    rows.len()
                )));
            }
            f
        } else {
            out.warnings
                .push(format!("{id}: no feature file, using empty features"));
            (0..rows.len())
                .map(|t| FrameFeature {
                    vector: ndarray::Array1::zeros(0),
                    time_index: t as i64,
                })
                .collect()
        };
        let seq = LabeledSequence {
            id,
            features,
            labels,
            vocabulary: vocab.clone(),
        };
        seq.validate()?;
        out.sequences.push(seq);
    }
    Ok(out)
}

/// Writes sequences in the normalized layout (the inverse of
/// [`load_annotations`]). Zero-dimensional features are not written.
pub fn write_annotations(dir: &Path, sequences: &[LabeledSequence]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let vocab = match sequences.first() {
        Some(s) => &s.vocabulary,
        None => return Ok(()),
    };
    for s in sequences {
        if &s.vocabulary != vocab {
            return Err(Error::Data(format!(
                "{}: vocabulary differs from the first sequence",
                s.id
            )));
        }
        s.validate()?;
    }
    let vpath = dir.join("vocabulary.txt");
    std::fs::write(&vpath, vocab.join("\n") + "\n")
        .map_err(|e| Error::io(vpath.display().to_string(), e))?;
    for s in sequences {
        let mut text = String::new();
        for t in 0..s.n_frames() {
            text.push_str(&t.to_string());
            for (c, &v) in s.labels.row(t).iter().enumerate() {
                if v >= 0.5 {
                    text.push(' ');
                    text.push_str(&c.to_string());
                }
            }
            text.push('\n');
        }
        let apath = dir.join(format!("{}.ann", s.id));
        std::fs::write(&apath, text).map_err(|e| Error::io(apath.display().to_string(), e))?;
        if s.features.first().is_some_and(|f| !f.vector.is_empty()) {
            write_features(&dir.join(format!("{}.bin", s.id)), &s.features)?;
        }
    }
    Ok(())
}

/// Triplet-task adapter: checks the vocabulary and closes every active
/// triplet over its tool/verb/target component columns.
pub fn load_triplet_annotations(dir: &Path) -> Result<LoadOutcome> {
    let mut out = load_annotations(dir)?;
    let expected = triplet_vocabulary();
    for seq in &mut out.sequences {
        if seq.vocabulary != expected {
            return Err(Error::Data(format!(
                "{}: vocabulary does not match the triplet task layout",
                seq.id
            )));
        }
        // component closure: triplet k active => its three components active
        for (k, (tool, verb, target)) in TRIPLET_CLASSES.iter().enumerate() {
            let tc = seq.label_index(tool).unwrap();
            let vc = seq.label_index(verb).unwrap();
            let oc = seq.label_index(target).unwrap();
            let kc = 31 + k;
            for t in 0..seq.n_frames() {
                if seq.labels[(t, kc)] >= 0.5 {
                    seq.labels[(t, tc)] = 1.0;
                    seq.labels[(t, vc)] = 1.0;
                    seq.labels[(t, oc)] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// CVS-task adapter: checks the vocabulary and flags frames where the
/// achieved column is set without all three criteria (reported, kept).
pub fn load_cvs_annotations(dir: &Path) -> Result<LoadOutcome> {
    let mut out = load_annotations(dir)?;
    let expected = cvs_vocabulary();
    for seq in &out.sequences {
        if seq.vocabulary != expected {
            return Err(Error::Data(format!(
                "{}: vocabulary does not match the CVS task layout",
                seq.id
            )));
        }
        let mut bad = 0usize;
        for t in 0..seq.n_frames() {
            let achieved = seq.labels[(t, 3)] >= 0.5;
            let all_criteria = (0..3).all(|c| seq.labels[(t, c)] >= 0.5);
            if achieved && !all_criteria {
                bad += 1;
            }
        }
        if bad > 0 {
            out.warnings.push(format!(
                "{}: {} frames mark CVS achieved without all criteria",
                seq.id, bad
            ));
        }
    }
    Ok(out)
}

/// Pooled positive rate per label column.
pub fn label_frequencies(sequences: &[LabeledSequence]) -> Result<Vec<f64>> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::Data("no sequences".into()))?;
    let dim = first.vocabulary.len();
    let mut counts = vec![0.0f64; dim];
    let mut frames = 0usize;
    for s in sequences {
        if s.vocabulary.len() != dim {
            return Err(Error::Data(format!("{}: vocabulary size differs", s.id)));
        }
        for t in 0..s.n_frames() {
            for c in 0..dim {
                counts[c] += s.labels[(t, c)];
            }
        }
        frames += s.n_frames();
    }
    if frames == 0 {
        return Err(Error::Data("zero frames".into()));
    }
    Ok(counts.into_iter().map(|c| c / frames as f64).collect())
}

/// Joins two views of the same sequence on the time axis. Label columns
/// are concatenated (vocabularies must be disjoint); features come from
/// the left side; frames outside the common time range are dropped and
/// reported.
pub fn merge_on_time(
    a: &LabeledSequence,
    b: &LabeledSequence,
) -> Result<(LabeledSequence, Vec<String>)> {
    if a.id != b.id {
        return Err(Error::Data(format!(
            "cannot merge different sequences {} and {}",
            a.id, b.id
        )));
    }
    for n in &b.vocabulary {
        if a.vocabulary.contains(n) {
            return Err(Error::Data(format!(
                "{}: label {n} appears on both sides of the merge",
                a.id
            )));
        }
    }
    let n = a.n_frames().min(b.n_frames());
    let mut warnings = Vec::new();
    if a.n_frames() != b.n_frames() {
        warnings.push(format!(
            "{}: sides cover {} and {} frames, keeping the common {}",
            a.id,
            a.n_frames(),
            b.n_frames(),
            n
        ));
    }
    let mut vocabulary = a.vocabulary.clone();
    vocabulary.extend(b.vocabulary.iter().cloned());
    let mut labels = Array2::zeros((n, vocabulary.len()));
    for t in 0..n {
        for c in 0..a.vocabulary.len() {
            labels[(t, c)] = a.labels[(t, c)];
        }
        for c in 0..b.vocabulary.len() {
            labels[(t, a.vocabulary.len() + c)] = b.labels[(t, c)];
        }
    }
    let merged = LabeledSequence {
        id: a.id.clone(),
        features: a.features[..n].to_vec(),
        labels,
        vocabulary,
    };
    merged.validate()?;
    Ok((merged, warnings))
}

/// Sequence-level split, deterministic given the seed. Both sides are
/// always non-empty.
pub fn split(
    data: Vec<LabeledSequence>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 sequences to split, got {}",
            data.len()
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_idx: BTreeSet<usize> = order[..n_train].iter().copied().collect();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n - n_train);
    for (i, s) in data.into_iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok((train, val))
}
