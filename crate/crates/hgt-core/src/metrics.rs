//! Evaluation metrics: average precision, thresholded accuracy, conditional
//! AP, and the pairwise label-correlation diagnostic.
//!
//! AP uses the raw "precision at each positive, averaged" rule with no
//! interpolation. Ties are broken by stable input order: among equal scores
//! the earlier frame ranks first.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision of a ranked binary problem; `None` when the class has
/// no positive example (undefined, caller reports the class instead).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap_sum / n_pos as f64)
}

/// Fraction of entries where `(prob >= threshold)` equals the label. A
/// probability exactly at the threshold counts as a positive call.
pub fn accuracy_at_threshold(probs: &[f64], labels: &[bool], threshold: f64) -> f64 {
    assert_eq!(probs.len(), labels.len(), "probs/labels length mismatch");
    if probs.is_empty() {
        return 1.0;
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == l)
        .count();
    correct as f64 / probs.len() as f64
}

/// AP restricted to entries where the condition mask is set.
pub fn conditional_ap(scores: &[f64], labels: &[bool], mask: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), mask.len(), "scores/mask length mismatch");
    let mut s = Vec::new();
    let mut l = Vec::new();
    for i in 0..scores.len() {
        if mask[i] {
            s.push(scores[i]);
            l.push(labels[i]);
        }
    }
    if s.is_empty() {
        return None;
    }
    average_precision(&s, &l)
}

/// Per-sequence condition "the flag has not yet been raised": true for
/// frames strictly before the first set entry, all true if never set.
pub fn before_first_mask(flag: &[bool]) -> Vec<bool> {
    match flag.iter().position(|&f| f) {
        Some(first) => (0..flag.len()).map(|i| i < first).collect(),
        None => vec![true; flag.len()],
    }
}

/// Empirical co-occurrence diagnostic for an edge event `e` and a node
/// event `v` over aligned frames.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub p_e: f64,
    pub p_v: f64,
    pub p_ev: f64,
    /// `P(e | v)`; absent when `v` never occurs.
    pub p_e_given_v: Option<f64>,
    /// `P(e, v) - P(e) P(v)`; positive when the events attract.
    pub rho: f64,
    pub n_frames: usize,
}

impl CorrelationRecord {
    pub fn sign(&self) -> i8 {
        if self.rho > 0.0 {
            1
        } else if self.rho < 0.0 {
            -1
        } else {
            0
        }
    }
}

pub fn label_correlation(edge: &[bool], node: &[bool]) -> Result<CorrelationRecord> {
    if edge.len() != node.len() {
        return Err(Error::Data(format!(
            "edge stream has {} frames, node stream {}",
            edge.len(),
            node.len()
        )));
    }
    let n = edge.len();
    if n == 0 {
        return Err(Error::Data("correlation over zero frames".into()));
    }
    let nf = n as f64;
    let c_e = edge.iter().filter(|&&x| x).count() as f64;
    let c_v = node.iter().filter(|&&x| x).count() as f64;
    let c_ev = edge
        .iter()
        .zip(node)
        .filter(|(&e, &v)| e && v)
        .count() as f64;
    let p_e = c_e / nf;
    let p_v = c_v / nf;
    let p_ev = c_ev / nf;
    let p_e_given_v = if c_v > 0.0 { Some(c_ev / c_v) } else { None };
    Ok(CorrelationRecord {
        p_e,
        p_v,
        p_ev,
        p_e_given_v,
        rho: p_ev - p_e * p_v,
        n_frames: n,
    })
}

/// Precision-recall curve points in rank order, for plotting.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(scores.len());
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
        }
        points.push((hits as f64 / n_pos as f64, hits as f64 / (rank + 1) as f64));
    }
    points
}

/// Constant per-class scores at the class's training-set positive rate.
pub fn marginal_baseline_scores(rates: &[f64], n_frames: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_frames, rates.len()));
    for (c, &r) in rates.iter().enumerate() {
        m.column_mut(c).fill(r);
    }
    m
}

/// Evaluation results at one future offset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Offset (seconds ahead) these numbers describe.
    pub horizon: usize,
    pub n_frames: usize,
    /// Mean of per-class APs over classes with at least one positive;
    /// absent when no class is defined.
    pub mean_ap: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    /// Classes skipped for having zero positives.
    pub undefined_classes: Vec<String>,
    pub accuracy: BTreeMap<String, f64>,
    /// Conditional APs keyed "event|condition".
    pub conditional: BTreeMap<String, f64>,
    pub n_positives: BTreeMap<String, usize>,
}

impl EvalReport {
    /// Scores and truth are `(n_frames, n_classes)`; columns name classes.
    pub fn compute(
        scores: &Array2<f64>,
        truth: &Array2<f64>,
        columns: &[String],
        horizon: usize,
    ) -> Result<EvalReport> {
        if scores.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "scores {:?} vs truth {:?}",
                scores.dim(),
                truth.dim()
            )));
        }
        if scores.ncols() != columns.len() {
            return Err(Error::Shape(format!(
                "{} score columns for {} names",
                scores.ncols(),
                columns.len()
            )));
        }
        let mut per_class_ap = BTreeMap::new();
        let mut undefined = Vec::new();
        let mut accuracy = BTreeMap::new();
        let mut n_positives = BTreeMap::new();
        for (c, name) in columns.iter().enumerate() {
            let s: Vec<f64> = scores.column(c).iter().copied().collect();
            let l: Vec<bool> = truth.column(c).iter().map(|&v| v >= 0.5).collect();
            n_positives.insert(name.clone(), l.iter().filter(|&&x| x).count());
            accuracy.insert(name.clone(), accuracy_at_threshold(&s, &l, 0.5));
            match average_precision(&s, &l) {
                Some(ap) => {
                    per_class_ap.insert(name.clone(), ap);
                }
                None => undefined.push(name.clone()),
            }
        }
        let mean_ap = if per_class_ap.is_empty() {
            None
        } else {
            Some(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
        };
        Ok(EvalReport {
            horizon,
            n_frames: scores.nrows(),
            mean_ap,
            per_class_ap,
            undefined_classes: undefined,
            accuracy,
            conditional: BTreeMap::new(),
            n_positives,
        })
    }

    pub fn add_conditional(&mut self, event: &str, condition: &str, ap: f64) {
        self.conditional.insert(format!("{event}|{condition}"), ap);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    /// Flat table, one row per class: tab-separated for downstream tooling.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class\thorizon\tap\taccuracy\tn_positives\n");
        for (name, ap) in &self.per_class_ap {
            out.push_str(&format!(
                "{name}\t{}\t{:.6}\t{:.6}\t{}\n",
                self.horizon,
                ap,
                self.accuracy.get(name).copied().unwrap_or(f64::NAN),
                self.n_positives.get(name).copied().unwrap_or(0),
            ));
        }
        for name in &self.undefined_classes {
            out.push_str(&format!(
                "{name}\t{}\tundefined\t{:.6}\t0\n",
                self.horizon,
                self.accuracy.get(name).copied().unwrap_or(f64::NAN),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Independent AP oracle: per positive, count rank by linear scan, then
    /// sum precisions in rank order.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 {
            return None;
        }
        let mut at_rank: Vec<(usize, f64)> = Vec::new();
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            // rank = items with larger score, plus earlier ties, plus self
            let mut rank = 0usize;
            for j in 0..scores.len() {
                if scores[j] > scores[i] || (scores[j] == scores[i] && j <= i) {
                    rank += 1;
                }
            }
            let hits = (0..scores.len())
                .filter(|&j| {
                    labels[j] && (scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
                })
                .count();
            at_rank.push((rank, hits as f64 / rank as f64));
        }
        at_rank.sort_by_key(|&(r, _)| r);
        Some(at_rank.iter().map(|&(_, p)| p).sum::<f64>() / n_pos as f64)
    }

    #[test]
    fn perfect_ranking_gives_one() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(average_precision(&scores, &labels), Some(1.0));
    }

    #[test]
    fn worked_example_seven_twelfths() {
        let scores = [0.9, 0.8, 0.7];
        let labels = [false, true, true];
        let ap = average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(ap, 7.0 / 12.0, epsilon = 1e-15);
        assert_eq!(ap, ap_oracle(&scores, &labels).unwrap());
    }

    #[test]
    fn zero_positives_is_undefined() {
        assert_eq!(average_precision(&[0.5, 0.4], &[false, false]), None);
    }

    #[test]
    fn matches_oracle_on_1000_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for case in 0..1000 {
            let n = rng.random_range(1..=30);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // coarse grid to force frequent ties
                    (rng.random_range(0..10) as f64) / 10.0
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
            let got = average_precision(&scores, &labels);
            let want = ap_oracle(&scores, &labels);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => assert_eq!(a, b, "case {case}: {a} vs {b}"),
                other => panic!("case {case}: {other:?}"),
            }
        }
    }

    #[test]
    fn random_scores_ap_approaches_positive_rate() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 20000;
        let p = 0.3;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < p).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - p).abs() < 0.02, "ap {ap} far from rate {p}");
    }

    proptest! {
        #[test]
        fn ap_invariant_under_increasing_affine(
            raw in proptest::collection::vec((0u8..200, proptest::bool::ANY), 1..40),
            scale in 0.01f64..50.0,
            shift in -100.0f64..100.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 7.0).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            let mapped: Vec<f64> = scores.iter().map(|&s| s * scale + shift).collect();
            prop_assert_eq!(
                average_precision(&scores, &labels),
                average_precision(&mapped, &labels)
            );
        }

        #[test]
        fn accuracy_matches_loop_oracle(
            raw in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 0..50),
        ) {
            let probs: Vec<f64> = raw.iter().map(|&(p, _)| p).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            let got = accuracy_at_threshold(&probs, &labels, 0.5);
            let mut correct = 0;
            for i in 0..probs.len() {
                let call = probs[i] >= 0.5;
                if call == labels[i] { correct += 1; }
            }
            let want = if probs.is_empty() { 1.0 } else { correct as f64 / probs.len() as f64 };
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn accuracy_tie_counts_as_positive() {
        let probs = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, true];
        // every call is positive, so accuracy = positive rate
        assert_abs_diff_eq!(
            accuracy_at_threshold(&probs, &labels, 0.5),
            0.75,
            epsilon = 1e-15
        );
    }

    #[test]
    fn perfect_binary_probs_give_full_accuracy() {
        let probs = [1.0, 0.0, 1.0];
        let labels = [true, false, true];
        assert_eq!(accuracy_at_threshold(&probs, &labels, 0.5), 1.0);
    }

    #[test]
    fn conditional_full_mask_is_bitwise_unconditional() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random_range(0.0..1.0) < 0.3).collect();
        let mask = vec![true; 200];
        assert_eq!(
            conditional_ap(&scores, &labels, &mask),
            average_precision(&scores, &labels)
        );
    }

    #[test]
    fn conditional_restriction_matches_manual_slice() {
        let scores = [0.9, 0.1, 0.8, 0.2, 0.7, 0.6];
        let labels = [true, false, false, true, true, false];
        let mask = [true, false, true, false, true, true];
        let got = conditional_ap(&scores, &labels, &mask);
        let want = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        assert_eq!(got, want);
    }

    #[test]
    fn conditional_with_only_negatives_is_undefined() {
        let scores = [0.9, 0.1, 0.8];
        let labels = [true, false, false];
        let mask = [false, true, true];
        assert_eq!(conditional_ap(&scores, &labels, &mask), None);
    }

    #[test]
    fn before_first_mask_semantics() {
        assert_eq!(
            before_first_mask(&[false, false, true, false, true]),
            vec![true, true, false, false, false]
        );
        assert_eq!(
            before_first_mask(&[false, false]),
            vec![true, true]
        );
        assert_eq!(before_first_mask(&[true]), vec![false]);
    }

    #[test]
    fn correlation_identity_holds_to_1e12() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = 500;
            let edge: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.2).collect();
            let node: Vec<bool> = (0..n)
                .enumerate()
                .map(|(i, _)| edge[i] && rng.random_range(0.0..1.0) < 0.9 || rng.random_range(0.0..1.0) < 0.1)
                .collect();
            let r = label_correlation(&edge, &node).unwrap();
            assert_abs_diff_eq!(r.p_ev - r.p_e * r.p_v, r.rho, epsilon = 1e-15);
            if let Some(pegv) = r.p_e_given_v {
                // product form and conditional form agree:
                // P(e,v) − P(e)P(v) = P(v) (P(e|v) − P(e))
                let factored = r.p_v * (pegv - r.p_e);
                assert_abs_diff_eq!(factored, r.rho, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn independent_streams_have_small_rho() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 100_000;
        let edge: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.3).collect();
        let node: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
        let r = label_correlation(&edge, &node).unwrap();
        assert!(r.rho.abs() < 0.01, "rho {} for independent streams", r.rho);
    }

    #[test]
    fn dependent_streams_have_positive_sign() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let n = 10_000;
        let node: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
        let edge: Vec<bool> = (0..n)
            .map(|i| node[i] && rng.random_range(0.0..1.0) < 0.5)
            .collect();
        let r = label_correlation(&edge, &node).unwrap();
        assert_eq!(r.sign(), 1);
        if let Some(pegv) = r.p_e_given_v {
            assert!(pegv > r.p_e);
        }
    }

    #[test]
    fn never_occurring_condition_reports_no_conditional() {
        let edge = [true, false, true];
        let node = [false, false, false];
        let r = label_correlation(&edge, &node).unwrap();
        assert!(r.p_e_given_v.is_none());
        assert_eq!(r.p_v, 0.0);
    }

    #[test]
    fn report_mean_matches_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 60;
        let c = 9;
        let scores = Array2::from_shape_fn((n, c), |_| rng.random_range(0.0..1.0));
        let truth = Array2::from_shape_fn((n, c), |(_, j)| {
            // leave one column with no positives
            if j == 4 || rng.random_range(0.0..1.0) >= 0.3 {
                0.0
            } else {
                1.0
            }
        });
        let cols: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let report = EvalReport::compute(&scores, &truth, &cols, 2).unwrap();
        assert!(report.undefined_classes.contains(&"c4".to_string()));
        let manual: f64 =
            report.per_class_ap.values().sum::<f64>() / report.per_class_ap.len() as f64;
        assert_abs_diff_eq!(report.mean_ap.unwrap(), manual, epsilon = 1e-12);
        assert!(report.mean_ap.unwrap() >= 0.0 && report.mean_ap.unwrap() <= 1.0);
        assert_eq!(report.horizon, 2);
        assert_eq!(report.n_frames, n);
    }

    #[test]
    fn report_serializes_to_toml_and_table() {
        let scores = ndarray::array![[0.9, 0.2], [0.1, 0.8]];
        let truth = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let cols = vec!["x".to_string(), "y".to_string()];
        let report = EvalReport::compute(&scores, &truth, &cols, 0).unwrap();
        let toml_text = report.to_toml();
        assert!(toml_text.contains("mean_ap"));
        let table = report.to_table();
        assert!(table.lines().count() >= 3);
        assert!(table.starts_with("class\t"));
    }

    #[test]
    fn pr_curve_recall_is_nondecreasing_and_ends_at_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
        let pts = pr_curve(&scores, &labels);
        assert_eq!(pts.len(), 50);
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0);
        }
        assert_abs_diff_eq!(pts.last().unwrap().0, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn marginal_baseline_shape_and_values() {
        let m = marginal_baseline_scores(&[0.1, 0.7], 4);
        assert_eq!(m.dim(), (4, 2));
        assert!(m.column(0).iter().all(|&v| v == 0.1));
        assert!(m.column(1).iter().all(|&v| v == 0.7));
    }
}
