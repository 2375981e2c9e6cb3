//! ROC curve and AUC for score maps against binary change masks.
//!
//! A pixel is declared changed when its score is >= the threshold; tied
//! scores share one threshold, so the curve has one point per distinct score
//! plus the (0, 0) start. AUC is the trapezoidal integral over the false
//! positive rate, which with this construction equals the Mann-Whitney
//! statistic with half credit for ties.

use crate::error::{Error, Result};
use crate::maps::{ChangeMask, ScoreMap};

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

/// Ordered from (0, 0) at threshold +inf to (1, 1) at the minimum score;
/// both coordinate sequences are non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }
}

pub fn compute_roc(map: &ScoreMap, mask: &ChangeMask) -> Result<RocCurve> {
    if map.height() != mask.height() || map.width() != mask.width() {
        return Err(Error::shape(
            format!("{}x{} mask", map.height(), map.width()),
            format!("{}x{} mask", mask.height(), mask.width()),
        ));
    }
    let n_pos = mask.positives();
    let n_neg = mask.labels().len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateMask {
            positives: n_pos,
            negatives: n_neg,
        });
    }

    let mut pairs: Vec<(f64, bool)> = map
        .scores()
        .iter()
        .cloned()
        .zip(mask.labels().iter().cloned())
        .collect();
    // Descending by score; ties form one threshold group.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        false_positive_rate: 0.0,
        true_positive_rate: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            false_positive_rate: fp as f64 / n_neg as f64,
            true_positive_rate: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve, in [0, 1].
pub fn compute_auc(curve: &RocCurve) -> f64 {
    let pts = curve.points();
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let dx = pair[1].false_positive_rate - pair[0].false_positive_rate;
        area += dx * (pair[0].true_positive_rate + pair[1].true_positive_rate) * 0.5;
    }
    area
}

/// Min-max scale scores into [0, 1]; constant maps become all zeros. A
/// strictly monotone transform, so ROC and AUC are unchanged.
pub fn normalize_scores(map: &ScoreMap) -> ScoreMap {
    map.normalized()
}

/// ROC as CSV: header then one `threshold,fpr,tpr` row per point.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in curve.points() {
        out.push_str(&format!(
            "{},{},{}\n",
            p.threshold, p.false_positive_rate, p.true_positive_rate
        ));
    }
    out
}

/// Metrics summary as a small JSON object.
pub fn metrics_json(method: &str, auc: f64, n_pos: usize, n_neg: usize) -> String {
    format!(
        "{{\"method\": \"{}\", \"auc\": {}, \"n_pos\": {}, \"n_neg\": {}}}\n",
        method, auc, n_pos, n_neg
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_of(scores: Vec<f64>) -> ScoreMap {
        let n = scores.len();
        ScoreMap::new(1, n, scores).unwrap()
    }

    fn mask_of(labels: Vec<bool>) -> ChangeMask {
        let n = labels.len();
        ChangeMask::new(1, n, labels).unwrap()
    }

    #[test]
    fn perfect_separation_passes_through_corner() {
        let map = map_of(vec![1.0, 1.0, 0.0, 0.0]);
        let mask = mask_of(vec![true, true, false, false]);
        let curve = compute_roc(&map, &mask).unwrap();
        assert!(curve
            .points()
            .iter()
            .any(|p| p.false_positive_rate == 0.0 && p.true_positive_rate == 1.0));
        assert_eq!(compute_auc(&curve), 1.0);
    }

    #[test]
    fn all_tied_scores_give_diagonal() {
        let map = map_of(vec![5.0; 6]);
        let mask = mask_of(vec![true, false, true, false, false, true]);
        let curve = compute_roc(&map, &mask).unwrap();
        assert_eq!(curve.points().len(), 2);
        assert_eq!(curve.points()[0].false_positive_rate, 0.0);
        assert_eq!(curve.points()[1].true_positive_rate, 1.0);
        assert_eq!(compute_auc(&curve), 0.5);
    }

    #[test]
    fn reversed_perfect_scores_give_zero() {
        let map = map_of(vec![0.0, 0.0, 1.0, 1.0]);
        let mask = mask_of(vec![true, true, false, false]);
        let auc = compute_auc(&compute_roc(&map, &mask).unwrap());
        assert_eq!(auc, 0.0);
    }

    #[test]
    fn four_pixel_case_matches_threshold_enumeration() {
        // Oracle: thresholds inf, 0.9, 0.8, 0.3, 0.1 declare score >= t.
        let map = map_of(vec![0.9, 0.8, 0.3, 0.1]);
        let mask = mask_of(vec![true, false, true, false]);
        let curve = compute_roc(&map, &mask).unwrap();
        let expected = [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(curve.points().len(), expected.len());
        for (p, (fpr, tpr)) in curve.points().iter().zip(expected) {
            assert_eq!(p.false_positive_rate, fpr);
            assert_eq!(p.true_positive_rate, tpr);
        }
        assert_eq!(compute_auc(&curve), 0.75);
    }

    #[test]
    fn single_class_mask_is_degenerate() {
        let map = map_of(vec![1.0, 2.0]);
        let mask = mask_of(vec![true, true]);
        assert!(matches!(
            compute_roc(&map, &mask),
            Err(Error::DegenerateMask { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let map = map_of(vec![1.0, 2.0]);
        let mask = ChangeMask::new(2, 1, vec![true, false]).unwrap();
        assert!(matches!(compute_roc(&map, &mask), Err(Error::Shape { .. })));
    }

    #[test]
    fn curve_coordinates_are_monotone() {
        let map = map_of(vec![0.3, 0.1, 0.4, 0.1, 0.5, 0.9, 0.2, 0.6]);
        let mask = mask_of(vec![false, true, false, false, true, true, false, true]);
        let curve = compute_roc(&map, &mask).unwrap();
        for pair in curve.points().windows(2) {
            assert!(pair[1].false_positive_rate >= pair[0].false_positive_rate);
            assert!(pair[1].true_positive_rate >= pair[0].true_positive_rate);
            assert!(pair[1].threshold <= pair[0].threshold);
        }
        let last = curve.points().last().unwrap();
        assert_eq!(
            (last.false_positive_rate, last.true_positive_rate),
            (1.0, 1.0)
        );
    }

    #[test]
    fn normalization_preserves_auc() {
        let map = map_of(vec![3.0, -1.0, 2.5, 0.0, 7.0]);
        let mask = mask_of(vec![true, false, true, false, true]);
        let before = compute_auc(&compute_roc(&map, &mask).unwrap());
        let after = compute_auc(&compute_roc(&normalize_scores(&map), &mask).unwrap());
        assert_eq!(before, after);
    }
}
