//! AUC against the Mann-Whitney oracle: the pairwise comparison count with
//! half credit for ties, over many random instances.

use hacd_core::eval::{compute_auc, compute_roc};
use hacd_core::maps::{ChangeMask, ScoreMap};
use hacd_core::rng::Rng;

/// O(n_pos * n_neg) pairwise oracle.
fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let mut credit = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    credit / (positives.len() as f64 * negatives.len() as f64)
}

fn auc_of(scores: Vec<f64>, labels: Vec<bool>) -> f64 {
    let n = scores.len();
    let map = ScoreMap::new(1, n, scores).unwrap();
    let mask = ChangeMask::new(1, n, labels).unwrap();
    compute_auc(&compute_roc(&map, &mask).unwrap())
}

#[test]
fn hundred_random_instances_match_mann_whitney() {
    let mut rng = Rng::new(314);
    for case in 0..100 {
        let n = 2 + rng.below(199);
        // Quantized scores force plenty of ties.
        let levels = 1 + rng.below(12);
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.uniform() * levels as f64).floor() / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        // Guarantee both classes.
        labels[0] = true;
        if labels.iter().all(|&l| l) {
            labels[n - 1] = false;
        }
        let auc = auc_of(scores.clone(), labels.clone());
        let oracle = mann_whitney(&scores, &labels);
        assert!(
            (auc - oracle).abs() <= 1e-12,
            "case {}: auc {} vs mann-whitney {}",
            case,
            auc,
            oracle
        );
    }
}

#[test]
fn exact_endpoint_values() {
    // Perfect ranking.
    assert_eq!(
        auc_of(vec![3.0, 2.0, 1.0, 0.0], vec![true, true, false, false]),
        1.0
    );
    // Reversed perfect ranking.
    assert_eq!(
        auc_of(vec![0.0, 1.0, 2.0, 3.0], vec![true, true, false, false]),
        0.0
    );
    // Constant scores.
    assert_eq!(
        auc_of(
            vec![5.0; 8],
            vec![true, false, true, false, true, false, true, false]
        ),
        0.5
    );
}

#[test]
fn auc_invariant_under_strictly_increasing_transforms() {
    let mut rng = Rng::new(2718);
    for _ in 0..20 {
        let n = 10 + rng.below(100);
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auc_of(scores.clone(), labels.clone());
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s + 11.0).collect();
        let cube: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        assert_eq!(auc_of(exp, labels.clone()), base, "exp transform");
        assert_eq!(auc_of(affine, labels.clone()), base, "affine transform");
        assert_eq!(auc_of(cube, labels.clone()), base, "cube transform");
    }
}
