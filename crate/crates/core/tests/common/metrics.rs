use dualcorenet::metrics::{dice_coefficient, roc_auc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of positive/negative pairs ranked correctly, ties counting
/// one half, by enumerating every pair.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Worst gap between `roc_auc` and the pairwise oracle over `count`
/// random two-class instances of at most 20 samples with coarse,
/// tie-heavy scores.
pub fn auc_worst_deviation(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < count {
        let n = rng.gen_range(2..=20);
        let levels = rng.gen_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            assert!(roc_auc(&scores, &labels).is_err());
            continue;
        }
        let got = roc_auc(&scores, &labels).unwrap().auc;
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
        checked += 1;
    }
    worst
}

/// Random mask pairs violating symmetry, range, the `2|A∩B| / (|A|+|B|)`
/// formula or the both-empty convention.
pub fn dice_convention_violations(seed: u64, pairs: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let n = rng.gen_range(0..40);
        let (p, q) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(q)).collect();
        let d = dice_coefficient(&a, &b).unwrap();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
        let want = if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        };
        let empty = vec![false; n];
        let ok = d == dice_coefficient(&b, &a).unwrap()
            && (0.0..=1.0).contains(&d)
            && d == want
            && dice_coefficient(&empty, &empty).unwrap() == 1.0
            && (!a.iter().any(|x| *x) || dice_coefficient(&a, &a).unwrap() == 1.0);
        bad += usize::from(!ok);
    }
    bad
}
