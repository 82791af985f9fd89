use dualcorenet::crf::{
    crf_inference, mean_field_step, potts_compatibility, refine_foreground, CrfParams, DenseCrf, LabelMarginals,
    NodeFeatures, UnaryField,
};
use dualcorenet::metrics::{binarize, dice_coefficient};
use dualcorenet::synthetic::noisy_blob;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise strength `sum_m w_m k_m(i, j)` written out from the kernel
/// definitions, independent of the library's kernel code.
pub fn pair_strength(f: &NodeFeatures, p: &CrfParams, i: usize, j: usize) -> f64 {
    let dr = f.positions[i][0] - f.positions[j][0];
    let dc = f.positions[i][1] - f.positions[j][1];
    let di = f.intensities[i] - f.intensities[j];
    let d2 = dr * dr + dc * dc;
    let ta = p.bilateral_spatial_bandwidth;
    let tb = p.bilateral_intensity_bandwidth;
    let tg = p.spatial_bandwidth;
    let bilateral = (-d2 / (2.0 * ta * ta) - di * di / (2.0 * tb * tb)).exp();
    let spatial = (-d2 / (2.0 * tg * tg)).exp();
    p.kernel_weights[0] * bilateral + p.kernel_weights[1] * spatial
}

/// One damped parallel update by explicit double loops over node pairs
/// and label pairs.
pub fn oracle_step(q: &[f64], u: &[f64], labels: usize, f: &NodeFeatures, p: &CrfParams) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; labels * n];
    for i in 0..n {
        let mut energy = vec![0.0; labels];
        for (l, e) in energy.iter_mut().enumerate() {
            let mut pairwise = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = pair_strength(f, p, i, j);
                for l2 in 0..labels {
                    let mu = if l == l2 { 0.0 } else { 1.0 };
                    pairwise += mu * k * q[l2 * n + j];
                }
            }
            *e = -u[l * n + i] + pairwise;
        }
        let z: f64 = energy.iter().map(|e| (-e).exp()).sum();
        let mut mass = 0.0;
        for l in 0..labels {
            let v = (1.0 - p.damping) * (-energy[l]).exp() / z + p.damping * q[l * n + i];
            out[l * n + i] = v;
            mass += v;
        }
        for l in 0..labels {
            out[l * n + i] /= mass;
        }
    }
    out
}

pub fn oracle_softmax(u: &[f64], labels: usize) -> Vec<f64> {
    let n = u.len() / labels;
    let mut out = vec![0.0; u.len()];
    for i in 0..n {
        let z: f64 = (0..labels).map(|l| u[l * n + i].exp()).sum();
        for l in 0..labels {
            out[l * n + i] = u[l * n + i].exp() / z;
        }
    }
    out
}

pub fn random_lattice(h: usize, w: usize, labels: usize, seed: u64) -> (NodeFeatures, UnaryField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intensities = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let scores = (0..labels * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
    (
        NodeFeatures::lattice(h, w, intensities).unwrap(),
        UnaryField::new(labels, scores).unwrap(),
    )
}

pub fn random_params(rng: &mut ChaCha8Rng) -> CrfParams {
    CrfParams {
        kernel_weights: [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)],
        spatial_bandwidth: rng.gen_range(0.5..4.0),
        bilateral_spatial_bandwidth: rng.gen_range(0.5..8.0),
        bilateral_intensity_bandwidth: rng.gen_range(0.05..0.5),
        damping: rng.gen_range(0.0..1.0),
        ..CrfParams::default()
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Exact marginals of `p(y) ~ exp(sum_i U_i(y_i) - sum_{i<j} mu(y_i, y_j) k_ij)`
/// by enumerating all binary labelings.
pub fn gibbs_marginals(u: &UnaryField, f: &NodeFeatures, p: &CrfParams) -> Vec<f64> {
    let n = f.len();
    let mut marg = vec![0.0; 2 * n];
    let mut z = 0.0;
    for code in 0..(1usize << n) {
        let y: Vec<usize> = (0..n).map(|i| (code >> i) & 1).collect();
        let mut energy = 0.0;
        for i in 0..n {
            energy -= u.scores[y[i] * n + i];
            for j in (i + 1)..n {
                energy += potts_compatibility(y[i], y[j]) * pair_strength(f, p, i, j);
            }
        }
        let weight = (-energy).exp();
        z += weight;
        for i in 0..n {
            marg[y[i] * n + i] += weight;
        }
    }
    marg.iter().map(|m| m / z).collect()
}

/// Worst entrywise gap between one library step and the double-loop
/// oracle over random lattices up to 4x4 with 2 or 3 labels and
/// arbitrary normalized marginals.
pub fn worst_step_deviation(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (h, w) in [(1, 1), (1, 3), (2, 2), (3, 3), (2, 4), (4, 4)] {
        for labels in [2, 3] {
            for _ in 0..trials {
                let (f, u) = random_lattice(h, w, labels, rng.gen());
                let params = random_params(&mut rng);
                let q_raw: Vec<f64> = (0..labels * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let q = LabelMarginals {
                    labels,
                    probs: oracle_softmax(&q_raw, labels),
                };
                let got = mean_field_step(&q, &u, &f, &params).unwrap();
                let want = oracle_step(&q.probs, &u.scores, labels, &f, &params);
                worst = worst.max(max_diff(&got.probs, &want));
            }
        }
    }
    worst
}

/// Nodes whose mean-field argmax differs from the exact Gibbs argmax on
/// random 2x2 lattices whose unary margins exceed four times the largest
/// total pairwise strength of any node.
pub fn gibbs_argmax_disagreements(seed: u64, trials: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let f = NodeFeatures::lattice(2, 2, (0..4).map(|_| rng.gen()).collect()).unwrap();
        let params = CrfParams {
            kernel_weights: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            spatial_bandwidth: rng.gen_range(0.5..3.0),
            bilateral_spatial_bandwidth: rng.gen_range(0.5..3.0),
            bilateral_intensity_bandwidth: rng.gen_range(0.05..0.5),
            num_iterations: 10,
            ..CrfParams::default()
        };
        let strength = (0..4)
            .map(|i| (0..4).filter(|&j| j != i).map(|j| pair_strength(&f, &params, i, j)).sum::<f64>())
            .fold(0.0, f64::max);
        let mut scores = vec![0.0; 8];
        for i in 0..4 {
            let margin = 4.0 * strength + rng.gen_range(0.01..2.0);
            let fg = rng.gen_bool(0.5);
            scores[if fg { 4 + i } else { i }] = margin;
        }
        let u = UnaryField::new(2, scores).unwrap();
        let exact = gibbs_marginals(&u, &f, &params);
        let mf = crf_inference(&u, &f, &params).unwrap();
        bad += (0..4)
            .filter(|&i| mf.argmax(i) != usize::from(exact[4 + i] > exact[i]))
            .count();
    }
    bad
}

/// Worst normalization error over every iterate of random inferences.
pub fn worst_normalization_error(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (f, u) = random_lattice(5, 6, rng.gen_range(2..4), rng.gen());
        let params = CrfParams {
            num_iterations: 8,
            ..random_params(&mut rng)
        };
        let crf = DenseCrf::new(&f, &params).unwrap();
        for q in crf.iterates(&u).unwrap() {
            assert!(q.probs.iter().all(|&v| v >= 0.0));
            worst = worst.max(q.normalization_error());
        }
    }
    worst
}

/// Mean dice of the noisy unaries and of their CRF refinement on the
/// seeded 32x32 blob task.
pub fn denoising_dice(trials: u64) -> (f64, f64) {
    let params = CrfParams::default();
    let (mut noisy, mut refined) = (0.0, 0.0);
    for t in 0..trials {
        let blob = noisy_blob(32, 0.2, 0.7, t);
        let out = refine_foreground(&blob.noisy_probs.data, &blob.image.data, 32, 32, &params).unwrap();
        let truth = binarize(&blob.mask.data);
        noisy += dice_coefficient(&binarize(&blob.noisy_probs.data), &truth).unwrap();
        refined += dice_coefficient(&binarize(&out), &truth).unwrap();
    }
    (noisy / trials as f64, refined / trials as f64)
}
