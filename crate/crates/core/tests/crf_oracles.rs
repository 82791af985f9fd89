mod common;

use common::crf::*;
use common::relative_error;
use dualcorenet::crf::{
    crf_inference, gaussian_kernel_value, initial_marginals, mean_field_step, potts_compatibility, CrfParams,
    DenseCrf, LabelMarginals, NodeFeatures, UnaryField,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


#[test]
fn potts_is_zero_on_agreement_and_symmetric() {
    assert_eq!(potts_compatibility(0, 0), 0.0);
    assert_eq!(potts_compatibility(0, 1), 1.0);
    for a in 0..4 {
        for b in 0..4 {
            assert_eq!(potts_compatibility(a, b), potts_compatibility(b, a));
        }
    }
}

#[test]
fn gaussian_kernel_examples() {
    assert_eq!(gaussian_kernel_value(&[2.0, 3.0], &[2.0, 3.0], &[3.0, 3.0]), 1.0);
    let v = gaussian_kernel_value(&[0.0, 0.0], &[3.0, 0.0], &[3.0, 3.0]);
    assert!((v - (-0.5f64).exp()).abs() < 1e-15);
    assert!((v - 0.6065).abs() < 1e-4);
    let mut prev = 1.0;
    for d in 1..20 {
        let k = gaussian_kernel_value(&[0.0, 0.0], &[0.5 * d as f64, 0.0], &[3.0, 3.0]);
        assert!(k < prev);
        prev = k;
    }
}

#[test]
fn step_matches_brute_force_oracle_on_small_lattices() {
    let worst = worst_step_deviation(11, 10);
    println!("worst step deviation {worst:e}");
    assert!(worst < 1e-10);
}

#[test]
fn one_iteration_on_a_three_node_line_matches_oracle() {
    let f = NodeFeatures::lattice(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
    let u = UnaryField::new(2, vec![0.3, -1.0, 2.0, -0.4, 1.5, 0.1]).unwrap();
    let params = CrfParams {
        kernel_weights: [0.0, 1.3],
        spatial_bandwidth: 1.5,
        num_iterations: 1,
        ..CrfParams::default()
    };
    let got = crf_inference(&u, &f, &params).unwrap();
    let q0 = oracle_softmax(&u.scores, 2);
    let want = oracle_step(&q0, &u.scores, 2, &f, &params);
    assert!(max_diff(&got.probs, &want) < 1e-10);
}

#[test]
fn zero_iterations_return_softmax_of_unary() {
    let (f, u) = random_lattice(3, 3, 2, 4);
    let params = CrfParams {
        num_iterations: 0,
        ..CrfParams::default()
    };
    let got = crf_inference(&u, &f, &params).unwrap();
    assert!(max_diff(&got.probs, &oracle_softmax(&u.scores, 2)) < 1e-15);
}


#[test]
fn mean_field_argmax_agrees_with_exact_gibbs_marginals_under_strong_unaries() {
    assert_eq!(gibbs_argmax_disagreements(21, 200), 0);
}

#[test]
fn gibbs_oracle_sums_to_one() {
    let (f, u) = random_lattice(2, 2, 2, 8);
    let m = gibbs_marginals(&u, &f, &CrfParams::default());
    for i in 0..4 {
        assert!((m[i] + m[4 + i] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn marginals_normalize_after_every_iteration() {
    assert!(worst_normalization_error(31, 20) < 1e-9);
}

#[test]
fn zero_pairwise_weights_make_softmax_a_fixed_point() {
    let (f, u) = random_lattice(4, 4, 2, 12);
    let sm = oracle_softmax(&u.scores, 2);
    for t in [1, 2, 7] {
        let params = CrfParams {
            kernel_weights: [0.0, 0.0],
            num_iterations: t,
            ..CrfParams::default()
        };
        let q = crf_inference(&u, &f, &params).unwrap();
        assert!(max_diff(&q.probs, &sm) < 1e-12);
    }
}

#[test]
fn undamped_step_with_zero_weights_ignores_the_previous_marginals() {
    let (f, u) = random_lattice(3, 3, 2, 13);
    let params = CrfParams {
        kernel_weights: [0.0, 0.0],
        damping: 0.0,
        ..CrfParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<f64> = (0..18).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let q = LabelMarginals {
        labels: 2,
        probs: oracle_softmax(&raw, 2),
    };
    let out = mean_field_step(&q, &u, &f, &params).unwrap();
    assert!(max_diff(&out.probs, &oracle_softmax(&u.scores, 2)) < 1e-12);
    // with damping the same holds from q = softmax(U)
    let damped = CrfParams { damping: 0.5, ..params };
    let out = mean_field_step(&initial_marginals(&u), &u, &f, &damped).unwrap();
    assert!(max_diff(&out.probs, &oracle_softmax(&u.scores, 2)) < 1e-12);
}

#[test]
fn two_nodes_with_opposite_unaries_agree_under_strong_smoothing() {
    let f = NodeFeatures::scattered(vec![[0.0, 0.0], [0.0, 0.0]], vec![0.5, 0.5]).unwrap();
    // node 0 confidently foreground, node 1 background by a smaller margin
    let u = UnaryField::new(2, vec![0.0, 2.0, 3.0, 0.0]).unwrap();
    let params = CrfParams {
        kernel_weights: [1.5, 1.5],
        damping: 0.0,
        ..CrfParams::default()
    };
    let q0 = initial_marginals(&u);
    assert_ne!(q0.argmax(0), q0.argmax(1));
    let q1 = mean_field_step(&q0, &u, &f, &params).unwrap();
    assert_eq!(q1.argmax(0), q1.argmax(1));
    assert_eq!(q1.argmax(0), 1);
    // far stronger coupling makes the parallel update swap both labels
    let swap = CrfParams {
        kernel_weights: [10.0, 10.0],
        ..params
    };
    let q1 = mean_field_step(&q0, &u, &f, &swap).unwrap();
    assert_eq!((q1.argmax(0), q1.argmax(1)), (0, 1));
}

#[test]
fn relabeling_nodes_permutes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let n = 12;
        let labels = 2;
        let positions: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)]).collect();
        let intensities: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let scores: Vec<f64> = (0..labels * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let params = CrfParams {
            num_iterations: 4,
            ..random_params(&mut rng)
        };
        let f = NodeFeatures::scattered(positions.clone(), intensities.clone()).unwrap();
        let u = UnaryField::new(labels, scores.clone()).unwrap();
        let fp = NodeFeatures::scattered(
            perm.iter().map(|&i| positions[i]).collect(),
            perm.iter().map(|&i| intensities[i]).collect(),
        )
        .unwrap();
        let mut sp = vec![0.0; labels * n];
        for l in 0..labels {
            for (k, &i) in perm.iter().enumerate() {
                sp[l * n + k] = scores[l * n + i];
            }
        }
        let q = crf_inference(&u, &f, &params).unwrap();
        let qp = crf_inference(&UnaryField::new(labels, sp).unwrap(), &fp, &params).unwrap();
        for l in 0..labels {
            for (k, &i) in perm.iter().enumerate() {
                assert!((qp.get(k, l) - q.get(i, l)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_on_small_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for (h, w) in [(2, 2), (3, 3), (4, 4), (2, 8)] {
        let (f, u) = random_lattice(h, w, 2, rng.gen());
        let params = CrfParams {
            num_iterations: 3,
            ..random_params(&mut rng)
        };
        let crf = DenseCrf::new(&f, &params).unwrap();
        let coeffs: Vec<f64> = (0..u.scores.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |u: &UnaryField, w: [f64; 2]| -> f64 {
            let (q, _) = crf.infer_traced(u, w).unwrap();
            q.probs.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = crf.infer_traced(&u, params.kernel_weights).unwrap();
        let (g_u, g_w) = trace.backward(&coeffs);
        let eps = 1e-6;
        for k in 0..u.scores.len() {
            let mut up = u.clone();
            up.scores[k] += eps;
            let mut dn = u.clone();
            dn.scores[k] -= eps;
            let fd = (objective(&up, params.kernel_weights) - objective(&dn, params.kernel_weights)) / (2.0 * eps);
            assert!(relative_error(g_u[k], fd) < 1e-3, "unary {k}: {} vs {fd}", g_u[k]);
        }
        for m in 0..2 {
            let mut wp = params.kernel_weights;
            wp[m] += eps;
            let mut wm = params.kernel_weights;
            wm[m] -= eps;
            let fd = (objective(&u, wp) - objective(&u, wm)) / (2.0 * eps);
            assert!(relative_error(g_w[m], fd) < 1e-3, "weight {m}: {} vs {fd}", g_w[m]);
        }
    }
}

fn step_sizes(seed: u64, trials: usize, iters: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CrfParams {
        num_iterations: iters,
        ..CrfParams::default()
    };
    (0..trials)
        .map(|_| {
            let f = NodeFeatures::lattice(8, 8, (0..64).map(|_| rng.gen()).collect()).unwrap();
            // unaries from a noisy foreground map, as the segmenter produces
            let probs: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
            let u = UnaryField::from_foreground_probs(&probs);
            let it = DenseCrf::new(&f, &params).unwrap().iterates(&u).unwrap();
            (1..it.len()).map(|t| it[t].max_abs_diff(&it[t - 1])).collect()
        })
        .collect()
}

#[test]
fn successive_iterates_contract_at_the_damping_rate() {
    for (trial, steps) in step_sizes(61, 20, 25).iter().enumerate() {
        // once the undamped update stops changing, each step halves
        let tail = &steps[8..];
        for w in tail.windows(2) {
            assert!(w[1] <= 0.5 * w[0] * (1.0 + 1e-6), "trial {trial}: {steps:?}");
        }
        assert!(steps[19] < 1e-4, "trial {trial}: {steps:?}");
    }
}

/// At damping 0.5 the iterate change only halves per step once the update
/// saturates, so a 1e-4 step is out of reach after 10 iterations.
#[test]
fn ten_iterations_leave_a_step_above_1e_4_at_half_damping() {
    let tenth: Vec<f64> = step_sizes(61, 20, 10).iter().map(|s| s[9]).collect();
    let worst = tenth.iter().copied().fold(0.0, f64::max);
    println!("largest tenth step {worst:e}");
    assert!(worst > 1e-4);
}

#[test]
fn truncated_filtering_tracks_dense_filtering() {
    let (f, u) = random_lattice(12, 12, 2, 71);
    let deviation = |iters: usize, sigmas: f64| {
        let dense = CrfParams {
            num_iterations: iters,
            ..CrfParams::default()
        };
        let truncated = CrfParams {
            dense_node_limit: 0,
            truncation_sigmas: sigmas,
            ..dense.clone()
        };
        let q = crf_inference(&u, &f, &dense).unwrap();
        crf_inference(&u, &f, &truncated).unwrap().max_abs_diff(&q)
    };
    // support wider than the lattice drops nothing
    assert!(deviation(5, 20.0) < 1e-12);
    assert!(deviation(1, 3.0) < 5e-3);
    let errs: Vec<f64> = [2.0, 3.0, 4.0, 5.0].iter().map(|&s| deviation(5, s)).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[3] < 1e-6);
}

#[test]
fn invalid_parameters_are_rejected() {
    let f = NodeFeatures::lattice(2, 2, vec![0.0; 4]).unwrap();
    for bad in [
        CrfParams {
            spatial_bandwidth: 0.0,
            ..CrfParams::default()
        },
        CrfParams {
            damping: 1.5,
            ..CrfParams::default()
        },
        CrfParams {
            kernel_weights: [-1.0, 0.0],
            ..CrfParams::default()
        },
    ] {
        assert!(DenseCrf::new(&f, &bad).is_err());
    }
    assert!(UnaryField::new(2, vec![0.0, f64::NAN]).is_err());
    let crf = DenseCrf::new(&f, &CrfParams::default()).unwrap();
    assert!(crf.infer(&UnaryField::new(2, vec![0.0; 6]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_output_is_a_distribution(
        seed in any::<u64>(),
        h in 1usize..5,
        w in 1usize..5,
        labels in 2usize..4,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, u) = random_lattice(h, w, labels, seed);
        let params = CrfParams { damping: lambda, ..random_params(&mut rng) };
        let q = mean_field_step(&initial_marginals(&u), &u, &f, &params).unwrap();
        prop_assert!(q.normalization_error() < 1e-9);
        prop_assert!(q.probs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn kernel_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 3),
        b in prop::collection::vec(-10.0f64..10.0, 3),
        t in prop::collection::vec(0.1f64..5.0, 3),
    ) {
        let k = gaussian_kernel_value(&a, &b, &t);
        prop_assert_eq!(k, gaussian_kernel_value(&b, &a, &t));
        prop_assert!((0.0..=1.0).contains(&k));
    }
}
