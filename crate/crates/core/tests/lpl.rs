use std::time::Instant;

use dualcorenet::lpl::{
    counts, lpl_loss, parameter_count, softmax2, ConvModule, LayerSpec, LplConfig, LplPath, ModuleKind, ModuleSpec,
};
use dualcorenet::nn::{Initializer, ParamBuilder, ParamStore, Tape};
use dualcorenet::tensor::{FeatureMap, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .unwrap()
}

fn build(config: &LplConfig, seed: u64) -> (LplPath, ParamStore) {
    let mut params = ParamStore::new();
    let mut init = Initializer::new(seed);
    let path = LplPath::new(&mut ParamBuilder::new(&mut params, &mut init), config).unwrap();
    (path, params)
}

fn module(kind: ModuleKind, cin: usize, cout: usize, residual: bool) -> (ConvModule, ParamStore) {
    let mut params = ParamStore::new();
    let mut init = Initializer::new(5);
    let spec = ModuleSpec {
        kind,
        residual,
        out_channels: cout,
    };
    let m = ConvModule::new(&mut ParamBuilder::new(&mut params, &mut init), spec, cin).unwrap();
    (m, params)
}

#[test]
fn full_forward_yields_the_documented_feature_shapes_quickly() {
    let (path, params) = build(&LplConfig::full(), 1);
    let image = FeatureMap::new(random_map(224, 224, 1, 2).tensor().map(|v| v.abs())).unwrap();
    let start = Instant::now();
    let out = path.infer(&params, &image).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("full LPL forward {secs:.2}s");
    assert_eq!(out.trunk.dims(), (28, 28, 728));
    assert_eq!(out.stem.dims(), (224, 224, 16));
    let p = out.probabilities();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
    assert!(secs < 5.0, "forward took {secs:.2}s");
}

#[test]
fn layer_shapes_follow_the_reduction_schedule() {
    let shapes = LplConfig::full().layer_shapes().unwrap();
    let spatial: Vec<usize> = shapes.iter().map(|s| s.0).collect();
    assert_eq!(spatial, vec![224, 112, 56, 28, 28, 28, 28, 28, 28, 28, 1]);
    assert_eq!(shapes[0].2, 16);
    for s in &shapes[3..10] {
        assert_eq!(*s, (28, 28, 728));
    }
    let tiny = LplConfig::tiny().layer_shapes().unwrap();
    assert_eq!(tiny[9], (8, 8, 64));
}

#[test]
fn trunk_modules_preserve_shape_and_reduction_halves_it() {
    for kind in [ModuleKind::A, ModuleKind::B, ModuleKind::C] {
        let (m, p) = module(kind, 728, 728, true);
        let y = m.apply(&p, &random_map(28, 28, 728, 3)).unwrap();
        assert_eq!(y.dims(), (28, 28, 728), "{kind:?}");
    }
    let (m, p) = module(ModuleKind::D, 32, 48, true);
    assert_eq!(m.apply(&p, &random_map(56, 56, 32, 4)).unwrap().dims(), (28, 28, 48));
    assert!(m.apply(&p, &random_map(56, 56, 31, 4)).is_err());
}

#[test]
fn zeroed_residual_modules_are_the_identity() {
    for kind in [ModuleKind::A, ModuleKind::B, ModuleKind::C] {
        let (m, mut p) = module(kind, 16, 16, true);
        p.zero_all();
        let x = random_map(9, 9, 16, 6);
        assert_eq!(m.apply(&p, &x).unwrap(), x, "{kind:?}");
    }
}

#[test]
fn parameter_counts_are_exact() {
    for config in [LplConfig::tiny(), LplConfig::micro(16), LplConfig::full()] {
        let (_, params) = build(&config, 0);
        assert_eq!(parameter_count(&config), params.num_scalars());
    }
    let empty = LplConfig {
        layers: vec![],
        ..LplConfig::tiny()
    };
    assert_eq!(parameter_count(&empty), 0);

    let c = 728;
    assert_eq!(counts::separable(c, c, 3, 3), c * (9 + c) + c);
    assert!(counts::separable(c, c, 3, 3) < 9 * c * c);

    let mut more = LplConfig::tiny();
    let a = ModuleSpec {
        kind: ModuleKind::A,
        residual: true,
        out_channels: more.trunk_channels,
    };
    let before = parameter_count(&more);
    let head = more.layers.pop().unwrap();
    more.layers.push(LayerSpec::Module(a));
    more.layers.push(head);
    assert!(parameter_count(&more) > before);
}

#[test]
fn inference_is_deterministic_and_dropout_is_seeded() {
    let (path, params) = build(&LplConfig::tiny(), 2);
    let image = random_map(64, 64, 1, 7);
    let a = path.infer(&params, &image).unwrap();
    let b = path.infer(&params, &image).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.trunk, b.trunk);

    let logits = |seed: u64| {
        let mut tape = Tape::new(&params);
        let x = tape.input(image.tensor().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = path.forward(&mut tape, x, Some(&mut rng));
        tape.value(out.logits).data().to_vec()
    };
    assert_eq!(logits(1), logits(1));
    assert_ne!(logits(1), logits(2));
}

#[test]
fn cross_entropy_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((lpl_loss(&[[0.0, 0.0]], &[1]).unwrap() - ln2).abs() < 1e-12);
    assert!(lpl_loss(&[[-800.0, 800.0]], &[1]).unwrap() < 1e-6);
    assert!((lpl_loss(&[[0.0, 0.0], [3.0, 3.0]], &[1, 0]).unwrap() - 2.0 * ln2).abs() < 1e-12);
    // clamped at 1 - 1e-7
    assert!(lpl_loss(&[[0.0, 60.0]], &[1]).unwrap() < 1e-6);
    assert!(lpl_loss(&[[0.0, 0.0]], &[1, 0]).is_err());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, s in -100.0f64..100.0) {
        let p = softmax2([a, b]);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let q = softmax2([a + s, b + s]);
        prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
    }

    #[test]
    fn separable_is_cheaper_than_dense(c in 2usize..1024, k in 2usize..8) {
        prop_assert!(counts::separable(c, c, k, k) < counts::conv(c, c, k, k, true));
    }
}
