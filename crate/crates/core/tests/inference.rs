use hmcseg::inference::*;
use hmcseg::model::{build_model, ModelConfig, WeightVector};
use hmcseg::rng::stream;
use hmcseg::tensor::{DropoutMode, Tensor};
use rand::Rng;

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, "image", 0);
    Tensor::from_fn(vec![1, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn same_seed_same_weights_and_layout() {
    let cfg = ModelConfig::default();
    let (m1, w1) = build_model(&cfg, 7).unwrap();
    let (m2, w2) = build_model(&cfg, 7).unwrap();
    let (_, w3) = build_model(&cfg, 8).unwrap();
    assert_eq!(w1.values(), w2.values());
    assert_ne!(w1.values(), w3.values());
    assert_eq!(m1.layout(), m2.layout());
    assert_eq!(m1.parameter_count(), w1.len());
}

#[test]
fn output_is_a_distribution_per_pixel() {
    let cfg = ModelConfig {
        classes: 3,
        ..ModelConfig::default()
    };
    let (model, w) = build_model(&cfg, 1).unwrap();
    let p = model.predict(&w, &image(32, 32, 1), DropoutMode::Off).unwrap();
    assert_eq!(p.classes(), 3);
    assert_eq!(p.shape(), &[32, 32]);
    for i in 0..p.voxels() {
        let s: f64 = (0..3).map(|c| p.get(c, i)).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!((0..3).all(|c| p.get(c, i) >= 0.0));
    }
}

#[test]
fn rejects_bad_inputs() {
    let (model, w) = build_model(&ModelConfig::default(), 1).unwrap();
    // not divisible by the pooling factor
    assert!(model.predict(&w, &image(30, 30, 2), DropoutMode::Off).is_err());
    let (_, other) = build_model(&ModelConfig::mlp(&[2, 8, 2]), 1).unwrap();
    assert!(model.predict(&other, &image(32, 32, 2), DropoutMode::Off).is_err());
    assert!(build_model(&ModelConfig { dropout_p: 1.0, ..ModelConfig::default() }, 0).is_err());
}

#[test]
fn zero_rate_dropout_is_the_identity() {
    let (model, w) = build_model(&ModelConfig::default(), 2).unwrap();
    assert!(!model.has_dropout());
    let x = image(32, 32, 3);
    let det = model.predict(&w, &x, DropoutMode::Off).unwrap();
    let sampled = model.predict_sampled(&w, &x, &mut stream(1, "mask", 0)).unwrap();
    assert_eq!(det, sampled);
    assert!(mc_dropout_predict(&model, &w, &x, 4, &mut stream(1, "mask", 0)).is_err());
}

#[test]
fn dropout_masks_change_the_prediction() {
    let cfg = ModelConfig {
        dropout_p: 0.5,
        ..ModelConfig::default()
    };
    let (model, w) = build_model(&cfg, 3).unwrap();
    let x = image(32, 32, 4);
    let mut rng = stream(2, "mask", 0);
    let a = model.predict_sampled(&w, &x, &mut rng).unwrap();
    let b = model.predict_sampled(&w, &x, &mut rng).unwrap();
    assert_ne!(a, b);
    assert_eq!(
        model.predict(&w, &x, DropoutMode::Off).unwrap(),
        model.predict(&w, &x, DropoutMode::Off).unwrap()
    );
}

#[test]
fn mc_dropout_is_reproducible_and_converges() {
    let cfg = ModelConfig {
        dropout_p: 0.5,
        ..ModelConfig::default()
    };
    let (model, w) = build_model(&cfg, 5).unwrap();
    let x = image(16, 16, 5);
    let run = |m, seed| mc_dropout_predict(&model, &w, &x, m, &mut stream(seed, "mc", 0)).unwrap();
    assert_eq!(run(8, 1), run(8, 1));
    let max_diff = |a: &ProbabilityMap, b: &ProbabilityMap| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let (small, big, bigger) = (run(5, 2), run(100, 3), run(200, 4));
    let spread = max_diff(&big, &bigger);
    assert!(spread < 0.1, "{spread}");
    assert!(spread < max_diff(&small, &bigger));
}

#[test]
fn ensemble_of_one_is_that_member() {
    let (model, w) = build_model(&ModelConfig::default(), 6).unwrap();
    let x = image(16, 16, 6);
    let direct = model.predict(&w, &x, DropoutMode::Off).unwrap();
    let ens = ensemble_predict(&model, std::slice::from_ref(&w), &x).unwrap();
    for (a, b) in direct.data().iter().zip(ens.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(ensemble_predict(&model, &[], &x).is_err());
}

#[test]
fn ensemble_order_does_not_matter() {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg, 0).unwrap().0;
    let members: Vec<WeightVector> = (10..14).map(|s| build_model(&cfg, s).unwrap().1).collect();
    let x = image(16, 16, 7);
    let a = ensemble_predict(&model, &members, &x).unwrap();
    let mut rev = members.clone();
    rev.reverse();
    let b = ensemble_predict(&model, &rev, &x).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
    let maps: Vec<_> = members.iter().map(|m| model.predict(m, &x, DropoutMode::Off).unwrap()).collect();
    let mean = mean_maps(&maps).unwrap();
    assert_eq!(mean, a);
}

fn map(classes: usize, voxels: &[&[f64]]) -> ProbabilityMap {
    let n = voxels.len();
    let mut data = vec![0.0; classes * n];
    for (i, v) in voxels.iter().enumerate() {
        for c in 0..classes {
            data[c * n + i] = v[c];
        }
    }
    ProbabilityMap::new(classes, vec![n], data).unwrap()
}

#[test]
fn entropy_examples() {
    let p = map(4, &[&[0.25; 4], &[1.0, 0.0, 0.0, 0.0], &[0.5, 0.5, 0.0, 0.0]]);
    let cat = entropy_map(&p, EntropyMode::Categorical).unwrap();
    let ln2 = 2f64.ln();
    assert!((cat.data[0] - 4f64.ln()).abs() < 1e-12);
    assert_eq!(cat.data[1], 0.0);
    assert!((cat.data[2] - ln2).abs() < 1e-12);
    let norm = cat.normalized(4);
    assert!((norm[0] - 1.0).abs() < 1e-12);
    assert!((norm[2] - 0.5).abs() < 1e-12);

    let bin = entropy_map(&p, EntropyMode::Binary { class: 1 }).unwrap();
    // binary entropy of 1/4
    let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
    assert!((bin.data[0] - h).abs() < 1e-12);
    assert!((bin.data[2] - ln2).abs() < 1e-12);
    assert!(entropy_map(&p, EntropyMode::Binary { class: 4 }).is_err());
    assert_eq!(xlogx(0.0), 0.0);
}

#[test]
fn argmax_examples() {
    let p = map(3, &[&[0.2, 0.5, 0.3], &[0.6, 0.2, 0.2], &[0.4, 0.4, 0.2]]);
    assert_eq!(argmax_segmentation(&p).data(), &[1, 0, 0]);
    let y = LabelMap::new(vec![3], vec![2, 0, 1]).unwrap();
    assert_eq!(argmax_segmentation(&ProbabilityMap::one_hot(&y, 3).unwrap()), y);
}
