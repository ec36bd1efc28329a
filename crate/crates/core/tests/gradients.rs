use hmcseg::energy::{minibatch_gradient, sample_loss_gradient};
use hmcseg::inference::LabelMap;
use hmcseg::model::{build_model, ModelConfig};
use hmcseg::synth::{render_scene, SceneConfig};
use hmcseg::tensor::{primitive_suite, DropoutMode, Tensor};
use hmcseg::rng::stream;
use rand::Rng;

fn small_scene(size: usize, seed: u64) -> hmcseg::synth::Sample {
    let cfg = SceneConfig {
        height: size,
        width: size,
        ..SceneConfig::default()
    };
    render_scene(&cfg, &mut stream(seed, "grad-scene", 0))
}

#[test]
fn every_primitive_passes_the_finite_difference_check() {
    for c in primitive_suite(20, 7).unwrap() {
        assert!(c.max_rel_error < 1e-4, "{}: {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn mini_unet_loss_gradient_on_8x8_input() {
    let (model, w) = build_model(&ModelConfig::default(), 3).unwrap();
    let s = small_scene(8, 1);
    let image: Tensor<f64> = s.image.cast();
    let r = model.loss_gradcheck(&w, &image, &s.label, 0, Some(48)).unwrap();
    assert!(r.checked > 500);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn mini_unet_loss_gradient_with_fixed_dropout_mask() {
    let cfg = ModelConfig {
        dropout_p: 0.5,
        ..ModelConfig::default()
    };
    let (model, w) = build_model(&cfg, 4).unwrap();
    assert!(model.has_dropout());
    let s = small_scene(8, 2);
    let r = model.loss_gradcheck(&w, &s.image.cast(), &s.label, 99, Some(24)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn mlp_loss_gradient_is_exact_everywhere() {
    let (model, w) = build_model(&ModelConfig::mlp(&[2, 8, 2]), 5).unwrap();
    assert_eq!(model.parameter_count(), 42);
    let mut rng = stream(5, "mlp-points", 0);
    let image = Tensor::from_fn(vec![2, 6], |_| rng.random_range(-1.0..1.0));
    let labels = LabelMap::new(vec![6], (0..6).map(|i| i % 2).collect()).unwrap();
    let r = model.loss_gradcheck(&w, &image, &labels, 0, None).unwrap();
    assert_eq!(r.checked, 42);
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

/// Mean batch loss plus the prior, recomputed independently in f64.
fn reference_energy(
    model: &hmcseg::model::Model,
    params: &[Tensor<f64>],
    batch: &[hmcseg::synth::Sample],
    lambda: f64,
) -> f64 {
    let mut loss = 0.0;
    for s in batch {
        let onehot = model.one_hot::<f64>(&s.label).unwrap();
        loss += sample_loss_gradient(model, params, &s.image.cast(), &onehot, DropoutMode::Off)
            .unwrap()
            .0;
    }
    let norm: f64 = params.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    loss / batch.len() as f64 + 0.5 * lambda * norm
}

#[test]
fn minibatch_gradient_matches_finite_differences_of_the_energy() {
    let (model, w) = build_model(&ModelConfig::default(), 6).unwrap();
    let batch: Vec<_> = (0..3).map(|i| small_scene(8, 10 + i)).collect();
    let lambda = 0.05;
    let g = minibatch_gradient::<f64>(&model, &w, &batch, lambda, DropoutMode::Off).unwrap();

    let base = w.tensors::<f64>();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (k, t) in base.iter().enumerate() {
        for i in (0..t.len()).step_by((t.len() / 6).max(1)) {
            let mut up = base.clone();
            up[k].data_mut()[i] += eps;
            let mut down = base.clone();
            down[k].data_mut()[i] -= eps;
            let fd = (reference_energy(&model, &up, &batch, lambda) - reference_energy(&model, &down, &batch, lambda))
                / (2.0 * eps);
            let a = g.gradient[flat + i];
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-12));
        }
        flat += t.len();
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn identical_batch_elements_give_the_single_sample_gradient() {
    let (model, w) = build_model(&ModelConfig::default(), 8).unwrap();
    let s = small_scene(8, 3);
    let one = minibatch_gradient::<f64>(&model, &w, std::slice::from_ref(&s), 0.0, DropoutMode::Off).unwrap();
    let many = minibatch_gradient::<f64>(&model, &w, &[s.clone(), s.clone(), s], 0.0, DropoutMode::Off).unwrap();
    for (a, b) in one.gradient.iter().zip(&many.gradient) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
