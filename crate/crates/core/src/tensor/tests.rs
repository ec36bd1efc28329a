use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn eval_out(g: &Graph, b: &Bindings<'_, f64>, name: &str) -> Tensor<f64> {
    evaluate(g, b, &EvalOptions::default())
        .unwrap()
        .into_output(g, name)
        .unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::<f32>::scalar(1.0).len(), 1);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.softmax(x);
    g.set_output("y", y);
    let t = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
    let out = eval_out(&g, &Bindings::new().with("x", &t), "y");
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn leaky_relu_negative_slope() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.leaky_relu(x, 0.01);
    g.set_output("y", y);
    let t = Tensor::new(vec![1], vec![-1.0]).unwrap();
    let out = eval_out(&g, &Bindings::new().with("x", &t), "y");
    assert!((out.item() + 0.01).abs() < 1e-15);
}

#[test]
fn unit_kernel_conv_doubles_ones() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w", &[1, 1, 1, 1]);
    let y = g.conv2d(x, w, 0);
    g.set_output("y", y);
    let img = Tensor::full(vec![1, 3, 3], 1.0);
    let k = Tensor::full(vec![1, 1, 1, 1], 2.0);
    let out = eval_out(&g, &Bindings::new().with("x", &img).with("w", &k), "y");
    assert_eq!(out.shape(), &[1, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 2.0));
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let w = g.param("w", &[]);
    let y = g.mul(w, w);
    g.set_output("y", y);
    let t = Tensor::scalar(3.0f64);
    let b = Bindings::new().with("w", &t);
    let ev = evaluate(&g, &b, &EvalOptions::default()).unwrap();
    let grads = backward(&g, &ev, "y").unwrap();
    assert_eq!(grads.get("w").unwrap().item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let w = g.param("w", &[4, 1]);
    let s = g.softmax(w);
    let y = g.sum(s);
    g.set_output("y", y);
    let t = Tensor::new(vec![4, 1], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
    let ev = evaluate(&g, &Bindings::new().with("w", &t), &EvalOptions::default()).unwrap();
    let grads = backward(&g, &ev, "y").unwrap();
    assert!(grads.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_evaluations() {
    let mut g = Graph::new();
    let w = g.param("w", &[2]);
    let y = g.scale(w, 2.0);
    g.set_output("y", y);
    let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
    let ev = evaluate(&g, &Bindings::new().with("w", &t), &EvalOptions::default()).unwrap();
    assert!(matches!(backward(&g, &ev, "y"), Err(Error::NotScalar(_))));

    let mut other = Graph::new();
    let w2 = other.param("w", &[2]);
    let s = other.sum(w2);
    other.set_output("y", s);
    assert!(matches!(backward(&other, &ev, "y"), Err(Error::ForeignEvaluation)));
}

#[test]
fn unbound_input_and_shape_errors() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w", &[2, 2]);
    let y = g.matmul(w, x);
    g.set_output("y", y);
    let wt = Tensor::<f64>::zeros(vec![2, 2]);
    assert!(matches!(
        evaluate(&g, &Bindings::new().with("w", &wt), &EvalOptions::default()),
        Err(Error::UnboundInput(_))
    ));
    let bad = Tensor::<f64>::zeros(vec![3, 1]);
    assert!(matches!(
        evaluate(&g, &Bindings::new().with("w", &wt).with("x", &bad), &EvalOptions::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn non_finite_values_are_reported_when_checked() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.log(x);
    g.set_output("y", y);
    let t = Tensor::new(vec![1], vec![-1.0f64]).unwrap();
    let b = Bindings::new().with("x", &t);
    let res = evaluate(&g, &b, &EvalOptions::default().checked(true));
    assert!(matches!(res, Err(Error::NonFinite { .. })));
    assert!(evaluate(&g, &b, &EvalOptions::default().checked(false)).is_ok());
}

#[test]
fn dropout_is_inverted_and_reproducible() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.dropout(x, 0.5);
    g.set_output("y", y);
    let t = Tensor::<f32>::full(vec![1, 64, 64], 1.0);
    let b = Bindings::new().with("x", &t);
    let run = |seed| {
        evaluate(&g, &b, &EvalOptions::default().with_dropout(DropoutMode::Sample { seed }))
            .unwrap()
            .into_output(&g, "y")
            .unwrap()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
    assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    let mean: f32 = a.data().iter().sum::<f32>() / a.len() as f32;
    assert!((mean - 1.0).abs() < 0.05);
    let off = evaluate(&g, &b, &EvalOptions::default()).unwrap().into_output(&g, "y").unwrap();
    assert_eq!(off, t);
}

#[test]
fn evaluation_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w", &[4, 2, 3, 3]);
    let c = g.conv2d(x, w, 1);
    let n = g.instance_norm(c, 1e-5);
    let d = g.dropout(n, 0.3);
    let s = g.softmax(d);
    g.set_output("y", s);
    let xt = Tensor::<f32>::from_fn(vec![2, 8, 8], |_| rng.random());
    let wt = Tensor::<f32>::from_fn(vec![4, 2, 3, 3], |_| rng.random());
    let b = Bindings::new().with("x", &xt).with("w", &wt);
    let opts = EvalOptions::default().with_dropout(DropoutMode::Sample { seed: 9 });
    let a = evaluate(&g, &b, &opts).unwrap().into_output(&g, "y").unwrap();
    let bb = evaluate(&g, &b, &opts).unwrap().into_output(&g, "y").unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&bb));
    // every voxel is a categorical distribution
    let n = 64;
    for i in 0..n {
        let total: f32 = (0..4).map(|ch| a.data()[ch * n + i]).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!((0..4).all(|ch| a.data()[ch * n + i] > 0.0 && a.data()[ch * n + i] < 1.0));
    }
}

#[test]
fn quadratic_graph_gradcheck_is_exact() {
    let mut g = Graph::new();
    let w = g.param("w", &[5]);
    let sq = g.mul(w, w);
    let y = g.sum(sq);
    g.set_output("y", y);
    let point = BTreeMap::from([(
        "w".to_owned(),
        Tensor::new(vec![5], vec![0.3, -1.0, 2.5, 0.7, -0.2]).unwrap(),
    )]);
    let r = finite_diff_check(&g, &point, "y", 1e-4, &EvalOptions::default(), None).unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert_eq!(r.checked, 5);
}

#[test]
fn gradcheck_rejects_out_of_range_eps() {
    let mut g = Graph::new();
    let w = g.param("w", &[]);
    let y = g.sum(w);
    g.set_output("y", y);
    let point = BTreeMap::from([("w".to_owned(), Tensor::scalar(1.0))]);
    assert!(finite_diff_check(&g, &point, "y", 1e-2, &EvalOptions::default(), None).is_err());
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let cases = primitive_suite(100, 42).unwrap();
    assert_eq!(cases.len(), 12);
    for c in &cases {
        assert!(c.max_rel_error < 1e-4, "{}: max relative error {:e}", c.name, c.max_rel_error);
    }
}
