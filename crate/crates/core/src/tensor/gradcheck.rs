use std::collections::BTreeMap;

use super::{backward, evaluate, Bindings, EvalOptions, Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max (|analytic - central| - noise)⁺ / (|analytic| + |central| + 1e-12)`
    /// where `noise = 16 ε max(|f|, 1) / eps` bounds the rounding error of
    /// the central difference itself.
    pub max_rel_error: f64,
    /// The same maximum without the rounding allowance, over entries whose
    /// gradient is at least `1e3 · noise`.
    pub max_raw_rel_error: f64,
    /// Parameter name and flat index attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar output `output` against
/// central finite differences, in 64-bit.
///
/// `point` binds every input and parameter. When `max_per_param` is set,
/// only that many evenly spaced entries of each parameter are perturbed.
/// Dropout masks are reproduced exactly across the perturbed evaluations
/// because they are keyed by the seed in `opts`.
pub fn finite_diff_check(
    graph: &Graph,
    point: &BTreeMap<String, Tensor<f64>>,
    output: &str,
    eps: f64,
    opts: &EvalOptions,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let opts = opts.checked(true);
    let bind = |p: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut b = Bindings::new();
        for (k, v) in p {
            b.bind(k, v);
        }
        Ok(evaluate(graph, &b, &opts)?.output(graph, output)?.item())
    };

    let analytic = {
        let mut b = Bindings::new();
        for (k, v) in point {
            b.bind(k, v);
        }
        let ev = evaluate(graph, &b, &opts)?;
        backward(graph, &ev, output)?
    };

    let mut work = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_raw_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, shape) in graph.parameters() {
        let len: usize = shape.iter().product();
        let indices: Vec<usize> = match max_per_param {
            Some(m) if m < len => (0..m).map(|j| j * len / m).collect(),
            _ => (0..len).collect(),
        };
        let grad = analytic.get(name).expect("gradient for every parameter");
        for i in indices {
            let orig = work[name].data()[i];
            work.get_mut(name).expect("bound").data_mut()[i] = orig + eps;
            let up = bind(&work)?;
            work.get_mut(name).expect("bound").data_mut()[i] = orig - eps;
            let down = bind(&work)?;
            work.get_mut(name).expect("bound").data_mut()[i] = orig;

            let central = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let noise = 16.0 * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / eps;
            let denom = a.abs() + central.abs() + 1e-12;
            let rel = ((a - central).abs() - noise).max(0.0) / denom;
            if denom >= 1e3 * noise {
                report.max_raw_rel_error = report.max_raw_rel_error.max((a - central).abs() / denom);
            }
            if !rel.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("finite difference of `{name}`[{i}]"),
                });
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.to_owned(), i));
                }
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Worst finite-difference error of one primitive over all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type Builder = fn(&mut Graph) -> super::NodeId;

fn primitive_cases() -> Vec<(&'static str, Builder, Vec<(&'static str, Vec<usize>)>, bool)> {
    vec![
        (
            "matmul",
            |g| {
                let a = g.param("a", &[3, 4]);
                let b = g.param("b", &[4, 2]);
                g.matmul(a, b)
            },
            vec![("a", vec![3, 4]), ("b", vec![4, 2])],
            false,
        ),
        (
            "conv2d",
            |g| {
                let x = g.param("x", &[2, 5, 5]);
                let w = g.param("w", &[3, 2, 3, 3]);
                g.conv2d(x, w, 1)
            },
            vec![("x", vec![2, 5, 5]), ("w", vec![3, 2, 3, 3])],
            false,
        ),
        (
            "max_pool2",
            |g| {
                let x = g.param("x", &[2, 4, 4]);
                g.max_pool2(x)
            },
            vec![("x", vec![2, 4, 4])],
            false,
        ),
        (
            "upsample2+concat",
            |g| {
                let x = g.param("x", &[2, 2, 2]);
                let s = g.param("s", &[1, 4, 4]);
                let u = g.upsample2(x);
                g.concat(u, s)
            },
            vec![("x", vec![2, 2, 2]), ("s", vec![1, 4, 4])],
            false,
        ),
        (
            "leaky_relu",
            |g| {
                let x = g.param("x", &[3, 4]);
                g.leaky_relu(x, 0.01)
            },
            vec![("x", vec![3, 4])],
            false,
        ),
        (
            "softmax",
            |g| {
                let x = g.param("x", &[3, 2, 2]);
                g.softmax(x)
            },
            vec![("x", vec![3, 2, 2])],
            false,
        ),
        (
            "add/sub/mul/div",
            |g| {
                let a = g.param("a", &[6]);
                let b = g.param("b", &[6]);
                let s = g.add(a, b);
                let bb = g.mul(b, b);
                let d = g.sub(s, bb);
                let m = g.mul(d, a);
                g.div(m, b)
            },
            vec![("a", vec![6]), ("b", vec![6])],
            true,
        ),
        (
            "log/clamp/scale/add_scalar",
            |g| {
                let a = g.param("a", &[6]);
                let c = g.clamp_min(a, 1e-12);
                let l = g.log(c);
                let s = g.scale(l, -0.7);
                g.add_scalar(s, 0.3)
            },
            vec![("a", vec![6])],
            true,
        ),
        (
            "sum/mean/sum_spatial",
            |g| {
                let a = g.param("a", &[3, 2, 2]);
                let ss = g.sum_spatial(a);
                let sq = g.mul(ss, ss);
                let m = g.mean(a);
                let t = g.sum(sq);
                g.add(m, t)
            },
            vec![("a", vec![3, 2, 2])],
            false,
        ),
        (
            "channel_scale/channel_bias",
            |g| {
                let x = g.param("x", &[3, 2, 2]);
                let s = g.param("s", &[3]);
                let b = g.param("b", &[3]);
                let y = g.channel_scale(x, s);
                g.channel_bias(y, b)
            },
            vec![("x", vec![3, 2, 2]), ("s", vec![3]), ("b", vec![3])],
            false,
        ),
        (
            "dropout",
            |g| {
                let x = g.param("x", &[2, 4, 4]);
                g.dropout(x, 0.5)
            },
            vec![("x", vec![2, 4, 4])],
            false,
        ),
        (
            "instance_norm",
            |g| {
                let x = g.param("x", &[2, 3, 3]);
                g.instance_norm(x, 1e-5)
            },
            vec![("x", vec![2, 3, 3])],
            false,
        ),
    ]
}

/// Checks every primitive op on `trials` random points.
///
/// Each case reduces the op output to `sum(op(x) * probe)` with a random
/// probe so that every output element carries a distinct weight. Dropout
/// masks are held fixed by a constant seed.
pub fn primitive_suite(trials: usize, seed: u64) -> Result<Vec<PrimitiveCheck>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize], positive: bool| {
        Tensor::from_fn(shape.to_vec(), |_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if positive {
                v.abs() + 0.5
            } else {
                v
            }
        })
    };
    let opts = EvalOptions::default().with_dropout(super::DropoutMode::Sample { seed: 5 });
    let mut out = Vec::new();
    for (name, build, shapes, positive) in primitive_cases() {
        let mut bare = Graph::new();
        let y = build(&mut bare);
        bare.set_output("y", y);
        let mut g = Graph::new();
        let y = build(&mut g);
        let probe = g.input("probe");
        let m = g.mul(y, probe);
        let s = g.sum(m);
        g.set_output("loss", s);

        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let mut point: BTreeMap<String, Tensor<f64>> = shapes
                .iter()
                .map(|(n, shape)| ((*n).to_owned(), random(shape, positive)))
                .collect();
            let shape = {
                let mut b = Bindings::new();
                for (k, v) in &point {
                    b.bind(k, v);
                }
                evaluate(&bare, &b, &opts)?.output(&bare, "y")?.shape().to_vec()
            };
            point.insert("probe".to_owned(), random(&shape, false));
            worst = worst.max(finite_diff_check(&g, &point, "loss", 1e-6, &opts, None)?.max_rel_error);
        }
        out.push(PrimitiveCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
