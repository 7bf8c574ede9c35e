//! Finite-difference verification of analytic gradients.
//!
//! Each check rebuilds the same scalar-valued computation from perturbed
//! inputs at `f64` and compares central differences against one backward
//! pass. The step size and tolerances here are the single source of truth
//! for every gradient test in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, TensorId};
use super::shape::Shape;
use super::Element;

/// Central-difference step, chosen for `f64` evaluation.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for single ops.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Relative-error bound for multi-stage compositions.
pub const COMPOSITE_TOL: f64 = 1e-3;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// One leaf of a checked function.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl CheckInput {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Self {
        CheckInput {
            shape: Shape::new(dims),
            data,
        }
    }
}

/// Relative error with small magnitudes compared absolutely: when both values
/// are below 1e-7 the disagreement is finite-difference noise, not a bug.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-7 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of several flat inputs.
pub fn central_diff(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + h;
            let up = f(&work);
            work[i][j] = orig - h;
            let down = f(&work);
            work[i][j] = orig;
            gi.push((up - down) / (2.0 * h));
        }
        grads.push(gi);
    }
    grads
}

/// Compares the backward pass of `build` against central differences over all
/// inputs. `build` must construct the same scalar node from any leaf values.
pub fn check_scalar_fn(
    name: &str,
    inputs: &[CheckInput],
    tol: f64,
    build: &mut dyn FnMut(&mut Graph<f64>, &[TensorId]) -> TensorId,
) -> CheckReport {
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|ci| {
            g.leaf(ci.shape.clone(), ci.data.clone(), true)
                .expect("check input")
        })
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("check loss is scalar");
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id).to_vec()).collect();

    let shapes: Vec<Shape> = inputs.iter().map(|ci| ci.shape.clone()).collect();
    let mut eval = |xs: &[Vec<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(xs)
            .map(|(s, x)| g.leaf(s.clone(), x.clone(), false).expect("check input"))
            .collect();
        let out = build(&mut g, &ids);
        g.value(out)
    };
    let flat: Vec<Vec<f64>> = inputs.iter().map(|ci| ci.data.clone()).collect();
    let numeric = central_diff(&mut eval, &flat, FD_STEP);

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(max_rel_err(a, n));
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    }
}

/// Like [`check_scalar_fn`], but finite-differences only a pseudo-random
/// sample of `per_input` coordinates from each input. Intended for composed
/// models whose full coordinate sweep would take minutes; every input still
/// contributes checked coordinates.
pub fn check_scalar_fn_sampled(
    name: &str,
    inputs: &[CheckInput],
    tol: f64,
    per_input: usize,
    seed: u64,
    build: &mut dyn FnMut(&mut Graph<f64>, &[TensorId]) -> TensorId,
) -> CheckReport {
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|ci| {
            g.leaf(ci.shape.clone(), ci.data.clone(), true)
                .expect("check input")
        })
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("check loss is scalar");
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id).to_vec()).collect();

    let shapes: Vec<Shape> = inputs.iter().map(|ci| ci.shape.clone()).collect();
    let mut eval = |xs: &[Vec<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(xs)
            .map(|(s, x)| g.leaf(s.clone(), x.clone(), false).expect("check input"))
            .collect();
        let out = build(&mut g, &ids);
        g.value(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Vec<f64>> = inputs.iter().map(|ci| ci.data.clone()).collect();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let n = work[i].len();
        for _ in 0..per_input.min(n) {
            let j = rng.gen_range(0..n);
            let orig = work[i][j];
            work[i][j] = orig + FD_STEP;
            let up = eval(&work);
            work[i][j] = orig - FD_STEP;
            let down = eval(&work);
            work[i][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    }
}

/// Reduces a tensor to a scalar through a fixed non-uniform weighting, so
/// cancellation cannot mask per-element gradient errors.
pub fn scalarize<T: Element>(g: &mut Graph<T>, out: TensorId) -> TensorId {
    let shape = g.shape(out).clone();
    let w: Vec<T> = (0..shape.numel())
        .map(|i| super::elem(0.3 + 0.1 * ((i * 2654435761 % 17) as f64) - 0.8))
        .collect();
    let wid = g.leaf(shape, w, false).expect("weight leaf");
    let prod = g.mul(out, wid).expect("same shape");
    g.sum(prod)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform magnitudes in `[margin, 1]` with random sign: keeps relu/l1-style
/// kinks far from the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Gradient checks for every primitive op, each repeated across `seeds` with
/// fresh random inputs; reports the worst relative error per op.
pub fn primitive_suite(seeds: &[u64]) -> Vec<CheckReport> {
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut run =
        |name: &str,
         make: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<CheckInput>,
         build: &mut dyn FnMut(&mut Graph<f64>, &[TensorId]) -> TensorId| {
            let mut worst = CheckReport {
                name: name.to_string(),
                max_rel_err: 0.0,
                tol: PRIMITIVE_TOL,
            };
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = make(&mut rng);
                let r = check_scalar_fn(name, &inputs, PRIMITIVE_TOL, build);
                worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            }
            reports.push(worst);
        };

    run(
        "add",
        &mut |rng| {
            vec![
                CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0)),
                CheckInput::new(&[4], uniform(rng, 4, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.add(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "sub",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 3, 2, 2], uniform(rng, 24, -1.0, 1.0)),
                CheckInput::new(&[1, 3, 1, 1], uniform(rng, 3, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.sub(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "mul",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 2, 3, 3], uniform(rng, 36, -1.0, 1.0)),
                CheckInput::new(&[2, 1, 3, 3], uniform(rng, 18, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.mul(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "div",
        &mut |rng| {
            vec![
                CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0)),
                CheckInput::new(&[3, 4], away_from_zero(rng, 12, 0.4)),
            ]
        },
        &mut |g, ids| {
            let y = g.div(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "scale_add_scalar",
        &mut |rng| vec![CheckInput::new(&[5], uniform(rng, 5, -1.0, 1.0))],
        &mut |g, ids| {
            let y = g.scale(ids[0], -1.7);
            let y = g.add_scalar(y, 0.4);
            scalarize(g, y)
        },
    );
    run(
        "clamp_min",
        &mut |rng| vec![CheckInput::new(&[8], away_from_zero(rng, 8, 0.3))],
        &mut |g, ids| {
            // threshold 0.05: inputs are at least 0.25 away on either side
            let y = g.clamp_min(ids[0], 0.05);
            scalarize(g, y)
        },
    );
    run(
        "matmul",
        &mut |rng| {
            vec![
                CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0)),
                CheckInput::new(&[4, 2], uniform(rng, 8, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "transpose_reshape",
        &mut |rng| vec![CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0))],
        &mut |g, ids| {
            let t = g.transpose2(ids[0]).unwrap();
            let r = g.reshape(t, &[2, 6]).unwrap();
            scalarize(g, r)
        },
    );
    run(
        "concat",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 3], uniform(rng, 6, -1.0, 1.0)),
                CheckInput::new(&[2, 2], uniform(rng, 4, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.concat(&[ids[0], ids[1]], 1).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "relu",
        &mut |rng| vec![CheckInput::new(&[10], away_from_zero(rng, 10, 0.05))],
        &mut |g, ids| {
            let y = g.relu(ids[0]);
            scalarize(g, y)
        },
    );
    run(
        "sigmoid",
        &mut |rng| vec![CheckInput::new(&[10], uniform(rng, 10, -3.0, 3.0))],
        &mut |g, ids| {
            let y = g.sigmoid(ids[0]);
            scalarize(g, y)
        },
    );
    run(
        "tanh",
        &mut |rng| vec![CheckInput::new(&[10], uniform(rng, 10, -2.0, 2.0))],
        &mut |g, ids| {
            let y = g.tanh(ids[0]);
            scalarize(g, y)
        },
    );
    run(
        "softmax",
        &mut |rng| vec![CheckInput::new(&[3, 5], uniform(rng, 15, -2.0, 2.0))],
        &mut |g, ids| {
            let y = g.softmax(ids[0], 1).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "conv2d_s1",
        &mut |rng| {
            vec![
                CheckInput::new(&[1, 2, 5, 5], uniform(rng, 50, -1.0, 1.0)),
                CheckInput::new(&[3, 2, 3, 3], uniform(rng, 54, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 1).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "conv2d_s2",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 2, 6, 6], uniform(rng, 144, -1.0, 1.0)),
                CheckInput::new(&[2, 2, 3, 3], uniform(rng, 36, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 2, 1).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "adaptive_avg_pool",
        &mut |rng| vec![CheckInput::new(&[1, 2, 5, 5], uniform(rng, 50, -1.0, 1.0))],
        &mut |g, ids| {
            let y = g.adaptive_avg_pool(ids[0], 2, 2).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "nearest_upsample",
        &mut |rng| vec![CheckInput::new(&[1, 2, 3, 3], uniform(rng, 18, -1.0, 1.0))],
        &mut |g, ids| {
            let y = g.nearest_upsample(ids[0], 2).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "batch_norm_train",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 3, 4, 4], uniform(rng, 96, -1.0, 1.0)),
                CheckInput::new(&[3], uniform(rng, 3, 0.5, 1.5)),
                CheckInput::new(&[3], uniform(rng, 3, -0.5, 0.5)),
            ]
        },
        &mut |g, ids| {
            let (y, _) = g
                .batch_norm(ids[0], ids[1], ids[2], None, true, 1e-5)
                .unwrap();
            scalarize(g, y)
        },
    );
    run(
        "batch_norm_eval",
        &mut |rng| {
            vec![
                CheckInput::new(&[2, 2, 3, 3], uniform(rng, 36, -1.0, 1.0)),
                CheckInput::new(&[2], uniform(rng, 2, 0.5, 1.5)),
                CheckInput::new(&[2], uniform(rng, 2, -0.5, 0.5)),
            ]
        },
        &mut |g, ids| {
            let mean = [0.1, -0.2];
            let var = [0.8, 1.3];
            let (y, _) = g
                .batch_norm(ids[0], ids[1], ids[2], Some((&mean, &var)), false, 1e-5)
                .unwrap();
            scalarize(g, y)
        },
    );
    run(
        "embedding",
        &mut |rng| vec![CheckInput::new(&[5, 3], uniform(rng, 15, -1.0, 1.0))],
        &mut |g, ids| {
            let y = g.embedding(ids[0], &[0, 3, 3, 1]).unwrap();
            scalarize(g, y)
        },
    );
    run(
        "sum_mean",
        &mut |rng| vec![CheckInput::new(&[7], uniform(rng, 7, -1.0, 1.0))],
        &mut |g, ids| {
            let s = g.sum(ids[0]);
            let m = g.mean(ids[0]);
            g.add(s, m).unwrap()
        },
    );
    run(
        "mse_loss",
        &mut |rng| {
            vec![
                CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0)),
                CheckInput::new(&[3, 4], uniform(rng, 12, -1.0, 1.0)),
            ]
        },
        &mut |g, ids| g.mse_loss(ids[0], ids[1]).unwrap(),
    );
    run(
        "l1_loss",
        &mut |rng| {
            // keep pred - target away from the |.| kink
            let t = uniform(rng, 12, -1.0, 1.0);
            let p: Vec<f64> = t
                .iter()
                .zip(away_from_zero(rng, 12, 0.2))
                .map(|(&tv, d)| tv + d)
                .collect();
            vec![CheckInput::new(&[3, 4], p), CheckInput::new(&[3, 4], t)]
        },
        &mut |g, ids| g.l1_loss(ids[0], ids[1]).unwrap(),
    );
    run(
        "cross_entropy",
        &mut |rng| vec![CheckInput::new(&[4, 6], uniform(rng, 24, -2.0, 2.0))],
        &mut |g, ids| g.cross_entropy(ids[0], &[1, 0, 5, 2]).unwrap(),
    );
    run(
        "cross_entropy_sum",
        &mut |rng| vec![CheckInput::new(&[3, 4], uniform(rng, 12, -2.0, 2.0))],
        &mut |g, ids| g.cross_entropy_sum(ids[0], &[3, 1, 0]).unwrap(),
    );

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial() {
        // f(x, y) = x0^2 * y0 + x1
        let mut f = |v: &[Vec<f64>]| v[0][0] * v[0][0] * v[1][0] + v[0][1];
        let grads = central_diff(&mut f, &[vec![2.0, 5.0], vec![3.0]], 1e-5);
        assert!((grads[0][0] - 12.0).abs() < 1e-6);
        assert!((grads[0][1] - 1.0).abs() < 1e-6);
        assert!((grads[1][0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_ignores_joint_noise() {
        assert_eq!(rel_err(1e-9, -1e-9), 0.0);
        assert!(rel_err(1.0, 1.1) > 0.09);
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        // Ten seeds per op, tolerance 1e-4.
        let seeds: Vec<u64> = (0..10).collect();
        for report in primitive_suite(&seeds) {
            assert!(
                report.passed(),
                "{}: max rel err {} > {}",
                report.name,
                report.max_rel_err,
                report.tol
            );
        }
    }
}
