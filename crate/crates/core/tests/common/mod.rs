//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use bsvae::autodiff::{Tape, Tensor, Var};
use bsvae::objectives::{loss_and_gradients, loss_value, ObjectiveConfig};
use bsvae::VaeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Builds `Σ w ⊙ op(inputs)` for fixed weights `w`; returns the value and,
/// when `grad` is set, the gradient with respect to all inputs flattened.
fn weighted_op(
    shapes: &[Vec<usize>],
    flat: &[f64],
    weights_seed: u64,
    op: &dyn Fn(&Tape, &[Var]) -> Var,
    grad: bool,
) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let mut at = 0;
    let vars: Vec<Var> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            tape.param(t)
        })
        .collect();
    let out = op(&tape, &vars);
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, uniform(&mut rng(weights_seed), n, -1.0, 1.0)).unwrap());
    let loss = tape.sum(tape.mul(out, w).unwrap());
    let value = tape.item(loss).unwrap();
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let flat_grad = vars.iter().flat_map(|v| g.get(*v).unwrap().data().to_vec()).collect();
    (value, flat_grad)
}

/// Relative error between the tape gradient of `op` and central
/// differences, at one input point.
pub fn op_gradient_error(
    shapes: &[Vec<usize>],
    flat: &[f64],
    weights_seed: u64,
    h: f64,
    op: impl Fn(&Tape, &[Var]) -> Var,
) -> f64 {
    let (_, analytic) = weighted_op(shapes, flat, weights_seed, &op, true);
    let numeric = central_difference(|x| weighted_op(shapes, x, weights_seed, &op, false).0, flat, h);
    relative_error(&analytic, &numeric)
}

/// Relative error between the model gradient of an objective and central
/// differences over every parameter.
pub fn objective_gradient_error(model: &VaeModel, x: &Tensor, cfg: &ObjectiveConfig, eps: &Tensor, h: f64) -> f64 {
    let analytic: Vec<f64> = loss_and_gradients(model, x, cfg, eps)
        .unwrap()
        .grads
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();
    let mut probe = model.clone();
    let numeric = central_difference(
        |p| {
            probe.set_flat_params(p).unwrap();
            loss_value(&probe, x, cfg, eps).unwrap()
        },
        &model.flat_params(),
        h,
    );
    relative_error(&analytic, &numeric)
}

/// Lloyd's algorithm with k-means++ seeding. Returns `k` centres.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iterations: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centres = vec![points[r.random_range(0..points.len())].clone()];
    while centres.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centres.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut pick = r.random_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if pick < *di {
                chosen = i;
                break;
            }
            pick -= di;
        }
        centres.push(points[chosen].clone());
    }
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = (0..k)
                .min_by(|&a, &b| dist2(p, &centres[a]).total_cmp(&dist2(p, &centres[b])))
                .unwrap();
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centres[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    centres
}

/// Sum of squared distances from each point to its nearest centre.
pub fn inertia(points: &[Vec<f64>], centres: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centres
                .iter()
                .map(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Best of `restarts` k-means runs by inertia.
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, restarts: u64) -> Vec<Vec<f64>> {
    (0..restarts)
        .map(|s| kmeans(points, k, s, 50))
        .min_by(|a, b| inertia(points, a).total_cmp(&inertia(points, b)))
        .unwrap()
}

/// Sample mean and standard error.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean squared error between `x` and the decoded posterior mean.
pub fn reconstruction_mse(model: &VaeModel, x: &Tensor) -> f64 {
    let (mu, _) = model.encode_values(x).unwrap();
    let recon = model.decode_values(&mu).unwrap();
    let n = x.len() as f64;
    x.data().iter().zip(recon.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}
