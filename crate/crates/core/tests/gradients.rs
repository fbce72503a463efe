mod common;

use bsvae::autodiff::{Tape, Tensor, Var};
use bsvae::distributions::{gaussian_nll, kl_to_standard_normal, optimal_sigma2, reparameterize, DiagGaussian};
use bsvae::model::Architecture;
use bsvae::objectives::{sample_noise, ObjectiveConfig};
use bsvae::VaeModel;
use common::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

/// Runs `op` at `TRIALS` random points drawn from `[lo, hi)` and returns
/// the worst relative error.
fn worst_error(shapes: &[Vec<usize>], lo: f64, hi: f64, op: impl Fn(&Tape, &[Var]) -> Var) -> f64 {
    let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    (0..TRIALS)
        .map(|t| {
            let x = uniform(&mut rng(1000 + t), n, lo, hi);
            op_gradient_error(shapes, &x, t, H, &op)
        })
        .fold(0.0, f64::max)
}

fn m(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

#[test]
fn binary_elementwise_ops() {
    let s = [m(3, 4), m(3, 4)];
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.sub(v[0], v[1]).unwrap()) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
    assert!(worst_error(&s, 0.5, 2.0, |t, v| t.div(v[0], v[1]).unwrap()) < TOL);
}

#[test]
fn matmul_and_bias() {
    assert!(worst_error(&[m(3, 5), m(5, 2)], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]).unwrap()) < TOL);
    assert!(worst_error(&[m(4, 3), vec![3]], -1.0, 1.0, |t, v| t.add_row(v[0], v[1]).unwrap()) < TOL);
}

#[test]
fn unary_ops() {
    let s = [m(2, 5)];
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.exp(v[0])) < TOL);
    assert!(worst_error(&s, 0.1, 3.0, |t, v| t.log(v[0]).unwrap()) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.square(v[0])) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.tanh(v[0])) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.scale(v[0], -1.7)) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.add_scalar(v[0], 0.3)) < TOL);
}

#[test]
fn piecewise_ops_away_from_kinks() {
    let s = [m(2, 5)];
    // keep every coordinate at least 0.05 from the kink
    let shift = |t: &Tape, v: Var| {
        let sign = t.with_value(v, |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|a| a.signum() * 0.05).collect()).unwrap());
        let c = t.constant(sign);
        t.add(v, c).unwrap()
    };
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.relu(shift(t, v[0]))) < TOL);
    assert!(worst_error(&s, -0.9, 0.9, |t, v| t.clamp(v[0], -1.0, 1.0)) < TOL);
    assert!(worst_error(&s, 1.1, 2.0, |t, v| t.clamp(v[0], -1.0, 1.0)) < TOL);
}

#[test]
fn reductions_and_slicing() {
    let s = [m(3, 4)];
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.sum(v[0])) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.mean(v[0]).unwrap()) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.sum_rows(v[0]).unwrap()) < TOL);
    assert!(worst_error(&s, -2.0, 2.0, |t, v| t.slice_cols(v[0], 1, 3).unwrap()) < TOL);
}

#[test]
fn mean_square_at_one_two_three() {
    let g = central_difference(|a| a.iter().map(|x| x * x).sum::<f64>() / 3.0, &[1.0, 2.0, 3.0], H);
    let tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let loss = tape.mean(tape.square(a)).unwrap();
    let analytic = tape.backward(loss).unwrap().get(a).unwrap().data().to_vec();
    assert!(relative_error(&analytic, &g) < 1e-9);
    assert!(relative_error(&analytic, &[2.0 / 3.0, 4.0 / 3.0, 2.0]) < 1e-15);
}

#[test]
fn log_of_square_composition() {
    let e = worst_error(&[vec![6]], 0.2, 3.0, |t, v| t.log(t.square(v[0])).unwrap());
    assert!(e < 1e-5, "{e}");
}

#[test]
fn distribution_terms() {
    let s = [m(3, 4), m(3, 4)];
    assert!(
        worst_error(&s, -1.5, 1.5, |t, v| {
            let q = DiagGaussian::new(t, v[0], v[1]).unwrap();
            kl_to_standard_normal(t, &q).unwrap()
        }) < TOL
    );
    assert!(
        worst_error(&s, -1.0, 1.0, |t, v| {
            let s2 = t.constant(Tensor::full([3], 0.7));
            gaussian_nll(t, v[0], v[1], s2).unwrap()
        }) < TOL
    );
    assert!(
        worst_error(&[m(3, 4), m(3, 4), vec![3]], 0.2, 1.0, |t, v| gaussian_nll(t, v[0], v[1], v[2]).unwrap()) < TOL
    );
    assert!(worst_error(&s, -1.0, 1.0, |t, v| optimal_sigma2(t, v[0], v[1]).unwrap()) < TOL);
    let eps = Tensor::matrix(3, 4, normals(&mut rng(5), 12)).unwrap();
    assert!(
        worst_error(&s, -1.0, 1.0, |t, v| {
            let q = DiagGaussian::new(t, v[0], v[1]).unwrap();
            reparameterize(t, &q, &eps).unwrap()
        }) < TOL
    );
}

fn toy(seed: u64, data_dim: usize, hidden: Vec<usize>, latent: usize, batch: usize, mc: usize) -> (VaeModel, Tensor, Tensor) {
    let arch = Architecture::new(data_dim, hidden, latent).unwrap();
    let model = VaeModel::init(seed, arch).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let x = Tensor::matrix(batch, data_dim, uniform(&mut r, batch * data_dim, 0.0, 1.0)).unwrap();
    let eps = sample_noise(&mut r, batch, mc, latent);
    (model, x, eps)
}

#[test]
fn full_objectives_match_central_differences() {
    let configs = [
        ObjectiveConfig::constant_sigma(0.5, 1.0),
        ObjectiveConfig::constant_sigma(0.5, 4.0).with_mc_samples(2),
        ObjectiveConfig::optimal_sigma(1.0),
        ObjectiveConfig::bs_vae(1.0),
        ObjectiveConfig::bs_vae(0.1).with_mc_samples(2),
        ObjectiveConfig::bs_vae(10.0),
    ];
    for cfg in configs {
        let worst = (0..TRIALS)
            .map(|s| {
                let (model, x, eps) = toy(s, 5, vec![4], 2, 3, cfg.mc_samples);
                objective_gradient_error(&model, &x, &cfg, &eps, H)
            })
            .fold(0.0, f64::max);
        assert!(worst < TOL, "{cfg:?}: {worst}");
    }
}

#[test]
fn encoder_jacobian_on_three_unit_net() {
    let arch = Architecture::new(2, vec![3], 1).unwrap();
    let model = VaeModel::init(9, arch).unwrap();
    let x0 = [0.3, 0.7];
    for out in 0..2 {
        let f = |x: &[f64]| {
            let (mu, lv) = model.encode_values(&Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap();
            [mu.data()[0], lv.data()[0]][out]
        };
        let numeric = central_difference(f, &x0, H);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let x = tape.param(Tensor::matrix(1, 2, x0.to_vec()).unwrap());
        let q = bound.encode(&tape, x).unwrap();
        let y = tape.sum([q.mu, q.log_var][out]);
        let analytic = tape.backward(y).unwrap().get(x).unwrap().data().to_vec();
        assert!(relative_error(&analytic, &numeric) < TOL);
    }
}
