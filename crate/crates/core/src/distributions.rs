//! Closed-form Gaussian quantities shared by every objective.
//!
//! All likelihood values are in nats per sample. Per-sample quantities are
//! rank-1 tensors of length `batch`.

use crate::autodiff::{AutodiffError, Result, Tape, Tensor, Var};

/// Lower bound applied to every decoder variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))`, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mu: Var,
    pub log_var: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mu: Var, log_var: Var) -> Result<Self> {
        let (ms, ls) = (tape.shape(mu), tape.shape(log_var));
        if ms != ls || ms.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "diag_gaussian",
                left: ms,
                right: ls,
            });
        }
        Ok(Self { mu, log_var })
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[0]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[1]
    }
}

/// Decoder `N(mu_x, sigma2_x I)` with one scalar variance per sample.
#[derive(Debug, Clone, Copy)]
pub struct ScalarGaussianDecoder {
    pub mu_x: Var,
    pub sigma2_x: Var,
}

impl ScalarGaussianDecoder {
    pub fn new(tape: &Tape, mu_x: Var, sigma2_x: Var) -> Result<Self> {
        check_variance(tape, sigma2_x, "scalar_gaussian_decoder")?;
        Ok(Self { mu_x, sigma2_x })
    }

    /// Fixed variance `sigma2` for every sample.
    pub fn constant(tape: &Tape, mu_x: Var, sigma2: f64) -> Result<Self> {
        let batch = tape.shape(mu_x)[0];
        let s = tape.constant(Tensor::full([batch], sigma2));
        Self::new(tape, mu_x, s)
    }

    pub fn nll(&self, tape: &Tape, x: Var) -> Result<Var> {
        gaussian_nll(tape, x, self.mu_x, self.sigma2_x)
    }
}

fn check_variance(tape: &Tape, sigma2: Var, op: &'static str) -> Result<()> {
    let low = tape.with_value(sigma2, |t| {
        t.data()
            .iter()
            .copied()
            .enumerate()
            .find(|&(_, s)| !(s >= VARIANCE_FLOOR))
    });
    match low {
        Some((i, s)) => Err(AutodiffError::Domain {
            op,
            detail: format!("variance {s} of sample {i} is below the floor {VARIANCE_FLOOR}"),
        }),
        None => Ok(()),
    }
}

fn residual_sq_sum(tape: &Tape, x: Var, mu_x: Var) -> Result<Var> {
    let r = tape.sub(x, mu_x)?;
    tape.sum_rows(tape.square(r))
}

/// `KL(q || N(0, I))` per sample: `½ Σ_j (μ² + σ² − log σ² − 1)`.
pub fn kl_to_standard_normal(tape: &Tape, q: &DiagGaussian) -> Result<Var> {
    let mu2 = tape.square(q.mu);
    let var = tape.exp(q.log_var);
    let inner = tape.sub(tape.add(mu2, var)?, q.log_var)?;
    let per_sample = tape.sum_rows(tape.add_scalar(inner, -1.0))?;
    Ok(tape.scale(per_sample, 0.5))
}

/// Gaussian reconstruction NLL with a shared per-sample scalar variance:
/// `Σ_d (x_d − μ_d)² / (2σ²) + ½ log(2πσ²)`.
pub fn gaussian_nll(tape: &Tape, x: Var, mu_x: Var, sigma2: Var) -> Result<Var> {
    check_variance(tape, sigma2, "gaussian_nll")?;
    let xs = tape.shape(x);
    if xs.len() != 2 || tape.shape(sigma2) != [xs[0]] {
        return Err(AutodiffError::ShapeMismatch {
            op: "gaussian_nll",
            left: xs,
            right: tape.shape(sigma2),
        });
    }
    let d = xs[1] as f64;
    let sq = residual_sq_sum(tape, x, mu_x)?;
    let quad = tape.div(sq, tape.scale(sigma2, 2.0))?;
    let log_norm = tape.scale(tape.add_scalar(tape.log(sigma2)?, LN_2PI), 0.5 * d);
    tape.add(quad, log_norm)
}

/// Per-sample variance minimizing [`gaussian_nll`]: the mean squared
/// residual, floored at [`VARIANCE_FLOOR`].
pub fn optimal_sigma2(tape: &Tape, x: Var, mu_x: Var) -> Result<Var> {
    let d = tape.shape(x).get(1).copied().unwrap_or(0);
    if d == 0 {
        return Err(AutodiffError::Invalid {
            op: "optimal_sigma2",
            detail: "data dimension is zero".into(),
        });
    }
    let mse = tape.scale(residual_sq_sum(tape, x, mu_x)?, 1.0 / d as f64);
    Ok(tape.clamp(mse, VARIANCE_FLOOR, f64::INFINITY))
}

/// `z = μ + exp(½ log σ²) ⊙ ε`. `eps` enters the tape as a constant.
pub fn reparameterize(tape: &Tape, q: &DiagGaussian, eps: &Tensor) -> Result<Var> {
    let shape = tape.shape(q.mu);
    if eps.shape() != shape.as_slice() {
        return Err(AutodiffError::ShapeMismatch {
            op: "reparameterize",
            left: shape,
            right: eps.shape().to_vec(),
        });
    }
    let eps = tape.constant(eps.clone());
    let std = tape.exp(tape.scale(q.log_var, 0.5));
    tape.add(q.mu, tape.mul(std, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(t: &Tape, rows: usize, cols: usize, v: Vec<f64>) -> Var {
        t.constant(Tensor::matrix(rows, cols, v).unwrap())
    }

    #[test]
    fn ln_2pi_constant() {
        // libm's ln is allowed one ulp; the literal is the correctly rounded value
        assert!((LN_2PI - std::f64::consts::TAU.ln()).abs() <= f64::EPSILON * 2.0);
    }

    #[test]
    fn kl_is_zero_at_prior() {
        let t = Tape::new();
        let q = DiagGaussian::new(&t, consts(&t, 2, 5, vec![0.0; 10]), consts(&t, 2, 5, vec![0.0; 10])).unwrap();
        let kl = kl_to_standard_normal(&t, &q).unwrap();
        assert_eq!(t.value(kl).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kl_unit_shift() {
        let t = Tape::new();
        let q = DiagGaussian::new(&t, consts(&t, 1, 1, vec![1.0]), consts(&t, 1, 1, vec![0.0])).unwrap();
        let kl = kl_to_standard_normal(&t, &q).unwrap();
        assert_eq!(t.value(kl).data(), &[0.5]);
    }

    #[test]
    fn diag_gaussian_rejects_mismatched_shapes() {
        let t = Tape::new();
        assert!(DiagGaussian::new(&t, consts(&t, 1, 2, vec![0.0; 2]), consts(&t, 2, 1, vec![0.0; 2])).is_err());
    }

    #[test]
    fn nll_vanishes_at_mean_with_unit_normaliser() {
        let t = Tape::new();
        let x = consts(&t, 1, 7, vec![0.3; 7]);
        let dec = ScalarGaussianDecoder::constant(&t, x, 1.0 / std::f64::consts::TAU).unwrap();
        let nll = dec.nll(&t, x).unwrap();
        assert!(t.item(nll).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nll_one_dim_unit_residual() {
        let t = Tape::new();
        let x = consts(&t, 1, 1, vec![1.0]);
        let mu = consts(&t, 1, 1, vec![0.0]);
        let s = t.constant(Tensor::vector(vec![1.0]));
        let nll = t.item(gaussian_nll(&t, x, mu, s).unwrap()).unwrap();
        // 0.5 + 0.5 ln(2π), evaluated in extended precision
        assert!((nll - 1.418_938_533_204_672_7).abs() < 1e-15);

        let x2 = consts(&t, 1, 2, vec![1.0, 1.0]);
        let mu2 = consts(&t, 1, 2, vec![0.0, 0.0]);
        let nll2 = t.item(gaussian_nll(&t, x2, mu2, s).unwrap()).unwrap();
        assert_eq!(nll2, 2.0 * nll);
    }

    #[test]
    fn nll_rejects_variance_below_floor() {
        let t = Tape::new();
        let x = consts(&t, 1, 1, vec![1.0]);
        let s = t.constant(Tensor::vector(vec![1e-7]));
        assert!(matches!(
            gaussian_nll(&t, x, x, s),
            Err(AutodiffError::Domain { op: "gaussian_nll", .. })
        ));
        assert!(ScalarGaussianDecoder::constant(&t, x, 0.0).is_err());
    }

    #[test]
    fn optimal_sigma2_cases() {
        let t = Tape::new();
        let x = consts(&t, 1, 4, vec![0.5; 4]);
        let s = optimal_sigma2(&t, x, x).unwrap();
        assert_eq!(t.value(s).data(), &[VARIANCE_FLOOR]);

        let mu = consts(&t, 1, 4, vec![0.4; 4]);
        let s = optimal_sigma2(&t, x, mu).unwrap();
        assert!((t.value(s).data()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn optimal_sigma2_gradient_vanishes_at_floor() {
        let t = Tape::new();
        let x = consts(&t, 1, 2, vec![0.5, 0.5]);
        let mu = t.param(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let s = optimal_sigma2(&t, x, mu).unwrap();
        let g = t.backward(t.sum(s)).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn reparameterize_cases() {
        let t = Tape::new();
        let mu = consts(&t, 1, 3, vec![1.0, -2.0, 0.5]);
        let lv = consts(&t, 1, 3, vec![0.3, -1.0, 2.0]);
        let q = DiagGaussian::new(&t, mu, lv).unwrap();
        let z = reparameterize(&t, &q, &Tensor::zeros([1, 3])).unwrap();
        assert_eq!(t.value(z), t.value(mu));

        let lv0 = consts(&t, 1, 3, vec![0.0; 3]);
        let q0 = DiagGaussian::new(&t, mu, lv0).unwrap();
        let e = Tensor::matrix(1, 3, vec![0.1, 0.2, -0.3]).unwrap();
        let z = reparameterize(&t, &q0, &e).unwrap();
        let want = [1.1, -1.8, 0.2];
        for (a, b) in t.value(z).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(reparameterize(&t, &q0, &Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn nll_gradient_zero_at_mean() {
        let t = Tape::new();
        let x = consts(&t, 1, 3, vec![0.2, 0.4, 0.9]);
        let mu = t.param(Tensor::matrix(1, 3, vec![0.2, 0.4, 0.9]).unwrap());
        let s = t.constant(Tensor::vector(vec![0.3]));
        let g = t.backward(gaussian_nll(&t, x, mu, s).unwrap()).unwrap();
        assert!(g.get(mu).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
