//! Loss variants of the Gaussian VAE and the gradient-equivalence check.
//!
//! Every objective has the form `mean_batch(distortion + β · rate)`, where
//! `rate` is the KL term and `distortion` the Monte-Carlo mean of the
//! reconstruction NLL. The variants differ only in the decoder variance:
//!
//! * [`Mode::ConstantSigma`]: fixed `σ² = C`, normaliser included.
//! * [`Mode::OptimalSigma`]: `σ²` set to the per-sample optimum, NLL evaluated
//!   with [`gaussian_nll`].
//! * [`Mode::BsVae`]: the optimum substituted in closed form,
//!   `(D/2)(log(2π σ²*) + 1)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::distributions::{
    gaussian_nll, kl_to_standard_normal, optimal_sigma2, reparameterize, LN_2PI,
};
use crate::model::{BoundModel, VaeModel};
use crate::rng::{self, Stream};

pub const DEFAULT_TRAIN_MC_SAMPLES: usize = 1;
pub const DEFAULT_EVAL_MC_SAMPLES: usize = 16;

const EVAL_BATCH: usize = 250;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    ConstantSigma { c: f64 },
    OptimalSigma,
    BsVae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    pub beta: f64,
    pub mc_samples: usize,
    /// Treat `σ²*` as a constant in the backward pass (ablation only).
    #[serde(default)]
    pub stop_sigma_grad: bool,
}

impl ObjectiveConfig {
    pub fn constant_sigma(c: f64, beta: f64) -> Self {
        Self::with_mode(Mode::ConstantSigma { c }, beta)
    }

    pub fn optimal_sigma(beta: f64) -> Self {
        Self::with_mode(Mode::OptimalSigma, beta)
    }

    pub fn bs_vae(beta: f64) -> Self {
        Self::with_mode(Mode::BsVae, beta)
    }

    fn with_mode(mode: Mode, beta: f64) -> Self {
        Self {
            mode,
            beta,
            mc_samples: DEFAULT_TRAIN_MC_SAMPLES,
            stop_sigma_grad: false,
        }
    }

    pub fn with_mc_samples(mut self, mc: usize) -> Self {
        self.mc_samples = mc;
        self
    }

    pub fn validate(&self) -> Result<()> {
        // beta = 0 is accepted: it isolates the distortion term.
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.mc_samples == 0 {
            return Err(ObjectiveError::Config("mc_samples must be positive".into()));
        }
        if let Mode::ConstantSigma { c } = self.mode {
            if !(c > 0.0 && c.is_finite()) {
                return Err(ObjectiveError::Config(format!("C must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Loss and its per-sample parts, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: Var,
    pub rate: Var,
    pub distortion: Var,
}

/// Standard-normal noise of shape `[batch, mc_samples, latent_dim]`.
pub fn sample_noise(rng: &mut ChaCha8Rng, batch: usize, mc: usize, latent: usize) -> Tensor {
    Tensor::new([batch, mc, latent], rng::standard_normal(rng, batch * mc * latent))
        .expect("length matches shape")
}

fn noise_draw(eps: &Tensor, s: usize) -> Tensor {
    let (b, mc, l) = (eps.shape()[0], eps.shape()[1], eps.shape()[2]);
    let mut out = Vec::with_capacity(b * l);
    for i in 0..b {
        let at = (i * mc + s) * l;
        out.extend_from_slice(&eps.data()[at..at + l]);
    }
    Tensor::matrix(b, l, out).expect("length matches shape")
}

/// `(D/2)(log(2π σ²*) + 1)` per sample, with `σ²*` from [`optimal_sigma2`].
pub fn optimal_distortion(tape: &Tape, x: Var, mu_x: Var, stop_grad: bool) -> Result<Var> {
    let d = tape.shape(x)[1] as f64;
    let mut s2 = optimal_sigma2(tape, x, mu_x)?;
    if stop_grad {
        s2 = tape.detach(s2);
    }
    Ok(tape.scale(tape.add_scalar(tape.log(s2)?, LN_2PI + 1.0), 0.5 * d))
}

fn reconstruction(tape: &Tape, x: Var, mu_x: Var, cfg: &ObjectiveConfig) -> Result<Var> {
    let batch = tape.shape(x)[0];
    match cfg.mode {
        Mode::ConstantSigma { c } => {
            let s2 = tape.constant(Tensor::full([batch], c));
            Ok(gaussian_nll(tape, x, mu_x, s2)?)
        }
        Mode::OptimalSigma => {
            let mut s2 = optimal_sigma2(tape, x, mu_x)?;
            if cfg.stop_sigma_grad {
                s2 = tape.detach(s2);
            }
            Ok(gaussian_nll(tape, x, mu_x, s2)?)
        }
        Mode::BsVae => optimal_distortion(tape, x, mu_x, cfg.stop_sigma_grad),
    }
}

/// Records the objective selected by `cfg` for the batch `x`.
///
/// `eps` has shape `[batch, cfg.mc_samples, latent_dim]`.
pub fn objective_loss(
    tape: &Tape,
    model: &BoundModel,
    x: Var,
    cfg: &ObjectiveConfig,
    eps: &Tensor,
) -> Result<LossParts> {
    cfg.validate()?;
    let batch = tape.shape(x)[0];
    let want = [batch, cfg.mc_samples, model.latent_dim()];
    if eps.shape() != want {
        return Err(AutodiffError::ShapeMismatch {
            op: "objective noise",
            left: want.to_vec(),
            right: eps.shape().to_vec(),
        }
        .into());
    }
    let q = model.encode(tape, x)?;
    let rate = kl_to_standard_normal(tape, &q)?;
    let mut total: Option<Var> = None;
    for s in 0..cfg.mc_samples {
        let z = reparameterize(tape, &q, &noise_draw(eps, s))?;
        let mu_x = model.decode(tape, z)?;
        let d = reconstruction(tape, x, mu_x, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let distortion = tape.scale(total.expect("mc_samples >= 1"), 1.0 / cfg.mc_samples as f64);
    let per_sample = tape.add(distortion, tape.scale(rate, cfg.beta))?;
    let loss = tape.mean(per_sample)?;
    Ok(LossParts {
        loss,
        rate,
        distortion,
    })
}

/// β-VAE loss with a constant decoder variance `σ² = C`.
pub fn elbo_loss(
    tape: &Tape,
    model: &BoundModel,
    x: Var,
    cfg: &ObjectiveConfig,
    eps: &Tensor,
) -> Result<LossParts> {
    if !matches!(cfg.mode, Mode::ConstantSigma { .. }) {
        return Err(ObjectiveError::Config("elbo_loss needs a constant-sigma config".into()));
    }
    objective_loss(tape, model, x, cfg, eps)
}

/// Beta-Sigma VAE loss: optimal decoder variance with a separate β.
pub fn bs_vae_loss(
    tape: &Tape,
    model: &BoundModel,
    x: Var,
    cfg: &ObjectiveConfig,
    eps: &Tensor,
) -> Result<LossParts> {
    if cfg.mode != Mode::BsVae {
        return Err(ObjectiveError::Config("bs_vae_loss needs a BS-VAE config".into()));
    }
    objective_loss(tape, model, x, cfg, eps)
}

/// One forward/backward evaluation of an objective.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub loss: f64,
    pub rate: Vec<f64>,
    pub distortion: Vec<f64>,
    /// Gradients in [`VaeModel::parameters`] order.
    pub grads: Vec<Tensor>,
}

pub fn loss_and_gradients(
    model: &VaeModel,
    x: &Tensor,
    cfg: &ObjectiveConfig,
    eps: &Tensor,
) -> Result<GradientEval> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let xv = tape.constant(x.clone());
    let parts = objective_loss(&tape, &bound, xv, cfg, eps)?;
    let mut g = tape.backward(parts.loss)?;
    let grads = bound
        .params()
        .into_iter()
        .map(|p| g.remove(p).expect("every parameter has a gradient"))
        .collect();
    Ok(GradientEval {
        loss: tape.item(parts.loss)?,
        rate: tape.value(parts.rate).into_data(),
        distortion: tape.value(parts.distortion).into_data(),
        grads,
    })
}

/// Loss value only, without a backward pass.
pub fn loss_value(model: &VaeModel, x: &Tensor, cfg: &ObjectiveConfig, eps: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    let parts = objective_loss(&tape, &bound, xv, cfg, eps)?;
    Ok(tape.item(parts.loss)?)
}

/// Largest per-parameter relative discrepancy `‖g₁ − k·g₂‖ / (‖g₁‖ + 1e-12)`
/// between the gradients of two objectives on the same batch and noise.
pub fn gradient_discrepancy(
    model: &VaeModel,
    x: &Tensor,
    eps: &Tensor,
    first: &ObjectiveConfig,
    second: &ObjectiveConfig,
    multiplier: f64,
) -> Result<f64> {
    let g1 = loss_and_gradients(model, x, first, eps)?.grads;
    let g2 = loss_and_gradients(model, x, second, eps)?.grads;
    let worst = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| {
            let diff: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - multiplier * y).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            diff / (norm + 1e-12)
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Compares `∇L_β(σ² = C)` with `β · ∇(−ELBO)(σ² = β·C)`.
///
/// The two are proportional for every constant-variance model, so the
/// returned discrepancy is pure rounding error.
pub fn check_equivalence(model: &VaeModel, x: &Tensor, beta: f64, c: f64, eps: &Tensor) -> Result<f64> {
    let mc = eps.shape().get(1).copied().unwrap_or(1);
    let beta_vae = ObjectiveConfig::constant_sigma(c, beta).with_mc_samples(mc);
    let plain = ObjectiveConfig::constant_sigma(beta * c, 1.0).with_mc_samples(mc);
    gradient_discrepancy(model, x, eps, &beta_vae, &plain, beta)
}

/// How a likelihood figure is read off a model's reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    /// `σ² = 1/2`
    ConstHalf,
    /// `σ² = β/2`
    ConstBetaHalf,
    /// Per-sample optimal `σ²*`, closed form.
    Optimal,
    /// A BS-VAE model evaluated with its own (optimal) variance.
    BsVae,
}

impl Interpretation {
    pub const CONSTANT_FAMILY: [Interpretation; 3] = [Self::ConstHalf, Self::ConstBetaHalf, Self::Optimal];

    pub fn label(self) -> &'static str {
        match self {
            Self::ConstHalf => "const_half",
            Self::ConstBetaHalf => "const_beta_half",
            Self::Optimal => "optimal",
            Self::BsVae => "bsvae",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [Self::ConstHalf, Self::ConstBetaHalf, Self::Optimal, Self::BsVae]
            .into_iter()
            .find(|i| i.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub interpretation: Interpretation,
    pub rate: f64,
    pub distortion: f64,
    pub elbo: f64,
    /// Standard error of the per-sample ELBO mean.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub beta: f64,
    pub mc_samples: usize,
    pub samples: usize,
    pub estimates: Vec<ElboEstimate>,
}

impl EvalReport {
    pub fn get(&self, which: Interpretation) -> Option<&ElboEstimate> {
        let which = if which == Interpretation::BsVae {
            Interpretation::Optimal
        } else {
            which
        };
        self.estimates.iter().find(|e| e.interpretation == which)
    }
}

/// Per-sample rate and per-interpretation distortion, MC-averaged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerSampleTerms {
    pub rate: Vec<f64>,
    pub const_half: Vec<f64>,
    pub const_beta_half: Vec<f64>,
    pub optimal: Vec<f64>,
}

/// Rate and the three distortion readings for one batch, no gradients.
pub fn batch_terms(model: &VaeModel, x: &Tensor, beta: f64, eps: &Tensor) -> Result<PerSampleTerms> {
    if !(beta > 0.0) {
        return Err(ObjectiveError::Config(format!("beta must be positive, got {beta}")));
    }
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    let batch = x.shape()[0];
    let mc = eps.shape()[1];
    let q = bound.encode(&tape, xv)?;
    let rate = tape.value(kl_to_standard_normal(&tape, &q)?).into_data();
    let half = tape.constant(Tensor::full([batch], 0.5));
    let beta_half = tape.constant(Tensor::full([batch], 0.5 * beta));
    let mut out = PerSampleTerms {
        rate,
        const_half: vec![0.0; batch],
        const_beta_half: vec![0.0; batch],
        optimal: vec![0.0; batch],
    };
    for s in 0..mc {
        let z = reparameterize(&tape, &q, &noise_draw(eps, s))?;
        let mu_x = bound.decode(&tape, z)?;
        let readings = [
            (gaussian_nll(&tape, xv, mu_x, half)?, &mut out.const_half),
            (gaussian_nll(&tape, xv, mu_x, beta_half)?, &mut out.const_beta_half),
            (optimal_distortion(&tape, xv, mu_x, true)?, &mut out.optimal),
        ];
        for (v, acc) in readings {
            tape.with_value(v, |t| {
                acc.iter_mut().zip(t.data()).for_each(|(a, d)| *a += d / mc as f64)
            });
        }
    }
    Ok(out)
}

fn summarize(interpretation: Interpretation, rate: &[f64], distortion: &[f64]) -> ElboEstimate {
    let n = rate.len() as f64;
    let elbos: Vec<f64> = rate.iter().zip(distortion).map(|(r, d)| -(r + d)).collect();
    let mean_rate = rate.iter().sum::<f64>() / n;
    let mean_dist = distortion.iter().sum::<f64>() / n;
    let mean_elbo = elbos.iter().sum::<f64>() / n;
    let var = if n > 1.0 {
        elbos.iter().map(|e| (e - mean_elbo).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ElboEstimate {
        interpretation,
        rate: mean_rate,
        distortion: mean_dist,
        elbo: -(mean_rate + mean_dist),
        std_error: (var / n).sqrt(),
    }
}

/// Mean per-sample ELBO of `model` on `data` under the three variance
/// readings (`σ² = 1/2`, `σ² = β/2`, optimal). Noise comes from the
/// evaluation stream of `seed`; batches are reduced in order.
pub fn evaluate_elbo(
    model: &VaeModel,
    data: &Dataset,
    beta: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    if mc_samples == 0 {
        return Err(ObjectiveError::Config("mc_samples must be positive".into()));
    }
    let mut rng = rng::stream(seed, Stream::Eval);
    let latent = model.architecture().latent_dim;
    let mut all = PerSampleTerms::default();
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let x = data.batch_range(start, end);
        let eps = sample_noise(&mut rng, end - start, mc_samples, latent);
        let t = batch_terms(model, &x, beta, &eps)?;
        all.rate.extend(t.rate);
        all.const_half.extend(t.const_half);
        all.const_beta_half.extend(t.const_beta_half);
        all.optimal.extend(t.optimal);
        start = end;
    }
    Ok(EvalReport {
        beta,
        mc_samples,
        samples: data.len(),
        estimates: vec![
            summarize(Interpretation::ConstHalf, &all.rate, &all.const_half),
            summarize(Interpretation::ConstBetaHalf, &all.rate, &all.const_beta_half),
            summarize(Interpretation::Optimal, &all.rate, &all.optimal),
        ],
    })
}
