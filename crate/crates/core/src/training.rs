//! AdamW training loop.
//!
//! Shuffling, reparameterization noise and initialization each draw from
//! their own stream of `TrainConfig::seed`, so a run is fully reproducible
//! from `(seed, config, dataset)`.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::format::{fmt_f64, parse_f64};
use crate::model::VaeModel;
use crate::objectives::{loss_and_gradients, sample_noise, ObjectiveConfig, ObjectiveError};
use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace csv: {0}")]
    TraceFormat(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
}

impl TrainConfig {
    /// Default hyperparameters: lr 1e-3, weight decay 1e-4, batch 128,
    /// Adam (0.9, 0.999, 1e-8), 10 epochs.
    pub fn new(objective: ObjectiveConfig) -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        self.objective.validate()?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(names: Vec<String>, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            names,
            v: zeros.clone(),
            m: zeros,
            step: 0,
        }
    }

    pub fn for_model(model: &VaeModel) -> Self {
        Self::new(model.parameter_names(), model.parameters())
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
///
/// All gradients are checked before anything is written; a non-finite
/// entry aborts the whole step.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    opt: &AdamW,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::StateMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(TrainError::StateMismatch(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            let param = state.names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(TrainError::NonFiniteGradient { param });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= opt.learning_rate * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * *w);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: [&str; 5] = ["epoch", "loss", "rate", "distortion", "wall_ms"];

impl TrainTrace {
    /// Writes `epoch,loss,rate,distortion,wall_ms` with 17 significant
    /// digits. Without `wall_time`, the last column is written as zero so
    /// that repeated runs produce identical files.
    pub fn write_csv<W: Write>(&self, out: W, wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for r in &self.records {
            let wall = if wall_time { r.wall_ms } else { 0.0 };
            w.write_record([
                r.epoch.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.rate),
                fmt_f64(r.distortion),
                fmt_f64(wall),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().ne(TRACE_HEADER) {
            return Err(TrainError::TraceFormat(format!("unexpected header {:?}", r.headers()?)));
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let num = |i: usize| parse_f64(&row[i]).map_err(TrainError::TraceFormat);
            records.push(TraceRecord {
                epoch: row[0]
                    .parse()
                    .map_err(|e| TrainError::TraceFormat(format!("epoch: {e}")))?,
                loss: num(1)?,
                rate: num(2)?,
                distortion: num(3)?,
                wall_ms: num(4)?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub trace: TrainTrace,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn completed(&self) -> bool {
        self.status == TrainStatus::Completed
    }
}

pub fn train(model: VaeModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, data, cfg, |_| {})
}

/// [`train`], calling `progress` after every completed epoch.
pub fn train_with_progress(
    mut model: VaeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dim() != model.architecture().data_dim {
        return Err(TrainError::Config(format!(
            "dataset dimension {} does not match model data_dim {}",
            data.dim(),
            model.architecture().data_dim
        )));
    }
    let opt = cfg.optimizer();
    let latent = model.architecture().latent_dim;
    let mut state = AdamState::for_model(&model);
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut noise_rng = rng::stream(cfg.seed, Stream::Noise);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut rate_sum, mut dist_sum, mut loss_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.step() + 1;
            let diverged = |reason: String| TrainStatus::Diverged {
                epoch,
                step,
                reason,
            };
            let x = data.batch(chunk);
            let eps = sample_noise(&mut noise_rng, chunk.len(), cfg.objective.mc_samples, latent);
            let ev = match loss_and_gradients(&model, &x, &cfg.objective, &eps) {
                Ok(ev) => ev,
                Err(ObjectiveError::Autodiff(e)) => {
                    let status = diverged(format!("objective evaluation failed: {e}"));
                    return Ok(TrainOutcome { model, trace, status });
                }
                Err(e) => return Err(e.into()),
            };
            if !ev.loss.is_finite() {
                let status = diverged(format!("loss is {}", ev.loss));
                return Ok(TrainOutcome { model, trace, status });
            }
            match adamw_step(model.parameters_mut(), &ev.grads, &mut state, &opt) {
                Ok(()) => {}
                Err(e @ TrainError::NonFiniteGradient { .. }) => {
                    let status = diverged(e.to_string());
                    return Ok(TrainOutcome { model, trace, status });
                }
                Err(e) => return Err(e),
            }
            if !model.is_finite() {
                let status = diverged("parameters became non-finite".into());
                return Ok(TrainOutcome { model, trace, status });
            }
            for (r, d) in ev.rate.iter().zip(&ev.distortion) {
                rate_sum += r;
                dist_sum += d;
                loss_sum += d + cfg.objective.beta * r;
            }
        }
        let n = data.len() as f64;
        let record = TraceRecord {
            epoch,
            loss: loss_sum / n,
            rate: rate_sum / n,
            distortion: dist_sum / n,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        progress(&record);
        trace.records.push(record);
    }
    Ok(TrainOutcome {
        model,
        trace,
        status: TrainStatus::Completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, wd: f64) -> AdamW {
        AdamW {
            learning_rate: lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut s = AdamState::new(vec!["p".into()], [&p]);
        adamw_step([&mut p], &[Tensor::zeros([2])], &mut s, &opt(0.1, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_only_path() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut s = AdamState::new(vec!["p".into()], [&p]);
        adamw_step([&mut p], &[Tensor::zeros([2])], &mut s, &opt(0.1, 0.5)).unwrap();
        assert_eq!(p.data(), &[1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn quadratic_converges() {
        // oracle: the same scalar recurrence written out by hand
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=500 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t)) / ((v / (1.0 - b2.powi(t))).sqrt() + eps));
        }
        assert!(x.abs() < 1e-3);

        let mut p = Tensor::vector(vec![1.0]);
        let mut s = AdamState::new(vec!["p".into()], [&p]);
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * p.data()[0]]);
            adamw_step([&mut p], &[g], &mut s, &opt(lr, 0.0)).unwrap();
        }
        assert_eq!(p.data()[0], x);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let mut s = AdamState::new(vec!["a".into(), "b".into()], [&a, &b]);
        let err = adamw_step(
            [&mut a, &mut b],
            &[Tensor::vector(vec![0.5]), Tensor::vector(vec![f64::NAN])],
            &mut s,
            &opt(0.1, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref param } if param == "b"));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ObjectiveConfig::bs_vae(1.0));
        assert!(c.validate().is_ok());
        c.adam_beta1 = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(ObjectiveConfig::bs_vae(1.0));
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_csv_round_trips() {
        let trace = TrainTrace {
            records: vec![TraceRecord {
                epoch: 1,
                loss: 0.1 + 0.2,
                rate: 1.0 / 3.0,
                distortion: -12345.678901234567,
                wall_ms: 17.25,
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,loss,rate,distortion,wall_ms\n"));
        assert_eq!(TrainTrace::read_csv(buf.as_slice()).unwrap(), trace);
    }
}
