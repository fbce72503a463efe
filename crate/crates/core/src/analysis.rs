//! Rate-distortion sweeps, the β–σ² relation and image-grid outputs.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::distributions::{LN_2PI, VARIANCE_FLOOR};
use crate::format::{fmt_f64, parse_f64};
use crate::model::{Architecture, ModelError, VaeModel};
use crate::objectives::{evaluate_elbo, EvalReport, Interpretation, ObjectiveConfig, ObjectiveError};
use crate::rng::{self, Stream};
use crate::training::{train, TrainConfig, TrainError, TrainStatus};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// One `(β, rate, distortion, ELBO)` reading of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub beta: f64,
    pub interpretation: Interpretation,
    pub rate: f64,
    pub distortion: f64,
    pub elbo: f64,
    pub seed: u64,
}

impl RdPoint {
    pub fn is_failed(&self) -> bool {
        !self.elbo.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    ConstantSigma { c: f64 },
    BsVae,
}

impl Family {
    pub fn objective(self, beta: f64) -> ObjectiveConfig {
        match self {
            Family::ConstantSigma { c } => ObjectiveConfig::constant_sigma(c, beta),
            Family::BsVae => ObjectiveConfig::bs_vae(beta),
        }
    }

    pub fn interpretations(self) -> &'static [Interpretation] {
        match self {
            Family::ConstantSigma { .. } => &Interpretation::CONSTANT_FAMILY,
            Family::BsVae => &[Interpretation::BsVae],
        }
    }
}

/// Table-1 rows.
pub const DESK_BETA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// `1e-4 ... 1e3`, one point per decade.
pub const FULL_BETA_GRID: [f64; 8] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub arch: Architecture,
    /// Hyperparameters shared by every point; the objective is replaced per
    /// point and the seed is re-derived from this one.
    pub train: TrainConfig,
    pub eval_mc_samples: usize,
}

/// Seed used for the model at `beta`: the same for every family, so both
/// families start from the same weights and see the same batches.
pub fn point_seed(base: u64, beta: f64) -> u64 {
    rng::derive_seed(base, beta.to_bits())
}

#[derive(Debug, Clone)]
pub struct SweepModel {
    pub family: Family,
    pub beta: f64,
    pub seed: u64,
    pub model: VaeModel,
    pub status: TrainStatus,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub points: Vec<RdPoint>,
    pub models: Vec<SweepModel>,
}

impl SweepOutcome {
    pub fn merge(&mut self, other: SweepOutcome) {
        self.points.extend(other.points);
        self.models.extend(other.models);
        sort_points(&mut self.points);
    }
}

pub fn sort_points(points: &mut [RdPoint]) {
    points.sort_by(|a, b| a.beta.total_cmp(&b.beta).then(a.interpretation.cmp(&b.interpretation)));
}

/// Trains one model per β and reads test-set rate and distortion off it.
///
/// Constant-variance models yield three points per β (`σ² = 1/2`,
/// `σ² = β/2`, optimal); BS-VAE models yield one. A diverged run is kept as
/// a point with NaN values and the sweep moves on.
pub fn rd_sweep(
    train_data: &Dataset,
    test_data: &Dataset,
    beta_grid: &[f64],
    family: Family,
    settings: &SweepSettings,
) -> Result<SweepOutcome> {
    rd_sweep_with_progress(train_data, test_data, beta_grid, family, settings, |_| {})
}

pub fn rd_sweep_with_progress(
    train_data: &Dataset,
    test_data: &Dataset,
    beta_grid: &[f64],
    family: Family,
    settings: &SweepSettings,
    mut progress: impl FnMut(&SweepModel),
) -> Result<SweepOutcome> {
    if beta_grid.is_empty() {
        return Err(AnalysisError::Invalid("beta grid is empty".into()));
    }
    if beta_grid.windows(2).any(|w| !(w[0] < w[1])) || beta_grid.iter().any(|&b| !(b > 0.0)) {
        return Err(AnalysisError::Invalid(format!(
            "beta grid must be positive and strictly increasing: {beta_grid:?}"
        )));
    }
    if let Family::ConstantSigma { c } = family {
        if !(c > 0.0) {
            return Err(AnalysisError::Invalid(format!("C must be positive, got {c}")));
        }
    }
    let mut out = SweepOutcome::default();
    for &beta in beta_grid {
        let seed = point_seed(settings.train.seed, beta);
        let mut cfg = settings.train.clone();
        cfg.seed = seed;
        cfg.objective = ObjectiveConfig {
            mc_samples: settings.train.objective.mc_samples,
            ..family.objective(beta)
        };
        let model = VaeModel::init(seed, settings.arch.clone())?;
        let trained = train(model, train_data, &cfg)?;
        let eval = if trained.completed() {
            Some(evaluate_elbo(&trained.model, test_data, beta, settings.eval_mc_samples, seed)?)
        } else {
            None
        };
        for &interpretation in family.interpretations() {
            let (rate, distortion, elbo) = match eval.as_ref().and_then(|e| e.get(interpretation)) {
                Some(e) => (e.rate, e.distortion, -(e.rate + e.distortion)),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            out.points.push(RdPoint {
                beta,
                interpretation,
                rate,
                distortion,
                elbo,
                seed,
            });
        }
        let entry = SweepModel {
            family,
            beta,
            seed,
            model: trained.model,
            status: trained.status,
            eval,
        };
        progress(&entry);
        out.models.push(entry);
    }
    sort_points(&mut out.points);
    Ok(out)
}

pub const RD_HEADER: [&str; 6] = ["beta", "interpretation", "rate", "distortion", "elbo", "seed"];
const RD_COMMENT: &str = "# rate, distortion and elbo in nats per sample\n";

pub fn write_rd_csv<W: Write>(mut out: W, points: &[RdPoint]) -> Result<()> {
    out.write_all(RD_COMMENT.as_bytes()).map_err(csv::Error::from)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RD_HEADER)?;
    for p in points {
        w.write_record([
            fmt_f64(p.beta),
            p.interpretation.label().to_string(),
            fmt_f64(p.rate),
            fmt_f64(p.distortion),
            fmt_f64(p.elbo),
            p.seed.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rd_csv<R: Read>(input: R) -> Result<Vec<RdPoint>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    if r.headers()?.iter().ne(RD_HEADER) {
        return Err(AnalysisError::Invalid(format!("unexpected rd-sweep header {:?}", r.headers()?)));
    }
    let mut points = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| parse_f64(&row[i]).map_err(AnalysisError::Invalid);
        points.push(RdPoint {
            beta: num(0)?,
            interpretation: Interpretation::from_label(&row[1])
                .ok_or_else(|| AnalysisError::Invalid(format!("unknown interpretation {:?}", &row[1])))?,
            rate: num(2)?,
            distortion: num(3)?,
            elbo: num(4)?,
            seed: row[5]
                .parse()
                .map_err(|e| AnalysisError::Invalid(format!("seed: {e}")))?,
        });
    }
    Ok(points)
}

/// The β a constant-variance model effectively trains with once the
/// log-σ term is accounted for: `β = 2σ² + σ² log(2πσ²) / KL`.
pub fn beta_sigma_relation(sigma2: f64, kl: f64) -> Result<f64> {
    if !(kl > 0.0) {
        return Err(AnalysisError::Domain(format!("KL must be positive, got {kl}")));
    }
    if !(sigma2 >= VARIANCE_FLOOR) || !sigma2.is_finite() {
        return Err(AnalysisError::Domain(format!(
            "sigma2 must be finite and at least {VARIANCE_FLOOR}, got {sigma2}"
        )));
    }
    Ok(2.0 * sigma2 + sigma2 * (LN_2PI + sigma2.ln()) / kl)
}

/// 8-bit grayscale image, written as binary PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// `P5`, maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    fn blit(&mut self, x0: usize, y0: usize, tile: &[f64], (w, h): (usize, usize)) {
        for y in 0..h {
            for x in 0..w {
                let v = tile[y * w + x].clamp(0.0, 1.0);
                self.pixels[(y0 + y) * self.width + x0 + x] = (v * 255.0).round() as u8;
            }
        }
    }
}

/// Tile size for a flattened sample: square when `dim` is a perfect
/// square, a single row otherwise.
pub fn tile_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (dim, 1)
    }
}

/// Tiles the rows of `samples` (`[n, D]`) into a near-square grid.
pub fn tile_grid(samples: &Tensor) -> GrayImage {
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    let (w, h) = tile_shape(d);
    let cols = ((n as f64).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols).max(1);
    let mut img = GrayImage::new(cols * w, rows * h);
    for i in 0..n {
        img.blit((i % cols) * w, (i / cols) * h, &samples.data()[i * d..(i + 1) * d], (w, h));
    }
    img
}

/// Decoder means `μ_x(z)` for `n` draws `z ~ N(0, I)`.
pub fn prior_sample_means(model: &VaeModel, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(AnalysisError::Invalid("need at least one sample".into()));
    }
    let latent = model.architecture().latent_dim;
    let mut rng = rng::stream(seed, Stream::Sample);
    let z = Tensor::matrix(n, latent, rng::standard_normal(&mut rng, n * latent)).expect("shape");
    Ok(model.decode_values(&z)?)
}

/// Grid of prior samples (decoder means, clipped to `[0, 1]` for display).
pub fn sample_prior(model: &VaeModel, n: usize, seed: u64) -> Result<GrayImage> {
    Ok(tile_grid(&prior_sample_means(model, n, seed)?))
}

#[derive(Debug, Clone)]
pub struct Reconstructions {
    pub indices: Vec<usize>,
    pub originals: Tensor,
    pub reconstructions: Tensor,
}

/// Decodes the encoder mean of `n` samples chosen by `seed`.
pub fn reconstruct(model: &VaeModel, data: &Dataset, n: usize, seed: u64) -> Result<Reconstructions> {
    if n == 0 || n > data.len() {
        return Err(AnalysisError::Invalid(format!(
            "cannot pick {n} samples from a dataset of {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Sample));
    order.truncate(n);
    let originals = data.batch(&order);
    let (mu_z, _) = model.encode_values(&originals)?;
    let reconstructions = model.decode_values(&mu_z)?;
    Ok(Reconstructions {
        indices: order,
        originals,
        reconstructions,
    })
}

/// Originals and reconstructions in alternating rows: each block of up to
/// eight pairs takes one row of originals above one row of reconstructions.
pub fn reconstruct_grid(model: &VaeModel, data: &Dataset, n: usize, seed: u64) -> Result<GrayImage> {
    let r = reconstruct(model, data, n, seed)?;
    let d = data.dim();
    let (w, h) = tile_shape(d);
    let cols = n.min(8);
    let blocks = n.div_ceil(cols);
    let mut img = GrayImage::new(cols * w, 2 * blocks * h);
    for i in 0..n {
        let (bx, by) = ((i % cols) * w, (i / cols) * 2 * h);
        img.blit(bx, by, &r.originals.data()[i * d..(i + 1) * d], (w, h));
        img.blit(bx, by + h, &r.reconstructions.data()[i * d..(i + 1) * d], (w, h));
    }
    Ok(img)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
