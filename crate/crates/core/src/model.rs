//! Fully-connected Gaussian VAE.
//!
//! The encoder maps `data_dim -> hidden... -> 2 * latent_dim` and splits the
//! output into `(μ_z, log σ²_z)`; the decoder mirrors the hidden widths and
//! maps `latent_dim -> ... -> data_dim`, producing the decoder mean `μ_x`
//! with no output nonlinearity. Hidden layers use `tanh`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::distributions::DiagGaussian;
use crate::rng::{self, Stream};

/// `log σ²_z` is clamped to `[-LOG_VAR_BOUND, LOG_VAR_BOUND]`.
pub const LOG_VAR_BOUND: f64 = 10.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BSV1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Architecture {
    pub fn new(data_dim: usize, hidden: Vec<usize>, latent_dim: usize) -> Result<Self> {
        let arch = Self {
            data_dim,
            hidden,
            latent_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 {
            return Err(ModelError::Architecture(format!(
                "data_dim ({}) and latent_dim ({}) must be positive",
                self.data_dim, self.latent_dim
            )));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(ModelError::Architecture(format!("hidden layer {i} has width 0")));
        }
        Ok(())
    }

    /// Layer widths of the encoder, input first.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.data_dim];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(self.data_dim);
        w
    }

    /// `[data_dim, hidden..., latent_dim]`, the list stored in checkpoints.
    pub fn extents(&self) -> Vec<usize> {
        let mut e = vec![self.data_dim];
        e.extend(&self.hidden);
        e.push(self.latent_dim);
        e
    }

    pub fn from_extents(extents: &[usize]) -> Result<Self> {
        match extents {
            [data, hidden @ .., latent] => Self::new(*data, hidden.to_vec(), *latent),
            _ => Err(ModelError::Architecture(format!(
                "need at least two extents, got {}",
                extents.len()
            ))),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let count = |w: Vec<usize>| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        count(self.encoder_widths()) + count(self.decoder_widths())
    }
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Tensor::zeros([fan_out]),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("length matches"),
            bias: Tensor::zeros([fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    arch: Architecture,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
}

fn layers(widths: &[usize], mut make: impl FnMut(usize, usize) -> Dense) -> Vec<Dense> {
    widths.windows(2).map(|p| make(p[0], p[1])).collect()
}

impl VaeModel {
    /// Weights `~ U(-√(3/fan_in), √(3/fan_in))`, biases zero. Fully
    /// determined by `seed`.
    pub fn init(seed: u64, arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let encoder = layers(&arch.encoder_widths(), |i, o| Dense::uniform(i, o, &mut rng));
        let decoder = layers(&arch.decoder_widths(), |i, o| Dense::uniform(i, o, &mut rng));
        Ok(Self {
            arch,
            encoder,
            decoder,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            encoder: layers(&arch.encoder_widths(), Dense::zeros),
            decoder: layers(&arch.decoder_widths(), Dense::zeros),
            arch,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn encoder_layers(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[Dense] {
        &self.decoder
    }

    /// Parameters in layer order: encoder (weight, bias)..., decoder (weight, bias)...
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let named = |part: &str, n: usize| {
            (0..n)
                .flat_map(|i| [format!("{part}.{i}.weight"), format!("{part}.{i}.bias")])
                .collect::<Vec<_>>()
        };
        let mut names = named("encoder", self.encoder.len());
        names.extend(named("decoder", self.decoder.len()));
        names
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.parameters().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total = self.arch.parameter_count();
        if values.len() != total {
            return Err(ModelError::Architecture(format!(
                "expected {total} parameter values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(Tensor::is_finite)
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundModel {
        self.bind_with(tape, |t| tape.param(t.clone()))
    }

    /// Registers parameters as constants, for evaluation without gradients.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundModel {
        self.bind_with(tape, |t| tape.constant(t.clone()))
    }

    fn bind_with(&self, _tape: &Tape, mut reg: impl FnMut(&Tensor) -> Var) -> BoundModel {
        let mut bind = |ls: &[Dense]| {
            ls.iter()
                .map(|l| (reg(&l.weight), reg(&l.bias)))
                .collect::<Vec<_>>()
        };
        BoundModel {
            encoder: bind(&self.encoder),
            decoder: bind(&self.decoder),
            latent_dim: self.arch.latent_dim,
            data_dim: self.arch.data_dim,
        }
    }

    /// `(μ_z, log σ²_z)` values for a `[batch, data_dim]` input.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let q = bound.encode(&tape, xv)?;
        Ok((tape.value(q.mu), tape.value(q.log_var)))
    }

    /// Decoder mean `μ_x` for a `[batch, latent_dim]` input.
    pub fn decode_values(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let zv = tape.constant(z.clone());
        Ok(tape.value(bound.decode(&tape, zv)?))
    }

    /// Serializes to the `BSV1` checkpoint layout: magic, `u32` extent
    /// count, `u32` extents, then every parameter as an `f64`, all
    /// little-endian, in [`VaeModel::parameters`] order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let extents = self.arch.extents();
        let mut out = Vec::with_capacity(8 + 4 * extents.len() + 8 * self.arch.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
        for e in extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in self.parameters().flat_map(|t| t.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing BSV1 magic".into()));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| bad(format!("truncated header at byte {at}")))
        };
        let count = read_u32(4)? as usize;
        let extents = (0..count)
            .map(|i| read_u32(8 + 4 * i).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = Architecture::from_extents(&extents)?;
        let start = 8 + 4 * count;
        let payload = &bytes[start..];
        let n = arch.parameter_count();
        if payload.len() != 8 * n {
            return Err(bad(format!(
                "expected {} parameter bytes after offset {start}, found {}",
                8 * n,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut model = Self::zeros(arch)?;
        model.set_flat_params(&values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// A model whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
    latent_dim: usize,
    data_dim: usize,
}

fn mlp(tape: &Tape, layers: &[(Var, Var)], x: Var) -> crate::autodiff::Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.add_row(tape.matmul(h, w)?, b)?;
        if i + 1 < layers.len() {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

impl BoundModel {
    /// Parameter handles in [`VaeModel::parameters`] order.
    pub fn params(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    /// `q(z|x)`; `log σ²_z` is clamped to `±LOG_VAR_BOUND`.
    pub fn encode(&self, tape: &Tape, x: Var) -> crate::autodiff::Result<DiagGaussian> {
        let out = mlp(tape, &self.encoder, x)?;
        let l = self.latent_dim;
        let mu = tape.slice_cols(out, 0, l)?;
        let raw = tape.slice_cols(out, l, 2 * l)?;
        let log_var = tape.clamp(raw, -LOG_VAR_BOUND, LOG_VAR_BOUND);
        DiagGaussian::new(tape, mu, log_var)
    }

    /// Decoder mean `μ_x(z)`.
    pub fn decode(&self, tape: &Tape, z: Var) -> crate::autodiff::Result<Var> {
        mlp(tape, &self.decoder, z)
    }
}
