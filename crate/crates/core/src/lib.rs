//! Gaussian VAE laboratory for separating the β weight of β-VAE from the
//! decoder variance σ²_x.
//!
//! * [`autodiff`]: reverse-mode differentiation over `f64` tensors.
//! * [`distributions`]: KL, Gaussian NLL, optimal decoder variance,
//!   reparameterization.
//! * [`model`]: fully-connected encoder/decoder and checkpoints.
//! * [`objectives`]: constant-σ², optimal-σ² and BS-VAE losses, the
//!   gradient-equivalence check, ELBO evaluation.
//! * [`training`]: AdamW loop with seeded streams.
//! * [`data`]: MNIST IDX loading and synthetic blobs.
//! * [`analysis`]: rate-distortion sweeps, β–σ² relation, image grids.
//! * [`cli`]: the `bsvae` command line.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod format;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use data::Dataset;
pub use model::{Architecture, VaeModel};
pub use objectives::{Interpretation, Mode, ObjectiveConfig};
pub use training::{TrainConfig, TrainTrace};
