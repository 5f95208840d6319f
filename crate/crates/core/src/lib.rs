//! Exact path kernel reconstruction of gradient-descent-trained classifiers.
//!
//! A network trained by full-batch gradient descent from checkpoints
//! `w_0..w_N` is rewritten as a sum over steps and training points of
//! kernel evaluations. [`kernel::PathKernel`] evaluates that sum, its
//! discrete and frozen-tangent baselines, and the kernel-machine form.
//! [`gp`] turns the kernel into a Gaussian-process prior.
//!
//! ```no_run
//! use epk_core::{data, kernel::{PathKernel, Quadrature}, trainer::TrainConfig, nn::ModelSpec};
//!
//! let blobs = data::gen_blobs(&data::BlobSpec::toy(0))?;
//! let cfg = TrainConfig {
//!     model: ModelSpec::mlp(&[100, 8, 3]),
//!     lr: epk_core::StepSchedule::Constant(0.5),
//!     steps: 100,
//!     seed: 0,
//!     loss: Default::default(),
//! };
//! let traj = cfg.train(&blobs)?;
//! let pk = PathKernel::new(&traj, &blobs)?;
//! let report = pk.epk_predict(blobs.x(0), Quadrature::left(100))?;
//! assert!(report.max_abs_err < 1e-3);
//! # Ok::<(), epk_core::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod nn;
pub mod numeric;
pub mod report;
pub mod rng;
pub mod trainer;

pub use data::{Fingerprint, LabeledDataset};
pub use error::{Error, ErrorKind, Result};
pub use gp::{GramMatrix, PsdReport};
pub use kernel::{KernelBlock, Method, PathKernel, PredictionReport, Quadrature};
pub use nn::{FlatWeights, Jacobian, Logits, Loss, ModelSpec};
pub use trainer::{StepSchedule, TrainConfig, Trajectory};
