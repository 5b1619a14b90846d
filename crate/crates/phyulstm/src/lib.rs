//! Physics-informed causal U-Net + LSTM surrogate modeling of nonlinear
//! dynamic systems under ground-motion excitation.
//!
//! The crate bundles everything needed to run the full pipeline at desk
//! scale: a tensor tape with reverse-mode differentiation ([`tape`]), the
//! network blocks ([`unet`], [`lstm`], [`model`]), the finite-difference
//! differentiator ([`fd`]), the three physics-informed loss regimes
//! ([`losses`]), the ground-truth simulator and motion generator
//! ([`dynamics`]), dataset tooling ([`dataset`]), the training harness
//! ([`train`], [`checkpoint`]), and the evaluation suite ([`eval`]).

pub mod checkpoint;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod fd;
pub mod grid;
pub mod losses;
pub mod lstm;
pub mod model;
pub mod numdiff;
pub mod tape;
pub mod train;
pub mod unet;

pub use dataset::{GroundMotionRecord, Normalizer, RecordSet, Split};
pub use dynamics::{OscillatorParams, StateTrajectory};
pub use error::{CheckpointError, DataError, EvalError, GridError, TrainError};
pub use fd::FdMatrix;
pub use grid::Grid3;
pub use losses::LossBreakdown;
pub use model::{PhyUlstm, Regime};
pub use tape::{ActKind, BnMode, BnStats, Tape, Var};
pub use train::{TrainConfig, TrainedModel};
pub use unet::UNetPlan;
