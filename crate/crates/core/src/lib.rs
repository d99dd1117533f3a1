//! Spatiotemporal cloud-image sequence extrapolation.
//!
//! An encoder of depthwise/squeeze-excitation blocks feeds a fusion stage with
//! a multi-kernel spatial selection branch, a conv-embedded agent-attention
//! temporal branch and temporally generated dynamic kernels; a gated decoder
//! restores full resolution. Training uses MSE + MS-SSIM + decayed
//! cross-entropy. Everything runs in `f64` on the CPU.

pub mod config;
pub mod data;
pub mod train;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod probes;

pub use config::{receptive_field, validate_config, Config, KernelSpec, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use usfnet_autograd::{Graph, Tensor, Var};
