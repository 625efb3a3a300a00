//! One-shot face re-enactment with dense 3D facial flow, sized for a single
//! CPU: a still source portrait is animated by the motion parameters of a
//! driving sequence. The source foreground is lifted into a 3D feature
//! volume, warped by a predicted dense 3D flow field, decoded back to an
//! image, refined, composited over the source background, and inpainted.
//!
//! The crate ships its own deterministic synthetic face dataset, a two-phase
//! trainer with the full loss suite, and an evaluation battery
//! (PSNR/SSIM/FID/CSIM/AED/APD/AKD) with pluggable embedders.
//!
//! Entry points:
//! - [`datamodel`] — core data types, dataset I/O, synthetic data generator
//! - [`pipeline`] — the per-frame re-enactment path and checkpoint container
//! - [`training`] — two-phase training loop
//! - [`metrics`] — evaluation battery and CSV reports
//!
//! See the `examples/` directory for runnable walkthroughs of each stage.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod mapping;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transunet;
pub mod warp3d;

pub use config::ModelConfig;
pub use error::{FlowError, Result};
pub use tensor::Tensor;
