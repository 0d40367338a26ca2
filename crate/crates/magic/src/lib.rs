//! MagIC: a fixed-topology image-processing network built from hybrid
//! FIR-IIR blocks and compressed skip lines, together with a line-buffered
//! streaming execution engine and an abstract hardware cost model.
//!
//! The crate is organized around the dataflow of a line-based imaging
//! pipeline:
//!
//! - [`autodiff`] — minimal tensor container and reverse-mode
//!   differentiation for exactly the operator set the network needs.
//! - [`topology`] — declarative network construction, whole-frame forward,
//!   checkpoint persistence.
//! - [`streaming`] — raster-scan execution with explicit line buffers,
//!   delay scheduling, and skip FIFOs; provably equivalent to the
//!   whole-frame path.
//! - [`dpcm`] — closed-loop DPCM codec for skip-line samples.
//! - [`cost`] — abstract hardware cost accounting (memory bits, line
//!   delays, MAC rates, receptive fields, shift-sum multipliers).
//! - [`data`] — distorted/reference pair generation and PSNR/SSIM metrics.
//! - [`trainer`] — desk-scale training loop and evaluation.

pub mod autodiff;
pub mod cost;
pub mod data;
pub mod dpcm;
pub mod error;
pub mod real;
pub mod streaming;
pub mod topology;
pub mod trainer;
pub mod util;

pub use error::{MagicError, Result};
pub use real::Real;
