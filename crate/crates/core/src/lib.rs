//! Masked conditioning for small-scale deep generative models.
//!
//! The crate provides:
//! - mixed categorical/numerical condition schemas and a trainable embedding
//!   with explicit masked states ([`conditions`]),
//! - sparsity schedules assigning a masking probability to every gradient
//!   update ([`schedules`]),
//! - a masked-conditioning VAE for structured 2D point clouds ([`mcvae`]),
//! - a pixel-space masked-conditioning diffusion model ([`mcdm`]),
//! - dataset ingestion and a synthetic oracle generator ([`data`]),
//! - the experiment harness: evaluation sweeps, checkpoints, CSV/SVG
//!   emission ([`harness`]).
//!
//! Everything runs on CPU with `f64` precision and is deterministic given a
//! seed. The tiny reverse-mode autodiff backing both models lives in
//! [`graph`].

pub mod conditions;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod mcdm;
pub mod mcvae;
pub mod params;
pub mod schedules;

pub use error::{Error, Result};
