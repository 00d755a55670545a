//! Evidence-aware multiple-instance learning.
//!
//! A whole-slide bag of tile features is classified by a small transformer
//! over tile tokens. On top of the shared backbone, a selection head learns
//! a per-tile gate trained so that the kept tiles alone are sufficient for
//! the prediction, the dropped remainder is uninformative, and the kept set
//! is small and spatially coherent. Evidence efficiency is then measured
//! directly: how many top-ranked tiles are needed before the true-class
//! probability clears a threshold, and how fast the curve rises overall.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense arrays, reverse-mode
//!   autodiff, finite-difference verification.
//! - [`params`], [`checkpoint`]: named tensors and their binary format.
//! - [`data`]: bag files, dataset manifests, patient-level splits, and the
//!   synthetic planted-evidence generator.
//! - [`backbone`]: tile tokenizer and transformer encoder/classifier.
//! - [`evidence`]: selection logits, concrete gate, gated bag views.
//! - [`objectives`]: the five-term training loss.
//! - [`metrics`]: sufficiency curves, MSK/AUKC, classification metrics.
//! - [`model`], [`trainer`]: bundled forward passes, two-phase training.
//! - [`svg`], [`config`], [`cli`]: plots, run configuration, subcommands.

pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evidence;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod svg;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use params::ParamSet;
pub use tape::{AutodiffError, NodeId, Tape};
pub use tensor::{Array, Scalar};
