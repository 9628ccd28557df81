//! Desk-scale laboratory for cross-modal phoneme-viseme alignment.
//!
//! The crate implements, end to end on a synthetic multilingual corpus:
//!
//! - prototype banks over speech and visual features (k-means++ plus
//!   periodic refits) with hard and temperature-softened assignments;
//! - a Jensen-Shannon mutual-information estimator driven by a binary
//!   discriminator over matched vs. shuffled pairs, and the alignment
//!   objective built from it;
//! - pseudo-phoneme guided sparse mixture-of-experts routing with a
//!   balance/entropy-regularized routing loss;
//! - a toy frame decoder with pixel/perceptual/temporal reconstruction
//!   losses;
//! - lip-sync evaluation metrics (landmark distance and mouth-dynamics
//!   correlation) over 26-point lip landmark sequences;
//! - a corpus generator whose ground-truth phoneme-viseme correspondence
//!   makes alignment recovery and zero-shot transfer directly assertable.
//!
//! Everything trainable sits on the in-crate reverse-mode tape
//! ([`diffcore`]), so every loss is verified against central finite
//! differences.

pub mod align;
pub mod diffcore;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod prototypes;
pub mod router;
pub mod seeds;
pub mod synthcorpus;

pub use error::{Error, Result};
