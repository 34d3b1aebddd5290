//! Source-free unsupervised domain adaptation for single image dehazing.
//!
//! A compact dehazing network is trained on synthetic hazy/clean pairs, then
//! adapted to a shifted, unlabeled target domain. Adaptation freezes the
//! source network, inserts domain representation normalization (DRN) blocks
//! into its intermediate features and trains only those blocks with
//! frequency-domain (phase and amplitude) and physical prior (dark channel,
//! color attenuation) losses.

pub mod autodiff;
pub mod error;
pub mod haze;
pub mod image;
pub mod net;
pub mod selftest;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
