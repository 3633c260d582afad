//! Small-forgery localization by fusing PRNU source-camera verification with
//! a CNN camera-model classifier.
//!
//! The pipeline runs block by block: a per-model CNN scores how likely a
//! block is to come from the target camera model (`phi`), the PRNU
//! fingerprint of the target device is correlated with the block's noise
//! residual (`rho`), and a tiny fully connected network fuses the two into a
//! tamper probability (`theta`). Sliding the block over an image produces a
//! probability map that is thresholded and cleaned into a binary forgery map.
//!
//! [`camsim`] provides a deterministic synthetic camera so that every stage
//! can be trained and evaluated without real data.

pub mod bench;
pub mod camsim;
pub mod cmi;
mod error;
pub mod fft;
pub mod fusion;
pub mod imaging;
pub mod localize;
pub mod nnet;
pub mod plan;
pub mod prnu;
pub mod wavelet;

pub use error::{Error, Result};
