//! Masked-image to point-cloud lifting and image/point-cloud fusion classifiers.
//!
//! The crate covers the whole pipeline: mask application and coordinate-mask
//! encoding ([`imaging`]), pixel-to-point lifting with farthest point sampling
//! ([`pixel2point`]), a PointNet-style set encoder and a compact CNN
//! ([`encoders`]), late fusion heads ([`fusion`]), seeded synthetic datasets
//! ([`synthdata`]) and the training/evaluation/ablation loop ([`harness`]).
//! Everything runs on the small autodiff engine in [`numgrad`].

pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod imaging;
pub mod numgrad;
pub mod pixel2point;
pub mod selfcheck;
pub mod synthdata;

pub use error::{Error, Result};
