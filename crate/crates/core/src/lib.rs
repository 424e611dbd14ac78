//! Benchmark toolkit for studying the robustness-vs-privacy trade-off of
//! image classifiers.
//!
//! The crate trains traditionally-trained (TTM) and adversarially-trained
//! (ATM) classifiers on a CIFAR-like dataset, attacks them with three model
//! inversion methods (plain gradient ascent, multi-scale "dream" ascent, and
//! a class-conditional GAN constrained by shadow data), and quantifies attack
//! success with feature-space nearest-neighbor similarity, an L2 privacy
//! loss, and the minimum adversarial perturbation radius.
//!
//! All attacks operate directly in the pixel domain: images are `[0, 255]`
//! arrays and model-space normalization is an internal concern of each
//! classifier. See the `data`, `classifiers`, `training`, `inversion`,
//! `metrics`, and `harness` modules.

pub mod classifiers;
pub mod data;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
