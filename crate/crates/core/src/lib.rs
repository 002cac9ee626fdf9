//! Adversarial mutual-leakage segmentation.
//!
//! A U-Net generator and a conditional PatchGAN discriminator exchange
//! information in both directions while training: discriminator feature maps
//! reach the generator's encoder through position attention ([`ata`]), and
//! per-pixel difficulty maps built from the decoder's ground-truth confidence
//! reach both networks ([`pda`]). [`aml`] wires the two-pass training step and
//! its losses; [`trainer`] runs optimization and cross-validation.

pub mod aml;
pub mod ata;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod labels;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod pda;
pub mod trainer;

pub use error::{Error, Result};
