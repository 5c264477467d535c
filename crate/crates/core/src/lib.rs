//! Lateral field-of-view extension for sector-scan (cone-shaped) ultrasound
//! frames with a conditional GAN.
//!
//! The pipeline: sector geometry and apex detection ([`geometry`]), dataset
//! ingestion with patient-level splits ([`dataset`]), side-cut augmentation
//! ([`augment`]), the U-Net generator and CNN discriminator ([`models`]),
//! adversarial and perceptual losses ([`losses`]), alternating training
//! ([`trainer`]), inference with paste-back compositing ([`outpaint`]),
//! image-quality metrics ([`metrics`]) and the paired area study
//! ([`stats`]).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod imageio;
pub mod inception;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod outpaint;
pub mod seeding;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
