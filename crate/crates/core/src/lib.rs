//! A desk-scale diffusion-training laboratory built around EDM-preconditioned
//! denoising with adaptive log-SNR reweighting (ALSR).
//!
//! The crate covers the full loop on synthetic 2-D data: noise-level sampling
//! in log-SNR coordinates, EDM preconditioning and loss weighting, the
//! adaptive batch-centered weight kernel, streaming per-bin loss telemetry,
//! an exactly verifiable importance-sampling module on discrete populations,
//! a small MLP denoiser with hand-derived gradients, deterministic training
//! and ODE sampling, and two-sample distribution metrics for evaluating
//! generated samples.

pub mod adaptive_weight;
pub mod artifacts;
pub mod config;
pub mod denoiser_model;
pub mod edm_core;
pub mod error;
pub mod generation_eval;
pub mod rng;
pub mod snr_domain;
pub mod telemetry;
pub mod trainer;
pub mod variance_lab;

pub use error::{Error, Result};
