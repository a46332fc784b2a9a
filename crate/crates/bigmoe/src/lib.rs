//! BIG-MoE: fine-grained mixture-of-experts with product-key retrieval, an
//! isolated gating mechanism, and a convolutional prompt bypass, embedded in
//! a small vision transformer trained on a synthetic multimodal anti-spoofing
//! benchmark.
//!
//! Layout mirrors the subsystems:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and Adam
//! - [`routing`]: product-key retrieval and noisy top-k gating
//! - [`igma`]: the isolated-gating expert adapter
//! - [`cpb`]: prompt construction and per-layer refinement (CDC, ECA)
//! - [`backbone`]: the vision transformer carrying the adapters
//! - [`data`]: synthetic multimodal anti-spoofing domains
//! - [`metrics`]: HTER / AUC / EER
//! - [`config`], [`checkpoint`], [`train`], [`ablation`]: the run harness
//! - [`check`]: independent oracles (finite differences, brute-force suites)



pub mod ablation;
pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod cpb;




mod error;
pub mod igma;
pub mod metrics;
pub mod rng;
pub mod train;
pub mod routing;
pub mod tensor;


pub use error::{Error, Result};
pub use tensor::Tensor;
