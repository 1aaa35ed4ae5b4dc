//! Prosody latent modeling at desk scale.
//!
//! This crate holds the algorithmic side of the pipeline: a dense-tensor
//! reverse-mode autodiff substrate, conformer building blocks, a synthetic
//! prosody corpus generator, the vector-quantized prosody autoencoder, the
//! time-varying style diffusion model with deterministic DDIM sampling and
//! classifier-free guidance, one-step diffusion distillation, and the metric
//! machinery for the bottleneck/distillation experiments.
//!
//! Everything here is pure computation over `Vec<f64>` buffers: no files, no
//! clocks, no threads. The companion CLI crate supplies configuration,
//! persistence, and reporting. The crate is `no_std`-compatible (with `alloc`);
//! all transcendental math goes through `libm` so results are bit-identical
//! across build configurations.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adversarial;
pub mod bench;
pub mod codec;
pub mod corpus;
pub mod diffusion;
pub mod distill;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod track;

pub use tape::{Graph, NodeId};
pub use tensor::Tensor;
