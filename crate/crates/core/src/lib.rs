//! Desk-scale flow-infused-attention virtual try-on.
//!
//! A latent-diffusion inpainting model whose cross-attention sites fuse a
//! dense warp flow, local garment features and high-level spatial tokens,
//! together with a procedural try-on dataset that carries ground-truth flows,
//! the evaluation metrics, and the training and sampling harness.

pub mod ablation;
pub mod attention_kernel;
pub mod checkpoint;
pub mod config;
pub mod conv_kernel;
pub mod data_model;
pub mod dataset_io;
pub mod denoising_model;
pub mod diffusion_engine;
pub mod error;
pub mod fia_attention;
pub mod flow_guider;
pub mod garment_net;
pub mod latent_codec;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod resample;
pub mod spatial_guider;
pub mod synthetic_data;
pub mod unet;

pub use config::{ModelConfig, Profile, SiteId, Variant};
pub use error::{FiaError, Result};
