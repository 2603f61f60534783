//! Self-supervised single-image denoising with diffusion-generated
//! structural prompts.
//!
//! A noisy image is split into three half-resolution sub-images; a
//! transformer denoiser is trained to map one onto the others while a latent
//! diffusion branch supplies a structural prompt recovered from the
//! full-resolution image. See the README for the pipeline overview.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod real;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use image::{crop_patch, load_image, save_image, FeatureMap, ImageTensor};
pub use losses::{LossWeights, ReplayTerms};
pub use metrics::{psnr, ssim, MetricReport};
pub use model::{Model, ModelConfig};
pub use nn::StructuralRep;
pub use noise::{apply_noise, NoiseSpec};
pub use real::Real;
pub use rng::Rng;
pub use sampling::{apply_pattern, draw_pattern, srd_sample, SamplePattern};
pub use train::{ModelState, StepRecord, TrainConfig};
