#![allow(dead_code)]

use prompt_sid::nn::params::ParamStore;
use prompt_sid::{ImageTensor, ModelConfig, Rng};

pub fn tiny_config(channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        latent: 16,
        width: 8,
        blocks: 1,
        heads: 2,
        gate_width: 8,
        pse_blocks: 1,
        pse_width: 4,
        pse_hidden: 16,
        steps: 4,
        beta_start: 0.05,
        beta_end: 0.3,
        mlp_hidden: 16,
        time_dim: 8,
    }
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> ImageTensor<f64> {
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.uniform())
}

pub fn jitter(p: &mut ParamStore<f64>, scale: f64, rng: &mut Rng) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += scale * rng.normal());
    }
}
