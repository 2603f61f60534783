//! The full pipeline: structure encoder, diffusion prompt generator and the
//! prompt-conditioned transformer, sharing one parameter store.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::diffusion::{reverse_chain, Denoiser, DenoiserConfig, DiffusionSchedule};
use crate::nn::params::ParamStore;
use crate::nn::pse::{Pse, PseConfig};
use crate::nn::spiformer::{Spiformer, SpiformerConfig};
use crate::nn::StructuralRep;
use crate::real::Real;
use crate::rng::Rng;

/// Architecture and diffusion schedule hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Length `N` of the structural representation.
    pub latent: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub pse_blocks: usize,
    pub pse_width: usize,
    pub pse_hidden: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mlp_hidden: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            latent: 256,
            width: 48,
            blocks: 4,
            heads: 2,
            gate_width: 48,
            pse_blocks: 4,
            pse_width: 64,
            pse_hidden: 256,
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            mlp_hidden: 512,
            time_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("latent", self.latent),
            ("width", self.width),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("gate_width", self.gate_width),
            ("pse_width", self.pse_width),
            ("pse_hidden", self.pse_hidden),
            ("steps", self.steps),
            ("mlp_hidden", self.mlp_hidden),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even, got {}",
                self.time_dim
            )));
        }
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end).map(|_| ())
    }

    pub fn pse(&self) -> PseConfig {
        PseConfig {
            channels: self.channels,
            blocks: self.pse_blocks,
            width: self.pse_width,
            hidden: self.pse_hidden,
            latent: self.latent,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent: self.latent,
            hidden: self.mlp_hidden,
            time_dim: self.time_dim,
        }
    }

    pub fn spiformer(&self) -> SpiformerConfig {
        SpiformerConfig {
            channels: self.channels,
            width: self.width,
            blocks: self.blocks,
            heads: self.heads,
            gate_width: self.gate_width,
            latent: self.latent,
        }
    }
}

/// Network structure; the weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub pse: Pse,
    pub denoiser: Denoiser,
    pub spiformer: Spiformer,
    pub schedule: DiffusionSchedule,
}

impl Model {
    /// Builds the networks and registers freshly initialised parameters.
    pub fn new<T: Real>(cfg: ModelConfig, rng: &mut Rng) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let pse = Pse::new(&mut store, rng, cfg.pse());
        let denoiser = Denoiser::new(&mut store, rng, cfg.denoiser());
        let spiformer = Spiformer::new(&mut store, rng, cfg.spiformer());
        let schedule = DiffusionSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        Ok((
            Self {
                cfg,
                pse,
                denoiser,
                spiformer,
                schedule,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Prompt for `img`: encode, then run the reverse chain from `start` at
    /// `t = T` conditioned on the encoding.
    pub fn prompt_from<T: Real>(
        &self,
        p: &ParamStore<T>,
        cond: &[T],
        start: &[T],
    ) -> Result<StructuralRep<T>> {
        reverse_chain(
            &self.denoiser.bind(p),
            &self.schedule,
            start,
            self.schedule.steps(),
            cond,
        )
    }

    /// Full-resolution inference with an explicit encoding of the image.
    pub fn infer_with_condition<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
        cond: &[T],
        rng: &mut Rng,
    ) -> Result<ImageTensor<T>> {
        let start: Vec<T> = (0..self.cfg.latent).map(|_| T::of(rng.normal())).collect();
        let prompt = self.prompt_from(p, cond, &start)?;
        self.spiformer.denoise(p, img, &prompt.0)
    }

    /// Inference path: `c_x = PSE(x)`, reverse diffusion from a unit-normal
    /// draw conditioned on `c_x`, then the transformer on `x`.
    pub fn infer<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
        rng: &mut Rng,
    ) -> Result<ImageTensor<T>> {
        let cond = self.pse.encode(p, img)?;
        self.infer_with_condition(p, img, &cond.0, rng)
    }
}
