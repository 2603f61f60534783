//! Pixel structure encoder: conv stem, residual blocks, global average
//! pooling and a two-layer head mapping any even-sized image to a length-`N`
//! structural representation.

use crate::error::{shape_err, Result};
use crate::image::{FeatureMap, ImageTensor};
use crate::nn::layers::{
    add_maps, global_avg_pool, global_avg_pool_backward, leaky, leaky_backward, leaky_grad,
    leaky_map, Conv2d, Linear,
};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::StructuralRep;
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseConfig {
    pub channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
    pub latent: usize,
}

#[derive(Clone, Debug)]
pub struct Pse {
    cfg: PseConfig,
    stem: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache<T> {
    input: FeatureMap<T>,
    pre: FeatureMap<T>,
    act: FeatureMap<T>,
}

pub struct PseCache<T> {
    input: ImageTensor<T>,
    stem_pre: FeatureMap<T>,
    blocks: Vec<BlockCache<T>>,
    feat_dims: (usize, usize),
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

impl Pse {
    /// Registers the encoder's parameters: He-normal conv/linear weights,
    /// zero biases.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: PseConfig) -> Self {
        let stem = Conv2d::new(store, rng, "pse.stem", cfg.channels, cfg.width, 3);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                (
                    Conv2d::new(
                        store,
                        rng,
                        &format!("pse.block{i}.conv1"),
                        cfg.width,
                        cfg.width,
                        3,
                    ),
                    Conv2d::new(
                        store,
                        rng,
                        &format!("pse.block{i}.conv2"),
                        cfg.width,
                        cfg.width,
                        3,
                    ),
                )
            })
            .collect();
        let fc1 = Linear::new(store, rng, "pse.fc1", cfg.width, cfg.hidden, true);
        let fc2 = Linear::new(store, rng, "pse.fc2", cfg.hidden, cfg.latent, true);
        Self {
            cfg,
            stem,
            blocks,
            fc1,
            fc2,
        }
    }

    pub fn config(&self) -> PseConfig {
        self.cfg
    }

    fn check(&self, img: &ImageTensor<impl Real>) -> Result<()> {
        if img.c() != self.cfg.channels {
            return Err(shape_err!(
                "encoder expects {} channels, image has {}",
                self.cfg.channels,
                img.c()
            ));
        }
        Ok(())
    }

    /// Feature map entering the global pooling layer.
    pub fn features<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
    ) -> Result<FeatureMap<T>> {
        self.check(img)?;
        let mut x = leaky_map(&self.stem.forward(p, img));
        for (c1, c2) in &self.blocks {
            let a = leaky_map(&c1.forward(p, &x));
            x = add_maps(&x, &c2.forward(p, &a));
        }
        Ok(x)
    }

    /// Head applied to pooled features.
    pub fn head<T: Real>(&self, p: &ParamStore<T>, pooled: &[T]) -> StructuralRep<T> {
        let h: Vec<T> = self.fc1.forward(p, pooled).into_iter().map(leaky).collect();
        StructuralRep(self.fc2.forward(p, &h))
    }

    pub fn encode<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
    ) -> Result<StructuralRep<T>> {
        let f = self.features(p, img)?;
        Ok(self.head(p, &global_avg_pool(&f)))
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
    ) -> Result<(StructuralRep<T>, PseCache<T>)> {
        self.check(img)?;
        let stem_pre = self.stem.forward(p, img);
        let mut x = leaky_map(&stem_pre);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (c1, c2) in &self.blocks {
            let pre = c1.forward(p, &x);
            let act = leaky_map(&pre);
            let next = add_maps(&x, &c2.forward(p, &act));
            blocks.push(BlockCache { input: x, pre, act });
            x = next;
        }
        let pooled = global_avg_pool(&x);
        let hidden_pre = self.fc1.forward(p, &pooled);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| leaky(v)).collect();
        let out = self.fc2.forward(p, &hidden);
        let cache = PseCache {
            input: img.clone(),
            stem_pre,
            blocks,
            feat_dims: (x.h(), x.w()),
            pooled,
            hidden_pre,
            hidden,
        };
        Ok((StructuralRep(out), cache))
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// representation.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &PseCache<T>,
        dout: &[T],
        g: &mut Grads<T>,
    ) {
        let dh = self.fc2.backward(p, &cache.hidden, dout, g);
        let dh_pre: Vec<T> = dh
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(&d, &pre)| d * leaky_grad(pre))
            .collect();
        let dpooled = self.fc1.backward(p, &cache.pooled, &dh_pre, g);
        let (h, w) = cache.feat_dims;
        let mut dx = global_avg_pool_backward(&dpooled, h, w);
        for ((c1, c2), bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dact = c2.backward(p, &bc.act, &dx, g, true).unwrap();
            let dpre = leaky_backward(&bc.pre, &dact);
            let dinner = c1.backward(p, &bc.input, &dpre, g, true).unwrap();
            crate::nn::layers::add_assign_map(&mut dx, &dinner);
        }
        let dstem = leaky_backward(&cache.stem_pre, &dx);
        self.stem.backward(p, &cache.input, &dstem, g, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::sampled_param_check;

    fn cfg() -> PseConfig {
        PseConfig {
            channels: 2,
            blocks: 2,
            width: 4,
            hidden: 6,
            latent: 5,
        }
    }

    fn rand_img(rng: &mut Rng, h: usize, w: usize, c: usize) -> ImageTensor<f64> {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.uniform())
    }

    #[test]
    fn output_length_independent_of_resolution() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::<f64>::new();
        let pse = Pse::new(&mut store, &mut rng, cfg());
        for s in [4, 8, 12] {
            let img = rand_img(&mut rng, s, s, 2);
            assert_eq!(pse.encode(&store, &img).unwrap().len(), 5);
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::<f64>::new();
        let pse = Pse::new(&mut store, &mut rng, cfg());
        store.fill_zero();
        let img = rand_img(&mut rng, 6, 6, 2);
        assert!(pse
            .encode(&store, &img)
            .unwrap()
            .0
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::<f64>::new();
        let pse = Pse::new(&mut store, &mut rng, cfg());
        assert!(pse
            .encode(&store, &ImageTensor::<f64>::zeros(4, 4, 3))
            .is_err());
    }

    #[test]
    fn pooling_ignores_spatial_permutation() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::<f64>::new();
        let pse = Pse::new(&mut store, &mut rng, cfg());
        let img = rand_img(&mut rng, 6, 6, 2);
        let feat = pse.features(&store, &img).unwrap();
        let base = pse.head(&store, &global_avg_pool(&feat));
        // Reverse the pixel order of the pooling input.
        let c = feat.c();
        let mut pixels: Vec<&[f64]> = feat.data().chunks_exact(c).collect();
        pixels.reverse();
        let shuffled = FeatureMap::from_vec(feat.h(), feat.w(), c, pixels.concat()).unwrap();
        let permuted = pse.head(&store, &global_avg_pool(&shuffled));
        for (a, b) in base.0.iter().zip(&permuted.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        Pse::new(&mut s1, &mut Rng::new(9), cfg());
        Pse::new(&mut s2, &mut Rng::new(9), cfg());
        assert_eq!(s1, s2);
        for id in s1.ids().filter(|&id| s1.name(id).ends_with(".bias")) {
            assert!(s1.get(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_init_std() {
        let mut rng = Rng::new(10);
        let mut store = ParamStore::<f64>::new();
        let c = 128;
        let conv = Conv2d::new(&mut store, &mut rng, "probe", c, 96, 3);
        let w = store.get(conv.w);
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0 / (9.0 * c as f64)).sqrt();
        assert!((sd - target).abs() < 0.05 * target, "{sd} vs {target}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::<f64>::new();
        let pse = Pse::new(&mut store, &mut rng, cfg());
        // Non-zero biases so no path is trivially dead.
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                for v in store.get_mut(id) {
                    *v = 0.1 * rng.normal();
                }
            }
        }
        let img = rand_img(&mut rng, 6, 8, 2);
        let (_, cache) = pse.forward(&store, &img).unwrap();
        let mut g = store.zeros_like();
        pse.backward(&store, &cache, &[1.0; 5], &mut g);
        let r = sampled_param_check(&store, &g, usize::MAX, &mut rng, |s| {
            pse.encode(s, &img).unwrap().0.iter().sum()
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
