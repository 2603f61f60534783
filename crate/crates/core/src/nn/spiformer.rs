//! Transformer denoiser conditioned on a structural prompt.
//!
//! Each block runs prompt fusion (SAM), transposed channel self-attention and
//! a gated feed-forward network with additive skips:
//!
//! ```text
//! F ← F + Attn(SAM(F, ĉ))
//! F ← F + Gate(F)
//! ```
//!
//! The network adds its output to the input image (global residual) and has
//! no resolution-dependent parameters.

use crate::error::{shape_err, Result};
use crate::image::{FeatureMap, ImageTensor};
use crate::nn::layers::{
    add_assign_map, add_maps, global_avg_pool, global_avg_pool_backward, ChannelNorm, Conv2d,
    DepthwiseConv, Linear, NormCache,
};
use crate::nn::params::{Grads, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;

/// Smoothing term inside the spatial L2 norms of queries and keys.
const QK_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpiformerConfig {
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub latent: usize,
}

// ---------------------------------------------------------------------------
// Structural attention module

/// Prompt fusion:
/// `c_sca = W_l1·GAP(F̂) + b_l1`,
/// `F = (W_s1 c_sca)⊙(W_c1 ĉ)⊙Norm(F̂) + (W_s2 c_sca)⊙(W_c2 ĉ)`.
#[derive(Clone, Debug)]
pub struct Sam {
    pub l1: Linear,
    pub s1: Linear,
    pub s2: Linear,
    pub c1: Linear,
    pub c2: Linear,
    pub norm: ChannelNorm,
}

pub struct SamCache<T> {
    dims: (usize, usize),
    pooled: Vec<T>,
    csca: Vec<T>,
    s1: Vec<T>,
    s2: Vec<T>,
    e1: Vec<T>,
    e2: Vec<T>,
    prompt: Vec<T>,
    normed: FeatureMap<T>,
    norm: NormCache<T>,
}

impl Sam {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        latent: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, d, true),
            s1: Linear::new(store, rng, &format!("{name}.s1"), d, d, false),
            s2: Linear::new(store, rng, &format!("{name}.s2"), d, d, false),
            c1: Linear::new(store, rng, &format!("{name}.c1"), latent, d, false),
            c2: Linear::new(store, rng, &format!("{name}.c2"), latent, d, false),
            norm: ChannelNorm::new(store, rng, &format!("{name}.norm"), d),
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        prompt: &[T],
    ) -> Result<(FeatureMap<T>, SamCache<T>)> {
        if x.c() != self.l1.inp || prompt.len() != self.c1.inp {
            return Err(shape_err!(
                "SAM expects {} channels and a length-{} prompt, got {} and {}",
                self.l1.inp,
                self.c1.inp,
                x.c(),
                prompt.len()
            ));
        }
        let pooled = global_avg_pool(x);
        let csca = self.l1.forward(p, &pooled);
        let s1 = self.s1.forward(p, &csca);
        let s2 = self.s2.forward(p, &csca);
        let e1 = self.c1.forward(p, prompt);
        let e2 = self.c2.forward(p, prompt);
        let (normed, norm) = self.norm.forward(p, x);
        let d = x.c();
        let scale: Vec<T> = s1.iter().zip(&e1).map(|(&a, &b)| a * b).collect();
        let shift: Vec<T> = s2.iter().zip(&e2).map(|(&a, &b)| a * b).collect();
        let mut out = normed.clone();
        for px in out.data_mut().chunks_exact_mut(d) {
            for ch in 0..d {
                px[ch] = scale[ch] * px[ch] + shift[ch];
            }
        }
        let cache = SamCache {
            dims: (x.h(), x.w()),
            pooled,
            csca,
            s1,
            s2,
            e1,
            e2,
            prompt: prompt.to_vec(),
            normed,
            norm,
        };
        Ok((out, cache))
    }

    /// Returns `(∂/∂F̂, ∂/∂ĉ)`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &SamCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> (FeatureMap<T>, Vec<T>) {
        let d = dy.c();
        let scale: Vec<T> = cache
            .s1
            .iter()
            .zip(&cache.e1)
            .map(|(&a, &b)| a * b)
            .collect();
        let mut dscale = vec![T::zero(); d];
        let mut dshift = vec![T::zero(); d];
        let mut dnormed = dy.clone();
        for ((dpx, npx), dn) in dy
            .data()
            .chunks_exact(d)
            .zip(cache.normed.data().chunks_exact(d))
            .zip(dnormed.data_mut().chunks_exact_mut(d))
        {
            for ch in 0..d {
                dscale[ch] += dpx[ch] * npx[ch];
                dshift[ch] += dpx[ch];
                dn[ch] = dpx[ch] * scale[ch];
            }
        }
        let mul = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| x * y).collect() };
        let ds1 = mul(&dscale, &cache.e1);
        let de1 = mul(&dscale, &cache.s1);
        let ds2 = mul(&dshift, &cache.e2);
        let de2 = mul(&dshift, &cache.s2);
        let mut dcsca = self.s1.backward(p, &cache.csca, &ds1, g);
        for (a, b) in dcsca
            .iter_mut()
            .zip(self.s2.backward(p, &cache.csca, &ds2, g))
        {
            *a += b;
        }
        let dpooled = self.l1.backward(p, &cache.pooled, &dcsca, g);
        let mut dprompt = self.c1.backward(p, &cache.prompt, &de1, g);
        for (a, b) in dprompt
            .iter_mut()
            .zip(self.c2.backward(p, &cache.prompt, &de2, g))
        {
            *a += b;
        }
        let mut dx = self.norm.backward(p, &cache.norm, &dnormed, g);
        add_assign_map(
            &mut dx,
            &global_avg_pool_backward(&dpooled, cache.dims.0, cache.dims.1),
        );
        (dx, dprompt)
    }
}

// ---------------------------------------------------------------------------
// Transposed (channel) self-attention

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub qkv: Conv2d,
    pub temperature: ParamId,
    pub proj: Conv2d,
    pub heads: usize,
    pub d: usize,
}

struct HeadCache<T> {
    qn: Vec<T>,
    kn: Vec<T>,
    q_hat: Vec<T>,
    k_hat: Vec<T>,
    gram: Vec<T>,
    attn: Vec<T>,
}

pub struct AttentionCache<T> {
    input: FeatureMap<T>,
    /// `3d × hw`, channel-major.
    qkv: Vec<T>,
    heads: Vec<HeadCache<T>>,
    mixed: FeatureMap<T>,
}

/// Channel-major copy (`c × hw`) of a channel-last map.
fn channel_major<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let (c, n) = (x.c(), x.pixels());
    let mut out = vec![T::zero(); c * n];
    for (pix, px) in x.data().chunks_exact(c).enumerate() {
        for ch in 0..c {
            out[ch * n + pix] = px[ch];
        }
    }
    out
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

impl ChannelAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "head count must divide channel width"
        );
        Self {
            qkv: Conv2d::new(store, rng, &format!("{name}.qkv"), d, 3 * d, 1),
            temperature: store.add(
                format!("{name}.temperature"),
                &[heads],
                Init::Const(1.0),
                rng,
            ),
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), d, d, 1),
            heads,
            d,
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, AttentionCache<T>)> {
        if x.c() != self.d {
            return Err(shape_err!(
                "attention expects {} channels, got {}",
                self.d,
                x.c()
            ));
        }
        let (d, n) = (self.d, x.pixels());
        let dh = d / self.heads;
        let qkv = channel_major(&self.qkv.forward(p, x));
        let temps = p.get(self.temperature);
        let eps = T::of(QK_NORM_EPS);
        let mut mixed = FeatureMap::zeros(x.h(), x.w(), d);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let chan = |base: usize, i: usize| &qkv[(base + h * dh + i) * n..][..n];
            let mut qn = Vec::with_capacity(dh);
            let mut kn = Vec::with_capacity(dh);
            let mut q_hat = Vec::with_capacity(dh * n);
            let mut k_hat = Vec::with_capacity(dh * n);
            for i in 0..dh {
                let q = chan(0, i);
                let k = chan(d, i);
                let nq = (dot(q, q) + eps).sqrt();
                let nk = (dot(k, k) + eps).sqrt();
                q_hat.extend(q.iter().map(|&v| v / nq));
                k_hat.extend(k.iter().map(|&v| v / nk));
                qn.push(nq);
                kn.push(nk);
            }
            let mut gram = vec![T::zero(); dh * dh];
            for i in 0..dh {
                for j in 0..dh {
                    gram[i * dh + j] = dot(&q_hat[i * n..][..n], &k_hat[j * n..][..n]);
                }
            }
            let tau = temps[h];
            let mut attn = vec![T::zero(); dh * dh];
            for i in 0..dh {
                let row = &gram[i * dh..][..dh];
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(tau * b));
                let mut z = T::zero();
                for j in 0..dh {
                    let e = (tau * row[j] - m).exp();
                    attn[i * dh + j] = e;
                    z += e;
                }
                for j in 0..dh {
                    attn[i * dh + j] /= z;
                }
            }
            let md = mixed.data_mut();
            for i in 0..dh {
                for j in 0..dh {
                    let a = attn[i * dh + j];
                    let v = chan(2 * d, j);
                    for (pix, &vv) in v.iter().enumerate() {
                        md[pix * d + h * dh + i] += a * vv;
                    }
                }
            }
            heads.push(HeadCache {
                qn,
                kn,
                q_hat,
                k_hat,
                gram,
                attn,
            });
        }
        let out = self.proj.forward(p, &mixed);
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                qkv,
                heads,
                mixed,
            },
        ))
    }

    /// Row-stochastic attention matrices of the last forward pass, one per
    /// head, each `dh × dh` row-major.
    pub fn attention_maps<'c, T: Real>(&self, cache: &'c AttentionCache<T>) -> Vec<&'c [T]> {
        cache.heads.iter().map(|h| h.attn.as_slice()).collect()
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &AttentionCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let (d, n) = (self.d, dy.pixels());
        let dh = d / self.heads;
        let dmixed = channel_major(&self.proj.backward(p, &cache.mixed, dy, g, true).unwrap());
        let temps = p.get(self.temperature).to_vec();
        let mut dqkv = vec![T::zero(); 3 * d * n];
        let mut dtemp = vec![T::zero(); self.heads];
        for (h, hc) in cache.heads.iter().enumerate() {
            let tau = temps[h];
            let vch = |j: usize| &cache.qkv[(2 * d + h * dh + j) * n..][..n];
            let dout = |i: usize| &dmixed[(h * dh + i) * n..][..n];
            // out_i = Σ_j A_ij v_j
            let mut da = vec![T::zero(); dh * dh];
            for i in 0..dh {
                for j in 0..dh {
                    da[i * dh + j] = dot(dout(i), vch(j));
                }
            }
            for j in 0..dh {
                let dv = &mut dqkv[(2 * d + h * dh + j) * n..][..n];
                for i in 0..dh {
                    let a = hc.attn[i * dh + j];
                    for (slot, &o) in dv.iter_mut().zip(dout(i)) {
                        *slot += a * o;
                    }
                }
            }
            // Softmax backward, then S = τ·G.
            let mut dgram = vec![T::zero(); dh * dh];
            for i in 0..dh {
                let a = &hc.attn[i * dh..][..dh];
                let dar = &da[i * dh..][..dh];
                let inner = dot(a, dar);
                for j in 0..dh {
                    let ds = a[j] * (dar[j] - inner);
                    dtemp[h] += ds * hc.gram[i * dh + j];
                    dgram[i * dh + j] = ds * tau;
                }
            }
            for i in 0..dh {
                let mut dq_hat = vec![T::zero(); n];
                for j in 0..dh {
                    let gij = dgram[i * dh + j];
                    for (s, &k) in dq_hat.iter_mut().zip(&hc.k_hat[j * n..][..n]) {
                        *s += gij * k;
                    }
                }
                let q_hat = &hc.q_hat[i * n..][..n];
                let proj = dot(q_hat, &dq_hat);
                let inv = T::one() / hc.qn[i];
                let dq = &mut dqkv[(h * dh + i) * n..][..n];
                for ((s, &dqh), &qh) in dq.iter_mut().zip(&dq_hat).zip(q_hat) {
                    *s += (dqh - qh * proj) * inv;
                }
            }
            for j in 0..dh {
                let mut dk_hat = vec![T::zero(); n];
                for i in 0..dh {
                    let gij = dgram[i * dh + j];
                    for (s, &q) in dk_hat.iter_mut().zip(&hc.q_hat[i * n..][..n]) {
                        *s += gij * q;
                    }
                }
                let k_hat = &hc.k_hat[j * n..][..n];
                let proj = dot(k_hat, &dk_hat);
                let inv = T::one() / hc.kn[j];
                let dk = &mut dqkv[(d + h * dh + j) * n..][..n];
                for ((s, &dkh), &kh) in dk.iter_mut().zip(&dk_hat).zip(k_hat) {
                    *s += (dkh - kh * proj) * inv;
                }
            }
        }
        for (a, b) in g.get_mut(self.temperature).iter_mut().zip(&dtemp) {
            *a += *b;
        }
        let (hh, ww) = (dy.h(), dy.w());
        let dqkv_map = FeatureMap::from_fn(hh, ww, 3 * d, |y, x, ch| dqkv[ch * n + y * ww + x]);
        self.qkv
            .backward(p, &cache.input, &dqkv_map, g, true)
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Gated feed-forward

/// `conv_out(u₁ ⊙ u₂)` where `[u₁ | u₂] = dw3×3(conv_1×1(Norm(F̂)))`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub norm: ChannelNorm,
    pub expand: Conv2d,
    pub dw: DepthwiseConv,
    pub out: Conv2d,
    pub g: usize,
}

pub struct GateCache<T> {
    norm: NormCache<T>,
    normed: FeatureMap<T>,
    expanded: FeatureMap<T>,
    u: FeatureMap<T>,
    z: FeatureMap<T>,
}

impl Gate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        g: usize,
    ) -> Self {
        Self {
            norm: ChannelNorm::new(store, rng, &format!("{name}.norm"), d),
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), d, 2 * g, 1),
            dw: DepthwiseConv::new(store, rng, &format!("{name}.dw"), 2 * g, 3),
            out: Conv2d::new(store, rng, &format!("{name}.out"), g, d, 1),
            g,
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, GateCache<T>)> {
        if x.c() != self.norm.c {
            return Err(shape_err!(
                "gate expects {} channels, got {}",
                self.norm.c,
                x.c()
            ));
        }
        let g = self.g;
        let (normed, norm) = self.norm.forward(p, x);
        let expanded = self.expand.forward(p, &normed);
        let u = self.dw.forward(p, &expanded);
        let mut z = FeatureMap::zeros(x.h(), x.w(), g);
        for (zp, up) in z
            .data_mut()
            .chunks_exact_mut(g)
            .zip(u.data().chunks_exact(2 * g))
        {
            for ch in 0..g {
                zp[ch] = up[ch] * up[g + ch];
            }
        }
        let y = self.out.forward(p, &z);
        Ok((
            y,
            GateCache {
                norm,
                normed,
                expanded,
                u,
                z,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &GateCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let gw = self.g;
        let dz = self.out.backward(p, &cache.z, dy, g, true).unwrap();
        let mut du = FeatureMap::zeros(dy.h(), dy.w(), 2 * gw);
        for ((dup, up), dzp) in du
            .data_mut()
            .chunks_exact_mut(2 * gw)
            .zip(cache.u.data().chunks_exact(2 * gw))
            .zip(dz.data().chunks_exact(gw))
        {
            for ch in 0..gw {
                dup[ch] = dzp[ch] * up[gw + ch];
                dup[gw + ch] = dzp[ch] * up[ch];
            }
        }
        let dexp = self.dw.backward(p, &cache.expanded, &du, g);
        let dnormed = self
            .expand
            .backward(p, &cache.normed, &dexp, g, true)
            .unwrap();
        self.norm.backward(p, &cache.norm, &dnormed, g)
    }
}

// ---------------------------------------------------------------------------
// Full network

#[derive(Clone, Debug)]
pub struct Block {
    pub sam: Sam,
    pub attn: ChannelAttention,
    pub gate: Gate,
}

#[derive(Clone, Debug)]
pub struct Spiformer {
    cfg: SpiformerConfig,
    pub conv_in: Conv2d,
    pub blocks: Vec<Block>,
    pub conv_out: Conv2d,
}

struct BlockCache<T> {
    sam: SamCache<T>,
    attn: AttentionCache<T>,
    gate: GateCache<T>,
}

pub struct SpiformerCache<T> {
    input: ImageTensor<T>,
    blocks: Vec<BlockCache<T>>,
    last: FeatureMap<T>,
}

impl Spiformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: SpiformerConfig) -> Self {
        let d = cfg.width;
        let conv_in = Conv2d::new(store, rng, "spi.conv_in", cfg.channels, d, 3);
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                sam: Sam::new(store, rng, &format!("spi.block{i}.sam"), d, cfg.latent),
                attn: ChannelAttention::new(
                    store,
                    rng,
                    &format!("spi.block{i}.attn"),
                    d,
                    cfg.heads,
                ),
                gate: Gate::new(store, rng, &format!("spi.block{i}.gate"), d, cfg.gate_width),
            })
            .collect();
        let conv_out = Conv2d::new(store, rng, "spi.conv_out", d, cfg.channels, 3);
        // Start from the identity map: the image passes through unchanged.
        store.get_mut(conv_out.w).fill(T::zero());
        Self {
            cfg,
            conv_in,
            blocks,
            conv_out,
        }
    }

    pub fn config(&self) -> SpiformerConfig {
        self.cfg
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
        prompt: &[T],
    ) -> Result<(ImageTensor<T>, SpiformerCache<T>)> {
        if img.c() != self.cfg.channels {
            return Err(shape_err!(
                "denoiser expects {} channels, image has {}",
                self.cfg.channels,
                img.c()
            ));
        }
        let mut f = self.conv_in.forward(p, img);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (s, sam) = b.sam.forward(p, &f, prompt)?;
            let (a, attn) = b.attn.forward(p, &s)?;
            add_assign_map(&mut f, &a);
            let (gt, gate) = b.gate.forward(p, &f)?;
            add_assign_map(&mut f, &gt);
            caches.push(BlockCache { sam, attn, gate });
        }
        let out = add_maps(img, &self.conv_out.forward(p, &f));
        Ok((
            out,
            SpiformerCache {
                input: img.clone(),
                blocks: caches,
                last: f,
            },
        ))
    }

    pub fn denoise<T: Real>(
        &self,
        p: &ParamStore<T>,
        img: &ImageTensor<T>,
        prompt: &[T],
    ) -> Result<ImageTensor<T>> {
        Ok(self.forward(p, img, prompt)?.0)
    }

    /// Accumulates parameter gradients for `∂L/∂output` and returns
    /// `∂L/∂prompt`. The image itself is treated as data.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &SpiformerCache<T>,
        dout: &ImageTensor<T>,
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let mut df = self
            .conv_out
            .backward(p, &cache.last, dout, g, true)
            .unwrap();
        let mut dprompt = vec![T::zero(); self.cfg.latent];
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dgate_in = b.gate.backward(p, &bc.gate, &df, g);
            add_assign_map(&mut df, &dgate_in);
            let dsam_out = b.attn.backward(p, &bc.attn, &df, g);
            let (dx, dpr) = b.sam.backward(p, &bc.sam, &dsam_out, g);
            add_assign_map(&mut df, &dx);
            for (a, v) in dprompt.iter_mut().zip(dpr) {
                *a += v;
            }
        }
        self.conv_in.backward(p, &cache.input, &df, g, false);
        dprompt
    }
}
