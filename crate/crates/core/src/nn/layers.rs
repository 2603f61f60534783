//! Layer primitives with hand-written backward passes.
//!
//! Every `backward` accumulates parameter gradients into a [`Grads`] buffer
//! and returns the input gradient. Forward inputs needed by the backward pass
//! are kept by the caller.

use crate::image::FeatureMap;
use crate::nn::params::{Grads, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-8;

/// Zero-padded, stride-1 `k × k` convolution. Weights are laid out
/// `[ky][kx][cin][cout]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernel sizes only");
        let w = store.add(
            format!("{name}.weight"),
            &[k, k, cin, cout],
            Init::He {
                fan_in: k * k * cin,
            },
            rng,
        );
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { w, b, cin, cout, k }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        debug_assert_eq!(x.c(), self.cin);
        let (h, w) = (x.h(), x.w());
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        let pad = k / 2;
        let wt = p.get(self.w);
        let bias = p.get(self.b);
        let mut y = FeatureMap::zeros(h, w, cout);
        let xd = x.data();
        let yd = y.data_mut();
        for oy in 0..h {
            for ox in 0..w {
                let out = &mut yd[(oy * w + ox) * cout..][..cout];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let inp = &xd[(iy * w + ix) * cin..][..cin];
                        let wk = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (i, &a) in inp.iter().enumerate() {
                            let row = &wk[i * cout..][..cout];
                            for (o, &wv) in out.iter_mut().zip(row) {
                                *o += a * wv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let (h, w) = (x.h(), x.w());
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        let pad = k / 2;
        let wt = p.get(self.w);
        {
            let db = g.get_mut(self.b);
            for px in dy.data().chunks_exact(cout) {
                for (b, &d) in db.iter_mut().zip(px) {
                    *b += d;
                }
            }
        }
        let mut dx = need_dx.then(|| FeatureMap::zeros(h, w, cin));
        let xd = x.data();
        let dyd = dy.data();
        let dw = g.get_mut(self.w);
        for oy in 0..h {
            for ox in 0..w {
                let d = &dyd[(oy * w + ox) * cout..][..cout];
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = (ky * k + kx) * cin * cout;
                        let inp = &xd[(iy * w + ix) * cin..][..cin];
                        let dwk = &mut dw[base..][..cin * cout];
                        for (i, &a) in inp.iter().enumerate() {
                            for (gw, &dv) in dwk[i * cout..][..cout].iter_mut().zip(d) {
                                *gw += a * dv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wk = &wt[base..][..cin * cout];
                            let dxp = &mut dx.data_mut()[(iy * w + ix) * cin..][..cin];
                            for (i, slot) in dxp.iter_mut().enumerate() {
                                let row = &wk[i * cout..][..cout];
                                let mut s = T::zero();
                                for (&wv, &dv) in row.iter().zip(d) {
                                    s += wv * dv;
                                }
                                *slot += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Zero-padded depthwise `k × k` convolution, weights `[ky][kx][c]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub c: usize,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c: usize,
        k: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[k, k, c],
            Init::He { fan_in: k * k },
            rng,
        );
        let b = store.add(format!("{name}.bias"), &[c], Init::Zeros, rng);
        Self { w, b, c, k }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (h, w, c, k) = (x.h(), x.w(), self.c, self.k);
        let pad = k / 2;
        let wt = p.get(self.w);
        let bias = p.get(self.b);
        let mut y = FeatureMap::zeros(h, w, c);
        let xd = x.data();
        let yd = y.data_mut();
        for oy in 0..h {
            for ox in 0..w {
                let out = &mut yd[(oy * w + ox) * c..][..c];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let inp = &xd[(iy * w + ix) * c..][..c];
                        let wk = &wt[(ky * k + kx) * c..][..c];
                        for ((o, &a), &wv) in out.iter_mut().zip(inp).zip(wk) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let (h, w, c, k) = (x.h(), x.w(), self.c, self.k);
        let pad = k / 2;
        let wt = p.get(self.w);
        {
            let db = g.get_mut(self.b);
            for px in dy.data().chunks_exact(c) {
                for (b, &d) in db.iter_mut().zip(px) {
                    *b += d;
                }
            }
        }
        let mut dx = FeatureMap::zeros(h, w, c);
        let xd = x.data();
        let dyd = dy.data();
        let dw = g.get_mut(self.w);
        for oy in 0..h {
            for ox in 0..w {
                let d = &dyd[(oy * w + ox) * c..][..c];
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = (ky * k + kx) * c;
                        let inp = &xd[(iy * w + ix) * c..][..c];
                        for ch in 0..c {
                            dw[base + ch] += inp[ch] * d[ch];
                        }
                        let dxp = &mut dx.data_mut()[(iy * w + ix) * c..][..c];
                        for ch in 0..c {
                            dxp[ch] += wt[base + ch] * d[ch];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Dense layer on vectors, weights `[in][out]`, optional bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[inp, out],
            Init::He { fan_in: inp },
            rng,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), &[out], Init::Zeros, rng));
        Self { w, b, inp, out }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inp);
        let mut y = match self.b {
            Some(b) => p.get(b).to_vec(),
            None => vec![T::zero(); self.out],
        };
        let wt = p.get(self.w);
        for (i, &a) in x.iter().enumerate() {
            for (o, &wv) in y.iter_mut().zip(&wt[i * self.out..][..self.out]) {
                *o += a * wv;
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        if let Some(b) = self.b {
            for (gb, &d) in g.get_mut(b).iter_mut().zip(dy) {
                *gb += d;
            }
        }
        let dw = g.get_mut(self.w);
        for (i, &a) in x.iter().enumerate() {
            for (gw, &d) in dw[i * self.out..][..self.out].iter_mut().zip(dy) {
                *gw += a * d;
            }
        }
        let wt = p.get(self.w);
        (0..self.inp)
            .map(|i| {
                wt[i * self.out..][..self.out]
                    .iter()
                    .zip(dy)
                    .map(|(&wv, &d)| wv * d)
                    .sum()
            })
            .collect()
    }
}

/// Per-pixel layer normalization across channels with learned affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

pub struct NormCache<T> {
    pub xhat: FeatureMap<T>,
    rstd: Vec<T>,
}

impl ChannelNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[c], Init::Const(1.0), rng);
        let beta = store.add(format!("{name}.beta"), &[c], Init::Zeros, rng);
        Self { gamma, beta, c }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> (FeatureMap<T>, NormCache<T>) {
        let (xhat, rstd) = normalize_channels(x);
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = xhat.clone();
        for px in y.data_mut().chunks_exact_mut(self.c) {
            for ((v, &g), &b) in px.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let c = self.c;
        let gamma = p.get(self.gamma);
        let inv_c = T::one() / T::of(c as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = FeatureMap::zeros(dy.h(), dy.w(), c);
        let mut dxhat = vec![T::zero(); c];
        for (((d, xh), out), &rstd) in dy
            .data()
            .chunks_exact(c)
            .zip(cache.xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
            .zip(&cache.rstd)
        {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ch in 0..c {
                dgamma[ch] += d[ch] * xh[ch];
                dbeta[ch] += d[ch];
                dxhat[ch] = d[ch] * gamma[ch];
                mean_d += dxhat[ch];
                mean_dx += dxhat[ch] * xh[ch];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for ch in 0..c {
                out[ch] = rstd * (dxhat[ch] - mean_d - xh[ch] * mean_dx);
            }
        }
        for (a, b) in g.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in g.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += *b;
        }
        dx
    }
}

/// Zero-mean, unit-variance (population) normalization of every pixel's
/// channel vector. Returns the normalized map and per-pixel `1/σ`.
pub fn normalize_channels<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>) {
    let c = x.c();
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(NORM_EPS);
    let mut out = x.clone();
    let mut rstds = Vec::with_capacity(x.pixels());
    for px in out.data_mut().chunks_exact_mut(c) {
        let mean = px.iter().copied().sum::<T>() * inv_c;
        let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for v in px.iter_mut() {
            *v = (*v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

#[inline]
pub fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_grad<T: Real>(pre: T) -> T {
    if pre > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

pub fn leaky_map<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(leaky)
}

/// `dy ⊙ leaky'(pre)`.
pub fn leaky_backward<T: Real>(pre: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = dy.clone();
    for (d, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        *d *= leaky_grad(p);
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Mean over all pixels, per channel.
pub fn global_avg_pool<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let c = x.c();
    let mut out = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = T::one() / T::of(x.pixels() as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn global_avg_pool_backward<T: Real>(dv: &[T], h: usize, w: usize) -> FeatureMap<T> {
    let inv = T::one() / T::of((h * w) as f64);
    let c = dv.len();
    let px: Vec<T> = dv.iter().map(|&d| d * inv).collect();
    FeatureMap::from_fn(h, w, c, |_, _, ch| px[ch])
}

pub fn add_assign_map<T: Real>(a: &mut FeatureMap<T>, b: &FeatureMap<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

pub fn add_maps<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = a.clone();
    add_assign_map(&mut out, b);
    out
}
