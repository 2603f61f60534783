//! Latent diffusion over structural representations: linear β schedule,
//! closed-form forward noising, the conditional MLP noise predictor and the
//! deterministic reverse update
//! `ĉ_{t−1} = (ĉ_t − ε̂·(1−α_t)/√(1−ᾱ_t)) / √α_t`.

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{silu, silu_grad, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::StructuralRep;
use crate::real::Real;
use crate::rng::Rng;

/// `β`, `α = 1 − β` and `ᾱ_t = ∏_{i≤t} α_i`, stored 1-based through the
/// accessors (`t ∈ 1..=T`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "diffusion needs at least one step".into(),
            ));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary schedule with `β_t ∈ [0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InvalidArgument(
                "betas must be nonempty and in [0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "time step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(1/√α_t, β_t/√(1−ᾱ_t))`, the two coefficients of the reverse
    /// update. A step with `β_t = 0` has a zero noise coefficient.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let b = self.beta(t);
        let noise = if b == 0.0 {
            0.0
        } else {
            b / (1.0 - self.alpha_bar(t)).sqrt()
        };
        (1.0 / self.alpha(t).sqrt(), noise)
    }

    /// CSV rows `t,beta,alpha,alpha_bar` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            s.push_str(&format!(
                "{t},{},{},{}\n",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t)
            ));
        }
        s
    }
}

/// `c_t = √ᾱ_t·c_0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse<T: Real>(
    sched: &DiffusionSchedule,
    c0: &[T],
    t: usize,
    eps: &[T],
) -> Result<StructuralRep<T>> {
    sched.check_step(t)?;
    if c0.len() != eps.len() {
        return Err(shape_err!(
            "signal length {} vs noise length {}",
            c0.len(),
            eps.len()
        ));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(StructuralRep(
        c0.iter().zip(eps).map(|(&c, &e)| s * c + n * e).collect(),
    ))
}

/// Sinusoidal embedding of a time step: `sin(t·f_k)` then `cos(t·f_k)` for
/// `E/2` frequencies spaced geometrically from 1 down to 10⁻⁴.
pub fn time_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let frac = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (-(1e4f64).ln() * frac).exp();
        let arg = t as f64 * freq;
        out[k] = T::of(arg.sin());
        out[half + k] = T::of(arg.cos());
    }
    out
}

/// Anything that predicts the noise in `ĉ_t` given the condition.
pub trait NoisePredictor<T: Real> {
    fn predict(&self, c_t: &[T], c_sub: &[T], t: usize) -> Vec<T>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

/// Conditional MLP on `concat(ĉ_t, c_sub, emb(t))` with two SiLU hidden
/// layers.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

pub struct DenoiserCache<T> {
    input: Vec<T>,
    pre1: Vec<T>,
    h1: Vec<T>,
    pre2: Vec<T>,
    h2: Vec<T>,
}

impl Denoiser {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: DenoiserConfig) -> Self {
        let inp = 2 * cfg.latent + cfg.time_dim;
        Self {
            cfg,
            l1: Linear::new(store, rng, "diff.mlp1", inp, cfg.hidden, true),
            l2: Linear::new(store, rng, "diff.mlp2", cfg.hidden, cfg.hidden, true),
            l3: Linear::new(store, rng, "diff.mlp3", cfg.hidden, cfg.latent, true),
        }
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    fn check(&self, c_t: &[impl Real], c_sub: &[impl Real]) -> Result<()> {
        if c_t.len() != self.cfg.latent || c_sub.len() != self.cfg.latent {
            return Err(shape_err!(
                "denoiser expects length-{} vectors, got {} and {}",
                self.cfg.latent,
                c_t.len(),
                c_sub.len()
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        c_t: &[T],
        c_sub: &[T],
        t: usize,
    ) -> Result<(Vec<T>, DenoiserCache<T>)> {
        self.check(c_t, c_sub)?;
        let mut input = Vec::with_capacity(self.l1.inp);
        input.extend_from_slice(c_t);
        input.extend_from_slice(c_sub);
        input.extend(time_embedding::<T>(t, self.cfg.time_dim));
        let pre1 = self.l1.forward(p, &input);
        let h1: Vec<T> = pre1.iter().map(|&v| silu(v)).collect();
        let pre2 = self.l2.forward(p, &h1);
        let h2: Vec<T> = pre2.iter().map(|&v| silu(v)).collect();
        let out = self.l3.forward(p, &h2);
        Ok((
            out,
            DenoiserCache {
                input,
                pre1,
                h1,
                pre2,
                h2,
            },
        ))
    }

    /// Returns `(∂/∂ĉ_t, ∂/∂c_sub)` for an upstream gradient on the output.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &DenoiserCache<T>,
        dout: &[T],
        g: &mut Grads<T>,
    ) -> (Vec<T>, Vec<T>) {
        let dh2 = self.l3.backward(p, &cache.h2, dout, g);
        let dpre2: Vec<T> = dh2
            .iter()
            .zip(&cache.pre2)
            .map(|(&d, &v)| d * silu_grad(v))
            .collect();
        let dh1 = self.l2.backward(p, &cache.h1, &dpre2, g);
        let dpre1: Vec<T> = dh1
            .iter()
            .zip(&cache.pre1)
            .map(|(&d, &v)| d * silu_grad(v))
            .collect();
        let din = self.l1.backward(p, &cache.input, &dpre1, g);
        let n = self.cfg.latent;
        (din[..n].to_vec(), din[n..2 * n].to_vec())
    }

    pub fn bind<'a, T: Real>(&'a self, params: &'a ParamStore<T>) -> BoundDenoiser<'a, T> {
        BoundDenoiser { mlp: self, params }
    }
}

/// A denoiser paired with parameter values, usable as a [`NoisePredictor`].
pub struct BoundDenoiser<'a, T> {
    mlp: &'a Denoiser,
    params: &'a ParamStore<T>,
}

impl<T: Real> NoisePredictor<T> for BoundDenoiser<'_, T> {
    fn predict(&self, c_t: &[T], c_sub: &[T], t: usize) -> Vec<T> {
        self.mlp
            .forward(self.params, c_t, c_sub, t)
            .expect("lengths checked by caller")
            .0
    }
}

/// One deterministic reverse update from `t` to `t − 1`.
pub fn reverse_step<T: Real>(
    predictor: &impl NoisePredictor<T>,
    sched: &DiffusionSchedule,
    c_t: &[T],
    c_sub: &[T],
    t: usize,
) -> Result<StructuralRep<T>> {
    sched.check_step(t)?;
    if c_t.len() != c_sub.len() {
        return Err(shape_err!(
            "state length {} vs condition length {}",
            c_t.len(),
            c_sub.len()
        ));
    }
    let eps = predictor.predict(c_t, c_sub, t);
    let (inv_sqrt_a, k) = sched.reverse_coefficients(t);
    let (inv_sqrt_a, k) = (T::of(inv_sqrt_a), T::of(k));
    Ok(StructuralRep(
        c_t.iter()
            .zip(&eps)
            .map(|(&c, &e)| inv_sqrt_a * (c - e * k))
            .collect(),
    ))
}

/// Folds [`reverse_step`] from `start_t` down to 1 and returns `ĉ_0`.
pub fn reverse_chain<T: Real>(
    predictor: &impl NoisePredictor<T>,
    sched: &DiffusionSchedule,
    start: &[T],
    start_t: usize,
    c_sub: &[T],
) -> Result<StructuralRep<T>> {
    sched.check_step(start_t)?;
    let mut c = StructuralRep(start.to_vec());
    for t in (1..=start_t).rev() {
        c = reverse_step(predictor, sched, &c.0, c_sub, t)?;
    }
    Ok(c)
}

/// Reverse chain through the MLP that keeps every step's activations for
/// backpropagation.
pub struct ChainTrace<T> {
    steps: Vec<(usize, DenoiserCache<T>)>,
    pub output: StructuralRep<T>,
}

pub fn reverse_chain_traced<T: Real>(
    mlp: &Denoiser,
    p: &ParamStore<T>,
    sched: &DiffusionSchedule,
    start: &[T],
    start_t: usize,
    c_sub: &[T],
) -> Result<ChainTrace<T>> {
    sched.check_step(start_t)?;
    let mut c = start.to_vec();
    let mut steps = Vec::with_capacity(start_t);
    for t in (1..=start_t).rev() {
        let (eps, cache) = mlp.forward(p, &c, c_sub, t)?;
        let (inv_sqrt_a, k) = sched.reverse_coefficients(t);
        let (inv_sqrt_a, k) = (T::of(inv_sqrt_a), T::of(k));
        c = c
            .iter()
            .zip(&eps)
            .map(|(&v, &e)| inv_sqrt_a * (v - e * k))
            .collect();
        steps.push((t, cache));
    }
    Ok(ChainTrace {
        steps,
        output: StructuralRep(c),
    })
}

impl<T: Real> ChainTrace<T> {
    /// Backpropagates `∂L/∂ĉ_0` through the chain. Accumulates MLP parameter
    /// gradients and returns `(∂L/∂start, ∂L/∂c_sub)`.
    pub fn backward(
        &self,
        mlp: &Denoiser,
        p: &ParamStore<T>,
        sched: &DiffusionSchedule,
        d_out: &[T],
        g: &mut Grads<T>,
    ) -> (Vec<T>, Vec<T>) {
        let mut dc = d_out.to_vec();
        let mut dsub = vec![T::zero(); d_out.len()];
        // Steps were recorded from start_t down to 1; walk them back up.
        for (t, cache) in self.steps.iter().rev() {
            let (inv_sqrt_a, k) = sched.reverse_coefficients(*t);
            let (inv_sqrt_a, k) = (T::of(inv_sqrt_a), T::of(k));
            let d_eps: Vec<T> = dc.iter().map(|&d| -(inv_sqrt_a * k) * d).collect();
            let (d_ct, d_sub) = mlp.backward(p, cache, &d_eps, g);
            for (d, &through_mlp) in dc.iter_mut().zip(&d_ct) {
                *d = inv_sqrt_a * *d + through_mlp;
            }
            for (s, &v) in dsub.iter_mut().zip(&d_sub) {
                *s += v;
            }
        }
        (dc, dsub)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean absolute error `(1/N)·Σ|ĉ − c|`.
pub fn diff_loss<T: Real>(c_hat: &[T], c0: &[T]) -> Result<T> {
    if c_hat.len() != c0.len() || c0.is_empty() {
        return Err(shape_err!(
            "diffusion loss on lengths {} and {}",
            c_hat.len(),
            c0.len()
        ));
    }
    let n = T::of(c0.len() as f64);
    Ok(c_hat
        .iter()
        .zip(c0)
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / n)
}

/// Subgradient of [`diff_loss`] with respect to `c_hat` (negate for `c0`);
/// zero at ties.
pub fn diff_loss_grad<T: Real>(c_hat: &[T], c0: &[T]) -> Vec<T> {
    let n = T::of(c0.len() as f64);
    c_hat
        .iter()
        .zip(c0)
        .map(|(&a, &b)| {
            if a > b {
                T::one() / n
            } else if a < b {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::sampled_param_check;
    use std::cell::Cell;

    struct Fixed(Vec<f64>);
    impl NoisePredictor<f64> for Fixed {
        fn predict(&self, _: &[f64], _: &[f64], _: usize) -> Vec<f64> {
            self.0.clone()
        }
    }

    struct Counting(Cell<usize>);
    impl NoisePredictor<f64> for Counting {
        fn predict(&self, c: &[f64], _: &[f64], _: usize) -> Vec<f64> {
            self.0.set(self.0.get() + 1);
            vec![0.0; c.len()]
        }
    }

    #[test]
    fn schedule_examples() {
        let s = DiffusionSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9);
        let s = DiffusionSchedule::linear(3, 0.1, 0.3).unwrap();
        for (t, want) in [(1, 0.9), (2, 0.72), (3, 0.504)] {
            assert!((s.alpha_bar(t) - want).abs() < 1e-15);
        }
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(3, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(3, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_branches() {
        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let c0 = vec![1.0, -2.0, 0.5];
        let eps = vec![0.3, 0.1, -1.0];
        let a = forward_diffuse(&s, &c0, 4, &[0.0; 3]).unwrap();
        let b = forward_diffuse(&s, &[0.0; 3], 4, &eps).unwrap();
        for i in 0..3 {
            assert_eq!(a.0[i], s.alpha_bar(4).sqrt() * c0[i]);
            assert_eq!(b.0[i], (1.0 - s.alpha_bar(4)).sqrt() * eps[i]);
        }
        assert!(forward_diffuse(&s, &c0, 0, &eps).is_err());
        assert!(forward_diffuse(&s, &c0, 11, &eps).is_err());
    }

    #[test]
    fn zero_prediction_rescales() {
        let s = DiffusionSchedule::linear(5, 0.01, 0.1).unwrap();
        let c = vec![0.4, -1.2];
        let out = reverse_step(&Fixed(vec![0.0; 2]), &s, &c, &[0.0; 2], 3).unwrap();
        for i in 0..2 {
            assert_eq!(out.0[i], c[i] / s.alpha(3).sqrt());
        }
    }

    #[test]
    fn unit_alpha_step_has_unit_prefactor() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.0]).unwrap();
        let c = vec![0.4, -1.2];
        let out = reverse_step(&Fixed(vec![0.5, 0.5]), &s, &c, &[0.0; 2], 2).unwrap();
        assert_eq!(out.0, c);
    }

    #[test]
    fn chain_calls_predictor_once_per_step() {
        let s = DiffusionSchedule::linear(7, 0.01, 0.1).unwrap();
        let p = Counting(Cell::new(0));
        reverse_chain(&p, &s, &[1.0, 2.0], 5, &[0.0, 0.0]).unwrap();
        assert_eq!(p.0.get(), 5);
        let p1 = Fixed(vec![0.2, -0.1]);
        let single = reverse_step(&p1, &s, &[1.0, 2.0], &[0.0; 2], 1).unwrap();
        assert_eq!(
            reverse_chain(&p1, &s, &[1.0, 2.0], 1, &[0.0; 2]).unwrap(),
            single
        );
    }

    #[test]
    fn diff_loss_values_and_errors() {
        assert_eq!(diff_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(diff_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!(diff_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn diff_loss_subgradient() {
        let a = vec![0.5, -0.2, 1.3];
        let b = vec![0.1, 0.4, 1.0];
        let g = diff_loss_grad(&a, &b);
        for i in 0..3 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += 1e-5;
            am[i] -= 1e-5;
            let fd = (diff_loss(&ap, &b).unwrap() - diff_loss(&am, &b).unwrap()) / 2e-5;
            let fd: f64 = fd;
            assert!((fd - g[i]).abs() / fd.abs() < 1e-4);
        }
    }

    fn mlp(rng: &mut Rng) -> (ParamStore<f64>, Denoiser) {
        let mut store = ParamStore::new();
        let d = Denoiser::new(
            &mut store,
            rng,
            DenoiserConfig {
                latent: 4,
                hidden: 8,
                time_dim: 6,
            },
        );
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                for v in store.get_mut(id) {
                    *v = 0.1 * rng.normal();
                }
            }
        }
        (store, d)
    }

    #[test]
    fn zero_weight_mlp_predicts_zero() {
        let mut rng = Rng::new(1);
        let (mut store, d) = mlp(&mut rng);
        store.fill_zero();
        let out = d.bind(&store).predict(&[1.0; 4], &[2.0; 4], 3);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_is_live() {
        let mut rng = Rng::new(2);
        let (store, d) = mlp(&mut rng);
        let c = rng.normal_vec(4);
        let a = d.bind(&store).predict(&c, &[0.1, 0.2, 0.3, 0.4], 5);
        let b = d.bind(&store).predict(&c, &[0.1, 0.2, 0.3, 0.5], 5);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn mlp_and_chain_gradients() {
        let mut rng = Rng::new(3);
        let (store, d) = mlp(&mut rng);
        let sched = DiffusionSchedule::linear(4, 0.05, 0.3).unwrap();
        let start = rng.normal_vec(4);
        let cond = rng.normal_vec(4);
        let probe = rng.normal_vec(4);
        let f = |s: &ParamStore<f64>, start: &[f64], cond: &[f64]| -> f64 {
            reverse_chain(&d.bind(s), &sched, start, 3, cond)
                .unwrap()
                .0
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let trace = reverse_chain_traced(&d, &store, &sched, &start, 3, &cond).unwrap();
        assert_eq!(trace.len(), 3);
        let mut g = store.zeros_like();
        let (dstart, dcond) = trace.backward(&d, &store, &sched, &probe, &mut g);
        let r = sampled_param_check(&store, &g, usize::MAX, &mut rng, |s| f(s, &start, &cond));
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        for i in 0..4 {
            let bump = |v: &[f64], s: f64| {
                let mut v = v.to_vec();
                v[i] += s;
                v
            };
            let fd = (f(&store, &bump(&start, 1e-5), &cond)
                - f(&store, &bump(&start, -1e-5), &cond))
                / 2e-5;
            assert!((fd - dstart[i]).abs() < 1e-7, "start {i}");
            let fd = (f(&store, &start, &bump(&cond, 1e-5))
                - f(&store, &start, &bump(&cond, -1e-5)))
                / 2e-5;
            assert!((fd - dcond[i]).abs() < 1e-7, "cond {i}");
        }
    }
}
