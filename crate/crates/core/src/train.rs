//! Optimisation: per-patch forward/backward through the whole pipeline,
//! batch averaging, Adam, EMA shadow weights and learning-rate halving.
//!
//! Every random draw of a step comes from `Rng::derive(seed, [step, patch])`,
//! so a run resumed from a checkpoint replays the same streams.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::{crop_patch, ImageTensor};
use crate::losses::{
    rec_loss, rec_loss_grad, sc_loss, sc_loss_grad, scale_replay_with_condition, total_loss,
    LossWeights, ReplayTerms,
};
use crate::model::{Model, ModelConfig};
use crate::nn::diffusion::{diff_loss, diff_loss_grad, forward_diffuse, reverse_chain_traced};
use crate::nn::params::{Grads, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::sampling::srd_sample;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub total_steps: usize,
    pub batch: usize,
    pub patch: usize,
    /// Optional curriculum of `(first_step, patch)` pairs in increasing step
    /// order; before the first entry `patch` applies.
    pub patch_schedule: Vec<(u64, usize)>,
    pub weights: LossWeights,
    /// Steps between learning-rate halvings; `None` means `total_steps / 5`.
    pub lr_halving: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            total_steps: 5000,
            batch: 4,
            patch: 64,
            patch_schedule: Vec::new(),
            weights: LossWeights::default(),
            lr_halving: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.total_steps == 0 || self.batch == 0 {
            return bad("total_steps and batch must be positive".into());
        }
        for p in std::iter::once(self.patch).chain(self.patch_schedule.iter().map(|e| e.1)) {
            if p < 2 || p % 2 != 0 {
                return bad(format!("patch must be even and at least 2, got {p}"));
            }
        }
        if self.patch_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("patch_schedule steps must be strictly increasing".into());
        }
        if self.lr_halving == Some(0) {
            return bad("lr_halving must be positive".into());
        }
        self.weights.validate()
    }

    /// Patch size used by the update taking the state from `step` to `step + 1`.
    pub fn patch_at(&self, step: u64) -> usize {
        self.patch_schedule
            .iter()
            .rev()
            .find(|(start, _)| *start <= step)
            .map_or(self.patch, |e| e.1)
    }

    /// Largest patch any step will crop.
    pub fn max_patch(&self) -> usize {
        self.patch_schedule
            .iter()
            .map(|e| e.1)
            .fold(self.patch, usize::max)
    }

    pub fn halving_interval(&self) -> usize {
        self.lr_halving.unwrap_or(self.total_steps / 5).max(1)
    }

    /// Learning rate for the update taking the state from `step` to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let halvings = (step / self.halving_interval() as u64).min(1000) as i32;
        self.lr * 0.5f64.powi(halvings)
    }
}

/// Live weights, Adam moments, step counter and EMA shadow.
#[derive(Clone, Debug)]
pub struct ModelState<T = f32> {
    pub model: Model,
    pub params: ParamStore<T>,
    pub adam_m: ParamStore<T>,
    pub adam_v: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub step: u64,
}

fn zeroed<T: Real>(p: &ParamStore<T>) -> ParamStore<T> {
    let mut z = p.clone();
    z.fill_zero();
    z
}

impl<T: Real> ModelState<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (model, params) = Model::new(cfg, &mut Rng::derive(seed, &[u64::MAX]))?;
        Ok(Self::from_parts(model, params))
    }

    pub fn from_parts(model: Model, params: ParamStore<T>) -> Self {
        Self {
            model,
            adam_m: zeroed(&params),
            adam_v: zeroed(&params),
            ema: params.clone(),
            params,
            step: 0,
        }
    }

    /// Denoises a full image with the EMA weights.
    pub fn denoise(&self, img: &ImageTensor<T>, rng: &mut Rng) -> Result<ImageTensor<T>> {
        self.model.infer(&self.ema, img, rng)
    }
}

/// Bias-corrected Adam update. `step` is the 1-based update count. Refuses
/// non-finite gradients before touching any state.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    m: &mut ParamStore<T>,
    v: &mut ParamStore<T>,
    grads: &Grads<T>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some((id, k)) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "gradient of {}[{k}] is {} at update {step}",
            params.name(id),
            grads.flat((id, k)).f64()
        )));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(step as f64));
    let (lr, eps) = (T::of(lr), T::of(cfg.adam_eps));
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        let (mt, vt, pt) = (m.get_mut(id), v.get_mut(id), params.get_mut(id));
        for k in 0..g.len() {
            mt[k] = b1 * mt[k] + (T::one() - b1) * g[k];
            vt[k] = b2 * vt[k] + (T::one() - b2) * g[k] * g[k];
        }
        for k in 0..g.len() {
            let mhat = mt[k] / c1;
            let vhat = vt[k] / c2;
            pt[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live`.
pub fn ema_update<T: Real>(shadow: &mut ParamStore<T>, live: &ParamStore<T>, decay: f64) {
    let (d, k) = (T::of(decay), T::of(1.0 - decay));
    for (s, l) in shadow.tensors_mut().iter_mut().zip(live.tensors()) {
        for (a, &b) in s.iter_mut().zip(l) {
            *a = d * *a + k * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchLosses<T> {
    pub rec: T,
    pub sc: T,
    pub diff: T,
    pub total: T,
}

/// One patch through the training graph.
///
/// Draws the sampling pattern, the diffusion step and its noise from `rng`,
/// then the replay start noise (unless `replay` supplies the terms). When
/// `grads` is given, parameter gradients of the weighted total are added to
/// it. Returns the losses and the replay terms used.
pub fn patch_step<T: Real>(
    model: &Model,
    p: &ParamStore<T>,
    x: &ImageTensor<T>,
    weights: &LossWeights,
    rng: &mut Rng,
    replay: Option<&ReplayTerms<T>>,
    grads: Option<&mut Grads<T>>,
) -> Result<(PatchLosses<T>, ReplayTerms<T>)> {
    let sample = srd_sample(x, rng)?;
    let [m1, m2, m3] = &sample.subs;
    let (c_sub, sub_cache) = model.pse.forward(p, m1)?;
    let (c0, org_cache) = model.pse.forward(p, x)?;

    let sched = &model.schedule;
    let t = 1 + rng.below(sched.steps());
    let eps: Vec<T> = (0..c0.len()).map(|_| T::of(rng.normal())).collect();
    let c_t = forward_diffuse(sched, &c0.0, t, &eps)?;
    let trace = reverse_chain_traced(&model.denoiser, p, sched, &c_t.0, t, &c_sub.0)?;
    let c_hat = &trace.output.0;
    let l_diff = diff_loss(c_hat, &c0.0)?;

    let (pred, spi_cache) = model.spiformer.forward(p, m1, c_hat)?;

    let replay = match replay {
        Some(r) => r.clone(),
        None => scale_replay_with_condition(model, p, x, &c0.0, &sample.pattern, rng)?,
    };

    let l_rec = rec_loss(&pred, m2, m3)?;
    let l_sc = sc_loss(&pred, m2, m3, &replay)?;
    let losses = PatchLosses {
        rec: l_rec,
        sc: l_sc,
        diff: l_diff,
        total: total_loss(l_rec, l_sc, l_diff, weights),
    };

    if let Some(g) = grads {
        let (wr, ws, wd) = (T::of(weights.rec), T::of(weights.sc), T::of(weights.diff));
        let grec = rec_loss_grad(&pred, m2, m3)?;
        let gsc = sc_loss_grad(&pred, m2, m3, &replay)?;
        let dpred_data = grec
            .data()
            .iter()
            .zip(gsc.data())
            .map(|(&a, &b)| wr * a + ws * b)
            .collect();
        let dpred = ImageTensor::from_vec(pred.h(), pred.w(), pred.c(), dpred_data)?;
        let dprompt = model.spiformer.backward(p, &spi_cache, &dpred, g);

        let gdiff = diff_loss_grad(c_hat, &c0.0);
        let dc_hat: Vec<T> = dprompt
            .iter()
            .zip(&gdiff)
            .map(|(&a, &b)| a + wd * b)
            .collect();
        let (dc_t, dc_sub) = trace.backward(&model.denoiser, p, sched, &dc_hat, g);
        let sqrt_ab = T::of(sched.alpha_bar(t).sqrt());
        let dc0: Vec<T> = dc_t
            .iter()
            .zip(&gdiff)
            .map(|(&a, &b)| sqrt_ab * a - wd * b)
            .collect();
        model.pse.backward(p, &sub_cache, &dc_sub, g);
        model.pse.backward(p, &org_cache, &dc0, g);
    }
    Ok((losses, replay))
}

/// Scalar losses of one optimisation step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Number of completed updates after this step.
    pub step: u64,
    pub rec: f64,
    pub sc: f64,
    pub diff: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,L_rec,L_sc,L_diff,total,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.rec, self.sc, self.diff, self.total, self.lr
        )
    }
}

/// Draws `cfg.batch` patches from `data`, averages their gradients and
/// applies Adam and the EMA update.
pub fn train_step<T: Real>(
    state: &mut ModelState<T>,
    data: &[ImageTensor<T>],
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut grads = state.params.zeros_like();
    let mut sums = [0.0f64; 4];
    for b in 0..cfg.batch {
        let mut rng = Rng::derive(cfg.seed, &[state.step, b as u64]);
        let img = &data[rng.below(data.len())];
        let x = crop_patch(img, cfg.patch_at(state.step), &mut rng)?;
        let (l, _) = patch_step(
            &state.model,
            &state.params,
            &x,
            &cfg.weights,
            &mut rng,
            None,
            Some(&mut grads),
        )?;
        for (s, v) in sums.iter_mut().zip([l.rec, l.sc, l.diff, l.total]) {
            *s += v.f64();
        }
    }
    let n = cfg.batch as f64;
    let [rec, sc, diff, total] = sums.map(|s| s / n);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}: rec {rec}, sc {sc}, diff {diff}",
            state.step + 1
        )));
    }
    grads.scale(T::of(1.0 / n));
    let lr = cfg.lr_at(state.step);
    let update = state.step + 1;
    adam_step(
        &mut state.params,
        &mut state.adam_m,
        &mut state.adam_v,
        &grads,
        update,
        lr,
        cfg,
    )?;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay);
    state.step = update;
    Ok(StepRecord {
        step: update,
        rec,
        sc,
        diff,
        total,
        lr,
    })
}

/// Runs steps until `state.step == until`, writing one CSV row per step to
/// `log` and calling `after_step` after each.
pub fn train_until<T: Real>(
    state: &mut ModelState<T>,
    data: &[ImageTensor<T>],
    cfg: &TrainConfig,
    until: u64,
    log: &mut impl Write,
    mut after_step: impl FnMut(&ModelState<T>, &StepRecord) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let rec = train_step(state, data, cfg)?;
        writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io("<training log>", e))?;
        after_step(state, &rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut rng = Rng::new(0);
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", &[1], crate::nn::params::Init::Const(0.5), &mut rng);
        let (mut m, mut v) = (zeroed(&p), zeroed(&p));
        let mut g = p.zeros_like();
        g.get_mut(id)[0] = 1.0;
        let cfg = TrainConfig::default();
        adam_step(&mut p, &mut m, &mut v, &g, 1, cfg.lr, &cfg).unwrap();
        let (m1, v1) = ((1.0 - cfg.beta1) * 1.0, (1.0 - cfg.beta2) * 1.0);
        let expected =
            -cfg.lr * (m1 / (1.0 - cfg.beta1)) / ((v1 / (1.0 - cfg.beta2)).sqrt() + cfg.adam_eps);
        assert!((p.get(id)[0] - (0.5 + expected)).abs() < 1e-15);
        assert!((expected + cfg.lr).abs() < 1e-11);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut rng = Rng::new(0);
        let mut p = ParamStore::<f64>::new();
        let id = p.add(
            "w",
            &[3],
            crate::nn::params::Init::He { fan_in: 1 },
            &mut rng,
        );
        let before = p.clone();
        let (mut m, mut v) = (zeroed(&p), zeroed(&p));
        let g = p.zeros_like();
        let cfg = TrainConfig::default();
        adam_step(&mut p, &mut m, &mut v, &g, 1, cfg.lr, &cfg).unwrap();
        assert_eq!(p, before);
        m.get_mut(id).copy_from_slice(&[1.0, -2.0, 0.5]);
        v.get_mut(id).copy_from_slice(&[1.0, 4.0, 0.25]);
        adam_step(&mut p, &mut m, &mut v, &g, 2, cfg.lr, &cfg).unwrap();
        assert_eq!(m.get(id), &[0.9, -1.8, 0.45]);
        assert!((v.get(id)[1] - 3.96).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut rng = Rng::new(0);
        let mut p = ParamStore::<f32>::new();
        let id = p.add("layer.w", &[2], crate::nn::params::Init::Zeros, &mut rng);
        let (mut m, mut v) = (zeroed(&p), zeroed(&p));
        let mut g = p.zeros_like();
        g.get_mut(id)[1] = f32::NAN;
        let before = p.clone();
        let err =
            adam_step(&mut p, &mut m, &mut v, &g, 1, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer.w[1]"));
        assert_eq!(p, before);
    }

    #[test]
    fn ema_geometric_series() {
        let mut rng = Rng::new(0);
        let mut live = ParamStore::<f64>::new();
        let id = live.add("w", &[2], crate::nn::params::Init::Const(1.0), &mut rng);
        let mut shadow = zeroed(&live);
        ema_update(&mut shadow, &live, 0.999);
        assert!((shadow.get(id)[0] - 0.001).abs() < 1e-18);
        for _ in 1..100 {
            ema_update(&mut shadow, &live, 0.999);
        }
        assert!((shadow.get(id)[0] - (1.0 - 0.999f64.powi(100))).abs() < 1e-12);
        let mut fixed = live.clone();
        ema_update(&mut fixed, &live, 0.999);
        assert_eq!(fixed, live);
    }

    #[test]
    fn lr_halves_on_schedule() {
        let cfg = TrainConfig {
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(19), 2e-4);
        assert_eq!(cfg.lr_at(20), 1e-4);
        assert_eq!(cfg.lr_at(99), 2e-4 / 16.0);
    }

    #[test]
    fn patch_curriculum() {
        let cfg = TrainConfig {
            patch: 16,
            patch_schedule: vec![(100, 32), (250, 24)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.patch_at(0), 16);
        assert_eq!(cfg.patch_at(99), 16);
        assert_eq!(cfg.patch_at(100), 32);
        assert_eq!(cfg.patch_at(249), 32);
        assert_eq!(cfg.patch_at(10_000), 24);
        assert_eq!(cfg.max_patch(), 32);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                patch: 7,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patch_schedule: vec![(10, 32), (10, 16)],
                ..TrainConfig::default()
            },
            TrainConfig {
                patch_schedule: vec![(10, 5)],
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
