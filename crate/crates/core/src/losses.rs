//! Training objectives: reconstruction between sub-images, the scale-replay
//! consistency term and their weighted sum.
//!
//! Every `*_grad` function returns the gradient with respect to the
//! prediction only. Replay terms are plain data.

use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::model::Model;
use crate::nn::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::sampling::{apply_pattern, SamplePattern};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub sc: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            sc: 1.5,
            diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rec", self.rec), ("sc", self.sc), ("diff", self.diff)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Sub-images of the denoised full-scale image, `mₙ(f_θ(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayTerms<T = f32> {
    pub m1fx: ImageTensor<T>,
    pub m2fx: ImageTensor<T>,
    pub m3fx: ImageTensor<T>,
}

fn check_dims<T: Real>(what: &str, a: &ImageTensor<T>, others: &[&ImageTensor<T>]) -> Result<()> {
    for o in others {
        if !a.same_dims(o) {
            return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), o.dims()));
        }
    }
    Ok(())
}

/// Mean of squared entries of `a − b`.
pub fn mse<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T> {
    check_dims("mse", a, &[b])?;
    let n = T::of(a.data().len() as f64);
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n)
}

/// `mse(pred, m2) + mse(pred, m3)`.
pub fn rec_loss<T: Real>(
    pred: &ImageTensor<T>,
    m2: &ImageTensor<T>,
    m3: &ImageTensor<T>,
) -> Result<T> {
    Ok(mse(pred, m2)? + mse(pred, m3)?)
}

pub fn rec_loss_grad<T: Real>(
    pred: &ImageTensor<T>,
    m2: &ImageTensor<T>,
    m3: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    check_dims("reconstruction loss", pred, &[m2, m3])?;
    let k = T::of(2.0 / pred.data().len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(m2.data())
        .zip(m3.data())
        .map(|((&p, &a), &b)| k * ((p - a) + (p - b)))
        .collect();
    ImageTensor::from_vec(pred.h(), pred.w(), pred.c(), data)
}

/// The two residuals `pred − m1fx − mₙ + mₙfx` for `n = 2, 3`.
fn sc_residuals<T: Real>(
    pred: &ImageTensor<T>,
    m2: &ImageTensor<T>,
    m3: &ImageTensor<T>,
    r: &ReplayTerms<T>,
) -> Result<[Vec<T>; 2]> {
    check_dims(
        "consistency loss",
        pred,
        &[m2, m3, &r.m1fx, &r.m2fx, &r.m3fx],
    )?;
    let resid = |m: &ImageTensor<T>, mfx: &ImageTensor<T>| -> Vec<T> {
        pred.data()
            .iter()
            .zip(r.m1fx.data())
            .zip(m.data())
            .zip(mfx.data())
            .map(|(((&p, &a), &b), &c)| p - a - b + c)
            .collect()
    };
    Ok([resid(m2, &r.m2fx), resid(m3, &r.m3fx)])
}

pub fn sc_loss<T: Real>(
    pred: &ImageTensor<T>,
    m2: &ImageTensor<T>,
    m3: &ImageTensor<T>,
    r: &ReplayTerms<T>,
) -> Result<T> {
    let n = T::of(pred.data().len() as f64);
    let [a, b] = sc_residuals(pred, m2, m3, r)?;
    let sq = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>() / n;
    Ok(sq(&a) + sq(&b))
}

pub fn sc_loss_grad<T: Real>(
    pred: &ImageTensor<T>,
    m2: &ImageTensor<T>,
    m3: &ImageTensor<T>,
    r: &ReplayTerms<T>,
) -> Result<ImageTensor<T>> {
    let k = T::of(2.0 / pred.data().len() as f64);
    let [a, b] = sc_residuals(pred, m2, m3, r)?;
    let data = a.iter().zip(&b).map(|(&x, &y)| k * (x + y)).collect();
    ImageTensor::from_vec(pred.h(), pred.w(), pred.c(), data)
}

/// `α_rec·rec + α_sc·sc + α_diff·diff`.
pub fn total_loss<T: Real>(rec: T, sc: T, diff: T, w: &LossWeights) -> T {
    T::of(w.rec) * rec + T::of(w.sc) * sc + T::of(w.diff) * diff
}

/// Replay with a precomputed encoding `cond = PSE(x)` of the full image.
pub fn scale_replay_with_condition<T: Real>(
    model: &Model,
    p: &ParamStore<T>,
    x: &ImageTensor<T>,
    cond: &[T],
    pattern: &SamplePattern,
    rng: &mut Rng,
) -> Result<ReplayTerms<T>> {
    let fx = model.infer_with_condition(p, x, cond, rng)?;
    let [m1fx, m2fx, m3fx] = apply_pattern(&fx, pattern)?;
    Ok(ReplayTerms { m1fx, m2fx, m3fx })
}

/// Runs the full inference path on `x` and subsamples the result with the
/// same pattern used for the training sub-images.
pub fn scale_replay<T: Real>(
    model: &Model,
    p: &ParamStore<T>,
    x: &ImageTensor<T>,
    pattern: &SamplePattern,
    rng: &mut Rng,
) -> Result<ReplayTerms<T>> {
    let cond = model.pse.encode(p, x)?;
    scale_replay_with_condition(model, p, x, &cond.0, pattern, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(1, 1, 1, v)
    }

    fn rand_img(rng: &mut Rng, h: usize, w: usize, c: usize) -> ImageTensor<f64> {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.normal())
    }

    #[test]
    fn rec_loss_examples() {
        assert_eq!(rec_loss(&px(0.0), &px(1.0), &px(3.0)).unwrap(), 10.0);
        let a = rand_img(&mut Rng::new(1), 3, 4, 2);
        assert_eq!(rec_loss(&a, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn sc_loss_scalar_example() {
        let r = ReplayTerms {
            m1fx: px(1.0),
            m2fx: px(0.0),
            m3fx: px(1.0),
        };
        assert_eq!(sc_loss(&px(5.0), &px(2.0), &px(3.0), &r).unwrap(), 8.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 2.0, 2.0, &w), 7.0);
        let zero = LossWeights {
            rec: 0.0,
            sc: 0.0,
            diff: 0.0,
        };
        assert_eq!(total_loss(3.0, 4.0, 5.0, &zero), 0.0);
        let (rec, sc, diff) = (0.37, 1.9, 0.2);
        let lin = total_loss(2.0 * rec, sc, diff, &w) - total_loss(rec, sc, diff, &w);
        assert!((lin - w.rec * rec).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            sc: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = ImageTensor::<f64>::zeros(2, 2, 1);
        let b = ImageTensor::<f64>::zeros(2, 4, 1);
        assert!(rec_loss(&a, &a, &b).is_err());
        let r = ReplayTerms {
            m1fx: a.clone(),
            m2fx: a.clone(),
            m3fx: b,
        };
        assert!(sc_loss(&a, &a, &a, &r).is_err());
    }

    #[test]
    fn closed_form_gradients_match_differences() {
        let mut rng = Rng::new(3);
        let pred = rand_img(&mut rng, 3, 2, 2);
        let m2 = rand_img(&mut rng, 3, 2, 2);
        let m3 = rand_img(&mut rng, 3, 2, 2);
        let r = ReplayTerms {
            m1fx: rand_img(&mut rng, 3, 2, 2),
            m2fx: rand_img(&mut rng, 3, 2, 2),
            m3fx: rand_img(&mut rng, 3, 2, 2),
        };
        let grec = rec_loss_grad(&pred, &m2, &m3).unwrap();
        let gsc = sc_loss_grad(&pred, &m2, &m3, &r).unwrap();
        let n = pred.data().len() as f64;
        for i in 0..pred.data().len() {
            let (p, a, b) = (pred.data()[i], m2.data()[i], m3.data()[i]);
            assert!((grec.data()[i] - (2.0 * (p - a) / n + 2.0 * (p - b) / n)).abs() < 1e-15);
            let step = |d: f64| {
                let mut q = pred.clone();
                q.data_mut()[i] += d;
                q
            };
            let h = 1e-5;
            let fd_rec = (rec_loss(&step(h), &m2, &m3).unwrap()
                - rec_loss(&step(-h), &m2, &m3).unwrap())
                / (2.0 * h);
            let fd_sc = (sc_loss(&step(h), &m2, &m3, &r).unwrap()
                - sc_loss(&step(-h), &m2, &m3, &r).unwrap())
                / (2.0 * h);
            assert!((fd_rec - grec.data()[i]).abs() < 1e-6);
            assert!((fd_sc - gsc.data()[i]).abs() < 1e-6);
        }
    }
}
