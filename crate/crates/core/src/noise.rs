//! Synthetic corruption under the Gaussian and Poisson noise settings.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::Rng;

/// Noise model. Gaussian `σ` is given on the 0–255 scale; Poisson `λ` is the
/// photon-count scale, `y = Poisson(λ·x)/λ`. Range variants draw one value
/// uniformly per image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    GaussianFixed { sigma: f64 },
    GaussianRange { min: f64, max: f64 },
    PoissonFixed { lambda: f64 },
    PoissonRange { min: f64, max: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::GaussianFixed { sigma } => sigma.is_finite() && sigma >= 0.0,
            NoiseSpec::GaussianRange { min, max } => {
                min.is_finite() && max.is_finite() && 0.0 <= min && min <= max
            }
            NoiseSpec::PoissonFixed { lambda } => lambda.is_finite() && lambda > 0.0,
            NoiseSpec::PoissonRange { min, max } => {
                min.is_finite() && max.is_finite() && 0.0 < min && min <= max
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise spec {self}")))
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseSpec::GaussianFixed { sigma } => write!(f, "gaussian:{sigma}"),
            NoiseSpec::GaussianRange { min, max } => write!(f, "gaussian:{min}-{max}"),
            NoiseSpec::PoissonFixed { lambda } => write!(f, "poisson:{lambda}"),
            NoiseSpec::PoissonRange { min, max } => write!(f, "poisson:{min}-{max}"),
        }
    }
}

/// Parses `gaussian:25`, `gaussian:5-50`, `poisson:30` or `poisson:5-50`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse noise spec {s:?}"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let spec = match (kind.trim(), rest.split_once('-')) {
            ("gaussian", None) => NoiseSpec::GaussianFixed { sigma: num(rest)? },
            ("gaussian", Some((a, b))) => NoiseSpec::GaussianRange {
                min: num(a)?,
                max: num(b)?,
            },
            ("poisson", None) => NoiseSpec::PoissonFixed { lambda: num(rest)? },
            ("poisson", Some((a, b))) => NoiseSpec::PoissonRange {
                min: num(a)?,
                max: num(b)?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Corrupts `clean` according to `spec`. The output is not clamped, so the
/// noise stays zero-mean given the clean image.
pub fn apply_noise(clean: &ImageTensor, spec: NoiseSpec, rng: &mut Rng) -> Result<ImageTensor> {
    spec.validate()?;
    match spec {
        NoiseSpec::GaussianFixed { sigma } => Ok(gaussian(clean, sigma, rng)),
        NoiseSpec::GaussianRange { min, max } => {
            let sigma = rng.uniform_range(min, max);
            Ok(gaussian(clean, sigma, rng))
        }
        NoiseSpec::PoissonFixed { lambda } => poisson(clean, lambda, rng),
        NoiseSpec::PoissonRange { min, max } => {
            let lambda = rng.uniform_range(min, max);
            poisson(clean, lambda, rng)
        }
    }
}

fn gaussian(clean: &ImageTensor, sigma255: f64, rng: &mut Rng) -> ImageTensor {
    if sigma255 == 0.0 {
        return clean.clone();
    }
    let s = sigma255 / 255.0;
    clean.map(|v| (v as f64 + s * rng.normal()) as f32)
}

fn poisson(clean: &ImageTensor, lambda: f64, rng: &mut Rng) -> Result<ImageTensor> {
    if clean.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "Poisson noise needs nonnegative finite intensities".into(),
        ));
    }
    Ok(clean.map(|v| (rng.poisson(lambda * v as f64) / lambda) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
        let v: Vec<f64> = v.collect();
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var, n)
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = ImageTensor::from_fn(5, 7, 3, |y, x, c| (y + x + c) as f32 / 20.0);
        let out = apply_noise(
            &img,
            NoiseSpec::GaussianFixed { sigma: 0.0 },
            &mut Rng::new(1),
        )
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gaussian_sigma_25_moments() {
        let img = ImageTensor::filled(1000, 1000, 1, 0.4f32);
        let out = apply_noise(
            &img,
            NoiseSpec::GaussianFixed { sigma: 25.0 },
            &mut Rng::new(2),
        )
        .unwrap();
        let (mean, var, n) = stats(
            out.data()
                .iter()
                .zip(img.data())
                .map(|(y, x)| *y as f64 - *x as f64),
        );
        let sd = var.sqrt();
        let target = 25.0 / 255.0;
        assert!((sd - target).abs() < 0.01 * target, "sd {sd}");
        assert!(mean.abs() < 3.0 * target / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn poisson_30_moments_on_constant_half() {
        let img = ImageTensor::filled(1000, 1000, 1, 0.5f32);
        let out = apply_noise(
            &img,
            NoiseSpec::PoissonFixed { lambda: 30.0 },
            &mut Rng::new(3),
        )
        .unwrap();
        let (mean, var, n) = stats(out.data().iter().map(|&y| y as f64));
        let true_var = 0.5 / 30.0;
        assert!(
            (mean - 0.5).abs() < 3.0 * (true_var / n as f64).sqrt(),
            "mean {mean}"
        );
        assert!((var - true_var).abs() < 0.05 * true_var, "var {var}");
    }

    #[test]
    fn poisson_of_black_is_black() {
        let img = ImageTensor::<f32>::zeros(8, 8, 3);
        let out = apply_noise(
            &img,
            NoiseSpec::PoissonRange {
                min: 5.0,
                max: 50.0,
            },
            &mut Rng::new(4),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn range_draw_is_per_image_and_deterministic() {
        let img = ImageTensor::filled(64, 64, 1, 0.5f32);
        let spec: NoiseSpec = "gaussian:5-50".parse().unwrap();
        let a = apply_noise(&img, spec, &mut Rng::new(5)).unwrap();
        let b = apply_noise(&img, spec, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let (_, var, _) = stats(a.data().iter().map(|&v| v as f64));
        let sd = var.sqrt() * 255.0;
        assert!((4.0..52.0).contains(&sd), "sd {sd}");
    }

    #[test]
    fn parse_and_validate() {
        assert_eq!(
            "poisson:30".parse::<NoiseSpec>().unwrap(),
            NoiseSpec::PoissonFixed { lambda: 30.0 }
        );
        assert!("poisson:0".parse::<NoiseSpec>().is_err());
        assert!("gaussian:50-5".parse::<NoiseSpec>().is_err());
        assert!("speckle:3".parse::<NoiseSpec>().is_err());
        let s = NoiseSpec::GaussianRange {
            min: 5.0,
            max: 50.0,
        };
        assert_eq!(s.to_string().parse::<NoiseSpec>().unwrap(), s);
    }
}
