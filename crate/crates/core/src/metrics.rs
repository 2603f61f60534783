//! PSNR and SSIM, and batch evaluation over matched directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::image::{load_image, ImageTensor};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if !a.same_dims(b) {
        return Err(shape_err!(
            "cannot compare {:?} with {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all samples; `+∞` when the images are equal.
pub fn psnr<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-region Gaussian filtering of one plane (`h × w`, row-major).
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, peak 1) per channel,
/// averaged over channels. Only windows fully inside the image count.
pub fn ssim<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!(
            "SSIM needs at least {0}x{0} pixels, got {h}x{w}",
            SSIM_WINDOW
        ));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|v| v.f64())
            .collect();
        let pb: Vec<f64> = b
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|v| v.f64())
            .collect();
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores in filename order plus dataset means (PSNR averaged in
/// dB; an infinite entry makes the mean infinite).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self {
            images,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr_db,ssim\n");
        for i in &self.images {
            let _ = writeln!(s, "{},{},{:.6}", i.name, fmt_db(i.psnr), i.ssim);
        }
        let _ = writeln!(s, "mean,{},{:.6}", fmt_db(self.mean_psnr), self.mean_ssim);
        s
    }

    pub fn summary(&self) -> String {
        let width = self
            .images
            .iter()
            .map(|i| i.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!("{:<width$}  {:>10}  {:>8}\n", "image", "PSNR (dB)", "SSIM");
        for i in &self.images {
            let _ = writeln!(
                s,
                "{:<width$}  {:>10}  {:>8.4}",
                i.name,
                fmt_db(i.psnr),
                i.ssim
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>8.4}\n{} image(s)",
            "mean",
            fmt_db(self.mean_psnr),
            self.mean_ssim,
            self.count()
        );
        s
    }
}

/// Image files (`.png`, `.psid`) in a directory, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png") | Some("psid")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scores every reference image against the same-named file in `denoised`.
pub fn evaluate_dir(
    denoised: impl AsRef<Path>,
    reference: impl AsRef<Path>,
) -> Result<MetricReport> {
    let denoised = denoised.as_ref();
    let mut scores = Vec::new();
    for ref_path in list_images(reference)? {
        let name = ref_path.file_name().unwrap().to_string_lossy().into_owned();
        let other = denoised.join(&name);
        if !other.is_file() {
            return Err(Error::InvalidArgument(format!(
                "{} has no counterpart for {name}",
                denoised.display()
            )));
        }
        let r = load_image(&ref_path)?;
        let d = load_image(&other)?;
        scores.push(ImageScore {
            psnr: psnr(&d, &r, 1.0)?,
            ssim: ssim(&d, &r)?,
            name,
        });
    }
    Ok(MetricReport::from_scores(scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::<f64>::filled(4, 4, 3, 0.3);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &ImageTensor::zeros(4, 2, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_self_and_inverse() {
        let mut rng = Rng::new(1);
        let a = ImageTensor::<f64>::from_fn(16, 13, 2, |_, _, _| rng.uniform());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(
            &ImageTensor::<f64>::zeros(10, 20, 1),
            &ImageTensor::zeros(10, 20, 1)
        )
        .is_err());
    }

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn report_means_in_db() {
        let r = MetricReport::from_scores(vec![
            ImageScore {
                name: "a.png".into(),
                psnr: 20.0,
                ssim: 0.5,
            },
            ImageScore {
                name: "b.png".into(),
                psnr: 30.0,
                ssim: 0.7,
            },
        ]);
        assert_eq!(r.mean_psnr, 25.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-15);
        assert!(r.to_csv().ends_with("mean,25.0000,0.600000\n"));
    }
}
