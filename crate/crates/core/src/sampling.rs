//! Spatial-redundancy sub-image sampling.
//!
//! The image is tiled into 2×2 blocks whose positions are numbered row-major
//! (`0` top-left, `1` top-right, `2` bottom-left, `3` bottom-right). Each
//! block contributes one pixel to each of three half-resolution sub-images:
//! `p1` anywhere in the block, `p2` and `p3` its two 4-neighbours in either
//! order. The diagonal partner of `p1` is the one unused pixel.

use crate::error::{shape_err, Result};
use crate::image::ImageTensor;
use crate::real::Real;
use crate::rng::Rng;

/// The two 4-neighbours of block position `p` are `p ^ 1` (same row) and
/// `p ^ 2` (same column); `p ^ 3` is the diagonal.
#[inline]
pub fn neighbours(p: u8) -> [u8; 2] {
    [p ^ 1, p ^ 2]
}

/// Block offsets `(dy, dx)` of a row-major position.
#[inline]
pub fn block_offset(p: u8) -> (usize, usize) {
    ((p >> 1) as usize, (p & 1) as usize)
}

/// Per-block choice of `(p1, p2, p3)`, kept so the identical selection can be
/// replayed on the denoised full-resolution image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePattern {
    bh: usize,
    bw: usize,
    /// `p1 << 1 | swap` per block, row-major.
    codes: Vec<u8>,
}

impl SamplePattern {
    /// Builds a pattern from explicit `(p1, swap)` pairs, row-major over
    /// blocks.
    pub fn from_choices(bh: usize, bw: usize, choices: &[(u8, bool)]) -> Result<Self> {
        if choices.len() != bh * bw {
            return Err(shape_err!(
                "{}x{} blocks need {} choices, got {}",
                bh,
                bw,
                bh * bw,
                choices.len()
            ));
        }
        if let Some((p, _)) = choices.iter().find(|(p, _)| *p > 3) {
            return Err(shape_err!("block position {} out of range 0..4", p));
        }
        Ok(Self {
            bh,
            bw,
            codes: choices.iter().map(|&(p, s)| (p << 1) | s as u8).collect(),
        })
    }

    pub fn block_rows(&self) -> usize {
        self.bh
    }
    pub fn block_cols(&self) -> usize {
        self.bw
    }

    /// `[p1, p2, p3]` of block `(i, j)`.
    #[inline]
    pub fn triple(&self, i: usize, j: usize) -> [u8; 3] {
        let code = self.codes[i * self.bw + j];
        let p1 = code >> 1;
        let [a, b] = neighbours(p1);
        if code & 1 == 0 {
            [p1, a, b]
        } else {
            [p1, b, a]
        }
    }

    /// Image row/column of sub-image `n` (0-based) at block `(i, j)`.
    #[inline]
    pub fn source(&self, n: usize, i: usize, j: usize) -> (usize, usize) {
        let (dy, dx) = block_offset(self.triple(i, j)[n]);
        (2 * i + dy, 2 * j + dx)
    }
}

/// Draws one of the 8 valid `(p1, p2, p3)` triples uniformly per block.
pub fn draw_pattern(h: usize, w: usize, rng: &mut Rng) -> Result<SamplePattern> {
    if h < 2 || w < 2 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(shape_err!(
            "sampling needs even dimensions >= 2, got {}x{}",
            h,
            w
        ));
    }
    let (bh, bw) = (h / 2, w / 2);
    let codes = (0..bh * bw).map(|_| rng.below(8) as u8).collect();
    Ok(SamplePattern { bh, bw, codes })
}

/// Gathers the three sub-images selected by `pattern`.
pub fn apply_pattern<T: Real>(
    img: &ImageTensor<T>,
    pattern: &SamplePattern,
) -> Result<[ImageTensor<T>; 3]> {
    if img.h() != 2 * pattern.bh || img.w() != 2 * pattern.bw {
        return Err(shape_err!(
            "pattern for {}x{} image applied to {}x{}",
            2 * pattern.bh,
            2 * pattern.bw,
            img.h(),
            img.w()
        ));
    }
    let c = img.c();
    let mut subs: [Vec<T>; 3] =
        std::array::from_fn(|_| Vec::with_capacity(pattern.bh * pattern.bw * c));
    for i in 0..pattern.bh {
        for j in 0..pattern.bw {
            for (n, sub) in subs.iter_mut().enumerate() {
                let (y, x) = pattern.source(n, i, j);
                sub.extend_from_slice(img.pixel(y, x));
            }
        }
    }
    let [a, b, d] = subs;
    Ok([
        ImageTensor::from_vec(pattern.bh, pattern.bw, c, a)?,
        ImageTensor::from_vec(pattern.bh, pattern.bw, c, b)?,
        ImageTensor::from_vec(pattern.bh, pattern.bw, c, d)?,
    ])
}

pub struct SrdSample<T> {
    pub subs: [ImageTensor<T>; 3],
    pub pattern: SamplePattern,
}

/// Draws a fresh pattern for `img` and applies it.
pub fn srd_sample<T: Real>(img: &ImageTensor<T>, rng: &mut Rng) -> Result<SrdSample<T>> {
    let pattern = draw_pattern(img.h(), img.w(), rng)?;
    let subs = apply_pattern(img, &pattern)?;
    Ok(SrdSample { subs, pattern })
}
