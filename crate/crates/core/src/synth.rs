//! Synthetic clean images: a colour gradient background with a few flat
//! discs and rectangles. Piecewise-smooth content with real edges, used for
//! smoke training and tests.

use crate::image::ImageTensor;
use crate::rng::Rng;

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
        }
    }
}

/// One `h × w × c` image with values in `[0.1, 0.9]`.
pub fn clean_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> ImageTensor {
    let base: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.2, 0.8)).collect();
    let gy: Vec<f64> = (0..c).map(|_| rng.uniform_range(-0.2, 0.2)).collect();
    let gx: Vec<f64> = (0..c).map(|_| rng.uniform_range(-0.2, 0.2)).collect();
    let count = 3 + rng.below(4);
    let shapes: Vec<(Shape, Vec<f64>)> = (0..count)
        .map(|_| {
            let shape = if rng.below(2) == 0 {
                Shape::Disc {
                    cy: rng.uniform_range(0.0, h as f64),
                    cx: rng.uniform_range(0.0, w as f64),
                    r: rng.uniform_range(0.1, 0.3) * h.min(w) as f64,
                }
            } else {
                let (ya, yb) = (
                    rng.uniform_range(0.0, h as f64),
                    rng.uniform_range(0.0, h as f64),
                );
                let (xa, xb) = (
                    rng.uniform_range(0.0, w as f64),
                    rng.uniform_range(0.0, w as f64),
                );
                Shape::Rect {
                    y0: ya.min(yb),
                    x0: xa.min(xb),
                    y1: ya.max(yb),
                    x1: xa.max(xb),
                }
            };
            let colour = (0..c).map(|_| rng.uniform_range(0.1, 0.9)).collect();
            (shape, colour)
        })
        .collect();
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = base[ch] + gy[ch] * (fy / h as f64 - 0.5) + gx[ch] * (fx / w as f64 - 0.5);
        for (s, colour) in &shapes {
            if s.contains(fy, fx) {
                v = colour[ch];
            }
        }
        v.clamp(0.1, 0.9) as f32
    })
}

/// `count` images from independent streams derived from `seed`.
pub fn clean_set(count: usize, h: usize, w: usize, c: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| clean_image(h, w, c, &mut Rng::derive(seed, &[i as u64])))
        .collect()
}
