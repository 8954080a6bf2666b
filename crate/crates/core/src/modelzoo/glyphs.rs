//! Procedural 10-class handwritten-style digit glyphs.
//!
//! Each class is a fixed set of stroke polylines in a unit box. Every sample
//! jitters the control points, applies a random affine transform (rotation,
//! anisotropic scale, shear, translation), renders anti-aliased strokes of
//! random width, and adds pixel noise. Pixels are in `[0, 1]` like
//! IDX-loaded data. [`PIXEL_MEAN`] and [`PIXEL_STD`] are the pixel moments
//! of the glyph distribution, for standardizing before training.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Dataset;

pub const CLASSES: usize = 10;

/// Pixel mean over glyphs at side 28 (measured on 6000 samples).
pub const PIXEL_MEAN: f64 = 0.135;
/// Pixel standard deviation over glyphs at side 28.
pub const PIXEL_STD: f64 = 0.289;

type Pt = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, steps: usize) -> Vec<Pt> {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke polylines of one digit class, `y` pointing down.
fn strokes(class: usize) -> Vec<Vec<Pt>> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.26, 0.38, 0.0, 360.0, 20)],
        1 => vec![vec![(0.36, 0.26), (0.52, 0.12), (0.52, 0.88)]],
        2 => {
            let mut top = arc(0.5, 0.33, 0.22, 0.2, 190.0, 360.0 + 25.0, 10);
            top.extend([(0.26, 0.88), (0.78, 0.88)]);
            vec![top]
        }
        3 => {
            let mut s = arc(0.47, 0.31, 0.21, 0.19, -160.0, 90.0, 12);
            s.extend(arc(0.47, 0.69, 0.23, 0.19, -90.0, 160.0, 12));
            vec![s]
        }
        4 => vec![vec![(0.64, 0.88), (0.64, 0.12), (0.2, 0.64), (0.82, 0.64)]],
        5 => {
            let mut s = vec![(0.74, 0.12), (0.33, 0.12), (0.3, 0.46)];
            s.extend(arc(0.5, 0.65, 0.23, 0.22, -125.0, 150.0, 12));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.68, 0.12), (0.45, 0.3)];
            s.extend(arc(0.5, 0.66, 0.21, 0.21, 200.0, 200.0 + 360.0, 18));
            vec![s]
        }
        7 => vec![vec![(0.24, 0.12), (0.76, 0.12), (0.42, 0.88)]],
        8 => vec![
            arc(0.5, 0.3, 0.18, 0.18, 0.0, 360.0, 16),
            arc(0.5, 0.69, 0.22, 0.2, 0.0, 360.0, 16),
        ],
        9 => {
            let mut s = arc(0.5, 0.34, 0.21, 0.21, 20.0, 20.0 + 360.0, 18);
            s.push((0.63, 0.88));
            vec![s]
        }
        _ => unreachable!("class < 10"),
    }
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders one `side x side` sample of `class`.
fn render(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let rot = rng.random_range(-0.2..0.2);
    let sx = rng.random_range(0.8..1.05);
    let sy = sx * rng.random_range(0.88..1.12);
    let shear = rng.random_range(-0.2..0.2);
    let tx = rng.random_range(-0.07..0.07);
    let ty = rng.random_range(-0.07..0.07);
    let half_width = rng.random_range(0.7..1.3) * side as f64 / 28.0;
    let (c, s) = (f64::cos(rot), f64::sin(rot));
    let n = side as f64;
    let map = |(x, y): Pt| -> Pt {
        let (x, y) = (x - 0.5, y - 0.5);
        let (x, y) = (sx * (x + shear * y), sy * y);
        let (x, y) = (c * x - s * y, s * x + c * y);
        ((x + 0.5 + tx) * n, (y + 0.5 + ty) * n)
    };
    let segments: Vec<(Pt, Pt)> = strokes(class)
        .into_iter()
        .flat_map(|line| {
            let pts: Vec<Pt> = line
                .into_iter()
                .map(|(x, y)| map((x + 0.02 * gauss(rng), y + 0.02 * gauss(rng))))
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut img = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| seg_dist(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = (half_width + 0.5 - d).clamp(0.0, 1.0);
            img.push((ink + 0.04 * gauss(rng)).clamp(0.0, 1.0));
        }
    }
    img
}

/// `n` samples with balanced labels `i % 10`, images `[n, 1, side, side]`.
pub fn generate<S: Scalar>(n: usize, side: usize, seed: u64) -> Result<Dataset<S>> {
    if n == 0 || side < 8 {
        return Err(Error::invalid("glyphs need n >= 1 and side >= 8"));
    }
    let mut rng = rng::seeded(seed);
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        data.extend(render(class, side, &mut rng).into_iter().map(S::of));
        labels.push(class as u32);
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, Some(labels))
}
