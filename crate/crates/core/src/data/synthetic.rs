use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::autodiff::{Buffer, Labels, Shape};
use crate::error::{Error, Result};

const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.6;

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of pixel center `(y, x)`; inside when ≤ 1.
    fn radius2(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Textured backgrounds with one to three filled, shaded ellipses as
/// foreground (class 1). Foreground covers 2–60% of every mask.
pub fn gen_synthetic(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample>> {
    if h < 32 || w < 32 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::arg(format!(
            "synthetic images need h, w >= 32 and divisible by 4, got ({h}, {w})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_one(&mut rng, h, w)).collect()
}

fn gen_one(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Sample> {
    let side = h.min(w) as f64;
    let (ellipses, mask) = loop {
        let n = rng.gen_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..n)
            .map(|_| {
                let theta = rng.gen_range(0.0..PI);
                Ellipse {
                    cy: rng.gen_range(0.15..0.85) * h as f64,
                    cx: rng.gen_range(0.15..0.85) * w as f64,
                    a: rng.gen_range(0.08..0.25) * side,
                    b: rng.gen_range(0.08..0.25) * side,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let mask: Vec<usize> = (0..h * w)
            .map(|i| usize::from(ellipses.iter().any(|e| e.radius2(i / w, i % w) <= 1.0)))
            .collect();
        let frac = mask.iter().sum::<usize>() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (ellipses, mask);
        }
    };

    let base: [f64; 3] = [
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
    ];
    let fg: [f64; 3] = [
        rng.gen_range(0.75..0.9),
        rng.gen_range(0.3..0.45),
        rng.gen_range(0.25..0.4),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let mut image = Buffer::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let texture: f64 = waves
                .iter()
                .map(|&(fy, fx, phase)| 0.04 * (fy * y as f64 + fx * x as f64 + phase).sin())
                .sum();
            // smooth shading: brightest at the ellipse center
            let shade = ellipses
                .iter()
                .map(|e| e.radius2(y, x))
                .filter(|&r2| r2 <= 1.0)
                .map(|r2| 0.85 + 0.15 * (1.0 - r2))
                .fold(None, |acc: Option<f64>, s| {
                    Some(acc.map_or(s, |a| a.max(s)))
                });
            for c in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                let v = match shade {
                    Some(s) => fg[c] * s,
                    None => base[c],
                } + texture
                    + noise;
                image.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample::new(image, Labels::new(1, h, w, mask)?)
}
