//! Procedural defect images. Only `+ - * /` and `sqrt` touch floating
//! point, so the output is bit-identical across platforms for a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{split_neu, DataError, DatasetSplit, LabeledImage, CLASS_PREFIXES, DEFAULT_SIZE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_class: 300, size: DEFAULT_SIZE, seed: 42 }
    }
}

struct Canvas {
    size: usize,
    delta: Vec<f64>,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self { size, delta: vec![0.0; size * size], mask: vec![false; size * size] }
    }

    fn mark(&mut self, x: usize, y: usize, delta: f64) {
        let i = y * self.size + x;
        self.delta[i] = delta;
        self.mask[i] = true;
    }

    /// Pixels whose centre lies within `half_width` of segment `a`-`b`.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, delta: f64) {
        let s = self.size as f64;
        let lo_x = (a.0.min(b.0) - half_width - 1.0).max(0.0) as usize;
        let hi_x = (a.0.max(b.0) + half_width + 1.0).clamp(0.0, s - 1.0) as usize;
        let lo_y = (a.1.min(b.1) - half_width - 1.0).max(0.0) as usize;
        let hi_y = (a.1.max(b.1) + half_width + 1.0).clamp(0.0, s - 1.0) as usize;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (px, py) = (x as f64 + 0.5 - a.0, y as f64 + 0.5 - a.1);
                let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= half_width * half_width {
                    self.mark(x, y, delta);
                }
            }
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let (x, y): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = (x * x + y * y).sqrt();
        if n > 0.1 && n <= 1.0 {
            return (x / n, y / n);
        }
    }
}

/// Smooth random field in roughly `[-1, 1]` with features about `cell`
/// pixels across.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Vec<f64> {
    let cell = cell.max(1.0);
    let g = (size as f64 / cell) as usize + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy as usize, smooth(fy - (fy as usize) as f64));
        for x in 0..size {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx as usize, smooth(fx - (fx as usize) as f64));
            let at = |r: usize, c: usize| lattice[r * g + c];
            let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * tx;
            let bottom = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

fn crazing(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    let d1 = unit(rng);
    let d2 = (-d1.1, d1.0);
    for i in 0..rng.gen_range(25..40) {
        let base = if i % 2 == 0 { d1 } else { d2 };
        let j: f64 = rng.gen_range(-0.25..0.25);
        let dir = (base.0 - j * base.1, base.1 + j * base.0);
        let len = rng.gen_range(0.08..0.2) * s;
        let centre = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let a = (centre.0 - dir.0 * len / 2.0, centre.1 - dir.1 * len / 2.0);
        let b = (centre.0 + dir.0 * len / 2.0, centre.1 + dir.1 * len / 2.0);
        c.segment(a, b, 0.75, -rng.gen_range(0.12..0.2));
    }
}

fn inclusion(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    for _ in 0..rng.gen_range(2..6) {
        let u = unit(rng);
        let along = rng.gen_range(0.05..0.14) * s;
        let across = (rng.gen_range(0.012..0.03) * s).max(1.0);
        let (cx, cy) = (rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s);
        let depth = rng.gen_range(0.18..0.28);
        let reach = along + 1.0;
        let (lo_x, hi_x) = ((cx - reach).max(0.0) as usize, (cx + reach).min(s - 1.0) as usize);
        let (lo_y, hi_y) = ((cy - reach).max(0.0) as usize, (cy + reach).min(s - 1.0) as usize);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (a, b) = ((px * u.0 + py * u.1) / along, (py * u.0 - px * u.1) / across);
                let r2 = a * a + b * b;
                if r2 <= 1.0 {
                    c.mark(x, y, -depth * (0.6 + 0.4 * (1.0 - r2)));
                }
            }
        }
    }
}

fn patches(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    let noise = value_noise(rng, c.size, s / 4.0);
    for _ in 0..rng.gen_range(1..4) {
        let (cx, cy) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
        let radius = rng.gen_range(0.15..0.3) * s;
        let shift = if rng.gen_bool(0.7) { -rng.gen_range(0.18..0.26) } else { rng.gen_range(0.18..0.26) };
        for y in 0..c.size {
            for x in 0..c.size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let d = (dx * dx + dy * dy).sqrt() / radius;
                if d + 0.35 * noise[y * c.size + x] < 1.0 {
                    c.mark(x, y, shift);
                }
            }
        }
    }
}

fn pitted(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    let (cx, cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let spread = 0.35 * s;
    let scale = (s / 200.0).max(0.5);
    for _ in 0..rng.gen_range(40..90) {
        let u = unit(rng);
        let r: f64 = rng.gen_range(0.0..1.0);
        let (px, py) = (cx + u.0 * r * spread, cy + u.1 * r * spread);
        let radius = rng.gen_range(1.0..2.5) * scale;
        let depth = -rng.gen_range(0.25..0.35);
        c.segment((px, py), (px, py), radius, depth);
    }
}

fn rolled_in_scale(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    let noise = value_noise(rng, c.size, s / 14.0);
    let horizontal = rng.gen_bool(0.5);
    let width = rng.gen_range(0.3..0.6) * s;
    let start = rng.gen_range(0.0..(s - width));
    for y in 0..c.size {
        for x in 0..c.size {
            let t = if horizontal { y } else { x } as f64 + 0.5;
            let n = noise[y * c.size + x];
            if t >= start && t < start + width && (n > 0.3 || n < -0.3) {
                c.mark(x, y, 0.3 * n);
            }
        }
    }
}

fn scratches(c: &mut Canvas, rng: &mut ChaCha8Rng, s: f64) {
    let scale = (s / 200.0).max(0.5);
    for _ in 0..rng.gen_range(1..4) {
        let u = unit(rng);
        let len = rng.gen_range(0.4..0.9) * s;
        let centre = (rng.gen_range(0.25..0.75) * s, rng.gen_range(0.25..0.75) * s);
        let a = (centre.0 - u.0 * len / 2.0, centre.1 - u.1 * len / 2.0);
        let b = (centre.0 + u.0 * len / 2.0, centre.1 + u.1 * len / 2.0);
        let hw = (rng.gen_range(0.8..1.6) * scale).max(0.75);
        let delta = rng.gen_range(0.25..0.35) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        c.segment(a, b, hw, delta);
    }
}

/// Renders image `index` of class `label`.
pub fn render(label: usize, index: usize, size: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    let s = size as f64;
    let level = rng.gen_range(0.4..0.6);
    let low = value_noise(&mut rng, size, s / 3.0);
    let mut c = Canvas::new(size);
    match label {
        0 => crazing(&mut c, &mut rng, s),
        1 => inclusion(&mut c, &mut rng, s),
        2 => patches(&mut c, &mut rng, s),
        3 => pitted(&mut c, &mut rng, s),
        4 => rolled_in_scale(&mut c, &mut rng, s),
        _ => scratches(&mut c, &mut rng, s),
    }
    let pixels = (0..size * size)
        .map(|i| {
            let grain: f64 = rng.gen_range(-0.5..0.5) + rng.gen_range(-0.5..0.5);
            let v = (level + 0.05 * low[i] + 0.04 * grain + c.delta[i]).clamp(0.0, 1.0);
            (v * 255.0).round() as u8 as f32 / 255.0
        })
        .collect();
    let digits = 4.max(index.to_string().len());
    LabeledImage {
        pixels,
        height: size,
        width: size,
        label,
        source_id: format!("{}_{index:0digits$}", CLASS_PREFIXES[label]),
        mask: Some(c.mask),
    }
}

/// Renders `per_class` images per class and splits them 80/20 (240/60 at
/// 300 per class).
pub fn synth(cfg: &SynthConfig) -> Result<DatasetSplit, DataError> {
    let images: Vec<LabeledImage> = (0..NUM_CLASSES * cfg.per_class)
        .into_par_iter()
        .map(|k| render(k / cfg.per_class, k % cfg.per_class, cfg.size, cfg.seed))
        .collect();
    split_neu(images)
}
