//! Occlusion attribution: how much the target logit drops when a square patch
//! of the input is replaced by a baseline value, and how much of the
//! strongest attribution falls on a defect mask.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_pgm, LabeledImage};
use crate::runtime::{ExecutionPlan, RuntimeError, Tensor};

const BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid occlusion settings: {0}")]
    Config(String),
    #[error("image is {got:?}, plan expects {expected:?}")]
    ImageSize { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("target class {target} out of range for {classes} outputs")]
    Target { target: usize, classes: usize },
    #[error("map is {map:?} but image or mask is {other:?}")]
    Dimensions { map: (usize, usize), other: (usize, usize) },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    /// Mean pixel value of the dataset the model was trained on.
    DatasetMean(f32),
    Constant(f32),
    /// Mean pixel value of the image being explained.
    ImageMean,
}

impl Baseline {
    pub fn value(self, image: &[f32]) -> f32 {
        match self {
            Baseline::DatasetMean(v) | Baseline::Constant(v) => v,
            Baseline::ImageMean => {
                (image.iter().map(|&p| f64::from(p)).sum::<f64>() / image.len().max(1) as f64) as f32
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    pub baseline: Baseline,
}

impl OcclusionConfig {
    /// 16 px patches every 8 px, filled with the dataset mean.
    pub fn new(dataset_mean: f32) -> Self {
        Self { patch: 16, stride: 8, baseline: Baseline::DatasetMean(dataset_mean) }
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize), ExplainError> {
        if self.stride == 0 || self.stride > self.patch || self.patch > height.min(width) {
            return Err(ExplainError::Config(format!(
                "need 1 <= stride ({}) <= patch ({}) <= image size ({height}x{width})",
                self.stride, self.patch
            )));
        }
        Ok(((height - self.patch) / self.stride + 1, (width - self.patch) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Row-major `height x width`.
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// Target logit of the unoccluded image.
    pub base_score: f32,
    /// Occlusion grid `(rows, cols)` before upsampling.
    pub grid: (usize, usize),
    /// Raw grid attributions, row-major.
    pub grid_values: Vec<f32>,
}

fn occluded(image: &LabeledImage, cfg: &OcclusionConfig, fill: f32, row: usize, col: usize, out: &mut Vec<f32>) {
    let start = out.len();
    out.extend_from_slice(&image.pixels);
    for y in row * cfg.stride..row * cfg.stride + cfg.patch {
        let line = start + y * image.width;
        out[line + col * cfg.stride..line + col * cfg.stride + cfg.patch].fill(fill);
    }
}

/// Bilinear upsampling of a grid whose cell `(r, c)` sits at the centre of
/// its patch; positions outside the outermost centres clamp to the edge.
fn upsample(grid: &[f32], rows: usize, cols: usize, cfg: &OcclusionConfig, h: usize, w: usize) -> Vec<f32> {
    let offset = (cfg.patch as f32 - 1.0) / 2.0;
    let coord = |p: usize, n: usize| -> (usize, usize, f32) {
        let t = ((p as f32 - offset) / cfg.stride as f32).clamp(0.0, (n - 1) as f32);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, t - lo as f32)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (r0, r1, fy) = coord(y, rows);
        for x in 0..w {
            let (c0, c1, fx) = coord(x, cols);
            let top = grid[r0 * cols + c0] * (1.0 - fx) + grid[r0 * cols + c1] * fx;
            let bottom = grid[r1 * cols + c0] * (1.0 - fx) + grid[r1 * cols + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Occlusion sensitivity of the pre-softmax `target` logit. Occluded copies
/// are scored in batches through the plan's workers.
pub fn occlusion_map(
    plan: &ExecutionPlan,
    image: &LabeledImage,
    target: usize,
    cfg: &OcclusionConfig,
) -> Result<AttributionMap, ExplainError> {
    let shape = plan.input_shape();
    if (image.height, image.width, 1) != (shape.height, shape.width, shape.channels) {
        return Err(ExplainError::ImageSize {
            expected: (shape.height, shape.width, shape.channels),
            got: (image.height, image.width, 1),
        });
    }
    let classes = plan.num_logits();
    if target >= classes {
        return Err(ExplainError::Target { target, classes });
    }
    let (rows, cols) = cfg.grid(image.height, image.width)?;
    let (h, w) = (image.height, image.width);
    let base = plan.infer_logits(&Tensor::new([1, h, w, 1], image.pixels.clone()))?;
    let base_score = base[target];

    let fill = cfg.baseline.value(&image.pixels);
    let positions: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let mut grid_values = Vec::with_capacity(positions.len());
    let mut batch = Vec::with_capacity(BATCH * h * w);
    for chunk in positions.chunks(BATCH) {
        batch.clear();
        for &(r, c) in chunk {
            occluded(image, cfg, fill, r, c, &mut batch);
        }
        let logits = plan.infer_logits(&Tensor::new([chunk.len(), h, w, 1], std::mem::take(&mut batch)))?;
        grid_values.extend(logits.chunks_exact(classes).map(|l| base_score - l[target]));
        batch = Vec::with_capacity(BATCH * h * w);
    }
    let values = upsample(&grid_values, rows, cols, cfg, h, w);
    Ok(AttributionMap { values, height: h, width: w, target_class: target, base_score, grid: (rows, cols), grid_values })
}

/// Fraction of the positive attribution among the top
/// `ceil(top_fraction * H * W)` pixels that lies inside `mask`. Zero for an
/// empty mask or when the selected pixels carry no positive mass.
pub fn mass_in_mask(map: &AttributionMap, mask: &[bool], top_fraction: f64) -> Result<f64, ExplainError> {
    let n = map.height * map.width;
    if mask.len() != n {
        return Err(ExplainError::Dimensions { map: (map.height, map.width), other: (mask.len(), 1) });
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(ExplainError::Config(format!("top_fraction {top_fraction} outside (0, 1]")));
    }
    if !mask.iter().any(|m| *m) {
        return Ok(0.0);
    }
    let k = ((top_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for &i in &order[..k] {
        let v = f64::from(map.values[i].max(0.0));
        total += v;
        if mask[i] {
            inside += v;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Grows a mask by a Euclidean disc of `radius` pixels.
pub fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[(y * width as isize + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= r * r && (0..height as isize).contains(&ny) && (0..width as isize).contains(&nx) {
                        out[(ny * width as isize + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Min-max normalised attribution as 8-bit gray; an all-equal map is black.
pub fn attribution_bytes(map: &AttributionMap) -> Vec<u8> {
    let (lo, hi) = map.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; map.values.len()];
    }
    map.values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes the input image and the normalised attribution as two PGMs.
pub fn render_overlay(
    map: &AttributionMap,
    image: &LabeledImage,
    image_path: &Path,
    attribution_path: &Path,
) -> Result<(), ExplainError> {
    if (map.height, map.width) != (image.height, image.width) {
        return Err(ExplainError::Dimensions { map: (map.height, map.width), other: (image.height, image.width) });
    }
    let gray: Vec<u8> = image.pixels.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    write_pgm(image_path, image.width, image.height, &gray)?;
    write_pgm(attribution_path, map.width, map.height, &attribution_bytes(map))?;
    Ok(())
}

/// Sidecar written next to an explanation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSidecar {
    pub target_class: usize,
    pub base_score: f32,
    pub grid: [usize; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass_in_mask: Option<f64>,
}

impl ExplainSidecar {
    pub fn new(map: &AttributionMap, mass_in_mask: Option<f64>) -> Self {
        Self { target_class: map.target_class, base_score: map.base_score, grid: [map.grid.0, map.grid.1], mass_in_mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub per_image: Vec<(String, f64)>,
    pub mean: f64,
}

/// Attribution towards each image's own label, scored against its mask
/// dilated by `dilation` pixels. Images without masks are skipped.
pub fn audit(
    plan: &ExecutionPlan,
    images: &[LabeledImage],
    cfg: &OcclusionConfig,
    dilation: usize,
    top_fraction: f64,
) -> Result<AuditReport, ExplainError> {
    let mut per_image = Vec::new();
    for img in images {
        let Some(mask) = &img.mask else { continue };
        let map = occlusion_map(plan, img, img.label, cfg)?;
        let grown = dilate(mask, img.height, img.width, dilation);
        per_image.push((img.source_id.clone(), mass_in_mask(&map, &grown, top_fraction)?));
    }
    let mean = if per_image.is_empty() { 0.0 } else { per_image.iter().map(|p| p.1).sum::<f64>() / per_image.len() as f64 };
    Ok(AuditReport { per_image, mean })
}
