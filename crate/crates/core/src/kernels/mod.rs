//! Per-image NHWC kernels shared by the inference runtime and the trainer.
//!
//! Convolution weights are stored HWIO (`[ky][kx][c_in][c_out]`), so an
//! im2col row `(ky, kx, c_in)` lines up with a weight row and a convolution
//! is one `(out_h*out_w) x (k*k*c_in) x c_out` matrix multiply.

pub mod gemm;

use crate::archdsl::{ConvGeometry, TensorShape};
use gemm::{GemmScratch, MatRef, PackedB};

/// Spatial geometry of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub input: TensorShape,
    pub output: TensorShape,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvDims {
    pub fn new(geometry: &ConvGeometry, input: TensorShape, output: TensorShape) -> Self {
        Self {
            input,
            output,
            kernel: geometry.kernel,
            stride: geometry.stride,
            pad_top: geometry.pad_before(input.height, output.height),
            pad_left: geometry.pad_before(input.width, output.width),
        }
    }

    /// Rows of the im2col matrix.
    pub fn patches(&self) -> usize {
        self.output.height * self.output.width
    }

    /// Columns of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.input.channels
    }

    /// A 1x1 stride-1 convolution reads the input directly as its im2col
    /// matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate for output row/col and kernel offset, if inside.
    #[inline(always)]
    pub fn source(&self, out: usize, tap: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn im2col(x: &[f32], d: &ConvDims, cols: &mut Vec<f32>) {
    let c = d.input.channels;
    let k = d.kernel;
    let row_len = d.patch_len();
    cols.clear();
    cols.resize(d.patches() * row_len, 0.0);
    for oy in 0..d.output.height {
        for ox in 0..d.output.width {
            let row = &mut cols[(oy * d.output.width + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = d.source(oy, ky, d.pad_top, d.input.height) else { continue };
                for kx in 0..k {
                    let Some(ix) = d.source(ox, kx, d.pad_left, d.input.width) else { continue };
                    let src = (iy * d.input.width + ix) * c;
                    row[(ky * k + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
}

/// Scatters an im2col-shaped gradient back onto the input, accumulating.
pub fn col2im_add(dcols: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let c = d.input.channels;
    let k = d.kernel;
    let row_len = d.patch_len();
    for oy in 0..d.output.height {
        for ox in 0..d.output.width {
            let row = &dcols[(oy * d.output.width + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = d.source(oy, ky, d.pad_top, d.input.height) else { continue };
                for kx in 0..k {
                    let Some(ix) = d.source(ox, kx, d.pad_left, d.input.width) else { continue };
                    let dst = &mut dx[(iy * d.input.width + ix) * c..][..c];
                    for (o, g) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *o += *g;
                    }
                }
            }
        }
    }
}

/// Convolution weights either as a plain HWIO matrix or pre-packed.
#[derive(Clone, Copy)]
pub enum ConvWeights<'a> {
    Plain(&'a [f32]),
    Packed(&'a PackedB),
}

/// Dense convolution of one image. Writes `out` (HWC) without activation.
pub fn conv2d(
    x: &[f32],
    d: &ConvDims,
    weights: ConvWeights<'_>,
    bias: Option<&[f32]>,
    out: &mut [f32],
    cols: &mut Vec<f32>,
    scratch: &mut GemmScratch,
) {
    let m = d.patches();
    let kdim = d.patch_len();
    let n = d.output.channels;
    let a = if d.is_pointwise() {
        MatRef::row_major(&x[..m * kdim], kdim)
    } else {
        im2col(x, d, cols);
        MatRef::row_major(cols, kdim)
    };
    let accumulate = if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
        true
    } else {
        false
    };
    match weights {
        ConvWeights::Plain(w) => gemm::gemm(m, n, kdim, a, MatRef::row_major(w, n), out, n, accumulate, scratch),
        ConvWeights::Packed(p) => gemm::gemm_packed(m, a, p, out, n, accumulate, scratch),
    }
}

/// Depthwise convolution of one image; weights `[ky][kx][c]`.
pub fn depthwise2d(x: &[f32], d: &ConvDims, w: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let c = d.input.channels;
    let k = d.kernel;
    for oy in 0..d.output.height {
        for ox in 0..d.output.width {
            let dst = &mut out[(oy * d.output.width + ox) * c..][..c];
            match bias {
                Some(b) => dst.copy_from_slice(b),
                None => dst.fill(0.0),
            }
            for ky in 0..k {
                let Some(iy) = d.source(oy, ky, d.pad_top, d.input.height) else { continue };
                for kx in 0..k {
                    let Some(ix) = d.source(ox, kx, d.pad_left, d.input.width) else { continue };
                    let src = &x[(iy * d.input.width + ix) * c..][..c];
                    let wk = &w[(ky * k + kx) * c..][..c];
                    for ((o, xv), wv) in dst.iter_mut().zip(src).zip(wk) {
                        *o = xv.mul_add(*wv, *o);
                    }
                }
            }
        }
    }
}

/// Max pooling without padding. When `argmax` is given it receives the flat
/// input index chosen for every output element.
pub fn maxpool2d(
    x: &[f32],
    input: TensorShape,
    kernel: usize,
    stride: usize,
    output: TensorShape,
    out: &mut [f32],
    mut argmax: Option<&mut [u32]>,
) {
    let c = input.channels;
    for oy in 0..output.height {
        for ox in 0..output.width {
            let base = (oy * output.width + ox) * c;
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let at = ((oy * stride + ky) * input.width + ox * stride + kx) * c + ch;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out[base + ch] = best;
                if let Some(a) = argmax.as_deref_mut() {
                    a[base + ch] = best_at as u32;
                }
            }
        }
    }
}

pub fn global_avg_pool(x: &[f32], input: TensorShape, out: &mut [f32]) {
    let c = input.channels;
    out[..c].fill(0.0);
    for px in x.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += *v;
        }
    }
    let inv = 1.0 / (input.height * input.width) as f32;
    for o in &mut out[..c] {
        *o *= inv;
    }
}

/// `out = x * W + b` for a single vector; `W` is `[in][units]`.
pub fn dense(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    let units = b.len();
    out[..units].copy_from_slice(b);
    for (xv, row) in x.iter().zip(w.chunks_exact(units)) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o = xv.mul_add(*wv, *o);
        }
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
