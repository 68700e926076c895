//! Single-threaded packed matrix multiply, `C (+)= A * B`.
//!
//! A is packed into row strips of [`MR`], B into column strips of [`NR`]
//! (the channel-block width used by blocked weight formats). The micro-kernel
//! keeps an `MR x NR` accumulator tile in registers.

pub const MR: usize = 8;
pub const NR: usize = 8;
const KC: usize = 256;
const MC: usize = 96;

/// Strided read-only view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// View of the transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// B matrix packed into [`NR`]-wide column strips over the full depth:
/// strip `j` holds `k x NR` values, zero padded past `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedB {
    pub k: usize,
    pub n: usize,
    pub data: Vec<f32>,
}

impl PackedB {
    pub fn pack(b: MatRef<'_>, k: usize, n: usize) -> Self {
        let mut data = Vec::new();
        pack_b_into(b, k, n, &mut data);
        Self { k, n, data }
    }

    pub fn strips(&self) -> usize {
        self.n.div_ceil(NR)
    }
}

fn pack_b_into(b: MatRef<'_>, k: usize, n: usize, out: &mut Vec<f32>) {
    let strips = n.div_ceil(NR);
    out.clear();
    out.resize(strips * k * NR, 0.0);
    for s in 0..strips {
        let c0 = s * NR;
        let width = NR.min(n - c0);
        let base = s * k * NR;
        if b.col_stride == 1 {
            for p in 0..k {
                let row = &b.data[p * b.row_stride + c0..p * b.row_stride + c0 + width];
                out[base + p * NR..base + p * NR + width].copy_from_slice(row);
            }
        } else {
            for p in 0..k {
                for j in 0..width {
                    out[base + p * NR + j] = b.at(p, c0 + j);
                }
            }
        }
    }
}

fn pack_a(a: MatRef<'_>, rows: std::ops::Range<usize>, depth: std::ops::Range<usize>, out: &mut [f32]) {
    let kc = depth.len();
    let mc = rows.len();
    for (s, r0) in (0..mc).step_by(MR).enumerate() {
        let height = MR.min(mc - r0);
        let strip = &mut out[s * kc * MR..(s + 1) * kc * MR];
        if a.col_stride == 1 {
            for i in 0..height {
                let row_start = (rows.start + r0 + i) * a.row_stride + depth.start;
                let row = &a.data[row_start..row_start + kc];
                for (p, &v) in row.iter().enumerate() {
                    strip[p * MR + i] = v;
                }
            }
        } else {
            for p in 0..kc {
                let col_start = (depth.start + p) * a.col_stride + (rows.start + r0) * a.row_stride;
                for i in 0..height {
                    strip[p * MR + i] = a.data[col_start + i * a.row_stride];
                }
            }
        }
        for i in height..MR {
            for p in 0..kc {
                strip[p * MR + i] = 0.0;
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(kc: usize, a: &[f32], b: &[f32]) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    let a = &a[..kc * MR];
    let b = &b[..kc * NR];
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for i in 0..MR {
            let av = ap[i];
            for j in 0..NR {
                acc[i][j] = av.mul_add(bp[j], acc[i][j]);
            }
        }
    }
    acc
}

/// Reusable packing buffers.
#[derive(Debug, Default)]
pub struct GemmScratch {
    a: Vec<f32>,
    b: Vec<f32>,
}

impl GemmScratch {
    pub fn capacity_bytes(&self) -> usize {
        (self.a.capacity() + self.b.capacity()) * 4
    }

    pub fn from_buffers(a: Vec<f32>, b: Vec<f32>) -> Self {
        Self { a, b }
    }

    pub fn into_buffers(self) -> (Vec<f32>, Vec<f32>) {
        (self.a, self.b)
    }
}

/// `C = A * B` (or `C += A * B` when `accumulate`), with `C` row-major and
/// leading dimension `ldc`. B is packed on the fly.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
    scratch: &mut GemmScratch,
) {
    let mut packed = std::mem::take(&mut scratch.b);
    pack_b_into(b, k, n, &mut packed);
    gemm_packed_raw(m, n, k, a, &packed, c, ldc, accumulate, &mut scratch.a);
    scratch.b = packed;
}

/// `C (+)= A * B` with B already packed.
#[allow(clippy::too_many_arguments)]
pub fn gemm_packed(
    m: usize,
    a: MatRef<'_>,
    b: &PackedB,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
    scratch: &mut GemmScratch,
) {
    gemm_packed_raw(m, b.n, b.k, a, &b.data, c, ldc, accumulate, &mut scratch.a);
}

#[allow(clippy::too_many_arguments)]
fn gemm_packed_raw(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_>,
    b: &[f32],
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
    a_buf: &mut Vec<f32>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].fill(0.0);
            }
        }
        return;
    }
    let strips_n = n.div_ceil(NR);
    let need = MC.div_ceil(MR) * MR * KC;
    if a_buf.len() < need {
        a_buf.resize(need, 0.0);
    }
    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        let add = accumulate || pc > 0;
        for ic in (0..m).step_by(MC) {
            let mc = MC.min(m - ic);
            pack_a(a, ic..ic + mc, pc..pc + kc, a_buf);
            for js in 0..strips_n {
                let c0 = js * NR;
                let width = NR.min(n - c0);
                let b_strip = &b[js * k * NR + pc * NR..];
                for (is, r0) in (0..mc).step_by(MR).enumerate() {
                    let height = MR.min(mc - r0);
                    let tile = micro_kernel(kc, &a_buf[is * kc * MR..], b_strip);
                    for (i, row) in tile.iter().enumerate().take(height) {
                        let off = (ic + r0 + i) * ldc + c0;
                        let dst = &mut c[off..off + width];
                        if add {
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += *s;
                            }
                        } else {
                            dst.copy_from_slice(&row[..width]);
                        }
                    }
                }
            }
        }
    }
}
