//! Batched forward and backward passes over an architecture graph.

use rayon::prelude::*;

use super::params::{Gradients, ModelParams, NodeGrads};
use super::{TrainError, BN_EPSILON};
use crate::archdsl::{Activation, ArchGraph, LayerKind};
use crate::kernels::gemm::{self, GemmScratch, MatRef};
use crate::kernels::{self, ConvDims, ConvWeights};

/// Samples per gradient partial. Partials are reduced in group order, so
/// results do not depend on the number of worker threads.
const GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm.
    Train,
    /// Running statistics for batch norm.
    Inference,
}

/// Per-channel batch mean and unbiased variance seen by each batch-norm
/// layer during a training-mode forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats {
    pub nodes: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

struct BnCache {
    normalized: Vec<f32>,
    inv_std: Vec<f32>,
}

pub(crate) struct Tape {
    batch: usize,
    outputs: Vec<Vec<f32>>,
    bn: Vec<Option<BnCache>>,
    argmax: Vec<Option<Vec<u32>>>,
    stats: BatchStats,
}

pub struct LossAndGrads {
    pub loss: f32,
    pub grads: Gradients,
    pub batch_stats: BatchStats,
}

/// Index of the node whose output holds the class logits: the input of a
/// terminal softmax, or the last node otherwise.
pub fn logits_index(graph: &ArchGraph) -> usize {
    let last = graph.node(graph.output_index());
    match last.kind {
        LayerKind::Softmax => last.inputs[0],
        _ => graph.output_index(),
    }
}

fn conv_dims(graph: &ArchGraph, index: usize) -> ConvDims {
    let shapes = graph.resolved_shapes().expect("inferred");
    let node = graph.node(index);
    let geometry = match &node.kind {
        LayerKind::Conv { geometry, .. } | LayerKind::DepthwiseConv { geometry, .. } => geometry,
        _ => unreachable!(),
    };
    ConvDims::new(geometry, shapes[node.inputs[0]], shapes[index])
}

fn batch_norm_forward(
    z: &mut [f32],
    channels: usize,
    bn: &super::params::BatchNormParams,
    mode: Mode,
) -> (Option<BnCache>, Option<(Vec<f32>, Vec<f32>)>) {
    match mode {
        Mode::Inference => {
            for px in z.chunks_exact_mut(channels) {
                for c in 0..channels {
                    let inv = 1.0 / (bn.running_var[c] + BN_EPSILON).sqrt();
                    px[c] = bn.scale[c] * (px[c] - bn.running_mean[c]) * inv + bn.shift[c];
                }
            }
            (None, None)
        }
        Mode::Train => {
            let count = z.len() / channels;
            let mut sum = vec![0.0f64; channels];
            for px in z.chunks_exact(channels) {
                for (s, v) in sum.iter_mut().zip(px) {
                    *s += *v as f64;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; channels];
            for px in z.chunks_exact(channels) {
                for c in 0..channels {
                    let d = px[c] as f64 - mean[c];
                    sq[c] += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPSILON as f64).sqrt()) as f32).collect();
            let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
            let mut normalized = vec![0.0f32; z.len()];
            for (px, nx) in z.chunks_exact_mut(channels).zip(normalized.chunks_exact_mut(channels)) {
                for c in 0..channels {
                    nx[c] = (px[c] - mean32[c]) * inv_std[c];
                    px[c] = bn.scale[c] * nx[c] + bn.shift[c];
                }
            }
            let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let stats = (mean32, var.iter().map(|v| (v * unbiased) as f32).collect());
            (Some(BnCache { normalized, inv_std }), Some(stats))
        }
    }
}

fn apply_activation(x: &mut [f32], act: Activation) {
    if act == Activation::Relu {
        kernels::relu_inplace(x);
    }
}

/// Runs the graph over a batch of NHWC images, recording what the backward
/// pass needs.
pub(crate) fn forward(
    graph: &ArchGraph,
    params: &ModelParams,
    images: &[f32],
    mode: Mode,
) -> Result<Tape, TrainError> {
    let shapes = graph.shapes()?;
    let in_elems = shapes[0].elements();
    if in_elems == 0 || images.len() % in_elems != 0 {
        return Err(TrainError::InputShape { expected: shapes[0], len: images.len() });
    }
    let batch = images.len() / in_elems;
    let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(graph.len());
    let mut bn_caches = Vec::with_capacity(graph.len());
    let mut argmaxes = Vec::with_capacity(graph.len());
    let mut stats = BatchStats { nodes: vec![None; graph.len()] };

    for (i, node) in graph.nodes().iter().enumerate() {
        let out_shape = shapes[i];
        let out_elems = out_shape.elements();
        let mut bn_cache = None;
        let mut argmax = None;
        let out = match &node.kind {
            LayerKind::Input(_) => images.to_vec(),
            LayerKind::Conv { activation, .. } | LayerKind::DepthwiseConv { activation, .. } => {
                let p = params.nodes[i].as_ref().ok_or(TrainError::MissingParams(node.id.clone()))?;
                let d = conv_dims(graph, i);
                let x = &outputs[node.inputs[0]];
                let mut z = vec![0.0f32; batch * out_elems];
                let depthwise = matches!(node.kind, LayerKind::DepthwiseConv { .. });
                z.par_chunks_mut(out_elems).zip(x.par_chunks(d.input.elements())).for_each_init(
                    || (Vec::new(), GemmScratch::default()),
                    |(cols, scratch), (zs, xs)| {
                        if depthwise {
                            kernels::depthwise2d(xs, &d, &p.weight, p.bias.as_deref(), zs);
                        } else {
                            let w = ConvWeights::Plain(&p.weight);
                            kernels::conv2d(xs, &d, w, p.bias.as_deref(), zs, cols, scratch);
                        }
                    },
                );
                if let Some(bn) = &p.bn {
                    let (cache, s) = batch_norm_forward(&mut z, out_shape.channels, bn, mode);
                    bn_cache = cache;
                    stats.nodes[i] = s;
                }
                apply_activation(&mut z, *activation);
                z
            }
            LayerKind::MaxPool { kernel, stride } => {
                let x = &outputs[node.inputs[0]];
                let in_shape = shapes[node.inputs[0]];
                let mut out = vec![0.0f32; batch * out_elems];
                let mut idx = vec![0u32; batch * out_elems];
                out.par_chunks_mut(out_elems)
                    .zip(idx.par_chunks_mut(out_elems))
                    .zip(x.par_chunks(in_shape.elements()))
                    .for_each(|((o, a), xs)| {
                        kernels::maxpool2d(xs, in_shape, *kernel, *stride, out_shape, o, Some(a));
                    });
                argmax = Some(idx);
                out
            }
            LayerKind::GlobalAvgPool => {
                let x = &outputs[node.inputs[0]];
                let in_shape = shapes[node.inputs[0]];
                let mut out = vec![0.0f32; batch * out_elems];
                for (o, xs) in out.chunks_exact_mut(out_elems).zip(x.chunks_exact(in_shape.elements())) {
                    kernels::global_avg_pool(xs, in_shape, o);
                }
                out
            }
            LayerKind::Add { activation } => {
                let (a, b) = (&outputs[node.inputs[0]], &outputs[node.inputs[1]]);
                let mut out: Vec<f32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                apply_activation(&mut out, *activation);
                out
            }
            LayerKind::Dense { units, activation } => {
                let p = params.nodes[i].as_ref().ok_or(TrainError::MissingParams(node.id.clone()))?;
                let x = &outputs[node.inputs[0]];
                let c_in = shapes[node.inputs[0]].channels;
                let bias = p.bias.as_ref().expect("dense has bias");
                let mut out = vec![0.0f32; batch * units];
                for row in out.chunks_exact_mut(*units) {
                    row.copy_from_slice(bias);
                }
                let mut scratch = GemmScratch::default();
                gemm::gemm(
                    batch,
                    *units,
                    c_in,
                    MatRef::row_major(x, c_in),
                    MatRef::row_major(&p.weight, *units),
                    &mut out,
                    *units,
                    true,
                    &mut scratch,
                );
                apply_activation(&mut out, *activation);
                out
            }
            LayerKind::Softmax => {
                let x = &outputs[node.inputs[0]];
                let mut out = vec![0.0f32; x.len()];
                for (o, xs) in out.chunks_exact_mut(out_elems).zip(x.chunks_exact(out_elems)) {
                    kernels::softmax(xs, o);
                }
                out
            }
        };
        outputs.push(out);
        bn_caches.push(bn_cache);
        argmaxes.push(argmax);
    }
    Ok(Tape { batch, outputs, bn: bn_caches, argmax: argmaxes, stats })
}

/// Logits for a batch, computed by the training engine.
pub fn predict_logits(
    graph: &ArchGraph,
    params: &ModelParams,
    images: &[f32],
    mode: Mode,
) -> Result<Vec<f32>, TrainError> {
    let tape = forward(graph, params, images, mode)?;
    Ok(tape.outputs[logits_index(graph)].clone())
}

/// Mean softmax cross-entropy over a batch and `dloss/dlogits`.
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label] as f64;
        for (c, g) in grad[s * classes..(s + 1) * classes].iter_mut().enumerate() {
            let p = (row[c] as f64 - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            *g = ((p - target) / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += *b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn relu_mask(grad: &mut [f32], out: &[f32]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Mean cross-entropy loss and gradients of every learnable tensor.
/// Batch norm uses batch statistics; running statistics are returned, not
/// applied.
pub fn loss_and_grads(
    graph: &ArchGraph,
    params: &ModelParams,
    images: &[f32],
    labels: &[usize],
) -> Result<LossAndGrads, TrainError> {
    let shapes = graph.shapes()?;
    let tape = forward(graph, params, images, Mode::Train)?;
    let batch = tape.batch;
    if labels.len() != batch {
        return Err(TrainError::LabelCount { images: batch, labels: labels.len() });
    }
    let logits_at = logits_index(graph);
    let classes = shapes[logits_at].elements();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelRange { label: bad, classes });
    }
    let (loss, dlogits) = cross_entropy(&tape.outputs[logits_at], labels, classes);
    if !loss.is_finite() {
        return Err(TrainError::Divergence);
    }

    let mut grads = Gradients::zeros_like(params);
    let mut dout: Vec<Option<Vec<f32>>> = vec![None; graph.len()];
    dout[logits_at] = Some(dlogits);

    for i in (1..=logits_at).rev() {
        let Some(mut dy) = dout[i].take() else { continue };
        let node = graph.node(i);
        match &node.kind {
            LayerKind::Input(_) | LayerKind::Softmax => {}
            LayerKind::Add { activation } => {
                if *activation == Activation::Relu {
                    relu_mask(&mut dy, &tape.outputs[i]);
                }
                add_into(&mut dout[node.inputs[0]], &dy);
                add_into(&mut dout[node.inputs[1]], &dy);
            }
            LayerKind::GlobalAvgPool => {
                let in_shape = shapes[node.inputs[0]];
                let area = (in_shape.height * in_shape.width) as f32;
                let c = in_shape.channels;
                let mut dx = vec![0.0f32; batch * in_shape.elements()];
                for (dxs, dys) in dx.chunks_exact_mut(in_shape.elements()).zip(dy.chunks_exact(c)) {
                    for px in dxs.chunks_exact_mut(c) {
                        for (d, g) in px.iter_mut().zip(dys) {
                            *d = *g / area;
                        }
                    }
                }
                add_into(&mut dout[node.inputs[0]], &dx);
            }
            LayerKind::MaxPool { .. } => {
                let in_elems = shapes[node.inputs[0]].elements();
                let out_elems = shapes[i].elements();
                let idx = tape.argmax[i].as_ref().expect("argmax recorded");
                let mut dx = vec![0.0f32; batch * in_elems];
                for s in 0..batch {
                    for o in 0..out_elems {
                        dx[s * in_elems + idx[s * out_elems + o] as usize] += dy[s * out_elems + o];
                    }
                }
                add_into(&mut dout[node.inputs[0]], &dx);
            }
            LayerKind::Dense { units, activation } => {
                if *activation == Activation::Relu {
                    relu_mask(&mut dy, &tape.outputs[i]);
                }
                let p = params.nodes[i].as_ref().expect("dense params");
                let g = grads.nodes[i].as_mut().expect("dense grads");
                let x = &tape.outputs[node.inputs[0]];
                let c_in = shapes[node.inputs[0]].channels;
                let mut scratch = GemmScratch::default();
                gemm::gemm(
                    c_in,
                    *units,
                    batch,
                    MatRef::transposed(x, c_in),
                    MatRef::row_major(&dy, *units),
                    &mut g.weight,
                    *units,
                    false,
                    &mut scratch,
                );
                let db = g.bias.as_mut().expect("dense bias grad");
                for row in dy.chunks_exact(*units) {
                    for (b, v) in db.iter_mut().zip(row) {
                        *b += *v;
                    }
                }
                let mut dx = vec![0.0f32; batch * c_in];
                gemm::gemm(
                    batch,
                    c_in,
                    *units,
                    MatRef::row_major(&dy, *units),
                    MatRef::transposed(&p.weight, *units),
                    &mut dx,
                    c_in,
                    false,
                    &mut scratch,
                );
                add_into(&mut dout[node.inputs[0]], &dx);
            }
            LayerKind::Conv { activation, .. } | LayerKind::DepthwiseConv { activation, .. } => {
                if *activation == Activation::Relu {
                    relu_mask(&mut dy, &tape.outputs[i]);
                }
                let p = params.nodes[i].as_ref().expect("conv params");
                let g = grads.nodes[i].as_mut().expect("conv grads");
                let channels = shapes[i].channels;
                if let (Some(bn), Some(cache)) = (&p.bn, &tape.bn[i]) {
                    batch_norm_backward(&mut dy, channels, &bn.scale, cache, g);
                }
                if let Some(db) = g.bias.as_mut() {
                    for px in dy.chunks_exact(channels) {
                        for (b, v) in db.iter_mut().zip(px) {
                            *b += *v;
                        }
                    }
                }
                let d = conv_dims(graph, i);
                let x = &tape.outputs[node.inputs[0]];
                let dx = if matches!(node.kind, LayerKind::DepthwiseConv { .. }) {
                    depthwise_backward(x, &dy, &d, &p.weight, &mut g.weight, batch)
                } else {
                    conv_backward(x, &dy, &d, &p.weight, &mut g.weight, batch)
                };
                add_into(&mut dout[node.inputs[0]], &dx);
            }
        }
    }
    Ok(LossAndGrads { loss: loss as f32, grads, batch_stats: tape.stats })
}

fn batch_norm_backward(dy: &mut [f32], channels: usize, scale: &[f32], cache: &BnCache, g: &mut NodeGrads) {
    let count = (dy.len() / channels) as f64;
    let mut dshift = vec![0.0f64; channels];
    let mut dscale = vec![0.0f64; channels];
    for (px, nx) in dy.chunks_exact(channels).zip(cache.normalized.chunks_exact(channels)) {
        for c in 0..channels {
            dshift[c] += px[c] as f64;
            dscale[c] += (px[c] * nx[c]) as f64;
        }
    }
    for (px, nx) in dy.chunks_exact_mut(channels).zip(cache.normalized.chunks_exact(channels)) {
        for c in 0..channels {
            let k = scale[c] * cache.inv_std[c];
            let centered = px[c] as f64 - dshift[c] / count - nx[c] as f64 * dscale[c] / count;
            px[c] = k * centered as f32;
        }
    }
    let gs = g.scale.as_mut().expect("bn grads");
    for (a, b) in gs.iter_mut().zip(&dscale) {
        *a += *b as f32;
    }
    let gt = g.shift.as_mut().expect("bn grads");
    for (a, b) in gt.iter_mut().zip(&dshift) {
        *a += *b as f32;
    }
}

fn reduce_partials(partials: Vec<Vec<f32>>, out: &mut [f32]) {
    for part in partials {
        for (o, v) in out.iter_mut().zip(&part) {
            *o += *v;
        }
    }
}

fn conv_backward(x: &[f32], dz: &[f32], d: &ConvDims, w: &[f32], dw: &mut [f32], batch: usize) -> Vec<f32> {
    let in_elems = d.input.elements();
    let out_elems = d.output.elements();
    let m = d.patches();
    let k = d.patch_len();
    let n = d.output.channels;
    let mut dx = vec![0.0f32; batch * in_elems];
    let partials: Vec<Vec<f32>> = dx
        .par_chunks_mut(GROUP * in_elems)
        .zip(dz.par_chunks(GROUP * out_elems))
        .zip(x.par_chunks(GROUP * in_elems))
        .map_init(
            || (Vec::new(), Vec::new(), GemmScratch::default()),
            |(cols, dcols, scratch), ((dxg, dzg), xg)| {
                let mut part = vec![0.0f32; w.len()];
                for ((dxs, dzs), xs) in
                    dxg.chunks_mut(in_elems).zip(dzg.chunks(out_elems)).zip(xg.chunks(in_elems))
                {
                    let a = if d.is_pointwise() {
                        MatRef::transposed(xs, k)
                    } else {
                        kernels::im2col(xs, d, cols);
                        MatRef::transposed(cols, k)
                    };
                    gemm::gemm(k, n, m, a, MatRef::row_major(dzs, n), &mut part, n, true, scratch);
                    let wt = MatRef::transposed(w, n);
                    if d.is_pointwise() {
                        gemm::gemm(m, k, n, MatRef::row_major(dzs, n), wt, dxs, k, true, scratch);
                    } else {
                        dcols.clear();
                        dcols.resize(m * k, 0.0);
                        gemm::gemm(m, k, n, MatRef::row_major(dzs, n), wt, dcols, k, false, scratch);
                        kernels::col2im_add(dcols, d, dxs);
                    }
                }
                part
            },
        )
        .collect();
    reduce_partials(partials, dw);
    dx
}

fn depthwise_backward(x: &[f32], dz: &[f32], d: &ConvDims, w: &[f32], dw: &mut [f32], batch: usize) -> Vec<f32> {
    let in_elems = d.input.elements();
    let out_elems = d.output.elements();
    let c = d.input.channels;
    let kk = d.kernel;
    let mut dx = vec![0.0f32; batch * in_elems];
    let partials: Vec<Vec<f32>> = dx
        .par_chunks_mut(GROUP * in_elems)
        .zip(dz.par_chunks(GROUP * out_elems))
        .zip(x.par_chunks(GROUP * in_elems))
        .map(|((dxg, dzg), xg)| {
            let mut part = vec![0.0f32; w.len()];
            for ((dxs, dzs), xs) in dxg.chunks_mut(in_elems).zip(dzg.chunks(out_elems)).zip(xg.chunks(in_elems)) {
                for oy in 0..d.output.height {
                    for ox in 0..d.output.width {
                        let g = &dzs[(oy * d.output.width + ox) * c..][..c];
                        for ky in 0..kk {
                            let Some(iy) = d.source(oy, ky, d.pad_top, d.input.height) else { continue };
                            for kx in 0..kk {
                                let Some(ix) = d.source(ox, kx, d.pad_left, d.input.width) else { continue };
                                let at = (iy * d.input.width + ix) * c;
                                let wk = (ky * kk + kx) * c;
                                for ch in 0..c {
                                    part[wk + ch] += xs[at + ch] * g[ch];
                                    dxs[at + ch] += w[wk + ch] * g[ch];
                                }
                            }
                        }
                    }
                }
            }
            part
        })
        .collect();
    reduce_partials(partials, dw);
    dx
}
