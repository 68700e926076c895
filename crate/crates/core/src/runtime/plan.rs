use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use super::arena::{plan_arena, ArenaLayout, Interval};
use super::config::{parse_core_list, pin_current_thread};
use super::{RuntimeConfig, RuntimeError, Tensor};
use crate::archdsl::{Activation, ArchGraph, LayerKind, TensorShape};
use crate::kernels::gemm::{GemmScratch, PackedB};
use crate::kernels::{self, ConvDims, ConvWeights};
use crate::train::{ModelParams, NodeParams, BN_EPSILON};

enum Weights {
    Plain(Vec<f32>),
    Packed(PackedB),
}

enum OpKind {
    Conv { dims: ConvDims, weights: Weights, bias: Vec<f32>, relu: bool, residual: bool, relu_after_add: bool },
    Depthwise { dims: ConvDims, weight: Vec<f32>, bias: Vec<f32>, relu: bool },
    MaxPool { input: TensorShape, kernel: usize, stride: usize, output: TensorShape },
    Gap { input: TensorShape },
    Add { relu: bool },
    Dense { weight: Vec<f32>, bias: Vec<f32>, relu: bool },
    Softmax,
}

struct Op {
    label: String,
    nodes: Vec<String>,
    kind: OpKind,
    inputs: Vec<usize>,
    output: usize,
}

/// Public description of one planned op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpSummary {
    /// Fused kernel name such as `conv_relu` or `conv_add_relu`.
    pub label: String,
    /// Graph nodes covered by the op, in declaration order.
    pub nodes: Vec<String>,
}

enum Storage {
    Arena(Vec<f32>),
    Private(Vec<Vec<f32>>),
}

struct Worker {
    storage: Storage,
    cache: Vec<Vec<f32>>,
}

/// Compiled, immutable inference program. Safe to share across threads.
pub struct ExecutionPlan {
    config: RuntimeConfig,
    input_shape: TensorShape,
    ops: Vec<Op>,
    layout: ArenaLayout,
    live: Vec<Interval>,
    /// For every op step, the values whose last reader is that step.
    dying: Vec<Vec<usize>>,
    pool: rayon::ThreadPool,
    workers: Mutex<Vec<Worker>>,
}

fn fold_bn(p: &NodeParams, channels: usize) -> (Vec<f32>, Vec<f32>) {
    let mut weight = p.weight.clone();
    let mut bias = p.bias.clone().unwrap_or_else(|| vec![0.0; channels]);
    if let Some(bn) = &p.bn {
        let scale: Vec<f32> =
            bn.scale.iter().zip(&bn.running_var).map(|(g, v)| g / (v + BN_EPSILON).sqrt()).collect();
        for row in weight.chunks_exact_mut(channels) {
            for (w, s) in row.iter_mut().zip(&scale) {
                *w *= s;
            }
        }
        for (c, b) in bias.iter_mut().enumerate() {
            *b = (*b - bn.running_mean[c]) * scale[c] + bn.shift[c];
        }
    }
    (weight, bias)
}

impl ExecutionPlan {
    pub fn build(graph: &ArchGraph, params: &ModelParams, config: &RuntimeConfig) -> Result<Self, RuntimeError> {
        let shapes = graph.shapes()?.to_vec();
        params.validate(graph)?;
        let nodes = graph.nodes();
        let consumers = graph.consumers();

        // conv node -> add node it is fused into
        let mut absorbed_by = vec![None; nodes.len()];
        let mut fused_conv = vec![None; nodes.len()];
        for (a, node) in nodes.iter().enumerate() {
            if !matches!(node.kind, LayerKind::Add { .. }) {
                continue;
            }
            for (slot, &cand) in node.inputs.iter().enumerate() {
                let other = node.inputs[1 - slot];
                let single = consumers[cand] == [a];
                let safe = !config.conv_add_fusion_safe || consumers[other] == [a];
                if matches!(nodes[cand].kind, LayerKind::Conv { .. }) && single && safe && cand != other {
                    absorbed_by[cand] = Some(a);
                    fused_conv[a] = Some((cand, other));
                    break;
                }
            }
        }

        let mut value_of = vec![usize::MAX; nodes.len()];
        value_of[0] = 0;
        let mut sizes = vec![shapes[0].elements()];
        let mut ops = Vec::new();
        for (i, node) in nodes.iter().enumerate().skip(1) {
            if absorbed_by[i].is_some() {
                continue;
            }
            let out = sizes.len();
            sizes.push(shapes[i].elements());
            value_of[i] = out;
            let relu_of = |k: &LayerKind| k.activation() == Activation::Relu;
            let (src, extra) = match fused_conv[i] {
                Some((conv, other)) => (conv, Some(other)),
                None => (i, None),
            };
            let src_node = &nodes[src];
            let in_shape = shapes[src_node.inputs[0]];
            let mut inputs: Vec<usize> = src_node.inputs.iter().map(|&p| value_of[p]).collect();
            let kind = match &src_node.kind {
                LayerKind::Conv { geometry, .. } => {
                    let p = params.nodes[src].as_ref().expect("validated");
                    let dims = ConvDims::new(geometry, in_shape, shapes[src]);
                    let (w, bias) = fold_bn(p, shapes[src].channels);
                    let weights = if config.blocked_format {
                        Weights::Packed(PackedB::pack(
                            kernels::gemm::MatRef::row_major(&w, shapes[src].channels),
                            dims.patch_len(),
                            shapes[src].channels,
                        ))
                    } else {
                        Weights::Plain(w)
                    };
                    if let Some(other) = extra {
                        inputs.push(value_of[other]);
                    }
                    OpKind::Conv {
                        dims,
                        weights,
                        bias,
                        relu: relu_of(&src_node.kind),
                        residual: extra.is_some(),
                        relu_after_add: extra.is_some() && relu_of(&node.kind),
                    }
                }
                LayerKind::DepthwiseConv { geometry, .. } => {
                    let p = params.nodes[i].as_ref().expect("validated");
                    let (weight, bias) = fold_bn(p, in_shape.channels);
                    OpKind::Depthwise {
                        dims: ConvDims::new(geometry, in_shape, shapes[i]),
                        weight,
                        bias,
                        relu: relu_of(&node.kind),
                    }
                }
                LayerKind::MaxPool { kernel, stride } => {
                    OpKind::MaxPool { input: in_shape, kernel: *kernel, stride: *stride, output: shapes[i] }
                }
                LayerKind::GlobalAvgPool => OpKind::Gap { input: in_shape },
                LayerKind::Add { activation } => OpKind::Add { relu: *activation == Activation::Relu },
                LayerKind::Dense { activation, .. } => {
                    let p = params.nodes[i].as_ref().expect("validated");
                    OpKind::Dense {
                        weight: p.weight.clone(),
                        bias: p.bias.clone().expect("dense bias"),
                        relu: *activation == Activation::Relu,
                    }
                }
                LayerKind::Softmax => OpKind::Softmax,
                LayerKind::Input(_) => unreachable!("input is node 0"),
            };
            let label = match &kind {
                OpKind::Conv { relu, residual, relu_after_add, .. } => {
                    let mut l = "conv".to_string();
                    if *relu {
                        l += "_relu";
                    }
                    if *residual {
                        l += "_add";
                    }
                    if *relu_after_add {
                        l += "_relu";
                    }
                    l
                }
                OpKind::Depthwise { relu, .. } => if *relu { "dwconv_relu" } else { "dwconv" }.into(),
                OpKind::MaxPool { .. } => "maxpool".into(),
                OpKind::Gap { .. } => "gap".into(),
                OpKind::Add { relu } => if *relu { "add_relu" } else { "add" }.into(),
                OpKind::Dense { relu, .. } => if *relu { "dense_relu" } else { "dense" }.into(),
                OpKind::Softmax => "softmax".into(),
            };
            let mut covered = vec![nodes[src].id.clone()];
            if src != i {
                covered.push(node.id.clone());
            }
            ops.push(Op { label, nodes: covered, kind, inputs, output: out });
        }

        // Value 0 is written at step 0, op j runs at step j + 1.
        let end = ops.len();
        let mut live: Vec<Interval> = (0..sizes.len()).map(|v| Interval { start: v, end }).collect();
        live[0].start = 0;
        let mut last_read = vec![None::<usize>; sizes.len()];
        for (j, op) in ops.iter().enumerate() {
            live[op.output].start = j + 1;
            for &v in &op.inputs {
                last_read[v] = Some(j + 1);
            }
        }
        let mut dying = vec![Vec::new(); end + 1];
        for (v, lr) in last_read.iter().enumerate() {
            if let Some(step) = lr {
                live[v].end = *step;
                dying[*step].push(v);
            }
        }
        let layout = if config.mempool_enable {
            plan_arena(&sizes, &live)
        } else {
            let mut offsets = Vec::with_capacity(sizes.len());
            let mut at = 0;
            for s in &sizes {
                offsets.push(at);
                at += s;
            }
            ArenaLayout { offsets, sizes: sizes.clone(), len: at }
        };

        let cores = parse_core_list(&config.cpu_affinity)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.num_threads.max(1))
            .start_handler(move |i| {
                if !cores.is_empty() {
                    pin_current_thread(cores[i % cores.len()]);
                }
            })
            .build()
            .map_err(|e| RuntimeError::ThreadPool(e.to_string()))?;

        Ok(Self {
            config: config.clone(),
            input_shape: shapes[0],
            ops,
            layout,
            live,
            dying,
            pool,
            workers: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn ops(&self) -> Vec<OpSummary> {
        self.ops.iter().map(|o| OpSummary { label: o.label.clone(), nodes: o.nodes.clone() }).collect()
    }

    pub fn layout(&self) -> &ArenaLayout {
        &self.layout
    }

    pub fn live_ranges(&self) -> &[Interval] {
        &self.live
    }

    /// Activation memory per image in bytes, as laid out.
    pub fn arena_bytes(&self) -> usize {
        self.layout.len * 4
    }

    pub fn num_outputs(&self) -> usize {
        self.ops.last().map_or(self.input_shape.elements(), |o| self.layout.sizes[o.output])
    }

    fn ends_in_softmax(&self) -> bool {
        matches!(self.ops.last(), Some(Op { kind: OpKind::Softmax, .. }))
    }

    /// Width of each row returned by [`infer_logits`](Self::infer_logits).
    pub fn num_logits(&self) -> usize {
        if self.ends_in_softmax() {
            self.layout.sizes[self.ops[self.ops.len() - 1].inputs[0]]
        } else {
            self.num_outputs()
        }
    }

    /// Class probabilities, one row per image.
    pub fn infer(&self, batch: &Tensor) -> Result<Vec<f32>, RuntimeError> {
        self.run(batch, self.ops.len(), false)
    }

    /// Pre-softmax scores, one row per image.
    pub fn infer_logits(&self, batch: &Tensor) -> Result<Vec<f32>, RuntimeError> {
        let n = if self.ends_in_softmax() { self.ops.len() - 1 } else { self.ops.len() };
        self.run(batch, n, false)
    }

    /// Like [`infer`](Self::infer) but fills every buffer region with NaN
    /// before use and again right after its last reader. Any read of a
    /// region that is not live surfaces as a non-finite error.
    pub fn infer_instrumented(&self, batch: &Tensor) -> Result<Vec<f32>, RuntimeError> {
        self.run(batch, self.ops.len(), true)
    }

    fn new_worker(&self) -> Worker {
        let storage = if self.config.mempool_enable {
            Storage::Arena(vec![0.0; self.layout.len])
        } else {
            Storage::Private(self.layout.sizes.iter().map(|&s| vec![0.0; s]).collect())
        };
        Worker { storage, cache: Vec::new() }
    }

    fn take_worker(&self) -> Worker {
        self.workers.lock().expect("worker pool").pop().unwrap_or_else(|| self.new_worker())
    }

    fn return_worker(&self, w: Worker) {
        let mut pool = self.workers.lock().expect("worker pool");
        if pool.len() < self.config.tensor_pool_limit * self.config.num_threads {
            pool.push(w);
        }
    }

    fn run(&self, batch: &Tensor, n_ops: usize, poison: bool) -> Result<Vec<f32>, RuntimeError> {
        if batch.image_shape() != self.input_shape {
            return Err(RuntimeError::InputShape { expected: self.input_shape, got: batch.image_shape() });
        }
        let images = batch.batch();
        let result_value = if n_ops == 0 { 0 } else { self.ops[n_ops - 1].output };
        let width = self.layout.sizes[result_value];
        let mut out = vec![0.0f32; images * width];
        if images == 0 {
            return Ok(out);
        }
        let workers = self.config.num_threads.min(images).max(1);
        let per = images.div_ceil(workers);
        self.pool.install(|| {
            out.par_chunks_mut(per * width).enumerate().try_for_each(|(chunk, rows)| {
                let mut worker = self.take_worker();
                let mut res = Ok(());
                for (k, row) in rows.chunks_exact_mut(width).enumerate() {
                    res = self.run_image(&mut worker, batch.image(chunk * per + k), n_ops, poison, row);
                    if res.is_err() {
                        break;
                    }
                }
                self.return_worker(worker);
                res
            })
        })?;
        Ok(out)
    }

    fn run_image(
        &self,
        worker: &mut Worker,
        image: &[f32],
        n_ops: usize,
        poison: bool,
        result: &mut [f32],
    ) -> Result<(), RuntimeError> {
        let Worker { storage, cache } = worker;
        if poison {
            match storage {
                Storage::Arena(a) => a.fill(f32::NAN),
                Storage::Private(bufs) => bufs.iter_mut().for_each(|b| b.fill(f32::NAN)),
            }
        }
        let capacity = self.config.primitive_cache_capacity;
        write_value(storage, &self.layout, 0).copy_from_slice(image);
        for (j, op) in self.ops[..n_ops].iter().enumerate() {
            let (ins, dst) = split_io(storage, &self.layout, &op.inputs, op.output);
            exec(op, &ins, dst, cache, capacity);
            if !dst.iter().all(|v| v.is_finite()) {
                return Err(RuntimeError::NonFinite { op: op.nodes.last().cloned().unwrap_or_default() });
            }
            if poison && j + 1 < n_ops {
                for &v in &self.dying[j + 1] {
                    write_value(storage, &self.layout, v).fill(f32::NAN);
                }
            }
        }
        let v = if n_ops == 0 { 0 } else { self.ops[n_ops - 1].output };
        result.copy_from_slice(write_value(storage, &self.layout, v));
        Ok(())
    }
}

fn write_value<'a>(storage: &'a mut Storage, layout: &ArenaLayout, v: usize) -> &'a mut [f32] {
    match storage {
        Storage::Arena(a) => &mut a[layout.offsets[v]..layout.offsets[v] + layout.sizes[v]],
        Storage::Private(bufs) => &mut bufs[v],
    }
}

/// Borrows the input regions shared and the output region mutably. Relies
/// on the layout never placing an op's output over one of its inputs.
fn split_io<'a>(
    storage: &'a mut Storage,
    layout: &ArenaLayout,
    inputs: &[usize],
    output: usize,
) -> (Vec<&'a [f32]>, &'a mut [f32]) {
    match storage {
        Storage::Arena(arena) => {
            let (o, len) = (layout.offsets[output], layout.sizes[output]);
            let (lo, hi) = arena.split_at_mut(o);
            let (dst, rest) = hi.split_at_mut(len);
            let (lo, rest): (&'a [f32], &'a [f32]) = (lo, rest);
            let ins = inputs
                .iter()
                .map(|&v| {
                    let (off, sz) = (layout.offsets[v], layout.sizes[v]);
                    if off + sz <= o {
                        &lo[off..off + sz]
                    } else {
                        assert!(off >= o + len, "arena aliasing between op input and output");
                        &rest[off - o - len..off - o - len + sz]
                    }
                })
                .collect();
            (ins, dst)
        }
        Storage::Private(bufs) => {
            let (lo, hi) = bufs.split_at_mut(output);
            let (dst, rest) = hi.split_first_mut().expect("output buffer");
            let (lo, rest): (&'a [Vec<f32>], &'a [Vec<f32>]) = (lo, rest);
            let ins = inputs
                .iter()
                .map(|&v| if v < output { lo[v].as_slice() } else { rest[v - output - 1].as_slice() })
                .collect();
            (ins, dst.as_mut_slice())
        }
    }
}

fn take_buf(cache: &mut Vec<Vec<f32>>) -> Vec<f32> {
    cache.pop().unwrap_or_default()
}

fn give_buf(cache: &mut Vec<Vec<f32>>, buf: Vec<f32>, capacity: usize) {
    if cache.len() < capacity {
        cache.push(buf);
    }
}

fn exec(op: &Op, ins: &[&[f32]], dst: &mut [f32], cache: &mut Vec<Vec<f32>>, capacity: usize) {
    match &op.kind {
        OpKind::Conv { dims, weights, bias, relu, residual, relu_after_add } => {
            let mut cols = take_buf(cache);
            let (a, b) = (take_buf(cache), take_buf(cache));
            let mut scratch = GemmScratch::from_buffers(a, b);
            let w = match weights {
                Weights::Plain(w) => ConvWeights::Plain(w),
                Weights::Packed(p) => ConvWeights::Packed(p),
            };
            kernels::conv2d(ins[0], dims, w, Some(bias), dst, &mut cols, &mut scratch);
            if *relu {
                kernels::relu_inplace(dst);
            }
            if *residual {
                for (o, r) in dst.iter_mut().zip(ins[1]) {
                    *o += r;
                }
                if *relu_after_add {
                    kernels::relu_inplace(dst);
                }
            }
            let (a, b) = scratch.into_buffers();
            give_buf(cache, cols, capacity);
            give_buf(cache, a, capacity);
            give_buf(cache, b, capacity);
        }
        OpKind::Depthwise { dims, weight, bias, relu } => {
            kernels::depthwise2d(ins[0], dims, weight, Some(bias), dst);
            if *relu {
                kernels::relu_inplace(dst);
            }
        }
        OpKind::MaxPool { input, kernel, stride, output } => {
            kernels::maxpool2d(ins[0], *input, *kernel, *stride, *output, dst, None)
        }
        OpKind::Gap { input } => kernels::global_avg_pool(ins[0], *input, dst),
        OpKind::Add { relu } => {
            for ((o, a), b) in dst.iter_mut().zip(ins[0]).zip(ins[1]) {
                *o = a + b;
            }
            if *relu {
                kernels::relu_inplace(dst);
            }
        }
        OpKind::Dense { weight, bias, relu } => {
            kernels::dense(ins[0], weight, bias, dst);
            if *relu {
                kernels::relu_inplace(dst);
            }
        }
        OpKind::Softmax => kernels::softmax(ins[0], dst),
    }
}
