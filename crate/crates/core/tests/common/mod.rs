//! Test-only generators and independent oracles shared by the integration
//! tests. Nothing here calls into the counting, kernel or training code
//! under test.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tdn_core::archdsl::{parse_arch, Activation, ArchGraph, LayerKind, Padding};
use tdn_core::train::ModelParams;

pub struct ArchGen {
    pub min_size: usize,
    pub max_size: usize,
    pub in_channels: usize,
    /// Body lines, excluding input and head.
    pub max_body: usize,
    pub max_channels: usize,
    pub classes: usize,
    pub softmax: bool,
    pub hidden_dense: bool,
}

#[derive(Clone)]
struct Node {
    id: String,
    h: usize,
    w: usize,
    c: usize,
}

fn conv_out(n: usize, k: usize, s: usize, same: bool) -> usize {
    if same {
        n.div_ceil(s)
    } else {
        (n - k) / s + 1
    }
}

/// Random `.tdn` text: a body of convolutions, depthwise convolutions, max
/// pools and residual adds, then a GAP/dense head.
pub fn random_arch(rng: &mut ChaCha8Rng, g: &ArchGen) -> String {
    let size = rng.gen_range(g.min_size..=g.max_size);
    let mut text = format!("input {size} {size} {}\n", g.in_channels);
    let mut nodes = vec![Node { id: "input".into(), h: size, w: size, c: g.in_channels }];
    let mut lines = 0;
    let mut counter = 0;
    let mut fresh = |prefix: &str| {
        counter += 1;
        format!("{prefix}{counter}")
    };
    let act = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.7) { "relu" } else { "none" };
    while lines < g.max_body {
        let prev = nodes.last().unwrap().clone();
        match rng.gen_range(0..5) {
            0 | 1 => {
                let k = [1, 3, 5, 7][rng.gen_range(0..4)];
                let s = rng.gen_range(1..=2);
                let f = rng.gen_range(1..=g.max_channels);
                let same = prev.h < k || prev.w < k || rng.gen_bool(0.6);
                let bn = rng.gen_bool(0.5);
                let bias = if !bn && rng.gen_bool(0.3) { " bias=0" } else { "" };
                let id = fresh("c");
                let pad = if same { "same" } else { "valid" };
                text += &format!("conv {id} k={k} s={s} f={f} pad={pad} bn={} act={}{bias}\n", bn as u8, act(rng));
                nodes.push(Node { id, h: conv_out(prev.h, k, s, same), w: conv_out(prev.w, k, s, same), c: f });
                lines += 1;
            }
            2 => {
                let k = [1, 3, 5, 7][rng.gen_range(0..4)];
                let s = rng.gen_range(1..=2);
                let same = prev.h < k || prev.w < k || rng.gen_bool(0.6);
                let bn = rng.gen_bool(0.5);
                let id = fresh("d");
                let pad = if same { "same" } else { "valid" };
                text += &format!("dwconv {id} k={k} s={s} pad={pad} bn={} act={}\n", bn as u8, act(rng));
                nodes.push(Node { id, h: conv_out(prev.h, k, s, same), w: conv_out(prev.w, k, s, same), c: prev.c });
                lines += 1;
            }
            3 => {
                let k = rng.gen_range(2..=3);
                if prev.h < k || prev.w < k {
                    continue;
                }
                let s = rng.gen_range(1..=2);
                let id = fresh("p");
                text += &format!("maxpool {id} k={k} s={s}\n");
                nodes.push(Node { id, h: conv_out(prev.h, k, s, false), w: conv_out(prev.w, k, s, false), c: prev.c });
                lines += 1;
            }
            _ => {
                let n = nodes.len();
                let partner = nodes[..n - 1]
                    .iter()
                    .rev()
                    .find(|o| (o.h, o.w, o.c) == (prev.h, prev.w, prev.c))
                    .cloned();
                let (a, b) = match partner {
                    Some(o) if rng.gen_bool(0.5) => (prev.id.clone(), o.id),
                    _ => {
                        let id = fresh("r");
                        let bn = rng.gen_bool(0.5);
                        text += &format!("conv {id} k=3 f={} bn={} act=none\n", prev.c, bn as u8);
                        lines += 1;
                        if rng.gen_bool(0.5) {
                            (id, prev.id.clone())
                        } else {
                            (prev.id.clone(), id)
                        }
                    }
                };
                let id = fresh("a");
                text += &format!("add {id} from={a},{b} act={}\n", act(rng));
                nodes.push(Node { id, ..prev });
                lines += 1;
            }
        }
    }
    text += "gap gap\n";
    if g.hidden_dense && rng.gen_bool(0.5) {
        text += &format!("dense hid units={} act=relu\n", rng.gen_range(2..=8));
    }
    text += &format!("dense logits units={}\n", g.classes);
    if g.softmax {
        text += "softmax prob\n";
    }
    text
}

pub fn build(text: &str) -> ArchGraph {
    parse_arch(text).unwrap_or_else(|e| panic!("{e}\n{text}")).infer_shapes().unwrap_or_else(|e| panic!("{e}\n{text}"))
}

/// Spatial output size by enumerating window anchor positions.
fn enumerate_positions(input: usize, k: usize, s: usize, padding: Padding) -> usize {
    let mut count = 0;
    let mut p = 0;
    loop {
        let fits = match padding {
            Padding::Same => p < input,
            Padding::Valid => p + k <= input,
        };
        if !fits {
            return count;
        }
        count += 1;
        p += s;
    }
}

/// `(h, w, c)` of every node, computed without the library's shape code.
pub fn oracle_shapes(graph: &ArchGraph) -> Vec<(usize, usize, usize)> {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
    for node in graph.nodes() {
        let x = node.inputs.first().map(|&p| shapes[p]);
        let s = match &node.kind {
            LayerKind::Input(t) => (t.height, t.width, t.channels),
            LayerKind::Conv { out_channels, geometry: g, .. } => {
                let (h, w, _) = x.unwrap();
                (
                    enumerate_positions(h, g.kernel, g.stride, g.padding),
                    enumerate_positions(w, g.kernel, g.stride, g.padding),
                    *out_channels,
                )
            }
            LayerKind::DepthwiseConv { geometry: g, .. } => {
                let (h, w, c) = x.unwrap();
                (enumerate_positions(h, g.kernel, g.stride, g.padding), enumerate_positions(w, g.kernel, g.stride, g.padding), c)
            }
            LayerKind::MaxPool { kernel, stride } => {
                let (h, w, c) = x.unwrap();
                (
                    enumerate_positions(h, *kernel, *stride, Padding::Valid),
                    enumerate_positions(w, *kernel, *stride, Padding::Valid),
                    c,
                )
            }
            LayerKind::GlobalAvgPool => (1, 1, x.unwrap().2),
            LayerKind::Add { .. } | LayerKind::Softmax => x.unwrap(),
            LayerKind::Dense { units, .. } => (1, 1, *units),
        };
        shapes.push(s);
    }
    shapes
}

/// Counts learnable scalars one by one.
pub fn brute_params(graph: &ArchGraph) -> u64 {
    let shapes = oracle_shapes(graph);
    let mut n = 0u64;
    for node in graph.nodes() {
        let cin = node.inputs.first().map_or(0, |&p| shapes[p].2);
        let (kernel, per_tap_in, outs, bias, bn) = match &node.kind {
            LayerKind::Conv { out_channels, geometry, bias, batch_norm, .. } => {
                (geometry.kernel, cin, *out_channels, *bias, *batch_norm)
            }
            LayerKind::DepthwiseConv { geometry, bias, batch_norm, .. } => (geometry.kernel, 1, cin, *bias, *batch_norm),
            LayerKind::Dense { units, .. } => (1, cin, *units, true, false),
            _ => continue,
        };
        for _ky in 0..kernel {
            for _kx in 0..kernel {
                for _ci in 0..per_tap_in {
                    for _co in 0..outs {
                        n += 1;
                    }
                }
            }
        }
        for _ in 0..outs {
            n += bias as u64 + 2 * bn as u64;
        }
    }
    n
}

/// Walks every output element and counts the arithmetic it needs: one
/// multiply and one add per tap and input channel (padded taps included),
/// one add per bias, two per batch norm, one per ReLU, `k*k - 1` comparisons
/// per pooled output, one add per GAP input plus one divide per channel,
/// one add per residual element and three operations per softmax element.
pub fn brute_flops(graph: &ArchGraph) -> u64 {
    let shapes = oracle_shapes(graph);
    let mut total = 0u64;
    for (i, node) in graph.nodes().iter().enumerate() {
        let (oh, ow, oc) = shapes[i];
        let x = node.inputs.first().map(|&p| shapes[p]);
        let relu = |a: Activation| (a == Activation::Relu) as u64;
        match &node.kind {
            LayerKind::Input(_) => {}
            LayerKind::Conv { geometry, bias, batch_norm, activation, .. }
            | LayerKind::DepthwiseConv { geometry, bias, batch_norm, activation } => {
                let depthwise = matches!(node.kind, LayerKind::DepthwiseConv { .. });
                let reduce = if depthwise { 1 } else { x.unwrap().2 as u64 };
                for _ in 0..oh * ow * oc {
                    let mut ops = 0u64;
                    for _ky in 0..geometry.kernel {
                        for _kx in 0..geometry.kernel {
                            ops += 2 * reduce;
                        }
                    }
                    total += ops + *bias as u64 + 2 * *batch_norm as u64 + relu(*activation);
                }
            }
            LayerKind::MaxPool { kernel, .. } => {
                for _ in 0..oh * ow * oc {
                    total += (kernel * kernel - 1) as u64;
                }
            }
            LayerKind::GlobalAvgPool => {
                let (h, w, c) = x.unwrap();
                for _ in 0..h * w * c {
                    total += 1;
                }
                total += c as u64;
            }
            LayerKind::Add { activation } => {
                for _ in 0..oh * ow * oc {
                    total += 1 + relu(*activation);
                }
            }
            LayerKind::Dense { activation, .. } => {
                let cin = x.unwrap().2;
                for _ in 0..oc {
                    for _ in 0..cin {
                        total += 2;
                    }
                    total += 1 + relu(*activation);
                }
            }
            LayerKind::Softmax => total += 3 * oc as u64,
        }
    }
    total
}

/// Mean softmax cross-entropy in `f64` with batch-statistics batch norm
/// (biased variance, epsilon 1e-5). Inputs are NHWC, one channel per
/// pixel group as the graph's input declares.
pub fn oracle_train_loss(graph: &ArchGraph, params: &ModelParams, images: &[f64], labels: &[usize]) -> f64 {
    oracle_train_eval(graph, params, images, labels).0
}

/// Loss plus a fingerprint of every ReLU sign and max-pool choice, so a
/// finite-difference probe can tell when it stepped across a kink.
pub fn oracle_train_eval(graph: &ArchGraph, params: &ModelParams, images: &[f64], labels: &[usize]) -> (f64, u64) {
    use std::hash::{Hash, Hasher};
    let mut print = std::collections::hash_map::DefaultHasher::new();
    let relu_all = |v: &mut [f64], print: &mut std::collections::hash_map::DefaultHasher| {
        for x in v.iter_mut() {
            (*x > 0.0).hash(print);
            *x = x.max(0.0);
        }
    };
    let shapes = oracle_shapes(graph);
    let n = labels.len();
    let mut outs: Vec<Vec<f64>> = Vec::new();
    let mut logits_at = graph.len() - 1;
    for (i, node) in graph.nodes().iter().enumerate() {
        let (oh, ow, oc) = shapes[i];
        let per = oh * ow * oc;
        let v = match &node.kind {
            LayerKind::Input(_) => images.to_vec(),
            LayerKind::Conv { geometry: g, activation, .. } | LayerKind::DepthwiseConv { geometry: g, activation, .. } => {
                let depthwise = matches!(node.kind, LayerKind::DepthwiseConv { .. });
                let (ih, iw, ic) = shapes[node.inputs[0]];
                let x = &outs[node.inputs[0]];
                let p = params.nodes[i].as_ref().unwrap();
                let (pt, pl) = match g.padding {
                    Padding::Valid => (0, 0),
                    Padding::Same => {
                        let th = ((oh - 1) * g.stride + g.kernel).saturating_sub(ih);
                        let tw = ((ow - 1) * g.stride + g.kernel).saturating_sub(iw);
                        (th / 2, tw / 2)
                    }
                };
                let mut y = vec![0.0; n * per];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for o in 0..oc {
                                let mut acc = p.bias.as_ref().map_or(0.0, |bb| bb[o] as f64);
                                for ky in 0..g.kernel {
                                    for kx in 0..g.kernel {
                                        let iy = (oy * g.stride + ky) as isize - pt as isize;
                                        let ix = (ox * g.stride + kx) as isize - pl as isize;
                                        if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                            continue;
                                        }
                                        let base = b * ih * iw * ic + (iy as usize * iw + ix as usize) * ic;
                                        if depthwise {
                                            acc += x[base + o] * p.weight[(ky * g.kernel + kx) * ic + o] as f64;
                                        } else {
                                            for c in 0..ic {
                                                acc += x[base + c] * p.weight[((ky * g.kernel + kx) * ic + c) * oc + o] as f64;
                                            }
                                        }
                                    }
                                }
                                y[b * per + (oy * ow + ox) * oc + o] = acc;
                            }
                        }
                    }
                }
                if let Some(bn) = &p.bn {
                    let count = (n * oh * ow) as f64;
                    for o in 0..oc {
                        let vals = || (0..n * oh * ow).map(|j| j * oc + o);
                        let mean = vals().map(|j| y[j]).sum::<f64>() / count;
                        let var = vals().map(|j| (y[j] - mean).powi(2)).sum::<f64>() / count;
                        let inv = 1.0 / (var + 1e-5).sqrt();
                        for j in vals() {
                            y[j] = (y[j] - mean) * inv * bn.scale[o] as f64 + bn.shift[o] as f64;
                        }
                    }
                }
                if *activation == Activation::Relu {
                    relu_all(&mut y, &mut print);
                }
                y
            }
            LayerKind::MaxPool { kernel, stride } => {
                let (ih, iw, ic) = shapes[node.inputs[0]];
                let x = &outs[node.inputs[0]];
                let mut y = vec![f64::NEG_INFINITY; n * per];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for c in 0..oc {
                                let mut best = 0;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        let v = x[b * ih * iw * ic + ((oy * stride + ky) * iw + ox * stride + kx) * ic + c];
                                        let d = &mut y[b * per + (oy * ow + ox) * oc + c];
                                        if v > *d {
                                            *d = v;
                                            best = ky * kernel + kx;
                                        }
                                    }
                                }
                                best.hash(&mut print);
                            }
                        }
                    }
                }
                y
            }
            LayerKind::GlobalAvgPool => {
                let (ih, iw, ic) = shapes[node.inputs[0]];
                let x = &outs[node.inputs[0]];
                let mut y = vec![0.0; n * ic];
                for b in 0..n {
                    for j in 0..ih * iw {
                        for c in 0..ic {
                            y[b * ic + c] += x[b * ih * iw * ic + j * ic + c] / (ih * iw) as f64;
                        }
                    }
                }
                y
            }
            LayerKind::Add { activation } => {
                let (a, b) = (&outs[node.inputs[0]], &outs[node.inputs[1]]);
                let mut y: Vec<f64> = a.iter().zip(b).map(|(a, b)| a + b).collect();
                if *activation == Activation::Relu {
                    relu_all(&mut y, &mut print);
                }
                y
            }
            LayerKind::Dense { units, activation } => {
                let cin = shapes[node.inputs[0]].2;
                let x = &outs[node.inputs[0]];
                let p = params.nodes[i].as_ref().unwrap();
                let mut y = vec![0.0; n * units];
                for b in 0..n {
                    for u in 0..*units {
                        let mut acc = p.bias.as_ref().unwrap()[u] as f64;
                        for c in 0..cin {
                            acc += x[b * cin + c] * p.weight[c * units + u] as f64;
                        }
                        y[b * units + u] = acc;
                    }
                }
                if *activation == Activation::Relu {
                    relu_all(&mut y, &mut print);
                }
                y
            }
            LayerKind::Softmax => {
                logits_at = node.inputs[0];
                outs[node.inputs[0]].clone()
            }
        };
        outs.push(v);
    }
    let classes = shapes[logits_at].2;
    let logits = &outs[logits_at];
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    (loss / n as f64, print.finish())
}

pub struct GradCheck {
    /// Worst per-tensor relative error `|a - n| / max(|a|, |n|)`
    /// (L2 norms over the sampled elements, denominator floored at 1e-4 for
    /// gradients that vanish exactly).
    pub worst: f64,
    pub kinds: std::collections::BTreeSet<&'static str>,
    pub text: String,
    pub per_tensor: Vec<f64>,
    /// Sampled elements skipped because a probe crossed a kink.
    pub skipped: usize,
    pub sampled: usize,
    /// Tensors left with no checked element.
    pub unchecked: usize,
}

/// Central finite differences of [`oracle_train_loss`] against the analytic
/// gradients on one seeded random net at 8x8.
pub fn gradcheck(seed: u64) -> GradCheck {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = ArchGen {
        min_size: 8,
        max_size: 8,
        in_channels: rng.gen_range(1..=2),
        max_body: 3,
        max_channels: 4,
        classes: 3,
        softmax: rng.gen_bool(0.5),
        hidden_dense: true,
    };
    let text = random_arch(&mut rng, &gen);
    let graph = build(&text);
    let mut params = ModelParams::init(&graph, seed).unwrap();
    // Non-trivial batch-norm affine parameters.
    for p in params.nodes.iter_mut().flatten() {
        if let Some(bn) = p.bn.as_mut() {
            bn.scale.iter_mut().for_each(|s| *s = rng.gen_range(0.5..1.5));
            bn.shift.iter_mut().for_each(|s| *s = rng.gen_range(-0.3..0.3));
        }
        if let Some(b) = p.bias.as_mut() {
            b.iter_mut().for_each(|s| *s = rng.gen_range(-0.2..0.2));
        }
    }
    let batch = 6;
    let elems = graph.input_shape().elements();
    let images32: Vec<f32> = (0..batch * elems).map(|_| rng.gen_range(0.0..1.0)).collect();
    let images: Vec<f64> = images32.iter().map(|&v| v as f64).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..gen.classes)).collect();
    let analytic = tdn_core::train::loss_and_grads(&graph, &params, &images32, &labels).unwrap();
    let grads: Vec<Vec<f32>> = analytic.grads.tensors().into_iter().cloned().collect();

    let eps = 1e-3f32;
    let mut worst = 0.0f64;
    let mut per_tensor = Vec::new();
    let (mut skipped, mut sampled, mut unchecked) = (0, 0, 0);
    let base = oracle_train_eval(&graph, &params, &images, &labels).1;
    for (t, g) in grads.iter().enumerate() {
        let mut picks: Vec<usize> = (0..g.len()).collect();
        if picks.len() > 8 {
            picks = (0..8).map(|_| rng.gen_range(0..g.len())).collect();
        }
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        let mut checked = 0;
        for &j in &picks {
            let orig = params.learnable_mut()[t][j];
            let mut probe = |h: f32| {
                let mut smooth = true;
                let mut central = |h: f32| {
                    let (hi, lo) = (orig + h, orig - h);
                    params.learnable_mut()[t][j] = hi;
                    let (up, p_up) = oracle_train_eval(&graph, &params, &images, &labels);
                    params.learnable_mut()[t][j] = lo;
                    let (down, p_down) = oracle_train_eval(&graph, &params, &images, &labels);
                    params.learnable_mut()[t][j] = orig;
                    smooth &= p_up == base && p_down == base;
                    (up - down) / (hi as f64 - lo as f64)
                };
                // Richardson step removes the O(h^2) truncation term, which
                // matters where batch norm makes the loss sharply curved.
                let d = (4.0 * central(h / 2.0) - central(h)) / 3.0;
                smooth.then_some(d)
            };
            sampled += 1;
            // A probe that crosses a ReLU or max-pool kink retries with a
            // smaller step before giving up on the element.
            let Some(numeric) = [eps, eps / 10.0, eps / 100.0].into_iter().find_map(&mut probe) else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let a = g[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        if checked == 0 {
            unchecked += 1;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-4);
        worst = worst.max(rel);
        per_tensor.push(rel);
    }
    let kinds = graph.nodes().iter().map(|n| n.kind.keyword()).collect();
    GradCheck { worst, kinds, text, per_tensor, skipped, sampled, unchecked }
}

/// Seeded weights with non-trivial batch-norm statistics and affine terms,
/// so folding has something to fold.
pub fn random_params(graph: &ArchGraph, seed: u64) -> ModelParams {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = ModelParams::init(graph, seed).unwrap();
    for p in params.nodes.iter_mut().flatten() {
        if let Some(bn) = p.bn.as_mut() {
            bn.scale.iter_mut().for_each(|s| *s = rng.gen_range(0.5..1.5));
            bn.shift.iter_mut().for_each(|s| *s = rng.gen_range(-0.3..0.3));
            bn.running_mean.iter_mut().for_each(|s| *s = rng.gen_range(-0.2..0.2));
            bn.running_var.iter_mut().for_each(|s| *s = rng.gen_range(0.5..2.0));
        }
        if let Some(b) = p.bias.as_mut() {
            b.iter_mut().for_each(|s| *s = rng.gen_range(-0.2..0.2));
        }
    }
    params
}

/// Every on/off combination of the five runtime knobs, single-threaded.
pub fn knob_grid() -> Vec<tdn_core::runtime::RuntimeConfig> {
    (0..32u32)
        .map(|bits| tdn_core::runtime::RuntimeConfig {
            primitive_cache_capacity: if bits & 1 != 0 { 4 } else { 0 },
            blocked_format: bits & 2 != 0,
            mempool_enable: bits & 4 != 0,
            tensor_pool_limit: (bits >> 3 & 1) as usize,
            conv_add_fusion_safe: bits & 16 != 0,
            num_threads: 1,
            cpu_affinity: String::new(),
        })
        .collect()
}

pub fn random_batch(graph: &ArchGraph, n: usize, seed: u64) -> tdn_core::runtime::Tensor {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = graph.input_shape();
    let data = (0..n * s.elements()).map(|_| rng.gen_range(0.0..1.0)).collect();
    tdn_core::runtime::Tensor::new([n, s.height, s.width, s.channels], data)
}

/// Generator settings for the runtime equivalence graphs.
pub fn runtime_gen(rng: &mut ChaCha8Rng) -> ArchGen {
    ArchGen {
        min_size: 6,
        max_size: 16,
        in_channels: rng.gen_range(1..=3),
        max_body: rng.gen_range(2..=8),
        max_channels: 12,
        classes: rng.gen_range(2..=6),
        softmax: rng.gen_bool(0.7),
        hidden_dense: true,
    }
}

/// Worst absolute difference between every knob combination's output and
/// the reference interpreter, over `graphs` seeded random nets. Also checks
/// softmax row sums.
pub fn runtime_equivalence(graphs: u64, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    use tdn_core::runtime::{reference::reference_infer, ExecutionPlan};
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for g in 0..graphs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + g);
        let gen = runtime_gen(&mut rng);
        let text = random_arch(&mut rng, &gen);
        let graph = build(&text);
        let params = random_params(&graph, seed + g);
        let batch = random_batch(&graph, 3, seed + g);
        let expected = reference_infer(&graph, &params, &batch).unwrap();
        for cfg in knob_grid() {
            let plan = ExecutionPlan::build(&graph, &params, &cfg).unwrap();
            for _ in 0..2 {
                let got = plan.infer(&batch).unwrap();
                assert_eq!(got.len(), expected.len());
                for (a, b) in got.iter().zip(&expected) {
                    worst = worst.max((*a as f64 - b).abs());
                }
                if gen.softmax {
                    for row in got.chunks(gen.classes) {
                        worst_sum = worst_sum.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
    }
    (worst, worst_sum)
}
