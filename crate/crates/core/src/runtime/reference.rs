//! Direct-loop interpreter in `f64`: no fusion, no folding, no packing.
//! Batch norm uses running statistics.

use super::{RuntimeError, Tensor};
use crate::archdsl::{Activation, ArchGraph, LayerKind, TensorShape};
use crate::train::{ModelParams, BN_EPSILON};

fn relu(v: &mut [f64], act: Activation) {
    if act == Activation::Relu {
        for x in v {
            *x = x.max(0.0);
        }
    }
}

/// Outputs of every node for one image.
pub fn node_outputs(graph: &ArchGraph, params: &ModelParams, image: &[f32]) -> Result<Vec<Vec<f64>>, RuntimeError> {
    let shapes = graph.shapes()?;
    params.validate(graph)?;
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(graph.len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let out_s = shapes[i];
        let value = match &node.kind {
            LayerKind::Input(_) => image.iter().map(|&v| v as f64).collect(),
            LayerKind::Conv { geometry, activation, .. } | LayerKind::DepthwiseConv { geometry, activation, .. } => {
                let depthwise = matches!(node.kind, LayerKind::DepthwiseConv { .. });
                let x = &outs[node.inputs[0]];
                let in_s = shapes[node.inputs[0]];
                let p = params.nodes[i].as_ref().expect("validated");
                let k = geometry.kernel;
                let s = geometry.stride;
                let pt = geometry.pad_before(in_s.height, out_s.height) as isize;
                let pl = geometry.pad_before(in_s.width, out_s.width) as isize;
                let (ci, co) = (in_s.channels, out_s.channels);
                let mut y = vec![0.0f64; out_s.elements()];
                for oy in 0..out_s.height {
                    for ox in 0..out_s.width {
                        for o in 0..co {
                            let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o] as f64);
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - pt;
                                if iy < 0 || iy >= in_s.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - pl;
                                    if ix < 0 || ix >= in_s.width as isize {
                                        continue;
                                    }
                                    let base = (iy as usize * in_s.width + ix as usize) * ci;
                                    if depthwise {
                                        acc += x[base + o] * p.weight[(ky * k + kx) * ci + o] as f64;
                                    } else {
                                        for c in 0..ci {
                                            acc += x[base + c] * p.weight[((ky * k + kx) * ci + c) * co + o] as f64;
                                        }
                                    }
                                }
                            }
                            if let Some(bn) = &p.bn {
                                let sd = (bn.running_var[o] as f64 + BN_EPSILON as f64).sqrt();
                                acc = (acc - bn.running_mean[o] as f64) / sd * bn.scale[o] as f64 + bn.shift[o] as f64;
                            }
                            y[(oy * out_s.width + ox) * co + o] = acc;
                        }
                    }
                }
                relu(&mut y, *activation);
                y
            }
            LayerKind::MaxPool { kernel, stride } => {
                let x = &outs[node.inputs[0]];
                let in_s = shapes[node.inputs[0]];
                let c = in_s.channels;
                let mut y = vec![f64::NEG_INFINITY; out_s.elements()];
                for oy in 0..out_s.height {
                    for ox in 0..out_s.width {
                        for ch in 0..c {
                            let dst = &mut y[(oy * out_s.width + ox) * c + ch];
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let v = x[((oy * stride + ky) * in_s.width + ox * stride + kx) * c + ch];
                                    *dst = dst.max(v);
                                }
                            }
                        }
                    }
                }
                y
            }
            LayerKind::GlobalAvgPool => {
                let x = &outs[node.inputs[0]];
                let c = out_s.channels;
                let mut y = vec![0.0; c];
                for (j, v) in x.iter().enumerate() {
                    y[j % c] += v;
                }
                let n = (x.len() / c) as f64;
                y.iter_mut().for_each(|v| *v /= n);
                y
            }
            LayerKind::Add { activation } => {
                let (a, b) = (&outs[node.inputs[0]], &outs[node.inputs[1]]);
                let mut y: Vec<f64> = a.iter().zip(b).map(|(a, b)| a + b).collect();
                relu(&mut y, *activation);
                y
            }
            LayerKind::Dense { units, activation } => {
                let x = &outs[node.inputs[0]];
                let p = params.nodes[i].as_ref().expect("validated");
                let b = p.bias.as_ref().expect("dense bias");
                let mut y: Vec<f64> = (0..*units)
                    .map(|u| b[u] as f64 + x.iter().enumerate().map(|(j, v)| v * p.weight[j * units + u] as f64).sum::<f64>())
                    .collect();
                relu(&mut y, *activation);
                y
            }
            LayerKind::Softmax => {
                let x = &outs[node.inputs[0]];
                let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        };
        outs.push(value);
    }
    Ok(outs)
}

/// Graph output for every image of `batch`, row-major.
pub fn reference_infer(graph: &ArchGraph, params: &ModelParams, batch: &Tensor) -> Result<Vec<f64>, RuntimeError> {
    let input: TensorShape = graph.shapes()?[0];
    if batch.image_shape() != input {
        return Err(RuntimeError::InputShape { expected: input, got: batch.image_shape() });
    }
    let mut out = Vec::new();
    for n in 0..batch.batch() {
        let mut outs = node_outputs(graph, params, batch.image(n))?;
        out.append(&mut outs[graph.output_index()]);
    }
    Ok(out)
}
