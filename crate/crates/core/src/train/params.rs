use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archdsl::{ArchGraph, LayerKind, ShapeError};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Weights of one layer. Layouts: conv `[k][k][c_in][c_out]`, depthwise
/// `[k][k][c]`, dense `[in][units]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams {
    pub weight: Vec<f32>,
    pub weight_dims: Vec<usize>,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNormParams>,
}

/// Learnable tensors and batch-norm statistics for every node of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub nodes: Vec<Option<NodeParams>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("parameter layout does not match graph: {0}")]
    Mismatch(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
}

/// Expected weight dims for a node, or `None` when it has no weights.
pub fn weight_dims(kind: &LayerKind, input_channels: usize) -> Option<Vec<usize>> {
    match kind {
        LayerKind::Conv { out_channels, geometry, .. } => {
            Some(vec![geometry.kernel, geometry.kernel, input_channels, *out_channels])
        }
        LayerKind::DepthwiseConv { geometry, .. } => Some(vec![geometry.kernel, geometry.kernel, input_channels]),
        LayerKind::Dense { units, .. } => Some(vec![input_channels, *units]),
        _ => None,
    }
}

fn fans(kind: &LayerKind, dims: &[usize]) -> (usize, usize) {
    match kind {
        LayerKind::Conv { .. } => (dims[0] * dims[1] * dims[2], dims[0] * dims[1] * dims[3]),
        LayerKind::DepthwiseConv { .. } => (dims[0] * dims[1], dims[0] * dims[1]),
        _ => (dims[0], dims[1]),
    }
}

/// Output channels carrying bias / batch-norm vectors.
fn vector_len(kind: &LayerKind, input_channels: usize) -> usize {
    match kind {
        LayerKind::Conv { out_channels, .. } => *out_channels,
        LayerKind::Dense { units, .. } => *units,
        _ => input_channels,
    }
}

fn has_bias(kind: &LayerKind) -> bool {
    match kind {
        LayerKind::Conv { bias, .. } | LayerKind::DepthwiseConv { bias, .. } => *bias,
        LayerKind::Dense { .. } => true,
        _ => false,
    }
}

fn has_bn(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv { batch_norm: true, .. } | LayerKind::DepthwiseConv { batch_norm: true, .. }
    )
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init(graph: &ArchGraph, seed: u64) -> Result<Self, ShapeError> {
        let shapes = graph.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = graph
            .nodes()
            .iter()
            .map(|node| {
                let c_in = node.inputs.first().map_or(0, |&p| shapes[p].channels);
                let dims = weight_dims(&node.kind, c_in)?;
                let (fan_in, fan_out) = fans(&node.kind, &dims);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let count: usize = dims.iter().product();
                let weight = (0..count).map(|_| rng.gen_range(-limit..=limit)).collect();
                let len = vector_len(&node.kind, c_in);
                Some(NodeParams {
                    weight,
                    weight_dims: dims,
                    bias: has_bias(&node.kind).then(|| vec![0.0; len]),
                    bn: has_bn(&node.kind).then(|| BatchNormParams::identity(len)),
                })
            })
            .collect();
        Ok(Self { nodes, seed })
    }

    /// All-zero weights with the graph's layout.
    pub fn zeros(graph: &ArchGraph) -> Result<Self, ShapeError> {
        let mut p = Self::init(graph, 0)?;
        for n in p.nodes.iter_mut().flatten() {
            n.weight.fill(0.0);
        }
        Ok(p)
    }

    /// Checks that every tensor matches the graph's expected layout and is
    /// finite.
    pub fn validate(&self, graph: &ArchGraph) -> Result<(), ParamsError> {
        let shapes = graph.shapes()?;
        if self.nodes.len() != graph.len() {
            return Err(ParamsError::Mismatch(format!("{} nodes vs {} in graph", self.nodes.len(), graph.len())));
        }
        for (node, params) in graph.nodes().iter().zip(&self.nodes) {
            let c_in = node.inputs.first().map_or(0, |&p| shapes[p].channels);
            let expect = weight_dims(&node.kind, c_in);
            match (expect, params) {
                (None, None) => continue,
                (Some(dims), Some(p)) => {
                    let len = vector_len(&node.kind, c_in);
                    let bias_ok = p.bias.as_ref().map(Vec::len) == has_bias(&node.kind).then_some(len);
                    let bn_ok = match (&p.bn, has_bn(&node.kind)) {
                        (Some(bn), true) => [&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var]
                            .iter()
                            .all(|v| v.len() == len),
                        (None, false) => true,
                        _ => false,
                    };
                    let count: usize = dims.iter().product();
                    if p.weight_dims != dims || p.weight.len() != count || !bias_ok || !bn_ok {
                        return Err(ParamsError::Mismatch(format!("node `{}`", node.id)));
                    }
                    let finite = p.weight.iter().chain(p.bias.iter().flatten()).all(|v| v.is_finite())
                        && p.bn.iter().all(|bn| {
                            bn.scale
                                .iter()
                                .chain(&bn.shift)
                                .chain(&bn.running_mean)
                                .chain(&bn.running_var)
                                .all(|v| v.is_finite())
                        });
                    if !finite {
                        return Err(ParamsError::NonFinite(node.id.clone()));
                    }
                }
                _ => return Err(ParamsError::Mismatch(format!("node `{}`", node.id))),
            }
        }
        Ok(())
    }

    /// Mutable views of the learnable tensors in a fixed order: per node,
    /// weight, bias, batch-norm scale, batch-norm shift.
    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for p in self.nodes.iter_mut().flatten() {
            out.push(&mut p.weight);
            if let Some(b) = p.bias.as_mut() {
                out.push(b);
            }
            if let Some(bn) = p.bn.as_mut() {
                out.push(&mut bn.scale);
                out.push(&mut bn.shift);
            }
        }
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.nodes
            .iter()
            .flatten()
            .map(|p| {
                p.weight.len()
                    + p.bias.as_ref().map_or(0, Vec::len)
                    + p.bn.as_ref().map_or(0, |bn| bn.scale.len() + bn.shift.len())
            })
            .sum()
    }
}

/// Gradients mirroring [`ModelParams`]'s learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrads {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub scale: Option<Vec<f32>>,
    pub shift: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub nodes: Vec<Option<NodeGrads>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let nodes = params
            .nodes
            .iter()
            .map(|p| {
                p.as_ref().map(|p| NodeGrads {
                    weight: vec![0.0; p.weight.len()],
                    bias: p.bias.as_ref().map(|b| vec![0.0; b.len()]),
                    scale: p.bn.as_ref().map(|bn| vec![0.0; bn.scale.len()]),
                    shift: p.bn.as_ref().map(|bn| vec![0.0; bn.shift.len()]),
                })
            })
            .collect();
        Self { nodes }
    }

    /// Same order as [`ModelParams::learnable_mut`].
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = Vec::new();
        for g in self.nodes.iter().flatten() {
            out.push(&g.weight);
            if let Some(b) = &g.bias {
                out.push(b);
            }
            if let (Some(s), Some(t)) = (&g.scale, &g.shift) {
                out.push(s);
                out.push(t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archdsl::parse_arch;

    fn graph() -> ArchGraph {
        parse_arch("input 8 8 1\nconv c k=3 f=4 bn=1\ndwconv d k=3\ngap g\ndense o units=6\nsoftmax s\n")
            .unwrap()
            .infer_shapes()
            .unwrap()
    }

    #[test]
    fn deterministic_and_bounded() {
        let g = graph();
        let a = ModelParams::init(&g, 7).unwrap();
        let b = ModelParams::init(&g, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(&g, 8).unwrap());
        let conv = a.nodes[1].as_ref().unwrap();
        let limit = (6.0f32 / (9.0 + 36.0)).sqrt();
        assert!(conv.weight.iter().all(|w| w.abs() <= limit));
        let bn = conv.bn.as_ref().unwrap();
        assert!(bn.scale.iter().all(|&s| s == 1.0));
        assert!(bn.running_var.iter().all(|&s| s == 1.0));
        assert!(conv.bias.is_none());
        assert_eq!(a.nodes[4].as_ref().unwrap().bias.as_ref().unwrap(), &vec![0.0; 6]);
        a.validate(&g).unwrap();
    }

    #[test]
    fn input_only_graph_has_no_params() {
        let g = parse_arch("input 4 4 1\n").unwrap().infer_shapes().unwrap();
        let p = ModelParams::init(&g, 1).unwrap();
        assert!(p.nodes.iter().all(Option::is_none));
        assert_eq!(p.learnable_count(), 0);
    }

    #[test]
    fn counts_agree_with_complexity() {
        let g = graph();
        let p = ModelParams::init(&g, 1).unwrap();
        assert_eq!(p.learnable_count() as u64, crate::complexity::count_params(&g).unwrap());
    }

    #[test]
    fn validate_rejects_mismatch() {
        let g = graph();
        let mut p = ModelParams::init(&g, 1).unwrap();
        p.nodes[1].as_mut().unwrap().weight.pop();
        assert!(matches!(p.validate(&g), Err(ParamsError::Mismatch(_))));
        let mut p = ModelParams::init(&g, 1).unwrap();
        p.nodes[4].as_mut().unwrap().weight[0] = f32::NAN;
        assert!(matches!(p.validate(&g), Err(ParamsError::NonFinite(_))));
    }
}
