//! Architecture graphs and the line-oriented `.tdn` description language.
//!
//! A graph is an ordered list of layer nodes. Every node except the single
//! `input` refers to earlier nodes only, so declaration order is always a
//! valid topological order.

mod parse;
mod serialize;
mod shapes;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::parse_arch;
pub use serialize::serialize_arch;

/// Id given to the graph input node; `input` lines carry no explicit id.
pub const INPUT_ID: &str = "input";

/// Kernel sizes accepted for convolutions.
pub const KERNEL_CHOICES: [usize; 4] = [1, 3, 5, 7];
/// Strides accepted for convolutions.
pub const STRIDE_CHOICES: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_vector(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        }
    }
}

/// Geometry shared by dense and depthwise convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    /// Output spatial size for one dimension, or `None` when valid padding
    /// leaves nothing.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        match self.padding {
            Padding::Same => Some(input.div_ceil(self.stride)),
            Padding::Valid => {
                if input < self.kernel {
                    None
                } else {
                    Some((input - self.kernel) / self.stride + 1)
                }
            }
        }
    }

    /// Leading (top/left) zero padding for one dimension. Total padding is
    /// split with the extra pixel on the trailing side.
    pub fn pad_before(&self, input: usize, output: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => {
                let needed = (output - 1) * self.stride + self.kernel;
                needed.saturating_sub(input) / 2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input(TensorShape),
    Conv {
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        batch_norm: bool,
        activation: Activation,
    },
    DepthwiseConv {
        geometry: ConvGeometry,
        bias: bool,
        batch_norm: bool,
        activation: Activation,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add {
        activation: Activation,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    Softmax,
}

impl LayerKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Input(_) => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::DepthwiseConv { .. } => "dwconv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Add { .. } => "add",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Number of predecessors the layer kind requires.
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input(_) => 0,
            LayerKind::Add { .. } => 2,
            _ => 1,
        }
    }

    /// Default bias rule: a bias is redundant in front of batch norm.
    pub fn default_bias(batch_norm: bool) -> bool {
        !batch_norm
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerKind::Conv { activation, .. }
            | LayerKind::DepthwiseConv { activation, .. }
            | LayerKind::Add { activation }
            | LayerKind::Dense { activation, .. } => *activation,
            _ => Activation::None,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::DepthwiseConv { .. } | LayerKind::Dense { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Indices of predecessor nodes, all strictly smaller than this node's
    /// own index.
    pub inputs: Vec<usize>,
}

/// Parse and validation failures. Every variant carries the 1-based source
/// line it was detected on.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: unknown layer kind `{kind}`")]
    UnknownLayer {
        line: usize,
        column: usize,
        kind: String,
    },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: reference to undeclared node `{id}`")]
    UndeclaredId { line: usize, id: String },
    #[error("line {line}: program has no input node")]
    MissingInput { line: usize },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            ParseError::Syntax { line, .. }
            | ParseError::UnknownLayer { line, .. }
            | ParseError::DuplicateId { line, .. }
            | ParseError::UndeclaredId { line, .. }
            | ParseError::MissingInput { line }
            | ParseError::Structure { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("add `{id}`: branch shapes differ ({left} vs {right})")]
    AddMismatch {
        id: String,
        left: TensorShape,
        right: TensorShape,
    },
    #[error("`{id}`: valid padding on {input} leaves no output")]
    EmptyOutput { id: String, input: TensorShape },
    #[error("`{id}`: {kind} applied to spatial tensor {input}")]
    SpatialInput {
        id: String,
        kind: &'static str,
        input: TensorShape,
    },
    #[error("`{id}`: zero-sized dimension")]
    ZeroDimension { id: String },
    #[error("graph has not been shape-inferred")]
    NotInferred,
}

/// A validated architecture graph, optionally annotated with per-node
/// output shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchGraph {
    nodes: Vec<LayerSpec>,
    resolved: Option<Vec<TensorShape>>,
}

impl ArchGraph {
    /// Builds a graph from nodes, applying the same structural checks as the
    /// parser. Node line numbers in errors are 1-based node positions.
    pub fn from_nodes(nodes: Vec<LayerSpec>) -> Result<Self, ParseError> {
        parse::validate_structure(&nodes, |i| i + 1)?;
        Ok(Self { nodes, resolved: None })
    }

    pub(crate) fn from_validated(nodes: Vec<LayerSpec>) -> Self {
        Self { nodes, resolved: None }
    }

    pub fn nodes(&self) -> &[LayerSpec] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, index: usize) -> &LayerSpec {
        &self.nodes[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_shape(&self) -> TensorShape {
        match self.nodes[0].kind {
            LayerKind::Input(shape) => shape,
            _ => unreachable!("validated graphs start with their input node"),
        }
    }

    pub fn is_inferred(&self) -> bool {
        self.resolved.is_some()
    }

    /// Output shape of every node, or `None` before [`ArchGraph::infer_shapes`].
    pub fn resolved_shapes(&self) -> Option<&[TensorShape]> {
        self.resolved.as_deref()
    }

    pub fn shapes(&self) -> Result<&[TensorShape], ShapeError> {
        self.resolved.as_deref().ok_or(ShapeError::NotInferred)
    }

    pub fn output_index(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Consumers of each node, in declaration order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &p in &node.inputs {
                out[p].push(i);
            }
        }
        out
    }

    /// Index of the last node consuming each node's output; nodes without
    /// consumers (the graph outputs) map to themselves.
    pub fn last_uses(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for &p in &node.inputs {
                last[p] = last[p].max(i);
            }
        }
        last
    }

    /// Number of output classes if the graph ends in a vector-producing
    /// head.
    pub fn num_outputs(&self) -> Result<usize, ShapeError> {
        Ok(self.shapes()?[self.output_index()].channels)
    }

    /// Replaces node attributes while keeping connectivity, re-running
    /// structural checks. Shapes must be re-inferred afterwards.
    pub fn map_kinds(&self, mut f: impl FnMut(usize, &LayerKind) -> LayerKind) -> Self {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| LayerSpec {
                id: n.id.clone(),
                kind: f(i, &n.kind),
                inputs: n.inputs.clone(),
            })
            .collect();
        Self { nodes, resolved: None }
    }
}
