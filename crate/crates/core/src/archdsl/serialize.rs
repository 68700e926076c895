use std::fmt::Write;

use super::{Activation, ArchGraph, LayerKind};

/// Writes a graph in canonical `.tdn` form: one node per line, attributes in
/// fixed order, `from=` only where the predecessor is not the previous line.
pub fn serialize_arch(graph: &ArchGraph) -> String {
    let nodes = graph.nodes();
    let mut out = String::new();
    for (i, node) in nodes.iter().enumerate() {
        let mut line = String::new();
        match &node.kind {
            LayerKind::Input(shape) => {
                write!(line, "input {} {} {}", shape.height, shape.width, shape.channels).unwrap();
            }
            LayerKind::Conv { out_channels, geometry, bias, batch_norm, activation } => {
                write!(
                    line,
                    "conv {} k={} s={} f={} pad={} bn={} act={}",
                    node.id,
                    geometry.kernel,
                    geometry.stride,
                    out_channels,
                    geometry.padding.as_str(),
                    u8::from(*batch_norm),
                    activation.as_str()
                )
                .unwrap();
                if *bias != LayerKind::default_bias(*batch_norm) {
                    write!(line, " bias={}", u8::from(*bias)).unwrap();
                }
            }
            LayerKind::DepthwiseConv { geometry, bias, batch_norm, activation } => {
                write!(
                    line,
                    "dwconv {} k={} s={} pad={} bn={} act={}",
                    node.id,
                    geometry.kernel,
                    geometry.stride,
                    geometry.padding.as_str(),
                    u8::from(*batch_norm),
                    activation.as_str()
                )
                .unwrap();
                if *bias != LayerKind::default_bias(*batch_norm) {
                    write!(line, " bias={}", u8::from(*bias)).unwrap();
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                write!(line, "maxpool {} k={} s={}", node.id, kernel, stride).unwrap();
            }
            LayerKind::GlobalAvgPool => write!(line, "gap {}", node.id).unwrap(),
            LayerKind::Add { activation } => {
                let a = &nodes[node.inputs[0]].id;
                let b = &nodes[node.inputs[1]].id;
                write!(line, "add {} from={},{}", node.id, a, b).unwrap();
                if *activation != Activation::None {
                    write!(line, " act={}", activation.as_str()).unwrap();
                }
            }
            LayerKind::Dense { units, activation } => {
                write!(line, "dense {} units={} act={}", node.id, units, activation.as_str()).unwrap();
            }
            LayerKind::Softmax => write!(line, "softmax {}", node.id).unwrap(),
        }
        if node.kind.arity() == 1 && node.inputs[0] + 1 != i {
            write!(line, " from={}", nodes[node.inputs[0]].id).unwrap();
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}
