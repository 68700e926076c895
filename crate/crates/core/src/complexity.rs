//! Exact parameter, FLOP and activation-memory accounting for architecture
//! graphs.
//!
//! FLOP convention: convolutions and dense layers count two operations per
//! multiply-accumulate, plus one per output element for a bias add. Batch norm
//! (unfolded) costs two per element, ReLU one, max pooling `k*k - 1`
//! comparisons per output, global average pooling one add per input element
//! and one division per channel, residual adds one per element and softmax
//! three per element. Zero-padded taps are counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archdsl::{Activation, ArchGraph, LayerKind, ShapeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub peak_activation_bytes: u64,
    pub per_layer: Vec<LayerCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComplexityError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("cannot compare against a report with zero {0}")]
    ZeroDenominator(&'static str),
}

/// Learnable parameter count of one node. Batch-norm running statistics are
/// not counted.
pub fn node_params(kind: &LayerKind, input_channels: usize) -> u64 {
    let c_in = input_channels as u64;
    match kind {
        LayerKind::Conv { out_channels, geometry, bias, batch_norm, .. } => {
            let k = geometry.kernel as u64;
            let c_out = *out_channels as u64;
            k * k * c_in * c_out + u64::from(*bias) * c_out + u64::from(*batch_norm) * 2 * c_out
        }
        LayerKind::DepthwiseConv { geometry, bias, batch_norm, .. } => {
            let k = geometry.kernel as u64;
            k * k * c_in + u64::from(*bias) * c_in + u64::from(*batch_norm) * 2 * c_in
        }
        LayerKind::Dense { units, .. } => c_in * *units as u64 + *units as u64,
        _ => 0,
    }
}

fn relu_ops(act: Activation, elements: u64) -> u64 {
    match act {
        Activation::Relu => elements,
        Activation::None => 0,
    }
}

/// `(macs, flops)` of one node given its input and output shapes.
fn node_cost(graph: &ArchGraph, index: usize) -> Result<(u64, u64), ShapeError> {
    let shapes = graph.shapes()?;
    let node = graph.node(index);
    let out = shapes[index];
    let out_elems = out.elements() as u64;
    let input = node.inputs.first().map(|&p| shapes[p]);
    Ok(match &node.kind {
        LayerKind::Input(_) => (0, 0),
        LayerKind::Conv { geometry, bias, batch_norm, activation, .. } => {
            let c_in = input.unwrap().channels as u64;
            let k = geometry.kernel as u64;
            let macs = out_elems * k * k * c_in;
            let flops = 2 * macs
                + u64::from(*bias) * out_elems
                + u64::from(*batch_norm) * 2 * out_elems
                + relu_ops(*activation, out_elems);
            (macs, flops)
        }
        LayerKind::DepthwiseConv { geometry, bias, batch_norm, activation } => {
            let k = geometry.kernel as u64;
            let macs = out_elems * k * k;
            let flops = 2 * macs
                + u64::from(*bias) * out_elems
                + u64::from(*batch_norm) * 2 * out_elems
                + relu_ops(*activation, out_elems);
            (macs, flops)
        }
        LayerKind::MaxPool { kernel, .. } => (0, (*kernel as u64 * *kernel as u64 - 1) * out_elems),
        LayerKind::GlobalAvgPool => {
            let x = input.unwrap();
            (0, x.elements() as u64 + x.channels as u64)
        }
        LayerKind::Add { activation } => (0, out_elems + relu_ops(*activation, out_elems)),
        LayerKind::Dense { units, activation } => {
            let c_in = input.unwrap().channels as u64;
            let units = *units as u64;
            let macs = c_in * units;
            (macs, 2 * macs + units + relu_ops(*activation, units))
        }
        LayerKind::Softmax => (0, 3 * out_elems),
    })
}

pub fn count_params(graph: &ArchGraph) -> Result<u64, ShapeError> {
    let shapes = graph.shapes()?;
    Ok(graph
        .nodes()
        .iter()
        .map(|n| node_params(&n.kind, n.inputs.first().map_or(0, |&p| shapes[p].channels)))
        .sum())
}

/// `(flops, macs)` totals.
pub fn count_flops(graph: &ArchGraph) -> Result<(u64, u64), ShapeError> {
    let mut flops = 0;
    let mut macs = 0;
    for i in 0..graph.len() {
        let (m, f) = node_cost(graph, i)?;
        macs += m;
        flops += f;
    }
    Ok((flops, macs))
}

/// Peak live activation bytes for one image executed in declaration order,
/// freeing each tensor after its last consumer. Graph outputs stay live.
pub fn peak_activation_bytes(graph: &ArchGraph) -> Result<u64, ShapeError> {
    let shapes = graph.shapes()?;
    let last_use = graph.last_uses();
    let mut live: u64 = 0;
    let mut peak: u64 = 0;
    let mut dying: Vec<Vec<usize>> = vec![Vec::new(); graph.len()];
    for (i, &last) in last_use.iter().enumerate() {
        if last != i {
            dying[last].push(i);
        }
    }
    for (i, shape) in shapes.iter().enumerate() {
        live += shape.elements() as u64;
        peak = peak.max(live);
        for &d in &dying[i] {
            live -= shapes[d].elements() as u64;
        }
    }
    Ok(peak * 4)
}

pub fn analyze(graph: &ArchGraph) -> Result<ComplexityReport, ShapeError> {
    let shapes = graph.shapes()?;
    let mut per_layer = Vec::with_capacity(graph.len());
    let mut macs = 0;
    for (i, node) in graph.nodes().iter().enumerate() {
        let (m, flops) = node_cost(graph, i)?;
        macs += m;
        let params = node_params(&node.kind, node.inputs.first().map_or(0, |&p| shapes[p].channels));
        per_layer.push(LayerCost { id: node.id.clone(), params, flops });
    }
    Ok(ComplexityReport {
        params: per_layer.iter().map(|l| l.params).sum(),
        flops: per_layer.iter().map(|l| l.flops).sum(),
        macs,
        peak_activation_bytes: peak_activation_bytes(graph)?,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub params_display: String,
    pub flops_display: String,
}

/// How many times larger `a` is than `b`.
pub fn compare_reports(a: &ComplexityReport, b: &ComplexityReport) -> Result<RatioRecord, ComplexityError> {
    if b.params == 0 {
        return Err(ComplexityError::ZeroDenominator("params"));
    }
    if b.flops == 0 {
        return Err(ComplexityError::ZeroDenominator("flops"));
    }
    let params_ratio = a.params as f64 / b.params as f64;
    let flops_ratio = a.flops as f64 / b.flops as f64;
    Ok(RatioRecord {
        params_ratio,
        flops_ratio,
        params_display: display_ratio(params_ratio),
        flops_display: display_ratio(flops_ratio),
    })
}

/// Ratios of ten or more print as whole numbers ("56×"), smaller ones with
/// one decimal ("7.6×"), both rounded to nearest.
pub fn display_ratio(ratio: f64) -> String {
    if ratio >= 10.0 {
        format!("{}×", ratio.round() as u64)
    } else {
        format!("{:.1}×", ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archdsl::parse_arch;

    fn inferred(src: &str) -> ArchGraph {
        parse_arch(src).unwrap().infer_shapes().unwrap()
    }

    #[test]
    fn conv_param_closed_form() {
        let g = inferred("input 4 4 3\nconv c k=3 f=8 act=none\n");
        assert_eq!(count_params(&g).unwrap(), 224);
    }

    #[test]
    fn dense_closed_form() {
        let g = inferred("input 1 1 2048\ndense d units=6\n");
        assert_eq!(count_params(&g).unwrap(), 12_294);
        assert_eq!(count_flops(&g).unwrap(), (24_582, 12_288));
    }

    #[test]
    fn smallest_conv() {
        let g = inferred("input 1 1 1\nconv c k=1 f=1 act=none\n");
        assert_eq!(count_flops(&g).unwrap().0, 3);
    }

    #[test]
    fn batch_norm_params_exclude_running_stats() {
        let g = inferred("input 4 4 2\nconv c k=1 f=3 bn=1\n");
        // 1*1*2*3 weights + 2*3 scale/shift, no bias
        assert_eq!(count_params(&g).unwrap(), 12);
    }

    #[test]
    fn spatial_scaling() {
        let src = |n: usize| format!("input {n} {n} 2\nconv a k=3 f=8\nconv b k=5 f=4 bn=1\ndwconv c k=3\n");
        let small = inferred(&src(8));
        let big = inferred(&src(16));
        assert_eq!(count_flops(&big).unwrap().0, 4 * count_flops(&small).unwrap().0);
        assert_eq!(count_params(&big).unwrap(), count_params(&small).unwrap());
    }

    #[test]
    fn peak_memory_examples() {
        let g = inferred("input 8 8 1\ngap g\ndense d units=6\n");
        assert_eq!(peak_activation_bytes(&g).unwrap(), 65 * 4);
        let only = inferred("input 5 7 3\n");
        assert_eq!(peak_activation_bytes(&only).unwrap(), 5 * 7 * 3 * 4);
        // skip tensor stays live while both branch convs exist
        let res = inferred("input 4 4 8\nconv a k=3 f=8\nconv b k=3 f=8\nadd s from=input,b\n");
        assert!(peak_activation_bytes(&res).unwrap() >= 3 * 128 * 4);
    }

    #[test]
    fn table_one_ratios() {
        let big = ComplexityReport {
            params: 24_136_710,
            macs: 0,
            flops: 1_115_962_374,
            peak_activation_bytes: 0,
            per_layer: vec![],
        };
        let small = ComplexityReport { params: 427_776, flops: 97_263_435, ..big.clone() };
        let r = compare_reports(&big, &small).unwrap();
        assert!((r.params_ratio - 56.42).abs() < 0.01);
        assert!((r.flops_ratio - 11.47).abs() < 0.01);
        assert_eq!(r.params_display, "56×");
        assert_eq!(r.flops_display, "11×");
        let same = compare_reports(&small, &small).unwrap();
        assert_eq!(same.params_ratio, 1.0);
        assert_eq!(same.flops_display, "1.0×");
        let zero = ComplexityReport { params: 0, ..small.clone() };
        assert!(compare_reports(&small, &zero).is_err());
    }

    #[test]
    fn uninferred_graph_rejected() {
        let g = parse_arch("input 4 4 1\n").unwrap();
        assert_eq!(count_params(&g), Err(ShapeError::NotInferred));
    }
}
