use super::{ArchGraph, LayerKind, ShapeError, TensorShape};

impl ArchGraph {
    /// Resolves the output shape of every node. Idempotent.
    pub fn infer_shapes(mut self) -> Result<ArchGraph, ShapeError> {
        let mut shapes: Vec<TensorShape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input = node.inputs.first().map(|&p| shapes[p]);
            let id = || node.id.clone();
            let shape = match &node.kind {
                LayerKind::Input(shape) => *shape,
                LayerKind::Conv { out_channels, geometry, .. } => {
                    let x = input.expect("conv has one input");
                    let (h, w) = spatial(geometry.output_dim(x.height), geometry.output_dim(x.width))
                        .ok_or_else(|| ShapeError::EmptyOutput { id: id(), input: x })?;
                    TensorShape::new(h, w, *out_channels)
                }
                LayerKind::DepthwiseConv { geometry, .. } => {
                    let x = input.expect("dwconv has one input");
                    let (h, w) = spatial(geometry.output_dim(x.height), geometry.output_dim(x.width))
                        .ok_or_else(|| ShapeError::EmptyOutput { id: id(), input: x })?;
                    TensorShape::new(h, w, x.channels)
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let x = input.expect("maxpool has one input");
                    let dim = |d: usize| (d >= *kernel).then(|| (d - kernel) / stride + 1);
                    let (h, w) = spatial(dim(x.height), dim(x.width))
                        .ok_or_else(|| ShapeError::EmptyOutput { id: id(), input: x })?;
                    TensorShape::new(h, w, x.channels)
                }
                LayerKind::GlobalAvgPool => TensorShape::new(1, 1, input.expect("gap has one input").channels),
                LayerKind::Add { .. } => {
                    let (left, right) = (shapes[node.inputs[0]], shapes[node.inputs[1]]);
                    if left != right {
                        return Err(ShapeError::AddMismatch { id: id(), left, right });
                    }
                    left
                }
                LayerKind::Dense { units, .. } => {
                    let x = input.expect("dense has one input");
                    if !x.is_vector() {
                        return Err(ShapeError::SpatialInput { id: id(), kind: "dense", input: x });
                    }
                    TensorShape::new(1, 1, *units)
                }
                LayerKind::Softmax => {
                    let x = input.expect("softmax has one input");
                    if !x.is_vector() {
                        return Err(ShapeError::SpatialInput { id: id(), kind: "softmax", input: x });
                    }
                    x
                }
            };
            if shape.elements() == 0 {
                return Err(ShapeError::ZeroDimension { id: id() });
            }
            shapes.push(shape);
        }
        self.resolved = Some(shapes);
        Ok(self)
    }
}

fn spatial(h: Option<usize>, w: Option<usize>) -> Option<(usize, usize)> {
    Some((h?, w?))
}
