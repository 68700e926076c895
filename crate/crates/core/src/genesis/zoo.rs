//! Fixed reference architectures at the 200x200 grayscale inspection
//! resolution: a wide baseline of about 1.1 GFLOPs and a compact network just
//! under the 100 MFLOP budget.

use super::space::{residual_net, BlockType, StageSpec};
use crate::archdsl::{parse_arch, ArchGraph, TensorShape};

pub const ZOO_INPUT: TensorShape = TensorShape { height: 200, width: 200, channels: 1 };

fn stages(spec: &[(usize, usize, BlockType)]) -> Vec<StageSpec> {
    spec.iter().map(|&(channels, blocks, block)| StageSpec { channels, blocks, kernel: 3, block }).collect()
}

fn build(stem: usize, spec: &[(usize, usize, BlockType)]) -> ArchGraph {
    let text = residual_net(ZOO_INPUT, stem, &stages(spec), 6);
    parse_arch(&text).and_then(|g| Ok(g.infer_shapes().expect("zoo graphs are well formed"))).expect("zoo graphs parse")
}

/// Standard residual blocks, widths 48 to 192.
pub fn reference_arch() -> ArchGraph {
    use BlockType::StandardResidual as S;
    build(RSTEM, &[(R[0], 2, S), (R[1], 2, S), (R[2], 2, S), (R[3], 2, S)])
}

/// Mixed standard and depthwise-separable blocks.
pub fn compact_arch() -> ArchGraph {
    use BlockType::{DepthwiseSeparableResidual as D, StandardResidual as S};
    build(CSTEM, &[(C[0], 1, S), (C[1], 2, D), (C[2], 2, D), (C[3], 1, D)])
}

const RSTEM: usize = 24;
const R: [usize; 4] = [48, 96, 144, 192];
const CSTEM: usize = 16;
const C: [usize; 4] = [32, 64, 96, 128];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::count_flops;

    #[test]
    fn zoo_flops() {
        let (r, c) = (count_flops(&reference_arch()).unwrap().0, count_flops(&compact_arch()).unwrap().0);
        assert_eq!((r, c), (1_106_350_872, 98_211_256));
        assert!(crate::objective::indicator(c, &crate::objective::ObjectiveParams::default()));
    }
}
