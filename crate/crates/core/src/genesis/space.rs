use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::GenesisError;
use crate::archdsl::{parse_arch, ArchGraph, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockType {
    StandardResidual,
    DepthwiseSeparableResidual,
}

impl BlockType {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockType::StandardResidual => "standard_residual",
            BlockType::DepthwiseSeparableResidual => "depthwise_separable_residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub input: TensorShape,
    pub num_classes: usize,
    /// Inclusive range.
    pub stages: (usize, usize),
    /// Inclusive range; includes the stride-2 entry block.
    pub blocks_per_stage: (usize, usize),
    pub channel_choices: Vec<usize>,
    pub kernel_choices: Vec<usize>,
    pub block_types: Vec<BlockType>,
    pub stem_channel_choices: Vec<usize>,
}

impl SearchSpace {
    pub fn new(input: TensorShape) -> Self {
        Self {
            input,
            num_classes: 6,
            stages: (3, 4),
            blocks_per_stage: (1, 4),
            channel_choices: vec![8, 16, 24, 32, 48, 64, 96, 128],
            kernel_choices: vec![3, 5],
            block_types: vec![BlockType::StandardResidual, BlockType::DepthwiseSeparableResidual],
            stem_channel_choices: vec![8, 16, 24, 32],
        }
    }

    pub fn validate(&self) -> Result<(), GenesisError> {
        let bad = |m: &str| Err(GenesisError::Space(m.to_string()));
        if self.stages.0 == 0 || self.stages.0 > self.stages.1 {
            return bad("stage range must be nonempty and start at 1 or more");
        }
        if self.blocks_per_stage.0 == 0 || self.blocks_per_stage.0 > self.blocks_per_stage.1 {
            return bad("blocks-per-stage range must be nonempty and start at 1 or more");
        }
        if self.channel_choices.is_empty()
            || self.kernel_choices.is_empty()
            || self.block_types.is_empty()
            || self.stem_channel_choices.is_empty()
        {
            return bad("every choice list needs at least one entry");
        }
        if self.channel_choices.iter().chain(&self.stem_channel_choices).any(|c| *c == 0 || c % 8 != 0) {
            return bad("channel choices must be positive multiples of 8");
        }
        if self.kernel_choices.iter().any(|k| k % 2 == 0) {
            return bad("kernel choices must be odd");
        }
        if self.num_classes == 0 || self.input.elements() == 0 {
            return bad("empty input or class count");
        }
        Ok(())
    }

    /// Every categorical decision, in genome order: stage count, stem width,
    /// then per stage slot its width, block count, kernel and block type.
    pub fn decisions(&self) -> Vec<Decision> {
        let mut d = vec![
            Decision { name: "stages".into(), options: (self.stages.0..=self.stages.1).collect() },
            Decision { name: "stem_channels".into(), options: self.stem_channel_choices.clone() },
        ];
        for s in 0..self.stages.1 {
            d.push(Decision { name: format!("stage{s}.channels"), options: self.channel_choices.clone() });
            d.push(Decision {
                name: format!("stage{s}.blocks"),
                options: (self.blocks_per_stage.0..=self.blocks_per_stage.1).collect(),
            });
            d.push(Decision { name: format!("stage{s}.kernel"), options: self.kernel_choices.clone() });
            d.push(Decision { name: format!("stage{s}.block_type"), options: (0..self.block_types.len()).collect() });
        }
        d
    }

    /// Genome of mid-range choices: the lower median of every option list,
    /// except two blocks per stage and the first block type.
    pub fn median_genome(&self) -> Vec<usize> {
        self.decisions()
            .iter()
            .map(|d| {
                if d.name.ends_with(".blocks") {
                    d.options.iter().position(|&b| b == 2).unwrap_or((d.options.len() - 1) / 2)
                } else if d.name.ends_with(".block_type") {
                    0
                } else {
                    (d.options.len() - 1) / 2
                }
            })
            .collect()
    }

    pub fn decode(&self, genome: &[usize]) -> Result<ArchGraph, GenesisError> {
        self.validate()?;
        let decisions = self.decisions();
        if genome.len() != decisions.len() || genome.iter().zip(&decisions).any(|(g, d)| *g >= d.options.len()) {
            return Err(GenesisError::Genome);
        }
        let pick = |i: usize| decisions[i].options[genome[i]];
        let n_stages = pick(0);
        let stages: Vec<StageSpec> = (0..n_stages)
            .map(|s| {
                let base = 2 + 4 * s;
                StageSpec {
                    channels: pick(base),
                    blocks: pick(base + 1),
                    kernel: pick(base + 2),
                    block: self.block_types[pick(base + 3)],
                }
            })
            .collect();
        let text = residual_net(self.input, pick(1), &stages, self.num_classes);
        Ok(parse_arch(&text)?.infer_shapes()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub name: String,
    pub options: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub block: BlockType,
}

/// `.tdn` text of a residual network: a 3x3 stride-2 stem, stages that open
/// with a stride-2 block, then GAP, dense and softmax.
pub fn residual_net(input: TensorShape, stem: usize, stages: &[StageSpec], classes: usize) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "input {} {} {}", input.height, input.width, input.channels);
    let _ = writeln!(t, "conv stem k=3 s=2 f={stem} bn=1");
    let mut prev = "stem".to_string();
    let mut width = stem;
    for (s, st) in stages.iter().enumerate() {
        for b in 0..st.blocks {
            let stride = if b == 0 { 2 } else { 1 };
            let id = format!("s{s}b{b}");
            let (k, c) = (st.kernel, st.channels);
            let shortcut = if stride != 1 || width != c {
                let _ = writeln!(t, "conv {id}_proj k=1 s={stride} f={c} bn=1 act=none from={prev}");
                format!("{id}_proj")
            } else {
                prev.clone()
            };
            match st.block {
                BlockType::StandardResidual => {
                    let _ = writeln!(t, "conv {id}_c1 k={k} s={stride} f={c} bn=1 from={prev}");
                    let _ = writeln!(t, "conv {id}_c2 k={k} f={c} bn=1 act=none");
                }
                BlockType::DepthwiseSeparableResidual => {
                    let _ = writeln!(t, "dwconv {id}_dw k={k} s={stride} bn=1 from={prev}");
                    let _ = writeln!(t, "conv {id}_pw k=1 f={c} bn=1 act=none");
                }
            }
            let last = match st.block {
                BlockType::StandardResidual => format!("{id}_c2"),
                BlockType::DepthwiseSeparableResidual => format!("{id}_pw"),
            };
            let _ = writeln!(t, "add {id}_add from={last},{shortcut} act=relu");
            prev = format!("{id}_add");
            width = c;
        }
    }
    let _ = writeln!(t, "gap pool");
    let _ = writeln!(t, "dense fc units={classes}");
    let _ = writeln!(t, "softmax prob");
    t
}

/// Deterministic starting point: the decode of [`SearchSpace::median_genome`].
pub fn build_prototype(space: &SearchSpace) -> Result<ArchGraph, GenesisError> {
    space.decode(&space.median_genome())
}
