//! Hierarchical backbone abstraction: per-stage feature taps, the
//! stride/dilation rewrite, and a small convolutional pyramid for desk-scale
//! experiments.
//!
//! "Side" numbering is 1-based and includes the stem as side 1; the four
//! stages behind it are sides 2..=5 in the bundled net. Taps are read-only
//! observers of stage outputs, so attaching or removing an auxiliary head
//! never changes the backbone's own forward results.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::{ConvNormAct, InitRng, Mode};

/// Static description of one side: 1-based index, channel width, and output
/// resolution as a fraction 1/denominator of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub index: usize,
    pub channels: usize,
    pub resolution_den: usize,
}

impl StageSpec {
    pub fn resolution_fraction(&self) -> f64 {
        1.0 / self.resolution_den as f64
    }
}

const VALID_DENOMS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// One side-layer input: a single stage, or a group of stages resized to the
/// group's largest resolution and channel-concatenated (the branching-
/// backbone pattern).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageSelection(pub Vec<usize>);

impl StageSelection {
    pub fn single(side: usize) -> Self {
        Self(vec![side])
    }

    /// Deepest member, used for ordering checks.
    fn max_index(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }
}

/// Which sides feed binary side layers and which side feeds the semantic
/// side layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideTapSpec {
    #[serde(default = "default_binary_sides")]
    pub binary_sides: Vec<StageSelection>,
    #[serde(default = "default_semantic_side")]
    pub semantic_side: StageSelection,
}

fn default_binary_sides() -> Vec<StageSelection> {
    SideTapSpec::classic().binary_sides
}

fn default_semantic_side() -> StageSelection {
    SideTapSpec::classic().semantic_side
}

impl SideTapSpec {
    /// The classic 4-side selection for a 5-side backbone: sides 1, 2, 3
    /// binary and side 5 semantic.
    pub fn classic() -> Self {
        Self {
            binary_sides: vec![
                StageSelection::single(1),
                StageSelection::single(2),
                StageSelection::single(3),
            ],
            semantic_side: StageSelection::single(5),
        }
    }

    pub fn num_sides(&self) -> usize {
        self.binary_sides.len() + 1
    }

    /// Checks the selection against a backbone's stage table: every stage
    /// exists, binary sides are non-empty, the semantic side is the deepest
    /// selection, and the first binary side has the largest resolution.
    pub fn validate(&self, stages: &[StageSpec]) -> Result<()> {
        if self.binary_sides.is_empty() {
            return Err(Error::EmptySelection);
        }
        let lookup = |idx: usize| -> Result<&StageSpec> {
            stages
                .iter()
                .find(|s| s.index == idx)
                .ok_or(Error::UnknownStage(idx))
        };
        let mut max_binary = 0usize;
        let mut min_den = usize::MAX;
        for (i, sel) in self.binary_sides.iter().enumerate() {
            if sel.0.is_empty() {
                return Err(Error::EmptySelection);
            }
            let mut sel_min_den = usize::MAX;
            for &idx in &sel.0 {
                let spec = lookup(idx)?;
                sel_min_den = sel_min_den.min(spec.resolution_den);
            }
            if i == 0 {
                min_den = sel_min_den;
            } else if sel_min_den < min_den {
                return Err(Error::Config(
                    "first binary side must have the largest resolution of the selections".into(),
                ));
            }
            max_binary = max_binary.max(sel.max_index());
        }
        if self.semantic_side.0.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut sem_min_den = usize::MAX;
        for &idx in &self.semantic_side.0 {
            let spec = lookup(idx)?;
            sem_min_den = sem_min_den.min(spec.resolution_den);
        }
        if sem_min_den < min_den {
            return Err(Error::Config(
                "first binary side must have the largest resolution of the selections".into(),
            ));
        }
        if self.semantic_side.max_index() < max_binary {
            return Err(Error::Config(
                "semantic side must be the deepest selected stage".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the tap spec for two-path backbones: the detail-path stages feed
/// the binary sides and the aggregation output feeds the semantic side.
pub fn two_path_taps(detail_stages: &[usize], semantic_output: usize) -> SideTapSpec {
    SideTapSpec {
        binary_sides: detail_stages
            .iter()
            .map(|&s| StageSelection::single(s))
            .collect(),
        semantic_side: StageSelection::single(semantic_output),
    }
}

/// Per-stage stride/dilation rewrite. Changing strides and dilations moves
/// stage resolutions without touching any kernel shape, so the parameter
/// count is invariant and pretrained weights keep fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneTrickConfig {
    pub stem_stride: usize,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
}

impl BackboneTrickConfig {
    /// Classification layout: resolutions (1/2, 1/4, 1/8, 1/16, 1/32).
    pub fn original() -> Self {
        Self {
            stem_stride: 2,
            strides: vec![1, 2, 2, 2],
            dilations: vec![1, 1, 1, 1],
        }
    }

    /// Segmentation layout: the last two stages trade stride for dilation,
    /// resolutions (1/2, 1/4, 1/8, 1/8, 1/8).
    pub fn segmentation() -> Self {
        Self {
            stem_stride: 2,
            strides: vec![1, 2, 1, 1],
            dilations: vec![1, 1, 2, 4],
        }
    }

    /// Edge-detection layout: full-resolution stem, resolutions
    /// (1, 1/2, 1/4, 1/8, 1/8).
    pub fn edge_detection() -> Self {
        Self {
            stem_stride: 1,
            strides: vec![1, 2, 2, 1],
            dilations: vec![2, 2, 2, 4],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "original" => Ok(Self::original()),
            "segmentation" => Ok(Self::segmentation()),
            "edge" | "edge_detection" => Ok(Self::edge_detection()),
            other => Err(Error::Config(format!("unknown backbone trick row '{other}'"))),
        }
    }

    fn check(&self, num_stages: usize) -> Result<()> {
        if self.strides.len() != num_stages || self.dilations.len() != num_stages {
            return Err(Error::Config(format!(
                "trick config length {}/{} does not match {num_stages} stages",
                self.strides.len(),
                self.dilations.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<ConvNormAct>,
}

/// Bundled desk-scale backbone: a stem block (side 1), a fixed 2x max-pool,
/// then one plain conv-norm-act stage per remaining side. No residual
/// connections; the framework must not depend on backbone internals beyond
/// stage outputs.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    stem: ConvNormAct,
    stages: Vec<Stage>,
    channels: Vec<usize>,
    trick: BackboneTrickConfig,
}

/// Stage outputs of one backbone forward pass; `sides[i]` is side `i + 1`
/// and the final feature is the last side.
pub struct BackboneFeatures {
    pub sides: Vec<VarId>,
}

impl BackboneFeatures {
    pub fn final_feature(&self) -> VarId {
        *self.sides.last().unwrap()
    }
}

impl ToyBackbone {
    /// `channels[0]` is the stem width, the rest are stage widths; at least
    /// two entries. Weight init is deterministic given the rng stream.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        input_channels: usize,
        channels: &[usize],
        blocks_per_stage: usize,
        trick: BackboneTrickConfig,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Config("backbone needs a stem and >= 1 stage".into()));
        }
        if channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        let num_stages = channels.len() - 1;
        trick.check(num_stages)?;
        let stem = ConvNormAct::new(
            store,
            rng,
            "backbone.stem",
            input_channels,
            channels[0],
            3,
            trick.stem_stride,
            1,
        );
        let mut stages = Vec::with_capacity(num_stages);
        for si in 0..num_stages {
            let mut blocks = Vec::with_capacity(blocks_per_stage.max(1));
            for bi in 0..blocks_per_stage.max(1) {
                let cin = if bi == 0 { channels[si] } else { channels[si + 1] };
                blocks.push(ConvNormAct::new(
                    store,
                    rng,
                    &format!("backbone.stage{}.block{bi}", si + 1),
                    cin,
                    channels[si + 1],
                    3,
                    if bi == 0 { trick.strides[si] } else { 1 },
                    trick.dilations[si],
                ));
            }
            stages.push(Stage { blocks });
        }
        Ok(Self {
            stem,
            stages,
            channels: channels.to_vec(),
            trick,
        })
    }

    /// Swaps the stride/dilation layout in place. Kernel shapes are
    /// untouched, so existing weights remain valid.
    pub fn apply_trick(&mut self, trick: BackboneTrickConfig) -> Result<()> {
        trick.check(self.stages.len())?;
        self.stem.conv.cfg.stride = trick.stem_stride;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                let d = trick.dilations[si];
                block.conv.cfg.stride = if bi == 0 { trick.strides[si] } else { 1 };
                block.conv.cfg.dilation = d;
                block.conv.cfg.padding = d * (block.conv.kernel - 1) / 2;
            }
        }
        self.trick = trick;
        Ok(())
    }

    pub fn num_sides(&self) -> usize {
        self.channels.len()
    }

    pub fn side_channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn trick(&self) -> &BackboneTrickConfig {
        &self.trick
    }

    /// Stage table for the current trick layout.
    pub fn stage_specs(&self) -> Vec<StageSpec> {
        let mut specs = Vec::with_capacity(self.channels.len());
        let mut den = self.trick.stem_stride;
        specs.push(StageSpec {
            index: 1,
            channels: self.channels[0],
            resolution_den: den,
        });
        den *= 2; // fixed pool between stem and stage 1
        for (si, &stride) in self.trick.strides.iter().enumerate() {
            den *= stride;
            debug_assert!(VALID_DENOMS.contains(&den), "resolution 1/{den} off-grid");
            specs.push(StageSpec {
                index: si + 2,
                channels: self.channels[si + 1],
                resolution_den: den,
            });
        }
        specs
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        input: VarId,
        mode: Mode,
    ) -> BackboneFeatures {
        let mut sides = Vec::with_capacity(self.channels.len());
        let stem = self.stem.forward(tape, store, input, mode);
        sides.push(stem);
        let mut x = tape.max_pool2(stem);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(tape, store, x, mode);
            }
            sides.push(x);
        }
        BackboneFeatures { sides }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        let mut n = self.stem.num_params(store);
        for s in &self.stages {
            for b in &s.blocks {
                n += b.num_params(store);
            }
        }
        n
    }
}

/// A backbone with a validated tap selection attached. The taps observe
/// stage outputs; grouped selections are bilinearly resized to the group's
/// largest member resolution and concatenated.
#[derive(Debug, Clone)]
pub struct TappedBackbone {
    pub backbone: ToyBackbone,
    pub taps: SideTapSpec,
}

pub struct TappedFeatures {
    pub final_feature: VarId,
    /// Binary side features first, semantic side feature last.
    pub side_features: Vec<VarId>,
    /// Unselected per-side stage outputs, for consumers that address stages
    /// directly (e.g. the FCN auxiliary head on the next-to-last stage).
    pub raw_sides: Vec<VarId>,
}

pub fn register_taps(backbone: ToyBackbone, taps: SideTapSpec) -> Result<TappedBackbone> {
    taps.validate(&backbone.stage_specs())?;
    Ok(TappedBackbone { backbone, taps })
}

impl TappedBackbone {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        input: VarId,
        mode: Mode,
    ) -> TappedFeatures {
        let feats = self.backbone.forward(tape, store, input, mode);
        let gather = |tape: &mut Tape, sel: &StageSelection| -> VarId {
            let members: Vec<VarId> = sel.0.iter().map(|&idx| feats.sides[idx - 1]).collect();
            if members.len() == 1 {
                return members[0];
            }
            let (mut th, mut tw) = (0usize, 0usize);
            for &m in &members {
                let (_, _, h, w) = tape.shape(m);
                th = th.max(h);
                tw = tw.max(w);
            }
            let resized: Vec<VarId> = members
                .into_iter()
                .map(|m| tape.resize_bilinear(m, th, tw))
                .collect();
            tape.concat_c(&resized)
        };
        let mut side_features = Vec::with_capacity(self.taps.num_sides());
        for sel in &self.taps.binary_sides {
            side_features.push(gather(tape, sel));
        }
        side_features.push(gather(tape, &self.taps.semantic_side));
        TappedFeatures {
            final_feature: feats.final_feature(),
            side_features,
            raw_sides: feats.sides,
        }
    }

    /// Channel width each side layer will see.
    pub fn side_feature_channels(&self) -> Vec<usize> {
        let by_idx: Vec<usize> = self.backbone.side_channels().to_vec();
        let width = |sel: &StageSelection| -> usize {
            sel.0.iter().map(|&i| by_idx[i - 1]).sum()
        };
        let mut out: Vec<usize> = self.taps.binary_sides.iter().map(width).collect();
        out.push(width(&self.taps.semantic_side));
        out
    }
}
