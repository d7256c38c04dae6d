//! Generalized boundary-detection heads over tapped backbone features.
//!
//! All variants share the side-layer recipe: a 1x1 projection at tap
//! resolution, bilinear upsampling to the supervision size, then a 3x3
//! smoothing convolution. The smoothing conv replaces the deconvolution used
//! by older heads, whose strided kernels leave checkerboard artifacts; it is
//! depthwise, so the fix adds almost no parameters. The number of sides is
//! free: the last side carries one channel per category (the semantic side),
//! every earlier side carries a single channel (binary sides).

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvCfg, PadMode, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvNormAct, InitRng, Mode};

/// Which fusion/supervision scheme the head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Fixed grouped 1x1 fusion over sliced-concatenated sides.
    CaseNet,
    /// Location-adaptive fusion weights learned from the sliced tensor.
    Dff,
    /// Residual side blocks with deep supervision of every side.
    Dds,
    /// CASENet wiring with a single channel everywhere: binary-boundary
    /// supervision instead of per-category boundaries.
    Binary,
}

impl HeadVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "casenet" => Ok(Self::CaseNet),
            "dff" => Ok(Self::Dff),
            "dds" => Ok(Self::Dds),
            "binary" | "bbcb" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown head variant '{other}'"))),
        }
    }

    /// Effective channel width of the semantic side and fused output.
    pub fn head_categories(&self, num_categories: usize) -> usize {
        match self {
            Self::Binary => 1,
            _ => num_categories,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub num_categories: usize,
}

/// Per-forward head outputs. The semantic-side and fused logits are the
/// multi-label supervision set; the binary side logits are populated only by
/// the deep-supervision variant.
pub struct HeadOutputs {
    pub fuse_logits: VarId,
    pub semantic_side_logits: VarId,
    pub binary_side_logits: Vec<VarId>,
    /// Side features before upsampling, at tap resolution, for explicit
    /// feature fusion.
    pub pre_upsample: Vec<VarId>,
}

impl HeadOutputs {
    /// The multi-label supervision set: semantic side then fused output.
    pub fn sbd_set(&self) -> [VarId; 2] {
        [self.semantic_side_logits, self.fuse_logits]
    }
}

/// 1x1 projection, bilinear upsample to target, depthwise 3x3 smoothing.
#[derive(Debug, Clone)]
pub struct SideLayer {
    pub proj: Conv2d,
    pub smooth: Conv2d,
    pub out_channels: usize,
}

impl SideLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let proj = Conv2d::new(
            store,
            rng,
            &format!("{name}.proj"),
            in_channels,
            out_channels,
            1,
            ConvCfg::default(),
            true,
        );
        let smooth = Conv2d::new(
            store,
            rng,
            &format!("{name}.smooth"),
            out_channels,
            out_channels,
            3,
            ConvCfg {
                padding: 1,
                groups: out_channels,
                pad_mode: PadMode::Replicate,
                ..Default::default()
            },
            true,
        );
        Self {
            proj,
            smooth,
            out_channels,
        }
    }

    /// Returns (pre-upsample feature, logits at target resolution).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feat: VarId,
        target: (usize, usize),
    ) -> Result<(VarId, VarId)> {
        let (_, _, h, w) = tape.shape(feat);
        if target.0 < h || target.1 < w {
            return Err(Error::ShapeMismatch {
                expected: format!("target >= {h}x{w}"),
                got: format!("{}x{}", target.0, target.1),
            });
        }
        let pre = self.proj.forward(tape, store, feat);
        let logits = self.finish(tape, store, pre, target);
        Ok((pre, logits))
    }

    /// Upsample + smooth, split out so fusion can re-enter with a mixed
    /// pre-upsample feature.
    pub fn finish(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pre: VarId,
        target: (usize, usize),
    ) -> VarId {
        let up = tape.resize_bilinear(pre, target.0, target.1);
        self.smooth.forward(tape, store, up)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.proj.num_params(store) + self.smooth.num_params(store)
    }
}

/// Grouped 1x1 fusion: one group per category, mixing that category's K
/// slices to a single channel.
#[derive(Debug, Clone)]
pub struct FuseLayer {
    pub conv: Conv2d,
    pub num_sides: usize,
    pub categories: usize,
}

impl FuseLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        num_sides: usize,
        categories: usize,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            rng,
            name,
            num_sides * categories,
            categories,
            1,
            ConvCfg {
                groups: categories,
                ..Default::default()
            },
            true,
        );
        Self {
            conv,
            num_sides,
            categories,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, sliced: VarId) -> Result<VarId> {
        let (_, c, _, _) = tape.shape(sliced);
        if c % self.categories != 0 || c != self.num_sides * self.categories {
            return Err(Error::ShapeMismatch {
                expected: format!("{} fuse channels", self.num_sides * self.categories),
                got: format!("{c}"),
            });
        }
        Ok(self.conv.forward(tape, store, sliced))
    }
}

/// Learns location-specific fusion weights from the sliced tensor: two 3x3
/// conv-norm-act layers and a 1x1 projection back to the sliced width.
#[derive(Debug, Clone)]
pub struct AdaptiveWeightLearner {
    pub block1: ConvNormAct,
    pub block2: ConvNormAct,
    pub proj: Conv2d,
}

impl AdaptiveWeightLearner {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, channels: usize) -> Self {
        let block1 = ConvNormAct::new(store, rng, &format!("{name}.block1"), channels, channels, 3, 1, 1);
        let block2 = ConvNormAct::new(store, rng, &format!("{name}.block2"), channels, channels, 3, 1, 1);
        let proj = Conv2d::new(
            store,
            rng,
            &format!("{name}.proj"),
            channels,
            channels,
            1,
            ConvCfg::default(),
            true,
        );
        Self {
            block1,
            block2,
            proj,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        sliced: VarId,
        mode: Mode,
    ) -> VarId {
        let h = self.block1.forward(tape, store, sliced, mode);
        let h = self.block2.forward(tape, store, h, mode);
        self.proj.forward(tape, store, h)
    }
}

/// Adaptive fusion: elementwise weights on the sliced tensor, summed per
/// category group.
pub fn dff_fuse(
    tape: &mut Tape,
    sliced: VarId,
    weights: VarId,
    num_sides: usize,
) -> Result<VarId> {
    if tape.shape(sliced) != tape.shape(weights) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", tape.shape(sliced)),
            got: format!("{:?}", tape.shape(weights)),
        });
    }
    let weighted = tape.mul(sliced, weights);
    Ok(tape.group_sum_c(weighted, num_sides))
}

/// Two 3x3 convolutions with an identity skip, at tap resolution.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl BasicBlock {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, channels: usize) -> Self {
        let cfg = ConvCfg {
            padding: 1,
            ..Default::default()
        };
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, cfg, false),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, cfg, false),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> VarId {
        let h = self.conv1.forward(tape, store, x);
        let h = self.bn1.forward(tape, store, h, mode);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = self.bn2.forward(tape, store, h, mode);
        let sum = tape.add(h, x);
        tape.relu(sum)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.conv1.num_params(store)
            + self.bn1.num_params(store)
            + self.conv2.num_params(store)
            + self.bn2.num_params(store)
    }
}

/// Deep-supervision side: two residual blocks then the usual side layer.
#[derive(Debug, Clone)]
pub struct SideBlock {
    pub rb1: BasicBlock,
    pub rb2: BasicBlock,
    pub side: SideLayer,
}

impl SideBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            rb1: BasicBlock::new(store, rng, &format!("{name}.rb1"), in_channels),
            rb2: BasicBlock::new(store, rng, &format!("{name}.rb2"), in_channels),
            side: SideLayer::new(store, rng, &format!("{name}.side"), in_channels, out_channels),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        feat: VarId,
        target: (usize, usize),
        mode: Mode,
    ) -> Result<(VarId, VarId)> {
        let h = self.rb1.forward(tape, store, feat, mode);
        let h = self.rb2.forward(tape, store, h, mode);
        self.side.forward(tape, store, h, target)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.rb1.num_params(store) + self.rb2.num_params(store) + self.side.num_params(store)
    }
}

#[derive(Clone)]
enum SideStack {
    Plain(Vec<SideLayer>),
    Blocks(Vec<SideBlock>),
}

#[derive(Clone)]
enum Fusion {
    Fixed(FuseLayer),
    Adaptive(AdaptiveWeightLearner),
}

/// A generalized boundary head bound to a list of side-feature widths.
#[derive(Clone)]
pub struct SbdHead {
    pub cfg: HeadConfig,
    sides: SideStack,
    fusion: Fusion,
    head_categories: usize,
}

impl SbdHead {
    /// `side_channels` lists the tapped feature widths, binary sides first,
    /// semantic side last. At least two sides.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        cfg: HeadConfig,
        side_channels: &[usize],
    ) -> Result<Self> {
        if side_channels.len() < 2 {
            return Err(Error::Config("boundary head needs >= 2 sides".into()));
        }
        if cfg.num_categories < 1 {
            return Err(Error::Config("num_categories must be >= 1".into()));
        }
        let ncat = cfg.variant.head_categories(cfg.num_categories);
        let k = side_channels.len();
        let sides = match cfg.variant {
            HeadVariant::Dds => {
                let mut blocks = Vec::with_capacity(k);
                for (i, &c) in side_channels.iter().enumerate() {
                    let out = if i + 1 == k { ncat } else { 1 };
                    blocks.push(SideBlock::new(store, rng, &format!("sbd.side{}", i + 1), c, out));
                }
                SideStack::Blocks(blocks)
            }
            _ => {
                let mut layers = Vec::with_capacity(k);
                for (i, &c) in side_channels.iter().enumerate() {
                    let out = if i + 1 == k { ncat } else { 1 };
                    layers.push(SideLayer::new(store, rng, &format!("sbd.side{}", i + 1), c, out));
                }
                SideStack::Plain(layers)
            }
        };
        let fusion = match cfg.variant {
            HeadVariant::Dff => Fusion::Adaptive(AdaptiveWeightLearner::new(
                store,
                rng,
                "sbd.weight_learner",
                k * ncat,
            )),
            _ => Fusion::Fixed(FuseLayer::new(store, rng, "sbd.fuse", k, ncat)),
        };
        Ok(Self {
            cfg,
            sides,
            fusion,
            head_categories: ncat,
        })
    }

    pub fn num_sides(&self) -> usize {
        match &self.sides {
            SideStack::Plain(v) => v.len(),
            SideStack::Blocks(v) => v.len(),
        }
    }

    /// Side layers for fusion re-entry (plain stacks only).
    pub fn side_layers(&self) -> Option<&[SideLayer]> {
        match &self.sides {
            SideStack::Plain(v) => Some(v),
            SideStack::Blocks(_) => None,
        }
    }

    pub fn head_categories(&self) -> usize {
        self.head_categories
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        side_feats: &[VarId],
        target: (usize, usize),
        mode: Mode,
    ) -> Result<HeadOutputs> {
        let k = self.num_sides();
        if side_feats.len() != k {
            return Err(Error::Config(format!(
                "head expects {k} side features, got {}",
                side_feats.len()
            )));
        }
        let mut pre_upsample = Vec::with_capacity(k);
        let mut logits = Vec::with_capacity(k);
        match &self.sides {
            SideStack::Plain(layers) => {
                for (layer, &feat) in layers.iter().zip(side_feats) {
                    let (pre, l) = layer.forward(tape, store, feat, target)?;
                    pre_upsample.push(pre);
                    logits.push(l);
                }
            }
            SideStack::Blocks(blocks) => {
                for (block, &feat) in blocks.iter().zip(side_feats) {
                    let (pre, l) = block.forward(tape, store, feat, target, mode)?;
                    pre_upsample.push(pre);
                    logits.push(l);
                }
            }
        }
        self.fuse_outputs(tape, store, pre_upsample, logits, mode)
    }

    /// Just the 1x1 projections at tap resolution, for explicit fusion.
    pub fn project_sides(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        side_feats: &[VarId],
    ) -> Result<Vec<VarId>> {
        let layers = self
            .side_layers()
            .ok_or_else(|| Error::Config("residual side blocks cannot be re-entered".into()))?;
        if side_feats.len() != layers.len() {
            return Err(Error::Config(format!(
                "head expects {} side features, got {}",
                layers.len(),
                side_feats.len()
            )));
        }
        Ok(layers
            .iter()
            .zip(side_feats)
            .map(|(layer, &feat)| layer.proj.forward(tape, store, feat))
            .collect())
    }

    /// Resumes from (possibly externally mixed) pre-upsample features:
    /// upsample + smooth each side, then fuse.
    pub fn forward_from_pre(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        pre: &[VarId],
        target: (usize, usize),
        mode: Mode,
    ) -> Result<HeadOutputs> {
        let layers = self
            .side_layers()
            .ok_or_else(|| Error::Config("residual side blocks cannot be re-entered".into()))?;
        let logits: Vec<VarId> = layers
            .iter()
            .zip(pre)
            .map(|(layer, &p)| layer.finish(tape, store, p, target))
            .collect();
        self.fuse_outputs(tape, store, pre.to_vec(), logits, mode)
    }

    fn fuse_outputs(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        pre_upsample: Vec<VarId>,
        logits: Vec<VarId>,
        mode: Mode,
    ) -> Result<HeadOutputs> {
        let k = logits.len();
        let semantic = *logits.last().unwrap();
        let binaries = &logits[..k - 1];
        let sliced = tape.sliced_concat(binaries, semantic);
        let fused = match &self.fusion {
            Fusion::Fixed(fuse) => fuse.forward(tape, store, sliced)?,
            Fusion::Adaptive(learner) => {
                let weights = learner.forward(tape, store, sliced, mode);
                dff_fuse(tape, sliced, weights, k)?
            }
        };
        let binary_side_logits = match self.cfg.variant {
            HeadVariant::Dds => binaries.to_vec(),
            _ => Vec::new(),
        };
        Ok(HeadOutputs {
            fuse_logits: fused,
            semantic_side_logits: semantic,
            binary_side_logits,
            pre_upsample,
        })
    }
}

/// Segmentation-supervised auxiliary head on the next-to-last stage:
/// conv-norm-act, a 1x1 classifier, and upsampling to the input size.
#[derive(Debug, Clone)]
pub struct FcnAuxHead {
    pub block: ConvNormAct,
    pub cls: Conv2d,
}

impl FcnAuxHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        in_channels: usize,
        mid_channels: usize,
        num_categories: usize,
    ) -> Self {
        let block = ConvNormAct::new(store, rng, "aux.block", in_channels, mid_channels, 3, 1, 1);
        let cls = Conv2d::new(
            store,
            rng,
            "aux.cls",
            mid_channels,
            num_categories,
            1,
            ConvCfg::default(),
            true,
        );
        Self { block, cls }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        feat: VarId,
        target: (usize, usize),
        mode: Mode,
    ) -> VarId {
        let h = self.block.forward(tape, store, feat, mode);
        let l = self.cls.forward(tape, store, h);
        tape.resize_bilinear(l, target.0, target.1)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.block.num_params(store) + self.cls.num_params(store)
    }
}

/// Closed-form parameter count of a plain (non-residual) head, for the
/// accounting checks: side layers are `(c+1) + 10` for binary sides, the
/// semantic side scales its projection by the category count, and the
/// grouped fusion costs `(k+1)` per category.
pub fn plain_head_param_count(side_channels: &[usize], categories: usize) -> usize {
    let k = side_channels.len();
    let mut n = 0;
    for (i, &c) in side_channels.iter().enumerate() {
        let out = if i + 1 == k { categories } else { 1 };
        n += (c + 1) * out; // 1x1 projection
        n += out * (9 + 1); // depthwise 3x3 smoothing
    }
    n += categories * (k + 1); // grouped fuse
    n
}
