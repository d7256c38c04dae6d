//! Explicit feature fusion between the boundary head and the segmentation
//! head. With fusion enabled the segmentation path depends on boundary-head
//! weights, so head-discard export is refused.

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvCfg, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    None,
    /// Mix pre-upsample side features with the head feature through 1x1
    /// convolutions and feed the mixed slices back to both paths.
    ChannelMerge,
    /// Project the fused boundary feature and concatenate it into the
    /// segmentation head input.
    TwoStream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub mode: FusionMode,
    /// Number of 1x1 mixing convolutions in the channel merge.
    pub mix_layers: usize,
    /// Hidden width of the mixing stack; defaults to the concatenated width.
    pub mix_channels: Option<usize>,
    /// Two-stream projection width; defaults to the fuse feature width.
    pub projection_channels: Option<usize>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            mix_layers: 2,
            mix_channels: None,
            projection_channels: None,
        }
    }
}

impl MergeConfig {
    pub fn check(&self) -> Result<()> {
        if self.mode == FusionMode::ChannelMerge && self.mix_layers < 1 {
            return Err(Error::Config("channel merge needs mix_layers >= 1".into()));
        }
        Ok(())
    }
}

/// Residual channel mixer. The final convolution starts at zero, so the
/// whole merge is the identity until training moves it.
#[derive(Debug, Clone)]
pub struct ChannelMerge {
    mixes: Vec<Conv2d>,
    pub part_channels: Vec<usize>,
}

impl ChannelMerge {
    /// `part_channels` lists each fused part's width: the side features
    /// first, the head feature last.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        part_channels: Vec<usize>,
        cfg: &MergeConfig,
    ) -> Result<Self> {
        cfg.check()?;
        let total: usize = part_channels.iter().sum();
        let hidden = cfg.mix_channels.unwrap_or(total);
        let mut mixes = Vec::with_capacity(cfg.mix_layers);
        for i in 0..cfg.mix_layers {
            let cin = if i == 0 { total } else { hidden };
            let cout = if i + 1 == cfg.mix_layers { total } else { hidden };
            mixes.push(Conv2d::new(
                store,
                rng,
                &format!("fusion.mix{i}"),
                cin,
                cout,
                1,
                ConvCfg::default(),
                true,
            ));
        }
        // Zero the residual delta at init.
        let last = mixes.last().unwrap();
        store.get_mut(last.w).value.fill(0.0);
        if let Some(b) = last.b {
            store.get_mut(b).value.fill(0.0);
        }
        Ok(Self {
            mixes,
            part_channels,
        })
    }

    /// Mixes the parts at the head feature's resolution and adds the split
    /// deltas back onto each part at its own resolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        parts: &[VarId],
    ) -> Result<Vec<VarId>> {
        if parts.len() != self.part_channels.len() {
            return Err(Error::Config(format!(
                "channel merge expects {} parts, got {}",
                self.part_channels.len(),
                parts.len()
            )));
        }
        let (_, _, mh, mw) = tape.shape(*parts.last().unwrap());
        let resized: Vec<VarId> = parts
            .iter()
            .map(|&p| tape.resize_bilinear(p, mh, mw))
            .collect();
        let mut h = tape.concat_c(&resized);
        for (i, mix) in self.mixes.iter().enumerate() {
            h = mix.forward(tape, store, h);
            if i + 1 < self.mixes.len() {
                h = tape.relu(h);
            }
        }
        let mut out = Vec::with_capacity(parts.len());
        let mut at = 0;
        for (&part, &c) in parts.iter().zip(&self.part_channels) {
            let delta = tape.slice_c(h, at, c);
            at += c;
            let (_, _, ph, pw) = tape.shape(part);
            let delta = tape.resize_bilinear(delta, ph, pw);
            out.push(tape.add(part, delta));
        }
        Ok(out)
    }
}

/// 1x1 projection of the fused boundary feature for concatenation into the
/// segmentation head input.
#[derive(Debug, Clone)]
pub struct TwoStreamMerge {
    pub proj: Conv2d,
}

impl TwoStreamMerge {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        fuse_channels: usize,
        cfg: &MergeConfig,
    ) -> Self {
        let out = cfg.projection_channels.unwrap_or(fuse_channels);
        let proj = Conv2d::new(
            store,
            rng,
            "fusion.proj",
            fuse_channels,
            out,
            1,
            ConvCfg::default(),
            true,
        );
        Self { proj }
    }

    pub fn projection_channels(&self) -> usize {
        self.proj.out_channels
    }

    /// Projects the fuse feature and resizes it to the head input, returning
    /// the tensor to concatenate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fuse_feature: VarId,
        target: (usize, usize),
    ) -> VarId {
        let p = self.proj.forward(tape, store, fuse_feature);
        tape.resize_bilinear(p, target.0, target.1)
    }
}
