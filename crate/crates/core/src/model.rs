//! Full model assembly: tapped backbone, segmentation head, optional
//! boundary head, optional FCN auxiliary head, optional explicit fusion.
//!
//! Initialization draws the backbone and segmentation head from the main
//! seed stream and every optional module from its own derived stream, so
//! attaching or removing auxiliaries never shifts the baseline's initial
//! weights. Parameter names are prefixed by component (`backbone.`, `seg.`,
//! `sbd.`, `aux.`, `fusion.`), which is what export filters on.

use ndarray::Array4;

use crate::autograd::{ConvCfg, ParamStore, Tape, VarId};
use crate::backbone::{register_taps, TappedBackbone, ToyBackbone};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{ChannelMerge, FusionMode, TwoStreamMerge};
use crate::heads::{FcnAuxHead, HeadConfig, HeadOutputs, SbdHead};
use crate::nn::{Conv2d, ConvNormAct, Mode};

/// Plain FCN-style segmentation head: one conv-norm-act block and a 1x1
/// classifier, upsampled to the input size.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub block: ConvNormAct,
    pub cls: Conv2d,
}

impl SegHead {
    fn new(
        store: &mut ParamStore,
        rng: &mut crate::nn::InitRng,
        in_channels: usize,
        mid_channels: usize,
        num_categories: usize,
    ) -> Self {
        let block = ConvNormAct::new(store, rng, "seg.block", in_channels, mid_channels, 3, 1, 1);
        let cls = Conv2d::new(
            store,
            rng,
            "seg.cls",
            mid_channels,
            num_categories,
            1,
            ConvCfg::default(),
            true,
        );
        Self { block, cls }
    }

    pub fn feature(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> VarId {
        self.block.forward(tape, store, x, mode)
    }

    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feat: VarId,
        target: (usize, usize),
    ) -> VarId {
        let logits = self.cls.forward(tape, store, feat);
        tape.resize_bilinear(logits, target.0, target.1)
    }
}

pub struct ModelOutputs {
    pub seg_logits: VarId,
    pub head: Option<HeadOutputs>,
    pub aux_logits: Option<VarId>,
}

/// A complete trainable model.
#[derive(Clone)]
pub struct SegModel {
    pub store: ParamStore,
    pub tapped: TappedBackbone,
    pub seg_head: SegHead,
    pub sbd_head: Option<SbdHead>,
    pub aux_head: Option<FcnAuxHead>,
    channel_merge: Option<ChannelMerge>,
    two_stream: Option<TwoStreamMerge>,
    pub fusion_mode: FusionMode,
    pub num_categories: usize,
}

impl SegModel {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let ncat = cfg.dataset.num_categories;
        let mut rng_main = crate::nn::derived_rng(cfg.seed, "model");
        let backbone = ToyBackbone::new(
            &mut store,
            &mut rng_main,
            cfg.backbone.input_channels,
            &cfg.backbone.channels,
            cfg.backbone.blocks_per_stage,
            cfg.backbone.trick_config()?,
        )?;
        let final_channels = *cfg.backbone.channels.last().unwrap();
        let variant = cfg.head.parse_variant()?;
        let fusion_mode = cfg.fusion.mode;
        if fusion_mode != FusionMode::None && variant.is_none() {
            return Err(Error::Config(
                "explicit fusion requires a boundary head".into(),
            ));
        }

        // Two-stream fusion widens the segmentation head input; everything
        // else about the main stream is untouched by the optional modules.
        let head_categories = variant.map(|v| v.head_categories(ncat));
        let proj_channels = if fusion_mode == FusionMode::TwoStream {
            cfg.fusion
                .projection_channels
                .unwrap_or_else(|| head_categories.unwrap())
        } else {
            0
        };
        let seg_head = SegHead::new(
            &mut store,
            &mut rng_main,
            final_channels + proj_channels,
            cfg.head.seg_channels,
            ncat,
        );

        let tapped = register_taps(backbone, cfg.taps.clone())?;

        let sbd_head = match variant {
            Some(variant) => {
                let mut rng_head = crate::nn::derived_rng(cfg.seed, "sbd_head");
                Some(SbdHead::new(
                    &mut store,
                    &mut rng_head,
                    HeadConfig {
                        variant,
                        num_categories: ncat,
                    },
                    &tapped.side_feature_channels(),
                )?)
            }
            None => None,
        };

        let aux_head = if cfg.head.fcn_aux {
            let mut rng_aux = crate::nn::derived_rng(cfg.seed, "aux_head");
            let sides = tapped.backbone.side_channels();
            let stage4 = sides[sides.len() - 2];
            Some(FcnAuxHead::new(
                &mut store,
                &mut rng_aux,
                stage4,
                cfg.head.aux_channels,
                ncat,
            ))
        } else {
            None
        };

        let mut rng_fusion = crate::nn::derived_rng(cfg.seed, "fusion");
        let channel_merge = if fusion_mode == FusionMode::ChannelMerge {
            let head = sbd_head.as_ref().unwrap();
            if head.side_layers().is_none() {
                return Err(Error::Config(
                    "channel merge supports plain side layers, not residual side blocks".into(),
                ));
            }
            let mut parts: Vec<usize> = vec![1; head.num_sides() - 1];
            parts.push(head.head_categories());
            parts.push(cfg.head.seg_channels);
            Some(ChannelMerge::new(
                &mut store,
                &mut rng_fusion,
                parts,
                &cfg.fusion,
            )?)
        } else {
            None
        };
        let two_stream = if fusion_mode == FusionMode::TwoStream {
            Some(TwoStreamMerge::new(
                &mut store,
                &mut rng_fusion,
                head_categories.unwrap(),
                &cfg.fusion,
            ))
        } else {
            None
        };

        Ok(Self {
            store,
            tapped,
            seg_head,
            sbd_head,
            aux_head,
            channel_merge,
            two_stream,
            fusion_mode,
            num_categories: ncat,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, input: VarId, mode: Mode) -> Result<ModelOutputs> {
        let (_, _, h, w) = tape.shape(input);
        let target = (h, w);
        let store = &mut self.store;
        let feats = self.tapped.forward(tape, store, input, mode);

        let aux_logits = match &self.aux_head {
            Some(aux) => {
                let sides = &feats.raw_sides;
                let stage4 = sides[sides.len() - 2];
                Some(aux.forward(tape, store, stage4, target, mode))
            }
            None => None,
        };

        match self.fusion_mode {
            FusionMode::None => {
                let head = match &self.sbd_head {
                    Some(head) => {
                        Some(head.forward(tape, store, &feats.side_features, target, mode)?)
                    }
                    None => None,
                };
                let f = self.seg_head.feature(tape, store, feats.final_feature, mode);
                let seg_logits = self.seg_head.classify(tape, store, f, target);
                Ok(ModelOutputs {
                    seg_logits,
                    head,
                    aux_logits,
                })
            }
            FusionMode::TwoStream => {
                let head_mod = self.sbd_head.as_ref().unwrap();
                let head = head_mod.forward(tape, store, &feats.side_features, target, mode)?;
                let (_, _, fh, fw) = tape.shape(feats.final_feature);
                let ts = self.two_stream.as_ref().unwrap();
                let shape_feat = ts.forward(tape, store, head.fuse_logits, (fh, fw));
                let enriched = tape.concat_c(&[feats.final_feature, shape_feat]);
                let f = self.seg_head.feature(tape, store, enriched, mode);
                let seg_logits = self.seg_head.classify(tape, store, f, target);
                Ok(ModelOutputs {
                    seg_logits,
                    head: Some(head),
                    aux_logits,
                })
            }
            FusionMode::ChannelMerge => {
                let head_mod = self.sbd_head.as_ref().unwrap();
                let pres = head_mod.project_sides(tape, store, &feats.side_features)?;
                let head_feat = self.seg_head.feature(tape, store, feats.final_feature, mode);
                let mut parts = pres;
                parts.push(head_feat);
                let merge = self.channel_merge.as_ref().unwrap();
                let mixed = merge.forward(tape, store, &parts)?;
                let (mixed_sides, mixed_head) = mixed.split_at(mixed.len() - 1);
                let head = head_mod.forward_from_pre(tape, store, mixed_sides, target, mode)?;
                let seg_logits = self.seg_head.classify(tape, store, mixed_head[0], target);
                Ok(ModelOutputs {
                    seg_logits,
                    head: Some(head),
                    aux_logits,
                })
            }
        }
    }

    /// Convenience eval-mode forward straight from an input batch.
    pub fn infer(&mut self, input: Array4<f64>) -> Result<(Tape, ModelOutputs)> {
        let mut tape = Tape::new();
        let x = tape.input(input);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok((tape, out))
    }

    /// Names of parameters an inference export keeps: the backbone and the
    /// segmentation head.
    pub fn is_inference_param(name: &str) -> bool {
        name.starts_with("backbone.") || name.starts_with("seg.")
    }

    pub fn inference_param_scalars(&self) -> usize {
        self.store
            .iter()
            .filter(|p| p.trainable && Self::is_inference_param(&p.name))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.store.num_trainable()
    }

    /// Loads parameters by name from `(name, values)` pairs; unknown names
    /// are ignored, shape mismatches are errors. Returns how many
    /// parameters were assigned.
    pub fn load_weights(&mut self, named: &[(String, Array4<f64>)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, values) in named {
            if let Some(pid) = self.store.find(name) {
                let p = self.store.get_mut(pid);
                if p.value.dim() != values.dim() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?} for {name}", p.value.dim()),
                        got: format!("{:?}", values.dim()),
                    });
                }
                p.value = values.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}
