//! The joint objective: segmentation cross entropy plus weighted multi-label
//! boundary BCE over the semantic supervision set and binary-boundary BCE
//! over the deep-supervision set,
//!
//! `total = seg_ce + alpha * sum(sbd_bce) + beta * sum(bdry_bce)`,
//!
//! with an optional FCN auxiliary CE term at its own weight. Every member of
//! the semantic set (semantic side logits and fused logits) enters the sum
//! with equal weight.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::heads::HeadOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight on the semantic-boundary terms.
    pub alpha: f64,
    /// Weight on the binary-boundary terms.
    pub beta: f64,
    /// Weight on the FCN auxiliary segmentation term, when that head is
    /// enabled.
    pub aux_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            aux_weight: 0.4,
        }
    }
}

impl LossWeights {
    fn check(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How the class-balancing positive fraction is computed, and whether ignore
/// pixels are masked out of the boundary BCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    /// Balance per category channel instead of over the whole target tensor
    /// of the image.
    pub per_category_rho: bool,
    /// Exclude ignore-labelled pixels from the boundary BCE.
    pub mask_ignore: bool,
    pub ignore_index: i32,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            per_category_rho: false,
            mask_ignore: true,
            ignore_index: 255,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Every pixel of the batch was ignore-labelled; seg CE defined as 0.
    pub all_ignored: bool,
    /// Some boundary target was uniformly positive or negative; those images
    /// fell back to unweighted BCE.
    pub unweighted_bce: bool,
}

/// Scalar decomposition of one step's objective. `total` recomposes exactly
/// from the parts and the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg_ce: f64,
    pub sbd_bce: Vec<f64>,
    pub bdry_bce: Vec<f64>,
    pub aux_ce: Option<f64>,
    pub weights: LossWeights,
    pub flags: LossFlags,
}

impl LossReport {
    /// Weighted sum of the recorded parts; equals `total` up to rounding in
    /// the report itself.
    pub fn recompose(&self) -> f64 {
        self.seg_ce
            + self.weights.alpha * self.sbd_bce.iter().sum::<f64>()
            + self.weights.beta * self.bdry_bce.iter().sum::<f64>()
            + self.aux_ce.map_or(0.0, |a| self.weights.aux_weight * a)
    }
}

/// Boundary supervision targets for one batch, generated alongside the batch
/// by the data pipeline.
#[derive(Debug, Clone)]
pub struct BoundaryTargets {
    /// `[N, C_head, H, W]` multi-label target for the semantic set. For the
    /// single-channel head variant this is the binary boundary map.
    pub semantic: Option<Array4<f64>>,
    /// `[N, 1, H, W]` binary-boundary target for deep supervision.
    pub binary: Option<Array4<f64>>,
}

/// Mean cross entropy over non-ignored pixels.
pub fn seg_cross_entropy(
    tape: &mut Tape,
    logits: VarId,
    labels: &Array3<i64>,
    ignore_index: i32,
) -> (VarId, bool) {
    tape.softmax_cross_entropy(logits, labels, ignore_index as i64)
}

/// Class-balanced multi-label BCE; see [`Tape::balanced_bce`].
pub fn balanced_multilabel_bce(
    tape: &mut Tape,
    logits: VarId,
    targets: &Array4<f64>,
    labels: &Array3<i64>,
    opts: &LossOptions,
) -> (VarId, bool) {
    let valid = valid_mask(labels, opts);
    tape.balanced_bce(logits, targets, &valid, opts.per_category_rho)
}

fn valid_mask(labels: &Array3<i64>, opts: &LossOptions) -> Array3<bool> {
    if opts.mask_ignore {
        labels.mapv(|v| v != opts.ignore_index as i64)
    } else {
        Array3::from_elem(labels.raw_dim(), true)
    }
}

/// Assembles the full objective on the tape and returns the total-loss node
/// together with its scalar decomposition.
pub fn total_loss(
    tape: &mut Tape,
    seg_logits: VarId,
    head: Option<&HeadOutputs>,
    aux_logits: Option<VarId>,
    labels: &Array3<i64>,
    targets: &BoundaryTargets,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<(VarId, LossReport)> {
    weights.check()?;
    let mut flags = LossFlags::default();
    let (seg_ce, all_ignored) = seg_cross_entropy(tape, seg_logits, labels, opts.ignore_index);
    flags.all_ignored = all_ignored;

    let mut terms: Vec<(f64, VarId)> = vec![(1.0, seg_ce)];
    let mut sbd_bce = Vec::new();
    let mut bdry_bce = Vec::new();

    if let Some(head) = head {
        let semantic = targets
            .semantic
            .as_ref()
            .ok_or_else(|| Error::MissingHeadOutput("semantic boundary target".into()))?;
        let valid = valid_mask(labels, opts);
        for member in head.sbd_set() {
            let (node, fallback) =
                tape.balanced_bce(member, semantic, &valid, opts.per_category_rho);
            flags.unweighted_bce |= fallback;
            sbd_bce.push(tape.scalar(node));
            terms.push((weights.alpha, node));
        }
        if !head.binary_side_logits.is_empty() {
            let binary = targets
                .binary
                .as_ref()
                .ok_or_else(|| Error::MissingHeadOutput("binary boundary target".into()))?;
            for &member in &head.binary_side_logits {
                let (node, fallback) =
                    tape.balanced_bce(member, binary, &valid, opts.per_category_rho);
                flags.unweighted_bce |= fallback;
                bdry_bce.push(tape.scalar(node));
                terms.push((weights.beta, node));
            }
        }
    }

    let aux_ce = aux_logits.map(|aux| {
        let (node, ign) = seg_cross_entropy(tape, aux, labels, opts.ignore_index);
        flags.all_ignored |= ign;
        terms.push((weights.aux_weight, node));
        tape.scalar(node)
    });

    let total = tape.add_n(&terms);
    let report = LossReport {
        total: tape.scalar(total),
        seg_ce: tape.scalar(seg_ce),
        sbd_bce,
        bdry_bce,
        aux_ce,
        weights: *weights,
        flags,
    };
    Ok((total, report))
}
