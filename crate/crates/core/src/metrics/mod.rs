//! Segmentation and boundary-quality evaluation.

mod ods;
mod thin;

pub use ods::{match_boundaries, OdsAccumulator, OdsConfig, OdsResult};
pub use thin::thin;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boundary::squared_edt;
use crate::error::{Error, Result};

/// Per-category pixel counts; ignore pixels are excluded. Row = ground
/// truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_categories: usize,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_categories: usize) -> Self {
        Self {
            num_categories,
            counts: Array2::zeros((num_categories, num_categories)),
        }
    }

    pub fn add(&mut self, pred: &Array2<i32>, gt: &Array2<i32>, ignore_index: i32) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", gt.dim()),
                got: format!("{:?}", pred.dim()),
            });
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g < self.num_categories && p < self.num_categories {
                self.counts[(g, p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// IoU per category; `None` for categories absent from both prediction
    /// and ground truth (excluded from the mean).
    pub fn per_category_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_categories)
            .map(|c| {
                let tp = self.counts[(c, c)];
                let fp: u64 = (0..self.num_categories)
                    .filter(|&g| g != c)
                    .map(|g| self.counts[(g, c)])
                    .sum();
                let fnn: u64 = (0..self.num_categories)
                    .filter(|&p| p != c)
                    .map(|p| self.counts[(c, p)])
                    .sum();
                let denom = tp + fp + fnn;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_category_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }
}

/// Convenience wrapper: per-category IoU plus mean for one prediction.
pub fn miou(
    pred: &Array2<i32>,
    gt: &Array2<i32>,
    num_categories: usize,
    ignore_index: i32,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_categories);
    cm.add(pred, gt, ignore_index)?;
    Ok((cm.per_category_iou(), cm.miou()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryFScoreConfig {
    /// Band width in pixels within which a boundary pixel counts as matched.
    pub trimap_width: u32,
}

impl Default for BoundaryFScoreConfig {
    fn default() -> Self {
        Self { trimap_width: 3 }
    }
}

/// One-pixel interior interface of a binary mask: mask pixels with a
/// 4-neighbour outside the mask. The raster edge is not an interface.
pub fn mask_boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[(y, x)] {
            return false;
        }
        let mut interface = false;
        if y > 0 && !mask[(y - 1, x)] {
            interface = true;
        }
        if y + 1 < h && !mask[(y + 1, x)] {
            interface = true;
        }
        if x > 0 && !mask[(y, x - 1)] {
            interface = true;
        }
        if x + 1 < w && !mask[(y, x + 1)] {
            interface = true;
        }
        interface
    })
}

/// Boundary F-score between two binary masks: precision is the fraction of
/// predicted-boundary pixels within `trimap_width` of a ground-truth
/// boundary pixel, recall the converse. Masks with no boundary on either
/// side score 1 when both are empty, 0 otherwise.
pub fn boundary_fscore_binary(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    cfg: &BoundaryFScoreConfig,
) -> f64 {
    let pred_bd = mask_boundary(pred);
    let gt_bd = mask_boundary(gt);
    let n_pred = pred_bd.iter().filter(|&&v| v).count();
    let n_gt = gt_bd.iter().filter(|&&v| v).count();
    if n_pred == 0 || n_gt == 0 {
        return if n_pred == n_gt { 1.0 } else { 0.0 };
    }
    let w2 = (cfg.trimap_width as u64) * (cfg.trimap_width as u64);
    let d_gt = squared_edt(&gt_bd);
    let d_pred = squared_edt(&pred_bd);
    let hits_p = pred_bd
        .iter()
        .zip(d_gt.iter())
        .filter(|&(&b, &d)| b && d <= w2)
        .count();
    let hits_r = gt_bd
        .iter()
        .zip(d_pred.iter())
        .filter(|&(&b, &d)| b && d <= w2)
        .count();
    let p = hits_p as f64 / n_pred as f64;
    let r = hits_r as f64 / n_gt as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-category boundary F-score over label maps plus the mean. Ignore
/// pixels are removed from both masks before boundary extraction.
pub fn boundary_fscore_labels(
    pred: &Array2<i32>,
    gt: &Array2<i32>,
    num_categories: usize,
    ignore_index: i32,
    cfg: &BoundaryFScoreConfig,
) -> Result<(Vec<f64>, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", gt.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let mut per_category = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let pm = Array2::from_shape_fn(pred.dim(), |idx| {
            pred[idx] == c as i32 && gt[idx] != ignore_index
        });
        let gm = Array2::from_shape_fn(gt.dim(), |idx| gt[idx] == c as i32);
        per_category.push(boundary_fscore_binary(&pm, &gm, cfg));
    }
    let mean = per_category.iter().sum::<f64>() / num_categories.max(1) as f64;
    Ok((per_category, mean))
}
