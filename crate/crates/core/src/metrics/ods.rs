//! Maximum F-score at a single dataset-wide threshold, under thinned,
//! tolerance-matched boundary comparison.
//!
//! Per threshold, predictions are binarized, optionally skeletonized, and
//! matched one-to-one against ground-truth boundary pixels. TP/FP/FN counts
//! accumulate over the whole dataset per category; each category then takes
//! its best threshold and the mean over categories is reported.
//!
//! Matching sorts candidate pairs by distance and accepts greedily. Because
//! acceptance of a pair only depends on strictly closer pairs, the accepted
//! set for a smaller tolerance is a prefix of the accepted set for a larger
//! one, which makes the score monotone in the tolerance by construction.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::thin::thin;
use crate::boundary::SemanticBoundaryTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdsConfig {
    /// Strictly increasing binarization thresholds in (0, 1).
    pub thresholds: Vec<f64>,
    /// Pixel tolerance for matching predicted to ground-truth boundary
    /// pixels. Inherited-protocol value; not authoritative.
    pub match_tolerance: f64,
    /// Skeletonize both sides before matching.
    pub thinning: bool,
}

impl Default for OdsConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..100).map(|i| i as f64 / 100.0).collect(),
            match_tolerance: 2.0,
            thinning: true,
        }
    }
}

impl OdsConfig {
    pub fn check(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("ODS needs at least one threshold".into()));
        }
        let increasing = self
            .thresholds
            .windows(2)
            .all(|w| w[0] < w[1]);
        let in_range = self.thresholds.iter().all(|&t| t > 0.0 && t < 1.0);
        if !increasing || !in_range {
            return Err(Error::Config(
                "ODS thresholds must be strictly increasing within (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Distance-sorted greedy one-to-one matching of boundary pixels.
/// Returns (matched, unmatched predictions, unmatched ground truth).
pub fn match_boundaries(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    tolerance: f64,
) -> (u64, u64, u64) {
    let (h, w) = pred.dim();
    let n_pred = pred.iter().filter(|&&v| v).count() as u64;
    let n_gt = gt.iter().filter(|&&v| v).count() as u64;
    if n_pred == 0 || n_gt == 0 {
        return (0, n_pred, n_gt);
    }
    let tol2 = tolerance * tolerance;
    let reach = tolerance.floor() as i64;
    // (squared distance, pred flat index, gt flat index), lexicographic.
    let mut pairs: Vec<(i64, u32, u32)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !pred[(y, x)] {
                continue;
            }
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d2 = dy * dy + dx * dx;
                    if d2 as f64 > tol2 {
                        continue;
                    }
                    let (gy, gx) = (y as i64 + dy, x as i64 + dx);
                    if gy < 0 || gx < 0 || gy >= h as i64 || gx >= w as i64 {
                        continue;
                    }
                    if gt[(gy as usize, gx as usize)] {
                        pairs.push((
                            d2,
                            (y * w + x) as u32,
                            (gy as usize * w + gx as usize) as u32,
                        ));
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut pred_used = vec![false; h * w];
    let mut gt_used = vec![false; h * w];
    let mut tp = 0u64;
    for (_, pi, gi) in pairs {
        let (pi, gi) = (pi as usize, gi as usize);
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            tp += 1;
        }
    }
    (tp, n_pred - tp, n_gt - tp)
}

/// Dataset-level accumulator; merging is associative and order-independent.
#[derive(Debug, Clone)]
pub struct OdsAccumulator {
    cfg: OdsConfig,
    num_categories: usize,
    /// [category][threshold] -> (tp, fp, fn).
    counts: Vec<Vec<(u64, u64, u64)>>,
    /// Whether any gt or prediction pixel was ever seen per category.
    seen: Vec<bool>,
}

impl OdsAccumulator {
    pub fn new(num_categories: usize, cfg: OdsConfig) -> Result<Self> {
        cfg.check()?;
        let nt = cfg.thresholds.len();
        Ok(Self {
            cfg,
            num_categories,
            counts: vec![vec![(0, 0, 0); nt]; num_categories],
            seen: vec![false; num_categories],
        })
    }

    /// Accumulates one image. `probs` is `[C, H, W]` in [0, 1].
    pub fn add_image(&mut self, probs: &Array3<f64>, gt: &SemanticBoundaryTensor) -> Result<()> {
        let (c, h, w) = probs.dim();
        if c != self.num_categories || gt.data().dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, {h}, {w}]", self.num_categories),
                got: format!("{:?}", gt.data().dim()),
            });
        }
        for ci in 0..c {
            let gt_raw = Array2::from_shape_fn((h, w), |(y, x)| gt.channel(ci)[(y, x)] != 0);
            let gt_bd = if self.cfg.thinning {
                thin(&gt_raw)
            } else {
                gt_raw
            };
            let has_gt = gt_bd.iter().any(|&v| v);
            let probs_c = probs.index_axis(ndarray::Axis(0), ci);
            for (ti, &t) in self.cfg.thresholds.iter().enumerate() {
                let raw = Array2::from_shape_fn((h, w), |(y, x)| probs_c[(y, x)] > t);
                let pred = if self.cfg.thinning { thin(&raw) } else { raw };
                if pred.iter().any(|&v| v) {
                    self.seen[ci] = true;
                }
                let (tp, fp, fnn) = match_boundaries(&pred, &gt_bd, self.cfg.match_tolerance);
                let slot = &mut self.counts[ci][ti];
                slot.0 += tp;
                slot.1 += fp;
                slot.2 += fnn;
            }
            if has_gt {
                self.seen[ci] = true;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &OdsAccumulator) {
        assert_eq!(self.num_categories, other.num_categories);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                x.0 += y.0;
                x.1 += y.1;
                x.2 += y.2;
            }
        }
        for (s, o) in self.seen.iter_mut().zip(&other.seen) {
            *s |= o;
        }
    }

    /// Per-category max-over-thresholds F; categories with no ground truth
    /// and no predictions anywhere are excluded from the mean.
    pub fn finish(&self) -> OdsResult {
        let mut per_category = Vec::with_capacity(self.num_categories);
        for ci in 0..self.num_categories {
            if !self.seen[ci] {
                per_category.push(None);
                continue;
            }
            let best = self.counts[ci]
                .iter()
                .map(|&(tp, fp, fnn)| fscore(tp, fp, fnn))
                .fold(0.0f64, f64::max);
            per_category.push(Some(best));
        }
        let present: Vec<f64> = per_category.iter().filter_map(|&f| f).collect();
        let max_f_mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        OdsResult {
            per_category,
            max_f_mean,
        }
    }
}

fn fscore(tp: u64, fp: u64, fnn: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fnn) as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdsResult {
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories of the best-threshold F-score.
    pub max_f_mean: f64,
}
