//! Model evaluation: mIoU, trimap boundary F-scores at a width ladder, and
//! (with a boundary head) maximum F at the optimal dataset threshold.
//!
//! Accumulation is per-image and merged associatively, so images can be
//! processed by any number of workers in any order.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSection, RunConfig};
use crate::error::Result;
use crate::metrics::{
    boundary_fscore_labels, BoundaryFScoreConfig, ConfusionMatrix, OdsAccumulator, OdsConfig,
    OdsResult,
};
use crate::model::SegModel;
use crate::pipeline::{png, resize_bilinear_image, DataSource, RawSample};
use crate::boundary::{binary_boundaries, semantic_boundaries, BoundaryGenConfig, SemanticBoundaryTensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryFSummary {
    pub width: u32,
    pub per_category: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub miou: f64,
    pub per_category_iou: Vec<Option<f64>>,
    pub boundary_f: Vec<BoundaryFSummary>,
    pub max_f_ods: Option<OdsResult>,
}

struct Accum {
    confusion: ConfusionMatrix,
    bf_sums: Vec<Vec<f64>>,
    ods: Option<OdsAccumulator>,
    images: usize,
}

impl Accum {
    fn new(ncat: usize, widths: &[u32], ods: Option<OdsAccumulator>) -> Self {
        Self {
            confusion: ConfusionMatrix::new(ncat),
            bf_sums: vec![vec![0.0; ncat]; widths.len()],
            ods,
            images: 0,
        }
    }

    fn merge(mut self, other: Accum) -> Accum {
        self.confusion.merge(&other.confusion);
        for (a, b) in self.bf_sums.iter_mut().zip(&other.bf_sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.ods = match (self.ods.take(), other.ods) {
            (Some(mut a), Some(b)) => {
                a.merge(&b);
                Some(a)
            }
            (None, b) => b,
            (a, None) => a,
        };
        self.images += other.images;
        self
    }
}

fn ods_config(eval: &EvalSection) -> OdsConfig {
    let n = eval.ods_thresholds.max(1);
    OdsConfig {
        thresholds: (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
        match_tolerance: eval.ods_tolerance,
        thinning: true,
    }
}

/// Single-image segmentation logits, honoring slide inference and optional
/// multi-scale + flip averaging.
pub fn predict_logits(model: &mut SegModel, image: &Array3<f64>, eval: &EvalSection) -> Result<Array3<f64>> {
    if !eval.tta {
        return forward_logits(model, image, eval);
    }
    let (_, h, w) = image.dim();
    let scales = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
    let mut sum = Array3::<f64>::zeros((model.num_categories, h, w));
    let mut count = 0.0;
    for &s in &scales {
        let (sh, sw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        let scaled = resize_bilinear_image(image, sh, sw);
        for flip in [false, true] {
            let input = if flip { flip_image(&scaled) } else { scaled.clone() };
            let logits = forward_logits(model, &input, eval)?;
            let logits = if flip { flip_image(&logits) } else { logits };
            sum += &resize_bilinear_image(&logits, h, w);
            count += 1.0;
        }
    }
    Ok(sum / count)
}

fn flip_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| image[(ci, y, w - 1 - x)])
}

fn forward_logits(model: &mut SegModel, image: &Array3<f64>, eval: &EvalSection) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    let window = eval.slide_window.unwrap_or([h, w]);
    if h <= window[0] && w <= window[1] {
        let input = image
            .clone()
            .into_shape_with_order((1, c, h, w))
            .unwrap();
        let (tape, out) = model.infer(input)?;
        return Ok(tape.value(out.seg_logits).index_axis(Axis(0), 0).to_owned());
    }
    // Overlapping tiles, averaged where they meet.
    let (wh, ww) = (window[0].min(h), window[1].min(w));
    let (sy, sx) = ((wh / 2).max(1), (ww / 2).max(1));
    let mut sum = Array3::<f64>::zeros((model.num_categories, h, w));
    let mut hits = Array2::<f64>::zeros((h, w));
    let mut y = 0;
    loop {
        let y0 = y.min(h - wh);
        let mut x = 0;
        loop {
            let x0 = x.min(w - ww);
            let tile = image
                .slice(ndarray::s![.., y0..y0 + wh, x0..x0 + ww])
                .to_owned();
            let logits = forward_logits(model, &tile, &EvalSection { slide_window: None, ..eval.clone() })?;
            for ci in 0..model.num_categories {
                for ty in 0..wh {
                    for tx in 0..ww {
                        sum[(ci, y0 + ty, x0 + tx)] += logits[(ci, ty, tx)];
                    }
                }
            }
            for ty in 0..wh {
                for tx in 0..ww {
                    hits[(y0 + ty, x0 + tx)] += 1.0;
                }
            }
            if x0 + ww >= w {
                break;
            }
            x += sx;
        }
        if y0 + wh >= h {
            break;
        }
        y += sy;
    }
    for ci in 0..model.num_categories {
        for yy in 0..h {
            for xx in 0..w {
                sum[(ci, yy, xx)] /= hits[(yy, xx)];
            }
        }
    }
    Ok(sum)
}

/// Boundary-head probabilities for one image (sigmoid of the fused logits).
fn head_probs(model: &mut SegModel, image: &Array3<f64>) -> Result<Option<Array3<f64>>> {
    let (c, h, w) = image.dim();
    let input = image.clone().into_shape_with_order((1, c, h, w)).unwrap();
    let (tape, out) = model.infer(input)?;
    Ok(out.head.map(|head| {
        tape.value(head.fuse_logits)
            .index_axis(Axis(0), 0)
            .mapv(|z| 1.0 / (1.0 + (-z).exp()))
    }))
}

/// Ground truth for boundary-detection scoring: a thin (radius 1) tensor,
/// instance-sensitive whenever instance maps are available.
fn eval_boundary_gt(
    raw: &RawSample,
    categories: usize,
    single_channel: bool,
    ignore_index: i32,
) -> Result<SemanticBoundaryTensor> {
    let cfg = BoundaryGenConfig {
        radius: 1,
        instance_sensitive: raw.instances.is_some(),
        ignore_index,
        image_border_is_boundary: false,
    };
    if single_channel {
        let b = binary_boundaries(&raw.labels, &cfg)?;
        let (h, w) = b.dim();
        Ok(SemanticBoundaryTensor::new(
            b.into_shape_with_order((1, h, w)).unwrap(),
        ))
    } else {
        semantic_boundaries(&raw.labels, categories, &cfg, raw.instances.as_ref())
    }
}

/// Runs the full evaluation over a dataset. The model is cloned per worker;
/// live weights are never touched.
pub fn evaluate(
    model: &SegModel,
    data: &DataSource,
    cfg: &RunConfig,
    eval: &EvalSection,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let ncat = model.num_categories;
    let ignore = cfg.dataset.ignore_index;
    let widths = &eval.trimap_widths;
    let with_ods = eval.ods && model.sbd_head.is_some();
    let head_categories = model
        .sbd_head
        .as_ref()
        .map(|h| h.head_categories())
        .unwrap_or(ncat);
    let make_ods = || -> Result<Option<OdsAccumulator>> {
        Ok(if with_ods {
            Some(OdsAccumulator::new(head_categories, ods_config(eval))?)
        } else {
            None
        })
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let indices: Vec<usize> = (0..data.len()).collect();
    let accum = indices
        .par_iter()
        .map(|&i| -> Result<Accum> {
            let mut model = model.clone();
            let raw = data.get(i)?;
            let mut acc = Accum::new(ncat, widths, make_ods()?);
            let logits = predict_logits(&mut model, &raw.image, eval)?;
            let (_, h, w) = logits.dim();
            let pred = Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0usize;
                for c in 1..ncat {
                    if logits[(c, y, x)] > logits[(best, y, x)] {
                        best = c;
                    }
                }
                best as i32
            });
            acc.confusion.add(&pred, raw.labels.data(), ignore)?;
            for (wi, &width) in widths.iter().enumerate() {
                let (per_cat, _) = boundary_fscore_labels(
                    &pred,
                    raw.labels.data(),
                    ncat,
                    ignore,
                    &BoundaryFScoreConfig {
                        trimap_width: width,
                    },
                )?;
                for (slot, f) in acc.bf_sums[wi].iter_mut().zip(per_cat) {
                    *slot += f;
                }
            }
            if let Some(ods) = acc.ods.as_mut() {
                if let Some(probs) = head_probs(&mut model, &raw.image)? {
                    let gt =
                        eval_boundary_gt(&raw, ncat, head_categories == 1, ignore)?;
                    ods.add_image(&probs, &gt)?;
                }
            }
            if let Some(dir) = out_dir {
                if eval.error_maps {
                    let err = disagreement_map(&pred, raw.labels.data(), ignore);
                    png::write_mask_png(&dir.join(format!("err_{}.png", data.name(i))), &err)?;
                }
            }
            acc.images = 1;
            Ok(acc)
        })
        .try_reduce(
            || Accum::new(ncat, widths, make_ods().unwrap_or(None)),
            |a, b| Ok(a.merge(b)),
        )?;

    let per_category_iou = accum.confusion.per_category_iou();
    let n = accum.images.max(1) as f64;
    let boundary_f: Vec<BoundaryFSummary> = widths
        .iter()
        .zip(&accum.bf_sums)
        .map(|(&width, sums)| {
            let per_category: Vec<f64> = sums.iter().map(|s| s / n).collect();
            let mean = per_category.iter().sum::<f64>() / per_category.len().max(1) as f64;
            BoundaryFSummary {
                width,
                per_category,
                mean,
            }
        })
        .collect();
    let report = EvalReport {
        num_images: accum.images,
        miou: accum.confusion.miou(),
        per_category_iou,
        boundary_f,
        max_f_ods: accum.ods.map(|o| o.finish()),
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// 255 where prediction and ground truth disagree (ignore excluded).
fn disagreement_map(pred: &Array2<i32>, gt: &Array2<i32>, ignore: i32) -> Array2<u8> {
    Array2::from_shape_fn(pred.dim(), |idx| {
        (gt[idx] != ignore && pred[idx] != gt[idx]) as u8
    })
}

/// Writes the line-delimited records and a human-readable summary table.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = std::fs::File::create(dir.join("metrics.jsonl"))?;
    for (c, iou) in report.per_category_iou.iter().enumerate() {
        if let Some(iou) = iou {
            writeln!(
                jsonl,
                "{}",
                serde_json::json!({"metric": "iou", "category": c, "value": iou})
            )?;
        }
    }
    writeln!(
        jsonl,
        "{}",
        serde_json::json!({"metric": "miou", "value": report.miou})
    )?;
    for bf in &report.boundary_f {
        for (c, f) in bf.per_category.iter().enumerate() {
            writeln!(
                jsonl,
                "{}",
                serde_json::json!({"metric": "boundary_f", "width": bf.width, "category": c, "value": f})
            )?;
        }
        writeln!(
            jsonl,
            "{}",
            serde_json::json!({"metric": "boundary_f_mean", "width": bf.width, "value": bf.mean})
        )?;
    }
    if let Some(ods) = &report.max_f_ods {
        for (c, f) in ods.per_category.iter().enumerate() {
            if let Some(f) = f {
                writeln!(
                    jsonl,
                    "{}",
                    serde_json::json!({"metric": "max_f", "category": c, "value": f})
                )?;
            }
        }
        writeln!(
            jsonl,
            "{}",
            serde_json::json!({"metric": "max_f_mean", "value": ods.max_f_mean})
        )?;
    }

    let mut table = String::new();
    table.push_str(&format!(
        "images: {}\nmIoU: {:.4}\n",
        report.num_images, report.miou
    ));
    table.push_str("category | iou");
    for bf in &report.boundary_f {
        table.push_str(&format!(" | F@{}px", bf.width));
    }
    table.push('\n');
    for c in 0..report.per_category_iou.len() {
        let iou = report.per_category_iou[c]
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "  -  ".into());
        table.push_str(&format!("{c:8} | {iou}"));
        for bf in &report.boundary_f {
            table.push_str(&format!(" | {:.4}", bf.per_category[c]));
        }
        table.push('\n');
    }
    if let Some(ods) = &report.max_f_ods {
        table.push_str(&format!("maxF (ODS) mean: {:.4}\n", ods.max_f_mean));
    }
    std::fs::write(dir.join("summary.txt"), table)?;
    Ok(())
}
