//! Synthetic shapes with instance ids for desk-scale experiments.
//!
//! Each sample layers ellipses, convex quads, and thin bars (1-3 px) over a
//! textured background. Category colors are fixed per dataset seed with
//! per-instance jitter and pixel noise, so appearance correlates with the
//! label but edges stay the hard part. Thin bars keep boundary-sensitive
//! behavior in the mix; the generator was calibrated so they hold at least a
//! tenth of the foreground.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::RawSample;
use crate::boundary::{InstanceMap, LabelMap};

/// How many pixels wide a shape must stay to count as "thin".
pub const THIN_BAR_MAX_WIDTH: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Ellipse,
    Quad,
    Bar,
}

/// Deterministic dataset of `num_samples` rasters of `size`^2 pixels with
/// labels in `[0, num_categories)` (0 = background) and 1-based instance
/// ids. Panics free: invalid arguments surface as an empty config error.
pub fn synth_shapes(
    num_samples: usize,
    size: usize,
    num_categories: usize,
    seed: u64,
) -> crate::error::Result<Vec<RawSample>> {
    Ok(synth_shapes_with_meta(num_samples, size, num_categories, seed)?.0)
}

/// As [`synth_shapes`], also reporting which instance ids are thin bars per
/// sample (used to calibrate the thin-structure share).
pub fn synth_shapes_with_meta(
    num_samples: usize,
    size: usize,
    num_categories: usize,
    seed: u64,
) -> crate::error::Result<(Vec<RawSample>, Vec<Vec<u32>>)> {
    if num_categories < 2 {
        return Err(crate::error::Error::Config(
            "synthetic shapes need >= 2 categories (background + shapes)".into(),
        ));
    }
    if size < 8 {
        return Err(crate::error::Error::Config("synthetic size must be >= 8".into()));
    }
    // Palette drawn once per dataset so category appearance is stable.
    let mut palette_rng = ChaCha12Rng::seed_from_u64(seed);
    let palette: Vec<[f64; 3]> = (0..num_categories)
        .map(|_| {
            [
                palette_rng.gen_range(0.15..0.95),
                palette_rng.gen_range(0.15..0.95),
                palette_rng.gen_range(0.15..0.95),
            ]
        })
        .collect();

    let mut samples = Vec::with_capacity(num_samples);
    let mut bars = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(0x5a_0000_0000 + i as u64);
        let (raw, bar_ids) = one_sample(&mut rng, size, num_categories, &palette);
        samples.push(raw);
        bars.push(bar_ids);
    }
    Ok((samples, bars))
}

fn one_sample(
    rng: &mut ChaCha12Rng,
    size: usize,
    num_categories: usize,
    palette: &[[f64; 3]],
) -> (RawSample, Vec<u32>) {
    let s = size as f64;
    let mut labels = Array2::<i32>::zeros((size, size));
    let mut instances = Array2::<u32>::zeros((size, size));

    let n_blobs = rng.gen_range(3..=5);
    let n_bars = rng.gen_range(2..=3);
    let mut shapes: Vec<(ShapeKind, i32)> = Vec::new();
    for _ in 0..n_blobs {
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Ellipse
        } else {
            ShapeKind::Quad
        };
        shapes.push((kind, rng.gen_range(1..num_categories) as i32));
    }
    for _ in 0..n_bars {
        shapes.push((ShapeKind::Bar, rng.gen_range(1..num_categories) as i32));
    }

    let mut bar_ids = Vec::new();
    for (idx, &(kind, cat)) in shapes.iter().enumerate() {
        let inst = (idx + 1) as u32;
        match kind {
            ShapeKind::Ellipse => {
                let cy = rng.gen_range(0.15 * s..0.85 * s);
                let cx = rng.gen_range(0.15 * s..0.85 * s);
                let ry = rng.gen_range(0.08 * s..0.22 * s);
                let rx = rng.gen_range(0.08 * s..0.22 * s);
                fill(&mut labels, &mut instances, cat, inst, |y, x| {
                    let dy = (y - cy) / ry;
                    let dx = (x - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                });
            }
            ShapeKind::Quad => {
                let cy = rng.gen_range(0.2 * s..0.8 * s);
                let cx = rng.gen_range(0.2 * s..0.8 * s);
                let hh = rng.gen_range(0.07 * s..0.2 * s);
                let hw = rng.gen_range(0.07 * s..0.2 * s);
                let ang = rng.gen_range(0.0..std::f64::consts::PI);
                let (sin, cos) = ang.sin_cos();
                fill(&mut labels, &mut instances, cat, inst, |y, x| {
                    let ry = (y - cy) * cos - (x - cx) * sin;
                    let rx = (y - cy) * sin + (x - cx) * cos;
                    ry.abs() <= hh && rx.abs() <= hw
                });
            }
            ShapeKind::Bar => {
                bar_ids.push(inst);
                let y0 = rng.gen_range(0.0..s);
                let x0 = rng.gen_range(0.0..s);
                let ang = rng.gen_range(0.0..std::f64::consts::PI);
                let len = rng.gen_range(0.4 * s..0.9 * s);
                let width = rng.gen_range(1..=THIN_BAR_MAX_WIDTH) as f64;
                let (dy, dx) = (ang.sin(), ang.cos());
                let (y1, x1) = (y0 + dy * len, x0 + dx * len);
                let half = width / 2.0;
                fill(&mut labels, &mut instances, cat, inst, |y, x| {
                    seg_dist(y, x, y0, x0, y1, x1) <= half
                });
            }
        }
    }

    // Appearance: category color, instance jitter, pixel noise.
    let inst_jitter: Vec<[f64; 3]> = (0..=shapes.len())
        .map(|_| {
            [
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
            ]
        })
        .collect();
    let mut image = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let cat = labels[(y, x)] as usize;
            let inst = instances[(y, x)] as usize;
            let base = palette[cat];
            let jit = inst_jitter[inst];
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-0.05..0.05);
                image[(c, y, x)] = (base[c] + jit[c] + noise).clamp(0.0, 1.0);
            }
        }
    }

    let raw = RawSample {
        image,
        labels: LabelMap::new(labels).expect("non-empty raster"),
        instances: Some(InstanceMap::new(instances)),
    };
    (raw, bar_ids)
}

fn fill(
    labels: &mut Array2<i32>,
    instances: &mut Array2<u32>,
    cat: i32,
    inst: u32,
    inside: impl Fn(f64, f64) -> bool,
) {
    let (h, w) = labels.dim();
    for y in 0..h {
        for x in 0..w {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                labels[(y, x)] = cat;
                instances[(y, x)] = inst;
            }
        }
    }
}

/// Distance from a point to a segment.
fn seg_dist(py: f64, px: f64, ay: f64, ax: f64, by: f64, bx: f64) -> f64 {
    let (vy, vx) = (by - ay, bx - ax);
    let len2 = vy * vy + vx * vx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - ay) * vy + (px - ax) * vx) / len2).clamp(0.0, 1.0)
    };
    let (cy, cx) = (ay + t * vy, ax + t * vx);
    ((py - cy) * (py - cy) + (px - cx) * (px - cx)).sqrt()
}
