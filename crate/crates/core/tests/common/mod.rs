//! Shared test oracles, independent of the library's implementation paths.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sembound::{InstanceMap, LabelMap};

/// Brute-force nearest-opposite-pixel scan. A pixel lands in channel `c`
/// exactly when some pixel of different membership w.r.t. `c` (category
/// membership, or per-instance membership when `instances` is given) lies
/// within squared center distance `radius^2`. Ignore pixels belong to no
/// side and never emit.
pub fn oracle_semantic_boundaries(
    labels: &LabelMap,
    num_categories: usize,
    radius: u32,
    ignore_index: i32,
    instances: Option<&InstanceMap>,
) -> Array3<u8> {
    let (h, w) = labels.data().dim();
    let r = radius as i64;
    let r2 = r * r;
    let mut out = Array3::<u8>::zeros((num_categories, h, w));
    for y in 0..h {
        for x in 0..w {
            let a = labels.data()[(y, x)];
            if a == ignore_index {
                continue;
            }
            let ia = instances.map_or(0, |m| m.data()[(y, x)]);
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dy * dy + dx * dx;
                    if d2 < 1 || d2 > r2 {
                        continue;
                    }
                    let (qy, qx) = (y as i64 + dy, x as i64 + dx);
                    if qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                        continue;
                    }
                    let b = labels.data()[(qy as usize, qx as usize)];
                    if b == ignore_index {
                        continue;
                    }
                    if b != a {
                        // Opposite category membership for both categories.
                        if (a as usize) < num_categories {
                            out[(a as usize, y, x)] = 1;
                        }
                        if (b as usize) < num_categories {
                            out[(b as usize, y, x)] = 1;
                        }
                    } else if let Some(m) = instances {
                        // Same category, different instance: the pixel is
                        // inner (or outer) to a per-instance mask whose
                        // opposite side is within reach.
                        let ib = m.data()[(qy as usize, qx as usize)];
                        if ib != ia && (a as usize) < num_categories {
                            out[(a as usize, y, x)] = 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Random label map with a mix of textures: per-pixel noise, blobby shapes,
/// stripes, and optional ignore patches.
pub fn random_label_map(
    rng: &mut ChaCha12Rng,
    h: usize,
    w: usize,
    num_categories: usize,
    ignore_index: i32,
    with_ignore: bool,
) -> LabelMap {
    let style: u8 = rng.gen_range(0..3);
    let mut data = match style {
        0 => Array2::from_shape_fn((h, w), |_| rng.gen_range(0..num_categories) as i32),
        1 => {
            // Overlapping rectangles over a background.
            let mut d = Array2::<i32>::zeros((h, w));
            for _ in 0..rng.gen_range(2..6) {
                let cat = rng.gen_range(0..num_categories) as i32;
                let y0 = rng.gen_range(0..h);
                let x0 = rng.gen_range(0..w);
                let hh = rng.gen_range(1..=h - y0);
                let ww = rng.gen_range(1..=w - x0);
                for y in y0..y0 + hh {
                    for x in x0..x0 + ww {
                        d[(y, x)] = cat;
                    }
                }
            }
            d
        }
        _ => {
            let period = rng.gen_range(2..8);
            Array2::from_shape_fn((h, w), |(y, x)| {
                (((y + 2 * x) / period) % num_categories) as i32
            })
        }
    };
    if with_ignore {
        for _ in 0..rng.gen_range(1..4) {
            let y0 = rng.gen_range(0..h);
            let x0 = rng.gen_range(0..w);
            let hh = rng.gen_range(1..=(h - y0).min(6));
            let ww = rng.gen_range(1..=(w - x0).min(6));
            for y in y0..y0 + hh {
                for x in x0..x0 + ww {
                    data[(y, x)] = ignore_index;
                }
            }
        }
    }
    LabelMap::new(data).unwrap()
}

/// Random instance map: blobby patches of distinct ids over background 0.
pub fn random_instance_map(rng: &mut ChaCha12Rng, h: usize, w: usize) -> InstanceMap {
    let mut data = Array2::<u32>::zeros((h, w));
    for inst in 1..=rng.gen_range(2..7u32) {
        let y0 = rng.gen_range(0..h);
        let x0 = rng.gen_range(0..w);
        let hh = rng.gen_range(1..=h - y0);
        let ww = rng.gen_range(1..=w - x0);
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                data[(y, x)] = inst;
            }
        }
    }
    InstanceMap::new(data)
}

/// Mean count of boundary pixels per row, the band thickness of a vertical
/// interface.
pub fn mean_row_thickness(mask: &ndarray::ArrayView2<u8>) -> f64 {
    let (h, w) = mask.dim();
    let total: usize = (0..h)
        .map(|y| (0..w).filter(|&x| mask[(y, x)] != 0).count())
        .sum();
    total as f64 / h as f64
}
