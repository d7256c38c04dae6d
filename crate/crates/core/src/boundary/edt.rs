//! Exact Euclidean distance transforms on binary rasters.
//!
//! The two-phase separable scan of Meijster et al. computes, for every cell,
//! the squared Euclidean distance to the nearest site cell. All arithmetic is
//! integral, so results are exact: thresholding `d² <= r²` is free of any
//! floating-point ambiguity and identical across platforms.

use ndarray::Array2;

/// Sentinel for "no site exists anywhere in the raster".
pub const INF_SQ: u64 = u64::MAX;

/// Squared Euclidean distance from every cell to the nearest `true` cell.
///
/// Distances are measured between cell centers, so orthogonal neighbours are
/// at squared distance 1 and diagonal neighbours at 2. Returns [`INF_SQ`]
/// everywhere when `sites` contains no `true` cell.
pub fn squared_edt(sites: &Array2<bool>) -> Array2<u64> {
    let (h, w) = sites.dim();
    let mut out = Array2::<u64>::zeros((h, w));
    if !sites.iter().any(|&s| s) {
        out.fill(INF_SQ);
        return out;
    }

    // Columns without a site keep a capped vertical distance. The cap is
    // larger than any realisable distance, so capped parabolas never win the
    // row-wise lower envelope once at least one site exists.
    let cap = (h + w) as u64;

    // Phase 1: vertical distance to the nearest site within each column.
    let mut g = Array2::<u64>::zeros((h, w));
    for x in 0..w {
        g[(0, x)] = if sites[(0, x)] { 0 } else { cap };
        for y in 1..h {
            g[(y, x)] = if sites[(y, x)] {
                0
            } else {
                (g[(y - 1, x)] + 1).min(cap)
            };
        }
        for y in (0..h - 1).rev() {
            if g[(y + 1, x)] + 1 < g[(y, x)] {
                g[(y, x)] = g[(y + 1, x)] + 1;
            }
        }
    }

    // Phase 2: per row, lower envelope of the parabolas
    // f_i(x) = (x - i)^2 + g(i, y)^2 over columns i.
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for y in 0..h {
        let row = g.row(y);
        let f = |x: i64, i: usize| -> u64 {
            let dx = x - i as i64;
            (dx * dx) as u64 + row[i] * row[i]
        };
        // First column >= which parabola u beats parabola i (integer floor).
        let sep = |i: usize, u: usize| -> i64 {
            let (iu, ii) = (u as i64, i as i64);
            let (gu, gi) = (row[u] as i64, row[i] as i64);
            (iu * iu - ii * ii + gu * gu - gi * gi) / (2 * (iu - ii))
        };

        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
                t[0] = 0;
            } else {
                let boundary = 1 + sep(s[q as usize], u);
                if boundary < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = boundary;
                }
            }
        }
        for x in (0..w).rev() {
            out[(y, x)] = f(x as i64, s[q as usize]);
            if x as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Euclidean distance from every cell to the nearest cell of opposite
/// membership: inside cells measure to the complement, outside cells to the
/// mask. A uniform mask has no interface and yields `+inf` everywhere unless
/// `image_border_is_boundary` is set, in which case the raster edge acts as
/// an opposite region for both sides.
pub fn distance_to_opposite(mask: &Array2<bool>, image_border_is_boundary: bool) -> Array2<f64> {
    let (h, w) = mask.dim();
    let inverted = mask.mapv(|v| !v);
    let to_true = squared_edt(mask);
    let to_false = squared_edt(&inverted);

    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut d2 = if mask[(y, x)] {
                to_false[(y, x)]
            } else {
                to_true[(y, x)]
            };
            if image_border_is_boundary {
                d2 = d2.min(border_sq(y, x, h, w));
            }
            out[(y, x)] = if d2 == INF_SQ {
                f64::INFINITY
            } else {
                (d2 as f64).sqrt()
            };
        }
    }
    out
}

/// Squared distance from cell (y, x) to the nearest cell just outside the
/// raster, treating the frame as a one-cell-away virtual region.
pub(crate) fn border_sq(y: usize, x: usize, h: usize, w: usize) -> u64 {
    let b = (y + 1).min(h - y).min(x + 1).min(w - x) as u64;
    b * b
}
