//! Morphological skeletonization (Zhang-Suen).

use ndarray::Array2;

/// Thins a binary raster to a one-pixel-wide skeleton. Single-pixel lines
/// are already stable under the transform.
pub fn thin(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut cur = mask.clone();
    let at = |m: &Array2<bool>, y: i64, x: i64| -> bool {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[(y as usize, x as usize)]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !cur[(y, x)] {
                        continue;
                    }
                    let (yi, xi) = (y as i64, x as i64);
                    // Neighbours clockwise from north: p2..p9.
                    let p = [
                        at(&cur, yi - 1, xi),
                        at(&cur, yi - 1, xi + 1),
                        at(&cur, yi, xi + 1),
                        at(&cur, yi + 1, xi + 1),
                        at(&cur, yi + 1, xi),
                        at(&cur, yi + 1, xi - 1),
                        at(&cur, yi, xi - 1),
                        at(&cur, yi - 1, xi - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8)
                        .filter(|&i| !p[i] && p[(i + 1) % 8])
                        .count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            if !remove.is_empty() {
                changed = true;
                for (y, x) in remove {
                    cur[(y, x)] = false;
                }
            }
        }
        if !changed {
            return cur;
        }
    }
}
