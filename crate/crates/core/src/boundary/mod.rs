//! Boundary ground truth generated on the fly from segmentation masks.
//!
//! Semantic boundary targets are regenerated from the label map after every
//! geometric transform, so the band width stays constant in pixels no matter
//! how the sample was rescaled. Boundary membership is exact: a pixel belongs
//! to category `c`'s boundary channel iff some pixel of opposite membership
//! with respect to `c` lies within squared distance `radius²` of it. Ignore
//! pixels belong to neither side and never emit boundary pixels.
//!
//! Generation walks the label interfaces and stamps discs around them instead
//! of scanning every pixel: the nearest opposite pixel of any boundary pixel
//! always lies in the one-pixel interface layer, so stamping from that layer
//! is exhaustive. Cost scales with interface length, not raster area, which
//! keeps full-frame generation cheap enough for the data-loading path.

mod edt;

pub use edt::{distance_to_opposite, squared_edt, INF_SQ};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Integer raster of category ids with an ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<i32>,
}

impl LabelMap {
    pub fn new(data: Array2<i32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: "height and width >= 1".into(),
                got: format!("{h}x{w}"),
            });
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<i32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<i32> {
        &mut self.data
    }

    /// Checks that every value is a category id in `[0, num_categories)` or
    /// the ignore sentinel.
    pub fn validate(&self, num_categories: usize, ignore_index: i32) -> Result<()> {
        for &v in self.data.iter() {
            if v != ignore_index && (v < 0 || v as usize >= num_categories) {
                return Err(Error::Config(format!(
                    "label value {v} outside [0, {num_categories}) and not ignore ({ignore_index})"
                )));
            }
        }
        Ok(())
    }
}

/// Instance id raster paired with a [`LabelMap`]; 0 means "no instance".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    data: Array2<u32>,
}

impl InstanceMap {
    pub fn new(data: Array2<u32>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array2<u32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<u32> {
        &mut self.data
    }
}

/// Controls boundary band width and membership rules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BoundaryGenConfig {
    /// Boundary half-width in pixels; a pixel is boundary when an opposite
    /// pixel sits within this Euclidean distance.
    pub radius: u32,
    /// Treat touching instances of the same category as an interface.
    pub instance_sensitive: bool,
    pub ignore_index: i32,
    /// When set, the raster edge acts as an opposite region for the category
    /// present at the edge (regions are "cut" by the frame). Off by default,
    /// matching Cityscapes-style ground truth where image edges are not
    /// boundaries.
    pub image_border_is_boundary: bool,
}

impl Default for BoundaryGenConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            instance_sensitive: false,
            ignore_index: 255,
            image_border_is_boundary: false,
        }
    }
}

impl BoundaryGenConfig {
    fn check(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config("boundary radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Multi-label binary tensor of category boundaries, `num_categories x H x W`.
/// Channels may overlap: a pixel can be boundary for several categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticBoundaryTensor {
    data: Array3<u8>,
}

impl SemanticBoundaryTensor {
    pub fn new(data: Array3<u8>) -> Self {
        Self { data }
    }

    pub fn num_categories(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn channel(&self, c: usize) -> ndarray::ArrayView2<'_, u8> {
        self.data.index_axis(ndarray::Axis(0), c)
    }

    /// Channel-wise OR across categories.
    pub fn any_channel(&self) -> Array2<u8> {
        let (_, h, w) = self.data.dim();
        let mut out = Array2::<u8>::zeros((h, w));
        for ch in self.data.outer_iter() {
            out.zip_mut_with(&ch, |o, &v| *o |= v);
        }
        out
    }
}

const NEIGHBORS4: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Offsets (dy, dx) with `1 <= dy² + dx² <= radius²`.
fn disc_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dy * dy + dx * dx;
            if d2 >= 1 && d2 <= r2 {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Walks every interface pixel and stamps the disc around it, reporting
/// opposite-membership pairs to `mark(category, y, x)`.
///
/// Membership keys are `(label, instance)` when `instances` is supplied, so
/// same-category instance interfaces are stamped as well. Every mark is sound
/// (the pixel provably has an opposite pixel within the radius) and the sweep
/// is exhaustive because the nearest opposite pixel of any boundary pixel is
/// itself 4-adjacent to a differing key.
fn stamp_interfaces<F: FnMut(i32, usize, usize)>(
    labels: &LabelMap,
    instances: Option<&InstanceMap>,
    cfg: &BoundaryGenConfig,
    mut mark: F,
) {
    let (h, w) = labels.data.dim();
    let data = &labels.data;
    let ignore = cfg.ignore_index;
    let key = |y: usize, x: usize| -> (i32, u32) {
        let inst = instances.map_or(0, |m| m.data[(y, x)]);
        (data[(y, x)], inst)
    };
    let offsets = disc_offsets(cfg.radius);

    for y in 0..h {
        for x in 0..w {
            let a = data[(y, x)];
            if a == ignore {
                continue;
            }
            let ka = key(y, x);
            let mut interface = false;
            for (dy, dx) in NEIGHBORS4 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if data[(ny, nx)] == ignore || key(ny, nx) != ka {
                    interface = true;
                    break;
                }
            }
            if !interface {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let b = data[(ny, nx)];
                if b == ignore {
                    continue;
                }
                if b != a {
                    // Opposite membership in both categories' partitions.
                    mark(a, y, x);
                    mark(a, ny, nx);
                    mark(b, y, x);
                    mark(b, ny, nx);
                } else if key(ny, nx) != ka {
                    // Same category, different instance: interface only in
                    // this category's channel.
                    mark(a, y, x);
                    mark(a, ny, nx);
                }
            }
        }
    }

    if cfg.image_border_is_boundary {
        let r2 = (cfg.radius as u64) * (cfg.radius as u64);
        for y in 0..h {
            for x in 0..w {
                let a = data[(y, x)];
                if a != ignore && edt::border_sq(y, x, h, w) <= r2 {
                    mark(a, y, x);
                }
            }
        }
    }
}

/// Binary boundary map for one category: pixel `p` is 1 iff a pixel of
/// opposite membership w.r.t. `category` lies within `cfg.radius` of it.
/// A category absent from the labels yields an all-zero map.
pub fn category_boundary(
    labels: &LabelMap,
    category: i32,
    cfg: &BoundaryGenConfig,
    instances: Option<&InstanceMap>,
) -> Result<Array2<u8>> {
    cfg.check()?;
    let instances = if cfg.instance_sensitive {
        instances
    } else {
        None
    };
    let mut out = Array2::<u8>::zeros(labels.data.dim());
    stamp_interfaces(labels, instances, cfg, |c, y, x| {
        if c == category {
            out[(y, x)] = 1;
        }
    });
    Ok(out)
}

/// Full semantic boundary tensor: channel `c` equals
/// [`category_boundary`] for category `c`. Pure function of its inputs.
pub fn semantic_boundaries(
    labels: &LabelMap,
    num_categories: usize,
    cfg: &BoundaryGenConfig,
    instances: Option<&InstanceMap>,
) -> Result<SemanticBoundaryTensor> {
    cfg.check()?;
    let instances = if cfg.instance_sensitive {
        instances
    } else {
        None
    };
    let (h, w) = labels.data.dim();
    let mut out = Array3::<u8>::zeros((num_categories, h, w));
    stamp_interfaces(labels, instances, cfg, |c, y, x| {
        if c >= 0 && (c as usize) < num_categories {
            out[(c as usize, y, x)] = 1;
        }
    });
    Ok(SemanticBoundaryTensor::new(out))
}

/// Category-agnostic boundary map: pixel is 1 iff two differing non-ignore
/// labels lie within `cfg.radius` of each other. Equals the channel-wise OR
/// of [`semantic_boundaries`] without instance sensitivity.
pub fn binary_boundaries(labels: &LabelMap, cfg: &BoundaryGenConfig) -> Result<Array2<u8>> {
    cfg.check()?;
    let mut out = Array2::<u8>::zeros(labels.data.dim());
    stamp_interfaces(labels, None, cfg, |_, y, x| {
        out[(y, x)] = 1;
    });
    Ok(out)
}
