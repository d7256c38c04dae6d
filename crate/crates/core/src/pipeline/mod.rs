//! Dataset ingestion, augmentation, and boundary-target attachment.
//!
//! Geometric transforms come first, then boundary targets are generated from
//! the transformed label map. Rescaling a precomputed boundary map would
//! scale its band width along with it; regenerating keeps the width pinned
//! to the configured radius at every training scale.

pub mod png;
mod synth;

pub use synth::{synth_shapes, synth_shapes_with_meta, THIN_BAR_MAX_WIDTH};

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{
    binary_boundaries, semantic_boundaries, BoundaryGenConfig, InstanceMap, LabelMap,
    SemanticBoundaryTensor,
};
use crate::error::{Error, Result};

/// An undecorated dataset record.
#[derive(Debug, Clone)]
pub struct RawSample {
    /// `[3, H, W]` in [0, 1].
    pub image: Array3<f64>,
    pub labels: LabelMap,
    pub instances: Option<InstanceMap>,
}

/// A training-ready record: augmented rasters plus boundary targets
/// generated from the post-transform labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub labels: LabelMap,
    pub instances: Option<InstanceMap>,
    pub boundaries: SemanticBoundaryTensor,
    pub binary_boundary: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Uniform random rescale factor range.
    pub scale_range: [f64; 2],
    /// Training crop (height, width); short sides are padded with ignore.
    pub crop: [usize; 2],
    pub hflip_prob: f64,
    /// Photometric jitter strengths; each distortion applies with
    /// probability 1/2. Values follow the common segmentation recipe and
    /// are freely configurable.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_degrees: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.5, 2.0],
            crop: [512, 1024],
            hflip_prob: 0.5,
            brightness: 0.125,
            contrast: 0.5,
            saturation: 0.5,
            hue_degrees: 18.0,
        }
    }
}

impl AugmentConfig {
    fn check(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale range [{lo}, {hi}]")));
        }
        if self.crop[0] == 0 || self.crop[1] == 0 {
            return Err(Error::Config("crop must be >= 1x1".into()));
        }
        Ok(())
    }

    /// Identity geometry, no jitter; used by evaluation paths.
    pub fn none(crop: [usize; 2]) -> Self {
        Self {
            scale_range: [1.0, 1.0],
            crop,
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue_degrees: 0.0,
        }
    }
}

/// Bilinear resize of a `[C, H, W]` image.
pub fn resize_bilinear_image(image: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    Array3::from_shape_fn((c, oh, ow), |(ci, oy, ox)| {
        let (y0, y1, fy) = ty[oy];
        let (x0, x1, fx) = tx[ox];
        let a = image[(ci, y0, x0)] * (1.0 - fx) + image[(ci, y0, x1)] * fx;
        let b = image[(ci, y1, x0)] * (1.0 - fx) + image[(ci, y1, x1)] * fx;
        a * (1.0 - fy) + b * fy
    })
}

/// Nearest-neighbour resize for integer rasters. Interpolating labels would
/// invent categories, so this is the only resize labels get.
pub fn resize_nearest<T: Copy>(raster: &Array2<T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = raster.dim();
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
        raster[(sy, sx)]
    })
}

fn hflip_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| image[(ci, y, w - 1 - x)])
}

fn hflip_raster<T: Copy>(raster: &Array2<T>) -> Array2<T> {
    let (h, w) = raster.dim();
    Array2::from_shape_fn((h, w), |(y, x)| raster[(y, w - 1 - x)])
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn photometric_jitter(image: &mut Array3<f64>, cfg: &AugmentConfig, rng: &mut ChaCha12Rng) {
    let (_, h, w) = image.dim();
    if cfg.brightness > 0.0 && rng.gen_bool(0.5) {
        let delta = rng.gen_range(-cfg.brightness..cfg.brightness);
        image.mapv_inplace(|v| (v + delta).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 && rng.gen_bool(0.5) {
        let f = rng.gen_range((1.0 - cfg.contrast).max(0.0)..1.0 + cfg.contrast);
        let mean = image.mean().unwrap_or(0.5);
        image.mapv_inplace(|v| (mean + (v - mean) * f).clamp(0.0, 1.0));
    }
    let saturate = cfg.saturation > 0.0 && rng.gen_bool(0.5);
    let sat_f = if saturate {
        rng.gen_range((1.0 - cfg.saturation).max(0.0)..1.0 + cfg.saturation)
    } else {
        1.0
    };
    let shift_hue = cfg.hue_degrees > 0.0 && rng.gen_bool(0.5);
    let hue_d = if shift_hue {
        rng.gen_range(-cfg.hue_degrees..cfg.hue_degrees)
    } else {
        0.0
    };
    if saturate || shift_hue {
        for y in 0..h {
            for x in 0..w {
                let (hh, s, v) = rgb_to_hsv(image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]);
                let (r, g, b) = hsv_to_rgb(hh + hue_d, (s * sat_f).clamp(0.0, 1.0), v);
                image[(0, y, x)] = r.clamp(0.0, 1.0);
                image[(1, y, x)] = g.clamp(0.0, 1.0);
                image[(2, y, x)] = b.clamp(0.0, 1.0);
            }
        }
    }
}

/// Scale, crop (padding with ignore), flip, photometric jitter, then
/// boundary-target generation from the transformed labels.
pub fn augment(
    raw: &RawSample,
    cfg: &AugmentConfig,
    boundary_cfg: &BoundaryGenConfig,
    num_categories: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Sample> {
    cfg.check()?;
    let (_, h, w) = raw.image.dim();
    if raw.labels.data().dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w}"),
            got: format!("{:?}", raw.labels.data().dim()),
        });
    }

    // Scale.
    let [lo, hi] = cfg.scale_range;
    let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let (sh, sw) = (
        ((h as f64 * s).round() as usize).max(1),
        ((w as f64 * s).round() as usize).max(1),
    );
    let image = resize_bilinear_image(&raw.image, sh, sw);
    let labels = resize_nearest(raw.labels.data(), sh, sw);
    let instances = raw
        .instances
        .as_ref()
        .map(|m| resize_nearest(m.data(), sh, sw));

    // Crop with ignore padding; the padded region never contributes
    // boundary pixels or loss.
    let [ch, cw] = cfg.crop;
    let oy = if sh > ch { rng.gen_range(0..=sh - ch) } else { 0 };
    let ox = if sw > cw { rng.gen_range(0..=sw - cw) } else { 0 };
    let mut c_image = Array3::<f64>::zeros((3, ch, cw));
    let mut c_labels = Array2::<i32>::from_elem((ch, cw), boundary_cfg.ignore_index);
    let mut c_inst = instances.as_ref().map(|_| Array2::<u32>::zeros((ch, cw)));
    let copy_h = ch.min(sh - oy);
    let copy_w = cw.min(sw - ox);
    for y in 0..copy_h {
        for x in 0..copy_w {
            for ci in 0..3 {
                c_image[(ci, y, x)] = image[(ci, oy + y, ox + x)];
            }
            c_labels[(y, x)] = labels[(oy + y, ox + x)];
            if let (Some(dst), Some(src)) = (c_inst.as_mut(), instances.as_ref()) {
                dst[(y, x)] = src[(oy + y, ox + x)];
            }
        }
    }

    // Horizontal flip.
    let (mut image, mut labels, mut instances) = (c_image, c_labels, c_inst);
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        image = hflip_image(&image);
        labels = hflip_raster(&labels);
        instances = instances.as_ref().map(hflip_raster);
    }

    photometric_jitter(&mut image, cfg, rng);

    let labels = LabelMap::new(labels)?;
    let instances = instances.map(InstanceMap::new);
    let boundaries = semantic_boundaries(&labels, num_categories, boundary_cfg, instances.as_ref())?;
    let binary_boundary = binary_boundaries(&labels, boundary_cfg)?;
    Ok(Sample {
        image,
        labels,
        instances,
        boundaries,
        binary_boundary,
    })
}

/// Paired `images/` + `labels/` (+ optional `instances/`) PNG directories,
/// keyed by shared file stem. Pairing and shape agreement are validated at
/// load; pixel data is decoded on access.
#[derive(Debug, Clone)]
pub struct DirDataset {
    entries: Vec<DirEntry>,
}

#[derive(Debug, Clone)]
struct DirEntry {
    stem: String,
    image: PathBuf,
    labels: PathBuf,
    instances: Option<PathBuf>,
}

impl DirDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let images_dir = root.join("images");
        let labels_dir = root.join("labels");
        let instances_dir = root.join("instances");
        if !images_dir.is_dir() || !labels_dir.is_dir() {
            return Err(Error::Dataset {
                path: root.to_path_buf(),
                reason: "expected images/ and labels/ subdirectories".into(),
            });
        }
        let mut stems: Vec<(String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(&images_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::UnpairedFile(path.clone()))?
                    .to_string();
                stems.push((stem, path));
            }
        }
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Dataset {
                path: images_dir,
                reason: "no PNG images found".into(),
            });
        }
        let mut entries = Vec::with_capacity(stems.len());
        for (stem, image) in stems {
            let labels = labels_dir.join(format!("{stem}.png"));
            if !labels.is_file() {
                return Err(Error::UnpairedFile(labels));
            }
            let (ih, iw) = png::png_dimensions(&image)?;
            let (lh, lw) = png::png_dimensions(&labels)?;
            if (ih, iw) != (lh, lw) {
                return Err(Error::Dataset {
                    path: labels,
                    reason: format!("label raster {lh}x{lw} does not match image {ih}x{iw}"),
                });
            }
            let instances = instances_dir.join(format!("{stem}.png"));
            let instances = instances.is_file().then_some(instances);
            entries.push(DirEntry {
                stem,
                image,
                labels,
                instances,
            });
        }
        // Loose label PNGs without an image are dataset bugs worth naming.
        for entry in std::fs::read_dir(&labels_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                if !entries.iter().any(|e| e.stem == stem) {
                    return Err(Error::UnpairedFile(path));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_instances(&self) -> bool {
        self.entries.iter().all(|e| e.instances.is_some())
    }

    pub fn stem(&self, index: usize) -> &str {
        &self.entries[index].stem
    }

    pub fn get(&self, index: usize) -> Result<RawSample> {
        let e = &self.entries[index];
        let image = png::read_rgb_png(&e.image)?;
        let labels = LabelMap::new(png::read_label_png(&e.labels)?)?;
        let instances = match &e.instances {
            Some(p) => Some(InstanceMap::new(
                png::read_label_png(p)?.mapv(|v| v as u32),
            )),
            None => None,
        };
        Ok(RawSample {
            image,
            labels,
            instances,
        })
    }
}

/// A dataset the trainer can index: in-memory synthetic samples or a paired
/// directory.
#[derive(Debug, Clone)]
pub enum DataSource {
    Memory(Vec<RawSample>),
    Directory(DirDataset),
}

impl DataSource {
    pub fn len(&self) -> usize {
        match self {
            Self::Memory(v) => v.len(),
            Self::Directory(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<RawSample> {
        match self {
            Self::Memory(v) => Ok(v[index].clone()),
            Self::Directory(d) => d.get(index),
        }
    }

    pub fn has_instances(&self) -> bool {
        match self {
            Self::Memory(v) => v.iter().all(|s| s.instances.is_some()),
            Self::Directory(d) => d.has_instances(),
        }
    }

    pub fn name(&self, index: usize) -> String {
        match self {
            Self::Memory(_) => format!("{index:06}"),
            Self::Directory(d) => d.stem(index).to_string(),
        }
    }
}

/// The per-sample augmentation stream: independent of traversal order and
/// worker count, so parallel materialization is deterministic.
pub fn sample_rng(seed: u64, draw_index: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0xa6_0000_0000 ^ draw_index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_raw(size: usize) -> RawSample {
        let labels = Array2::from_shape_fn((size, size), |(y, x)| {
            if y < size / 2 {
                0
            } else if x < size / 2 {
                1
            } else {
                2
            }
        });
        RawSample {
            image: Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                (c + y + x) as f64 / (size * 2) as f64
            }),
            labels: LabelMap::new(labels).unwrap(),
            instances: None,
        }
    }

    fn bcfg() -> BoundaryGenConfig {
        BoundaryGenConfig {
            radius: 2,
            ..Default::default()
        }
    }

    #[test]
    fn identity_path_keeps_labels() {
        let raw = toy_raw(16);
        let cfg = AugmentConfig::none([16, 16]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let s = augment(&raw, &cfg, &bcfg(), 3, &mut rng).unwrap();
        assert_eq!(s.labels.data(), raw.labels.data());
        assert_eq!(s.image, raw.image);
    }

    #[test]
    fn double_flip_is_identity() {
        let raw = toy_raw(12);
        let flipped = RawSample {
            image: hflip_image(&hflip_image(&raw.image)),
            labels: LabelMap::new(hflip_raster(&hflip_raster(raw.labels.data()))).unwrap(),
            instances: None,
        };
        assert_eq!(flipped.image, raw.image);
        assert_eq!(flipped.labels.data(), raw.labels.data());
    }

    #[test]
    fn boundaries_regenerate_from_transformed_labels() {
        let raw = toy_raw(24);
        let cfg = AugmentConfig {
            scale_range: [0.6, 1.8],
            crop: [20, 20],
            hflip_prob: 0.5,
            ..Default::default()
        };
        for draw in 0..8 {
            let mut rng = sample_rng(7, draw);
            let s = augment(&raw, &cfg, &bcfg(), 3, &mut rng).unwrap();
            let re = semantic_boundaries(&s.labels, 3, &bcfg(), s.instances.as_ref()).unwrap();
            assert_eq!(&re, &s.boundaries, "draw {draw}");
            let rebin = binary_boundaries(&s.labels, &bcfg()).unwrap();
            assert_eq!(rebin, s.binary_boundary);
        }
    }

    #[test]
    fn padded_regions_are_ignore_and_emit_no_boundaries() {
        let raw = toy_raw(8);
        let cfg = AugmentConfig {
            scale_range: [1.0, 1.0],
            crop: [16, 16],
            hflip_prob: 0.0,
            ..AugmentConfig::none([16, 16])
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let s = augment(&raw, &cfg, &bcfg(), 3, &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if y >= 8 || x >= 8 {
                    assert_eq!(s.labels.data()[(y, x)], 255);
                    for c in 0..3 {
                        assert_eq!(s.boundaries.channel(c)[(y, x)], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn scale_then_generate_keeps_band_width() {
        // Rescaling by 2 then generating with radius 2 keeps the band at
        // 2 * radius = 4 pixels, not 8.
        let size = 16;
        let labels = Array2::from_shape_fn((size, size), |(_, x)| (x >= size / 2) as i32);
        let raw = RawSample {
            image: Array3::zeros((3, size, size)),
            labels: LabelMap::new(labels).unwrap(),
            instances: None,
        };
        let cfg = AugmentConfig {
            scale_range: [2.0, 2.0],
            crop: [32, 32],
            ..AugmentConfig::none([32, 32])
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = augment(&raw, &cfg, &bcfg(), 2, &mut rng).unwrap();
        for y in 0..32 {
            let width: usize = (0..32)
                .filter(|&x| s.boundaries.channel(0)[(y, x)] != 0)
                .count();
            assert_eq!(width, 4, "row {y}");
        }
    }

    #[test]
    fn same_stream_same_sample() {
        let raw = toy_raw(24);
        let cfg = AugmentConfig {
            crop: [16, 16],
            ..Default::default()
        };
        let a = augment(&raw, &cfg, &bcfg(), 3, &mut sample_rng(3, 11)).unwrap();
        let b = augment(&raw, &cfg, &bcfg(), 3, &mut sample_rng(3, 11)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels.data(), b.labels.data());
        let c = augment(&raw, &cfg, &bcfg(), 3, &mut sample_rng(3, 12)).unwrap();
        assert!(c.image != a.image || c.labels.data() != a.labels.data());
    }

    #[test]
    fn directory_roundtrip_and_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("labels")).unwrap();
        let raw = toy_raw(8);
        png::write_rgb_png(&root.join("images/a.png"), &raw.image).unwrap();
        png::write_label_png(&root.join("labels/a.png"), raw.labels.data()).unwrap();

        let ds = DirDataset::open(root).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(!ds.has_instances());
        let back = ds.get(0).unwrap();
        assert_eq!(back.labels.data(), raw.labels.data());

        // Unpaired label file.
        png::write_label_png(&root.join("labels/stray.png"), raw.labels.data()).unwrap();
        assert!(matches!(
            DirDataset::open(root),
            Err(Error::UnpairedFile(_))
        ));
        std::fs::remove_file(root.join("labels/stray.png")).unwrap();

        // Corrupt PNG is reported with its path.
        std::fs::write(root.join("images/bad.png"), b"not a png").unwrap();
        std::fs::write(root.join("labels/bad.png"), b"not a png").unwrap();
        let err = DirDataset::open(root);
        assert!(err.is_err(), "corrupt png must fail");
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("bad.png"), "error does not name the file: {msg}");
    }

    #[test]
    fn shape_mismatch_reported_at_open() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("labels")).unwrap();
        let raw = toy_raw(8);
        png::write_rgb_png(&root.join("images/a.png"), &raw.image).unwrap();
        let small = Array2::<i32>::zeros((4, 4));
        png::write_label_png(&root.join("labels/a.png"), &small).unwrap();
        let err = DirDataset::open(root);
        assert!(err.is_err());
        assert!(format!("{}", err.unwrap_err()).contains("does not match"));
    }

    #[test]
    fn pass_through_label_ids() {
        // Label PNGs whose ids are already train ids load unchanged,
        // including the 255 ignore sentinel.
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("labels")).unwrap();
        let mut labels = Array2::<i32>::zeros((8, 8));
        labels[(0, 0)] = 18;
        labels[(1, 1)] = 255;
        png::write_rgb_png(&root.join("images/x.png"), &Array3::zeros((3, 8, 8))).unwrap();
        png::write_label_png(&root.join("labels/x.png"), &labels).unwrap();
        let ds = DirDataset::open(root).unwrap();
        assert_eq!(ds.get(0).unwrap().labels.data(), &labels);
    }
}
