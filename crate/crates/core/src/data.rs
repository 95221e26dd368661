//! Dataset ingestion for ISTD-layout triplets plus a seeded synthetic
//! shadow-triplet generator with exact ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    load_mask_png, load_png, save_mask_png, save_png, BinaryMask, ColorSpace, PlanarImage, Raster,
    ResizeMode, ValueRange,
};
use crate::rng::{self, STREAM_SYNTH};

/// One aligned (shadow image, shadow mask, shadow-free image) sample.
#[derive(Debug, Clone)]
pub struct TripletRecord {
    pub id: String,
    pub shadow: PlanarImage,
    pub mask: BinaryMask,
    pub free: PlanarImage,
}

impl TripletRecord {
    pub fn new(id: String, shadow: PlanarImage, mask: BinaryMask, free: PlanarImage) -> Result<Self> {
        let dims = (shadow.height(), shadow.width());
        if (free.height(), free.width()) != dims || (mask.height(), mask.width()) != dims {
            return Err(Error::ShapeMismatch(format!(
                "triplet '{id}': shadow {dims:?}, free ({},{}), mask ({},{})",
                free.height(),
                free.width(),
                mask.height(),
                mask.width()
            )));
        }
        for (name, img) in [("shadow", &shadow), ("free", &free)] {
            if img.color() != ColorSpace::Rgb || img.range() != ValueRange::Unit {
                return Err(Error::Config(format!("triplet '{id}': {name} must be unit-range RGB")));
            }
        }
        Ok(Self { id, shadow, mask, free })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Gradient,
    ValueNoise,
    Rectangles,
    /// Rotate through the three textures by record index.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    /// 3–8 vertices around a random center.
    Polygon,
    /// Alternate ellipse / polygon by record index.
    Mixed,
}

/// Parameters of the synthetic generator. Shadows are multiplicative: the
/// shadow image equals the free image scaled by the attenuation factor inside
/// the shadow region. The stored mask is the hard region; feathering softens
/// the attenuation only outward from it, so every masked pixel keeps the full
/// factor and ground truth stays exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub texture: TextureKind,
    pub shape: ShapeKind,
    /// Inclusive multiplicative range drawn per record; values in (0, 1].
    pub attenuation: (f64, f64),
    /// Inclusive feather-radius range in pixels, drawn per record.
    pub feather: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            texture: TextureKind::Mixed,
            shape: ShapeKind::Mixed,
            attenuation: (0.3, 0.7),
            feather: (0, 2),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("synthetic image_size must be at least 8".into()));
        }
        let (lo, hi) = self.attenuation;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("attenuation range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.feather.0 > self.feather.1 {
            return Err(Error::Config("feather range is inverted".into()));
        }
        Ok(())
    }
}

// Shadow regions outside this area fraction are rejected and resampled.
const MIN_AREA_FRAC: f64 = 0.04;
const MAX_AREA_FRAC: f64 = 0.60;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn rand_color(rng: &mut ChaCha20Rng) -> [f64; 3] {
    [(); 3].map(|_| rng.gen_range(0.15..0.95))
}

fn texture_gradient(rng: &mut ChaCha20Rng, n: usize) -> Raster {
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut out = Raster::zeros(3, n, n);
    let scale = ((n - 1) as f64 * (dx.abs() + dy.abs())).max(1.0);
    for y in 0..n {
        for x in 0..n {
            let proj = x as f64 * dx + y as f64 * dy;
            let t = ((proj + scale) / (2.0 * scale)).clamp(0.0, 1.0);
            for c in 0..3 {
                out.set(c, y, x, lerp(c0[c], c1[c], t));
            }
        }
    }
    out
}

fn texture_value_noise(rng: &mut ChaCha20Rng, n: usize) -> Raster {
    let cells = 4usize;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let mut out = Raster::zeros(3, n, n);
    for y in 0..n {
        for x in 0..n {
            // bilinear interpolation on the coarse lattice
            let fy = y as f64 / n as f64 * cells as f64;
            let fx = x as f64 / n as f64 * cells as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
            let top = lerp(at(iy, ix), at(iy, ix + 1), tx);
            let bot = lerp(at(iy + 1, ix), at(iy + 1, ix + 1), tx);
            let v = lerp(top, bot, ty);
            for c in 0..3 {
                out.set(c, y, x, lerp(c0[c], c1[c], v));
            }
        }
    }
    out
}

fn texture_rectangles(rng: &mut ChaCha20Rng, n: usize) -> Raster {
    let bg = rand_color(rng);
    let mut out = Raster::zeros(3, n, n);
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                out.set(c, y, x, bg[c]);
            }
        }
    }
    for _ in 0..6 {
        let col = rand_color(rng);
        let h = rng.gen_range(n / 8..=n / 2);
        let w = rng.gen_range(n / 8..=n / 2);
        let top = rng.gen_range(0..n - h);
        let left = rng.gen_range(0..n - w);
        for c in 0..3 {
            for y in top..top + h {
                for x in left..left + w {
                    out.set(c, y, x, col[c]);
                }
            }
        }
    }
    out
}

fn shape_ellipse(rng: &mut ChaCha20Rng, n: usize) -> Raster {
    let nf = n as f64;
    let cy = rng.gen_range(0.25 * nf..0.75 * nf);
    let cx = rng.gen_range(0.25 * nf..0.75 * nf);
    let a = rng.gen_range(0.15 * nf..0.35 * nf);
    let b = rng.gen_range(0.15 * nf..0.35 * nf);
    let theta = rng.gen_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut m = Raster::zeros(1, n, n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * ct + dy * st;
            let v = -dx * st + dy * ct;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                m.set(0, y, x, 1.0);
            }
        }
    }
    m
}

fn shape_polygon(rng: &mut ChaCha20Rng, n: usize) -> Raster {
    let nf = n as f64;
    let verts = rng.gen_range(3..=8usize);
    let cy = rng.gen_range(0.3 * nf..0.7 * nf);
    let cx = rng.gen_range(0.3 * nf..0.7 * nf);
    let pts: Vec<(f64, f64)> = (0..verts)
        .map(|i| {
            let base = i as f64 / verts as f64 * 2.0 * PI;
            let ang = base + rng.gen_range(-0.3..0.3) * 2.0 * PI / verts as f64;
            let r = rng.gen_range(0.15 * nf..0.40 * nf);
            (cx + r * ang.cos(), cy + r * ang.sin())
        })
        .collect();
    let mut m = Raster::zeros(1, n, n);
    for y in 0..n {
        for x in 0..n {
            if point_in_polygon(x as f64, y as f64, &pts) {
                m.set(0, y, x, 1.0);
            }
        }
    }
    m
}

fn point_in_polygon(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > py) != (yj > py) {
            let x_cross = xj + (py - yj) / (yi - yj) * (xi - xj);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Single-pass box blur of a one-channel plane with zero padding.
fn box_blur(src: &Raster, radius: usize) -> Raster {
    if radius == 0 {
        return src.clone();
    }
    let (_, h, w) = src.shape();
    let k = (2 * radius + 1) as f64;
    let mut out = Raster::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += src.get(0, yy as usize, xx as usize);
                    }
                }
            }
            out.set(0, y, x, s / (k * k));
        }
    }
    out
}

// Per-record stream id; record 0 reuses STREAM_SYNTH itself, later records get
// ids far above the small global stream constants.
fn record_rng(seed: u64, index: usize) -> ChaCha20Rng {
    rng::stream(seed, STREAM_SYNTH | ((index as u64) << 8))
}

fn draw_region(rng: &mut ChaCha20Rng, shape: ShapeKind, index: usize, n: usize) -> Result<Raster> {
    let kind = match shape {
        ShapeKind::Mixed => {
            if index % 2 == 0 {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Polygon
            }
        }
        k => k,
    };
    for _ in 0..1000 {
        let m = match kind {
            ShapeKind::Ellipse => shape_ellipse(rng, n),
            ShapeKind::Polygon => shape_polygon(rng, n),
            ShapeKind::Mixed => unreachable!(),
        };
        let frac = m.data().iter().sum::<f64>() / (n * n) as f64;
        if (MIN_AREA_FRAC..=MAX_AREA_FRAC).contains(&frac) {
            return Ok(m);
        }
    }
    Err(Error::Internal("shadow region sampling failed 1000 times".into()))
}

/// Generate `n` seeded triplets. Record `i` depends only on (seed, i), so any
/// prefix of a larger dataset is reproducible.
pub fn gen_synthetic(n: usize, spec: &SyntheticSpec) -> Result<Vec<TripletRecord>> {
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    spec.validate()?;
    let size = spec.image_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = record_rng(spec.seed, i);
        // Draw order: texture, shadow region, attenuation, feather.
        let tex_kind = match spec.texture {
            TextureKind::Mixed => {
                [TextureKind::Gradient, TextureKind::ValueNoise, TextureKind::Rectangles][i % 3]
            }
            k => k,
        };
        let free_raster = match tex_kind {
            TextureKind::Gradient => texture_gradient(&mut r, size),
            TextureKind::ValueNoise => texture_value_noise(&mut r, size),
            TextureKind::Rectangles => texture_rectangles(&mut r, size),
            TextureKind::Mixed => unreachable!(),
        };
        let region = draw_region(&mut r, spec.shape, i, size)?;
        let factor = if spec.attenuation.0 == spec.attenuation.1 {
            spec.attenuation.0
        } else {
            r.gen_range(spec.attenuation.0..=spec.attenuation.1)
        };
        let radius = if spec.feather.0 == spec.feather.1 {
            spec.feather.0
        } else {
            r.gen_range(spec.feather.0..=spec.feather.1)
        };
        // Feather only outward: inside the region alpha stays exactly 1.
        let blurred = box_blur(&region, radius);
        let alpha = blurred.zip_map(&region, f64::max)?;
        let shadow_raster = Raster::from_vec(
            (0..3)
                .flat_map(|c| {
                    free_raster
                        .channel(c)
                        .iter()
                        .zip(alpha.data())
                        .map(|(&v, &a)| v * (1.0 - (1.0 - factor) * a))
                        .collect::<Vec<f64>>()
                })
                .collect(),
            3,
            size,
            size,
        )?;
        out.push(TripletRecord::new(
            format!("synth_{i:05}"),
            PlanarImage::new(shadow_raster, ColorSpace::Rgb, ValueRange::Unit)?,
            BinaryMask::new(region)?,
            PlanarImage::new(free_raster, ColorSpace::Rgb, ValueRange::Unit)?,
        )?);
    }
    Ok(out)
}

const SUBDIRS: [&str; 3] = ["shadow", "mask", "free"];

/// Write records as PNGs under `dir/{shadow,mask,free}/<id>.png`.
pub fn write_triplet_dir(dir: &Path, records: &[TripletRecord]) -> Result<()> {
    for sub in SUBDIRS {
        std::fs::create_dir_all(dir.join(sub))
            .map_err(|e| Error::Io { path: dir.join(sub), source: e })?;
    }
    for rec in records {
        let name = format!("{}.png", rec.id);
        save_png(&rec.shadow, &dir.join("shadow").join(&name))?;
        save_mask_png(&rec.mask, &dir.join("mask").join(&name))?;
        save_png(&rec.free, &dir.join("free").join(&name))?;
    }
    Ok(())
}

pub(crate) fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: dir.into(), source: e })?.path();
        if path.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("unreadable filename in {}", dir.display())))?;
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn pair_dirs(shadow_dir: &Path, mask_dir: &Path, free_dir: &Path) -> Result<Vec<(String, [PathBuf; 3])>> {
    let shadow = list_pngs(shadow_dir)?;
    let mask = list_pngs(mask_dir)?;
    let free = list_pngs(free_dir)?;
    if shadow.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", shadow_dir.display())));
    }
    let mut out = Vec::with_capacity(shadow.len());
    for (id, spath) in &shadow {
        let mpath = mask
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("'{id}' has no mask in {}", mask_dir.display())))?;
        let fpath = free
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("'{id}' has no shadow-free image in {}", free_dir.display())))?;
        out.push((id.clone(), [spath.clone(), mpath.clone(), fpath.clone()]));
    }
    for id in mask.keys() {
        if !shadow.contains_key(id) {
            return Err(Error::Dataset(format!("orphaned mask '{id}' in {}", mask_dir.display())));
        }
    }
    for id in free.keys() {
        if !shadow.contains_key(id) {
            return Err(Error::Dataset(format!("orphaned shadow-free image '{id}' in {}", free_dir.display())));
        }
    }
    Ok(out)
}

/// Lazy triplet loader. Pairing errors surface at construction; pixel data is
/// read (and optionally resized) per record during iteration.
pub struct TripletIter {
    entries: std::vec::IntoIter<(String, [PathBuf; 3])>,
    resize_to: Option<usize>,
}

impl TripletIter {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == 0
    }
}

impl Iterator for TripletIter {
    type Item = Result<TripletRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let (id, [spath, mpath, fpath]) = self.entries.next()?;
        Some((|| {
            let mut shadow = load_png(&spath)?;
            let mut mask = load_mask_png(&mpath)?;
            let mut free = load_png(&fpath)?;
            if let Some(n) = self.resize_to {
                shadow = shadow.resize(n, n, ResizeMode::Bilinear)?;
                free = free.resize(n, n, ResizeMode::Bilinear)?;
                mask = mask.resize(n, n, ResizeMode::Nearest)?;
            }
            TripletRecord::new(id, shadow, mask, free)
        })())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Load an ISTD-layout dataset (`<split>_A` shadow, `<split>_B` mask,
/// `<split>_C` shadow-free — either directly under `root` or under
/// `root/<split>`), resized to 256×256 in sorted filename order.
pub fn load_istd(root: &Path, split: Split) -> Result<TripletIter> {
    let p = split.prefix();
    let bases = [root.to_path_buf(), root.join(p)];
    let base = bases
        .iter()
        .find(|b| b.join(format!("{p}_A")).is_dir())
        .ok_or_else(|| {
            Error::Dataset(format!(
                "no '{p}_A' directory under {} or {}",
                bases[0].display(),
                bases[1].display()
            ))
        })?;
    let entries = pair_dirs(
        &base.join(format!("{p}_A")),
        &base.join(format!("{p}_B")),
        &base.join(format!("{p}_C")),
    )?;
    Ok(TripletIter { entries: entries.into_iter(), resize_to: Some(256) })
}

/// Load a `{shadow,mask,free}` triplet directory (as written by
/// [`write_triplet_dir`]) at native resolution, sorted by filename.
pub fn load_triplet_dir(dir: &Path) -> Result<TripletIter> {
    let entries = pair_dirs(&dir.join("shadow"), &dir.join("mask"), &dir.join("free"))?;
    Ok(TripletIter { entries: entries.into_iter(), resize_to: None })
}

/// Eagerly load and collect a triplet directory.
pub fn read_triplet_dir(dir: &Path) -> Result<Vec<TripletRecord>> {
    load_triplet_dir(dir)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn masked_mean(img: &PlanarImage, mask: &BinaryMask) -> f64 {
        let (c, h, w) = img.raster().shape();
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                if mask.raster().get(0, y, x) == 1.0 {
                    for ch in 0..c {
                        sum += img.raster().get(ch, y, x);
                    }
                    count += c;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec { image_size: 32, ..Default::default() };
        let a = gen_synthetic(4, &spec).unwrap();
        let b = gen_synthetic(4, &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.shadow.raster().data(), y.shadow.raster().data());
            assert_eq!(x.mask.raster().data(), y.mask.raster().data());
            assert_eq!(x.free.raster().data(), y.free.raster().data());
        }
    }

    #[test]
    fn generator_prefix_property() {
        let spec = SyntheticSpec { image_size: 32, ..Default::default() };
        let long = gen_synthetic(6, &spec).unwrap();
        let short = gen_synthetic(3, &spec).unwrap();
        for (a, b) in long.iter().take(3).zip(&short) {
            assert_eq!(a.shadow.raster().data(), b.shadow.raster().data());
        }
    }

    #[test]
    fn unit_attenuation_leaves_image_unchanged() {
        let spec = SyntheticSpec { image_size: 32, attenuation: (1.0, 1.0), ..Default::default() };
        for rec in gen_synthetic(3, &spec).unwrap() {
            assert_eq!(rec.shadow.raster().data(), rec.free.raster().data());
            assert_eq!(psnr(&rec.shadow, &rec.free, None).unwrap(), 100.0);
        }
    }

    #[test]
    fn mask_area_within_bounds_and_nonempty() {
        let spec = SyntheticSpec { image_size: 48, ..Default::default() };
        for rec in gen_synthetic(8, &spec).unwrap() {
            let frac = rec.mask.count_shadow() as f64 / (48.0 * 48.0);
            assert!((MIN_AREA_FRAC..=MAX_AREA_FRAC).contains(&frac), "area {frac}");
        }
    }

    #[test]
    fn masked_ratio_matches_attenuation_exactly_without_feather() {
        let spec = SyntheticSpec {
            image_size: 64,
            attenuation: (0.4, 0.4),
            feather: (0, 0),
            ..Default::default()
        };
        for rec in gen_synthetic(4, &spec).unwrap() {
            let ratio = masked_mean(&rec.shadow, &rec.mask) / masked_mean(&rec.free, &rec.mask);
            assert!((ratio - 0.4).abs() < 1e-12, "ratio {ratio}");
        }
    }

    #[test]
    fn masked_ratio_within_tolerance_with_feather() {
        let spec = SyntheticSpec { image_size: 64, ..Default::default() };
        // Outward-only feathering keeps masked pixels fully attenuated, so the
        // ratio sits well inside the 0.02 tolerance for every record.
        for (i, rec) in gen_synthetic(6, &spec).unwrap().into_iter().enumerate() {
            let mut r = record_rng(spec.seed, i);
            let _ = match i % 3 {
                0 => texture_gradient(&mut r, 64),
                1 => texture_value_noise(&mut r, 64),
                _ => texture_rectangles(&mut r, 64),
            };
            let _ = draw_region(&mut r, spec.shape, i, 64).unwrap();
            let factor = r.gen_range(0.3..=0.7);
            let ratio = masked_mean(&rec.shadow, &rec.mask) / masked_mean(&rec.free, &rec.mask);
            assert!((ratio - factor).abs() < 0.02, "record {i}: ratio {ratio} vs {factor}");
        }
    }

    #[test]
    fn psnr_decreases_with_stronger_attenuation() {
        let mut last = f64::INFINITY;
        for a in [0.8, 0.5, 0.3] {
            let spec = SyntheticSpec {
                image_size: 64,
                attenuation: (a, a),
                feather: (0, 0),
                ..Default::default()
            };
            let rec = &gen_synthetic(1, &spec).unwrap()[0];
            let p = psnr(&rec.shadow, &rec.free, None).unwrap();
            assert!(p.is_finite() && p < last, "attenuation {a}: psnr {p}");
            last = p;
        }
    }

    #[test]
    fn feathered_rim_stays_outside_mask() {
        let spec = SyntheticSpec { image_size: 64, feather: (2, 2), ..Default::default() };
        let rec = &gen_synthetic(1, &spec).unwrap()[0];
        // Some pixel outside the mask must be partially attenuated.
        let mut partial = 0;
        for y in 0..64 {
            for x in 0..64 {
                if rec.mask.raster().get(0, y, x) == 0.0 {
                    let f = rec.free.raster().get(0, y, x);
                    let s = rec.shadow.raster().get(0, y, x);
                    if s < f - 1e-9 {
                        partial += 1;
                    }
                }
            }
        }
        assert!(partial > 0, "feather produced no rim outside the mask");
    }

    #[test]
    fn triplet_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { image_size: 32, ..Default::default() };
        let recs = gen_synthetic(3, &spec).unwrap();
        write_triplet_dir(tmp.path(), &recs).unwrap();
        let loaded = read_triplet_dir(tmp.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in recs.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.mask.raster().data(), back.mask.raster().data());
            // PNG quantization to 8 bits
            for (a, b) in orig.shadow.raster().data().iter().zip(back.shadow.raster().data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn load_istd_layout_and_resize() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { image_size: 48, ..Default::default() };
        let recs = gen_synthetic(3, &spec).unwrap();
        for sub in ["train_A", "train_B", "train_C"] {
            std::fs::create_dir_all(tmp.path().join(sub)).unwrap();
        }
        for rec in &recs {
            let name = format!("{}.png", rec.id);
            save_png(&rec.shadow, &tmp.path().join("train_A").join(&name)).unwrap();
            save_mask_png(&rec.mask, &tmp.path().join("train_B").join(&name)).unwrap();
            save_png(&rec.free, &tmp.path().join("train_C").join(&name)).unwrap();
        }
        let iter = load_istd(tmp.path(), Split::Train).unwrap();
        assert_eq!(iter.len(), 3);
        let loaded: Vec<TripletRecord> = iter.map(|r| r.unwrap()).collect();
        let ids: Vec<&str> = loaded.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["synth_00000", "synth_00001", "synth_00002"]);
        for rec in &loaded {
            assert_eq!(rec.shadow.raster().shape(), (3, 256, 256));
            assert_eq!(rec.mask.raster().shape(), (1, 256, 256));
            assert_eq!(rec.free.raster().shape(), (3, 256, 256));
        }
    }

    #[test]
    fn orphaned_mask_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { image_size: 16, ..Default::default() };
        let recs = gen_synthetic(1, &spec).unwrap();
        write_triplet_dir(tmp.path(), &recs).unwrap();
        save_mask_png(&recs[0].mask, &tmp.path().join("mask").join("stray.png")).unwrap();
        let err = load_triplet_dir(tmp.path()).err().expect("stray mask must fail pairing");
        assert!(err.to_string().contains("stray"), "{err}");
    }

    #[test]
    fn empty_dir_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        for sub in SUBDIRS {
            std::fs::create_dir_all(tmp.path().join(sub)).unwrap();
        }
        assert!(matches!(load_triplet_dir(tmp.path()), Err(Error::Dataset(_))));
    }
}
