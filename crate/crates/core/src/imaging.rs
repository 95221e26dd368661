//! Planar image containers, color conversions, resizing, normalization, and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights, the default for gray conversion.
pub const BT601_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Channel-major (c, y, x) array of f64 samples with no range semantics.
///
/// This is the carrier for unbounded data: noise, diffusion-state images, and
/// accumulators. Range-validated data lives in [`PlanarImage`] / [`BinaryMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(data: Vec<f64>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "raster data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination with another raster of identical shape.
    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "zip_map {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Raster {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Copy of the `h`×`w` window at (`top`, `left`), all channels.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Raster> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {}x{}@({},{}) exceeds {}x{}",
                h, w, top, left, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let start = (c * self.height + top + y) * self.width + left;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Raster { channels: self.channels, height: h, width: w, data })
    }

    /// Stack single-channel-compatible rasters along the channel axis.
    pub fn concat_channels(parts: &[&Raster]) -> Result<Raster> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("empty concat".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::ShapeMismatch("concat_channels spatial mismatch".into()));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Raster { channels, height: h, width: w, data })
    }
}

/// Declared value range of a [`PlanarImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// [0, 1]
    Unit,
    /// [-1, 1], the range diffusion variables live in.
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Gray,
    Lab,
}

/// Interpolation mode for [`PlanarImage::resize`] / [`BinaryMask::resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// A validated image: raster plus colorspace and range tags.
///
/// RGB and GRAY data must lie within the declared range; LAB uses its native
/// ranges and is only checked for finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    raster: Raster,
    range: ValueRange,
    color: ColorSpace,
}

impl PlanarImage {
    pub fn new(raster: Raster, color: ColorSpace, range: ValueRange) -> Result<Self> {
        let expect_channels = match color {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::Lab => 3,
        };
        if raster.channels() != expect_channels {
            return Err(Error::ShapeMismatch(format!(
                "{:?} image must have {} channels, got {}",
                color,
                expect_channels,
                raster.channels()
            )));
        }
        let (lo, hi) = match range {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Diffusion => (-1.0, 1.0),
        };
        for &v in raster.data() {
            if !v.is_finite() {
                return Err(Error::OutOfRange("non-finite image value".into()));
            }
            if color != ColorSpace::Lab && (v < lo || v > hi) {
                return Err(Error::OutOfRange(format!(
                    "value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { raster, color, range })
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    /// Weighted channel sum with the default BT.601 weights.
    pub fn to_gray(&self) -> Result<PlanarImage> {
        self.to_gray_with(BT601_WEIGHTS)
    }

    pub fn to_gray_with(&self, weights: [f64; 3]) -> Result<PlanarImage> {
        if self.color != ColorSpace::Rgb {
            return Err(Error::InvalidColorSpace { expected: "RGB", got: colorspace_name(self.color) });
        }
        let (_, h, w) = self.raster.shape();
        let mut data = Vec::with_capacity(h * w);
        let r = self.raster.channel(0);
        let g = self.raster.channel(1);
        let b = self.raster.channel(2);
        for i in 0..h * w {
            data.push(weights[0] * r[i] + weights[1] * g[i] + weights[2] * b[i]);
        }
        PlanarImage::new(Raster::from_vec(data, 1, h, w)?, ColorSpace::Gray, self.range)
    }

    /// CIE L*a*b* under D65 via sRGB linearization. Requires unit-range RGB.
    pub fn rgb_to_lab(&self) -> Result<PlanarImage> {
        if self.color != ColorSpace::Rgb {
            return Err(Error::InvalidColorSpace { expected: "RGB", got: colorspace_name(self.color) });
        }
        if self.range != ValueRange::Unit {
            return Err(Error::OutOfRange("rgb_to_lab expects unit-range input".into()));
        }
        let (_, h, w) = self.raster.shape();
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        let r = self.raster.channel(0);
        let g = self.raster.channel(1);
        let b = self.raster.channel(2);
        for i in 0..n {
            let (l, a, bb) = rgb_pixel_to_lab(r[i], g[i], b[i]);
            data[i] = l;
            data[n + i] = a;
            data[2 * n + i] = bb;
        }
        PlanarImage::new(Raster::from_vec(data, 3, h, w)?, ColorSpace::Lab, ValueRange::Unit)
    }

    /// Affine map [0,1] → [-1,1].
    pub fn normalize(&self) -> Result<PlanarImage> {
        if self.range != ValueRange::Unit {
            return Err(Error::OutOfRange("normalize expects unit-range input".into()));
        }
        let raster = self.raster.map(|v| 2.0 * v - 1.0);
        PlanarImage::new(raster, self.color, ValueRange::Diffusion)
    }

    /// Inverse of [`normalize`]; clamps into [0,1].
    pub fn denormalize(&self) -> Result<PlanarImage> {
        if self.range != ValueRange::Diffusion {
            return Err(Error::OutOfRange("denormalize expects diffusion-range input".into()));
        }
        let raster = self.raster.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        PlanarImage::new(raster, self.color, ValueRange::Unit)
    }

    /// Build a unit-range image from an unbounded diffusion-state raster, clamping.
    pub fn from_diffusion_raster(raster: &Raster, color: ColorSpace) -> Result<PlanarImage> {
        let clamped = raster.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        PlanarImage::new(clamped, color, ValueRange::Unit)
    }

    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<PlanarImage> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("resize target must be at least 1x1".into()));
        }
        let raster = match mode {
            ResizeMode::Bilinear => resize_bilinear(&self.raster, out_h, out_w),
            ResizeMode::Nearest => resize_nearest(&self.raster, out_h, out_w),
        };
        // Bilinear interpolation is a convex combination, so range tags stay valid.
        PlanarImage::new(raster, self.color, self.range)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<PlanarImage> {
        PlanarImage::new(self.raster.crop(top, left, h, w)?, self.color, self.range)
    }
}

fn colorspace_name(c: ColorSpace) -> &'static str {
    match c {
        ColorSpace::Rgb => "RGB",
        ColorSpace::Gray => "GRAY",
        ColorSpace::Lab => "LAB",
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let (fx, fy, fz) = (lab_f(x / 0.95047), lab_f(y / 1.0), lab_f(z / 1.08883));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Bilinear resampling with half-pixel-centered source coordinates.
pub fn resize_bilinear(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    let (c, h, w) = src.shape();
    let mut out = Raster::zeros(c, out_h, out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = src.get(ch, y0, x0);
                let v01 = src.get(ch, y0, x1);
                let v10 = src.get(ch, y1, x0);
                let v11 = src.get(ch, y1, x1);
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.set(ch, oy, ox, top + (bot - top) * wy);
            }
        }
    }
    out
}

/// Nearest-neighbor resampling (half-pixel centers); copies source samples exactly.
pub fn resize_nearest(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    let (c, h, w) = src.shape();
    let mut out = Raster::zeros(c, out_h, out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        for oy in 0..out_h {
            let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
            for ox in 0..out_w {
                let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                out.set(ch, oy, ox, src.get(ch, y, x));
            }
        }
    }
    out
}

/// Binary shadow mask: 1 = shadow pixel, 0 = non-shadow pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    raster: Raster,
}

impl BinaryMask {
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels() != 1 {
            return Err(Error::ShapeMismatch("mask must be single-channel".into()));
        }
        if raster.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::OutOfRange("mask values must be exactly 0 or 1".into()));
        }
        Ok(Self { raster })
    }

    /// Threshold arbitrary data at 0.5 into an exact binary mask.
    pub fn from_thresholded(raster: &Raster) -> Result<Self> {
        if raster.channels() != 1 {
            return Err(Error::ShapeMismatch("mask must be single-channel".into()));
        }
        Self::new(raster.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    /// Fraction of non-shadow pixels.
    pub fn shadow_free_ratio(&self) -> f64 {
        let n = self.raster.len();
        let shadow: f64 = self.raster.data().iter().sum();
        (n as f64 - shadow) / n as f64
    }

    pub fn count_shadow(&self) -> usize {
        self.raster.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn inverted(&self) -> BinaryMask {
        BinaryMask { raster: self.raster.map(|v| 1.0 - v) }
    }

    /// Nearest-neighbor only; bilinear would break the binary invariant.
    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<BinaryMask> {
        if mode == ResizeMode::Bilinear {
            return Err(Error::Config("bilinear resize would break the binary mask invariant".into()));
        }
        // Nearest copies samples; re-threshold defensively anyway.
        BinaryMask::from_thresholded(&resize_nearest(&self.raster, out_h, out_w))
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<BinaryMask> {
        Ok(BinaryMask { raster: self.raster.crop(top, left, h, w)? })
    }
}

/// Load an 8-bit RGB or grayscale PNG into a unit-range image.
pub fn load_png(path: &Path) -> Result<PlanarImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?
        .decode()
        .map_err(|e| Error::Png { path: path.into(), msg: e.to_string() })?;
    let (raster, color) = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            (Raster::from_vec(data, 1, h, w)?, ColorSpace::Gray)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let n = h * w;
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = raw[3 * i + c] as f64 / 255.0;
                }
            }
            (Raster::from_vec(data, 3, h, w)?, ColorSpace::Rgb)
        }
        other => {
            return Err(Error::Png {
                path: path.into(),
                msg: format!("unsupported pixel format {:?}; expected 8-bit RGB or grayscale", other.color()),
            })
        }
    };
    PlanarImage::new(raster, color, ValueRange::Unit)
}

/// Save a unit-range RGB or gray image as an 8-bit PNG (round-to-nearest).
pub fn save_png(img: &PlanarImage, path: &Path) -> Result<()> {
    if img.range() != ValueRange::Unit {
        return Err(Error::OutOfRange("save_png expects unit-range data".into()));
    }
    let (c, h, w) = img.raster().shape();
    let n = h * w;
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match c {
        1 => {
            let buf: Vec<u8> = img.raster().data().iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size checked")
                .save(path)
        }
        3 => {
            let mut buf = vec![0u8; 3 * n];
            for i in 0..n {
                for ch in 0..3 {
                    buf[3 * i + ch] = to_u8(img.raster().data()[ch * n + i]);
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size checked")
                .save(path)
        }
        _ => return Err(Error::ShapeMismatch("save_png supports 1 or 3 channels".into())),
    };
    result.map_err(|e| Error::Png { path: path.into(), msg: e.to_string() })
}

/// Load a mask PNG: any pixel value > 127 counts as shadow.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = load_png(path)?;
    let gray = match img.color() {
        ColorSpace::Gray => img,
        ColorSpace::Rgb => img.to_gray()?,
        ColorSpace::Lab => unreachable!("load_png never produces LAB"),
    };
    BinaryMask::new(gray.raster().map(|v| if v > 127.0 / 255.0 { 1.0 } else { 0.0 }))
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = PlanarImage::new(mask.raster().clone(), ColorSpace::Gray, ValueRange::Unit)?;
    save_png(&img, path)
}
