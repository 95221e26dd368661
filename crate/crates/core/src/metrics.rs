//! Evaluation protocol: PSNR and SSIM in RGB and RMSE in LAB, each over the
//! shadow region (S), the non-shadow region (NS), and the whole image (All).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ColorSpace, PlanarImage, Raster, ValueRange};

/// PSNR is capped here for identical images instead of returning infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// The nine Table-style numbers plus the LAB mean-absolute-error variant.
#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub psnr_s: f64,
    pub psnr_ns: f64,
    pub psnr_all: f64,
    pub ssim_s: f64,
    pub ssim_ns: f64,
    pub ssim_all: f64,
    pub rmse_s: f64,
    pub rmse_ns: f64,
    pub rmse_all: f64,
    pub mae_s: f64,
    pub mae_ns: f64,
    pub mae_all: f64,
}

fn check_pair(pred: &PlanarImage, gt: &PlanarImage) -> Result<()> {
    if pred.raster().shape() != gt.raster().shape() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            pred.raster().shape(),
            gt.raster().shape()
        )));
    }
    if pred.range() != ValueRange::Unit || gt.range() != ValueRange::Unit {
        return Err(Error::OutOfRange("metrics expect unit-range images".into()));
    }
    Ok(())
}

fn check_region(img: &PlanarImage, region: Option<&BinaryMask>) -> Result<()> {
    if let Some(m) = region {
        if m.height() != img.height() || m.width() != img.width() {
            return Err(Error::ShapeMismatch("region mask dims differ from images".into()));
        }
    }
    Ok(())
}

/// Mean squared error over the selected pixels (all channels) and the number of
/// selected pixels. `region` selects pixels where the mask is 1; `None` selects
/// every pixel.
pub fn mse(pred: &PlanarImage, gt: &PlanarImage, region: Option<&BinaryMask>) -> Result<(f64, usize)> {
    check_pair(pred, gt)?;
    check_region(pred, region)?;
    let (c, h, w) = pred.raster().shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = region {
                if m.raster().get(0, y, x) != 1.0 {
                    continue;
                }
            }
            count += 1;
            for ch in 0..c {
                let d = pred.raster().get(ch, y, x) - gt.raster().get(ch, y, x);
                sum += d * d;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("no pixels selected for MSE".into()));
    }
    Ok((sum / (count * c) as f64, count))
}

/// 10·log10(1/MSE) in dB over unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &PlanarImage, gt: &PlanarImage, region: Option<&BinaryMask>) -> Result<f64> {
    let (mse, _) = mse(pred, gt, region)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filtering of a single-channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                s += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Local SSIM quality map, averaged over channels. Valid windows only, so the
/// map is (H−10)×(W−10) for the 11×11 window.
pub fn ssim_map(pred: &PlanarImage, gt: &PlanarImage) -> Result<Raster> {
    check_pair(pred, gt)?;
    let (c, h, w) = pred.raster().shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let kernel = gaussian_kernel();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut map = vec![0.0; oh * ow];
    for ch in 0..c {
        let a = pred.raster().channel(ch);
        let b = gt.raster().channel(ch);
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(a, h, w, &kernel);
        let mu_b = filter_valid(b, h, w, &kernel);
        let m_aa = filter_valid(&aa, h, w, &kernel);
        let m_bb = filter_valid(&bb, h, w, &kernel);
        let m_ab = filter_valid(&ab, h, w, &kernel);
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            map[i] += num / den / c as f64;
        }
    }
    Raster::from_vec(map, 1, oh, ow)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), per-channel averaged.
pub fn ssim(pred: &PlanarImage, gt: &PlanarImage) -> Result<f64> {
    let map = ssim_map(pred, gt)?;
    Ok(map.data().iter().sum::<f64>() / map.len() as f64)
}

/// Mean of the local SSIM map over region pixels. The valid-window map is
/// smaller than the image, so the mask is cropped by the same border.
pub fn ssim_region(pred: &PlanarImage, gt: &PlanarImage, region: &BinaryMask) -> Result<f64> {
    check_region(pred, Some(region))?;
    let map = ssim_map(pred, gt)?;
    let border = SSIM_WINDOW / 2;
    let (_, mh, mw) = map.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..mh {
        for x in 0..mw {
            if region.raster().get(0, y + border, x + border) == 1.0 {
                sum += map.get(0, y, x);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("no region pixels inside the SSIM map".into()));
    }
    Ok(sum / count as f64)
}

/// LAB-space errors: the root-mean-square difference over selected pixels and
/// the three channels, and the mean per-pixel LAB Euclidean distance (the
/// variant most shadow-removal comparisons actually report).
#[derive(Debug, Clone, Copy)]
pub struct LabError {
    pub rmse: f64,
    pub mae: f64,
}

pub fn lab_error(pred: &PlanarImage, gt: &PlanarImage, region: Option<&BinaryMask>) -> Result<LabError> {
    check_pair(pred, gt)?;
    check_region(pred, region)?;
    if pred.color() != ColorSpace::Rgb {
        return Err(Error::InvalidColorSpace { expected: "RGB", got: "non-RGB" });
    }
    let pl = pred.rgb_to_lab()?;
    let gl = gt.rgb_to_lab()?;
    let (_, h, w) = pl.raster().shape();
    let mut sq_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = region {
                if m.raster().get(0, y, x) != 1.0 {
                    continue;
                }
            }
            count += 1;
            let mut sq = 0.0;
            for c in 0..3 {
                let d = pl.raster().get(c, y, x) - gl.raster().get(c, y, x);
                sq += d * d;
            }
            sq_sum += sq;
            dist_sum += sq.sqrt();
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("no pixels selected for LAB error".into()));
    }
    Ok(LabError { rmse: (sq_sum / (3 * count) as f64).sqrt(), mae: dist_sum / count as f64 })
}

/// All regional metrics for one prediction. Errors if either region is empty.
pub fn evaluate_pair(
    pred: &PlanarImage,
    gt: &PlanarImage,
    shadow_mask: &BinaryMask,
) -> Result<RegionReport> {
    check_pair(pred, gt)?;
    check_region(pred, Some(shadow_mask))?;
    if shadow_mask.count_shadow() == 0 {
        return Err(Error::EmptyRegion("shadow region is empty (all-zero mask)".into()));
    }
    let non_shadow = shadow_mask.inverted();
    if non_shadow.count_shadow() == 0 {
        return Err(Error::EmptyRegion("non-shadow region is empty (all-one mask)".into()));
    }
    let lab_s = lab_error(pred, gt, Some(shadow_mask))?;
    let lab_ns = lab_error(pred, gt, Some(&non_shadow))?;
    let lab_all = lab_error(pred, gt, None)?;
    Ok(RegionReport {
        psnr_s: psnr(pred, gt, Some(shadow_mask))?,
        psnr_ns: psnr(pred, gt, Some(&non_shadow))?,
        psnr_all: psnr(pred, gt, None)?,
        ssim_s: ssim_region(pred, gt, shadow_mask)?,
        ssim_ns: ssim_region(pred, gt, &non_shadow)?,
        ssim_all: ssim(pred, gt)?,
        rmse_s: lab_s.rmse,
        rmse_ns: lab_ns.rmse,
        rmse_all: lab_all.rmse,
        mae_s: lab_s.mae,
        mae_ns: lab_ns.mae,
        mae_all: lab_all.mae,
    })
}
