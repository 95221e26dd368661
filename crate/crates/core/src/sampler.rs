//! Global-guided sampling: per-patch brightness and mask scores, score-weighted
//! noise fusion over the overlapping patch grid, and the full restoration loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_grid, crop, scatter_add, PatchGrid, PatchLocation};
use crate::imaging::{BinaryMask, ColorSpace, PlanarImage, Raster, ResizeMode};
use crate::nets::{rasters_to_tensor, tensor_to_rasters, GlobalOut, ModelPair};
use crate::rng::{self, normal_vec, STREAM_SAMPLER};
use crate::schedule::{ddim_step, NoiseSchedule, TimestepPlan};

/// Floor applied to mask-only weights during restoration so a fully shadowed
/// neighbourhood (every covering patch scoring zero) still fuses to something
/// instead of tripping the zero-coverage check.
const MASK_ONLY_WEIGHT_FLOOR: f64 = 1e-8;

/// Patch batch size for the network-backed noise model. Inference tensors
/// keep their whole op graph alive until dropped, so peak memory scales with
/// chunk size; 8 keeps a 32-pixel-patch forward under ~1 GB.
const ESTIMATE_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Patch side length.
    pub r_patch: usize,
    /// Stride between neighbouring patch origins.
    pub r_step: usize,
    /// Number of implicit sampling steps.
    pub s_steps: usize,
    /// Shadow-free ratio above which a patch scores full mask confidence.
    pub t_sf: f64,
    /// Stabilizer in the brightness-score denominator.
    pub eps_bri: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { r_patch: 64, r_step: 8, s_steps: 25, t_sf: 0.5, eps_bri: 0.01, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_patch == 0 || self.r_step == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        if self.r_step > self.r_patch {
            return Err(Error::Config(format!(
                "stride {} exceeds patch size {}; the grid would leave uncovered pixels",
                self.r_step, self.r_patch
            )));
        }
        if self.s_steps == 0 {
            return Err(Error::Config("need at least one sampling step".into()));
        }
        if !(self.t_sf > 0.0 && self.t_sf <= 1.0) {
            return Err(Error::Config(format!("t_sf must be in (0, 1], got {}", self.t_sf)));
        }
        if !(self.eps_bri > 0.0) {
            return Err(Error::Config(format!("eps_bri must be positive, got {}", self.eps_bri)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    /// t-interpolated blend of brightness and mask scores.
    Gss,
    /// Plain overlapping-patch mean.
    Uniform,
    /// Brightness score alone.
    BriOnly,
    /// Mask score alone.
    MaskOnly,
}

impl std::str::FromStr for WeightPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gss" => Ok(Self::Gss),
            "uniform" => Ok(Self::Uniform),
            "bri-only" => Ok(Self::BriOnly),
            "mask-only" => Ok(Self::MaskOnly),
            other => Err(Error::Config(format!(
                "unknown weight policy '{other}' (expected gss, uniform, bri-only, or mask-only)"
            ))),
        }
    }
}

impl std::fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Gss => "gss",
            Self::Uniform => "uniform",
            Self::BriOnly => "bri-only",
            Self::MaskOnly => "mask-only",
        };
        f.write_str(s)
    }
}

/// Per-patch, per-step scoring trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScoreRecord {
    pub t: usize,
    pub patch: usize,
    pub top: usize,
    pub left: usize,
    pub s_bri: f64,
    pub s_m: f64,
    pub weight: f64,
}

/// Invert the forward process: x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t. The estimate is
/// returned unclamped; score computation clamps when it denormalizes.
pub fn estimate_x0(x_t: &Raster, eps_hat: &Raster, t: usize, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)
}

/// Brightness consistency between the local reconstruction and the global
/// reference: 1 − avg|L−G| / (max|L−G| + eps_bri), both grays in unit range.
pub fn s_bri(local_gray: &Raster, global_gray: &Raster, eps_bri: f64) -> Result<f64> {
    if local_gray.shape() != global_gray.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gray rasters differ: {:?} vs {:?}",
            local_gray.shape(),
            global_gray.shape()
        )));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (l, g) in local_gray.data().iter().zip(global_gray.data()) {
        let d = (l - g).abs();
        sum += d;
        if d > max {
            max = d;
        }
    }
    let avg = sum / local_gray.len() as f64;
    Ok(1.0 - avg / (max + eps_bri))
}

/// Mask confidence from the shadow-free pixel ratio: 1 once the ratio reaches
/// t_sf (inclusive), proportional below it. Mask values re-threshold at 0.5.
pub fn s_mask(mask_patch: &Raster, t_sf: f64) -> f64 {
    let free = mask_patch.data().iter().filter(|&&v| v < 0.5).count();
    let r_sf = free as f64 / mask_patch.len() as f64;
    if r_sf >= t_sf {
        1.0
    } else {
        r_sf / t_sf
    }
}

/// Time-interpolated patch weight: (t·s_bri + (T−t)·s_m)/T. The degenerate
/// cases route through algebraically exact shortcuts so the documented
/// identities (t = T ⇒ s_bri; equal scores ⇒ that score) hold bitwise.
pub fn patch_weight(t: usize, t_max: usize, s_bri: f64, s_m: f64) -> f64 {
    if s_bri == s_m || t == t_max {
        return s_bri;
    }
    if t == 0 {
        return s_m;
    }
    let tf = t as f64;
    let tm = t_max as f64;
    (tf * s_bri + (tm - tf) * s_m) / tm
}

/// Accumulators for weighted noise fusion over the patch grid.
pub struct FusionBuffers {
    /// Weighted noise sums, (3, H, W).
    pub omega_hat: Raster,
    /// Per-pixel weight sums, (1, H, W).
    pub weight_acc: Raster,
}

impl FusionBuffers {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        Self { omega_hat: Raster::zeros(channels, h, w), weight_acc: Raster::zeros(1, h, w) }
    }

    pub fn add(&mut self, noise: &Raster, weight: f64, loc: &PatchLocation) -> Result<()> {
        scatter_add(&mut self.omega_hat, &mut self.weight_acc, noise, loc, weight)
    }

    /// Divide the accumulated noise by the accumulated weights. Every pixel
    /// must have been covered with positive total weight.
    pub fn normalize(self) -> Result<Raster> {
        let (c, h, w) = self.omega_hat.shape();
        let mut out = Raster::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                let wa = self.weight_acc.get(0, y, x);
                if !(wa > 0.0) {
                    return Err(Error::Internal(format!(
                        "pixel ({y},{x}) accumulated weight {wa}; the patch grid or weights left it uncovered"
                    )));
                }
                for ch in 0..c {
                    out.set(ch, y, x, self.omega_hat.get(ch, y, x) / wa);
                }
            }
        }
        Ok(out)
    }
}

/// Fuse per-patch noise estimates into a full-image field:
/// per pixel, (Σ_d W^d·ε_d) / (Σ_d W^d) over the covering patches.
pub fn fuse_noise(patch_noises: &[Raster], weights: &[f64], grid: &PatchGrid) -> Result<Raster> {
    if patch_noises.len() != weights.len() || patch_noises.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} noises, {} weights, {} grid locations",
            patch_noises.len(),
            weights.len(),
            grid.len()
        )));
    }
    if patch_noises.is_empty() {
        return Err(Error::ShapeMismatch("cannot fuse an empty patch set".into()));
    }
    for &wt in weights {
        if !(wt.is_finite() && wt >= 0.0) {
            return Err(Error::OutOfRange(format!("patch weight {wt} is not a finite non-negative value")));
        }
    }
    let channels = patch_noises[0].channels();
    let mut buf = FusionBuffers::new(channels, grid.height(), grid.width());
    for ((noise, &wt), loc) in patch_noises.iter().zip(weights).zip(grid.locations()) {
        buf.add(noise, wt, loc)?;
    }
    buf.normalize()
}

/// Per-step denoiser interface. `begin_step` produces the globally restored
/// low-resolution estimate used for brightness scoring (None when the model
/// has no global branch); `estimate` predicts noise for assembled patch
/// inputs (x_t ‖ condition ‖ mask), all in diffusion range.
pub trait NoiseModel {
    fn begin_step(&mut self, t: usize) -> Result<Option<PlanarImage>>;
    fn estimate(&mut self, inputs: &[Raster], locs: &[PatchLocation], t: usize) -> Result<Vec<Raster>>;
}

/// Network-backed noise model: one global pass per timestep whose features
/// feed every patch evaluation at that step.
pub struct NetNoiseModel<'a> {
    pair: &'a ModelPair,
    global_in: candle_core::Tensor,
    cache: Option<(usize, GlobalOut)>,
}

impl<'a> NetNoiseModel<'a> {
    pub fn new(pair: &'a ModelPair, image: &PlanarImage, mask: &BinaryMask) -> Result<Self> {
        let r = pair.cfg().input_size;
        let shadow = image.resize(r, r, ResizeMode::Bilinear)?.normalize()?;
        let mask_r = mask.resize(r, r, ResizeMode::Nearest)?;
        let stacked = Raster::concat_channels(&[shadow.raster(), mask_r.raster()])?;
        let global_in = rasters_to_tensor(&[&stacked], pair.params().dtype())?;
        Ok(Self { pair, global_in, cache: None })
    }
}

impl NoiseModel for NetNoiseModel<'_> {
    fn begin_step(&mut self, t: usize) -> Result<Option<PlanarImage>> {
        let out = self.pair.global_forward(&self.global_in, &[t])?;
        let restored = tensor_to_rasters(&out.x_r)?
            .pop()
            .ok_or_else(|| Error::Internal("global branch returned an empty batch".into()))?;
        self.cache = Some((t, out));
        Ok(Some(PlanarImage::from_diffusion_raster(&restored, ColorSpace::Rgb)?))
    }

    fn estimate(&mut self, inputs: &[Raster], _locs: &[PatchLocation], t: usize) -> Result<Vec<Raster>> {
        let (cached_t, global) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Internal("estimate called before begin_step".into()))?;
        if *cached_t != t {
            return Err(Error::Internal(format!("estimate at t={t} but global features cached for t={cached_t}")));
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(ESTIMATE_CHUNK) {
            let refs: Vec<&Raster> = chunk.iter().collect();
            let x = rasters_to_tensor(&refs, self.pair.params().dtype())?;
            let ts = vec![t; chunk.len()];
            let eps = self.pair.local_forward(&x, global, &ts)?;
            out.extend(tensor_to_rasters(&eps)?);
        }
        Ok(out)
    }
}

/// Analytic denoiser that knows the clean target: ε = (x_t − √ᾱ_t·x0)/√(1−ᾱ_t).
/// Exercises the sampling loop without a trained network.
pub struct OracleDenoiser {
    clean: Raster,
    guidance: PlanarImage,
    sched: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(clean: &PlanarImage, r_patch: usize, sched: &NoiseSchedule) -> Result<Self> {
        Ok(Self {
            clean: clean.normalize()?.raster().clone(),
            guidance: clean.resize(r_patch, r_patch, ResizeMode::Bilinear)?,
            sched: sched.clone(),
        })
    }
}

impl NoiseModel for OracleDenoiser {
    fn begin_step(&mut self, _t: usize) -> Result<Option<PlanarImage>> {
        Ok(Some(self.guidance.clone()))
    }

    fn estimate(&mut self, inputs: &[Raster], locs: &[PatchLocation], t: usize) -> Result<Vec<Raster>> {
        if inputs.len() != locs.len() {
            return Err(Error::ShapeMismatch(format!("{} inputs, {} locations", inputs.len(), locs.len())));
        }
        self.sched.check_t(t)?;
        let ab = self.sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Vec::with_capacity(inputs.len());
        for (input, loc) in inputs.iter().zip(locs) {
            let (c, ph, pw) = input.shape();
            if c < 3 {
                return Err(Error::ShapeMismatch(format!("patch input has {c} channels, need at least 3")));
            }
            let mut eps = Raster::zeros(3, ph, pw);
            for ch in 0..3 {
                for y in 0..ph {
                    for x in 0..pw {
                        let xt = input.get(ch, y, x);
                        let x0 = self.clean.get(ch, loc.top + y, loc.left + x);
                        eps.set(ch, y, x, (xt - sa * x0) / sb);
                    }
                }
            }
            out.push(eps);
        }
        Ok(out)
    }
}

/// A finished restoration with its per-step, per-patch scoring trace.
pub struct Restoration {
    pub image: PlanarImage,
    pub scores: Vec<ScoreRecord>,
}

/// Full sampling loop: draw x_T, then for each plan pair refresh the global
/// reference, score and weight every patch's noise estimate, fuse, and take
/// one implicit step. Returns the denormalized result.
pub fn restore(
    image: &PlanarImage,
    mask: &BinaryMask,
    model: &mut dyn NoiseModel,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    cfg: &SamplerConfig,
    policy: WeightPolicy,
) -> Result<Restoration> {
    cfg.validate()?;
    let (c, h, w) = image.raster().shape();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected an RGB image, got {c} channels")));
    }
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{} but the image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if h < cfg.r_patch || w < cfg.r_patch {
        return Err(Error::Config(format!(
            "image is {h}x{w} but patches are {0}x{0}; pad the input to at least {0} pixels per side",
            cfg.r_patch
        )));
    }
    if plan.is_empty() {
        return Err(Error::Config("sampling plan is empty".into()));
    }
    if plan.first_t() > sched.t_max() {
        return Err(Error::Config(format!(
            "plan starts at t={} beyond the schedule's maximum {}",
            plan.first_t(),
            sched.t_max()
        )));
    }

    let r = cfg.r_patch;
    let grid = build_grid(h, w, r, cfg.r_step)?;
    let cond = image.normalize()?.raster().clone();
    let mut cond_patches = Vec::with_capacity(grid.len());
    let mut mask_patches = Vec::with_capacity(grid.len());
    let mut mask_scores = Vec::with_capacity(grid.len());
    for loc in grid.locations() {
        let m = crop(mask.raster(), loc)?;
        mask_scores.push(s_mask(&m, cfg.t_sf));
        mask_patches.push(m);
        cond_patches.push(crop(&cond, loc)?);
    }

    let mut rng = rng::stream(cfg.seed, STREAM_SAMPLER);
    let mut x = Raster::from_vec(normal_vec(&mut rng, 3 * h * w), 3, h, w)?;
    let mut scores = Vec::with_capacity(grid.len() * plan.len());

    for &(t, t_next) in plan.pairs() {
        let guidance = model.begin_step(t)?;
        let global_gray = match &guidance {
            Some(g) => Some(g.resize(h, w, ResizeMode::Bilinear)?.to_gray()?.raster().clone()),
            None if policy == WeightPolicy::Uniform => None,
            None => {
                return Err(Error::Config(format!(
                    "weight policy {policy} needs global guidance, but the model provides none"
                )))
            }
        };

        let mut inputs = Vec::with_capacity(grid.len());
        for (d, loc) in grid.locations().iter().enumerate() {
            let x_patch = crop(&x, loc)?;
            inputs.push(Raster::concat_channels(&[&x_patch, &cond_patches[d], &mask_patches[d]])?);
        }
        let eps_hats = model.estimate(&inputs, grid.locations(), t)?;
        if eps_hats.len() != grid.len() {
            return Err(Error::Internal(format!(
                "model returned {} noise estimates for {} patches",
                eps_hats.len(),
                grid.len()
            )));
        }

        let mut weights = Vec::with_capacity(grid.len());
        for (d, loc) in grid.locations().iter().enumerate() {
            if eps_hats[d].shape() != (3, r, r) {
                return Err(Error::ShapeMismatch(format!(
                    "noise estimate {d} has shape {:?}, expected (3, {r}, {r})",
                    eps_hats[d].shape()
                )));
            }
            let sb = match &global_gray {
                Some(gg) => {
                    let x_patch = crop(&x, loc)?;
                    let x0 = estimate_x0(&x_patch, &eps_hats[d], t, sched)?;
                    let local_gray = PlanarImage::from_diffusion_raster(&x0, ColorSpace::Rgb)?.to_gray()?;
                    s_bri(local_gray.raster(), &crop(gg, loc)?, cfg.eps_bri)?
                }
                None => 0.0,
            };
            let sm = mask_scores[d];
            let weight = match policy {
                WeightPolicy::Gss => patch_weight(t, sched.t_max(), sb, sm),
                WeightPolicy::Uniform => 1.0,
                WeightPolicy::BriOnly => sb,
                WeightPolicy::MaskOnly => sm.max(MASK_ONLY_WEIGHT_FLOOR),
            };
            scores.push(ScoreRecord { t, patch: d, top: loc.top, left: loc.left, s_bri: sb, s_m: sm, weight });
            weights.push(weight);
        }

        let fused = fuse_noise(&eps_hats, &weights, &grid)?;
        x = ddim_step(&x, &fused, t, t_next, sched)?;
    }

    Ok(Restoration { image: PlanarImage::from_diffusion_raster(&x, ColorSpace::Rgb)?, scores })
}

/// Restore with a trained model pair, checking that the sampler's patch size
/// matches the network's input size.
pub fn restore_with_pair(
    image: &PlanarImage,
    mask: &BinaryMask,
    pair: &ModelPair,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    cfg: &SamplerConfig,
    policy: WeightPolicy,
) -> Result<Restoration> {
    if cfg.r_patch != pair.cfg().input_size {
        return Err(Error::Config(format!(
            "sampler patch size {} does not match the network input size {}",
            cfg.r_patch,
            pair.cfg().input_size
        )));
    }
    let mut model = NetNoiseModel::new(pair, image, mask)?;
    restore(image, mask, &mut model, sched, plan, cfg, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::imaging::ValueRange;
    use crate::nets::NetworkConfig;
    use crate::schedule::{make_plan, q_sample};
    use rand::Rng;

    fn sched1000() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn rand_raster(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Raster {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Raster::from_vec(data, c, h, w).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = SamplerConfig::default();
        assert_eq!((cfg.r_patch, cfg.r_step, cfg.s_steps), (64, 8, 25));
        assert_eq!((cfg.t_sf, cfg.eps_bri), (0.5, 0.01));
        cfg.validate().unwrap();
        assert!(SamplerConfig { t_sf: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(SamplerConfig { t_sf: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(SamplerConfig { eps_bri: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(SamplerConfig { r_step: 128, ..cfg.clone() }.validate().is_err());
        assert!(SamplerConfig { s_steps: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn weight_policy_parses() {
        assert_eq!("gss".parse::<WeightPolicy>().unwrap(), WeightPolicy::Gss);
        assert_eq!("bri-only".parse::<WeightPolicy>().unwrap(), WeightPolicy::BriOnly);
        assert_eq!("mask-only".parse::<WeightPolicy>().unwrap(), WeightPolicy::MaskOnly);
        assert_eq!("uniform".parse::<WeightPolicy>().unwrap(), WeightPolicy::Uniform);
        assert!("weighted".parse::<WeightPolicy>().is_err());
    }

    #[test]
    fn brightness_score_identical_is_one() {
        let mut rng = rng::stream(1, 71);
        let a = rand_raster(&mut rng, 1, 8, 8, 0.0, 1.0);
        assert_eq!(s_bri(&a, &a, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn brightness_score_constant_difference() {
        let a = Raster::zeros(1, 4, 4).map(|_| 0.5);
        let b = a.map(|v| v + 0.2);
        let got = s_bri(&a, &b, 0.01).unwrap();
        let want = 1.0 - 0.2 / (0.2 + 0.01);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn brightness_score_matches_scalar_oracle() {
        let mut rng = rng::stream(2, 72);
        for _ in 0..20 {
            let a = rand_raster(&mut rng, 1, 6, 5, 0.0, 1.0);
            let b = rand_raster(&mut rng, 1, 6, 5, 0.0, 1.0);
            let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
            let avg = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let max = diffs.iter().cloned().fold(0.0f64, f64::max);
            let want = 1.0 - avg / (max + 0.01);
            let got = s_bri(&a, &b, 0.01).unwrap();
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn brightness_score_shape_mismatch() {
        let a = Raster::zeros(1, 4, 4);
        let b = Raster::zeros(1, 4, 5);
        assert!(s_bri(&a, &b, 0.01).is_err());
    }

    #[test]
    fn mask_score_examples() {
        let free = Raster::zeros(1, 4, 4);
        assert_eq!(s_mask(&free, 0.5), 1.0);
        // 4 of 16 free → R_sf = 0.25 → 0.5
        let mut m = Raster::zeros(1, 4, 4).map(|_| 1.0);
        for i in 0..4 {
            m.set(0, 0, i, 0.0);
        }
        assert_eq!(s_mask(&m, 0.5), 0.5);
        // exactly at the threshold → 1 (inclusive)
        let mut half = Raster::zeros(1, 4, 4).map(|_| 1.0);
        for y in 0..2 {
            for x in 0..4 {
                half.set(0, y, x, 0.0);
            }
        }
        assert_eq!(s_mask(&half, 0.5), 1.0);
        let shadow = Raster::zeros(1, 4, 4).map(|_| 1.0);
        assert_eq!(s_mask(&shadow, 0.5), 0.0);
    }

    #[test]
    fn mask_score_is_monotone_in_free_ratio() {
        let mut prev = -1.0;
        for free in 0..=16 {
            let mut m = Raster::zeros(1, 4, 4).map(|_| 1.0);
            for i in 0..free {
                m.set(0, i / 4, i % 4, 0.0);
            }
            let s = s_mask(&m, 0.5);
            assert!(s >= prev);
            assert!((0.0..=1.0).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn patch_weight_identities() {
        // t = T returns the brightness score bitwise
        assert_eq!(patch_weight(1000, 1000, 0.1, 0.9), 0.1);
        // equal scores collapse to that score bitwise for any t
        for t in [1, 41, 500, 961, 1000] {
            assert_eq!(patch_weight(t, 1000, 0.3, 0.3), 0.3);
        }
        // halfway → arithmetic mean
        let got = patch_weight(500, 1000, 0.2, 0.6);
        assert!((got - 0.4).abs() < 1e-15);
    }

    #[test]
    fn patch_weight_matches_formula_and_stays_convex() {
        let mut rng = rng::stream(3, 73);
        for _ in 0..100 {
            let sb: f64 = rng.gen_range(0.0..1.0);
            let sm: f64 = rng.gen_range(0.0..1.0);
            let t = rng.gen_range(1..=1000usize);
            let got = patch_weight(t, 1000, sb, sm);
            let want = (t as f64 * sb + (1000 - t) as f64 * sm) / 1000.0;
            assert!((got - want).abs() < 1e-12, "t={t} {got} vs {want}");
            assert!(got >= sb.min(sm) - 1e-12 && got <= sb.max(sm) + 1e-12);
        }
    }

    #[test]
    fn estimate_x0_inverts_forward_noising() {
        let sched = sched1000();
        let mut rng = rng::stream(4, 74);
        for t in [1, 10, 500, 999, 1000] {
            let x0 = rand_raster(&mut rng, 3, 6, 6, -1.0, 1.0);
            let eps = Raster::from_vec(normal_vec(&mut rng, 108), 3, 6, 6).unwrap();
            let x_t = q_sample(&x0, t, &eps, &sched).unwrap();
            let rec = estimate_x0(&x_t, &eps, t, &sched).unwrap();
            let max_err = rec
                .data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-5, "t={t}: {max_err}");
        }
    }

    #[test]
    fn estimate_x0_near_t_one_tracks_x_t() {
        let sched = sched1000();
        let mut rng = rng::stream(5, 75);
        let x_t = rand_raster(&mut rng, 3, 4, 4, -1.0, 1.0);
        let zero = Raster::zeros(3, 4, 4);
        let rec = estimate_x0(&x_t, &zero, 1, &sched).unwrap();
        let max_err = rec.data().iter().zip(x_t.data()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-3);
    }

    #[test]
    fn fuse_single_patch_is_verbatim() {
        let mut rng = rng::stream(6, 76);
        let noise = rand_raster(&mut rng, 3, 8, 8, -2.0, 2.0);
        let grid = build_grid(8, 8, 8, 8).unwrap();
        assert_eq!(grid.len(), 1);
        let fused = fuse_noise(&[noise.clone()], &[1.0], &grid).unwrap();
        assert_eq!(fused.data(), noise.data());
        let fused = fuse_noise(&[noise.clone()], &[0.37], &grid).unwrap();
        let max_err = fused.data().iter().zip(noise.data()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-15);
    }

    #[test]
    fn fuse_equal_weights_is_plain_mean() {
        let mut rng = rng::stream(7, 77);
        // 4x10 canvas, 4x4 patches with stride 3: origins {0,3,6} per column axis
        let grid = build_grid(4, 10, 4, 3).unwrap();
        let noises: Vec<Raster> = (0..grid.len()).map(|_| rand_raster(&mut rng, 3, 4, 4, -1.0, 1.0)).collect();
        let weights = vec![1.0; grid.len()];
        let fused = fuse_noise(&noises, &weights, &grid).unwrap();
        for y in 0..4 {
            for x in 0..10 {
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for (d, loc) in grid.locations().iter().enumerate() {
                        if y >= loc.top && y < loc.top + 4 && x >= loc.left && x < loc.left + 4 {
                            sum += noises[d].get(c, y - loc.top, x - loc.left);
                            n += 1.0;
                        }
                    }
                    let want = sum / n;
                    assert!((fused.get(c, y, x) - want).abs() < 1e-15, "({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn fuse_matches_brute_force_enumeration() {
        let mut rng = rng::stream(8, 78);
        let grid = build_grid(16, 16, 8, 4).unwrap();
        assert_eq!(grid.len(), 9);
        let noises: Vec<Raster> = (0..9).map(|_| rand_raster(&mut rng, 3, 8, 8, -1.0, 1.0)).collect();
        let weights: Vec<f64> = (0..9).map(|_| rng.gen_range(0.05..1.0)).collect();
        let fused = fuse_noise(&noises, &weights, &grid).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (d, loc) in grid.locations().iter().enumerate() {
                        if y >= loc.top && y < loc.top + 8 && x >= loc.left && x < loc.left + 8 {
                            num += weights[d] * noises[d].get(c, y - loc.top, x - loc.left);
                            den += weights[d];
                        }
                    }
                    assert!((fused.get(c, y, x) - num / den).abs() < 1e-9, "({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn fuse_rejects_zero_weight_coverage() {
        let noise = Raster::zeros(3, 8, 8);
        let grid = build_grid(8, 8, 8, 8).unwrap();
        let err = fuse_noise(&[noise], &[0.0], &grid).err().expect("zero weight must fail");
        assert!(err.to_string().contains("weight"), "{err}");
    }

    fn synthetic_image(size: usize, seed: u64) -> (PlanarImage, BinaryMask, PlanarImage) {
        let spec = SyntheticSpec { image_size: size, seed, ..Default::default() };
        let rec = gen_synthetic(1, &spec).unwrap().remove(0);
        (rec.shadow, rec.mask, rec.free)
    }

    fn max_abs_diff(a: &Raster, b: &Raster) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
    }

    #[test]
    fn perfect_denoiser_recovers_the_clean_image() {
        let (shadow, mask, free) = synthetic_image(64, 9);
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let cfg = SamplerConfig::default();
        for policy in [WeightPolicy::Gss, WeightPolicy::Uniform, WeightPolicy::MaskOnly, WeightPolicy::BriOnly] {
            let mut oracle = OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap();
            let out = restore(&shadow, &mask, &mut oracle, &sched, &plan, &cfg, policy).unwrap();
            let err = max_abs_diff(out.image.raster(), free.raster());
            assert!(err < 1e-3, "{policy}: {err}");
            assert_eq!(out.scores.len(), 25);
        }
    }

    #[test]
    fn perfect_denoiser_handles_odd_multipatch_geometry() {
        let (shadow, mask, free) = synthetic_image(96, 10);
        let shadow = shadow.crop(0, 0, 96, 80).unwrap();
        let mask = mask.crop(0, 0, 96, 80).unwrap();
        let free = free.crop(0, 0, 96, 80).unwrap();
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let cfg = SamplerConfig::default();
        let mut oracle = OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap();
        let out = restore(&shadow, &mask, &mut oracle, &sched, &plan, &cfg, WeightPolicy::Gss).unwrap();
        let err = max_abs_diff(out.image.raster(), free.raster());
        assert!(err < 1e-3, "{err}");
        // rows {0,8,16,24,32}, cols {0,8,16} → 15 patches per step
        assert_eq!(out.scores.len(), 15 * 25);
    }

    #[test]
    fn restore_rejects_undersized_images() {
        let (shadow, mask, free) = synthetic_image(32, 11);
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let cfg = SamplerConfig::default();
        let mut oracle = OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap();
        let err = restore(&shadow, &mask, &mut oracle, &sched, &plan, &cfg, WeightPolicy::Gss)
            .err()
            .expect("32x32 must be rejected at patch size 64");
        assert!(err.to_string().contains("pad"), "{err}");
    }

    struct NoGuidance(OracleDenoiser);

    impl NoiseModel for NoGuidance {
        fn begin_step(&mut self, _t: usize) -> Result<Option<PlanarImage>> {
            Ok(None)
        }
        fn estimate(&mut self, inputs: &[Raster], locs: &[PatchLocation], t: usize) -> Result<Vec<Raster>> {
            self.0.estimate(inputs, locs, t)
        }
    }

    #[test]
    fn scored_policies_need_guidance() {
        let (shadow, mask, free) = synthetic_image(64, 12);
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let cfg = SamplerConfig::default();
        let mut blind = NoGuidance(OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap());
        let err = restore(&shadow, &mask, &mut blind, &sched, &plan, &cfg, WeightPolicy::Gss)
            .err()
            .expect("gss without guidance must fail");
        assert!(err.to_string().contains("guidance"), "{err}");
        let mut blind = NoGuidance(OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap());
        restore(&shadow, &mask, &mut blind, &sched, &plan, &cfg, WeightPolicy::Uniform).unwrap();
    }

    #[test]
    fn score_records_respect_their_ranges() {
        let (shadow, mask, free) = synthetic_image(96, 13);
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let cfg = SamplerConfig { r_step: 16, ..Default::default() };
        let mut oracle = OracleDenoiser::new(&free, cfg.r_patch, &sched).unwrap();
        let out = restore(&shadow, &mask, &mut oracle, &sched, &plan, &cfg, WeightPolicy::Gss).unwrap();
        let grid = build_grid(96, 96, 64, 16).unwrap();
        assert_eq!(out.scores.len(), grid.len() * 25);
        for rec in &out.scores {
            assert!((0.0..=1.0).contains(&rec.s_bri), "{rec:?}");
            assert!((0.0..=1.0).contains(&rec.s_m), "{rec:?}");
            let lo = rec.s_bri.min(rec.s_m) - 1e-12;
            let hi = rec.s_bri.max(rec.s_m) + 1e-12;
            assert!(rec.weight >= lo && rec.weight <= hi, "{rec:?}");
            assert_eq!(rec.t % 40, 1, "plan timesteps follow 1 + 40k: {rec:?}");
        }
    }

    #[test]
    fn net_restoration_is_seed_deterministic() {
        let cfg = NetworkConfig {
            input_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            res_blocks_per_resolution: 1,
            self_attention_resolution: 16,
            time_embed_dim: 16,
            rca_scale: None,
        };
        let pair = ModelPair::new(&cfg, candle_core::DType::F32, 41).unwrap();
        let (shadow, mask, _) = synthetic_image(24, 14);
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let plan = make_plan(100, 4).unwrap();
        let scfg = SamplerConfig { r_patch: 16, r_step: 8, s_steps: 4, ..Default::default() };
        let run = || {
            restore_with_pair(&shadow, &mask, &pair, &sched, &plan, &scfg, WeightPolicy::Gss).unwrap()
        };
        let a = run();
        let b = run();
        let ab: Vec<u64> = a.image.raster().data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.image.raster().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
        assert_eq!(a.image.range(), ValueRange::Unit);
        // 24x24 with R=16, r=8 → origins {0,8}² → 4 patches
        assert_eq!(a.scores.len(), 4 * 4);
    }

    #[test]
    fn pair_patch_size_mismatch_is_rejected() {
        let cfg = NetworkConfig {
            input_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            res_blocks_per_resolution: 1,
            self_attention_resolution: 16,
            time_embed_dim: 16,
            rca_scale: None,
        };
        let pair = ModelPair::new(&cfg, candle_core::DType::F32, 42).unwrap();
        let (shadow, mask, _) = synthetic_image(64, 15);
        let sched = sched1000();
        let plan = make_plan(1000, 25).unwrap();
        let scfg = SamplerConfig::default(); // r_patch 64 vs net input 16
        let err = restore_with_pair(&shadow, &mask, &pair, &sched, &plan, &scfg, WeightPolicy::Gss)
            .err()
            .expect("patch size mismatch must fail");
        assert!(err.to_string().contains("input size"), "{err}");
    }
}
