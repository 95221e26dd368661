//! Overlapping patch grid: location enumeration, cropping, coverage counting,
//! and weighted scatter-accumulation for noise fusion.

use crate::error::{Error, Result};
use crate::imaging::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLocation {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Row-major list of the D overlapping patch locations covering an H×W image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    locations: Vec<PatchLocation>,
    patch_size: usize,
    step: usize,
    height: usize,
    width: usize,
}

/// Per-pixel count of patches containing that pixel.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    counts: Vec<u32>,
    height: usize,
    width: usize,
}

impl CoverageMap {
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn min(&self) -> u32 {
        *self.counts.iter().min().unwrap_or(&0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Per-axis offsets {0, r, 2r, …} plus a clamped final offset at dim−R when the
/// stride does not land there exactly, so the last row/column is always covered.
fn axis_offsets(dim: usize, patch: usize, step: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut offs: Vec<usize> = (0..=last).step_by(step).collect();
    if *offs.last().unwrap() != last {
        offs.push(last);
    }
    offs
}

pub fn build_grid(height: usize, width: usize, patch_size: usize, step: usize) -> Result<PatchGrid> {
    if patch_size > height || patch_size > width {
        return Err(Error::Config(format!(
            "patch size {patch_size} exceeds image {height}x{width}"
        )));
    }
    if step == 0 || step > patch_size {
        return Err(Error::Config(format!("step {step} must be in 1..={patch_size}")));
    }
    let rows = axis_offsets(height, patch_size, step);
    let cols = axis_offsets(width, patch_size, step);
    let mut locations = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            locations.push(PatchLocation { top, left, size: patch_size });
        }
    }
    Ok(PatchGrid { locations, patch_size, step, height, width })
}

impl PatchGrid {
    pub fn locations(&self) -> &[PatchLocation] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coverage(&self) -> CoverageMap {
        let mut counts = vec![0u32; self.height * self.width];
        for loc in &self.locations {
            for y in loc.top..loc.top + loc.size {
                let row = y * self.width;
                for x in loc.left..loc.left + loc.size {
                    counts[row + x] += 1;
                }
            }
        }
        CoverageMap { counts, height: self.height, width: self.width }
    }
}

/// Copy of the window at `loc`, all channels.
pub fn crop(raster: &Raster, loc: &PatchLocation) -> Result<Raster> {
    raster.crop(loc.top, loc.left, loc.size, loc.size)
}

/// Accumulate `weight * patch` into `acc` over the window at `loc`, and the
/// scalar weight itself into `weight_acc`, for later normalization.
pub fn scatter_add(
    acc: &mut Raster,
    weight_acc: &mut Raster,
    patch: &Raster,
    loc: &PatchLocation,
    weight: f64,
) -> Result<()> {
    let (pc, ph, pw) = patch.shape();
    let (ac, ah, aw) = acc.shape();
    if pc != ac || ph != loc.size || pw != loc.size {
        return Err(Error::ShapeMismatch(format!(
            "scatter_add patch {:?} vs acc {:?} at size {}",
            patch.shape(),
            acc.shape(),
            loc.size
        )));
    }
    if weight_acc.channels() != 1 || weight_acc.height() != ah || weight_acc.width() != aw {
        return Err(Error::ShapeMismatch("weight accumulator must be (1, H, W)".into()));
    }
    if loc.top + loc.size > ah || loc.left + loc.size > aw {
        return Err(Error::ShapeMismatch("patch location outside accumulator".into()));
    }
    for c in 0..pc {
        for y in 0..ph {
            for x in 0..pw {
                let v = acc.get(c, loc.top + y, loc.left + x) + weight * patch.get(c, y, x);
                acc.set(c, loc.top + y, loc.left + x, v);
            }
        }
    }
    for y in 0..ph {
        for x in 0..pw {
            let v = weight_acc.get(0, loc.top + y, loc.left + x) + weight;
            weight_acc.set(0, loc.top + y, loc.left + x, v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn default_grid_shape() {
        let g = build_grid(256, 256, 64, 8).unwrap();
        assert_eq!(g.len(), 625);
        let rows: Vec<usize> = g.locations().iter().map(|l| l.top).collect();
        let uniq_rows: std::collections::BTreeSet<usize> = rows.iter().copied().collect();
        let expect: Vec<usize> = (0..25).map(|i| i * 8).collect();
        assert_eq!(uniq_rows.into_iter().collect::<Vec<_>>(), expect);
    }

    #[test]
    fn single_location_when_patch_fills_image() {
        let g = build_grid(32, 32, 32, 8).unwrap();
        assert_eq!(g.locations(), &[PatchLocation { top: 0, left: 0, size: 32 }]);
    }

    #[test]
    fn clamped_final_offset() {
        let g = build_grid(67, 64, 64, 8).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.locations()[0], PatchLocation { top: 0, left: 0, size: 64 });
        assert_eq!(g.locations()[1], PatchLocation { top: 3, left: 0, size: 64 });
    }

    #[test]
    fn grid_rejects_bad_params() {
        assert!(build_grid(32, 32, 64, 8).is_err());
        assert!(build_grid(64, 64, 32, 0).is_err());
        assert!(build_grid(64, 64, 32, 33).is_err());
    }

    #[test]
    fn locations_sorted_row_major_and_unique() {
        let g = build_grid(96, 80, 32, 12).unwrap();
        let locs = g.locations();
        for w in locs.windows(2) {
            assert!((w[0].top, w[0].left) < (w[1].top, w[1].left));
        }
    }

    #[test]
    fn coverage_matches_brute_force_defaults() {
        let g = build_grid(256, 256, 64, 8).unwrap();
        let cov = g.coverage();
        assert_eq!(cov.total(), 625 * 64 * 64);
        assert_eq!(cov.min(), 1);
        assert_eq!(cov.get(0, 0), 1);
        // Brute-force count over all locations, on a sample of pixels.
        let brute = |y: usize, x: usize| {
            g.locations()
                .iter()
                .filter(|l| y >= l.top && y < l.top + 64 && x >= l.left && x < l.left + 64)
                .count() as u32
        };
        for &(y, x) in &[(0, 0), (63, 63), (100, 100), (128, 37), (255, 255), (200, 5)] {
            assert_eq!(cov.get(y, x), brute(y, x), "pixel ({y},{x})");
        }
        // Interior pixels see (R/r)^2 = 64 patches.
        assert_eq!(cov.get(100, 100), 64);
        assert_eq!(cov.get(128, 128), 64);
    }

    #[test]
    fn crop_identity_and_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen::<f64>()).collect();
        let r = Raster::from_vec(data, 3, 8, 8).unwrap();
        let full = crop(&r, &PatchLocation { top: 0, left: 0, size: 8 }).unwrap();
        assert_eq!(full.data(), r.data());
        let c = Raster::from_vec(vec![0.25; 64], 1, 8, 8).unwrap();
        let p = crop(&c, &PatchLocation { top: 2, left: 3, size: 4 }).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(crop(&r, &PatchLocation { top: 5, left: 5, size: 4 }).is_err());
    }

    #[test]
    fn scatter_zero_weight_is_noop() {
        let mut acc = Raster::zeros(3, 8, 8);
        let mut wacc = Raster::zeros(1, 8, 8);
        let patch = Raster::from_vec(vec![1.0; 3 * 16], 3, 4, 4).unwrap();
        scatter_add(&mut acc, &mut wacc, &patch, &PatchLocation { top: 1, left: 1, size: 4 }, 0.0)
            .unwrap();
        assert!(acc.data().iter().all(|&v| v == 0.0));
        assert!(wacc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_single_patch_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let patch =
            Raster::from_vec((0..3 * 16).map(|_| rng.gen::<f64>()).collect(), 3, 4, 4).unwrap();
        let mut acc = Raster::zeros(3, 8, 8);
        let mut wacc = Raster::zeros(1, 8, 8);
        let loc = PatchLocation { top: 3, left: 2, size: 4 };
        scatter_add(&mut acc, &mut wacc, &patch, &loc, 1.0).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let w = wacc.get(0, loc.top + y, loc.left + x);
                    let v = acc.get(c, loc.top + y, loc.left + x) / w;
                    assert!((v - patch.get(c, y, x)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn scatter_normalization_matches_weighted_average_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let g = build_grid(16, 16, 8, 4).unwrap();
        let patches: Vec<Raster> = g
            .locations()
            .iter()
            .map(|_| {
                Raster::from_vec((0..3 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect(), 3, 8, 8)
                    .unwrap()
            })
            .collect();
        let weights: Vec<f64> = g.locations().iter().map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut acc = Raster::zeros(3, 16, 16);
        let mut wacc = Raster::zeros(1, 16, 16);
        for ((patch, loc), &w) in patches.iter().zip(g.locations()).zip(&weights) {
            scatter_add(&mut acc, &mut wacc, patch, loc, w).unwrap();
        }
        // Per-pixel weighted-average oracle by direct enumeration of covering patches.
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (i, loc) in g.locations().iter().enumerate() {
                        if y >= loc.top && y < loc.top + 8 && x >= loc.left && x < loc.left + 8 {
                            num += weights[i] * patches[i].get(c, y - loc.top, x - loc.left);
                            den += weights[i];
                        }
                    }
                    let got = acc.get(c, y, x) / wacc.get(0, y, x);
                    let expect = num / den;
                    assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn every_pixel_covered(
            h in 8usize..80,
            w in 8usize..80,
            patch in 4usize..32,
            step in 1usize..16,
        ) {
            prop_assume!(patch <= h && patch <= w && step <= patch);
            let g = build_grid(h, w, patch, step).unwrap();
            prop_assert!(g.coverage().min() >= 1);
            prop_assert_eq!(g.coverage().total(), (g.len() * patch * patch) as u64);
        }
    }
}
