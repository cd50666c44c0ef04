//! Spectral-spatial augmentation pool and two-view generation.
//!
//! A plan is an ordered list of concrete transform instances with all random
//! parameters already sampled (window positions and erase masks are recorded
//! as unit-interval fractions or per-transform seeds), so applying the same
//! plan to the same patch always yields the same output. Every transform
//! preserves the patch shape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::seeding::rng_for;

/// The transform families of the pool, in canonical sampling order.
pub const TRANSFORM_NAMES: [&str; 7] = [
    "crop",
    "flip",
    "rotate",
    "blur",
    "erase-pixel",
    "erase-band",
    "permute-band",
];

/// Probabilities and parameter ranges for every transform family.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPool {
    pub crop_prob: f64,
    /// Crop side as a fraction of the patch side, (lo, hi].
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub pixel_erase_prob: f64,
    pub pixel_erase_fraction: f64,
    /// One gate for the spectral transforms; kept very small so spectra are
    /// rarely distorted.
    pub spectral_prob: f64,
    pub band_erase_enabled: bool,
    pub band_erase_fraction: f64,
    pub band_permute_enabled: bool,
    pub band_group_count: usize,
}

impl Default for AugmentationPool {
    fn default() -> Self {
        AugmentationPool {
            crop_prob: 0.8,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            rotate_prob: 0.5,
            blur_prob: 0.3,
            blur_sigma: (0.1, 1.0),
            pixel_erase_prob: 0.2,
            pixel_erase_fraction: 0.1,
            spectral_prob: 0.1,
            band_erase_enabled: true,
            band_erase_fraction: 0.1,
            band_permute_enabled: true,
            band_group_count: 4,
        }
    }
}

impl AugmentationPool {
    /// A pool that never transforms anything.
    pub fn disabled() -> Self {
        AugmentationPool {
            crop_prob: 0.0,
            flip_prob: 0.0,
            rotate_prob: 0.0,
            blur_prob: 0.0,
            pixel_erase_prob: 0.0,
            spectral_prob: 0.0,
            ..AugmentationPool::default()
        }
    }

    /// A pool that always applies exactly the named transform; used by the
    /// augmentation-composition sweeps.
    pub fn single(name: &str) -> Result<Self> {
        let mut pool = AugmentationPool::disabled();
        pool.enable(name)?;
        Ok(pool)
    }

    /// Turns one transform family on with probability 1.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "crop" => self.crop_prob = 1.0,
            "flip" => self.flip_prob = 1.0,
            "rotate" => self.rotate_prob = 1.0,
            "blur" => self.blur_prob = 1.0,
            "erase-pixel" => self.pixel_erase_prob = 1.0,
            "erase-band" => {
                self.spectral_prob = 1.0;
                self.band_erase_enabled = true;
                self.band_permute_enabled = false;
            }
            "permute-band" => {
                self.spectral_prob = 1.0;
                self.band_erase_enabled = false;
                self.band_permute_enabled = true;
            }
            other => {
                return Err(Error::arg(format!(
                    "unknown transform {other:?}; expected one of {TRANSFORM_NAMES:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.crop_prob,
            self.flip_prob,
            self.rotate_prob,
            self.blur_prob,
            self.pixel_erase_prob,
            self.spectral_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("transform probabilities must lie in [0,1]"));
        }
        if !(self.crop_scale.0 > 0.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0)
        {
            return Err(Error::arg("crop scale range must satisfy 0 < lo <= hi <= 1"));
        }
        if self.blur_sigma.0 <= 0.0 || self.blur_sigma.0 > self.blur_sigma.1 {
            return Err(Error::arg("blur sigma range must satisfy 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&self.pixel_erase_fraction)
            || !(0.0..1.0).contains(&self.band_erase_fraction)
        {
            return Err(Error::arg("erase fractions must lie in [0,1)"));
        }
        if self.band_group_count == 0 {
            return Err(Error::arg("band group count must be positive"));
        }
        Ok(())
    }
}

/// Which axes a flip mirrors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxes {
    Horizontal,
    Vertical,
    Both,
}

/// One concrete transform instance with sampled parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// Crop a sub-window of `scale * side` pixels at a fractional position,
    /// then resize back to the original side bilinearly.
    CropResize { scale: f64, pos_row: f64, pos_col: f64 },
    Flip(FlipAxes),
    /// Spatial rotation by `quarter_turns * 90` degrees.
    Rotate { quarter_turns: u8 },
    /// Per-band Gaussian blur with reflect boundary handling.
    GaussianBlur { sigma: f64 },
    /// Replace a fraction of spatial positions (all bands) by the patch mean
    /// spectrum; positions come from the recorded seed.
    ErasePixel { fraction: f64, seed: u64 },
    /// Replace a fraction of whole bands by that band's spatial mean.
    EraseBand { fraction: f64, seed: u64 },
    /// Permute adjacent band groups, preserving within-group order.
    PermuteBand { group_count: usize, seed: u64 },
}

/// An ordered list of sampled transforms; a pure function of the generator
/// state it was sampled with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationPlan {
    pub transforms: Vec<Transform>,
}

/// Samples one composition from the pool. Spatial transforms are included
/// independently with their own probabilities; the spectral transforms hang
/// behind a single low-probability gate.
pub fn sample_plan(pool: &AugmentationPool, rng: &mut impl Rng) -> AugmentationPlan {
    let mut transforms = Vec::new();
    if rng.random_bool(pool.crop_prob) {
        transforms.push(Transform::CropResize {
            scale: rng.random_range(pool.crop_scale.0..=pool.crop_scale.1),
            pos_row: rng.random::<f64>(),
            pos_col: rng.random::<f64>(),
        });
    }
    if rng.random_bool(pool.flip_prob) {
        let axes = match rng.random_range(0..3u8) {
            0 => FlipAxes::Horizontal,
            1 => FlipAxes::Vertical,
            _ => FlipAxes::Both,
        };
        transforms.push(Transform::Flip(axes));
    }
    if rng.random_bool(pool.rotate_prob) {
        transforms.push(Transform::Rotate {
            quarter_turns: rng.random_range(1..=3u8),
        });
    }
    if rng.random_bool(pool.blur_prob) {
        transforms.push(Transform::GaussianBlur {
            sigma: rng.random_range(pool.blur_sigma.0..=pool.blur_sigma.1),
        });
    }
    if rng.random_bool(pool.pixel_erase_prob) {
        transforms.push(Transform::ErasePixel {
            fraction: pool.pixel_erase_fraction,
            seed: rng.random::<u64>(),
        });
    }
    if rng.random_bool(pool.spectral_prob) {
        if pool.band_erase_enabled {
            transforms.push(Transform::EraseBand {
                fraction: pool.band_erase_fraction,
                seed: rng.random::<u64>(),
            });
        }
        if pool.band_permute_enabled {
            transforms.push(Transform::PermuteBand {
                group_count: pool.band_group_count,
                seed: rng.random::<u64>(),
            });
        }
    }
    AugmentationPlan { transforms }
}

/// Seeded Fisher-Yates shuffle of 0..n.
fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &[]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn apply_crop_resize(patch: &Patch, scale: f64, pos_row: f64, pos_col: f64) -> Result<Patch> {
    let side = patch.side;
    let crop_side = (scale * side as f64).floor() as usize;
    if crop_side < 2 {
        return Err(Error::arg(format!(
            "crop side {crop_side} (scale {scale} of {side}) is below 2"
        )));
    }
    let crop_side = crop_side.min(side);
    let max_off = side - crop_side;
    let row0 = ((pos_row * (max_off + 1) as f64).floor() as usize).min(max_off);
    let col0 = ((pos_col * (max_off + 1) as f64).floor() as usize).min(max_off);

    let mut out = patch.clone();
    // bilinear resize of the crop window back to `side`, align-corners
    let src_step = if side > 1 {
        (crop_side - 1) as f64 / (side - 1) as f64
    } else {
        0.0
    };
    for r in 0..side {
        let sr = r as f64 * src_step;
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(crop_side - 1);
        let fr = sr - r0 as f64;
        for c in 0..side {
            let sc = c as f64 * src_step;
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(crop_side - 1);
            let fc = sc - c0 as f64;
            for band in 0..patch.channels {
                let v00 = patch.value(row0 + r0, col0 + c0, band) as f64;
                let v01 = patch.value(row0 + r0, col0 + c1, band) as f64;
                let v10 = patch.value(row0 + r1, col0 + c0, band) as f64;
                let v11 = patch.value(row0 + r1, col0 + c1, band) as f64;
                let v = v00 * (1.0 - fr) * (1.0 - fc)
                    + v01 * (1.0 - fr) * fc
                    + v10 * fr * (1.0 - fc)
                    + v11 * fr * fc;
                *out.value_mut(r, c, band) = v as f32;
            }
        }
    }
    Ok(out)
}

fn apply_flip(patch: &Patch, axes: FlipAxes) -> Patch {
    let side = patch.side;
    let mut out = patch.clone();
    let (flip_rows, flip_cols) = match axes {
        FlipAxes::Horizontal => (false, true),
        FlipAxes::Vertical => (true, false),
        FlipAxes::Both => (true, true),
    };
    for r in 0..side {
        let sr = if flip_rows { side - 1 - r } else { r };
        for c in 0..side {
            let sc = if flip_cols { side - 1 - c } else { c };
            for band in 0..patch.channels {
                *out.value_mut(r, c, band) = patch.value(sr, sc, band);
            }
        }
    }
    out
}

fn apply_rotate(patch: &Patch, quarter_turns: u8) -> Patch {
    let side = patch.side;
    let mut out = patch.clone();
    for r in 0..side {
        for c in 0..side {
            // source position that lands on (r, c) after the rotation
            let (sr, sc) = match quarter_turns % 4 {
                1 => (c, side - 1 - r),
                2 => (side - 1 - r, side - 1 - c),
                3 => (side - 1 - c, r),
                _ => (r, c),
            };
            for band in 0..patch.channels {
                *out.value_mut(r, c, band) = patch.value(sr, sc, band);
            }
        }
    }
    out
}

#[inline]
fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

fn apply_blur(patch: &Patch, sigma: f64) -> Patch {
    let side = patch.side;
    let radius = ((3.0 * sigma).ceil() as usize).max(1).min(side.saturating_sub(1).max(1));
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for d in -(radius as isize)..=(radius as isize) {
        kernel.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    // separable convolution, rows then columns
    let channels = patch.channels;
    let mut tmp = vec![0.0f64; side * side * channels];
    for r in 0..side {
        for c in 0..side {
            for band in 0..channels {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sc = reflect(c as isize + ki as isize - radius as isize, side);
                    acc += kv * patch.value(r, sc, band) as f64;
                }
                tmp[(r * side + c) * channels + band] = acc;
            }
        }
    }
    let mut out = patch.clone();
    for r in 0..side {
        for c in 0..side {
            for band in 0..channels {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sr = reflect(r as isize + ki as isize - radius as isize, side);
                    acc += kv * tmp[(sr * side + c) * channels + band];
                }
                *out.value_mut(r, c, band) = acc as f32;
            }
        }
    }
    out
}

fn apply_erase_pixel(patch: &Patch, fraction: f64, seed: u64) -> Patch {
    let side = patch.side;
    let channels = patch.channels;
    let positions = side * side;
    let erase_count = (fraction * positions as f64).floor() as usize;

    // mean spectrum of the original patch
    let mut mean = vec![0.0f64; channels];
    for p in 0..positions {
        for (m, &v) in mean.iter_mut().zip(&patch.values[p * channels..(p + 1) * channels]) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= positions as f64;
    }

    let mut out = patch.clone();
    let order = shuffled_indices(positions, seed);
    for &p in order.iter().take(erase_count) {
        for (band, &m) in mean.iter().enumerate() {
            out.values[p * channels + band] = m as f32;
        }
    }
    out
}

fn apply_erase_band(patch: &Patch, fraction: f64, seed: u64) -> Patch {
    let channels = patch.channels;
    let positions = patch.side * patch.side;
    let erase_count = (fraction * channels as f64).floor() as usize;

    let mut out = patch.clone();
    let order = shuffled_indices(channels, seed);
    for &band in order.iter().take(erase_count) {
        let mut mean = 0.0f64;
        for p in 0..positions {
            mean += patch.values[p * channels + band] as f64;
        }
        mean /= positions as f64;
        for p in 0..positions {
            out.values[p * channels + band] = mean as f32;
        }
    }
    out
}

/// Splits 0..n into `groups` adjacent runs, sizes as equal as possible.
fn adjacent_groups(n: usize, groups: usize) -> Vec<std::ops::Range<usize>> {
    let groups = groups.min(n).max(1);
    let base = n / groups;
    let extra = n % groups;
    let mut runs = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < extra);
        runs.push(start..start + len);
        start += len;
    }
    runs
}

fn apply_permute_band(patch: &Patch, group_count: usize, seed: u64) -> Patch {
    let channels = patch.channels;
    let runs = adjacent_groups(channels, group_count);
    let perm = shuffled_indices(runs.len(), seed);

    let mut band_order = Vec::with_capacity(channels);
    for &g in &perm {
        band_order.extend(runs[g].clone());
    }

    let mut out = patch.clone();
    let positions = patch.side * patch.side;
    for p in 0..positions {
        for (dst, &src) in band_order.iter().enumerate() {
            out.values[p * channels + dst] = patch.values[p * channels + src];
        }
    }
    out
}

/// Applies every transform of the plan in order. Output dims always equal
/// input dims.
pub fn apply_plan(plan: &AugmentationPlan, patch: &Patch) -> Result<Patch> {
    let mut current = patch.clone();
    for transform in &plan.transforms {
        current = match *transform {
            Transform::CropResize { scale, pos_row, pos_col } => {
                apply_crop_resize(&current, scale, pos_row, pos_col)?
            }
            Transform::Flip(axes) => apply_flip(&current, axes),
            Transform::Rotate { quarter_turns } => apply_rotate(&current, quarter_turns),
            Transform::GaussianBlur { sigma } => apply_blur(&current, sigma),
            Transform::ErasePixel { fraction, seed } => {
                apply_erase_pixel(&current, fraction, seed)
            }
            Transform::EraseBand { fraction, seed } => apply_erase_band(&current, fraction, seed),
            Transform::PermuteBand { group_count, seed } => {
                apply_permute_band(&current, group_count, seed)
            }
        };
    }
    Ok(current)
}

/// Samples two independent plans and returns the two distorted views.
pub fn two_views(patch: &Patch, pool: &AugmentationPool, rng: &mut impl Rng) -> Result<(Patch, Patch)> {
    let plan_a = sample_plan(pool, rng);
    let plan_b = sample_plan(pool, rng);
    Ok((apply_plan(&plan_a, patch)?, apply_plan(&plan_b, patch)?))
}

/// Two-view generation with a different pool per branch; the composition
/// sweeps pin one transform to each branch.
pub fn two_views_with_pools(
    patch: &Patch,
    pool_a: &AugmentationPool,
    pool_b: &AugmentationPool,
    rng: &mut impl Rng,
) -> Result<(Patch, Patch)> {
    let plan_a = sample_plan(pool_a, rng);
    let plan_b = sample_plan(pool_b, rng);
    Ok((apply_plan(&plan_a, patch)?, apply_plan(&plan_b, patch)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;


    fn random_patch(side: usize, channels: usize, seed: u64) -> Patch {
        let mut rng = rng_for(seed, &[]);
        let values: Vec<f32> = (0..side * side * channels)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        Patch {
            side,
            channels,
            values,
            center_row: 0,
            center_col: 0,
        }
    }

    #[test]
    fn zero_probability_pool_yields_identity() {
        let pool = AugmentationPool::disabled();
        let mut rng = rng_for(1, &[]);
        let plan = sample_plan(&pool, &mut rng);
        assert!(plan.transforms.is_empty());
        let patch = random_patch(7, 4, 2);
        let out = apply_plan(&plan, &patch).unwrap();
        assert_eq!(out.values, patch.values);
    }

    #[test]
    fn full_probability_pool_is_deterministic() {
        let mut pool = AugmentationPool::default();
        pool.crop_prob = 1.0;
        pool.flip_prob = 1.0;
        pool.rotate_prob = 1.0;
        pool.blur_prob = 1.0;
        pool.pixel_erase_prob = 1.0;
        pool.spectral_prob = 1.0;
        let plan1 = sample_plan(&pool, &mut rng_for(5, &[]));
        let plan2 = sample_plan(&pool, &mut rng_for(5, &[]));
        assert_eq!(plan1, plan2);
        assert_eq!(plan1.transforms.len(), 7);
        let patch = random_patch(9, 8, 3);
        assert_eq!(
            apply_plan(&plan1, &patch).unwrap(),
            apply_plan(&plan2, &patch).unwrap()
        );
    }

    #[test]
    fn double_flip_is_identity() {
        let patch = random_patch(7, 3, 11);
        let plan = AugmentationPlan {
            transforms: vec![
                Transform::Flip(FlipAxes::Horizontal),
                Transform::Flip(FlipAxes::Horizontal),
            ],
        };
        assert_eq!(apply_plan(&plan, &patch).unwrap().values, patch.values);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let patch = random_patch(5, 2, 12);
        let plan = AugmentationPlan {
            transforms: vec![Transform::Rotate { quarter_turns: 1 }; 4],
        };
        assert_eq!(apply_plan(&plan, &patch).unwrap().values, patch.values);
        let plan180 = AugmentationPlan {
            transforms: vec![Transform::Rotate { quarter_turns: 2 }; 2],
        };
        assert_eq!(apply_plan(&plan180, &patch).unwrap().values, patch.values);
    }

    #[test]
    fn band_permutation_preserves_per_pixel_multiset() {
        let patch = random_patch(5, 8, 13);
        let plan = AugmentationPlan {
            transforms: vec![Transform::PermuteBand { group_count: 3, seed: 99 }],
        };
        let out = apply_plan(&plan, &patch).unwrap();
        for p in 0..25 {
            let mut before: Vec<f32> = patch.values[p * 8..(p + 1) * 8].to_vec();
            let mut after: Vec<f32> = out.values[p * 8..(p + 1) * 8].to_vec();
            before.sort_by(f32::total_cmp);
            after.sort_by(f32::total_cmp);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn tiny_sigma_blur_is_nearly_identity() {
        let patch = random_patch(9, 4, 14);
        let plan = AugmentationPlan {
            transforms: vec![Transform::GaussianBlur { sigma: 1e-4 }],
        };
        let out = apply_plan(&plan, &patch).unwrap();
        for (a, b) in patch.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn erase_pixel_touches_exactly_floor_fraction_positions() {
        let patch = random_patch(13, 4, 15);
        let fraction = 0.1;
        let plan = AugmentationPlan {
            transforms: vec![Transform::ErasePixel { fraction, seed: 7 }],
        };
        let out = apply_plan(&plan, &patch).unwrap();
        let changed = (0..169)
            .filter(|&p| out.spectrum(p / 13, p % 13) != patch.spectrum(p / 13, p % 13))
            .count();
        let erased = (fraction * 169.0).floor() as usize;
        assert_eq!(changed, erased);
        // untouched count matches ceil((1-f) * side^2)
        assert_eq!(169 - changed, ((1.0 - fraction) * 169.0).ceil() as usize);
    }

    #[test]
    fn erased_band_becomes_its_mean() {
        let patch = random_patch(5, 6, 16);
        let plan = AugmentationPlan {
            transforms: vec![Transform::EraseBand { fraction: 0.34, seed: 21 }],
        };
        let out = apply_plan(&plan, &patch).unwrap();
        let mut changed_bands = 0;
        for band in 0..6 {
            let col_out: Vec<f32> = (0..25).map(|p| out.values[p * 6 + band]).collect();
            let col_in: Vec<f32> = (0..25).map(|p| patch.values[p * 6 + band]).collect();
            if col_out != col_in {
                changed_bands += 1;
                let mean = col_in.iter().map(|&v| v as f64).sum::<f64>() / 25.0;
                for v in &col_out {
                    assert!((*v as f64 - mean).abs() < 1e-6);
                }
            }
        }
        assert_eq!(changed_bands, 2); // floor(0.34 * 6)
    }

    #[test]
    fn crop_below_two_pixels_is_an_error() {
        let patch = random_patch(1, 2, 17);
        let plan = AugmentationPlan {
            transforms: vec![Transform::CropResize { scale: 0.9, pos_row: 0.0, pos_col: 0.0 }],
        };
        assert!(apply_plan(&plan, &patch).is_err());
    }

    #[test]
    fn full_scale_crop_is_identity() {
        let patch = random_patch(9, 3, 18);
        let plan = AugmentationPlan {
            transforms: vec![Transform::CropResize { scale: 1.0, pos_row: 0.3, pos_col: 0.9 }],
        };
        let out = apply_plan(&plan, &patch).unwrap();
        for (a, b) in patch.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_views_are_reproducible_and_mostly_distinct() {
        let pool = AugmentationPool::default();
        let patch = random_patch(9, 8, 19);
        let (a1, b1) = two_views(&patch, &pool, &mut rng_for(3, &[])).unwrap();
        let (a2, b2) = two_views(&patch, &pool, &mut rng_for(3, &[])).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);

        let mut distinct = 0;
        for draw in 0..1000u64 {
            let (a, b) = two_views(&patch, &pool, &mut rng_for(100, &[draw])).unwrap();
            if a.values != b.values {
                distinct += 1;
            }
        }
        assert!(distinct > 990, "only {distinct}/1000 view pairs distinct");
    }

    #[test]
    fn zero_pool_views_equal_input() {
        let pool = AugmentationPool::disabled();
        let patch = random_patch(7, 5, 20);
        let (a, b) = two_views(&patch, &pool, &mut rng_for(4, &[])).unwrap();
        assert_eq!(a.values, patch.values);
        assert_eq!(b.values, patch.values);
    }

    #[test]
    fn adjacent_grouping_is_contiguous_and_balanced() {
        let runs = adjacent_groups(8, 4);
        assert_eq!(runs, vec![0..2, 2..4, 4..6, 6..8]);
        let runs = adjacent_groups(7, 3);
        assert_eq!(runs, vec![0..3, 3..5, 5..7]);
        let runs = adjacent_groups(2, 5);
        assert_eq!(runs, vec![0..1, 1..2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plans_preserve_shape(seed in 0u64..1000, side in proptest::sample::select(vec![5usize, 7, 9, 13]), channels in 1usize..10) {
            let mut pool = AugmentationPool::default();
            pool.crop_prob = 0.7;
            pool.spectral_prob = 0.5;
            let patch = random_patch(side, channels, seed);
            let plan = sample_plan(&pool, &mut rng_for(seed, &[1]));
            let out = apply_plan(&plan, &patch).unwrap();
            prop_assert_eq!(out.side, side);
            prop_assert_eq!(out.channels, channels);
            prop_assert_eq!(out.values.len(), side * side * channels);
            prop_assert!(out.values.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn plan_application_is_pure(seed in 0u64..1000) {
            let mut pool = AugmentationPool::default();
            pool.spectral_prob = 0.5;
            let patch = random_patch(9, 6, seed);
            let plan = sample_plan(&pool, &mut rng_for(seed, &[2]));
            let once = apply_plan(&plan, &patch).unwrap();
            let twice = apply_plan(&plan, &patch).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
