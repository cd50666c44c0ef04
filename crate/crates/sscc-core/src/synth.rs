//! Synthetic hyperspectral cube generator.
//!
//! Builds a cube of `c` contiguous spatial regions (Voronoi cells of seeded
//! centers) where each class carries a distinct smooth spectral signature,
//! plus i.i.d. Gaussian pixel noise. Purely a function of its arguments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cube::{Cube, LabelMap};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Smooth per-class signature: a sinusoid whose frequency steps every four
/// classes and whose phase is evenly spaced within the frequency group, so
/// class means stay well separated for any class count.
fn signature(class: usize, classes: usize, band: usize, bands: usize, jitter: f64) -> f64 {
    let t = if bands > 1 {
        band as f64 / (bands - 1) as f64
    } else {
        0.0
    };
    let group = class / 4;
    let within = class % 4;
    let group_size = (classes - 4 * group).min(4);
    let freq = 1.0 + group as f64;
    let phase = 2.0 * std::f64::consts::PI * within as f64 / group_size as f64 + jitter;
    let dc = 0.08 * (class as f64 / classes as f64 - 0.5);
    0.5 + dc + 0.35 * (2.0 * std::f64::consts::PI * freq * t + phase).sin()
}

/// Generates a synthetic cube and its ground-truth label map.
pub fn synth_cube(
    classes: usize,
    height: usize,
    width: usize,
    bands: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Cube, LabelMap)> {
    if classes < 2 {
        return Err(Error::arg("class count must be at least 2"));
    }
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::arg("cube dimensions must all be at least 1"));
    }
    if classes > height * width {
        return Err(Error::arg(format!(
            "{classes} classes cannot tile {height}x{width} pixels"
        )));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::arg("noise sigma must be finite and nonnegative"));
    }

    // distinct Voronoi centers
    let mut rng = rng_for(seed, &[1]);
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let cand = (rng.random_range(0..height), rng.random_range(0..width));
        if !centers.contains(&cand) {
            centers.push(cand);
        }
    }

    let mut labels = vec![0u32; height * width];
    for row in 0..height {
        for col in 0..width {
            let mut best = 0usize;
            let mut best_dist = usize::MAX;
            for (class, &(cr, cc)) in centers.iter().enumerate() {
                let dr = cr.abs_diff(row);
                let dc = cc.abs_diff(col);
                let dist = dr * dr + dc * dc;
                if dist < best_dist {
                    best_dist = dist;
                    best = class;
                }
            }
            labels[row * width + col] = best as u32;
        }
    }

    // Voronoi with distinct centers: every class owns at least its center
    let jitters: Vec<f64> = {
        let mut jrng = rng_for(seed, &[2]);
        (0..classes).map(|_| jrng.random_range(-0.15..0.15)).collect()
    };

    let mut noise_rng = rng_for(seed, &[3]);
    let normal = Normal::new(0.0, 1.0).map_err(|_| Error::arg("bad noise sigma"))?;
    let mut values = Vec::with_capacity(height * width * bands);
    for row in 0..height {
        for col in 0..width {
            let class = labels[row * width + col] as usize;
            for band in 0..bands {
                let clean = signature(class, classes, band, bands, jitters[class]);
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * normal.sample(&mut noise_rng)
                } else {
                    0.0
                };
                values.push((clean + noise) as f32);
            }
        }
    }

    let cube = Cube::new(height, width, bands, values)?;
    let map = LabelMap::new(height, width, classes, labels)?;
    Ok((cube, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let (c1, l1) = synth_cube(4, 12, 10, 8, 0.05, 42).unwrap();
        let (c2, l2) = synth_cube(4, 12, 10, 8, 0.05, 42).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
        let (c3, _) = synth_cube(4, 12, 10, 8, 0.05, 43).unwrap();
        assert_ne!(c1, c3);
    }

    #[test]
    fn zero_noise_makes_within_class_spectra_identical() {
        let (cube, map) = synth_cube(3, 8, 8, 6, 0.0, 7).unwrap();
        let mut reference: Vec<Option<Vec<f32>>> = vec![None; 3];
        for row in 0..8 {
            for col in 0..8 {
                let class = map.label(row, col) as usize;
                let spec = cube.spectrum(row, col).to_vec();
                match &reference[class] {
                    None => reference[class] = Some(spec),
                    Some(r) => assert_eq!(r, &spec),
                }
            }
        }
    }

    #[test]
    fn class_means_are_separated_beyond_noise() {
        let noise = 0.05;
        let (cube, map) = synth_cube(4, 32, 32, 16, noise, 9).unwrap();
        let mut sums = vec![vec![0.0f64; 16]; 4];
        let mut counts = vec![0usize; 4];
        for row in 0..32 {
            for col in 0..32 {
                let class = map.label(row, col) as usize;
                counts[class] += 1;
                for (s, &v) in sums[class].iter_mut().zip(cube.spectrum(row, col)) {
                    *s += v as f64;
                }
            }
        }
        for class in 0..4 {
            assert!(counts[class] > 0, "class {class} is empty");
            for s in &mut sums[class] {
                *s /= counts[class] as f64;
            }
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                let dist: f64 = sums[a]
                    .iter()
                    .zip(&sums[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    dist > 10.0 * noise,
                    "classes {a},{b} mean distance {dist} <= {}",
                    10.0 * noise
                );
            }
        }
    }

    #[test]
    fn every_class_appears() {
        let (_, map) = synth_cube(6, 16, 16, 4, 0.1, 13).unwrap();
        for class in 0..6u32 {
            assert!(map.labels.contains(&class), "class {class} missing");
        }
    }

    #[test]
    fn too_many_classes_is_rejected() {
        assert!(synth_cube(10, 3, 3, 2, 0.0, 1).is_err());
        assert!(synth_cube(1, 3, 3, 2, 0.0, 1).is_err());
    }
}
