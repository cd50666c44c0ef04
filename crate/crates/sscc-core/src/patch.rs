//! Patch extraction: one square spatial window per pixel, mirror-padded at
//! the borders so border patches carry no zero spectra.

use crate::cube::{Cube, LabelMap, UNLABELED};
use crate::error::{Error, Result};

/// A square spatial window around one pixel. Values are stored row-major as
/// (row, col, band), matching the cube layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub center_row: usize,
    pub center_col: usize,
}

impl Patch {
    #[inline]
    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(row * self.side + col) * self.channels + band]
    }

    #[inline]
    pub fn value_mut(&mut self, row: usize, col: usize, band: usize) -> &mut f32 {
        &mut self.values[(row * self.side + col) * self.channels + band]
    }

    /// The spectrum at a spatial position as a contiguous slice.
    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.side + col) * self.channels;
        &self.values[base..base + self.channels]
    }

    /// A patch is a tiny cube; useful for dumping augmented views to disk.
    pub fn to_cube(&self) -> Cube {
        Cube {
            height: self.side,
            width: self.side,
            bands: self.channels,
            values: self.values.clone(),
        }
    }
}

/// Patches plus, when extraction was restricted to labeled pixels, the
/// aligned ground-truth labels.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub labels: Option<Vec<u32>>,
}

/// Mirror-reflect an index into [0, n); the edge sample is not repeated.
#[inline]
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

fn cut_patch(cube: &Cube, center_row: usize, center_col: usize, side: usize) -> Patch {
    let radius = (side / 2) as isize;
    let mut values = Vec::with_capacity(side * side * cube.bands);
    for dr in -radius..=radius {
        let src_row = reflect(center_row as isize + dr, cube.height);
        for dc in -radius..=radius {
            let src_col = reflect(center_col as isize + dc, cube.width);
            values.extend_from_slice(cube.spectrum(src_row, src_col));
        }
    }
    Patch {
        side,
        channels: cube.bands,
        values,
        center_row,
        center_col,
    }
}

/// Extracts one patch per pixel, or per labeled pixel when a label map is
/// given. Borders are mirror padded.
pub fn extract_patches(cube: &Cube, labels: Option<&LabelMap>, side: usize) -> Result<PatchSet> {
    if side % 2 == 0 {
        return Err(Error::arg(format!("patch side {side} must be odd")));
    }
    if side > 2 * cube.height.min(cube.width) {
        return Err(Error::arg(format!(
            "patch side {} too large for mirror padding on a {}x{} cube",
            side, cube.height, cube.width
        )));
    }
    if let Some(map) = labels {
        if map.height != cube.height || map.width != cube.width {
            return Err(Error::dim(format!(
                "label map {}x{} does not match cube {}x{}",
                map.height, map.width, cube.height, cube.width
            )));
        }
    }

    let mut patches = Vec::new();
    let mut aligned = labels.map(|_| Vec::new());
    for row in 0..cube.height {
        for col in 0..cube.width {
            if let Some(map) = labels {
                let label = map.label(row, col);
                if label == UNLABELED {
                    continue;
                }
                aligned.as_mut().unwrap().push(label);
            }
            patches.push(cut_patch(cube, row, col, side));
        }
    }
    Ok(PatchSet {
        patches,
        labels: aligned,
    })
}
