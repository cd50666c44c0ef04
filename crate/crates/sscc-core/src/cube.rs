//! Hyperspectral cube and label map data model with binary file IO.
//!
//! Cube files are little-endian: magic `SSC1`, three u32 dims
//! (height, width, bands), then `height*width*bands` f32 values in
//! row-major (row, col, band) order. Label maps use magic `SSL1`, dims
//! (height, width, class count), then `height*width` u32 labels where
//! `0xFFFF_FFFF` marks an unlabeled pixel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"SSC1";
pub const LABELS_MAGIC: &[u8; 4] = b"SSL1";

/// Sentinel for pixels without ground truth.
pub const UNLABELED: u32 = u32::MAX;

/// A hyperspectral image: `height * width` pixels, each a spectrum of
/// `bands` values. Values are stored row-major as (row, col, band).
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
}

impl Cube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::arg("cube dimensions must all be at least 1"));
        }
        if values.len() != height * width * bands {
            return Err(Error::dim(format!(
                "cube payload has {} values, dims {}x{}x{} require {}",
                values.len(),
                height,
                width,
                bands,
                height * width * bands
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cube contains non-finite values".into()));
        }
        Ok(Cube { height, width, bands, values })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Cube {
            height,
            width,
            bands,
            values: vec![0.0; height * width * bands],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// The spectrum at (row, col) as a contiguous slice of length `bands`.
    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.bands;
        &self.values[base..base + self.bands]
    }

    #[inline]
    pub fn spectrum_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let base = (row * self.width + col) * self.bands;
        &mut self.values[base..base + self.bands]
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(row * self.width + col) * self.bands + band]
    }
}

/// Per-pixel ground-truth class labels aligned with a [`Cube`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Number of classes; every non-sentinel label is `< classes`.
    pub classes: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::arg("label map dimensions must all be at least 1"));
        }
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "label payload has {} entries, dims {}x{} require {}",
                labels.len(),
                height,
                width,
                height * width
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= classes) {
            return Err(Error::arg(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(LabelMap { height, width, classes, labels })
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

fn read_exact_magic(reader: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    Ok(())
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a cube from the `SSC1` binary format.
pub fn load_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    read_exact_magic(&mut reader, CUBE_MAGIC)?;
    let height = read_u32(&mut reader)? as usize;
    let width = read_u32(&mut reader)? as usize;
    let bands = read_u32(&mut reader)? as usize;
    let expected = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| Error::format("cube dims overflow"))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::format(format!(
            "cube payload is {} bytes, header {}x{}x{} requires {}",
            payload.len(),
            height,
            width,
            bands,
            expected * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Cube::new(height, width, bands, values)
}

/// Saves a cube in the `SSC1` binary format; `load_cube` recovers it
/// bit-exactly.
pub fn save_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    writer.write_all(CUBE_MAGIC)?;
    writer.write_all(&(cube.height as u32).to_le_bytes())?;
    writer.write_all(&(cube.width as u32).to_le_bytes())?;
    writer.write_all(&(cube.bands as u32).to_le_bytes())?;
    for v in &cube.values {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads a label map from the `SSL1` binary format.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    read_exact_magic(&mut reader, LABELS_MAGIC)?;
    let height = read_u32(&mut reader)? as usize;
    let width = read_u32(&mut reader)? as usize;
    let classes = read_u32(&mut reader)? as usize;
    let expected = height
        .checked_mul(width)
        .ok_or_else(|| Error::format("label map dims overflow"))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::format(format!(
            "label payload is {} bytes, header {}x{} requires {}",
            payload.len(),
            height,
            width,
            expected * 4
        )));
    }
    let labels: Vec<u32> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LabelMap::new(height, width, classes, labels)
}

/// Saves a label map in the `SSL1` binary format.
pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    writer.write_all(LABELS_MAGIC)?;
    writer.write_all(&(labels.height as u32).to_le_bytes())?;
    writer.write_all(&(labels.width as u32).to_le_bytes())?;
    writer.write_all(&(labels.classes as u32).to_le_bytes())?;
    for l in &labels.labels {
        writer.write_all(&l.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}
