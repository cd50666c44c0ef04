//! Principal component analysis over the spectral bands of a cube.
//!
//! Fitting eigendecomposes the band covariance accumulated over all pixels
//! (cyclic Jacobi rotations, f64). Component signs are normalized so that
//! each component's largest-magnitude entry is nonnegative, which makes the
//! model deterministic across runs and platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cube::Cube;
use crate::error::{Error, Result};

pub const PCA_MAGIC: &[u8; 8] = b"SSPCA1\0\0";

/// A fitted spectral PCA model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Per-band mean over the fitted pixels, length `bands`.
    pub mean: Vec<f64>,
    /// Row-orthonormal component matrix, `k` rows of length `bands`.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues matching the components, nonnegative and non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// eigenvectors as rows), unsorted.
fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if n <= 1 {
        return (a.iter().map(|r| r.first().copied().unwrap_or(0.0)).collect(), v);
    }

    let off_diag_norm = |a: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i][j] * a[i][j];
            }
        }
        s.sqrt()
    };

    let scale: f64 = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-14 * scale;
    for _sweep in 0..100 {
        if off_diag_norm(&a) <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vpk = v[p][k];
                    let vqk = v[q][k];
                    v[p][k] = c * vpk - s * vqk;
                    v[q][k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Fits a k-component PCA on all pixels of the cube.
pub fn pca_fit(cube: &Cube, k: usize) -> Result<PcaModel> {
    let b = cube.bands;
    let n = cube.pixel_count();
    if k == 0 || k > b.min(n) {
        return Err(Error::arg(format!(
            "component count {} out of range 1..={}",
            k,
            b.min(n)
        )));
    }

    let mut mean = vec![0.0f64; b];
    for row in 0..cube.height {
        for col in 0..cube.width {
            for (m, &x) in mean.iter_mut().zip(cube.spectrum(row, col)) {
                *m += x as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = vec![vec![0.0f64; b]; b];
    let mut centered = vec![0.0f64; b];
    for row in 0..cube.height {
        for col in 0..cube.width {
            for (c, (&x, &m)) in centered
                .iter_mut()
                .zip(cube.spectrum(row, col).iter().zip(&mean))
            {
                *c = x as f64 - m;
            }
            for i in 0..b {
                let ci = centered[i];
                for j in i..b {
                    cov[i][j] += ci * centered[j];
                }
            }
        }
    }
    for i in 0..b {
        for j in i..b {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| eigenvalues[j].partial_cmp(&eigenvalues[i]).unwrap());

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut comp = eigenvectors[idx].clone();
        // sign convention: largest-magnitude entry nonnegative
        let mut max_abs = 0.0;
        let mut max_pos = 0;
        for (p, &c) in comp.iter().enumerate() {
            if c.abs() > max_abs {
                max_abs = c.abs();
                max_pos = p;
            }
        }
        if comp[max_pos] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.push(comp);
        explained_variance.push(eigenvalues[idx].max(0.0));
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Projects every spectrum of the cube onto the model's components,
/// producing a cube with `k` bands.
pub fn pca_transform(model: &PcaModel, cube: &Cube) -> Result<Cube> {
    if cube.bands != model.input_dim() {
        return Err(Error::dim(format!(
            "cube has {} bands, model expects {}",
            cube.bands,
            model.input_dim()
        )));
    }
    let k = model.output_dim();
    let mut values = Vec::with_capacity(cube.pixel_count() * k);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let spectrum = cube.spectrum(row, col);
            for comp in &model.components {
                let mut acc = 0.0f64;
                for ((&x, &m), &c) in spectrum.iter().zip(&model.mean).zip(comp) {
                    acc += (x as f64 - m) * c;
                }
                values.push(acc as f32);
            }
        }
    }
    Cube::new(cube.height, cube.width, k, values)
}

/// Maps a k-band projected cube back to the original band space
/// (`componentsᵀ · y + mean`).
pub fn pca_inverse_transform(model: &PcaModel, cube: &Cube) -> Result<Cube> {
    if cube.bands != model.output_dim() {
        return Err(Error::dim(format!(
            "cube has {} bands, model produces {}",
            cube.bands,
            model.output_dim()
        )));
    }
    let b = model.input_dim();
    let mut values = Vec::with_capacity(cube.pixel_count() * b);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let coeffs = cube.spectrum(row, col);
            for band in 0..b {
                let mut acc = model.mean[band];
                for (comp, &y) in model.components.iter().zip(coeffs) {
                    acc += comp[band] * y as f64;
                }
                values.push(acc as f32);
            }
        }
    }
    Cube::new(cube.height, cube.width, b, values)
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(reader: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Saves a PCA model so inference can project unseen cubes exactly as the
/// training run did.
pub fn save_pca(model: &PcaModel, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(PCA_MAGIC)?;
    w.write_all(&(model.input_dim() as u32).to_le_bytes())?;
    w.write_all(&(model.output_dim() as u32).to_le_bytes())?;
    for &m in &model.mean {
        w.write_all(&m.to_le_bytes())?;
    }
    for comp in &model.components {
        for &c in comp {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for &v in &model.explained_variance {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<PcaModel> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PCA_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(PCA_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let b = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    if k == 0 || k > b {
        return Err(Error::format("pca model has invalid dims"));
    }
    let mut mean = Vec::with_capacity(b);
    for _ in 0..b {
        mean.push(read_f64(&mut r)?);
    }
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let mut comp = Vec::with_capacity(b);
        for _ in 0..b {
            comp.push(read_f64(&mut r)?);
        }
        components.push(comp);
    }
    let mut explained_variance = Vec::with_capacity(k);
    for _ in 0..k {
        explained_variance.push(read_f64(&mut r)?);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}
