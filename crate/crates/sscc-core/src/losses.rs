//! The training objective: a within-cluster InfoNCE term over label rows,
//! a between-cluster decorrelation term over batch-centered label columns,
//! and their weighted combination. Every loss comes with its exact gradient
//! with respect to both label batches.
//!
//! The within-cluster term treats the two views of a sample as the positive
//! pair and the remaining `2M - 2` rows of the joint batch as negatives
//! (NT-Xent). The between-cluster term centers every cluster column over the
//! batch, forms the C x C cosine cross-correlation matrix between the two
//! views, and pushes it toward the identity.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Norm guard: a collapsed row or constant column yields similarity 0 and a
/// finite gradient instead of a division by zero.
const NORM_EPS: f64 = 1e-12;

/// Scalars of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// InfoNCE temperature, > 0.
    pub tau: f64,
    /// Off-diagonal weight of the decorrelation term, >= 0.
    pub lambda: f64,
    /// Weight of the within-cluster term in the combination, >= 0.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            lambda: 5e-2,
            alpha: 5e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::arg("tau must be positive"));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::arg("lambda and alpha must be nonnegative"));
        }
        Ok(())
    }
}

/// Which loss terms drive the gradient; the composition sweeps switch single
/// terms on and off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Between-cluster plus alpha times within-cluster.
    #[default]
    Combined,
    /// Within-cluster term only.
    WithinOnly,
    /// Between-cluster term only.
    BetweenOnly,
}

impl LossMode {
    /// (within weight, between weight) of the total objective.
    pub fn weights(self, alpha: f64) -> (f64, f64) {
        match self {
            LossMode::Combined => (alpha, 1.0),
            LossMode::WithinOnly => (1.0, 0.0),
            LossMode::BetweenOnly => (0.0, 1.0),
        }
    }
}

/// Value and per-term breakdown of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub within: f64,
    pub between: f64,
}

/// Cosine similarity with the norm guard; zero-norm inputs map to 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    dot / ((nu.sqrt() + NORM_EPS) * (nv.sqrt() + NORM_EPS))
}

/// Gradient of `cosine_similarity(u, v)` with respect to `u`, written into
/// `out` scaled by `coef` (accumulating).
fn add_cosine_grad_wrt_u(u: &[f64], v: &[f64], coef: f64, out: &mut [f64]) {
    let mut dot = 0.0;
    let mut nu2 = 0.0;
    let mut nv2 = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu2 += a * a;
        nv2 += b * b;
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let denom = (nu + NORM_EPS) * (nv + NORM_EPS);
    let s = dot / denom;
    let self_term = if nu > 0.0 { s / (nu * (nu + NORM_EPS)) } else { 0.0 };
    for ((o, &a), &b) in out.iter_mut().zip(u).zip(v) {
        *o += coef * (b / denom - self_term * a);
    }
}

fn check_pair(ya: &Mat, yb: &Mat) -> Result<()> {
    if ya.rows() != yb.rows() || ya.cols() != yb.cols() {
        return Err(Error::dim(format!(
            "label batches disagree: {}x{} vs {}x{}",
            ya.rows(),
            ya.cols(),
            yb.rows(),
            yb.cols()
        )));
    }
    if ya.rows() < 2 {
        return Err(Error::arg(
            "within/between losses need at least 2 samples per batch",
        ));
    }
    Ok(())
}

/// NT-Xent similarity structure shared by the value and gradient paths.
struct NtXent {
    m: usize,
    sims: Vec<f64>,
    exps: Vec<f64>,
    denoms: Vec<f64>,
}

impl NtXent {
    fn build(ya: &Mat, yb: &Mat, tau: f64) -> Self {
        let m = ya.rows();
        let n = 2 * m;
        let row = |t: usize| -> &[f64] {
            if t < m {
                ya.row(t)
            } else {
                yb.row(t - m)
            }
        };
        let mut sims = vec![0.0; n * n];
        for t in 0..n {
            for r in (t + 1)..n {
                let s = cosine_similarity(row(t), row(r));
                sims[t * n + r] = s;
                sims[r * n + t] = s;
            }
        }
        let exps: Vec<f64> = sims.iter().map(|&s| (s / tau).exp()).collect();
        let mut denoms = vec![0.0; n];
        for t in 0..n {
            let mut d = 0.0;
            for r in 0..n {
                if r != t {
                    d += exps[t * n + r];
                }
            }
            denoms[t] = d;
        }
        NtXent { m, sims, exps, denoms }
    }

    fn positive(&self, t: usize) -> usize {
        if t < self.m {
            t + self.m
        } else {
            t - self.m
        }
    }

    fn loss(&self, tau: f64) -> f64 {
        let n = 2 * self.m;
        let mut total = 0.0;
        for t in 0..n {
            let p = self.positive(t);
            total += -(self.sims[t * n + p] / tau) + self.denoms[t].ln();
        }
        total / n as f64
    }
}

/// Within-cluster InfoNCE loss averaged over all anchors of both views.
pub fn within_cluster_loss(ya: &Mat, yb: &Mat, tau: f64) -> Result<f64> {
    check_pair(ya, yb)?;
    if !(tau > 0.0) {
        return Err(Error::arg("tau must be positive"));
    }
    Ok(NtXent::build(ya, yb, tau).loss(tau))
}

/// Within-cluster loss and its gradients with respect to both batches.
pub fn within_cluster_loss_grad(ya: &Mat, yb: &Mat, tau: f64) -> Result<(f64, Mat, Mat)> {
    check_pair(ya, yb)?;
    if !(tau > 0.0) {
        return Err(Error::arg("tau must be positive"));
    }
    let nt = NtXent::build(ya, yb, tau);
    let m = nt.m;
    let n = 2 * m;
    let loss = nt.loss(tau);

    // d loss / d sims[t][r], seen from anchor t
    let scale = 1.0 / (n as f64 * tau);
    let mut gsim = vec![0.0; n * n];
    for t in 0..n {
        let p = nt.positive(t);
        for r in 0..n {
            if r == t {
                continue;
            }
            let mut g = scale * nt.exps[t * n + r] / nt.denoms[t];
            if r == p {
                g -= scale;
            }
            gsim[t * n + r] = g;
        }
    }

    let row = |t: usize| -> &[f64] {
        if t < m {
            ya.row(t)
        } else {
            yb.row(t - m)
        }
    };
    let cols = ya.cols();
    let mut grad = vec![vec![0.0; cols]; n];
    for t in 0..n {
        for r in 0..n {
            if r == t {
                continue;
            }
            // sims[t][r] receives weight from both anchors t and r
            let coef = gsim[t * n + r] + gsim[r * n + t];
            if coef != 0.0 {
                add_cosine_grad_wrt_u(row(t), row(r), coef, &mut grad[t]);
            }
        }
    }

    let grad_ya = Mat::from_rows(&grad[..m].to_vec());
    let grad_yb = Mat::from_rows(&grad[m..].to_vec());
    Ok((loss, grad_ya, grad_yb))
}

/// Centers every column of the batch over its rows.
fn center_columns(y: &Mat) -> Mat {
    let mut out = y.clone();
    for j in 0..y.cols() {
        let mean: f64 = (0..y.rows()).map(|i| y.at(i, j)).sum::<f64>() / y.rows() as f64;
        for i in 0..y.rows() {
            *out.at_mut(i, j) -= mean;
        }
    }
    out
}

/// The C x C cosine cross-correlation matrix between the batch-centered
/// columns of the two views.
pub fn cross_correlation(ya: &Mat, yb: &Mat) -> Result<Mat> {
    check_pair(ya, yb)?;
    let a = center_columns(ya);
    let b = center_columns(yb);
    let c = ya.cols();
    let mut corr = Mat::zeros(c, c);
    let a_cols: Vec<Vec<f64>> = (0..c).map(|j| a.column(j)).collect();
    let b_cols: Vec<Vec<f64>> = (0..c).map(|j| b.column(j)).collect();
    for i in 0..c {
        for j in 0..c {
            *corr.at_mut(i, j) = cosine_similarity(&a_cols[i], &b_cols[j]);
        }
    }
    Ok(corr)
}

/// Decorrelation loss as a function of an already-computed correlation
/// matrix: squared diagonal deviation from 1 plus lambda times squared
/// off-diagonals.
pub fn barlow_from_correlation(corr: &Mat, lambda: f64) -> f64 {
    let c = corr.rows();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                diag += (corr.at(i, j) - 1.0).powi(2);
            } else {
                off += corr.at(i, j).powi(2);
            }
        }
    }
    diag + lambda * off
}

/// Between-cluster decorrelation loss of two label batches.
pub fn between_cluster_loss(ya: &Mat, yb: &Mat, lambda: f64) -> Result<f64> {
    let corr = cross_correlation(ya, yb)?;
    Ok(barlow_from_correlation(&corr, lambda))
}

/// Between-cluster loss and its gradients with respect to both batches.
pub fn between_cluster_loss_grad(ya: &Mat, yb: &Mat, lambda: f64) -> Result<(f64, Mat, Mat)> {
    check_pair(ya, yb)?;
    let m = ya.rows();
    let c = ya.cols();
    let a = center_columns(ya);
    let b = center_columns(yb);
    let a_cols: Vec<Vec<f64>> = (0..c).map(|j| a.column(j)).collect();
    let b_cols: Vec<Vec<f64>> = (0..c).map(|j| b.column(j)).collect();

    let mut corr = Mat::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            *corr.at_mut(i, j) = cosine_similarity(&a_cols[i], &b_cols[j]);
        }
    }
    let loss = barlow_from_correlation(&corr, lambda);

    // gradient flowing into each centered column
    let mut grad_a_cols = vec![vec![0.0; m]; c];
    let mut grad_b_cols = vec![vec![0.0; m]; c];
    for i in 0..c {
        for j in 0..c {
            let g = if i == j {
                2.0 * (corr.at(i, j) - 1.0)
            } else {
                2.0 * lambda * corr.at(i, j)
            };
            if g != 0.0 {
                add_cosine_grad_wrt_u(&a_cols[i], &b_cols[j], g, &mut grad_a_cols[i]);
                add_cosine_grad_wrt_u(&b_cols[j], &a_cols[i], g, &mut grad_b_cols[j]);
            }
        }
    }

    // chain through the centering: subtract each column gradient's mean
    let mut grad_ya = Mat::zeros(m, c);
    let mut grad_yb = Mat::zeros(m, c);
    for j in 0..c {
        let mean_a: f64 = grad_a_cols[j].iter().sum::<f64>() / m as f64;
        let mean_b: f64 = grad_b_cols[j].iter().sum::<f64>() / m as f64;
        for i in 0..m {
            *grad_ya.at_mut(i, j) = grad_a_cols[j][i] - mean_a;
            *grad_yb.at_mut(i, j) = grad_b_cols[j][i] - mean_b;
        }
    }
    Ok((loss, grad_ya, grad_yb))
}

/// The combined objective: between-cluster term plus alpha times the
/// within-cluster term.
pub fn total_loss(ya: &Mat, yb: &Mat, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let within = within_cluster_loss(ya, yb, config.tau)?;
    let between = between_cluster_loss(ya, yb, config.lambda)?;
    Ok(between + config.alpha * within)
}

/// Loss parts and gradients under the given mode. The within and between
/// values are always reported; only the active terms contribute to the
/// gradient and total.
pub fn loss_with_grad(
    ya: &Mat,
    yb: &Mat,
    config: &LossConfig,
    mode: LossMode,
) -> Result<(LossParts, Mat, Mat)> {
    config.validate()?;
    let (w_weight, b_weight) = mode.weights(config.alpha);
    let (within, gw_a, gw_b) = within_cluster_loss_grad(ya, yb, config.tau)?;
    let (between, gb_a, gb_b) = between_cluster_loss_grad(ya, yb, config.lambda)?;

    let m = ya.rows();
    let c = ya.cols();
    let mut grad_ya = Mat::zeros(m, c);
    let mut grad_yb = Mat::zeros(m, c);
    for i in 0..m {
        for j in 0..c {
            *grad_ya.at_mut(i, j) = w_weight * gw_a.at(i, j) + b_weight * gb_a.at(i, j);
            *grad_yb.at_mut(i, j) = w_weight * gw_b.at(i, j) + b_weight * gb_b.at(i, j);
        }
    }
    let parts = LossParts {
        total: w_weight * within + b_weight * between,
        within,
        between,
    };
    Ok((parts, grad_ya, grad_yb))
}
