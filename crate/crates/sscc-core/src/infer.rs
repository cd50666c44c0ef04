//! Online cluster assignment: a forward pass and an argmax per sample, no
//! refitting, so patch sets unseen during training cluster the same way.

use crate::error::{Error, Result};
use crate::mat::LabelBatch;
use crate::network::Network;
use crate::patch::Patch;

/// Hard cluster labels with the winning softmax activation per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<u32>,
    pub confidences: Vec<f64>,
}

/// Argmax with ties broken toward the lowest cluster index.
pub fn argmax_row(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_val = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_val {
            best_val = v;
            best = j;
        }
    }
    (best, best_val)
}

/// Assigns every patch to the cluster with the largest label-representation
/// activation. The result is independent of how the patches are split into
/// batches.
pub fn assign_clusters(
    net: &Network,
    patches: &[Patch],
    batch_size: usize,
) -> Result<ClusterAssignment> {
    if patches.is_empty() {
        return Err(Error::arg("no patches to assign"));
    }
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut labels = Vec::with_capacity(patches.len());
    let mut confidences = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size) {
        let (_, label_batch) = net.forward(chunk)?;
        for i in 0..label_batch.rows() {
            let (label, confidence) = argmax_row(label_batch.row(i));
            labels.push(label as u32);
            confidences.push(confidence);
        }
    }
    Ok(ClusterAssignment { labels, confidences })
}

/// Full label representations for every patch, batched like
/// [`assign_clusters`].
pub fn label_representations(
    net: &Network,
    patches: &[Patch],
    batch_size: usize,
) -> Result<LabelBatch> {
    if patches.is_empty() {
        return Err(Error::arg("no patches to represent"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let (_, label_batch) = net.forward(chunk)?;
        for i in 0..label_batch.rows() {
            rows.push(label_batch.row(i).to_vec());
        }
    }
    Ok(LabelBatch::from_rows(&rows))
}
