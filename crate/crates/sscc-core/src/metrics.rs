//! External clustering evaluation: optimal label matching, the five
//! agreement metrics, and the divergence score of label representations.
//!
//! Predicted cluster indices carry no canonical order, so ACC, Kappa, and
//! the per-class accuracies are computed after matching predicted clusters
//! to ground-truth classes with the Hungarian algorithm (exact optimum;
//! ties resolved to the lexicographically smallest permutation). NMI is
//! normalized by the geometric mean of the entropies; a single-cluster
//! partition has entropy 0 and NMI is defined as 0 there, while ARI on two
//! identical trivial partitions is defined as 1.

use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::mat::Mat;

/// Hungarian-matched clustering metrics plus optional divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub kappa: f64,
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    /// Accuracy per ground-truth class after matching.
    pub per_class_acc: Vec<f64>,
    /// matching[predicted cluster] = ground-truth class.
    pub matching: Vec<usize>,
    /// confusion[truth][mapped prediction].
    pub confusion: Vec<Vec<usize>>,
    pub divergence: Option<f64>,
}

/// Minimum-cost assignment on a square cost matrix (potentials + augmenting
/// paths, O(n^3)). Returns assignment[row] = column.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum total agreement over assignments of `rows` to `cols` in the
/// count matrix.
fn max_agreement(counts: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    debug_assert_eq!(rows.len(), cols.len());
    if rows.is_empty() {
        return 0;
    }
    let cost: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| -counts[r][c]).collect())
        .collect();
    let assignment = min_cost_assignment(&cost);
    rows.iter()
        .zip(assignment)
        .map(|(&r, j)| counts[r][cols[j]])
        .sum()
}

fn contingency(pred: &[u32], truth: &[u32], classes: usize) -> Vec<Vec<i64>> {
    let mut counts = vec![vec![0i64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p as usize][t as usize] += 1;
    }
    counts
}

fn check_labels(pred: &[u32], truth: &[u32], classes: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::arg("no samples to evaluate"));
    }
    if classes == 0 {
        return Err(Error::arg("class count must be positive"));
    }
    for &l in pred.iter().chain(truth) {
        if l as usize >= classes {
            return Err(Error::arg(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
    }
    Ok(())
}

/// The permutation of predicted clusters onto ground-truth classes that
/// maximizes agreement; among optimal matchings, the lexicographically
/// smallest. `matching[predicted] = class`.
pub fn hungarian_match(pred: &[u32], truth: &[u32], classes: usize) -> Result<Vec<usize>> {
    check_labels(pred, truth, classes)?;
    let counts = contingency(pred, truth, classes);
    let all: Vec<usize> = (0..classes).collect();
    let optimum = max_agreement(&counts, &all, &all);

    // fix rows one by one to the smallest column that still completes
    // to the optimum
    let mut matching = vec![0usize; classes];
    let mut free_cols: Vec<usize> = (0..classes).collect();
    let mut fixed_sum = 0i64;
    for row in 0..classes {
        let remaining_rows: Vec<usize> = (row + 1..classes).collect();
        let mut chosen = None;
        for (pos, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols
                .iter()
                .copied()
                .filter(|&c| c != col)
                .collect();
            let rest = max_agreement(&counts, &remaining_rows, &rest_cols);
            if fixed_sum + counts[row][col] + rest == optimum {
                chosen = Some((pos, col));
                break;
            }
        }
        let (pos, col) = chosen.expect("an optimal completion always exists");
        fixed_sum += counts[row][col];
        matching[row] = col;
        free_cols.remove(pos);
    }
    Ok(matching)
}

fn entropy(counts: &[i64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn choose2(n: i64) -> f64 {
    (n * (n - 1)) as f64 / 2.0
}

/// True when the two labelings induce the same partition of the samples.
fn partitions_identical(counts: &[Vec<i64>]) -> bool {
    for row in counts {
        if row.iter().filter(|&&c| c > 0).count() > 1 {
            return false;
        }
    }
    for j in 0..counts.len() {
        if counts.iter().filter(|row| row[j] > 0).count() > 1 {
            return false;
        }
    }
    true
}

/// All five agreement metrics plus per-class accuracies and the confusion
/// matrix, computed after Hungarian matching.
pub fn clustering_metrics(pred: &[u32], truth: &[u32], classes: usize) -> Result<EvalReport> {
    let matching = hungarian_match(pred, truth, classes)?;
    let n = pred.len() as f64;
    let counts = contingency(pred, truth, classes);

    // confusion over mapped predictions
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t as usize][matching[p as usize]] += 1;
    }

    let agreement: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let acc = agreement as f64 / n;

    // Kappa on the mapped confusion matrix
    let p_o = acc;
    let mut p_e = 0.0;
    for c in 0..classes {
        let row: usize = confusion[c].iter().sum();
        let col: usize = confusion.iter().map(|r| r[c]).sum();
        p_e += (row as f64 / n) * (col as f64 / n);
    }
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        if (p_o - 1.0).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    // NMI with geometric-mean normalization (relabeling-invariant)
    let pred_marginal: Vec<i64> = counts.iter().map(|r| r.iter().sum()).collect();
    let truth_marginal: Vec<i64> = (0..classes).map(|t| counts.iter().map(|r| r[t]).sum()).collect();
    let h_pred = entropy(&pred_marginal, n);
    let h_truth = entropy(&truth_marginal, n);
    let nmi = if h_pred <= 0.0 || h_truth <= 0.0 {
        0.0
    } else {
        let mut mi = 0.0;
        for p in 0..classes {
            for t in 0..classes {
                let c = counts[p][t];
                if c > 0 {
                    let joint = c as f64 / n;
                    mi += joint
                        * (joint / ((pred_marginal[p] as f64 / n) * (truth_marginal[t] as f64 / n)))
                            .ln();
                }
            }
        }
        mi / (h_pred * h_truth).sqrt()
    };

    // ARI from the contingency pair counts
    let index: f64 = counts
        .iter()
        .flat_map(|r| r.iter())
        .map(|&c| choose2(c))
        .sum();
    let sum_pred: f64 = pred_marginal.iter().map(|&c| choose2(c)).sum();
    let sum_truth: f64 = truth_marginal.iter().map(|&c| choose2(c)).sum();
    let total_pairs = choose2(pred.len() as i64);
    let ari = if total_pairs == 0.0 {
        1.0
    } else {
        let expected = sum_pred * sum_truth / total_pairs;
        let max_index = 0.5 * (sum_pred + sum_truth);
        if (max_index - expected).abs() < 1e-12 {
            if partitions_identical(&counts) {
                1.0
            } else {
                0.0
            }
        } else {
            (index - expected) / (max_index - expected)
        }
    };

    // Purity allows many-to-one assignment of clusters to classes
    let purity: f64 = counts
        .iter()
        .map(|row| *row.iter().max().unwrap() as f64)
        .sum::<f64>()
        / n;

    let per_class_acc: Vec<f64> = (0..classes)
        .map(|t| {
            let class_total: usize = confusion[t].iter().sum();
            if class_total == 0 {
                0.0
            } else {
                confusion[t][t] as f64 / class_total as f64
            }
        })
        .collect();

    Ok(EvalReport {
        acc,
        kappa,
        nmi,
        ari,
        purity,
        per_class_acc,
        matching,
        confusion,
        divergence: None,
    })
}

/// Divergence of label representations: mean within-class cosine cohesion
/// over the between-class scatter of class means around the global mean.
/// Larger values mean better separated label representations.
pub fn divergence_score(label_reps: &Mat, truth: &[u32]) -> Result<f64> {
    if label_reps.rows() != truth.len() {
        return Err(Error::dim(format!(
            "{} label rows vs {} ground-truth labels",
            label_reps.rows(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::arg("no samples"));
    }
    let classes = *truth.iter().max().unwrap() as usize + 1;
    let dim = label_reps.cols();

    let mut class_sums = vec![vec![0.0f64; dim]; classes];
    let mut class_counts = vec![0usize; classes];
    let mut global_mean = vec![0.0f64; dim];
    for (i, &t) in truth.iter().enumerate() {
        let row = label_reps.row(i);
        class_counts[t as usize] += 1;
        for (s, &v) in class_sums[t as usize].iter_mut().zip(row) {
            *s += v;
        }
        for (g, &v) in global_mean.iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(empty) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("class {empty} has no samples")));
    }
    for g in &mut global_mean {
        *g /= truth.len() as f64;
    }
    let class_means: Vec<Vec<f64>> = class_sums
        .iter()
        .zip(&class_counts)
        .map(|(sums, &count)| sums.iter().map(|&s| s / count as f64).collect())
        .collect();

    let mut numerator = 0.0;
    let mut cohesion = vec![0.0f64; classes];
    for (i, &t) in truth.iter().enumerate() {
        cohesion[t as usize] += cosine_similarity(label_reps.row(i), &class_means[t as usize]);
    }
    for (&c, &count) in cohesion.iter().zip(&class_counts) {
        numerator += c / count as f64;
    }

    let denominator: f64 = class_means
        .iter()
        .map(|mean| cosine_similarity(mean, &global_mean))
        .sum();
    if denominator.abs() < 1e-12 {
        return Err(Error::Degenerate(
            "between-class scatter is zero; divergence undefined".into(),
        ));
    }
    Ok(numerator / denominator)
}

impl EvalReport {
    pub fn csv_header(with_divergence: bool) -> String {
        if with_divergence {
            "acc,kappa,nmi,ari,purity,divergence".to_string()
        } else {
            "acc,kappa,nmi,ari,purity".to_string()
        }
    }

    pub fn to_csv_row(&self) -> String {
        let base = format!(
            "{},{},{},{},{}",
            self.acc, self.kappa, self.nmi, self.ari, self.purity
        );
        match self.divergence {
            Some(d) => format!("{base},{d}"),
            None => base,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("ACC     {:.6}\n", self.acc));
        out.push_str(&format!("Kappa   {:.6}\n", self.kappa));
        out.push_str(&format!("NMI     {:.6}\n", self.nmi));
        out.push_str(&format!("ARI     {:.6}\n", self.ari));
        out.push_str(&format!("Purity  {:.6}\n", self.purity));
        if let Some(d) = self.divergence {
            out.push_str(&format!("S       {:.6}\n", d));
        }
        out.push_str("per-class accuracy:\n");
        for (c, acc) in self.per_class_acc.iter().enumerate() {
            out.push_str(&format!("  class {c:3}  {acc:.6}\n"));
        }
        out.push_str("matching (predicted -> class):\n");
        for (p, t) in self.matching.iter().enumerate() {
            out.push_str(&format!("  {p} -> {t}\n"));
        }
        out
    }

    /// Confusion matrix as CSV, rows = ground truth, cols = mapped
    /// predictions.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
