//! Hungarian-matched evaluation and the analysis reports built on it.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{kmeans_restarts, Matrix, RngSeed, KMEANS_DEFAULT_ITERS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// `mapping[row] = column` of the optimal matching.
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// row/column potentials, O(n³)).
pub fn hungarian_assign(cost: &Matrix) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix must be square, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::DegenerateInput("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[owner[j] - 1] = j - 1;
    }
    let total_cost = mapping.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(Assignment {
        mapping,
        total_cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GcdEvalReport {
    pub acc_all: f64,
    /// Accuracy on samples whose true label is old; 0 when there are none.
    pub acc_old: f64,
    /// Accuracy on samples whose true label is new; 0 when there are none.
    pub acc_new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    pub correct_old: usize,
    pub correct_new: usize,
    /// Predicted cluster id → label id (padded ids included).
    pub assignment: Assignment,
}

impl GcdEvalReport {
    /// Label assigned to a predicted cluster id.
    pub fn map(&self, pred: usize) -> usize {
        self.assignment.mapping[pred]
    }
}

/// Count-maximising matching of predicted ids to labels, zero-padded to square.
pub(crate) fn match_clusters(preds: &[usize], labels: &[usize]) -> Result<Assignment> {
    let n = preds
        .iter()
        .chain(labels)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut counts = Matrix::zeros(n, n);
    for (&p, &l) in preds.iter().zip(labels) {
        counts[(p, l)] += 1.0;
    }
    let mut a = hungarian_assign(&(-counts))?;
    a.total_cost = -a.total_cost;
    Ok(a)
}

/// Clustering accuracy under the best one-to-one relabelling of predicted ids.
/// Old/new accuracies reuse the single global matching.
pub fn acc_gcd(preds: &[usize], labels: &[usize], old_set: &[usize]) -> Result<GcdEvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to evaluate"));
    }
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let assignment = match_clusters(preds, labels)?;
    let (mut n_old, mut correct_old, mut correct_new) = (0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        let hit = assignment.mapping[p] == l;
        if old_set.contains(&l) {
            n_old += 1;
            correct_old += hit as usize;
        } else {
            correct_new += hit as usize;
        }
    }
    let n_all = preds.len();
    let n_new = n_all - n_old;
    let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(GcdEvalReport {
        acc_all: frac(correct_old + correct_new, n_all),
        acc_old: frac(correct_old, n_old),
        acc_new: frac(correct_new, n_new),
        n_all,
        n_old,
        n_new,
        correct_old,
        correct_new,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KEstimate {
    pub k_star: usize,
    /// `(k, accuracy on the labelled subset)` in the order of `k_range`.
    pub table: Vec<(usize, f64)>,
}

/// k-means restarts per candidate in [`estimate_k`].
pub const ESTIMATE_K_RESTARTS: usize = 5;

/// Runs k-means on all rows for each candidate `k` and scores it by matched
/// accuracy on the labelled rows only. Ties go to the smaller `k`.
pub fn estimate_k(
    features: &Matrix,
    labels: &[Option<usize>],
    k_range: &[usize],
    seed: RngSeed,
) -> Result<KEstimate> {
    if k_range.is_empty() {
        return Err(Error::EmptyInput("k range"));
    }
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} label slots for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let labelled: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    if labelled.is_empty() {
        return Err(Error::EmptyInput("labelled subset"));
    }
    let truth: Vec<usize> = labelled.iter().map(|&(_, l)| l).collect();
    let table = k_range
        .par_iter()
        .map(|&k| {
            let km = kmeans_restarts(features, k, seed, KMEANS_DEFAULT_ITERS, ESTIMATE_K_RESTARTS)?;
            let preds: Vec<usize> = labelled.iter().map(|&(i, _)| km.assignments[i]).collect();
            Ok((k, acc_gcd(&preds, &truth, &[])?.acc_all))
        })
        .collect::<Result<Vec<_>>>()?;
    let (k_star, _) = table
        .iter()
        .copied()
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (k, acc)| {
            if acc > best.1 || (acc == best.1 && k < best.0) {
                (k, acc)
            } else {
                best
            }
        });
    Ok(KEstimate { k_star, table })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityBin {
    pub bin: usize,
    pub mean_similarity: f64,
    pub accuracy: f64,
    pub count: usize,
}

pub fn cosine_rows(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "feature blocks {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.nrows())
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            let denom = (ra.norm() * rb.norm()).max(1e-12);
            ra.dot(&rb) / denom
        })
        .collect())
}

/// Sorts samples by cross-modal cosine similarity and reports the accuracy of
/// equal-size groups, lowest similarity first. The last group absorbs the
/// remainder.
pub fn similarity_bins(
    h_x: &Matrix,
    h_y: &Matrix,
    correct: &[bool],
    bins: usize,
) -> Result<Vec<SimilarityBin>> {
    let m = h_x.nrows();
    if m == 0 {
        return Err(Error::EmptyInput("no samples to bin"));
    }
    if bins < 2 || m < bins {
        return Err(Error::DegenerateInput(format!(
            "need 2 <= bins <= samples, got {bins} bins for {m} samples"
        )));
    }
    if correct.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} correctness flags for {m} samples",
            correct.len()
        )));
    }
    let sims = cosine_rows(h_x, h_y)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    let size = m / bins;
    Ok((0..bins)
        .map(|b| {
            let end = if b + 1 == bins { m } else { (b + 1) * size };
            let members = &order[b * size..end];
            let n = members.len() as f64;
            SimilarityBin {
                bin: b,
                mean_similarity: members.iter().map(|&i| sims[i]).sum::<f64>() / n,
                accuracy: members.iter().filter(|&&i| correct[i]).count() as f64 / n,
                count: members.len(),
            }
        })
        .collect())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBias {
    pub label: usize,
    pub true_count: usize,
    pub predicted_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    /// Sorted by true count, largest first; ties by label.
    pub classes: Vec<ClassBias>,
    /// `confusion[true_is_new][pred_is_new]`.
    pub confusion: [[usize; 2]; 2],
}

impl BiasReport {
    /// Share of new-class samples predicted as some new class.
    pub fn new_recall(&self) -> f64 {
        let row = self.confusion[1];
        let n = row[0] + row[1];
        if n == 0 {
            0.0
        } else {
            row[1] as f64 / n as f64
        }
    }
}

pub fn bias_report(preds: &[usize], labels: &[usize], old_set: &[usize]) -> Result<BiasReport> {
    let report = acc_gcd(preds, labels, old_set)?;
    let num_labels = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut true_count = vec![0usize; num_labels];
    let mut predicted_count = vec![0usize; num_labels];
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        let mapped = report.map(p);
        true_count[l] += 1;
        if mapped < num_labels {
            predicted_count[mapped] += 1;
        }
        let true_new = !old_set.contains(&l) as usize;
        let pred_new = !old_set.contains(&mapped) as usize;
        confusion[true_new][pred_new] += 1;
    }
    let mut classes: Vec<ClassBias> = (0..num_labels)
        .map(|label| ClassBias {
            label,
            true_count: true_count[label],
            predicted_count: predicted_count[label],
        })
        .collect();
    classes.sort_by(|a, b| b.true_count.cmp(&a.true_count).then(a.label.cmp(&b.label)));
    Ok(BiasReport { classes, confusion })
}

/// Argmax of summed logits; ties go to the smaller id.
pub fn predict_vote(logits_x: &Matrix, logits_y: &Matrix) -> Result<Vec<usize>> {
    if logits_x.shape() != logits_y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "logit blocks {:?} and {:?}",
            logits_x.shape(),
            logits_y.shape()
        )));
    }
    let sum = logits_x + logits_y;
    Ok(argmax_rows(&sum))
}

/// Row-wise argmax, first maximum wins.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..m.ncols() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
