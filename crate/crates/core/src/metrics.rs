//! Clustering accuracy under the best one-to-one relabeling, and kNN error
//! of labeled embeddings.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Minimum-cost perfect matching of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `mapping[row]` is the column assigned to that row.
    pub mapping: Vec<usize>,
    pub cost: f64,
}

/// Kuhn–Munkres with row and column potentials, `O(n³)`.
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
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
    let mut mapping = vec![0; n];
    for j in 1..=n {
        mapping[p[j] - 1] = j - 1;
    }
    mapping
}

fn sub_optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
    let m = solve(&sub);
    m.iter().enumerate().map(|(i, &j)| sub[i][j]).sum()
}

/// Minimum-cost assignment of a square matrix. Among optimal assignments the
/// lexicographically smallest mapping is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Input("hungarian needs a square cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("hungarian needs finite costs".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let best = sub_optimum(cost, &all, &all);
    let tol = 1e-9 * best.abs().max(1.0);

    // Fix rows in order, each to the smallest column that keeps the optimum reachable.
    let mut mapping = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut spent = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let choice = free
            .iter()
            .position(|&j| {
                let cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
                spent + cost[i][j] + sub_optimum(cost, &rest_rows, &cols) <= best + tol
            })
            .unwrap_or(0);
        let j = free.remove(choice);
        spent += cost[i][j];
        mapping.push(j);
    }
    let cost = mapping.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(AssignmentResult { mapping, cost })
}

/// `counts[c][l]`: samples with cluster `c` and label `l`, padded square.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input("accuracy needs at least one sample".into()));
    }
    let n = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n]; n];
    for (&c, &l) in pred.iter().zip(truth) {
        counts[c][l] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub acc: f64,
    pub matched: usize,
    /// Cluster index to label index.
    pub mapping: Vec<usize>,
}

/// Best-relabeling accuracy with the mapping that achieves it.
pub fn accuracy_report(pred: &[usize], truth: &[usize]) -> Result<AccuracyReport> {
    let counts = contingency(pred, truth)?;
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| -(c as f64)).collect()).collect();
    let a = hungarian(&cost)?;
    let matched = a.mapping.iter().enumerate().map(|(c, &l)| counts[c][l]).sum();
    Ok(AccuracyReport {
        acc: matched as f64 / pred.len() as f64,
        matched,
        mapping: a.mapping,
    })
}

/// Fraction of samples whose cluster maps to their label under the best
/// one-to-one mapping.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(accuracy_report(pred, truth)?.acc)
}

fn vote(train: &Tensor, train_labels: &[usize], query: &[f64], skip: Option<usize>, k: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = (0..train.rows())
        .filter(|&i| Some(i) != skip)
        .map(|i| {
            let d: f64 = train.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, by_distance);
        dist.truncate(k);
    }
    let n_labels = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; n_labels];
    for &(_, i) in &dist {
        votes[train_labels[i]] += 1;
    }
    // first maximum: smallest label wins ties
    let mut best = 0;
    for (l, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = l;
        }
    }
    best
}

fn check_knn(train: &Tensor, train_labels: &[usize], k: usize, available: usize) -> Result<()> {
    if train_labels.len() != train.rows() {
        return Err(Error::Input(format!("{} labels for {} embeddings", train_labels.len(), train.rows())));
    }
    if k == 0 || k > available {
        return Err(Error::Input(format!("k={k} must lie in [1, {available}]")));
    }
    Ok(())
}

/// Misclassification rate of a Euclidean k-nearest-neighbour majority vote.
/// Distance ties go to the smaller training index, vote ties to the smaller label.
pub fn knn_error(train: &Tensor, train_labels: &[usize], test: &Tensor, test_labels: &[usize], k: usize) -> Result<f64> {
    check_knn(train, train_labels, k, train.rows())?;
    if test.cols() != train.cols() {
        return Err(Error::Input(format!("test width {} differs from train width {}", test.cols(), train.cols())));
    }
    if test_labels.len() != test.rows() || test.rows() == 0 {
        return Err(Error::Input("test labels must match a non-empty test set".into()));
    }
    let wrong = (0..test.rows()).filter(|&i| vote(train, train_labels, test.row(i), None, k) != test_labels[i]).count();
    Ok(wrong as f64 / test.rows() as f64)
}

/// Leave-one-out variant: each point is classified by the others.
pub fn knn_error_loo(emb: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_knn(emb, labels, k, emb.rows().saturating_sub(1))?;
    let wrong = (0..emb.rows()).filter(|&i| vote(emb, labels, emb.row(i), Some(i), k) != labels[i]).count();
    Ok(wrong as f64 / emb.rows() as f64)
}
