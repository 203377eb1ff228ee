//! Spherical k-means over l2-normalized embeddings.
//!
//! The objective is `−(1/N) Σ_n g_n · C[:, label_n]`: each point is assigned
//! to the centroid with the largest cosine, and each centroid is the
//! normalized mean of its members. Initialization is k-means++ under the
//! chord distance `2 − 2 cos`, and the best of several restarts is kept.

use std::path::Path;

use rand::Rng;

use crate::audio::container;
use crate::error::{Error, Result};
use crate::nn::ops::dot;
use crate::nn::Blob;
use crate::par;

/// Tolerance on unit norms for normalized rows and centroid columns.
pub const UNIT_TOL: f64 = 1e-6;

/// Return a copy of `m` with every row scaled to unit l2 norm.
pub fn normalize_rows(m: &Blob) -> Result<Blob> {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("row {r} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// N×d embeddings, every row unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    rows: Blob,
}

impl EmbeddingBank {
    /// Normalize `rows` and wrap them.
    pub fn from_raw(rows: &Blob) -> Result<Self> {
        Ok(EmbeddingBank {
            rows: normalize_rows(rows)?,
        })
    }

    /// Wrap rows that are already unit-norm; errors otherwise.
    pub fn from_normalized(rows: Blob) -> Result<Self> {
        for r in 0..rows.rows {
            let n = dot(rows.row(r), rows.row(r)).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::contract(format!("bank row {r} has norm {n}")));
            }
        }
        Ok(EmbeddingBank { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.rows.row(n)
    }

    pub fn as_blob(&self) -> &Blob {
        &self.rows
    }
}

/// d×K centroid matrix. Stored column-per-row (`[K × d]`), which is also the
/// layout of the prototype head's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidMatrix {
    columns: Blob,
}

impl CentroidMatrix {
    /// Columns given as rows of a `[K × d]` blob; each is normalized.
    pub fn from_columns(columns: &Blob) -> Result<Self> {
        Ok(CentroidMatrix {
            columns: normalize_rows(columns)?,
        })
    }

    pub fn k(&self) -> usize {
        self.columns.rows
    }

    pub fn dim(&self) -> usize {
        self.columns.cols
    }

    pub fn column(&self, k: usize) -> &[f64] {
        self.columns.row(k)
    }

    /// `[K × d]`: row k is centroid k.
    pub fn as_rows(&self) -> &Blob {
        &self.columns
    }

    /// Write as a `d × K` float32 matrix.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        let mut values = vec![0f32; d * k];
        for c in 0..k {
            for (r, &v) in self.column(c).iter().enumerate() {
                values[r * k + c] = v as f32;
            }
        }
        container::write_matrix(path, d, k, &values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (d, k, values) = container::read_matrix(path)?;
        let mut cols = Blob::zeros(k, d);
        for r in 0..d {
            for c in 0..k {
                cols.row_mut(c)[r] = values[r * k + c] as f64;
            }
        }
        Self::from_columns(&cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iters: 50,
            tol: 1e-6,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub centroids: CentroidMatrix,
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after every assignment, one trace per restart.
    pub restart_histories: Vec<Vec<f64>>,
}

impl ClusterResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        cluster_sizes(&self.labels, self.centroids.k())
    }
}

pub fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

/// Fraction of points whose cluster's majority true label equals their own.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(labels.len(), truth.len());
    if labels.is_empty() {
        return 0.0;
    }
    let k = labels.iter().max().unwrap() + 1;
    let t = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; t]; k];
    for (&l, &y) in labels.iter().zip(truth) {
        table[l][y] += 1;
    }
    let majority: usize = table.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    majority as f64 / labels.len() as f64
}

fn check_dims(bank: &EmbeddingBank, c: &CentroidMatrix) -> Result<()> {
    if bank.dim() != c.dim() {
        return Err(Error::contract(format!(
            "bank dim {} vs centroid dim {}",
            bank.dim(),
            c.dim()
        )));
    }
    Ok(())
}

/// Best centroid per point (lowest index on ties) and the objective.
pub fn assign(bank: &EmbeddingBank, c: &CentroidMatrix) -> Result<(Vec<usize>, f64)> {
    check_dims(bank, c)?;
    let best = par::map_range(bank.len(), |n| {
        let g = bank.row(n);
        let mut arg = 0;
        let mut top = dot(g, c.column(0));
        for k in 1..c.k() {
            let s = dot(g, c.column(k));
            if s > top {
                top = s;
                arg = k;
            }
        }
        (arg, top)
    });
    let total: f64 = best.iter().map(|(_, s)| s).sum();
    let labels = best.into_iter().map(|(l, _)| l).collect();
    Ok((labels, -total / bank.len() as f64))
}

/// Normalized member means; empty (or zero-mean) clusters are reseeded.
///
/// Reseeding picks, per empty cluster in index order, the not-yet-used bank
/// row with the lowest cosine to its own cluster's new centroid. Exact ties
/// are broken with `rng`.
pub fn update_centroids<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    labels: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<CentroidMatrix> {
    if labels.len() != bank.len() {
        return Err(Error::contract("one label per bank row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} outside [0, {k})")));
    }
    let d = bank.dim();
    let mut members = vec![Vec::new(); k];
    for (n, &l) in labels.iter().enumerate() {
        members[l].push(n);
    }
    let sums: Vec<Option<Vec<f64>>> = par::map_range(k, |c| {
        let mut s = vec![0.0; d];
        for &n in &members[c] {
            for (a, v) in s.iter_mut().zip(bank.row(n)) {
                *a += v;
            }
        }
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm > 1e-12).then(|| s.into_iter().map(|v| v / norm).collect())
    });
    let empty: Vec<usize> = (0..k).filter(|&c| sums[c].is_none()).collect();
    let mut cols = Blob::zeros(k, d);
    for (c, s) in sums.iter().enumerate() {
        if let Some(s) = s {
            cols.row_mut(c).copy_from_slice(s);
        }
    }
    if !empty.is_empty() {
        // Cosine of each row to its own (surviving) centroid; rows of
        // collapsed clusters count as maximally far.
        let mut cosine: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(n, &l)| match &sums[l] {
                Some(s) => dot(bank.row(n), s),
                None => -2.0,
            })
            .collect();
        for c in empty {
            let lowest = cosine.iter().copied().fold(f64::INFINITY, f64::min);
            if !lowest.is_finite() {
                return Err(Error::contract(format!("not enough rows to reseed {k} clusters")));
            }
            let ties: Vec<usize> = (0..cosine.len()).filter(|&n| cosine[n] == lowest).collect();
            let pick = ties[rng.random_range(0..ties.len())];
            cols.row_mut(c).copy_from_slice(bank.row(pick));
            cosine[pick] = f64::INFINITY;
        }
    }
    CentroidMatrix::from_columns(&cols)
}

/// k-means++ seeding under the chord distance.
pub fn init_plus_plus<R: Rng + ?Sized>(bank: &EmbeddingBank, k: usize, rng: &mut R) -> Result<CentroidMatrix> {
    let n = bank.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| (2.0 - 2.0 * dot(bank.row(i), bank.row(chosen[0]))).max(0.0))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining row duplicates a chosen one.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            let dn = (2.0 - 2.0 * dot(bank.row(i), bank.row(next))).max(0.0);
            if dn < *d {
                *d = dn;
            }
        }
        dist[next] = 0.0;
    }
    let mut cols = Blob::zeros(k, bank.dim());
    for (c, &i) in chosen.iter().enumerate() {
        cols.row_mut(c).copy_from_slice(bank.row(i));
    }
    CentroidMatrix::from_columns(&cols)
}

/// One Lloyd run from the given centroids.
pub fn lloyd<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    init: CentroidMatrix,
    opts: &KMeansOptions,
    rng: &mut R,
) -> Result<ClusterResult> {
    let k = init.k();
    let mut centroids = init;
    let (mut labels, mut objective) = assign(bank, &centroids)?;
    let mut history = vec![objective];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let next = update_centroids(bank, &labels, k, rng)?;
        let (next_labels, next_obj) = assign(bank, &next)?;
        iterations += 1;
        history.push(next_obj);
        let improvement = objective - next_obj;
        let stable = next_labels == labels;
        centroids = next;
        labels = next_labels;
        objective = next_obj;
        if stable || improvement < opts.tol {
            break;
        }
    }
    Ok(ClusterResult {
        labels,
        centroids,
        objective,
        iterations_run: iterations,
        restart_histories: vec![history],
    })
}

/// Best-objective result over `opts.restarts` k-means++ restarts.
pub fn spherical_kmeans<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    k: usize,
    opts: &KMeansOptions,
    rng: &mut R,
) -> Result<ClusterResult> {
    if k == 0 || bank.len() < k {
        return Err(Error::contract(format!(
            "spherical k-means needs N ≥ K ≥ 1, got N={} K={k}",
            bank.len()
        )));
    }
    let mut best: Option<ClusterResult> = None;
    let mut histories = Vec::with_capacity(opts.restarts.max(1));
    for _ in 0..opts.restarts.max(1) {
        let init = init_plus_plus(bank, k, rng)?;
        let mut run = lloyd(bank, init, opts, rng)?;
        histories.append(&mut run.restart_histories);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_histories = histories;
    Ok(best)
}
