//! Treatment-agnostic clustering of representations into sub-groups.
//!
//! Both algorithms see only the points, never treatment labels; the
//! per-treatment bookkeeping happens afterwards in [`subgroup_weights`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::DenseTensor;
use crate::error::{shape_err, Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAlgorithm {
    Gmm,
    Kmeans,
}

impl std::fmt::Display for ClusterAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterAlgorithm::Gmm => "gmm",
            ClusterAlgorithm::Kmeans => "kmeans",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmInit {
    /// Means, variances and weights from a k-means pass.
    Kmeans,
    /// Means at k-means++ seeds, pooled variance, uniform weights.
    Seeds,
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Mean log-likelihood per point after each EM iteration.
    pub log_likelihoods: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Clusterer {
    Gmm(MixtureModel),
    Kmeans(CentroidModel),
}

fn check_points(points: &DenseTensor, k: usize) -> Result<(usize, usize)> {
    let (n, d) = points.as_matrix();
    if n == 0 || points.is_empty() {
        return Err(Error::Domain("no points to cluster".into()));
    }
    if k == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Degenerate(format!("{n} points cannot form {k} clusters")));
    }
    if !points.is_finite() {
        return Err(Error::Domain("non-finite points".into()));
    }
    Ok((n, d))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &DenseTensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster is re-seeded
/// at the point farthest from its nearest centroid.
pub fn fit_kmeans<R: Rng>(points: &DenseTensor, k: usize, max_iter: usize, rng: &mut R) -> Result<CentroidModel> {
    let (n, d) = check_points(points, k)?;
    let mut centroids = kmeans_pp(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut wcss = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (j, dist) = nearest(points.row(i), &centroids);
            changed |= labels[i] != j;
            labels[i] = j;
            total += dist;
        }
        wcss.push(total);
        if !changed && wcss.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]].iter_mut().zip(points.row(i)).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .map(|i| (i, nearest(points.row(i), &centroids).1))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centroids[j] = points.row(far.0).to_vec();
            }
        }
    }
    Ok(CentroidModel { centroids, wcss })
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl MixtureModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn log_joint(&self, p: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[j].max(f64::MIN_POSITIVE).ln();
            for ((x, m), v) in p.iter().zip(&self.means[j]).zip(&self.variances[j]) {
                lp -= 0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v);
            }
            *o = lp;
        }
    }

    /// Posterior component probabilities per point, `[n, K]`.
    pub fn responsibilities(&self, points: &DenseTensor) -> Result<DenseTensor> {
        if points.cols() != self.dim() {
            return shape_err(format!("points have width {}, model {}", points.cols(), self.dim()));
        }
        let k = self.n_components();
        let mut out = Vec::with_capacity(points.rows() * k);
        let mut lj = vec![0.0; k];
        for i in 0..points.rows() {
            self.log_joint(points.row(i), &mut lj);
            let lse = log_sum_exp(&lj);
            out.extend(lj.iter().map(|l| (l - lse).exp()));
        }
        DenseTensor::matrix(points.rows(), k, out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// EM for a diagonal Gaussian mixture. Stops when the mean log-likelihood
/// improves by less than `tol` or after `max_iter` iterations.
pub fn fit_gmm<R: Rng>(
    points: &DenseTensor,
    k: usize,
    init: GmmInit,
    max_iter: usize,
    tol: f64,
    rng: &mut R,
) -> Result<MixtureModel> {
    let (n, d) = check_points(points, k)?;
    let global_var: Vec<f64> = {
        let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| points.get(i, c)).sum::<f64>() / n as f64).collect();
        (0..d)
            .map(|c| ((0..n).map(|i| (points.get(i, c) - mean[c]).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR))
            .collect()
    };
    let mut model = match init {
        GmmInit::Kmeans => {
            let km = fit_kmeans(points, k, 100, rng)?;
            let labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &km.centroids).0).collect();
            let mut weights = vec![0.0; k];
            let mut variances = vec![vec![0.0; d]; k];
            for (i, &l) in labels.iter().enumerate() {
                weights[l] += 1.0;
                for c in 0..d {
                    variances[l][c] += (points.get(i, c) - km.centroids[l][c]).powi(2);
                }
            }
            for j in 0..k {
                if weights[j] > 0.0 {
                    variances[j].iter_mut().for_each(|v| *v = (*v / weights[j]).max(VARIANCE_FLOOR));
                } else {
                    variances[j] = global_var.clone();
                }
                weights[j] = weights[j].max(1.0) / n as f64;
            }
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            MixtureModel { weights, means: km.centroids, variances, log_likelihoods: Vec::new() }
        }
        GmmInit::Seeds => MixtureModel {
            weights: vec![1.0 / k as f64; k],
            means: kmeans_pp(points, k, rng),
            variances: vec![global_var.clone(); k],
            log_likelihoods: Vec::new(),
        },
    };
    let mut resp = vec![0.0; n * k];
    let mut lj = vec![0.0; k];
    for _ in 0..max_iter.max(1) {
        let mut ll = 0.0;
        for i in 0..n {
            model.log_joint(points.row(i), &mut lj);
            let lse = log_sum_exp(&lj);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (lj[j] - lse).exp();
            }
        }
        ll /= n as f64;
        let prev = model.log_likelihoods.last().copied();
        if let Some(p) = prev {
            if ll - p < tol {
                model.log_likelihoods.push(ll);
                break;
            }
        }
        model.log_likelihoods.push(ll);
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-10 {
                continue;
            }
            model.weights[j] = nk / n as f64;
            for c in 0..d {
                let m = (0..n).map(|i| resp[i * k + j] * points.get(i, c)).sum::<f64>() / nk;
                let v = (0..n).map(|i| resp[i * k + j] * (points.get(i, c) - m).powi(2)).sum::<f64>() / nk;
                model.means[j][c] = m;
                model.variances[j][c] = v.max(VARIANCE_FLOOR);
            }
        }
        let s: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= s);
    }
    Ok(model)
}

impl Clusterer {
    pub fn fit<R: Rng>(algo: ClusterAlgorithm, points: &DenseTensor, k: usize, rng: &mut R) -> Result<Self> {
        Ok(match algo {
            ClusterAlgorithm::Gmm => Clusterer::Gmm(fit_gmm(points, k, GmmInit::Kmeans, 100, 1e-6, rng)?),
            ClusterAlgorithm::Kmeans => Clusterer::Kmeans(fit_kmeans(points, k, 100, rng)?),
        })
    }

    pub fn n_components(&self) -> usize {
        match self {
            Clusterer::Gmm(m) => m.n_components(),
            Clusterer::Kmeans(m) => m.centroids.len(),
        }
    }

    pub fn mixture(&self) -> Option<&MixtureModel> {
        match self {
            Clusterer::Gmm(m) => Some(m),
            Clusterer::Kmeans(_) => None,
        }
    }
}

/// GMM: highest responsibility; k-means: nearest centroid. Ties go to the
/// lowest index.
pub fn assign_clusters(model: &Clusterer, points: &DenseTensor) -> Result<Vec<usize>> {
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    };
    match model {
        Clusterer::Gmm(m) => {
            if points.cols() != m.dim() {
                return shape_err(format!("points have width {}, model {}", points.cols(), m.dim()));
            }
            let mut lj = vec![0.0; m.n_components()];
            Ok((0..points.rows())
                .map(|i| {
                    m.log_joint(points.row(i), &mut lj);
                    argmax(&lj)
                })
                .collect())
        }
        Clusterer::Kmeans(m) => {
            let d = m.centroids.first().map_or(0, Vec::len);
            if points.cols() != d {
                return shape_err(format!("points have width {}, centroids {d}", points.cols()));
            }
            Ok((0..points.rows()).map(|i| nearest(points.row(i), &m.centroids).0).collect())
        }
    }
}

/// Cluster labels with per-treatment counts `n_k^a` and weights
/// `w_k^a = n_k^a / n^a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    /// `counts[a][k]`.
    pub counts: Vec<Vec<usize>>,
    /// `weights[a]` over clusters, `None` when treatment `a` has no samples.
    pub weights: Vec<Option<Vec<f64>>>,
}

impl SubgroupAssignment {
    pub fn weight(&self, k: usize, a: usize) -> Option<f64> {
        self.weights.get(a)?.as_ref().map(|w| w[k])
    }

    /// Sample indices of treatment `a` in cluster `k`.
    pub fn members(&self, treatments: &[usize], k: usize, a: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == k && treatments[i] == a).collect()
    }
}

pub fn subgroup_weights(labels: &[usize], treatments: &[usize], k: usize, n_treatments: usize) -> Result<SubgroupAssignment> {
    if labels.len() != treatments.len() {
        return shape_err(format!("{} labels vs {} treatments", labels.len(), treatments.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("cluster label {l} >= K = {k}")));
    }
    if let Some(&a) = treatments.iter().find(|&&a| a >= n_treatments) {
        return Err(Error::Index(format!("treatment {a} >= |A| = {n_treatments}")));
    }
    let mut counts = vec![vec![0usize; k]; n_treatments];
    for (&l, &a) in labels.iter().zip(treatments) {
        counts[a][l] += 1;
    }
    let weights = counts
        .iter()
        .map(|c| {
            let total: usize = c.iter().sum();
            (total > 0).then(|| c.iter().map(|&x| x as f64 / total as f64).collect())
        })
        .collect();
    Ok(SubgroupAssignment { labels: labels.to_vec(), n_clusters: k, counts, weights })
}

/// `ε = max_k tr(Σ_k)`.
pub fn covariance_trace_bound(model: &MixtureModel) -> f64 {
    model.variances.iter().map(|v| v.iter().sum::<f64>()).fold(0.0, f64::max)
}

/// `δc = 4√ε`.
pub fn delta_c(epsilon: f64) -> f64 {
    4.0 * epsilon.max(0.0).sqrt()
}

/// One row of a cluster audit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAuditRow {
    pub t: usize,
    pub unit_id: usize,
    pub treatment: usize,
    pub cluster: usize,
}

pub fn write_cluster_audit(path: &Path, rows: &[ClusterAuditRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
