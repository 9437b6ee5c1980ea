//! Wasserstein-1 machinery: log-domain Sinkhorn, exact solvers used as
//! oracles, the sub-group alignment loss and bound diagnostics.

mod bounds;
mod exact;
mod sga;

pub use bounds::{
    bound_terms, mw1_gaussian_mixtures, paired_distance_audit, AlignmentReport, ComponentW1, PairedAuditRow,
};
pub use exact::{exact_transport, exact_transport_small, exact_w1_1d, exact_w1_1d_weighted, ExactPlan};
pub use sga::{sga_loss, sga_loss_value, uniform_mixture_sample};

use serde::{Deserialize, Serialize};

use crate::diffnum::DenseTensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Entropic regularization ε_reg.
    pub reg: f64,
    /// When set, the effective regularization is `reg · mean(cost)`.
    pub reg_relative: bool,
    pub max_iters: usize,
    /// Tolerance on the L1 row-marginal violation of the plan.
    pub convergence_tol: f64,
    pub cost_metric: CostMetric,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { reg: 0.01, reg_relative: true, max_iters: 2000, convergence_tol: 1e-6, cost_metric: CostMetric::Euclidean }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0) || self.max_iters == 0 || !(self.convergence_tol > 0.0) {
            return Err(Error::Config("transport needs reg > 0, max_iters >= 1, convergence_tol > 0".into()));
        }
        Ok(())
    }
}

/// `C[i][j] = ‖a_i − b_j‖₂`.
pub fn pairwise_cost(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (n, d) = a.as_matrix();
    let (m, d2) = b.as_matrix();
    if d != d2 {
        return shape_err(format!("point dimensions differ: {d} vs {d2}"));
    }
    let mut vals = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            vals.push(crate::diffnum::euclid(a.row(i), b.row(j)));
        }
    }
    DenseTensor::matrix(n, m, vals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub plan: DenseTensor,
    /// Transport cost `⟨P, C⟩` of the entropic plan.
    pub distance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
    /// Effective (absolute) regularization used.
    pub reg: f64,
}

pub(crate) fn check_simplex(w: &[f64], allow_zero: bool, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Domain(format!("{what} weights are empty")));
    }
    let bad = w.iter().any(|&x| !x.is_finite() || x < 0.0 || (!allow_zero && x == 0.0));
    if bad || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{what} weights are not a valid simplex vector")));
    }
    Ok(())
}

pub(crate) fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// L1 violation of both marginals of the plan `exp((f ⊕ g − C)/ε)`.
fn marginal_violation(c: &[f64], f: &[f64], g: &[f64], eps: f64, a: &[f64], b: &[f64]) -> f64 {
    let m = g.len();
    let mut cols = vec![0.0; m];
    let mut err = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let mut row = 0.0;
        for j in 0..m {
            let p = ((fi + g[j] - c[i * m + j]) / eps).exp();
            row += p;
            cols[j] += p;
        }
        err += (row - a[i]).abs();
    }
    err + cols.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn plan_matrix(c: &[f64], f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let m = g.len();
    f.iter().enumerate().flat_map(|(i, fi)| (0..m).map(move |j| ((fi + g[j] - c[i * m + j]) / eps).exp())).collect()
}

/// In-place Cholesky of a symmetric positive-definite `k × k` matrix;
/// `None` when a pivot is not positive.
fn cholesky(mut s: Vec<f64>, k: usize) -> Option<Vec<f64>> {
    for j in 0..k {
        let d = s[j * k + j] - (0..j).map(|l| s[j * k + l].powi(2)).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        s[j * k + j] = d;
        for i in j + 1..k {
            let v = s[i * k + j] - (0..j).map(|l| s[i * k + l] * s[j * k + l]).sum::<f64>();
            s[i * k + j] = v / d;
        }
    }
    Some(s)
}

fn cholesky_solve(l: &[f64], k: usize, rhs: &mut [f64]) {
    for i in 0..k {
        rhs[i] = (rhs[i] - (0..i).map(|j| l[i * k + j] * rhs[j]).sum::<f64>()) / l[i * k + i];
    }
    for i in (0..k).rev() {
        rhs[i] = (rhs[i] - (i + 1..k).map(|j| l[j * k + i] * rhs[j]).sum::<f64>()) / l[i * k + i];
    }
}

/// Newton direction for the entropic dual with `g[m−1]` pinned, eliminating
/// `δf` through the Schur complement. `p` is `[n, m]`.
fn newton_direction(p: &[f64], n: usize, m: usize, u: &[f64], v: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let r: Vec<f64> = (0..n).map(|i| p[i * m..(i + 1) * m].iter().sum()).collect();
    let col: Vec<f64> = (0..m).map(|j| (0..n).map(|i| p[i * m + j]).sum()).collect();
    let k = m - 1;
    let mut s = vec![0.0; k * k];
    let mut rhs: Vec<f64> = v[..k].to_vec();
    for i in 0..n {
        let row = &p[i * m..(i + 1) * m];
        let inv = 1.0 / r[i];
        for j in 0..k {
            let pj = row[j] * inv;
            rhs[j] -= pj * u[i];
            for l in 0..k {
                s[j * k + l] -= pj * row[l];
            }
        }
    }
    let trace: f64 = col.iter().sum();
    for j in 0..k {
        s[j * k + j] += col[j] + 1e-14 * trace;
    }
    let l = cholesky(s, k)?;
    cholesky_solve(&l, k, &mut rhs);
    let mut dg = rhs;
    dg.push(0.0);
    let df = (0..n).map(|i| (u[i] - (0..m).map(|j| p[i * m + j] * dg[j]).sum::<f64>()) / r[i]).collect();
    Some((df, dg))
}

/// Damped Newton steps on the dual potentials; keeps a step only when it
/// lowers the marginal violation. Returns the final violation.
#[allow(clippy::too_many_arguments)]
fn newton_polish(c: &[f64], f: &mut [f64], g: &mut [f64], eps: f64, a: &[f64], b: &[f64], mut err: f64, tol: f64) -> f64 {
    let (n, m) = (f.len(), g.len());
    for _ in 0..NEWTON_STEPS {
        if err < tol || m < 2 || n < 2 {
            break;
        }
        let p = plan_matrix(c, f, g, eps);
        let u: Vec<f64> = (0..n).map(|i| eps * (a[i] - p[i * m..(i + 1) * m].iter().sum::<f64>())).collect();
        let v: Vec<f64> = (0..m).map(|j| eps * (b[j] - (0..n).map(|i| p[i * m + j]).sum::<f64>())).collect();
        let direction = if m <= n {
            newton_direction(&p, n, m, &u, &v)
        } else {
            let pt: Vec<f64> = (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| p[i * m + j]).collect();
            newton_direction(&pt, m, n, &v, &u).map(|(dg, df)| (df, dg))
        };
        let Some((df, dg)) = direction else { break };
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-3 {
            let tf: Vec<f64> = f.iter().zip(&df).map(|(x, d)| x + alpha * d).collect();
            let tg: Vec<f64> = g.iter().zip(&dg).map(|(x, d)| x + alpha * d).collect();
            let e = marginal_violation(c, &tf, &tg, eps, a, b);
            if e < err {
                f.copy_from_slice(&tf);
                g.copy_from_slice(&tg);
                err = e;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    err
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Marginal violation below which Newton steps on the dual are attempted.
const NEWTON_START: f64 = 1e-3;
/// Newton solves a dense system of this many unknowns at most.
const NEWTON_MAX_SIDE: usize = 400;
const NEWTON_STEPS: usize = 8;

/// Log-domain Sinkhorn with ε-scaling. Returns the best iterate (smallest
/// marginal violation at the target regularization) and a convergence flag.
pub fn sinkhorn(cost: &DenseTensor, a: &[f64], b: &[f64], config: &TransportConfig) -> Result<SinkhornResult> {
    config.validate()?;
    let (n, m) = cost.as_matrix();
    if a.len() != n || b.len() != m {
        return shape_err(format!("cost [{n},{m}] vs weights {} / {}", a.len(), b.len()));
    }
    check_simplex(a, false, "source")?;
    check_simplex(b, false, "target")?;
    let c = cost.values();
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("cost matrix is not finite".into()));
    }
    let mean_cost = c.iter().sum::<f64>() / c.len() as f64;
    let target = if config.reg_relative { config.reg * mean_cost } else { config.reg };
    if !(target > 0.0) {
        // All costs vanish: every coupling is optimal.
        let plan = (0..n).flat_map(|i| b.iter().map(move |bj| a[i] * bj)).collect();
        return Ok(SinkhornResult {
            plan: DenseTensor::matrix(n, m, plan)?,
            distance: 0.0,
            converged: true,
            iterations: 0,
            marginal_error: 0.0,
            reg: 0.0,
        });
    }
    let max_cost = c.iter().copied().fold(0.0, f64::max);
    let (la, lb): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| x.ln()).collect(), b.iter().map(|x| x.ln()).collect());
    let mut eps = max_cost.max(target);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut stage_iters = 0;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        stage_iters += 1;
        let mut step = 0.0f64;
        for i in 0..n {
            let row = &c[i * m..(i + 1) * m];
            let fi = eps * (la[i] - lse(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) / eps)));
            step += (a[i] * ((f[i] - fi) / eps).exp() - a[i]).abs();
            f[i] = fi;
        }
        for j in 0..m {
            g[j] = eps * (lb[j] - lse((0..n).map(|i| (f[i] - c[i * m + j]) / eps)));
        }
        if eps == target {
            let mut err = marginal_violation(c, &f, &g, eps, a, b);
            if err < NEWTON_START && n.min(m) <= NEWTON_MAX_SIDE {
                err = newton_polish(c, &mut f, &mut g, eps, a, b, err, config.convergence_tol);
            }
            if best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, f.clone(), g.clone()));
            }
            if err < config.convergence_tol {
                break;
            }
        } else if step < 1e-3 || stage_iters >= 50 {
            eps = (eps * 0.5).max(target);
            stage_iters = 0;
        }
    }
    if eps != target {
        return Err(Error::Contract(format!(
            "sinkhorn did not reach the target regularization within {} iterations",
            config.max_iters
        )));
    }
    let plan_of = |f: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n).flat_map(|i| (0..m).map(move |j| ((f[i] + g[j] - c[i * m + j]) / eps).exp())).collect()
    };
    let (marginal_error, bf, bg) = best.expect("at least one iteration at the target regularization");
    let plan = plan_of(&bf, &bg);
    let distance = plan.iter().zip(c).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        plan: DenseTensor::matrix(n, m, plan)?,
        distance,
        converged: marginal_error < config.convergence_tol,
        iterations,
        marginal_error,
        reg: target,
    })
}

/// Sinkhorn between two uniformly weighted point clouds.
pub fn w1_sinkhorn(a: &DenseTensor, b: &DenseTensor, config: &TransportConfig) -> Result<SinkhornResult> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Domain("empty point cloud".into()));
    }
    let cost = pairwise_cost(a, b)?;
    sinkhorn(&cost, &uniform(a.rows()), &uniform(b.rows()), config)
}

/// How a W₁ between two point clouds is estimated in diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceEstimator {
    Sinkhorn(TransportConfig),
    /// Sorted matching in 1-D, exact min-cost flow otherwise.
    Exact,
}

impl DistanceEstimator {
    pub fn w1(&self, a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
        match self {
            DistanceEstimator::Sinkhorn(cfg) => Ok(w1_sinkhorn(a, b, cfg)?.distance),
            DistanceEstimator::Exact => {
                if a.cols() != b.cols() {
                    return shape_err(format!("point dimensions differ: {} vs {}", a.cols(), b.cols()));
                }
                if a.cols() == 1 {
                    exact_w1_1d(a.values(), b.values())
                } else {
                    let cost = pairwise_cost(a, b)?;
                    Ok(exact_transport(&cost, &uniform(a.rows()), &uniform(b.rows()))?.cost)
                }
            }
        }
    }
}
