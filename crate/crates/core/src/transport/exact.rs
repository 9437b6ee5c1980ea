use serde::{Deserialize, Serialize};

use super::check_simplex;
use crate::diffnum::DenseTensor;
use crate::error::{shape_err, Error, Result};

/// Sorted-matching W₁ between two 1-D samples with uniform weights. Unequal
/// sizes fall back to the CDF-difference integral.
pub fn exact_w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    if a.len() == b.len() {
        let mut xa = a.to_vec();
        let mut xb = b.to_vec();
        xa.sort_by(f64::total_cmp);
        xb.sort_by(f64::total_cmp);
        return Ok(xa.iter().zip(&xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    exact_w1_1d_weighted(a, &super::uniform(a.len()), b, &super::uniform(b.len()))
}

/// `∫ |F_a(x) − F_b(x)| dx` for weighted 1-D samples.
pub fn exact_w1_1d_weighted(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> Result<f64> {
    if xa.len() != wa.len() || xb.len() != wb.len() {
        return shape_err("sample and weight lengths differ");
    }
    check_simplex(wa, true, "source")?;
    check_simplex(wb, true, "target")?;
    let mut events: Vec<(f64, f64)> = xa.iter().zip(wa).map(|(&x, &w)| (x, w)).collect();
    events.extend(xb.iter().zip(wb).map(|(&x, &w)| (x, -w)));
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        total += diff.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactPlan {
    pub cost: f64,
    pub plan: DenseTensor,
}

const FLOW_EPS: f64 = 1e-15;

/// Exact optimal transport by successive shortest paths (Dijkstra with
/// potentials) on the bipartite transport network. Zero weights are allowed.
pub fn exact_transport(cost: &DenseTensor, a: &[f64], b: &[f64]) -> Result<ExactPlan> {
    let (n, m) = cost.as_matrix();
    if a.len() != n || b.len() != m {
        return shape_err(format!("cost [{n},{m}] vs weights {} / {}", a.len(), b.len()));
    }
    check_simplex(a, true, "source")?;
    check_simplex(b, true, "target")?;
    let c = cost.values();
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("cost matrix is not finite".into()));
    }
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // Node ids: rows 0..n, columns n..n+m. The implicit source has potential 0.
    let mut pot = vec![0.0; n + m];
    let min_c = c.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    pot[n..].iter_mut().for_each(|p| *p = min_c);
    let total: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
    let mut shipped = 0.0;
    let mut guard = 0;
    while total - shipped > 1e-12 {
        guard += 1;
        if guard > 50 * (n + m) + 1000 {
            return Err(Error::Contract("transport solver failed to terminate".into()));
        }
        let mut dist = vec![f64::INFINITY; n + m];
        let mut parent = vec![usize::MAX; n + m];
        let mut done = vec![false; n + m];
        for i in 0..n {
            if supply[i] > FLOW_EPS {
                dist[i] = -pot[i];
            }
        }
        let mut sink = None;
        loop {
            let mut u = usize::MAX;
            for v in 0..n + m {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && demand[u - n] > FLOW_EPS {
                sink = Some(u);
                break;
            }
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    let nd = dist[u] + c[u * m + j] + pot[u] - pot[v];
                    if !done[v] && nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[i * m + j] > FLOW_EPS {
                        let nd = dist[u] - c[i * m + j] + pot[u] - pot[i];
                        if !done[i] && nd < dist[i] {
                            dist[i] = nd;
                            parent[i] = u;
                        }
                    }
                }
            }
        }
        let Some(sink) = sink else {
            return Err(Error::Domain("marginals are infeasible".into()));
        };
        let d_sink = dist[sink];
        for v in 0..n + m {
            pot[v] += dist[v].min(d_sink);
        }
        let mut amount = demand[sink - n];
        let mut v = sink;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u >= n {
                // Backward edge column u -> row v cancels flow on (v, u).
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let mut v = sink;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        supply[v] -= amount;
        demand[sink - n] -= amount;
        shipped += amount;
    }
    let total_cost = flow.iter().zip(c).map(|(f, c)| f * c).sum();
    Ok(ExactPlan { cost: total_cost, plan: DenseTensor::matrix(n, m, flow)? })
}

/// Exact transport for at most 16 support points per side.
pub fn exact_transport_small(cost: &DenseTensor, a: &[f64], b: &[f64]) -> Result<f64> {
    let (n, m) = cost.as_matrix();
    if n > 16 || m > 16 {
        return Err(Error::Domain(format!("small solver limited to 16 points per side, got {n}x{m}")));
    }
    Ok(exact_transport(cost, a, b)?.cost)
}
