use rand::seq::SliceRandom;
use rand::Rng;

use super::{pairwise_cost, sinkhorn, uniform, TransportConfig};
use crate::clustering::SubgroupAssignment;
use crate::diffnum::{DenseTensor, Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Pools one sub-group across all treatment groups, shuffles, and keeps
/// `ceil(total / |A|)` items, where `|A| = groups.len()`.
pub fn uniform_mixture_sample<T: Clone, R: Rng>(groups: &[Vec<T>], rng: &mut R) -> Result<Vec<T>> {
    let mut pooled: Vec<T> = groups.iter().flatten().cloned().collect();
    if pooled.is_empty() {
        return Err(Error::Degenerate("every treatment sub-group is empty".into()));
    }
    let keep = pooled.len().div_ceil(groups.len());
    pooled.shuffle(rng);
    pooled.truncate(keep);
    Ok(pooled)
}

/// `Σ_k Σ_a w_k^a · W₁(Φ^{a,k}, Φ^{k})` on the rows of `reps` (one row per
/// sample). Each distance uses a Sinkhorn plan held fixed on the tape, so the
/// gradient is the envelope gradient. Empty `(a, k)` groups are skipped.
pub fn sga_loss<R: Rng>(
    tape: &mut Tape,
    reps: Var,
    assignment: &SubgroupAssignment,
    treatments: &[usize],
    config: &TransportConfig,
    rng: &mut R,
) -> Result<Var> {
    let n = tape.value(reps).rows();
    if treatments.len() != n || assignment.labels.len() != n {
        return shape_err(format!(
            "{n} representations, {} treatments, {} labels",
            treatments.len(),
            assignment.labels.len()
        ));
    }
    let n_treat = assignment.weights.len();
    let mut terms = Vec::new();
    for k in 0..assignment.n_clusters {
        let groups: Vec<Vec<usize>> = (0..n_treat).map(|a| assignment.members(treatments, k, a)).collect();
        if groups.iter().all(Vec::is_empty) {
            continue;
        }
        let mix = uniform_mixture_sample(&groups, rng)?;
        let mix_var = tape.gather_rows(reps, &mix)?;
        let mix_pts = tape.value(mix_var).clone();
        for (a, members) in groups.iter().enumerate() {
            let w = match assignment.weight(k, a) {
                Some(w) if w > 0.0 && !members.is_empty() => w,
                _ => continue,
            };
            let group_var = tape.gather_rows(reps, members)?;
            let cost = pairwise_cost(tape.value(group_var), &mix_pts)?;
            let res = sinkhorn(&cost, &uniform(members.len()), &uniform(mix.len()), config)?;
            let d = tape.plan_distance(group_var, mix_var, res.plan.values())?;
            terms.push(tape.scale(d, w));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(DenseTensor::scalar(0.0)));
    }
    let stacked = tape.concat_cols(&terms)?;
    Ok(tape.sum(stacked))
}

/// Value of [`sga_loss`] on a fixed point set.
pub fn sga_loss_value<R: Rng>(
    points: &DenseTensor,
    assignment: &SubgroupAssignment,
    treatments: &[usize],
    config: &TransportConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let reps = tape.constant(points.clone());
    let loss = sga_loss(&mut tape, reps, assignment, treatments, config, rng)?;
    Ok(tape.value(loss).item())
}
