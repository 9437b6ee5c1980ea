use serde::{Deserialize, Serialize};

use super::{chemo_concentration, tumor_step, SimulationConfig, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Treatment {
    pub chemo: bool,
    pub radio: bool,
}

impl Treatment {
    pub const NONE: Treatment = Treatment { chemo: false, radio: false };
    pub const BOTH: Treatment = Treatment { chemo: true, radio: true };

    /// All four joint treatments in index order `2 · chemo + radio`.
    pub const ALL: [Treatment; 4] = [
        Treatment { chemo: false, radio: false },
        Treatment { chemo: false, radio: true },
        Treatment { chemo: true, radio: false },
        Treatment { chemo: true, radio: true },
    ];

    pub fn index(self) -> usize {
        2 * self.chemo as usize + self.radio as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Treatment sequence over `[t, t + τ − 1]`.
pub type Plan = Vec<Treatment>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualBundle {
    pub unit_id: usize,
    pub anchor_time: usize,
    pub horizon: usize,
    pub treatment_plans: Vec<Plan>,
    /// Ground-truth `Y_{t+τ}` per plan.
    pub true_outcomes: Vec<f64>,
    /// Ground-truth `Y_{t+1}..Y_{t+τ}` per plan.
    pub true_paths: Vec<Vec<f64>>,
    /// Index of the plan that matches the observed treatments, if any.
    pub factual_plan: Option<usize>,
}

/// Continues a trajectory from `Y_t` under `plan`, reusing the stored noise
/// draws. Returns `Y_{t+1}..Y_{t+len}`.
pub fn continue_with_plan(tr: &Trajectory, config: &SimulationConfig, t: usize, plan: &[Treatment]) -> Result<Vec<f64>> {
    if t + plan.len() > tr.horizon() {
        return Err(Error::Index(format!(
            "plan of length {} from t = {t} runs past horizon {}",
            plan.len(),
            tr.horizon()
        )));
    }
    let mut conc = if t == 0 { 0.0 } else { tr.concentrations[t - 1] };
    let mut vol = tr.volumes[t];
    let mut path = Vec::with_capacity(plan.len());
    for (j, a) in plan.iter().enumerate() {
        conc = chemo_concentration(conc, a.chemo, config);
        let dose = if a.radio { config.radio_dose } else { 0.0 };
        vol = tumor_step(vol, conc, dose, &tr.params, tr.noise[t + j])?;
        path.push(vol);
    }
    Ok(path)
}

fn factual_plan(tr: &Trajectory, t: usize) -> Plan {
    (t..tr.horizon()).map(|s| Treatment { chemo: tr.chemo_flags[s], radio: tr.radio_flags[s] }).collect()
}

fn bundle(tr: &Trajectory, config: &SimulationConfig, t: usize, plans: Vec<Plan>) -> Result<CounterfactualBundle> {
    let horizon = plans[0].len();
    let observed = factual_plan(tr, t);
    let true_paths = plans.iter().map(|p| continue_with_plan(tr, config, t, p)).collect::<Result<Vec<_>>>()?;
    Ok(CounterfactualBundle {
        unit_id: tr.unit_id,
        anchor_time: t,
        horizon,
        true_outcomes: true_paths.iter().map(|p| p[horizon - 1]).collect(),
        factual_plan: plans.iter().position(|p| p[..] == observed[..horizon]),
        treatment_plans: plans,
        true_paths,
    })
}

/// All four joint treatments at time `t`, each with the true `Y_{t+1}`.
pub fn enumerate_one_step_counterfactuals(
    tr: &Trajectory,
    t: usize,
    config: &SimulationConfig,
) -> Result<CounterfactualBundle> {
    if t < 1 || t >= tr.horizon() {
        return Err(Error::Index(format!("one-step anchor {t} outside [1, {})", tr.horizon())));
    }
    bundle(tr, config, t, Treatment::ALL.iter().map(|&a| vec![a]).collect())
}

/// `tau_max` plans over `[t, t + tau_max − 1]`; plan `j` applies both
/// treatments at `t + j − 1` and nothing else.
pub fn sliding_treatment_counterfactuals(
    tr: &Trajectory,
    t: usize,
    tau_max: usize,
    config: &SimulationConfig,
) -> Result<CounterfactualBundle> {
    if tau_max == 0 || t + tau_max > tr.horizon() {
        return Err(Error::Index(format!(
            "sliding window t = {t}, tau_max = {tau_max} overflows horizon {}",
            tr.horizon()
        )));
    }
    let plans = (0..tau_max)
        .map(|j| (0..tau_max).map(|s| if s == j { Treatment::BOTH } else { Treatment::NONE }).collect())
        .collect();
    bundle(tr, config, t, plans)
}
