use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    chemo_concentration, running_diameter, sample_patient_params, treatment_probability, tumor_step, PatientParams,
    SimulationConfig,
};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// One simulated unit. `volumes` has `horizon + 1` entries `Y_0..Y_T`; the
/// per-step vectors have `horizon` entries indexed by the decision time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub unit_id: usize,
    pub volumes: Vec<f64>,
    pub chemo_flags: Vec<bool>,
    pub radio_flags: Vec<bool>,
    pub concentrations: Vec<f64>,
    pub assignment_probs: Vec<f64>,
    /// Outcome noise ε_t applied on the step `t -> t + 1`.
    pub noise: Vec<f64>,
    pub params: PatientParams,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.chemo_flags.len()
    }

    /// Joint treatment index `2 · chemo + radio` at step `t`.
    pub fn treatment_index(&self, t: usize) -> usize {
        2 * self.chemo_flags[t] as usize + self.radio_flags[t] as usize
    }
}

pub fn simulate_trajectory<R: Rng>(params: &PatientParams, config: &SimulationConfig, rng: &mut R) -> Result<Trajectory> {
    simulate_unit(0, params, config, rng)
}

fn simulate_unit<R: Rng>(
    unit_id: usize,
    params: &PatientParams,
    config: &SimulationConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let t_max = config.horizon;
    let d_max = config.d_max();
    let noise_dist = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut tr = Trajectory {
        unit_id,
        volumes: Vec::with_capacity(t_max + 1),
        chemo_flags: Vec::with_capacity(t_max),
        radio_flags: Vec::with_capacity(t_max),
        concentrations: Vec::with_capacity(t_max),
        assignment_probs: Vec::with_capacity(t_max),
        noise: Vec::with_capacity(t_max),
        params: params.clone(),
    };
    tr.volumes.push(params.initial_volume);
    let mut conc = 0.0;
    for t in 0..t_max {
        let avg = running_diameter(&tr.volumes, t, config.diameter_window);
        let p = treatment_probability(avg, config.gamma, d_max);
        let chemo = rng.random::<f64>() < p;
        let radio = rng.random::<f64>() < p;
        let eps = noise_dist.map_or(0.0, |d| d.sample(rng));
        conc = chemo_concentration(conc, chemo, config);
        let dose = if radio { config.radio_dose } else { 0.0 };
        let next = tumor_step(tr.volumes[t], conc, dose, params, eps)?;
        tr.chemo_flags.push(chemo);
        tr.radio_flags.push(radio);
        tr.concentrations.push(conc);
        tr.assignment_probs.push(p);
        tr.noise.push(eps);
        tr.volumes.push(next);
    }
    Ok(tr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Unit ids per split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn ids(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub config: SimulationConfig,
    /// Indexed by unit id.
    pub units: Vec<Trajectory>,
    pub split: Split,
}

impl PanelDataset {
    pub fn split_units(&self, name: SplitName) -> Vec<&Trajectory> {
        self.split.ids(name).iter().map(|&i| &self.units[i]).collect()
    }
}

fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = (n as f64 * fractions[1]).round() as usize;
    if train + val > n {
        return Err(Error::Config(format!("{n} units cannot honor split fractions {fractions:?}")));
    }
    let sizes = [train, val, n - train - val];
    for (s, f) in sizes.iter().zip(fractions) {
        if f > 0.0 && *s == 0 {
            return Err(Error::Config(format!("n_units = {n} leaves an empty split for fractions {fractions:?}")));
        }
    }
    Ok(sizes)
}

/// Simulates every unit from its own seeded streams and splits units
/// disjointly into train/val/test.
pub fn generate_dataset(config: &SimulationConfig) -> Result<PanelDataset> {
    config.validate()?;
    let sizes = split_sizes(config.n_units, config.split_fractions)?;
    let units = (0..config.n_units)
        .map(|u| {
            let params = sample_patient_params(&mut rng::stream(config.seed, &[tag::PATIENT, u as u64]), &config.heterogeneity)?;
            simulate_unit(u, &params, config, &mut rng::stream(config.seed, &[tag::TRAJECTORY, u as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<usize> = (0..config.n_units).collect();
    ids.shuffle(&mut rng::stream(config.seed, &[tag::SPLIT]));
    let mut take = |n: usize| {
        let mut part: Vec<usize> = ids.drain(..n).collect();
        part.sort_unstable();
        part
    };
    let split = Split { train: take(sizes[0]), val: take(sizes[1]), test: take(sizes[2]) };
    Ok(PanelDataset { config: config.clone(), units, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_size_arithmetic() {
        assert_eq!(split_sizes(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert_eq!(split_sizes(200, [0.6, 0.2, 0.2]).unwrap(), [120, 40, 40]);
        assert!(split_sizes(2, [0.6, 0.2, 0.2]).is_err());
        assert_eq!(split_sizes(3, [1.0, 0.0, 0.0]).unwrap(), [3, 0, 0]);
    }
}
