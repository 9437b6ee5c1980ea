use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub rho: f64,
    pub carrying_capacity: f64,
    pub beta_c: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub initial_volume: f64,
    pub mixture_component: usize,
}

/// Normal distribution truncated to `[lower, upper]`. `std == 0` is a point mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDist {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

const MAX_REJECTIONS: usize = 100_000;

impl ParamDist {
    pub fn new(mean: f64, std: f64, lower: f64, upper: f64) -> Self {
        Self { mean, std, lower, upper }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.mean.is_finite()
            && self.std.is_finite()
            && self.std >= 0.0
            && self.lower <= self.upper
            && (self.std > 0.0 || (self.lower..=self.upper).contains(&self.mean));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution for {name}: {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        if self.std == 0.0 {
            return Ok(self.mean);
        }
        let normal = Normal::new(self.mean, self.std).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..MAX_REJECTIONS {
            let x = normal.sample(rng);
            if (self.lower..=self.upper).contains(&x) {
                return Ok(x);
            }
        }
        Err(Error::Config(format!("truncation window of {self:?} has negligible mass")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityComponent {
    pub weight: f64,
    pub rho: ParamDist,
    pub carrying_capacity: ParamDist,
    pub beta_c: ParamDist,
    pub alpha_r: ParamDist,
    pub beta_r: ParamDist,
    pub initial_volume: ParamDist,
}

impl HeterogeneityComponent {
    fn fields(&self) -> [(&'static str, &ParamDist); 6] {
        [
            ("rho", &self.rho),
            ("carrying_capacity", &self.carrying_capacity),
            ("beta_c", &self.beta_c),
            ("alpha_r", &self.alpha_r),
            ("beta_r", &self.beta_r),
            ("initial_volume", &self.initial_volume),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneitySpec {
    pub components: Vec<HeterogeneityComponent>,
}

impl Default for HeterogeneitySpec {
    /// Three equally weighted patient groups: faster growth in the third,
    /// chemo-sensitive second and radio-sensitive third.
    fn default() -> Self {
        let make = |rho: f64, chemo_boost: f64, radio_boost: f64| HeterogeneityComponent {
            weight: 1.0 / 3.0,
            rho: ParamDist::new(rho, 0.015, 0.01, 0.2),
            carrying_capacity: ParamDist::new(1000.0, 150.0, 500.0, 1150.0),
            beta_c: ParamDist::new(0.028 * chemo_boost, 0.004, 0.005, 0.1),
            alpha_r: ParamDist::new(0.040 * radio_boost, 0.008, 0.005, 0.1),
            beta_r: ParamDist::new(0.004 * radio_boost, 0.0008, 0.0005, 0.01),
            initial_volume: ParamDist::new(4.0, 2.5, 0.5, 15.0),
        };
        Self { components: vec![make(0.073, 1.0, 1.0), make(0.088, 1.1, 1.0), make(0.103, 1.0, 1.1)] }
    }
}

impl HeterogeneitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("heterogeneity spec has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight >= 0.0)) || !(total > 0.0) {
            return Err(Error::Config("component weights must be non-negative with a positive sum".into()));
        }
        for (k, c) in self.components.iter().enumerate() {
            for (name, d) in c.fields() {
                d.validate(&format!("component {k} {name}"))?;
            }
            let lows = [c.rho.lower, c.carrying_capacity.lower, c.initial_volume.lower];
            let sens = [c.beta_c.lower, c.alpha_r.lower, c.beta_r.lower];
            if lows.iter().any(|&l| l <= 0.0) || sens.iter().any(|&l| l < 0.0) {
                return Err(Error::Config(format!(
                    "component {k}: rho, carrying capacity and initial volume must be bounded above 0, sensitivities at or above 0"
                )));
            }
        }
        Ok(())
    }
}

/// Draws a mixture component by weight, then each parameter from that
/// component's truncated normal.
pub fn sample_patient_params<R: Rng>(rng: &mut R, spec: &HeterogeneitySpec) -> Result<PatientParams> {
    spec.validate()?;
    let total: f64 = spec.components.iter().map(|c| c.weight).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut k = spec.components.len() - 1;
    for (i, c) in spec.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            k = i;
            break;
        }
    }
    let c = &spec.components[k];
    Ok(PatientParams {
        rho: c.rho.sample(rng)?,
        carrying_capacity: c.carrying_capacity.sample(rng)?,
        beta_c: c.beta_c.sample(rng)?,
        alpha_r: c.alpha_r.sample(rng)?,
        beta_r: c.beta_r.sample(rng)?,
        initial_volume: c.initial_volume.sample(rng)?,
        mixture_component: k,
    })
}
