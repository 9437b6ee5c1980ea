//! Confounded tumor-growth panel simulator.
//!
//! Volumes follow a Gompertz-style recurrence with chemotherapy (exponentially
//! decaying concentration) and radiotherapy (linear-quadratic) kill terms.
//! Treatment probability rises with the recent average tumor diameter, which
//! makes the running diameter a time-varying confounder.

mod counterfactual;
mod dataset;
mod export;
mod heterogeneity;

pub use counterfactual::{
    continue_with_plan, enumerate_one_step_counterfactuals, sliding_treatment_counterfactuals, CounterfactualBundle,
    Plan, Treatment,
};
pub use dataset::{generate_dataset, simulate_trajectory, PanelDataset, Split, SplitName, Trajectory};
pub use export::{export_bundles, export_dataset, write_split_csv};
pub use heterogeneity::{sample_patient_params, HeterogeneityComponent, HeterogeneitySpec, ParamDist, PatientParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum tumor volume (cm³); also the metric normalization constant.
pub const V_MAX: f64 = 1150.0;
/// Lower clamp for simulated volumes (cm³).
pub const VOLUME_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub gamma: f64,
    pub n_units: usize,
    pub horizon: usize,
    pub noise_std: f64,
    pub chemo_decay: f64,
    pub chemo_dose: f64,
    pub radio_dose: f64,
    pub diameter_window: usize,
    /// Diameter scale of the assignment sigmoid; `None` means the diameter of
    /// a tumor at [`V_MAX`].
    pub d_max: Option<f64>,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub heterogeneity: HeterogeneitySpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            gamma: 6.0,
            n_units: 200,
            horizon: 30,
            noise_std: 0.01,
            chemo_decay: 0.5,
            chemo_dose: 5.0,
            radio_dose: 2.0,
            diameter_window: 15,
            d_max: None,
            seed: 0,
            split_fractions: [0.6, 0.2, 0.2],
            heterogeneity: HeterogeneitySpec::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.chemo_decay) {
            return bad(format!("chemo_decay {} outside [0, 1)", self.chemo_decay));
        }
        if self.diameter_window == 0 {
            return bad("diameter_window must be >= 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if !self.gamma.is_finite() || self.noise_std < 0.0 || self.chemo_dose < 0.0 || self.radio_dose < 0.0 {
            return bad("gamma must be finite; noise_std and doses non-negative".into());
        }
        if let Some(d) = self.d_max {
            if !(d > 0.0) {
                return bad(format!("d_max {d} must be positive"));
            }
        }
        let fr = self.split_fractions;
        if fr.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must lie in [0,1] and sum to 1"));
        }
        self.heterogeneity.validate()
    }

    pub fn d_max(&self) -> f64 {
        self.d_max.unwrap_or_else(|| diameter_from_volume(V_MAX).expect("positive"))
    }
}

/// `C_t = decay · C_{t-1} + dose · 1[chemo]`.
pub fn chemo_concentration(prev_concentration: f64, chemo_given: bool, config: &SimulationConfig) -> f64 {
    config.chemo_decay * prev_concentration + if chemo_given { config.chemo_dose } else { 0.0 }
}

/// One step of the growth recurrence, clamped to `[VOLUME_FLOOR, V_MAX]`.
/// `radio_dose` is the applied dose this step (0 when untreated).
pub fn tumor_step(volume: f64, concentration: f64, radio_dose: f64, params: &PatientParams, noise: f64) -> Result<f64> {
    if !(volume > 0.0) {
        return Err(Error::Domain(format!("volume must be positive, got {volume}")));
    }
    let growth = params.rho * (params.carrying_capacity / volume).ln();
    let chemo = params.beta_c * concentration;
    let radio = params.alpha_r * radio_dose + params.beta_r * radio_dose * radio_dose;
    let next = (1.0 + growth - chemo - radio + noise) * volume;
    Ok(next.clamp(VOLUME_FLOOR, V_MAX))
}

/// `σ(γ / d_max · (D̄ − d_max / 2))`.
pub fn treatment_probability(avg_diameter: f64, gamma: f64, d_max: f64) -> f64 {
    let z = gamma / d_max * (avg_diameter - d_max / 2.0);
    1.0 / (1.0 + (-z).exp())
}

/// Sphere-equivalent diameter `(6V/π)^{1/3}`.
pub fn diameter_from_volume(volume: f64) -> Result<f64> {
    if volume < 0.0 {
        return Err(Error::Domain(format!("negative volume {volume}")));
    }
    Ok((6.0 * volume / std::f64::consts::PI).cbrt())
}

/// Mean diameter of `volumes[t + 1 - window ..= t]` (shorter at the start).
pub fn running_diameter(volumes: &[f64], t: usize, window: usize) -> f64 {
    let start = (t + 1).saturating_sub(window);
    let slice = &volumes[start..=t];
    slice.iter().map(|&v| (6.0 * v.max(0.0) / std::f64::consts::PI).cbrt()).sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rho: f64, k: f64, beta_c: f64) -> PatientParams {
        PatientParams {
            rho,
            carrying_capacity: k,
            beta_c,
            alpha_r: 0.0,
            beta_r: 0.0,
            initial_volume: 1.0,
            mixture_component: 0,
        }
    }

    #[test]
    fn chemo_recurrence() {
        let c = SimulationConfig::default();
        assert_eq!(chemo_concentration(0.0, false, &c), 0.0);
        assert_eq!(chemo_concentration(0.0, true, &c), 5.0);
        assert_eq!(chemo_concentration(5.0, false, &c), 2.5);
    }

    #[test]
    fn tumor_step_examples() {
        assert_eq!(tumor_step(1000.0, 0.0, 0.0, &params(0.1, 1000.0, 0.0), 0.0).unwrap(), 1000.0);
        let e = std::f64::consts::E;
        assert!((tumor_step(1.0, 0.0, 0.0, &params(0.1, e, 0.0), 0.0).unwrap() - 1.1).abs() < 1e-15);
        assert!((tumor_step(1.0, 0.2, 0.0, &params(0.0, 5.0, 1.0), 0.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(tumor_step(0.0, 0.0, 0.0, &params(0.1, 1.0, 0.0), 0.0), Err(Error::Domain(_))));
        assert_eq!(tumor_step(1100.0, 0.0, 0.0, &params(0.1, 1150.0, 0.0), 0.5).unwrap(), V_MAX);
        assert_eq!(tumor_step(1.0, 10.0, 0.0, &params(0.0, 1.0, 1.0), 0.0).unwrap(), VOLUME_FLOOR);
    }

    #[test]
    fn assignment_probability_examples() {
        assert_eq!(treatment_probability(7.3, 0.0, 13.0), 0.5);
        assert_eq!(treatment_probability(6.5, 10.0, 13.0), 0.5);
        assert!((treatment_probability(13.0, 6.0, 13.0) - 0.952_574_126_822_433_4).abs() < 1e-12);
    }

    #[test]
    fn diameter_examples() {
        use std::f64::consts::PI;
        assert_eq!(diameter_from_volume(0.0).unwrap(), 0.0);
        assert!((diameter_from_volume(PI / 6.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((diameter_from_volume(4.0 * PI / 3.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(diameter_from_volume(-1.0).is_err());
    }

    #[test]
    fn running_diameter_window() {
        use std::f64::consts::PI;
        let unit = PI / 6.0;
        let vols = [unit, 8.0 * unit, 27.0 * unit];
        assert!((running_diameter(&vols, 0, 15) - 1.0).abs() < 1e-12);
        assert!((running_diameter(&vols, 2, 2) - 2.5).abs() < 1e-12);
        assert!((running_diameter(&vols, 2, 15) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = SimulationConfig::default();
        c.validate().unwrap();
        c.chemo_decay = 1.0;
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::default();
        c.split_fractions = [0.5, 0.2, 0.2];
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::default();
        c.diameter_window = 0;
        assert!(c.validate().is_err());
    }
}
