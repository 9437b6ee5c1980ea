//! Random temporal masking of input covariates.
//!
//! Each `(unit, t)` cell is masked independently; a masked cell has its whole
//! covariate vector replaced. Treatments and outcomes never pass through here.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnum::DenseTensor;
use crate::error::{csv_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// i.i.d. `N(noise_mean, noise_std²)` per element.
    Gaussian,
    Zero,
    /// Elementwise mean of the unmasked neighbours at `t − 1` and `t + 1`.
    Interpolation,
    None,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Gaussian => "gaussian",
            MaskStrategy::Zero => "zero",
            MaskStrategy::Interpolation => "interpolation",
            MaskStrategy::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub prob: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Draw masks once before training instead of every epoch.
    pub mask_once: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { strategy: MaskStrategy::Gaussian, prob: 0.05, noise_mean: 0.0, noise_std: 1.0, mask_once: false }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        Self { strategy: MaskStrategy::None, prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("mask prob must lie in [0, 1], got {}", self.prob)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_mean.is_finite() || !self.noise_std.is_finite() {
            return Err(Error::Config("mask noise needs a finite mean and std >= 0".into()));
        }
        Ok(())
    }

    /// Whether masking can change anything.
    pub fn is_active(&self) -> bool {
        self.strategy != MaskStrategy::None && self.prob > 0.0
    }
}

/// Masks per-unit covariate sequences (`[T, d]` each). Returns the masked
/// sequences and `indicators[unit][t]`.
pub fn apply_mask<R: Rng>(
    sequences: &[DenseTensor],
    config: &MaskConfig,
    rng: &mut R,
) -> Result<(Vec<DenseTensor>, Vec<Vec<bool>>)> {
    config.validate()?;
    if sequences.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("covariate sequences must be finite".into()));
    }
    if config.strategy == MaskStrategy::Interpolation {
        if let Some(s) = sequences.iter().find(|s| s.rows() < 3) {
            return Err(Error::Config(format!("interpolation masking needs horizon >= 3, got {}", s.rows())));
        }
    }
    let noise = Normal::new(config.noise_mean, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(sequences.len());
    let mut indicators = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let (t_len, d) = (seq.rows(), seq.cols());
        let mut masked = seq.clone();
        let mut flags = vec![false; t_len];
        if config.strategy != MaskStrategy::None {
            for (t, flag) in flags.iter_mut().enumerate() {
                let boundary = t == 0 || t + 1 == t_len;
                if config.strategy == MaskStrategy::Interpolation && boundary {
                    continue;
                }
                if !rng.random_bool(config.prob) {
                    continue;
                }
                *flag = true;
                let row = &mut masked.values_mut()[t * d..(t + 1) * d];
                match config.strategy {
                    MaskStrategy::Gaussian => row.iter_mut().for_each(|x| *x = noise.sample(rng)),
                    MaskStrategy::Zero => row.fill(0.0),
                    MaskStrategy::Interpolation => {
                        for (c, x) in row.iter_mut().enumerate() {
                            *x = 0.5 * (seq.get(t - 1, c) + seq.get(t + 1, c));
                        }
                    }
                    MaskStrategy::None => unreachable!(),
                }
            }
        }
        out.push(masked);
        indicators.push(flags);
    }
    Ok((out, indicators))
}

/// Writes `unit_id,t,masked` rows.
pub fn write_mask_indicators(path: &Path, unit_ids: &[usize], indicators: &[Vec<bool>]) -> Result<()> {
    if unit_ids.len() != indicators.len() {
        return Err(Error::Shape(format!("{} unit ids vs {} indicator rows", unit_ids.len(), indicators.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["unit_id", "t", "masked"]).map_err(csv_err)?;
    for (id, flags) in unit_ids.iter().zip(indicators) {
        for (t, &m) in flags.iter().enumerate() {
            w.write_record([id.to_string(), t.to_string(), (m as u8).to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
