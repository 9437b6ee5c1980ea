//! Experiment specification files.

use std::path::{Path, PathBuf};

use cfseq::evaluation::{standard_cells, CellSpec, EvalConfig, SuiteConfig};
use cfseq::simulator::SimulationConfig;
use cfseq::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "CFSEQ_SEED";
pub const OUT_ENV: &str = "CFSEQ_OUT_DIR";

/// Ablation grid around `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Confounding strengths; empty means `simulation.gamma` only.
    pub gammas: Vec<f64>,
    pub cluster_grid: bool,
    pub mask_freq_grid: bool,
    /// Keep only these cells; empty keeps all.
    pub methods: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationSpec,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One offending field of an invalid spec.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl ToString) -> Self {
        Self { field: field.into(), message: message.to_string() }
    }
}

/// Everything that determines artifact content. Seeds and the output
/// directory are excluded; every artifact records its own seed.
#[derive(Serialize)]
struct HashedPart<'a> {
    simulation: &'a SimulationConfig,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
    ablation: &'a AblationSpec,
}

impl ExperimentSpec {
    /// Reads a spec and applies overrides: flags first, then
    /// [`SEED_ENV`] / [`OUT_ENV`].
    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, Vec<FieldError>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![FieldError::new("spec", format!("{}: {e}", path.display()))])?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| vec![FieldError::new(&field_of(&e), e)])?;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| vec![FieldError::new(SEED_ENV, e)])?),
            Err(_) => None,
        };
        if let Some(s) = seed.or(env_seed) {
            spec.seeds = vec![s];
        }
        if let Some(dir) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
            spec.out_dir = dir;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push(FieldError::new("seeds", "seed list must be non-empty"));
        }
        if let Err(e) = self.simulation.validate() {
            errs.push(FieldError::new("simulation", e));
        }
        if let Err(e) = self.train.validate() {
            errs.push(FieldError::new("train", e));
        }
        if self.eval.tau_max == 0 || self.eval.tau_max >= self.simulation.horizon {
            errs.push(FieldError::new("eval.tau_max", format!("must lie in [1, horizon), got {}", self.eval.tau_max)));
        }
        if self.eval.anchor_stride == 0 {
            errs.push(FieldError::new("eval.anchor_stride", "must be >= 1"));
        }
        if self.ablation.gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
            errs.push(FieldError::new("ablation.gammas", "gammas must be finite and non-negative"));
        }
        let names: Vec<String> = self.all_cells().into_iter().map(|c| c.method).collect();
        for m in &self.ablation.methods {
            if !names.contains(m) {
                errs.push(FieldError::new("ablation.methods", format!("unknown method {m:?}; known: {}", names.join(", "))));
            }
        }
        if let Err(e) = check_writable(&self.out_dir) {
            errs.push(FieldError::new("out_dir", format!("{}: {e}", self.out_dir.display())));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn config_hash(&self) -> String {
        cfseq::content_hash(&HashedPart {
            simulation: &self.simulation,
            train: &self.train,
            eval: &self.eval,
            ablation: &self.ablation,
        })
    }

    pub fn simulation_for(&self, seed: u64) -> SimulationConfig {
        SimulationConfig { seed, ..self.simulation.clone() }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed{seed}"))
    }

    fn all_cells(&self) -> Vec<CellSpec> {
        standard_cells(&self.train, self.ablation.cluster_grid, self.ablation.mask_freq_grid)
    }

    pub fn suite(&self) -> SuiteConfig {
        let cells = self
            .all_cells()
            .into_iter()
            .filter(|c| self.ablation.methods.is_empty() || self.ablation.methods.contains(&c.method))
            .collect();
        let gammas = if self.ablation.gammas.is_empty() { vec![self.simulation.gamma] } else { self.ablation.gammas.clone() };
        SuiteConfig { simulation: self.simulation.clone(), gammas, seeds: self.seeds.clone(), cells, eval: self.eval.clone() }
    }
}

/// Best-effort field name from a serde error message.
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "spec".into()
}

fn check_writable(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".cfseq-write-probe");
    std::fs::write(&probe, b"")?;
    std::fs::remove_file(probe)
}
