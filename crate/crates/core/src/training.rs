//! Factual training with periodic sub-group alignment, plus autoregressive
//! rollouts of a fitted model.
//!
//! Inputs are unit-major: row `b * T + t` holds the standardized volume
//! `Y_t`, the standardized running diameter, and the one-hot of the previous
//! treatment `A_{t−1}` (zero at `t = 0`). The head sees the representation at
//! `t` and the one-hot of `A_t`, and predicts the standardized `Y_{t+1}`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_clusters, subgroup_weights, ClusterAlgorithm, Clusterer};
use crate::diffnum::{
    Adam, AttentionLayout, Checkpoint, DenseTensor, EncoderConfig, EncoderVariant, Mode, SeqModel, Tape, Var,
    TREATMENT_WIDTH,
};
use crate::error::{shape_err, Error, Result};
use crate::masking::{apply_mask, MaskConfig};
use crate::rng::{self, tag};
use crate::simulator::{
    continue_with_plan, running_diameter, PanelDataset, SimulationConfig, SplitName, Trajectory, Treatment,
    VOLUME_FLOOR, V_MAX,
};
use crate::transport::{bound_terms, sga_loss, AlignmentReport, DistanceEstimator, TransportConfig};

/// Covariates per step: the standardized running diameter.
pub const COVARIATE_WIDTH: usize = 1;
/// Input row: `[Y_t, covariates, one-hot(A_{t−1})]`.
pub const INPUT_WIDTH: usize = 1 + COVARIATE_WIDTH + TREATMENT_WIDTH;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    /// Units per mini-batch.
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub n_clusters: usize,
    pub cluster_algorithm: ClusterAlgorithm,
    pub mask: MaskConfig,
    pub pretrain_epochs: usize,
    pub gap_epoch: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation RMSE; 0 disables it.
    pub patience: usize,
    pub variant: EncoderVariant,
    pub hidden_width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_hidden: Option<usize>,
    /// Fewest samples per present treatment group for a batch-local SGA term.
    pub min_group_size: usize,
    pub transport: TransportConfig,
    /// Alignment snapshot every this many epochs; 0 keeps only the final one.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 0.01,
            batch_size: 64,
            dropout_rate: 0.0,
            n_clusters: 3,
            cluster_algorithm: ClusterAlgorithm::Gmm,
            mask: MaskConfig::disabled(),
            pretrain_epochs: 10,
            gap_epoch: 2,
            max_epochs: 40,
            patience: 10,
            variant: EncoderVariant::Attention,
            hidden_width: 16,
            n_layers: 1,
            n_heads: 2,
            head_hidden: Some(16),
            min_group_size: 8,
            transport: TransportConfig::default(),
            snapshot_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.gap_epoch == 0 {
            return bad("batch_size, max_epochs and gap_epoch must be >= 1");
        }
        if self.pretrain_epochs > self.max_epochs {
            return bad("pretrain_epochs must not exceed max_epochs");
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be >= 1");
        }
        self.mask.validate()?;
        self.transport.validate()?;
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            variant: self.variant,
            input_width: INPUT_WIDTH,
            hidden_width: self.hidden_width,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            dropout_rate: self.dropout_rate,
        }
    }

    /// Whether the alignment term contributes at (1-based) `epoch`.
    pub fn sga_active(&self, epoch: usize) -> bool {
        self.lambda > 0.0 && epoch >= self.pretrain_epochs && epoch % self.gap_epoch == 0
    }

    pub fn sga_schedule(&self) -> Vec<usize> {
        (1..=self.max_epochs).filter(|&e| self.sga_active(e)).collect()
    }
}

/// Affine maps fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub volume_mean: f64,
    pub volume_std: f64,
    pub diameter_mean: f64,
    pub diameter_std: f64,
    pub diameter_window: usize,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-8))
}

impl Standardizer {
    pub fn fit(units: &[&Trajectory], diameter_window: usize) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Domain("cannot standardize an empty split".into()));
        }
        let (volume_mean, volume_std) = mean_std(units.iter().flat_map(|u| u.volumes.iter().copied()));
        let diameters: Vec<f64> = units
            .iter()
            .flat_map(|u| (0..u.volumes.len()).map(|t| running_diameter(&u.volumes, t, diameter_window)))
            .collect();
        let (diameter_mean, diameter_std) = mean_std(diameters.iter().copied());
        Ok(Self { volume_mean, volume_std, diameter_mean, diameter_std, diameter_window })
    }

    pub fn volume(&self, y: f64) -> f64 {
        (y - self.volume_mean) / self.volume_std
    }

    pub fn volume_inv(&self, z: f64) -> f64 {
        z * self.volume_std + self.volume_mean
    }

    /// Standardized outcomes `[steps, 1]` for rows `0..steps` of a volume path.
    pub fn outcomes(&self, volumes: &[f64], steps: usize) -> DenseTensor {
        DenseTensor::matrix(steps, 1, volumes[..steps].iter().map(|&y| self.volume(y)).collect()).expect("shape")
    }

    /// Covariates `[steps, COVARIATE_WIDTH]` for rows `0..steps` of a volume path.
    pub fn covariates(&self, volumes: &[f64], steps: usize) -> DenseTensor {
        let vals = (0..steps)
            .map(|t| (running_diameter(volumes, t, self.diameter_window) - self.diameter_mean) / self.diameter_std)
            .collect();
        DenseTensor::matrix(steps, COVARIATE_WIDTH, vals).expect("shape")
    }
}

/// Encoder input `[B * steps, INPUT_WIDTH]` from per-unit outcomes,
/// covariates and treatment sequences (at least `steps − 1` long).
pub fn assemble_input(
    outcomes: &[DenseTensor],
    covariates: &[DenseTensor],
    treatments: &[&[usize]],
    steps: usize,
) -> Result<DenseTensor> {
    if covariates.len() != treatments.len() || outcomes.len() != treatments.len() {
        return shape_err(format!(
            "{} outcome, {} covariate and {} treatment rows",
            outcomes.len(),
            covariates.len(),
            treatments.len()
        ));
    }
    let mut vals = Vec::with_capacity(covariates.len() * steps * INPUT_WIDTH);
    for ((out, cov), tr) in outcomes.iter().zip(covariates).zip(treatments) {
        if out.rows() < steps || cov.rows() < steps || tr.len() + 1 < steps {
            return shape_err(format!("unit history too short for {steps} steps"));
        }
        if out.cols() != 1 || cov.cols() != COVARIATE_WIDTH {
            return shape_err("outcome or covariate block has the wrong width");
        }
        for t in 0..steps {
            vals.extend_from_slice(out.row(t));
            vals.extend_from_slice(cov.row(t));
            let mut one_hot = [0.0; TREATMENT_WIDTH];
            if t > 0 {
                one_hot[tr[t - 1]] = 1.0;
            }
            vals.extend_from_slice(&one_hot);
        }
    }
    DenseTensor::matrix(covariates.len() * steps, INPUT_WIDTH, vals)
}

/// One-hot rows for the given treatment indices.
pub fn one_hot(treatments: impl IntoIterator<Item = usize>) -> DenseTensor {
    let vals: Vec<f64> =
        treatments.into_iter().flat_map(|a| (0..TREATMENT_WIDTH).map(move |j| if j == a { 1.0 } else { 0.0 })).collect();
    let n = vals.len() / TREATMENT_WIDTH;
    DenseTensor::matrix(n, TREATMENT_WIDTH, vals).expect("shape")
}

/// Mean squared error between predictions and targets (both `[n, 1]`).
pub fn factual_loss(tape: &mut Tape, predictions: Var, targets: &DenseTensor) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Domain("factual loss on an empty batch".into()));
    }
    let t = tape.constant(targets.clone());
    let d = tape.sub(predictions, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

fn treatment_seq(tr: &Trajectory) -> Vec<usize> {
    (0..tr.horizon()).map(|t| tr.treatment_index(t)).collect()
}

fn common_horizon(units: &[&Trajectory]) -> Result<usize> {
    let t = units.first().ok_or_else(|| Error::Domain("no units".into()))?.horizon();
    if units.iter().any(|u| u.horizon() != t) {
        return Err(Error::Shape("units have different horizons".into()));
    }
    if t == 0 {
        return Err(Error::Domain("units have no decision steps".into()));
    }
    Ok(t)
}

/// A trained model with its input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: SeqModel,
    pub standardizer: Standardizer,
}

impl FittedModel {
    fn inputs(&self, units: &[&Trajectory]) -> Result<(DenseTensor, Vec<Vec<usize>>, usize)> {
        let steps = common_horizon(units)?;
        let outs: Vec<DenseTensor> = units.iter().map(|u| self.standardizer.outcomes(&u.volumes, steps)).collect();
        let covs: Vec<DenseTensor> = units.iter().map(|u| self.standardizer.covariates(&u.volumes, steps)).collect();
        let treats: Vec<Vec<usize>> = units.iter().map(|u| treatment_seq(u)).collect();
        let refs: Vec<&[usize]> = treats.iter().map(Vec::as_slice).collect();
        Ok((assemble_input(&outs, &covs, &refs, steps)?, treats, steps))
    }

    /// Eval-mode representations `[B * T, H]` over the factual histories.
    pub fn representations(&self, units: &[&Trajectory]) -> Result<DenseTensor> {
        let (input, _, _) = self.inputs(units)?;
        self.model.encoder.encode(&input, units.len())
    }

    /// Final-layer attention weights `[B, heads, T, T]` of the attention
    /// encoder on factual histories; `None` for recurrent encoders.
    pub fn attention_weights(&self, units: &[&Trajectory]) -> Result<Option<(AttentionLayout, Vec<f64>)>> {
        let (input, _, _) = self.inputs(units)?;
        let mut tape = Tape::new();
        let w = self.model.encoder.params.bind_frozen(&mut tape);
        let x = tape.constant(input);
        let enc = self.model.encoder.forward(&mut tape, &w, x, units.len(), &mut Mode::Eval)?;
        Ok(enc
            .final_attention
            .and_then(|a| tape.attention_weights(a))
            .map(|(layout, weights)| (layout.clone(), weights.to_vec())))
    }

    fn head_predict(&self, reps: &DenseTensor, treatments: impl IntoIterator<Item = usize>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.model.head.params.bind_frozen(&mut tape);
        let r = tape.constant(reps.clone());
        let a = tape.constant(one_hot(treatments));
        let y = self.model.head.forward(&mut tape, &w, r, a)?;
        Ok(tape.value(y).values().iter().map(|&z| self.to_volume(z)).collect())
    }

    fn to_volume(&self, z: f64) -> f64 {
        self.standardizer.volume_inv(z).clamp(VOLUME_FLOOR, V_MAX)
    }

    /// Teacher-forced one-step predictions of `Y_{t+1}` under the observed
    /// `A_t`, for every `t`.
    pub fn predict_factual(&self, units: &[&Trajectory]) -> Result<Vec<Vec<f64>>> {
        let (input, treats, steps) = self.inputs(units)?;
        let reps = self.model.encoder.encode(&input, units.len())?;
        let flat = self.head_predict(&reps, treats.iter().flatten().copied())?;
        Ok(flat.chunks(steps).map(<[f64]>::to_vec).collect())
    }

    /// One-step predictions of `Y_{t+1}` under each of the four joint
    /// treatments: `out[unit][t][a]`.
    pub fn predict_all_treatments(&self, units: &[&Trajectory]) -> Result<Vec<Vec<[f64; TREATMENT_WIDTH]>>> {
        let (input, _, steps) = self.inputs(units)?;
        let reps = self.model.encoder.encode(&input, units.len())?;
        let per_arm = (0..TREATMENT_WIDTH)
            .map(|a| self.head_predict(&reps, std::iter::repeat_n(a, reps.rows())))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..units.len())
            .map(|u| (0..steps).map(|t| std::array::from_fn(|a| per_arm[a][u * steps + t])).collect())
            .collect())
    }

    /// Raw-volume RMSE of teacher-forced one-step predictions.
    pub fn factual_rmse(&self, units: &[&Trajectory]) -> Result<f64> {
        let preds = self.predict_factual(units)?;
        let mut se = 0.0;
        let mut n = 0usize;
        for (u, p) in units.iter().zip(&preds) {
            for (t, y) in p.iter().enumerate() {
                se += (y - u.volumes[t + 1]).powi(2);
                n += 1;
            }
        }
        Ok((se / n as f64).sqrt())
    }

    /// Autoregressive rollouts for several histories sharing one anchor `t`.
    /// `volumes[i]` holds `Y_0..Y_t`, `past[i]` holds `A_0..A_{t−1}` and every
    /// plan has the same length τ. Returns `Y_{t+1}..Y_{t+τ}` per history.
    pub fn rollout_batch(&self, volumes: &[Vec<f64>], past: &[Vec<usize>], plans: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = volumes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if past.len() != n || plans.len() != n {
            return shape_err(format!("{n} histories, {} treatment pasts, {} plans", past.len(), plans.len()));
        }
        let anchor = volumes[0].len() - 1;
        let tau = plans[0].len();
        if volumes.iter().any(|v| v.len() != anchor + 1) || past.iter().any(|p| p.len() != anchor) {
            return shape_err("rollout histories must share one anchor");
        }
        if plans.iter().any(|p| p.len() != tau) {
            return Err(Error::Contract("rollout plans must share one length".into()));
        }
        if plans.iter().flatten().any(|&a| a >= TREATMENT_WIDTH) {
            return Err(Error::Index("treatment index out of range".into()));
        }
        let mut paths = volumes.to_vec();
        let mut treats = past.to_vec();
        for s in 0..tau {
            let steps = anchor + s + 1;
            let outs: Vec<DenseTensor> = paths.iter().map(|p| self.standardizer.outcomes(p, steps)).collect();
            let covs: Vec<DenseTensor> = paths.iter().map(|p| self.standardizer.covariates(p, steps)).collect();
            let refs: Vec<&[usize]> = treats.iter().map(Vec::as_slice).collect();
            let input = assemble_input(&outs, &covs, &refs, steps)?;
            let reps = self.model.encoder.encode(&input, n)?;
            let last: Vec<f64> = (0..n).flat_map(|i| reps.row(i * steps + steps - 1).to_vec()).collect();
            let last = DenseTensor::matrix(n, reps.cols(), last)?;
            let next = self.head_predict(&last, plans.iter().map(|p| p[s]))?;
            for i in 0..n {
                paths[i].push(next[i]);
                treats[i].push(plans[i][s]);
            }
        }
        Ok(paths.into_iter().map(|p| p[anchor + 1..].to_vec()).collect())
    }

    /// Rolls one history forward under `plan` for `tau` steps.
    pub fn rollout_tau(&self, volumes: &[f64], past: &[usize], plan: &[Treatment], tau: usize) -> Result<Vec<f64>> {
        if plan.len() != tau {
            return Err(Error::Contract(format!("plan length {} differs from tau {tau}", plan.len())));
        }
        let plan: Vec<usize> = plan.iter().map(|a| a.index()).collect();
        Ok(self.rollout_batch(&[volumes.to_vec()], &[past.to_vec()], &[plan])?.remove(0))
    }
}

/// Alignment diagnostics at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAlignment {
    pub t: usize,
    pub report: AlignmentReport,
}

/// Alignment diagnostics of one model snapshot, averaged over timesteps
/// where the terms exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSnapshot {
    pub epoch: usize,
    pub steps: Vec<StepAlignment>,
    pub marginal_w1: Option<f64>,
    pub weighted_subgroup_sum: Option<f64>,
    pub delta_c: f64,
    pub inequality_slack: Option<f64>,
    pub cf_risk_proxy: f64,
}

/// Rows of unit-major representations `reps` that belong to step `t`.
pub fn step_points(reps: &DenseTensor, n_units: usize, steps: usize, t: usize) -> Result<DenseTensor> {
    if t >= steps || reps.rows() != n_units * steps {
        return Err(Error::Shape(format!("{} rows do not hold step {t} of {n_units} x {steps}", reps.rows())));
    }
    let vals = (0..n_units).flat_map(|u| reps.row(u * steps + t).to_vec()).collect();
    DenseTensor::matrix(n_units, reps.cols(), vals)
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Bound terms on eval-mode representations of `units`, with a fresh
/// treatment-agnostic clustering per timestep. The counterfactual risk proxy
/// is the one-step MSE over all four treatments, in units of `V_MAX`.
pub fn snapshot_alignment(
    fitted: &FittedModel,
    units: &[&Trajectory],
    sim: &SimulationConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<AlignmentSnapshot> {
    let steps = common_horizon(units)?;
    let reps = fitted.representations(units)?;
    let preds = fitted.predict_all_treatments(units)?;
    let estimator = DistanceEstimator::Sinkhorn(config.transport.clone());
    let mut out = Vec::new();
    let mut risks = Vec::new();
    for t in 0..steps {
        let mut se = 0.0;
        for (u, tr) in units.iter().enumerate() {
            for (a, treatment) in Treatment::ALL.iter().enumerate() {
                let truth = continue_with_plan(tr, sim, t, &[*treatment])?[0];
                se += ((preds[u][t][a] - truth) / V_MAX).powi(2);
            }
        }
        let risk = se / (units.len() * TREATMENT_WIDTH) as f64;
        risks.push(risk);
        if units.len() < config.n_clusters {
            continue;
        }
        let points = step_points(&reps, units.len(), steps, t)?;
        let treatments: Vec<usize> = units.iter().map(|u| u.treatment_index(t)).collect();
        let mut r = rng::stream(config.seed, &[tag::DIAGNOSTIC, epoch as u64, t as u64]);
        let clusterer = Clusterer::fit(config.cluster_algorithm, &points, config.n_clusters, &mut r)?;
        let labels = assign_clusters(&clusterer, &points)?;
        let asg = subgroup_weights(&labels, &treatments, config.n_clusters, TREATMENT_WIDTH)?;
        let report = bound_terms(&points, &asg, &treatments, &clusterer, Some(risk), &estimator)?;
        out.push(StepAlignment { t, report });
    }
    Ok(AlignmentSnapshot {
        epoch,
        marginal_w1: mean_opt(out.iter().map(|s| s.report.marginal_w1)),
        weighted_subgroup_sum: mean_opt(out.iter().map(|s| s.report.weighted_subgroup_sum)),
        delta_c: mean_opt(out.iter().map(|s| Some(s.report.delta_c))).unwrap_or(0.0),
        inequality_slack: mean_opt(out.iter().map(|s| s.report.inequality_slack)),
        cf_risk_proxy: risks.iter().sum::<f64>() / risks.len() as f64,
        steps: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean factual loss over training batches (standardized units).
    pub loss_y: f64,
    /// Mean per-batch `Σ_t L_D^t`; absent on epochs without alignment.
    pub loss_d: Option<f64>,
    pub sga_active: bool,
    /// Timestep terms that fell back to the pooled training split.
    pub sga_pooled_terms: usize,
    /// Raw-volume RMSE of one-step predictions on the validation split.
    pub val_rmse: f64,
    /// Parameter digest when this epoch became the best so far.
    pub checkpoint_hash: Option<String>,
    /// Epoch wall time. Not serialized.
    #[serde(skip)]
    pub wall_ms: f64,
    pub snapshot: Option<AlignmentSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
    pub final_checkpoint_hash: String,
    /// Snapshot of the retained (best-validation) model.
    pub final_snapshot: Option<AlignmentSnapshot>,
}

#[derive(Serialize)]
struct RecordHeader<'a> {
    config: &'a TrainConfig,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct RecordFooter<'a> {
    best_epoch: usize,
    best_val_rmse: f64,
    stopped_early: bool,
    final_checkpoint_hash: &'a str,
    final_snapshot: &'a Option<AlignmentSnapshot>,
}

impl RunRecord {
    /// One JSON object per line: a header with the config, one line per
    /// epoch, and a closing summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = RecordHeader { config: &self.config, config_hash: &self.config_hash };
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        let footer = RecordFooter {
            best_epoch: self.best_epoch,
            best_val_rmse: self.best_val_rmse,
            stopped_early: self.stopped_early,
            final_checkpoint_hash: &self.final_checkpoint_hash,
            final_snapshot: &self.final_snapshot,
        };
        writeln!(f, "{}", serde_json::to_string(&footer)?)?;
        f.flush()?;
        Ok(())
    }

    /// Epoch metrics without wall-clock times, for determinism checks.
    pub fn metrics(&self) -> Vec<(usize, f64, Option<f64>, f64)> {
        self.epochs.iter().map(|e| (e.epoch, e.loss_y, e.loss_d, e.val_rmse)).collect()
    }
}

/// Per-timestep clusterings of cached training representations.
struct EpochClusters {
    /// `[N * T, H]`, unit-major over the training split.
    cache: DenseTensor,
    models: Vec<Clusterer>,
    labels: Vec<Vec<usize>>,
}

fn fit_epoch_clusters(
    fitted: &FittedModel,
    units: &[&Trajectory],
    outs: &[DenseTensor],
    covs: &[DenseTensor],
    treats: &[Vec<usize>],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochClusters> {
    let steps = treats[0].len();
    let refs: Vec<&[usize]> = treats.iter().map(Vec::as_slice).collect();
    let cache = fitted.model.encoder.encode(&assemble_input(outs, covs, &refs, steps)?, units.len())?;
    let h = cache.cols();
    let mut models = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    for t in 0..steps {
        let vals = (0..units.len()).flat_map(|u| cache.row(u * steps + t).to_vec()).collect();
        let points = DenseTensor::matrix(units.len(), h, vals)?;
        let mut r = rng::stream(config.seed, &[tag::CLUSTER, epoch as u64, t as u64]);
        let model = Clusterer::fit(config.cluster_algorithm, &points, config.n_clusters, &mut r)?;
        labels.push(assign_clusters(&model, &points)?);
        models.push(model);
    }
    Ok(EpochClusters { cache, models, labels })
}

/// `λ · Σ_t L_D^t` for one batch. Returns the loss and the number of
/// timesteps that used the pooled training split.
#[allow(clippy::too_many_arguments)]
fn batch_alignment(
    tape: &mut Tape,
    reps: Var,
    chunk: &[usize],
    treats: &[Vec<usize>],
    clusters: &EpochClusters,
    config: &TrainConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<(Var, usize)> {
    let steps = treats[0].len();
    let n_train = treats.len();
    let in_batch: Vec<bool> = {
        let mut v = vec![false; n_train];
        chunk.iter().for_each(|&u| v[u] = true);
        v
    };
    let others: Vec<usize> = (0..n_train).filter(|&u| !in_batch[u]).collect();
    let mut terms = Vec::with_capacity(steps);
    let mut pooled = 0;
    for t in 0..steps {
        let rows: Vec<usize> = (0..chunk.len()).map(|b| b * steps + t).collect();
        let live = tape.gather_rows(reps, &rows)?;
        let live_labels = assign_clusters(&clusters.models[t], tape.value(live))?;
        let mut treatments: Vec<usize> = chunk.iter().map(|&u| treats[u][t]).collect();
        let mut counts = [0usize; TREATMENT_WIDTH];
        treatments.iter().for_each(|&a| counts[a] += 1);
        let local = counts.iter().all(|&c| c == 0 || c >= config.min_group_size);
        let (points, labels) = if local || others.is_empty() {
            (live, live_labels)
        } else {
            pooled += 1;
            let h = clusters.cache.cols();
            let vals = others.iter().flat_map(|&u| clusters.cache.row(u * steps + t).to_vec()).collect();
            let fixed = tape.constant(DenseTensor::matrix(others.len(), h, vals)?);
            let points = tape.concat_rows(&[live, fixed])?;
            let mut labels = live_labels;
            labels.extend(others.iter().map(|&u| clusters.labels[t][u]));
            treatments.extend(others.iter().map(|&u| treats[u][t]));
            (points, labels)
        };
        let asg = subgroup_weights(&labels, &treatments, config.n_clusters, TREATMENT_WIDTH)?;
        let mut r = rng::stream(config.seed, &[tag::MIXTURE, epoch as u64, batch_index as u64, t as u64]);
        terms.push(sga_loss(tape, points, &asg, &treatments, &config.transport, &mut r)?);
    }
    let stacked = tape.concat_cols(&terms)?;
    Ok((tape.sum(stacked), pooled))
}

/// Trains on the dataset's training split with early stopping on the
/// validation split and returns the best-validation model.
pub fn train(dataset: &PanelDataset, config: &TrainConfig) -> Result<(FittedModel, RunRecord)> {
    config.validate()?;
    let units = dataset.split_units(SplitName::Train);
    if units.is_empty() {
        return Err(Error::Domain("training split is empty".into()));
    }
    let val_units = {
        let v = dataset.split_units(SplitName::Val);
        if v.is_empty() {
            units.clone()
        } else {
            v
        }
    };
    let steps = common_horizon(&units)?;
    let standardizer = Standardizer::fit(&units, dataset.config.diameter_window)?;
    let mut fitted = FittedModel { model: SeqModel::init(config.encoder_config(), config.head_hidden, config.seed)?, standardizer };
    let config_hash = crate::content_hash(config);

    let outs: Vec<DenseTensor> = units.iter().map(|u| standardizer.outcomes(&u.volumes, steps)).collect();
    let covs: Vec<DenseTensor> = units.iter().map(|u| standardizer.covariates(&u.volumes, steps)).collect();
    let treats: Vec<Vec<usize>> = units.iter().map(|u| treatment_seq(u)).collect();
    let targets: Vec<Vec<f64>> =
        units.iter().map(|u| u.volumes[1..=steps].iter().map(|&y| standardizer.volume(y)).collect()).collect();
    let fixed_mask = if config.mask.is_active() && config.mask.mask_once {
        Some(apply_mask(&covs, &config.mask, &mut rng::stream(config.seed, &[tag::MASK, 0]))?.0)
    } else {
        None
    };

    let mut adam = Adam::new(config.lr);
    let mut best: Option<(f64, usize, FittedModel, String)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let masked_owned;
        let masked: &[DenseTensor] = match (&fixed_mask, config.mask.is_active()) {
            (Some(m), _) => m,
            (None, true) => {
                let mut r = rng::stream(config.seed, &[tag::MASK, epoch as u64]);
                masked_owned = apply_mask(&covs, &config.mask, &mut r)?.0;
                &masked_owned
            }
            (None, false) => &covs,
        };
        let sga = config.sga_active(epoch);
        let clusters = if sga { Some(fit_epoch_clusters(&fitted, &units, &outs, &covs, &treats, config, epoch)?) } else { None };
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut ly_sum, mut ld_sum, mut n_batches, mut pooled_terms) = (0.0, 0.0, 0usize, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = fitted.model.bind(&mut tape);
            let chunk_outs: Vec<DenseTensor> = chunk.iter().map(|&u| outs[u].clone()).collect();
            let chunk_covs: Vec<DenseTensor> = chunk.iter().map(|&u| masked[u].clone()).collect();
            let chunk_treats: Vec<&[usize]> = chunk.iter().map(|&u| treats[u].as_slice()).collect();
            let x = tape.constant(assemble_input(&chunk_outs, &chunk_covs, &chunk_treats, steps)?);
            let mut drng = rng::stream(config.seed, &[tag::DROPOUT, epoch as u64, bi as u64]);
            let enc = fitted.model.encoder.forward(&mut tape, &bound.encoder, x, chunk.len(), &mut Mode::Train(&mut drng))?;
            let a = tape.constant(one_hot(chunk_treats.iter().flat_map(|t| t.iter().copied())));
            let pred = fitted.model.head.forward(&mut tape, &bound.head, enc.reps, a)?;
            let y: Vec<f64> = chunk.iter().flat_map(|&u| targets[u].iter().copied()).collect();
            let ly = factual_loss(&mut tape, pred, &DenseTensor::matrix(y.len(), 1, y)?)?;
            ly_sum += tape.value(ly).item() * chunk.len() as f64;
            let total = match &clusters {
                Some(c) => {
                    let (ld, pooled) = batch_alignment(&mut tape, enc.reps, chunk, &treats, c, config, epoch, bi)?;
                    pooled_terms += pooled;
                    ld_sum += tape.value(ld).item();
                    let weighted = tape.scale(ld, config.lambda);
                    tape.add(ly, weighted)?
                }
                None => ly,
            };
            n_batches += 1;
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("non-finite loss {loss} in batch {bi}") });
            }
            let grads = tape.backward(total)?;
            let g = fitted.model.collect_grads(&bound, &grads)?;
            if !g.iter().all(DenseTensor::is_finite) {
                return Err(Error::Divergence { epoch, reason: format!("non-finite gradient in batch {bi}") });
            }
            let grefs: Vec<&DenseTensor> = g.iter().collect();
            adam.step(&mut fitted.model.tensors_mut(), &grefs)?;
        }
        if !fitted.model.is_finite() {
            return Err(Error::Divergence { epoch, reason: "non-finite parameters".into() });
        }
        let val_rmse = fitted.factual_rmse(&val_units)?;
        let mut checkpoint_hash = None;
        if best.as_ref().is_none_or(|b| val_rmse < b.0) {
            let digest = Checkpoint::new(fitted.model.clone(), config_hash.clone()).digest();
            checkpoint_hash = Some(digest.clone());
            best = Some((val_rmse, epoch, fitted.clone(), digest));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let snapshot = if config.snapshot_every > 0 && epoch % config.snapshot_every == 0 {
            Some(snapshot_alignment(&fitted, &val_units, &dataset.config, config, epoch)?)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            loss_y: ly_sum / units.len() as f64,
            loss_d: sga.then(|| ld_sum / n_batches as f64),
            sga_active: sga,
            sga_pooled_terms: pooled_terms,
            val_rmse,
            checkpoint_hash,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            snapshot,
        });
        if config.patience > 0 && since_best >= config.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_rmse, best_epoch, best_model, final_checkpoint_hash) = best.expect("at least one epoch");
    let final_snapshot = Some(snapshot_alignment(&best_model, &val_units, &dataset.config, config, best_epoch)?);
    let record = RunRecord {
        config: config.clone(),
        config_hash,
        epochs,
        best_epoch,
        best_val_rmse,
        stopped_early,
        final_checkpoint_hash,
        final_snapshot,
    };
    Ok((best_model, record))
}
