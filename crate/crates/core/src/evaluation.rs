//! Normalized-RMSE metrics over counterfactual bundles, the attention audit
//! and the ablation suite with its CSV tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{assign_clusters, subgroup_weights, ClusterAlgorithm, ClusterAuditRow, Clusterer};
use crate::diffnum::EncoderVariant;
use crate::error::{csv_err, Error, Result};
use crate::masking::{MaskConfig, MaskStrategy};
use crate::simulator::{
    continue_with_plan, enumerate_one_step_counterfactuals, generate_dataset, sliding_treatment_counterfactuals,
    CounterfactualBundle, PanelDataset, Plan, SimulationConfig, SplitName, Trajectory, V_MAX,
};
use crate::rng::{self, tag};
use crate::diffnum::TREATMENT_WIDTH;
use crate::training::{step_points, train, FittedModel, RunRecord, TrainConfig};
use crate::transport::{paired_distance_audit, DistanceEstimator, PairedAuditRow};

/// `RMSE(predictions, truths) / v_max`.
pub fn normalized_rmse(predictions: &[f64], truths: &[f64], v_max: f64) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Domain(format!(
            "need equal non-empty lengths, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let se: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / predictions.len() as f64).sqrt() / v_max)
}

/// Anything that can continue unit histories under treatment plans.
pub trait Predictor {
    /// Predicted `Y_{t+1}..Y_{t+τ}` as `out[unit][plan]`, for histories
    /// truncated at `anchor`. All plans in one call share a length.
    fn rollout(&self, units: &[&Trajectory], anchor: usize, plans: &[Vec<Plan>]) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl Predictor for FittedModel {
    fn rollout(&self, units: &[&Trajectory], anchor: usize, plans: &[Vec<Plan>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut volumes = Vec::new();
        let mut past = Vec::new();
        let mut flat = Vec::new();
        for (u, unit_plans) in units.iter().zip(plans) {
            if anchor >= u.volumes.len() {
                return Err(Error::Index(format!("anchor {anchor} beyond unit {} history", u.unit_id)));
            }
            for p in unit_plans {
                volumes.push(u.volumes[..=anchor].to_vec());
                past.push((0..anchor).map(|t| u.treatment_index(t)).collect());
                flat.push(p.iter().map(|a| a.index()).collect());
            }
        }
        let mut preds = self.rollout_batch(&volumes, &past, &flat)?.into_iter();
        Ok(plans.iter().map(|ps| ps.iter().map(|_| preds.next().expect("one per plan")).collect()).collect())
    }
}

/// The simulator itself, continuing each unit with its own noise draws.
pub struct OraclePredictor<'a> {
    pub config: &'a SimulationConfig,
}

impl Predictor for OraclePredictor<'_> {
    fn rollout(&self, units: &[&Trajectory], anchor: usize, plans: &[Vec<Plan>]) -> Result<Vec<Vec<Vec<f64>>>> {
        units
            .iter()
            .zip(plans)
            .map(|(u, ps)| ps.iter().map(|p| continue_with_plan(u, self.config, anchor, p)).collect())
            .collect()
    }
}

/// Squared errors at step `tau` for the plans `select(bundle)` keeps,
/// truncated to `tau`. Bundles are batched per anchor time.
fn squared_errors<P: Predictor + ?Sized>(
    predictor: &P,
    units: &[&Trajectory],
    bundles: &[CounterfactualBundle],
    tau: usize,
    select: impl Fn(&CounterfactualBundle) -> Vec<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let by_id: HashMap<usize, &Trajectory> = units.iter().map(|u| (u.unit_id, *u)).collect();
    let mut groups: BTreeMap<usize, Vec<&CounterfactualBundle>> = BTreeMap::new();
    for b in bundles {
        if b.horizon < tau {
            return Err(Error::Contract(format!("bundle horizon {} shorter than tau {tau}", b.horizon)));
        }
        groups.entry(b.anchor_time).or_default().push(b);
    }
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for (anchor, group) in groups {
        let mut us = Vec::with_capacity(group.len());
        let mut plans = Vec::with_capacity(group.len());
        let mut picks = Vec::with_capacity(group.len());
        for b in &group {
            let u = by_id.get(&b.unit_id).ok_or_else(|| Error::Index(format!("unit {} not supplied", b.unit_id)))?;
            let chosen = select(b);
            plans.push(chosen.iter().map(|&j| b.treatment_plans[j][..tau].to_vec()).collect::<Vec<Plan>>());
            picks.push(chosen);
            us.push(*u);
        }
        let out = predictor.rollout(&us, anchor, &plans)?;
        for ((b, chosen), rows) in group.iter().zip(&picks).zip(out) {
            for (&j, path) in chosen.iter().zip(rows) {
                preds.push(path[tau - 1]);
                truths.push(b.true_paths[j][tau - 1]);
            }
        }
    }
    Ok((preds, truths))
}

/// Metric at step `tau` over the plans chosen by `select`.
pub fn eval_plans<P: Predictor + ?Sized>(
    predictor: &P,
    units: &[&Trajectory],
    bundles: &[CounterfactualBundle],
    tau: usize,
    select: impl Fn(&CounterfactualBundle) -> Vec<usize>,
) -> Result<f64> {
    let (p, t) = squared_errors(predictor, units, bundles, tau, select)?;
    normalized_rmse(&p, &t, V_MAX)
}

/// One-step metric over all four treatments per anchor, or over the three
/// counterfactual ones when `counterfactual_only` is set.
pub fn eval_one_step<P: Predictor + ?Sized>(
    predictor: &P,
    units: &[&Trajectory],
    bundles: &[CounterfactualBundle],
    counterfactual_only: bool,
) -> Result<f64> {
    eval_plans(predictor, units, bundles, 1, |b| {
        (0..b.treatment_plans.len()).filter(|&j| !(counterfactual_only && b.factual_plan == Some(j))).collect()
    })
}

/// Sliding-treatment metric at `tau`: plans whose treatment falls within the
/// first `tau` steps, scored on `Y_{t+τ}`.
pub fn eval_sliding<P: Predictor + ?Sized>(
    predictor: &P,
    units: &[&Trajectory],
    bundles: &[CounterfactualBundle],
    tau: usize,
) -> Result<f64> {
    if tau == 0 {
        return Err(Error::Contract("tau must be >= 1".into()));
    }
    eval_plans(predictor, units, bundles, tau, |b| (0..tau.min(b.treatment_plans.len())).collect())
}

/// Anchors `1, 1 + stride, ...` with room for `tau_max` further steps.
pub fn anchors(horizon: usize, tau_max: usize, stride: usize) -> Vec<usize> {
    (1..horizon).step_by(stride.max(1)).filter(|&t| t + tau_max <= horizon).collect()
}

pub fn one_step_bundles(units: &[&Trajectory], config: &SimulationConfig, stride: usize) -> Result<Vec<CounterfactualBundle>> {
    let mut out = Vec::new();
    for u in units {
        for t in anchors(u.horizon(), 1, stride) {
            out.push(enumerate_one_step_counterfactuals(u, t, config)?);
        }
    }
    Ok(out)
}

pub fn sliding_bundles(
    units: &[&Trajectory],
    config: &SimulationConfig,
    tau_max: usize,
    stride: usize,
) -> Result<Vec<CounterfactualBundle>> {
    let mut out = Vec::new();
    for u in units {
        for t in anchors(u.horizon(), tau_max, stride) {
            out.push(sliding_treatment_counterfactuals(u, t, tau_max, config)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionAudit {
    pub t: usize,
    /// Mean over units and heads of the attention the query at `t` puts on
    /// steps before `t`.
    pub past_mass: f64,
    pub current_mass: f64,
    /// `(unit_id, past, current)`.
    pub per_unit: Vec<(usize, f64, f64)>,
}

/// Final-layer attention from the query at step `t`.
pub fn attention_audit(fitted: &FittedModel, units: &[&Trajectory], t: usize) -> Result<AttentionAudit> {
    if fitted.model.variant() != EncoderVariant::Attention {
        return Err(Error::UnsupportedVariant(format!("attention audit needs an attention encoder, got {}", fitted.model.variant())));
    }
    let Some((layout, weights)) = fitted.attention_weights(units)? else {
        return Err(Error::Contract("encoder exposed no attention weights".into()));
    };
    if t >= layout.tq {
        return Err(Error::Index(format!("audit step {t} beyond sequence length {}", layout.tq)));
    }
    let (tq, tk, heads) = (layout.tq, layout.tk, layout.heads);
    let per_unit: Vec<(usize, f64, f64)> = units
        .iter()
        .enumerate()
        .map(|(b, u)| {
            let (mut past, mut current) = (0.0, 0.0);
            for h in 0..heads {
                let row = &weights[((b * heads + h) * tq + t) * tk..][..tk];
                past += row[..t].iter().sum::<f64>();
                current += row[t];
            }
            (u.unit_id, past / heads as f64, current / heads as f64)
        })
        .collect();
    let n = per_unit.len() as f64;
    Ok(AttentionAudit {
        t,
        past_mass: per_unit.iter().map(|r| r.1).sum::<f64>() / n,
        current_mass: per_unit.iter().map(|r| r.2).sum::<f64>() / n,
        per_unit,
    })
}

/// Paired versus non-paired sub-group distances at every step, on a fresh
/// clustering of the representations of `units`. Steps with fewer than two
/// observed treatments are skipped.
pub fn subgroup_audit(
    fitted: &FittedModel,
    units: &[&Trajectory],
    config: &TrainConfig,
) -> Result<(Vec<PairedAuditRow>, Vec<ClusterAuditRow>)> {
    let steps = units.first().ok_or_else(|| Error::Domain("no units to audit".into()))?.horizon();
    let reps = fitted.representations(units)?;
    let estimator = DistanceEstimator::Sinkhorn(config.transport.clone());
    let (mut paired, mut clusters) = (Vec::new(), Vec::new());
    for t in 0..steps {
        let points = step_points(&reps, units.len(), steps, t)?;
        let treatments: Vec<usize> = units.iter().map(|u| u.treatment_index(t)).collect();
        let mut r = rng::stream(config.seed, &[tag::DIAGNOSTIC, u64::MAX, t as u64]);
        let model = Clusterer::fit(config.cluster_algorithm, &points, config.n_clusters, &mut r)?;
        let labels = assign_clusters(&model, &points)?;
        for ((u, &a), &k) in units.iter().zip(&treatments).zip(&labels) {
            clusters.push(ClusterAuditRow { t, unit_id: u.unit_id, treatment: a, cluster: k });
        }
        let asg = subgroup_weights(&labels, &treatments, config.n_clusters, TREATMENT_WIDTH)?;
        match paired_distance_audit(&points, &asg, &treatments, t, &estimator) {
            Ok(rows) => paired.extend(rows),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((paired, clusters))
}

/// Output tables of the ablation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableId {
    Table1,
    Table2Sga,
    Table2Rtm,
    Table3Masking,
    Table4Clusters,
    Table6MaskFreq,
}

impl TableId {
    pub const ALL: [TableId; 6] = [
        TableId::Table1,
        TableId::Table2Sga,
        TableId::Table2Rtm,
        TableId::Table3Masking,
        TableId::Table4Clusters,
        TableId::Table6MaskFreq,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TableId::Table1 => "table1.csv",
            TableId::Table2Sga => "table2_sga.csv",
            TableId::Table2Rtm => "table2_rtm.csv",
            TableId::Table3Masking => "table3_masking.csv",
            TableId::Table4Clusters => "table4_clusters.csv",
            TableId::Table6MaskFreq => "table6_maskfreq.csv",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TableId::Table1 => "baseline vs alignment plus masking, per confounding strength and horizon",
            TableId::Table2Sga => "baseline vs sub-group alignment only",
            TableId::Table2Rtm => "baseline vs random temporal masking only",
            TableId::Table3Masking => "masking strategy comparison (gaussian, zero, interpolation, none)",
            TableId::Table4Clusters => "sub-group alignment across cluster counts and clustering algorithms",
            TableId::Table6MaskFreq => "masking probability sweep",
        }
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".csv"))
    }
}

/// One trained configuration in a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: String,
    pub train: TrainConfig,
    pub tables: Vec<TableId>,
}

/// The standard grid around a base configuration: baseline (λ = 0, no
/// masking) and the alignment / masking variants, plus cluster and masking
/// probability sweeps. `base.lambda` and `base.mask.prob` give the settings
/// used when a component is switched on; a zero `base.mask.prob` falls back
/// to the default masking probability.
pub fn standard_cells(base: &TrainConfig, cluster_grid: bool, mask_freq_grid: bool) -> Vec<CellSpec> {
    let lambda = base.lambda;
    let prob = if base.mask.prob > 0.0 { base.mask.prob } else { MaskConfig::default().prob };
    let mask_on = MaskConfig { strategy: MaskStrategy::Gaussian, prob, ..base.mask.clone() };
    let with = |lambda: f64, mask: MaskConfig| TrainConfig { lambda, mask, ..base.clone() };
    let mut cells = vec![
        CellSpec {
            method: "baseline".into(),
            train: with(0.0, MaskConfig::disabled()),
            tables: vec![TableId::Table1, TableId::Table2Sga, TableId::Table2Rtm, TableId::Table3Masking],
        },
        CellSpec { method: "sga".into(), train: with(lambda, MaskConfig::disabled()), tables: vec![TableId::Table2Sga] },
        CellSpec {
            method: "rtm".into(),
            train: with(0.0, mask_on.clone()),
            tables: vec![TableId::Table2Rtm, TableId::Table3Masking],
        },
        CellSpec { method: "sga_rtm".into(), train: with(lambda, mask_on.clone()), tables: vec![TableId::Table1] },
    ];
    for strategy in [MaskStrategy::Zero, MaskStrategy::Interpolation] {
        cells.push(CellSpec {
            method: format!("rtm_{strategy}"),
            train: with(0.0, MaskConfig { strategy, ..mask_on.clone() }),
            tables: vec![TableId::Table3Masking],
        });
    }
    if cluster_grid {
        for algo in [ClusterAlgorithm::Gmm, ClusterAlgorithm::Kmeans] {
            for k in [2, 3, 5] {
                let train = TrainConfig { n_clusters: k, cluster_algorithm: algo, ..with(lambda, MaskConfig::disabled()) };
                cells.push(CellSpec { method: format!("sga_k{k}_{algo}"), train, tables: vec![TableId::Table4Clusters] });
            }
        }
    }
    if mask_freq_grid {
        for p in [0.0, 0.02, 0.05, 0.10, 0.20, 0.50] {
            let mask = MaskConfig { prob: p, ..mask_on.clone() };
            cells.push(CellSpec { method: format!("rtm_p{p}"), train: with(0.0, mask), tables: vec![TableId::Table6MaskFreq] });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau_max: usize,
    pub counterfactual_only: bool,
    pub anchor_stride: usize,
    pub split: SplitName,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tau_max: 6, counterfactual_only: false, anchor_stride: 1, split: SplitName::Test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub simulation: SimulationConfig,
    /// Confounding strengths; each overrides `simulation.gamma`.
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.gammas.is_empty() || self.cells.is_empty() {
            return Err(Error::Config("suite needs at least one seed, gamma and cell".into()));
        }
        if self.eval.tau_max == 0 {
            return Err(Error::Config("tau_max must be >= 1".into()));
        }
        self.simulation.validate()?;
        self.cells.iter().try_for_each(|c| c.train.validate())
    }
}

/// `τ = 1` from the one-step task, `τ ≥ 2` from sliding windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub gamma: f64,
    pub seed: u64,
    pub tau: usize,
    pub nrmse: f64,
}

/// Per-run diagnostics besides the metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub method: String,
    pub gamma: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    /// Attention mass on past steps at the final step, when available.
    pub past_attention: Option<f64>,
    pub weighted_subgroup_sum: Option<f64>,
    pub marginal_w1: Option<f64>,
    pub cf_risk_proxy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub gamma: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
    pub diagnostics: Vec<CellDiagnostics>,
    pub failures: Vec<CellFailure>,
}

/// Trained model, run record and metrics of one (cell, dataset) pair.
pub struct CellOutcome {
    pub fitted: FittedModel,
    pub record: RunRecord,
    pub rows: Vec<MetricRow>,
    pub diagnostics: CellDiagnostics,
}

/// Test-split bundles for a dataset.
pub struct EvalBundles {
    pub one_step: Vec<CounterfactualBundle>,
    pub sliding: Vec<CounterfactualBundle>,
}

impl EvalBundles {
    pub fn build(dataset: &PanelDataset, eval: &EvalConfig) -> Result<Self> {
        let units = dataset.split_units(eval.split);
        Ok(Self {
            one_step: one_step_bundles(&units, &dataset.config, eval.anchor_stride)?,
            sliding: if eval.tau_max >= 2 {
                sliding_bundles(&units, &dataset.config, eval.tau_max, eval.anchor_stride)?
            } else {
                Vec::new()
            },
        })
    }
}

/// Metric rows for `τ = 1..=tau_max`.
pub fn metric_rows<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &PanelDataset,
    bundles: &EvalBundles,
    eval: &EvalConfig,
    method: &str,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let units = dataset.split_units(eval.split);
    let mut rows = Vec::with_capacity(eval.tau_max);
    let row = |tau, nrmse| MetricRow { method: method.to_string(), gamma: dataset.config.gamma, seed, tau, nrmse };
    rows.push(row(1, eval_one_step(predictor, &units, &bundles.one_step, eval.counterfactual_only)?));
    for tau in 2..=eval.tau_max {
        rows.push(row(tau, eval_sliding(predictor, &units, &bundles.sliding, tau)?));
    }
    Ok(rows)
}

/// Trains one cell on a dataset and evaluates it.
pub fn run_cell(
    dataset: &PanelDataset,
    bundles: &EvalBundles,
    cell: &CellSpec,
    seed: u64,
    eval: &EvalConfig,
) -> Result<CellOutcome> {
    let config = TrainConfig { seed, ..cell.train.clone() };
    let (fitted, record) = train(dataset, &config)?;
    let rows = metric_rows(&fitted, dataset, bundles, eval, &cell.method, seed)?;
    let test = dataset.split_units(eval.split);
    let past_attention = if fitted.model.variant() == EncoderVariant::Attention && !test.is_empty() {
        Some(attention_audit(&fitted, &test, test[0].horizon() - 1)?.past_mass)
    } else {
        None
    };
    let snap = record.final_snapshot.as_ref();
    let diagnostics = CellDiagnostics {
        method: cell.method.clone(),
        gamma: dataset.config.gamma,
        seed,
        best_epoch: record.best_epoch,
        best_val_rmse: record.best_val_rmse,
        past_attention,
        weighted_subgroup_sum: snap.and_then(|s| s.weighted_subgroup_sum),
        marginal_w1: snap.and_then(|s| s.marginal_w1),
        cf_risk_proxy: snap.map(|s| s.cf_risk_proxy),
    };
    Ok(CellOutcome { fitted, record, rows, diagnostics })
}

/// Runs every cell on every (gamma, seed) dataset. Failed cells are recorded
/// and skipped. Up to `jobs` cells train concurrently; output order is fixed.
pub fn ablation_suite(config: &SuiteConfig, jobs: usize) -> Result<SuiteResult> {
    config.validate()?;
    let mut result = SuiteResult { config_hash: crate::content_hash(config), ..Default::default() };
    for &gamma in &config.gammas {
        for &seed in &config.seeds {
            let sim = SimulationConfig { gamma, seed, ..config.simulation.clone() };
            let prepared = generate_dataset(&sim).and_then(|ds| EvalBundles::build(&ds, &config.eval).map(|b| (ds, b)));
            let (dataset, bundles) = match prepared {
                Ok(p) => p,
                Err(e) => {
                    for cell in &config.cells {
                        result.failures.push(CellFailure { method: cell.method.clone(), gamma, seed, error: e.to_string() });
                    }
                    continue;
                }
            };
            let outcomes = run_parallel(&config.cells, jobs, |cell| {
                run_cell(&dataset, &bundles, cell, seed, &config.eval).map(|o| (o.rows, o.diagnostics))
            });
            for (cell, outcome) in config.cells.iter().zip(outcomes) {
                match outcome {
                    Ok((rows, diag)) => {
                        result.rows.extend(rows);
                        result.diagnostics.push(diag);
                    }
                    Err(e) => result.failures.push(CellFailure {
                        method: cell.method.clone(),
                        gamma,
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    Ok(result)
}

fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot").expect("every item ran")).collect()
}

/// Seed aggregate of one (method, gamma, tau) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub gamma: f64,
    pub tau: usize,
    pub mean: f64,
    /// Sample standard deviation (0 with one seed).
    pub std: f64,
    pub median: f64,
    pub n_seeds: usize,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups rows by (method, gamma, tau) in first-appearance order.
pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, u64, usize)> = Vec::new();
    let mut groups: HashMap<(String, u64, usize), Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.gamma.to_bits(), r.tau);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.nrmse);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            AggregateRow { method: key.0, gamma: f64::from_bits(key.1), tau: key.2, mean, std, median: median(v), n_seeds: v.len() }
        })
        .collect()
}

/// Wide table: one row per (method, gamma), `tau{τ}_{mean,std,median}`
/// columns, and the config hash.
pub fn write_table(path: &Path, rows: &[AggregateRow], tau_max: usize, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "gamma".into(), "n_seeds".into()];
    for tau in 1..=tau_max {
        for stat in ["mean", "std", "median"] {
            header.push(format!("tau{tau}_{stat}"));
        }
    }
    header.push("config_hash".into());
    w.write_record(&header).map_err(csv_err)?;
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.gamma.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (method, gamma_bits) in keys {
        let mine: Vec<&AggregateRow> = rows.iter().filter(|r| r.method == method && r.gamma.to_bits() == gamma_bits).collect();
        let mut rec = vec![method.clone(), f64::from_bits(gamma_bits).to_string(), mine[0].n_seeds.to_string()];
        for tau in 1..=tau_max {
            match mine.iter().find(|r| r.tau == tau) {
                Some(r) => rec.extend([r.mean.to_string(), r.std.to_string(), r.median.to_string()]),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        rec.push(config_hash.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    file: &'a str,
    description: &'a str,
    methods: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    tables: Vec<ManifestEntry<'a>>,
    diagnostics: &'a str,
    failures: &'a [CellFailure],
}

/// Writes the six tables, `cells.csv` (per-run diagnostics) and
/// `manifest.json`.
pub fn write_suite_outputs(dir: &Path, config: &SuiteConfig, result: &SuiteResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let agg = aggregate(&result.rows);
    let mut entries = Vec::new();
    for table in TableId::ALL {
        let methods: Vec<String> =
            config.cells.iter().filter(|c| c.tables.contains(&table)).map(|c| c.method.clone()).collect();
        let rows: Vec<AggregateRow> = agg.iter().filter(|r| methods.contains(&r.method)).cloned().collect();
        write_table(&dir.join(table.file_name()), &rows, config.eval.tau_max, &result.config_hash)?;
        entries.push(ManifestEntry { file: table.file_name(), description: table.description(), methods });
    }
    let mut w = csv::Writer::from_path(dir.join("cells.csv")).map_err(csv_err)?;
    w.write_record([
        "method",
        "gamma",
        "seed",
        "best_epoch",
        "best_val_rmse",
        "past_attention",
        "weighted_subgroup_sum",
        "marginal_w1",
        "cf_risk_proxy",
        "config_hash",
    ])
    .map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for d in &result.diagnostics {
        w.write_record([
            d.method.clone(),
            d.gamma.to_string(),
            d.seed.to_string(),
            d.best_epoch.to_string(),
            d.best_val_rmse.to_string(),
            opt(d.past_attention),
            opt(d.weighted_subgroup_sum),
            opt(d.marginal_w1),
            opt(d.cf_risk_proxy),
            result.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let manifest =
        Manifest { config_hash: &result.config_hash, tables: entries, diagnostics: "cells.csv", failures: &result.failures };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Long-format rows `table,method,gamma,tau,stat,value,config_hash` from
/// the wide tables in `dir`. Refuses tables whose hashes disagree.
pub fn long_format(dir: &Path) -> Result<Vec<[String; 7]>> {
    let mut out = Vec::new();
    let mut hash: Option<String> = None;
    for table in TableId::ALL {
        let path = dir.join(table.file_name());
        if !path.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let h = rec.get(headers.len() - 1).unwrap_or_default().to_string();
            match &hash {
                Some(prev) if *prev != h => {
                    return Err(Error::Contract(format!("{} has config hash {h}, expected {prev}", table.file_name())))
                }
                None => hash = Some(h.clone()),
                _ => {}
            }
            for (i, name) in headers.iter().enumerate().skip(3).take(headers.len() - 4) {
                let value = rec.get(i).unwrap_or_default();
                if value.is_empty() {
                    continue;
                }
                let (tau, stat) = name.trim_start_matches("tau").split_once('_').unwrap_or((name, ""));
                out.push([
                    table.to_string(),
                    rec[0].to_string(),
                    rec[1].to_string(),
                    tau.to_string(),
                    stat.to_string(),
                    value.to_string(),
                    h.clone(),
                ]);
            }
        }
    }
    Ok(out)
}
