//! Subcommand bodies. Each returns the artifacts it wrote.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use cfseq::diffnum::EncoderVariant;
use cfseq::evaluation::{
    ablation_suite, attention_audit, long_format, metric_rows, run_cell, subgroup_audit, write_suite_outputs,
    CellDiagnostics, CellFailure, EvalBundles, MetricRow, OraclePredictor, Predictor, SuiteResult,
};
use cfseq::simulator::{export_dataset, generate_dataset, CounterfactualBundle, SimulationConfig};
use cfseq::training::{train, FittedModel, TrainConfig};
use cfseq::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::spec::ExperimentSpec;

type Artifacts = Vec<PathBuf>;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BundleFile<'a> {
    config_hash: &'a str,
    seed: u64,
    bundles: &'a [CounterfactualBundle],
}

pub fn simulate(spec: &ExperimentSpec) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let ds = generate_dataset(&spec.simulation_for(seed))?;
        let dir = spec.seed_dir(seed).join("data");
        export_dataset(&ds, &dir)?;
        let bundles = EvalBundles::build(&ds, &spec.eval)?;
        for (name, b) in [("bundles_one_step.json", &bundles.one_step), ("bundles_sliding.json", &bundles.sliding)] {
            let file = BundleFile { config_hash: &hash, seed, bundles: b };
            std::fs::write(dir.join(name), serde_json::to_vec(&file)?)?;
        }
        out.push(dir);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config_hash: String,
    seed: u64,
    fitted: FittedModel,
}

fn checkpoint_path(spec: &ExperimentSpec, seed: u64) -> PathBuf {
    spec.seed_dir(seed).join("checkpoint.json")
}

fn load_checkpoint(spec: &ExperimentSpec, seed: u64) -> Result<FittedModel> {
    let path = checkpoint_path(spec, seed);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}; run `train` first", path.display()))))?;
    let ck: CheckpointFile = serde_json::from_slice(&bytes)?;
    let hash = spec.config_hash();
    if ck.config_hash != hash || ck.seed != seed {
        return Err(Error::Contract(format!(
            "{} belongs to config {} seed {}, not {hash} seed {seed}",
            path.display(),
            ck.config_hash,
            ck.seed
        )));
    }
    Ok(ck.fitted)
}

pub fn train_cmd(spec: &ExperimentSpec) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let ds = generate_dataset(&spec.simulation_for(seed))?;
        let (fitted, record) = train(&ds, &spec.train_for(seed))?;
        let dir = spec.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let run = dir.join("run.jsonl");
        record.write_jsonl(&run)?;
        let ck = checkpoint_path(spec, seed);
        std::fs::write(&ck, serde_json::to_vec(&CheckpointFile { config_hash: hash.clone(), seed, fitted })?)?;
        out.extend([run, ck]);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricLine<'a> {
    method: &'a str,
    gamma: f64,
    seed: u64,
    tau: usize,
    nrmse: f64,
    config_hash: &'a str,
}

pub fn metrics_file(oracle: bool) -> &'static str {
    if oracle {
        "metrics_oracle.csv"
    } else {
        "metrics.csv"
    }
}

pub fn evaluate(spec: &ExperimentSpec, oracle: bool) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let ds = generate_dataset(&spec.simulation_for(seed))?;
        let bundles = EvalBundles::build(&ds, &spec.eval)?;
        let fitted;
        let sim = ds.config.clone();
        let oracle_pred = OraclePredictor { config: &sim };
        let (predictor, method): (&dyn Predictor, &str) = if oracle {
            (&oracle_pred, "oracle")
        } else {
            fitted = load_checkpoint(spec, seed)?;
            (&fitted, "model")
        };
        let rows = metric_rows(predictor, &ds, &bundles, &spec.eval, method, seed)?;
        let dir = spec.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(metrics_file(oracle));
        write_csv(&path, rows.iter().map(|r| metric_line(r, &hash)))?;
        out.push(path);
    }
    Ok(out)
}

fn metric_line<'a>(r: &'a MetricRow, hash: &'a str) -> MetricLine<'a> {
    MetricLine { method: &r.method, gamma: r.gamma, seed: r.seed, tau: r.tau, nrmse: r.nrmse, config_hash: hash }
}

/// Result file of one worker process.
#[derive(Serialize, Deserialize)]
enum WorkerOutput {
    Done { rows: Vec<MetricRow>, diagnostics: CellDiagnostics },
    Failed { error: String },
}

/// Arguments identifying one suite cell.
#[derive(Clone, Debug)]
pub struct CellJob {
    pub gamma_index: usize,
    pub seed: u64,
    pub cell: usize,
}

/// Trains and evaluates one cell; the body of a worker process.
pub fn run_worker(spec: &ExperimentSpec, job: &CellJob, result: &Path) -> Result<()> {
    let suite = spec.suite();
    let gamma = *suite.gammas.get(job.gamma_index).ok_or_else(|| Error::Index("gamma index".into()))?;
    let cell = suite.cells.get(job.cell).ok_or_else(|| Error::Index("cell index".into()))?;
    let sim = SimulationConfig { gamma, seed: job.seed, ..suite.simulation.clone() };
    let outcome = generate_dataset(&sim)
        .and_then(|ds| EvalBundles::build(&ds, &suite.eval).map(|b| (ds, b)))
        .and_then(|(ds, b)| run_cell(&ds, &b, cell, job.seed, &suite.eval));
    let output = match outcome {
        Ok(o) => WorkerOutput::Done { rows: o.rows, diagnostics: o.diagnostics },
        Err(e) => WorkerOutput::Failed { error: e.to_string() },
    };
    std::fs::write(result, serde_json::to_vec(&output)?)?;
    Ok(())
}

fn spawn_worker(spec_file: &Path, job: &CellJob, result: &Path) -> Result<Child> {
    Ok(Command::new(std::env::current_exe()?)
        .arg("worker")
        .arg("--spec")
        .arg(spec_file)
        .args(["--seed", &job.seed.to_string()])
        .args(["--gamma-index", &job.gamma_index.to_string()])
        .args(["--cell", &job.cell.to_string()])
        .arg("--result")
        .arg(result)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?)
}

/// Runs every cell in its own process, at most `jobs` at a time.
fn suite_in_processes(spec: &ExperimentSpec, jobs: usize, work: &Path) -> Result<SuiteResult> {
    let suite = spec.suite();
    std::fs::create_dir_all(work)?;
    let spec_file = work.join("spec.json");
    std::fs::write(&spec_file, serde_json::to_vec(spec)?)?;
    let mut queue = Vec::new();
    for gamma_index in 0..suite.gammas.len() {
        for &seed in &suite.seeds {
            for cell in 0..suite.cells.len() {
                queue.push(CellJob { gamma_index, seed, cell });
            }
        }
    }
    let result_path = |i: usize| work.join(format!("cell{i}.json"));
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut status = vec![None; queue.len()];
    let mut next = 0;
    while next < queue.len() || !running.is_empty() {
        while running.len() < jobs && next < queue.len() {
            running.push((next, spawn_worker(&spec_file, &queue[next], &result_path(next))?));
            next += 1;
        }
        let mut still = Vec::new();
        for (i, mut child) in running {
            match child.try_wait()? {
                Some(s) => status[i] = Some(s),
                None => still.push((i, child)),
            }
        }
        running = still;
        std::thread::sleep(Duration::from_millis(20));
    }
    let mut result = SuiteResult::default();
    for (i, job) in queue.iter().enumerate() {
        let method = suite.cells[job.cell].method.clone();
        let gamma = suite.gammas[job.gamma_index];
        let output = std::fs::read(result_path(i))
            .ok()
            .and_then(|b| serde_json::from_slice::<WorkerOutput>(&b).ok())
            .unwrap_or_else(|| WorkerOutput::Failed {
                error: format!("worker exited with {:?} and no result", status[i].and_then(|s| s.code())),
            });
        match output {
            WorkerOutput::Done { rows, diagnostics } => {
                result.rows.extend(rows);
                result.diagnostics.push(diagnostics);
            }
            WorkerOutput::Failed { error } => result.failures.push(CellFailure { method, gamma, seed: job.seed, error }),
        }
    }
    std::fs::remove_dir_all(work)?;
    Ok(result)
}

pub fn ablate(spec: &ExperimentSpec, jobs: usize) -> Result<Artifacts> {
    let suite = spec.suite();
    let dir = spec.out_dir.join("ablate");
    let mut result = if jobs <= 1 {
        ablation_suite(&suite, 1)?
    } else {
        suite_in_processes(spec, jobs, &spec.out_dir.join(".ablate-work"))?
    };
    result.config_hash = spec.config_hash();
    write_suite_outputs(&dir, &suite, &result)?;
    Ok(vec![dir])
}

#[derive(Serialize)]
struct BoundLine<'a> {
    method: &'a str,
    seed: u64,
    epoch: usize,
    marginal_w1: Option<f64>,
    weighted_subgroup_sum: Option<f64>,
    delta_c: f64,
    inequality_slack: Option<f64>,
    cf_risk_proxy: f64,
    config_hash: &'a str,
}

/// Bound terms over training for the spec's configuration and its λ = 0
/// control. Snapshots every `train.snapshot_every` epochs (every epoch when
/// unset).
pub fn diagnose_bound(spec: &ExperimentSpec) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let ds = generate_dataset(&spec.simulation_for(seed))?;
        let every = spec.train.snapshot_every.max(1);
        let aligned = TrainConfig { snapshot_every: every, ..spec.train_for(seed) };
        let control = TrainConfig { lambda: 0.0, ..aligned.clone() };
        let mut lines = Vec::new();
        for (method, cfg) in [("aligned", &aligned), ("control", &control)] {
            let (_, record) = train(&ds, cfg)?;
            for snap in record.epochs.iter().filter_map(|e| e.snapshot.as_ref()) {
                lines.push((method, snap.clone()));
            }
        }
        let dir = spec.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("bound_series.csv");
        write_csv(
            &path,
            lines.iter().map(|(method, s)| BoundLine {
                method,
                seed,
                epoch: s.epoch,
                marginal_w1: s.marginal_w1,
                weighted_subgroup_sum: s.weighted_subgroup_sum,
                delta_c: s.delta_c,
                inequality_slack: s.inequality_slack,
                cf_risk_proxy: s.cf_risk_proxy,
                config_hash: &hash,
            }),
        )?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Serialize)]
struct PairedLine<'a> {
    seed: u64,
    t: usize,
    cluster: usize,
    treatment_a: usize,
    treatment_b: usize,
    paired_w1: f64,
    avg_nonpaired_w1: f64,
    paired_lt_nonpaired: bool,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct ClusterLine<'a> {
    seed: u64,
    t: usize,
    unit_id: usize,
    treatment: usize,
    cluster: usize,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct AttentionLine<'a> {
    seed: u64,
    t: usize,
    past_mass: f64,
    current_mass: f64,
    config_hash: &'a str,
}

/// Paired-distance, cluster-membership and attention tables of the trained
/// checkpoint on the evaluation split.
pub fn audit(spec: &ExperimentSpec) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let fitted = load_checkpoint(spec, seed)?;
        let ds = generate_dataset(&spec.simulation_for(seed))?;
        let units = ds.split_units(spec.eval.split);
        let (paired, clusters) = subgroup_audit(&fitted, &units, &spec.train_for(seed))?;
        let dir = spec.seed_dir(seed);
        let p = dir.join("paired_audit.csv");
        write_csv(
            &p,
            paired.iter().map(|r| PairedLine {
                seed,
                t: r.t,
                cluster: r.cluster,
                treatment_a: r.treatment_a,
                treatment_b: r.treatment_b,
                paired_w1: r.paired_w1,
                avg_nonpaired_w1: r.avg_nonpaired_w1,
                paired_lt_nonpaired: r.paired_lt_nonpaired,
                config_hash: &hash,
            }),
        )?;
        let c = dir.join("cluster_audit.csv");
        write_csv(
            &c,
            clusters.iter().map(|r| ClusterLine {
                seed,
                t: r.t,
                unit_id: r.unit_id,
                treatment: r.treatment,
                cluster: r.cluster,
                config_hash: &hash,
            }),
        )?;
        out.extend([p, c]);
        if fitted.model.variant() == EncoderVariant::Attention {
            let steps = units.first().map(|u| u.horizon()).unwrap_or(0);
            let mut lines = Vec::with_capacity(steps);
            for t in 0..steps {
                let a = attention_audit(&fitted, &units, t)?;
                lines.push(AttentionLine { seed, t, past_mass: a.past_mass, current_mass: a.current_mass, config_hash: &hash });
            }
            let a = dir.join("attention_audit.csv");
            write_csv(&a, lines)?;
            out.push(a);
        }
    }
    Ok(out)
}

/// `source,method,gamma,seed,step,stat,value,config_hash`: ablation tables
/// (step = τ), per-seed metrics (step = τ) and bound series (step = epoch).
pub fn report(spec: &ExperimentSpec) -> Result<Artifacts> {
    let hash = spec.config_hash();
    let mut rows: Vec<[String; 8]> = Vec::new();
    let check = |h: &str, what: &str| {
        if h == hash {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} has config hash {h}, current spec is {hash}")))
        }
    };
    let ablate = spec.out_dir.join("ablate");
    if ablate.exists() {
        for [table, method, gamma, tau, stat, value, h] in long_format(&ablate)? {
            check(&h, &table)?;
            rows.push([table, method, gamma, String::new(), tau, stat, value, h]);
        }
    }
    for &seed in &spec.seeds {
        let dir = spec.seed_dir(seed);
        for file in [metrics_file(false), metrics_file(true)] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
            for rec in r.records() {
                let rec = rec.map_err(csv_err)?;
                check(&rec[5], &path.display().to_string())?;
                rows.push([
                    file.trim_end_matches(".csv").into(),
                    rec[0].into(),
                    rec[1].into(),
                    rec[2].into(),
                    rec[3].into(),
                    "nrmse".into(),
                    rec[4].into(),
                    rec[5].into(),
                ]);
            }
        }
        let path = dir.join("bound_series.csv");
        if path.exists() {
            let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
            let headers = r.headers().map_err(csv_err)?.clone();
            for rec in r.records() {
                let rec = rec.map_err(csv_err)?;
                check(&rec[headers.len() - 1], &path.display().to_string())?;
                for i in 3..headers.len() - 1 {
                    if rec[i].is_empty() {
                        continue;
                    }
                    rows.push([
                        "bound_series".into(),
                        rec[0].into(),
                        spec.simulation.gamma.to_string(),
                        rec[1].into(),
                        rec[2].into(),
                        headers[i].into(),
                        rec[i].into(),
                        hash.clone(),
                    ]);
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Domain(format!("no artifacts to report under {}", spec.out_dir.display())));
    }
    let dir = spec.out_dir.join("report");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("long.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["source", "method", "gamma", "seed", "step", "stat", "value", "config_hash"]).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(vec![path])
}
