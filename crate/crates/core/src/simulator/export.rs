use std::path::Path;

use serde::Serialize;

use super::{CounterfactualBundle, PanelDataset, SimulationConfig, SplitName, Trajectory};
use crate::error::{csv_err, Result};

/// Writes `unit_id,t,volume,chemo,radio,concentration,prob`; the final row of
/// each unit (t = horizon) carries only the volume.
pub fn write_split_csv<'a>(path: &Path, units: impl IntoIterator<Item = &'a Trajectory>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["unit_id", "t", "volume", "chemo", "radio", "concentration", "prob"]).map_err(csv_err)?;
    for tr in units {
        for t in 0..=tr.horizon() {
            let id = tr.unit_id.to_string();
            let vol = tr.volumes[t].to_string();
            let row = if t < tr.horizon() {
                [
                    id,
                    t.to_string(),
                    vol,
                    (tr.chemo_flags[t] as u8).to_string(),
                    (tr.radio_flags[t] as u8).to_string(),
                    tr.concentrations[t].to_string(),
                    tr.assignment_probs[t].to_string(),
                ]
            } else {
                [id, t.to_string(), vol, String::new(), String::new(), String::new(), String::new()]
            };
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a SimulationConfig,
    config_hash: String,
    splits: &'a super::Split,
}

/// Writes `{train,val,test}.csv` plus `dataset.json` (config, hash, split ids).
pub fn export_dataset(dataset: &PanelDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for name in SplitName::ALL {
        write_split_csv(&dir.join(format!("{}.csv", name.as_str())), dataset.split_units(name))?;
    }
    let sidecar = Sidecar {
        config: &dataset.config,
        config_hash: crate::content_hash(&dataset.config),
        splits: &dataset.split,
    };
    std::fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn export_bundles(path: &Path, bundles: &[CounterfactualBundle]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(bundles)?)?;
    Ok(())
}
