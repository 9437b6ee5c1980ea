use cfseq::diffnum::{DenseTensor, EncoderVariant, Tape};
use cfseq::masking::{apply_mask, MaskConfig, MaskStrategy};
use cfseq::simulator::{generate_dataset, PanelDataset, SimulationConfig, SplitName, Treatment};
use cfseq::training::*;
use cfseq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset(seed: u64) -> PanelDataset {
    generate_dataset(&SimulationConfig { n_units: 30, horizon: 8, seed, ..SimulationConfig::default() }).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 4,
        pretrain_epochs: 2,
        gap_epoch: 1,
        hidden_width: 8,
        head_hidden: Some(8),
        batch_size: 9,
        lambda: 0.05,
        min_group_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn factual_loss_examples() {
    let mut tape = Tape::new();
    let t = DenseTensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
    let p = tape.constant(t.clone());
    let l = factual_loss(&mut tape, p, &t).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let zero = tape.constant(DenseTensor::zeros(&[3, 1]));
    let l = factual_loss(&mut tape, zero, &t).unwrap();
    assert_eq!(tape.value(l).item(), 4.0);
    let empty = tape.constant(DenseTensor::zeros(&[0, 1]));
    assert!(matches!(factual_loss(&mut tape, empty, &DenseTensor::zeros(&[0, 1])), Err(Error::Domain(_))));
}

#[test]
fn factual_loss_ignores_row_order() {
    let mut tape = Tape::new();
    let p = DenseTensor::matrix(4, 1, vec![0.1, 0.7, -0.3, 2.0]).unwrap();
    let t = DenseTensor::matrix(4, 1, vec![1.0, 0.5, 0.0, 1.5]).unwrap();
    let rev = |x: &DenseTensor| DenseTensor::matrix(4, 1, x.values().iter().rev().copied().collect()).unwrap();
    let a = tape.constant(p.clone());
    let la = factual_loss(&mut tape, a, &t).unwrap();
    let b = tape.constant(rev(&p));
    let lb = factual_loss(&mut tape, b, &rev(&t)).unwrap();
    assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-15);
}

#[test]
fn sga_schedule_predicate() {
    let c = TrainConfig { gap_epoch: 5, pretrain_epochs: 10, max_epochs: 20, lambda: 1.0, ..TrainConfig::default() };
    assert_eq!(c.sga_schedule(), vec![10, 15, 20]);
    let c = TrainConfig { gap_epoch: 5, pretrain_epochs: 7, max_epochs: 7, lambda: 1.0, ..TrainConfig::default() };
    assert!(c.sga_schedule().is_empty());
    let c = TrainConfig { lambda: 0.0, ..TrainConfig::default() };
    assert!(c.sga_schedule().is_empty());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { lambda: -1.0, ..TrainConfig::default() },
        TrainConfig { gap_epoch: 0, ..TrainConfig::default() },
        TrainConfig { pretrain_epochs: 50, max_epochs: 40, ..TrainConfig::default() },
        TrainConfig { hidden_width: 7, n_heads: 2, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn record_follows_schedule_and_is_contiguous() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config();
    let (_, rec) = train(&ds, &cfg).unwrap();
    let epochs: Vec<usize> = rec.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, (1..=epochs.len()).collect::<Vec<_>>());
    for e in &rec.epochs {
        assert_eq!(e.sga_active, cfg.sga_active(e.epoch));
        assert_eq!(e.loss_d.is_some(), e.sga_active);
        assert!(e.loss_y.is_finite() && e.val_rmse.is_finite());
    }
    let best = &rec.epochs[rec.best_epoch - 1];
    assert_eq!(best.checkpoint_hash.as_deref(), Some(rec.final_checkpoint_hash.as_str()));
    assert_eq!(best.val_rmse, rec.best_val_rmse);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset(2);
    let cfg = TrainConfig { mask: MaskConfig { prob: 0.2, ..MaskConfig::default() }, ..tiny_config() };
    let (m1, r1) = train(&ds, &cfg).unwrap();
    let (m2, r2) = train(&ds, &cfg).unwrap();
    assert_eq!(r1.metrics(), r2.metrics());
    assert_eq!(m1, m2);
    assert_eq!(r1.final_snapshot, r2.final_snapshot);
}

#[test]
fn zero_lambda_matches_disabled_alignment() {
    let ds = tiny_dataset(3);
    let a = TrainConfig { lambda: 0.0, ..tiny_config() };
    let b = TrainConfig { lambda: 0.0, pretrain_epochs: 4, gap_epoch: 3, n_clusters: 2, ..tiny_config() };
    let (ma, ra) = train(&ds, &a).unwrap();
    let (mb, rb) = train(&ds, &b).unwrap();
    assert_eq!(ra.metrics(), rb.metrics());
    assert_eq!(ma.model, mb.model);
    assert!(ra.epochs.iter().all(|e| e.loss_d.is_none()));
}

#[test]
fn pretrain_equal_to_max_never_aligns() {
    let ds = tiny_dataset(4);
    let cfg = TrainConfig { pretrain_epochs: 3, max_epochs: 3, gap_epoch: 2, ..tiny_config() };
    let (_, rec) = train(&ds, &cfg).unwrap();
    assert!(rec.epochs.iter().all(|e| e.loss_d.is_none()));
}

#[test]
fn factual_loss_halves_on_desk_config() {
    let ds = generate_dataset(&SimulationConfig { n_units: 60, horizon: 12, seed: 5, ..SimulationConfig::default() }).unwrap();
    let cfg = TrainConfig { max_epochs: 25, lambda: 0.0, hidden_width: 8, head_hidden: Some(8), ..TrainConfig::default() };
    let (_, rec) = train(&ds, &cfg).unwrap();
    let first = rec.epochs[0].loss_y;
    let at_best = rec.epochs[rec.best_epoch - 1].loss_y;
    assert!(at_best <= 0.5 * first, "{first} -> {at_best}");
}

#[test]
fn recurrent_variant_trains() {
    let ds = tiny_dataset(6);
    let cfg = TrainConfig { variant: EncoderVariant::Recurrent, n_heads: 1, ..tiny_config() };
    let (fitted, rec) = train(&ds, &cfg).unwrap();
    assert!(rec.best_val_rmse.is_finite());
    assert!(fitted.attention_weights(&ds.split_units(SplitName::Test)).unwrap().is_none());
}

#[test]
fn masking_leaves_outcome_and_treatment_columns() {
    let ds = tiny_dataset(7);
    let units = ds.split_units(SplitName::Train);
    let s = Standardizer::fit(&units, ds.config.diameter_window).unwrap();
    let steps = units[0].horizon();
    let outs: Vec<DenseTensor> = units.iter().map(|u| s.outcomes(&u.volumes, steps)).collect();
    let covs: Vec<DenseTensor> = units.iter().map(|u| s.covariates(&u.volumes, steps)).collect();
    let treats: Vec<Vec<usize>> = units.iter().map(|u| (0..steps).map(|t| u.treatment_index(t)).collect()).collect();
    let refs: Vec<&[usize]> = treats.iter().map(Vec::as_slice).collect();
    let cfg = MaskConfig { strategy: MaskStrategy::Gaussian, prob: 0.5, ..MaskConfig::default() };
    let (masked, _) = apply_mask(&covs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let clean = assemble_input(&outs, &covs, &refs, steps).unwrap();
    let noisy = assemble_input(&outs, &masked, &refs, steps).unwrap();
    assert_ne!(clean, noisy);
    for r in 0..clean.rows() {
        assert_eq!(clean.row(r)[0], noisy.row(r)[0]);
        assert_eq!(clean.row(r)[1 + COVARIATE_WIDTH..], noisy.row(r)[1 + COVARIATE_WIDTH..]);
    }
}

#[test]
fn input_layout_uses_previous_treatment() {
    assert!(assemble_input(&[], &[DenseTensor::zeros(&[3, 1])], &[&[0, 0]], 3).is_err());
    let outs = vec![DenseTensor::matrix(3, 1, vec![1.0, 3.0, 5.0]).unwrap()];
    let covs = vec![DenseTensor::matrix(3, 1, vec![2.0, 4.0, 6.0]).unwrap()];
    let treats = [2usize, 3, 1];
    let x = assemble_input(&outs, &covs, &[&treats], 3).unwrap();
    assert_eq!(x.cols(), INPUT_WIDTH);
    assert_eq!(x.row(0), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(x.row(1), &[3.0, 4.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(x.row(2), &[5.0, 6.0, 0.0, 0.0, 0.0, 1.0]);
}

fn fitted_tiny() -> (PanelDataset, FittedModel) {
    let ds = tiny_dataset(8);
    let (fitted, _) = train(&ds, &TrainConfig { lambda: 0.0, ..tiny_config() }).unwrap();
    (ds, fitted)
}

#[test]
fn rollout_base_case_matches_one_step() {
    let (ds, fitted) = fitted_tiny();
    let units = ds.split_units(SplitName::Test);
    let all = fitted.predict_all_treatments(&units).unwrap();
    let t = 4;
    for (u, unit) in units.iter().enumerate() {
        let past: Vec<usize> = (0..t).map(|s| unit.treatment_index(s)).collect();
        for a in Treatment::ALL {
            let y = fitted.rollout_tau(&unit.volumes[..=t], &past, &[a], 1).unwrap();
            assert!((y[0] - all[u][t][a.index()]).abs() < 1e-9);
        }
    }
}

#[test]
fn rollouts_are_causal_and_deterministic() {
    let (ds, fitted) = fitted_tiny();
    let unit = ds.split_units(SplitName::Test)[0];
    let t = 2;
    let past: Vec<usize> = (0..t).map(|s| unit.treatment_index(s)).collect();
    let p1 = [Treatment::NONE, Treatment::BOTH, Treatment::NONE, Treatment::NONE];
    let p2 = [Treatment::NONE, Treatment::BOTH, Treatment::BOTH, Treatment::ALL[1]];
    let y1 = fitted.rollout_tau(&unit.volumes[..=t], &past, &p1, 4).unwrap();
    let y2 = fitted.rollout_tau(&unit.volumes[..=t], &past, &p2, 4).unwrap();
    assert_eq!(y1[..2], y2[..2]);
    assert_eq!(y1, fitted.rollout_tau(&unit.volumes[..=t], &past, &p1, 4).unwrap());
    assert!(matches!(fitted.rollout_tau(&unit.volumes[..=t], &past, &p1, 3), Err(Error::Contract(_))));
}

#[test]
fn snapshot_on_untrained_model_is_finite() {
    let ds = tiny_dataset(9);
    let cfg = tiny_config();
    let units = ds.split_units(SplitName::Train);
    let fitted = FittedModel {
        model: cfseq::diffnum::SeqModel::init(cfg.encoder_config(), cfg.head_hidden, 0).unwrap(),
        standardizer: Standardizer::fit(&units, ds.config.diameter_window).unwrap(),
    };
    let snap = snapshot_alignment(&fitted, &ds.split_units(SplitName::Val), &ds.config, &cfg, 0).unwrap();
    assert!(snap.cf_risk_proxy.is_finite() && snap.delta_c.is_finite());
    for s in &snap.steps {
        for v in [s.report.marginal_w1, s.report.weighted_subgroup_sum, s.report.inequality_slack].into_iter().flatten() {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn snapshots_follow_epoch_order() {
    let ds = tiny_dataset(10);
    let (_, rec) = train(&ds, &TrainConfig { snapshot_every: 2, ..tiny_config() }).unwrap();
    let epochs: Vec<usize> = rec.epochs.iter().filter_map(|e| e.snapshot.as_ref().map(|s| s.epoch)).collect();
    assert!(!epochs.is_empty());
    assert!(epochs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn run_record_jsonl_lines() {
    let ds = tiny_dataset(11);
    let (_, rec) = train(&ds, &tiny_config()).unwrap();
    let path = std::env::temp_dir().join(format!("cfseq-record-{}.jsonl", std::process::id()));
    rec.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), rec.epochs.len() + 2);
    for l in &lines {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["config_hash"], rec.config_hash);
    std::fs::remove_file(path).unwrap();
}

#[test]
fn empty_training_split_rejected() {
    let mut ds = tiny_dataset(12);
    ds.split.train.clear();
    assert!(matches!(train(&ds, &tiny_config()), Err(Error::Domain(_))));
}
