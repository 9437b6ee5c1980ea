use cfseq::rng;
use cfseq::simulator::*;
use cfseq::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point(v: f64) -> ParamDist {
    ParamDist::new(v, 0.0, v, v)
}

fn single_component() -> HeterogeneitySpec {
    HeterogeneitySpec {
        components: vec![HeterogeneityComponent {
            weight: 1.0,
            rho: ParamDist::new(0.08, 0.0, 0.01, 0.2),
            carrying_capacity: ParamDist::new(900.0, 0.0, 500.0, 1150.0),
            beta_c: point(0.03),
            alpha_r: point(0.04),
            beta_r: point(0.004),
            initial_volume: point(3.0),
        }],
    }
}

#[test]
fn degenerate_spec_returns_the_means() {
    let p = sample_patient_params(&mut ChaCha8Rng::seed_from_u64(1), &single_component()).unwrap();
    assert_eq!((p.rho, p.carrying_capacity, p.beta_c, p.initial_volume), (0.08, 900.0, 0.03, 3.0));
    assert_eq!(p.mixture_component, 0);
}

#[test]
fn draws_respect_truncation_bounds() {
    let mut spec = single_component();
    spec.components[0].rho = ParamDist::new(0.05, 0.1, 0.02, 0.09);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let p = sample_patient_params(&mut r, &spec).unwrap();
        assert!((0.02..=0.09).contains(&p.rho));
    }
    let spec = HeterogeneitySpec::default();
    for _ in 0..2_000 {
        let p = sample_patient_params(&mut r, &spec).unwrap();
        assert!(p.rho > 0.0 && p.carrying_capacity > 0.0);
        assert!(p.beta_c >= 0.0 && p.alpha_r >= 0.0 && p.beta_r >= 0.0);
    }
}

#[test]
fn component_frequencies_match_weights() {
    let mut spec = HeterogeneitySpec::default();
    let weights = [0.2, 0.5, 0.3];
    for (c, w) in spec.components.iter_mut().zip(weights) {
        c.weight = w;
    }
    let n = 10_000;
    let mut counts = [0usize; 3];
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..n {
        counts[sample_patient_params(&mut r, &spec).unwrap().mixture_component] += 1;
    }
    for (c, w) in counts.iter().zip(weights) {
        let sigma = (n as f64 * w * (1.0 - w)).sqrt();
        assert!((*c as f64 - n as f64 * w).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn invalid_specs_are_config_errors() {
    let mut spec = single_component();
    spec.components[0].rho.std = -0.1;
    assert!(matches!(sample_patient_params(&mut ChaCha8Rng::seed_from_u64(0), &spec), Err(Error::Config(_))));
    let empty = HeterogeneitySpec { components: vec![] };
    assert!(matches!(sample_patient_params(&mut ChaCha8Rng::seed_from_u64(0), &empty), Err(Error::Config(_))));
    let mut spec = single_component();
    spec.components[0].rho = ParamDist::new(0.3, 0.0, 0.01, 0.2);
    assert!(matches!(spec.validate(), Err(Error::Config(_))));
}

fn config(gamma: f64, n_units: usize, seed: u64) -> SimulationConfig {
    SimulationConfig { gamma, n_units, seed, ..SimulationConfig::default() }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// (running diameter, chemo indicator) pairs over every step of a panel.
fn diameter_treatment_pairs(ds: &PanelDataset) -> (Vec<f64>, Vec<f64>) {
    let (mut d, mut a) = (Vec::new(), Vec::new());
    for tr in &ds.units {
        for t in 0..tr.horizon() {
            d.push(running_diameter(&tr.volumes, t, ds.config.diameter_window));
            a.push(tr.chemo_flags[t] as u8 as f64);
        }
    }
    (d, a)
}

#[test]
fn randomized_assignment_at_zero_gamma() {
    let ds = generate_dataset(&config(0.0, 334, 4)).unwrap();
    let flags: Vec<bool> = ds.units.iter().flat_map(|u| u.chemo_flags.iter().chain(&u.radio_flags).copied()).collect();
    assert!(flags.len() >= 10_000);
    let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    let (d, a) = diameter_treatment_pairs(&ds);
    let r = pearson(&d, &a);
    assert!(r.abs() < 3.0 / (d.len() as f64).sqrt() + 0.01, "correlation {r}");
}

#[test]
fn confounded_assignment_at_gamma_six() {
    let ds = generate_dataset(&config(6.0, 334, 5)).unwrap();
    let (d, a) = diameter_treatment_pairs(&ds);
    let spearman = pearson(&ranks(&d), &ranks(&a));
    assert!(spearman > 0.1, "spearman {spearman}");
}

#[test]
fn trajectories_are_valid_and_reproducible() {
    let cfg = config(6.0, 50, 6);
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    for tr in &a.units {
        assert_eq!(tr.volumes.len(), cfg.horizon + 1);
        assert_eq!(tr.chemo_flags.len(), tr.volumes.len() - 1);
        assert!(tr.volumes.iter().all(|v| v.is_finite() && (VOLUME_FLOOR..=V_MAX).contains(v)));
        assert!(tr.assignment_probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let p = sample_patient_params(&mut rng::stream(1, &[]), &cfg.heterogeneity).unwrap();
    let x = simulate_trajectory(&p, &cfg, &mut rng::stream(9, &[])).unwrap();
    let y = simulate_trajectory(&p, &cfg, &mut rng::stream(9, &[])).unwrap();
    assert_eq!(x, y);
}

#[test]
fn about_half_of_untreated_tumors_reach_half_capacity() {
    let cfg = config(6.0, 600, 7);
    let ds = generate_dataset(&cfg).unwrap();
    let untreated = vec![Treatment::NONE; cfg.horizon];
    let reached = ds
        .units
        .iter()
        .filter(|tr| continue_with_plan(tr, &cfg, 0, &untreated).unwrap()[cfg.horizon - 1] >= 0.5 * V_MAX)
        .count();
    let frac = reached as f64 / ds.units.len() as f64;
    assert!((0.35..=0.65).contains(&frac), "fraction {frac}");
}

#[test]
fn splits_partition_the_units() {
    let cfg = config(6.0, 10, 8);
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!((ds.split.train.len(), ds.split.val.len(), ds.split.test.len()), (6, 2, 2));
    assert_eq!(ds.split, generate_dataset(&cfg).unwrap().split);
    let mut all: Vec<usize> = ds.split.train.iter().chain(&ds.split.val).chain(&ds.split.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(matches!(generate_dataset(&config(6.0, 2, 8)), Err(Error::Config(_))));
}

#[test]
fn one_step_bundles() {
    let cfg = config(6.0, 20, 9);
    let ds = generate_dataset(&cfg).unwrap();
    for tr in &ds.units {
        for t in 1..cfg.horizon {
            let b = enumerate_one_step_counterfactuals(tr, t, &cfg).unwrap();
            assert_eq!(b.treatment_plans.len(), 4);
            let f = b.factual_plan.expect("factual plan present");
            assert_eq!(b.true_outcomes[f].to_bits(), tr.volumes[t + 1].to_bits());
        }
        assert!(matches!(enumerate_one_step_counterfactuals(tr, 0, &cfg), Err(Error::Index(_))));
        assert!(matches!(enumerate_one_step_counterfactuals(tr, cfg.horizon, &cfg), Err(Error::Index(_))));
    }
}

#[test]
fn no_treatment_beats_full_treatment_in_volume() {
    let mut cfg = config(6.0, 5, 10);
    cfg.noise_std = 0.0;
    let ds = generate_dataset(&cfg).unwrap();
    for tr in &ds.units {
        for t in 1..cfg.horizon {
            if tr.volumes[t] < tr.params.carrying_capacity && tr.volumes[t] > 1.0 {
                let b = enumerate_one_step_counterfactuals(tr, t, &cfg).unwrap();
                assert!(b.true_outcomes[Treatment::NONE.index()] > b.true_outcomes[Treatment::BOTH.index()]);
            }
        }
    }
}

#[test]
fn sliding_bundles() {
    let cfg = config(6.0, 5, 11);
    let ds = generate_dataset(&cfg).unwrap();
    let tr = &ds.units[0];
    let one = sliding_treatment_counterfactuals(tr, 3, 1, &cfg).unwrap();
    assert_eq!(one.treatment_plans, vec![vec![Treatment::BOTH]]);
    let six = sliding_treatment_counterfactuals(tr, 3, 6, &cfg).unwrap();
    assert_eq!(six.treatment_plans.len(), 6);
    for (j, p) in six.treatment_plans.iter().enumerate() {
        assert_eq!(p.iter().filter(|a| **a != Treatment::NONE).count(), 1);
        assert_eq!(p[j], Treatment::BOTH);
        assert_eq!(six.true_paths[j].len(), 6);
        assert_eq!(six.true_outcomes[j], six.true_paths[j][5]);
        for q in &six.treatment_plans[..j] {
            assert_ne!(p, q);
        }
    }
    assert!(sliding_treatment_counterfactuals(tr, cfg.horizon - 5, 6, &cfg).is_err());
    assert!(sliding_treatment_counterfactuals(tr, cfg.horizon - 6, 6, &cfg).is_ok());
}

#[test]
fn export_writes_one_csv_per_split() {
    let cfg = config(6.0, 10, 12);
    let ds = generate_dataset(&cfg).unwrap();
    let dir = std::env::temp_dir().join(format!("cfseq-sim-{}", std::process::id()));
    export_dataset(&ds, &dir).unwrap();
    let train = std::fs::read_to_string(dir.join("train.csv")).unwrap();
    assert!(train.starts_with("unit_id,t,volume,chemo,radio,concentration,prob\n"));
    assert_eq!(train.lines().count(), 1 + 6 * (cfg.horizon + 1));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["n_units"], 10);
    std::fs::remove_dir_all(dir).ok();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn consistency_holds_for_any_seed(seed in 0u64..1_000_000, gamma in 0.0f64..10.0) {
        let cfg = SimulationConfig { gamma, n_units: 3, horizon: 12, seed, split_fractions: [1.0, 0.0, 0.0], ..SimulationConfig::default() };
        let ds = generate_dataset(&cfg).unwrap();
        for tr in &ds.units {
            let observed: Vec<Treatment> = (0..12).map(|t| Treatment { chemo: tr.chemo_flags[t], radio: tr.radio_flags[t] }).collect();
            let path = continue_with_plan(tr, &cfg, 0, &observed).unwrap();
            prop_assert_eq!(&path[..], &tr.volumes[1..]);
        }
    }
}
