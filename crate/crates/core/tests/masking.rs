use cfseq::diffnum::DenseTensor;
use cfseq::masking::*;
use cfseq::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sequences(r: &mut ChaCha8Rng, units: usize, t: usize, d: usize) -> Vec<DenseTensor> {
    (0..units)
        .map(|_| DenseTensor::matrix(t, d, (0..t * d).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap())
        .collect()
}

fn cfg(strategy: MaskStrategy, prob: f64) -> MaskConfig {
    MaskConfig { strategy, prob, ..MaskConfig::default() }
}

#[test]
fn zero_probability_is_identity() {
    let seqs = sequences(&mut rng(1), 5, 10, 2);
    for s in [MaskStrategy::Gaussian, MaskStrategy::Zero, MaskStrategy::Interpolation, MaskStrategy::None] {
        let (out, ind) = apply_mask(&seqs, &cfg(s, 0.0), &mut rng(2)).unwrap();
        assert_eq!(out, seqs);
        assert!(ind.iter().flatten().all(|m| !m));
    }
}

#[test]
fn full_zero_masking_zeroes_everything() {
    let seqs = sequences(&mut rng(3), 4, 6, 3);
    let (out, ind) = apply_mask(&seqs, &cfg(MaskStrategy::Zero, 1.0), &mut rng(4)).unwrap();
    assert!(out.iter().all(|s| s.values().iter().all(|&x| x == 0.0)));
    assert!(ind.iter().flatten().all(|&m| m));
}

#[test]
fn interpolation_uses_neighbour_mean() {
    let seqs = vec![DenseTensor::matrix(3, 1, vec![2.0, 4.0, 10.0]).unwrap()];
    let (out, ind) = apply_mask(&seqs, &cfg(MaskStrategy::Interpolation, 1.0), &mut rng(5)).unwrap();
    assert_eq!(out[0].values(), &[2.0, 6.0, 10.0]);
    assert_eq!(ind[0], vec![false, true, false]);
}

#[test]
fn interpolation_needs_three_steps() {
    let seqs = vec![DenseTensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()];
    assert!(matches!(apply_mask(&seqs, &cfg(MaskStrategy::Interpolation, 0.5), &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_rejected() {
    let seqs = sequences(&mut rng(6), 1, 4, 1);
    assert!(apply_mask(&seqs, &cfg(MaskStrategy::Zero, 1.5), &mut rng(0)).is_err());
    let bad = MaskConfig { noise_std: -1.0, ..MaskConfig::default() };
    assert!(matches!(apply_mask(&seqs, &bad, &mut rng(0)), Err(Error::Config(_))));
    let nan = vec![DenseTensor::matrix(1, 1, vec![f64::NAN]).unwrap()];
    assert!(matches!(apply_mask(&nan, &MaskConfig::default(), &mut rng(0)), Err(Error::Domain(_))));
}

#[test]
fn masked_fraction_within_binomial_band() {
    let seqs = vec![DenseTensor::zeros(&[100, 1]); 1000];
    let p = 0.05;
    let (_, ind) = apply_mask(&seqs, &cfg(MaskStrategy::Zero, p), &mut rng(7)).unwrap();
    let n = 100_000.0;
    let hits = ind.iter().flatten().filter(|&&m| m).count() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((hits - n * p).abs() < 3.0 * sigma, "{hits}");
}

#[test]
fn gaussian_draws_are_uncorrelated_and_standard() {
    let seqs = vec![DenseTensor::zeros(&[1000, 1]); 100];
    let (out, _) = apply_mask(&seqs, &cfg(MaskStrategy::Gaussian, 1.0), &mut rng(8)).unwrap();
    let xs: Vec<f64> = out.iter().flat_map(|s| s.values().to_vec()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let lag: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
    assert!((lag / var).abs() < 0.05);
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03);
}

#[test]
fn seeded_determinism() {
    let seqs = sequences(&mut rng(9), 20, 15, 2);
    let c = cfg(MaskStrategy::Gaussian, 0.3);
    assert_eq!(apply_mask(&seqs, &c, &mut rng(10)).unwrap(), apply_mask(&seqs, &c, &mut rng(10)).unwrap());
}

#[test]
fn indicator_csv_round_trip() {
    let dir = std::env::temp_dir().join(format!("cfseq-mask-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mask.csv");
    write_mask_indicators(&path, &[7, 9], &[vec![true, false], vec![false, false]]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "unit_id,t,masked\n7,0,1\n7,1,0\n9,0,0\n9,1,0\n");
    std::fs::remove_dir_all(dir).unwrap();
}

proptest! {
    #[test]
    fn unmasked_cells_untouched(seed in 0u64..5000, prob in 0.0f64..1.0, which in 0usize..3) {
        let strategy = [MaskStrategy::Gaussian, MaskStrategy::Zero, MaskStrategy::Interpolation][which];
        let seqs = sequences(&mut rng(seed), 3, 8, 2);
        let (out, ind) = apply_mask(&seqs, &cfg(strategy, prob), &mut rng(seed + 1)).unwrap();
        for u in 0..3 {
            for t in 0..8 {
                if !ind[u][t] {
                    prop_assert_eq!(out[u].row(t), seqs[u].row(t));
                }
            }
        }
    }
}
