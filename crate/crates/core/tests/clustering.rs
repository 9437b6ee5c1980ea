use cfseq::clustering::*;
use cfseq::diffnum::DenseTensor;
use cfseq::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 500 draws each from N(-5, 0.5²) and N(5, 0.5²), interleaved, with labels.
fn two_blobs(seed: u64, dim: usize) -> (DenseTensor, Vec<usize>) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    for i in 0..1000 {
        let c = i % 2;
        let centre = if c == 0 { -5.0 } else { 5.0 };
        for _ in 0..dim {
            vals.push(centre + noise.sample(&mut r));
        }
        labels.push(c);
    }
    (DenseTensor::matrix(1000, dim, vals).unwrap(), labels)
}

#[test]
fn single_component_is_the_sample_moments() {
    let pts = DenseTensor::matrix(5, 2, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 2.0, 2.0, -1.0, 0.0]).unwrap();
    let m = fit_gmm(&pts, 1, GmmInit::Kmeans, 50, 1e-12, &mut rng(1)).unwrap();
    for c in 0..2 {
        let col: Vec<f64> = (0..5).map(|i| pts.get(i, c)).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((m.means[0][c] - mean).abs() < 1e-12);
        assert!((m.variances[0][c] - var).abs() < 1e-12);
    }
    assert_eq!(m.weights, vec![1.0]);
}

#[test]
fn gmm_recovers_separated_blobs() {
    let (pts, truth) = two_blobs(2, 1);
    for init in [GmmInit::Kmeans, GmmInit::Seeds] {
        let m = fit_gmm(&pts, 2, init, 200, 1e-10, &mut rng(3)).unwrap();
        let mut means: Vec<f64> = m.means.iter().map(|v| v[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.3 && (means[1] - 5.0).abs() < 0.3, "{means:?}");
        for w in m.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {:?}", m.log_likelihoods);
        }
        let labels = assign_clusters(&Clusterer::Gmm(m), &pts).unwrap();
        let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let purity = agree.max(1000 - agree) as f64 / 1000.0;
        assert!(purity >= 0.99, "purity {purity}");
    }
}

#[test]
fn gmm_log_likelihood_is_monotone_on_overlapping_data() {
    let mut r = rng(4);
    let n = Normal::new(0.0, 1.0).unwrap();
    let vals: Vec<f64> = (0..600).map(|i| n.sample(&mut r) + if i % 3 == 0 { 1.5 } else { 0.0 }).collect();
    let pts = DenseTensor::matrix(200, 3, vals).unwrap();
    let m = fit_gmm(&pts, 4, GmmInit::Seeds, 300, 0.0, &mut rng(5)).unwrap();
    assert!(m.log_likelihoods.len() > 5);
    for w in m.log_likelihoods.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
    assert!(m.variances.iter().flatten().all(|&v| v >= VARIANCE_FLOOR));
    assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn responsibilities_rows_sum_to_one() {
    let (pts, _) = two_blobs(6, 2);
    let m = fit_gmm(&pts, 3, GmmInit::Kmeans, 100, 1e-8, &mut rng(7)).unwrap();
    let r = m.responsibilities(&pts).unwrap();
    for i in 0..r.rows() {
        assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn kmeans_on_identical_points_collapses() {
    let pts = DenseTensor::matrix(6, 2, [1.5, -2.0].repeat(6)).unwrap();
    let m = fit_kmeans(&pts, 3, 20, &mut rng(8)).unwrap();
    assert!(m.centroids.iter().all(|c| c == &vec![1.5, -2.0]));
}

#[test]
fn kmeans_recovers_blobs_with_monotone_wcss() {
    let (pts, truth) = two_blobs(9, 2);
    let m = fit_kmeans(&pts, 2, 100, &mut rng(10)).unwrap();
    let mut cs = m.centroids.clone();
    cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for (c, target) in cs.iter().zip([-5.0, 5.0]) {
        assert!(c.iter().all(|x| (x - target).abs() < 0.3), "{cs:?}");
    }
    for w in m.wcss.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
    let labels = assign_clusters(&Clusterer::Kmeans(m), &pts).unwrap();
    let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
    assert!(agree.max(1000 - agree) >= 990);
}

#[test]
fn kmeans_wcss_monotone_with_many_clusters() {
    let mut r = rng(11);
    let n = Normal::new(0.0, 1.0).unwrap();
    let pts = DenseTensor::matrix(150, 2, (0..300).map(|_| n.sample(&mut r)).collect()).unwrap();
    let m = fit_kmeans(&pts, 7, 100, &mut rng(12)).unwrap();
    for w in m.wcss.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
}

#[test]
fn assignment_examples() {
    let model = Clusterer::Kmeans(CentroidModel { centroids: vec![vec![0.0], vec![10.0], vec![10.0]], wcss: vec![] });
    let pts = DenseTensor::matrix(3, 1, vec![0.0, 10.0, 5.0]).unwrap();
    // The midpoint ties between 0 and 1; duplicated centroids tie between 1 and 2.
    assert_eq!(assign_clusters(&model, &pts).unwrap(), vec![0, 1, 0]);
    let gmm = Clusterer::Gmm(MixtureModel {
        weights: vec![0.5, 0.5],
        means: vec![vec![-3.0], vec![3.0]],
        variances: vec![vec![1.0], vec![1.0]],
        log_likelihoods: vec![],
    });
    let pts = DenseTensor::matrix(2, 1, vec![3.0, -3.0]).unwrap();
    assert_eq!(assign_clusters(&gmm, &pts).unwrap(), vec![1, 0]);
    assert_eq!(assign_clusters(&gmm, &pts).unwrap(), assign_clusters(&gmm, &pts).unwrap());
    let wide = DenseTensor::zeros(&[2, 2]);
    assert!(matches!(assign_clusters(&gmm, &wide), Err(Error::Shape(_))));
}

#[test]
fn fitting_errors() {
    let pts = DenseTensor::zeros(&[2, 3]);
    assert!(matches!(fit_gmm(&pts, 3, GmmInit::Kmeans, 10, 1e-6, &mut rng(0)), Err(Error::Degenerate(_))));
    assert!(matches!(fit_kmeans(&pts, 3, 10, &mut rng(0)), Err(Error::Degenerate(_))));
    let empty = DenseTensor::zeros(&[0, 3]);
    assert!(matches!(fit_gmm(&empty, 1, GmmInit::Kmeans, 10, 1e-6, &mut rng(0)), Err(Error::Domain(_))));
}

#[test]
fn fitting_is_seeded() {
    let (pts, _) = two_blobs(13, 2);
    for algo in [ClusterAlgorithm::Gmm, ClusterAlgorithm::Kmeans] {
        let a = Clusterer::fit(algo, &pts, 3, &mut rng(14)).unwrap();
        let b = Clusterer::fit(algo, &pts, 3, &mut rng(14)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn subgroup_weight_examples() {
    let s = subgroup_weights(&[0, 0, 0], &[0, 0, 0], 1, 1).unwrap();
    assert_eq!(s.weight(0, 0), Some(1.0));

    // Cluster 0 holds 7 of the 20 treatment-0 samples and 8 of the 30 treatment-1 samples.
    let mut labels = Vec::new();
    let mut treatments = Vec::new();
    for (a, inside, total) in [(0, 7, 20), (1, 8, 30)] {
        for i in 0..total {
            labels.push(if i < inside { 0 } else { 1 });
            treatments.push(a);
        }
    }
    let s = subgroup_weights(&labels, &treatments, 2, 3).unwrap();
    assert_eq!(s.weight(0, 0), Some(7.0 / 20.0));
    assert_eq!(s.weight(0, 1), Some(8.0 / 30.0));
    assert_eq!(s.weight(0, 2), None);
    assert_eq!(s.counts[1], vec![8, 22]);
    assert_eq!(s.members(&treatments, 0, 1).len(), 8);
}

#[test]
fn clustering_never_sees_treatments() {
    let (pts, _) = two_blobs(15, 2);
    let model = Clusterer::fit(ClusterAlgorithm::Gmm, &pts, 2, &mut rng(16)).unwrap();
    let labels = assign_clusters(&model, &pts).unwrap();
    let t1: Vec<usize> = (0..1000).map(|i| i % 4).collect();
    let t2: Vec<usize> = (0..1000).map(|i| (i * 7 + 3) % 4).collect();
    let a = subgroup_weights(&labels, &t1, 2, 4).unwrap();
    let b = subgroup_weights(&labels, &t2, 2, 4).unwrap();
    assert_eq!(a.labels, b.labels);
}

proptest! {
    #[test]
    fn weights_sum_to_one_per_present_treatment(
        pairs in proptest::collection::vec((0usize..4, 0usize..3), 1..60)
    ) {
        let (labels, treatments): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let s = subgroup_weights(&labels, &treatments, 4, 3).unwrap();
        for a in 0..3 {
            match &s.weights[a] {
                Some(w) => prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12),
                None => prop_assert!(!treatments.contains(&a)),
            }
        }
    }

    #[test]
    fn trace_bound_is_monotone(vars in proptest::collection::vec(1e-6f64..1.0, 6), which in 0usize..6, bump in 0.0f64..2.0) {
        let mut m = MixtureModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0; 3]; 2],
            variances: vec![vars[..3].to_vec(), vars[3..].to_vec()],
            log_likelihoods: vec![],
        };
        let before = covariance_trace_bound(&m);
        m.variances[which / 3][which % 3] += bump;
        prop_assert!(covariance_trace_bound(&m) >= before);
    }
}
