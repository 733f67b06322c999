use gbsr_core::backbone::{Backbone, EmbeddingTable, LightGcnSocial};
use gbsr_core::data::{self, generate_synthetic, Dataset, SyntheticSpec};
use gbsr_core::denoiser::{self, relax_sample, DenoiserParams, Mode};
use gbsr_core::eval::{self, separation_auc};
use gbsr_core::graph::WeightedAdjacency;
use gbsr_core::hsic::{hsic_estimate, rbf_kernel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small dataset drawn from a seed.
fn random_dataset(seed: u64, max_users: usize, max_items: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=max_users);
    let n = rng.random_range(1..=max_items);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..m {
        for i in 0..n {
            match rng.random_range(0..10) {
                0..=2 => train.push((u, i)),
                3 => test.push((u, i)),
                _ => {}
            }
        }
    }
    let mut social = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if rng.random::<f64>() < 0.3 {
                social.push((a, b));
            }
        }
    }
    Dataset::new(m, n, train, test, social).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagation_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let ds = random_dataset(seed, 8, 8);
        let adj = WeightedAdjacency::interactions_only(&ds);
        let nodes = ds.node_count();
        let e1 = random_matrix(nodes, 3, seed + 1);
        let e2 = random_matrix(nodes, 3, seed + 2);
        let mixed = &e1 * alpha + &e2 * beta;
        let lhs = adj.propagate(mixed.view()).unwrap();
        let rhs = adj.propagate(e1.view()).unwrap() * alpha + adj.propagate(e2.view()).unwrap() * beta;
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn unit_weight_spectral_radius_at_most_one(seed in 0u64..10_000) {
        let ds = random_dataset(seed, 8, 8);
        let adj = WeightedAdjacency::with_social_weights(&ds, &vec![1.0; ds.social_edges().len()]).unwrap();
        let dense = adj.to_dense();
        // power iteration on the symmetric matrix squared
        let n = dense.nrows();
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64).sin());
        let mut estimate = 0.0;
        for _ in 0..300 {
            let w = dense.dot(&dense.dot(&v));
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            estimate = (norm / v.dot(&v).sqrt()).sqrt();
            v = w / norm;
        }
        prop_assert!(estimate <= 1.0 + 1e-9, "spectral radius estimate {estimate}");
    }

    #[test]
    fn normalized_matrix_is_symmetric_with_block_structure(seed in 0u64..10_000) {
        let ds = random_dataset(seed, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..ds.social_edges().len()).map(|_| rng.random::<f64>()).collect();
        let adj = WeightedAdjacency::with_social_weights(&ds, &w).unwrap();
        let d = adj.to_dense();
        let m = ds.user_count();
        prop_assert!(max_abs_diff(&d, &d.t().to_owned()) == 0.0);
        for ((r, c), &v) in d.indexed_iter() {
            if r >= m && c >= m {
                prop_assert_eq!(v, 0.0);
            }
            if r < m && c < m && v != 0.0 {
                prop_assert!(ds.social_index(r, c).is_some());
            }
            if r < m && c >= m && v != 0.0 {
                prop_assert!(ds.is_train(r, c - m));
            }
            prop_assert!(r != c || v == 0.0);
        }
    }

    #[test]
    fn reweighting_is_idempotent(seed in 0u64..10_000) {
        let ds = random_dataset(seed, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let w: Vec<f64> = (0..ds.social_edges().len()).map(|_| rng.random::<f64>()).collect();
        let a = WeightedAdjacency::with_social_weights(&ds, &w).unwrap();
        let b = WeightedAdjacency::with_social_weights(&ds, &w).unwrap();
        prop_assert_eq!(a.to_dense(), b.to_dense());
        let ones = WeightedAdjacency::with_social_weights(&ds, &vec![1.0; w.len()]).unwrap();
        let none = gbsr_core::graph::build_adjacency(&ds, None).unwrap();
        prop_assert_eq!(ones.to_dense(), none.to_dense());
    }

    #[test]
    fn backbone_forward_is_linear_in_embeddings(seed in 0u64..10_000, layers in 1usize..=4) {
        let ds = random_dataset(seed, 6, 6);
        let adj = LightGcnSocial.adjacency(&ds, None).unwrap();
        let (m, n) = (ds.user_count(), ds.item_count());
        let e1 = random_matrix(m + n, 4, seed + 3);
        let e2 = random_matrix(m + n, 4, seed + 4);
        let t = |e: Array2<f64>| EmbeddingTable::new(e, m, layers).unwrap();
        let r1 = LightGcnSocial.forward(&t(e1.clone()), &adj).unwrap().readout;
        let r2 = LightGcnSocial.forward(&t(e2.clone()), &adj).unwrap().readout;
        let r12 = LightGcnSocial.forward(&t(&e1 * 2.0 - &e2), &adj).unwrap().readout;
        prop_assert!(max_abs_diff(&r12, &(r1 * 2.0 - r2)) < 1e-12);
    }

    #[test]
    fn hsic_symmetric_and_permutation_invariant(seed in 0u64..10_000, n in 2usize..24, sigma2 in 0.1f64..4.0) {
        let x = random_matrix(n, 3, seed);
        let y = random_matrix(n, 5, seed + 1);
        let kx = rbf_kernel(x.view(), sigma2).unwrap();
        let ky = rbf_kernel(y.view(), sigma2).unwrap();
        let v = hsic_estimate(&kx, &ky).unwrap();
        prop_assert!((v - hsic_estimate(&ky, &kx).unwrap()).abs() < 1e-14);
        prop_assert!(v >= -1e-15);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let px = x.select(ndarray::Axis(0), &order);
        let py = y.select(ndarray::Axis(0), &order);
        let vp = hsic_estimate(&rbf_kernel(px.view(), sigma2).unwrap(), &rbf_kernel(py.view(), sigma2).unwrap()).unwrap();
        prop_assert!((v - vp).abs() < 1e-12);
        for ((i, j), &k) in kx.values().indexed_iter() {
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert_eq!(k, kx.values()[[j, i]]);
        }
    }

    #[test]
    fn relaxation_increases_with_confidence(delta in 0.001f64..0.999, t in 0.05f64..2.0) {
        let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
        for pair in grid.windows(2) {
            let (lo, hi) = (relax_sample(pair[0], delta, t), relax_sample(pair[1], delta, t));
            // increments vanish below one ulp once the logistic nears 1
            prop_assert!(hi >= lo);
            prop_assert!(hi > lo || lo > 1.0 - 1e-12, "w {:?}: {lo} then {hi}", pair);
        }
    }

    #[test]
    fn confidences_are_probabilities_and_weights_bounded(seed in 0u64..10_000, eps in 0.0f64..=1.0) {
        let ds = random_dataset(seed, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DenoiserParams::random(4, 1.0, 0.2, eps, &mut rng);
        let users = random_matrix(ds.user_count(), 4, seed + 9);
        for mode in [Mode::Stochastic, Mode::Deterministic] {
            let map = denoiser::denoise(&params, users.view(), &ds, mode, &mut rng).unwrap();
            prop_assert_eq!(map.edges(), ds.social_edges());
            for (&w, &rho) in map.confidence().iter().zip(map.relaxed()) {
                prop_assert!(w > 0.0 && w < 1.0);
                prop_assert!((0.0..=1.0).contains(&rho));
            }
            for &(a, b) in ds.social_edges() {
                let ab = denoiser::pair_confidence(&params, users.view(), a, b);
                let ba = denoiser::pair_confidence(&params, users.view(), b, a);
                prop_assert_eq!(ab, ba);
            }
        }
    }

    #[test]
    fn negatives_never_in_train(seed in 0u64..10_000, batch in 1usize..64) {
        let ds = random_dataset(seed, 6, 12);
        prop_assume!(!ds.train().is_empty());
        prop_assume!((0..ds.user_count()).all(|u| ds.train_items(u).len() < ds.item_count()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triples = data::sample_batch(&ds, batch, &mut rng).unwrap();
        prop_assert_eq!(triples.len(), batch);
        for t in triples {
            prop_assert!(ds.is_train(t.user, t.positive));
            prop_assert!(!ds.is_train(t.user, t.negative));
        }
    }

    #[test]
    fn noise_edges_cross_clusters(seed in 0u64..500, eta in 0.0f64..=1.0) {
        let spec = SyntheticSpec {
            users_per_cluster: 20,
            items_per_cluster: 15,
            noise_fraction: eta,
            seed,
            ..SyntheticSpec::default()
        };
        let (ds, noisy) = generate_synthetic(&spec).unwrap();
        let genuine = noisy.iter().filter(|n| !**n).count();
        prop_assert_eq!(noisy.len() - genuine, (eta * genuine as f64 - 1e-9).ceil().max(0.0) as usize);
        for (&(a, b), &n) in ds.social_edges().iter().zip(&noisy) {
            prop_assert_eq!(spec.cluster_of_user(a) != spec.cluster_of_user(b), n);
        }
        for &(u, i) in ds.train().iter().chain(ds.test()) {
            prop_assert_eq!(spec.cluster_of_user(u), i / spec.items_per_cluster);
        }
    }

    #[test]
    fn recall_does_not_decrease_with_cutoff(seed in 0u64..10_000) {
        let ds = random_dataset(seed, 8, 30);
        prop_assume!(!ds.test().is_empty());
        let table = EmbeddingTable::random(ds.user_count(), ds.item_count(), 4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let adj = LightGcnSocial.adjacency(&ds, None).unwrap();
        let reps = LightGcnSocial.forward(&table, &adj).unwrap();
        let cutoffs: Vec<usize> = (1..=30).collect();
        let m = eval::evaluate(&reps, &ds, &cutoffs).unwrap();
        for pair in cutoffs.windows(2) {
            prop_assert!(m.recall(pair[1]).unwrap() >= m.recall(pair[0]).unwrap());
        }
        for c in cutoffs {
            let (r, n) = (m.recall(c).unwrap(), m.ndcg(c).unwrap());
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&n));
        }
    }

    #[test]
    fn auc_complements_under_label_flip(scores in prop::collection::vec(0.0f64..1.0, 2..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = separation_auc(&scores, &labels).unwrap();
        let b = separation_auc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_preserves_every_interaction(seed in 0u64..1000, ratio in 0.0f64..=1.0) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lines = String::new();
        let mut expected = std::collections::BTreeSet::new();
        for _ in 0..rng.random_range(1..60) {
            let (u, i) = (rng.random_range(100..110u64), rng.random_range(500..520u64));
            lines.push_str(&format!("{u}\t{i}\n"));
            expected.insert((u, i));
        }
        let inter = dir.path().join("inter.tsv");
        let social = dir.path().join("social.tsv");
        std::fs::write(&inter, lines).unwrap();
        std::fs::write(&social, "").unwrap();
        let ds = data::load_dataset(&inter, &social, ratio, seed).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for &(u, i) in ds.train().iter().chain(ds.test()) {
            prop_assert!(seen.insert((ds.user_label(u), ds.item_label(i))));
        }
        prop_assert_eq!(seen, expected);
        for u in 0..ds.user_count() {
            let total = ds.train_items(u).len() + ds.test_items(u).len();
            prop_assert_eq!(ds.train_items(u).len(), data::train_count(total, ratio));
        }
        let again = data::load_dataset(&inter, &social, ratio, seed).unwrap();
        prop_assert_eq!(again, ds);
    }
}

#[test]
fn exhaustive_negative_sampling_on_small_data() {
    // every user/positive combination over many draws, including a user with
    // a single valid negative
    let ds = Dataset::new(3, 4, vec![(0, 0), (0, 1), (0, 2), (1, 3), (2, 0), (2, 1)], vec![], vec![]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut negatives_seen = std::collections::BTreeSet::new();
    for _ in 0..500 {
        for t in data::sample_batch(&ds, 16, &mut rng).unwrap() {
            assert!(ds.is_train(t.user, t.positive));
            assert!(!ds.is_train(t.user, t.negative));
            negatives_seen.insert((t.user, t.negative));
        }
    }
    let all_valid: std::collections::BTreeSet<_> = (0..3)
        .flat_map(|u| (0..4).map(move |i| (u, i)))
        .filter(|&(u, i)| !ds.is_train(u, i))
        .collect();
    assert_eq!(negatives_seen, all_valid);
}

#[test]
fn relaxation_mean_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(w, t) in &[(0.1, 0.2), (0.5, 0.2), (0.9, 0.2), (0.3, 1.0), (0.7, 0.05)] {
        let samples = denoiser::draw_deltas(100_000, &mut rng);
        let mc = samples.iter().map(|&d| relax_sample(w, d, t)).sum::<f64>() / samples.len() as f64;
        // midpoint rule over δ ∈ (0, 1)
        let steps = 200_000;
        let quad = (0..steps)
            .map(|k| relax_sample(w, (k as f64 + 0.5) / steps as f64, t))
            .sum::<f64>()
            / steps as f64;
        assert!((mc - quad).abs() < 0.02, "w={w} t={t}: sampled {mc}, quadrature {quad}");
    }
}
