mod common;

use neurotopo::geometry::{embed_with, EmbedMode};
use neurotopo::harness::MetricsRow;
use neurotopo::models::{LossKind, NetObjective, TwoLayerNet};
use neurotopo::particles::{apply_permutation, ParticleCollection, Permutation, StepSize};
use neurotopo::rules::{check_equivariance, AdamParams, GradientOracle, Rule, RuleKind, UpdateRule};
use neurotopo::topology::{betti_numbers, build_rips, pairwise_distances, union_find_components};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(max_n: usize, dim: usize) -> impl Strategy<Value = ParticleCollection> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 1..=max_n)
        .prop_map(|rows| ParticleCollection::from_rows(&rows).unwrap())
}

fn kind(k: u8) -> RuleKind {
    match k % 3 {
        0 => RuleKind::Gd,
        1 => RuleKind::Momentum { mu: 0.8 },
        _ => RuleKind::Adam(AdamParams::default()),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_rule_is_equivariant(seed in 0u64..1000, k in 0u8..3, h in 2usize..12) {
        let data = common::teacher_data(2, 80, seed);
        let oracle = NetObjective::new(&data, LossKind::Mse, (0..40).collect());
        let theta = TwoLayerNet::gaussian(2, 1, h, seed).unwrap().into_neurons();
        let kind = kind(k);
        let x = kind.pack(&theta).unwrap();
        let rule = Rule::new(&oracle, kind, StepSize::new(0.01).unwrap()).at_step(2);
        prop_assert!(check_equivariance(&rule, &x, 5, seed).unwrap().holds(1e-10));
    }

    #[test]
    fn relabelling_points_keeps_betti(x in cloud(8, 3), scale in 0.1f64..3.0, seed in any::<u64>()) {
        let p = Permutation::random(x.count(), &mut ChaCha8Rng::seed_from_u64(seed));
        let y = apply_permutation(&p, &x).unwrap();
        let a = betti_numbers(&build_rips(&pairwise_distances(&x), scale, 3).unwrap()).unwrap();
        let b = betti_numbers(&build_rips(&pairwise_distances(&y), scale, 3).unwrap()).unwrap();
        prop_assert_eq!(a.triple(), b.triple());
    }

    #[test]
    fn b0_counts_components(x in cloud(20, 2), scale in 0.1f64..2.0) {
        let complex = build_rips(&pairwise_distances(&x), scale, 2).unwrap();
        prop_assert_eq!(betti_numbers(&complex).unwrap().b0, union_find_components(&complex));
    }

    #[test]
    fn point_cloud_csv_is_exact(x in cloud(10, 4), mult in prop::collection::vec(1u32..5, 10)) {
        let x = x.clone().with_multiplicity(mult[..x.count()].to_vec()).unwrap();
        let back = ParticleCollection::parse_csv(x.to_csv_string().as_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn splitting_neurons_preserves_the_function(seed in 0u64..1000, h in 1usize..8) {
        let data = common::teacher_data(3, 60, seed);
        let oracle = NetObjective::new(&data, LossKind::Mse, (0..60).collect());
        let theta = TwoLayerNet::gaussian(3, 1, h, seed).unwrap().into_neurons();
        let mut rows = Vec::new();
        for r in theta.rows() {
            let mut half = r.to_vec();
            half[3] *= 0.5;
            rows.push(half.clone());
            rows.push(half);
        }
        let split = ParticleCollection::from_rows(&rows).unwrap();
        let (a, b) = (oracle.loss(&theta).unwrap(), oracle.loss(&split).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn subcritical_gd_neither_merges_nor_splits(x in cloud(8, 2), diag in prop::collection::vec(0.1f64..5.0, 2), frac in 0.05f64..0.95) {
        let oracle = neurotopo::rules::quadratic::ParticleQuadratic::diagonal(&diag);
        let lambda = diag.iter().cloned().fold(0.0, f64::max);
        let eta = StepSize::new(frac / lambda).unwrap();
        let u = Rule::new(&oracle, RuleKind::Gd, eta).update(&x).unwrap();
        let y = neurotopo::particles::step(&x, &u, eta).unwrap();
        for i in 0..x.count() {
            for j in i + 1..x.count() {
                let (d0, d1) = (dist(x.row(i), x.row(j)), dist(y.row(i), y.row(j)));
                prop_assert!(d1 >= (1.0 - frac) * d0 - 1e-12);
                prop_assert!(d1 <= (1.0 + frac) * d0 + 1e-12);
            }
        }
    }

    #[test]
    fn frame_embedding_is_an_isometry(x in cloud(10, 3), target in 3usize..12, seed in any::<u64>()) {
        let y = embed_with(&x, target, seed, EmbedMode::Frame).unwrap();
        prop_assert_eq!(y.dim(), target);
        for i in 0..x.count() {
            for j in 0..x.count() {
                prop_assert!((dist(x.row(i), x.row(j)) - dist(y.row(i), y.row(j))).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn metrics_rows_round_trip(step in 0usize..100000, loss in prop::option::of(-1e6f64..1e6),
                               betti in prop::option::of((0usize..9, 0usize..9, 0usize..9)),
                               k in prop::option::of(0.0f64..1e4)) {
        let row = MetricsRow { step, loss, betti, k_hat: k, eta_star: k.map(|k| 1.0 / k), ..Default::default() };
        prop_assert_eq!(MetricsRow::parse(&row.to_csv()).unwrap(), row);
    }
}
