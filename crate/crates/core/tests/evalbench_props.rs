use proptest::prelude::{any, prop, prop_assert, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfmpose::evalbench::*;
use rfmpose::flowmatch::FlowModel;
use rfmpose::netcore::NetArch;
use rfmpose::rlrefine::CriticModel;
use rfmpose::synthdata::{build_dataset, Category, DatasetConfig, Instance, Split};
use rfmpose::Exec;

fn arch() -> NetArch {
    NetArch { feat_dim: 16, point_hidden: 16, embed_dim: 8, head_hidden: vec![32], out_dim: 9 }
}

/// A randomly initialized (non-zero) policy and a critic built from it.
fn stack(seed: u64) -> ModelStack {
    let mut policy = FlowModel::new(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    policy.net.init(&mut policy.store, &mut ChaCha8Rng::seed_from_u64(seed + 1), false);
    let mut critic = CriticModel::from_flow(&policy, &mut ChaCha8Rng::seed_from_u64(seed + 2)).unwrap();
    critic.net.init(&mut critic.store, &mut ChaCha8Rng::seed_from_u64(seed + 3), false);
    ModelStack { policy, critic: Some(critic) }
}

fn test_set(count: usize) -> Vec<Instance> {
    let cfg = DatasetConfig {
        count,
        n_points: 32,
        categories: vec![Category::Box, Category::Cylinder],
        split: Split::Test,
        ..Default::default()
    };
    build_dataset(&cfg, 21, Exec::Sequential).unwrap().instances
}

proptest! {
    #[test]
    fn rates_are_monotone_in_the_thresholds(errs in prop::collection::vec((0.0f64..20.0, 0.0f64..8.0, any::<bool>()), 1..50)) {
        let res: Vec<(Category, f64, f64)> = errs
            .iter()
            .map(|&(r, t, b)| (if b { Category::Box } else { Category::Cylinder }, r, t))
            .collect();
        let (rates, _) = summarize(&res).unwrap();
        prop_assert!(rates[0] <= rates[1] && rates[0] <= rates[2]);
        prop_assert!(rates[1] <= rates[3] && rates[2] <= rates[3]);
        prop_assert!(rates.iter().all(|r| (0.0..=100.0).contains(r)));
    }
}

#[test]
fn fixed_error_predictors() {
    let perfect = vec![(Category::Box, 0.0, 0.0), (Category::Cylinder, 0.0, 0.0)];
    assert_eq!(summarize(&perfect).unwrap().0, [100.0; 4]);
    let off = vec![(Category::Box, 7.0, 1.0), (Category::Cylinder, 7.0, 1.0)];
    assert_eq!(summarize(&off).unwrap().0, [0.0, 0.0, 100.0, 100.0]);
    // Both comparisons are strict.
    let edge = vec![(Category::Box, 5.0, 2.0)];
    assert_eq!(summarize(&edge).unwrap().0, [0.0, 0.0, 0.0, 100.0]);
}

#[test]
fn oracle_ranking_of_exact_candidates_is_perfect() {
    let test = test_set(6);
    let s = stack(1);
    let mut cache = generate_candidates(&s, &test, 5, 4, None, 3, Exec::Sequential).unwrap();
    // Replace every candidate with the ground-truth pose.
    for c in &mut cache {
        for cand in &mut c.set.candidates {
            cand.pose = rfmpose::geometry::Pose::from_rotation(&c.target.rotation, c.target.translation);
        }
        c.errors = vec![(0.0, 0.0); c.set.k()];
    }
    for strategy in [Strategy::Mean, Strategy::OracleTop, Strategy::RandomSingle] {
        let r = report_from_candidates(&cache, 5, 0.6, strategy, 3).unwrap();
        assert_eq!(r.rates, [100.0; 4], "{}", strategy.name());
    }
}

#[test]
fn empty_test_set_and_missing_critic_are_errors() {
    let s = stack(1);
    let cfg = EvalConfig { k: 4, horizon: 3, ..Default::default() };
    assert!(matches!(evaluate(&s, &[], &cfg, Strategy::Mean, 1, Exec::Sequential), Err(EvalError::EmptyTestSet)));
    let bare = ModelStack { critic: None, ..s };
    let test = test_set(2);
    assert!(matches!(
        evaluate(&bare, &test, &cfg, Strategy::Value, 1, Exec::Sequential),
        Err(EvalError::MissingCritic)
    ));
    assert!(evaluate(&bare, &test, &cfg, Strategy::Mean, 1, Exec::Sequential).is_ok());
    assert!(matches!(
        run_grid_k_rho(&bare, &test, &[2], &[1.0], 3, None, 1, Exec::Sequential),
        Err(EvalError::MissingCritic)
    ));
    assert!(matches!(bench_speed(&bare, &[], &[2], 2, 1.0, 0, 1), Err(EvalError::EmptyTestSet)));
}

#[test]
fn smaller_k_is_a_prefix_of_the_cache() {
    let test = test_set(4);
    let s = stack(2);
    let big = generate_candidates(&s, &test, 12, 5, None, 9, Exec::Sequential).unwrap();
    let small = generate_candidates(&s, &test, 4, 5, None, 9, Exec::Sequential).unwrap();
    for (b, sm) in big.iter().zip(&small) {
        assert_eq!(b.set.prefix(4), sm.set);
        assert_eq!(b.errors[..4], sm.errors[..]);
    }
    let grid = grid_from_cache(&big, &[4, 12], &[0.5, 1.0], 9).unwrap();
    let direct = report_from_candidates(&small, 4, 0.5, Strategy::Value, 9).unwrap();
    assert_eq!(grid.cell(0, 0), &direct);
}

#[test]
fn grid_and_ablation_shapes() {
    let test = test_set(4);
    let s = stack(3);
    let grid = run_grid_k_rho(&s, &test, &[2, 4, 6], &[0.2, 0.4, 0.6, 0.8, 1.0], 3, None, 5, Exec::Sequential).unwrap();
    assert_eq!(grid.shape(), (3, 5));
    assert_eq!(grid.to_csv_matrix(3).lines().count(), 4);
    assert_eq!(grid.to_jsonl().lines().count(), 15);
    let cfg = EvalConfig { k: 6, horizon: 3, ..Default::default() };
    let ranking = run_ranking_ablation(&s, &test, &RANKING_STRATEGIES, &cfg, 5, Exec::Sequential).unwrap();
    assert_eq!(ranking.shape(), (4, 1));

    // The same checkpoint on both sides gives identical rows.
    let fr = run_flow_vs_rl(&s.policy, &s, &test, &cfg, 5, Exec::Sequential).unwrap();
    assert_eq!(fr.shape(), (2, 2));
    assert_eq!(fr.cell(0, 0), fr.cell(1, 0));
    assert_eq!(fr.cell(0, 1), fr.cell(1, 1));
}

#[test]
fn evaluation_is_deterministic_across_executors() {
    let test = test_set(6);
    let s = stack(4);
    let cfg = EvalConfig { k: 6, horizon: 4, ..Default::default() };
    let a = evaluate(&s, &test, &cfg, Strategy::Value, 7, Exec::Sequential).unwrap();
    let b = evaluate(&s, &test, &cfg, Strategy::Value, 7, Exec::Parallel).unwrap();
    assert_eq!(a.without_latency(), b.without_latency());
    assert_eq!(a.instances, 6);
    assert_eq!(a.per_category.len(), 2);
}

#[test]
fn speed_rows_follow_the_horizons() {
    let test = test_set(3);
    let s = stack(5);
    let rows = bench_speed(&s, &test, &[2, 8], 4, 0.6, 1, 3).unwrap();
    assert_eq!(rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), vec![2, 8]);
    assert!(rows.iter().all(|r| r.median_ms > 0.0));
    assert_eq!(speed_table(&rows).lines().count(), 3);
}

#[test]
fn spread_is_zero_for_exact_candidates() {
    let test = test_set(2);
    let s = stack(6);
    let mut c = generate_candidates(&s, &test, 5, 3, None, 1, Exec::Sequential).unwrap().remove(0);
    assert!(candidate_spread(&c) > 0.0);
    c.errors = vec![(0.0, 0.0); 5];
    assert_eq!(candidate_spread(&c), 0.0);
    c.errors = vec![(180.0, 0.0); 5];
    assert!((candidate_spread(&c) - 2.0).abs() < 1e-12);
}

#[test]
fn strategy_names_round_trip() {
    for s in [Strategy::Mean, Strategy::Value, Strategy::RandomSingle, Strategy::RandomTop, Strategy::OracleTop] {
        assert_eq!(Strategy::parse(s.name()), Some(s));
    }
    assert_eq!(Strategy::parse("best"), None);
}
