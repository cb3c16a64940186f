use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfmpose::flowmatch::{
    draw_prior, euler_sample, fm_loss_and_grads, fm_loss_value, fm_loss_with_draws, sample_candidates, target_velocity,
    train_flow, FlowError, FlowModel, FlowTrainConfig, FmDraw, PoseVec, VelocityField,
};
use rfmpose::geometry::POSE_DIM;
use rfmpose::netcore::{adam_step, write_checkpoint, AdamConfig, Linear, NetArch, ParamStore, Precision};
use rfmpose::synthdata::{build_dataset, Category, DatasetConfig};
use rfmpose::Exec;

struct Constant(PoseVec);

impl VelocityField for Constant {
    fn context(&self, _: ArrayView2<f64>) -> Result<Vec<f64>, FlowError> {
        Ok(vec![])
    }
    fn velocities(&self, _: &[f64], poses: &[PoseVec], _: &[f64]) -> Result<Array2<f64>, FlowError> {
        Ok(Array2::from_shape_fn((poses.len(), POSE_DIM), |(_, i)| self.0[i]))
    }
}

/// dp/dt = -p.
struct Decay;

impl VelocityField for Decay {
    fn context(&self, _: ArrayView2<f64>) -> Result<Vec<f64>, FlowError> {
        Ok(vec![])
    }
    fn velocities(&self, _: &[f64], poses: &[PoseVec], _: &[f64]) -> Result<Array2<f64>, FlowError> {
        Ok(Array2::from_shape_fn((poses.len(), POSE_DIM), |(k, i)| -poses[k][i]))
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    // Dyadic values and horizons: every partial sum is representable.
    let c: PoseVec = [0.5, -1.25, 2.0, 0.75, 0.0, 1.5, -0.5, 3.0, 1.0];
    let p0: PoseVec = [1.0, 0.5, -2.0, 0.25, 4.0, -1.0, 0.0, 2.5, -0.125];
    for h in [1, 2, 4, 8, 16, 32, 64] {
        let traj = euler_sample(&Constant(c), &[], h, &p0).unwrap();
        let want: PoseVec = std::array::from_fn(|i| p0[i] + c[i]);
        assert_eq!(*traj.terminal(), want, "H = {h}");
    }
    // Other horizons agree to rounding.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, p0) = (draw_prior(&mut rng), draw_prior(&mut rng));
    for h in [3, 5, 7, 20, 40] {
        let traj = euler_sample(&Constant(c), &[], h, &p0).unwrap();
        for i in 0..POSE_DIM {
            assert!((traj.terminal()[i] - (p0[i] + c[i])).abs() <= 1e-12);
        }
    }
}

fn decay_error(h: usize, p0: &PoseVec) -> f64 {
    let traj = euler_sample(&Decay, &[], h, p0).unwrap();
    let e = (-1f64).exp();
    (0..POSE_DIM).map(|i| (traj.terminal()[i] - e * p0[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn euler_converges_at_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p0 = draw_prior(&mut rng);
    let ratio = decay_error(20, &p0) / decay_error(40, &p0);
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    // Error bound C/H with C = ‖p0‖ e^{-1} / 2 to leading order.
    let norm = p0.iter().map(|v| v * v).sum::<f64>().sqrt();
    for h in [5, 10, 20, 40, 80] {
        assert!(decay_error(h, &p0) <= norm / h as f64);
    }
}

fn small_arch() -> NetArch {
    NetArch { feat_dim: 16, point_hidden: 8, embed_dim: 8, head_hidden: vec![24, 24], out_dim: 9 }
}

fn random_model(seed: u64) -> FlowModel {
    // Non-zero output layer so predictions are not trivially zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::new(small_arch(), &mut rng).unwrap();
    let last = format!("velocity.head.{}.w", small_arch().head_hidden.len());
    for v in model.store.get_mut(&last).unwrap().data_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    model
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectories_satisfy_euler_identity(seed in any::<u64>(), h in 1usize..30, k in 1usize..6) {
        let model = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let cloud = random_cloud(&mut rng, 20);
        let ctx = model.context(cloud.view()).unwrap();
        for traj in sample_candidates(&model, &ctx, k, h, &mut rng).unwrap() {
            prop_assert!(traj.satisfies_euler_identity());
            prop_assert_eq!(traj.horizon(), h);
        }
    }

    #[test]
    fn target_velocity_is_linear(p0 in prop::array::uniform9(-5.0f64..5.0), p1 in prop::array::uniform9(-5.0f64..5.0), a in -4.0f64..4.0) {
        let scaled = target_velocity(&p0.map(|v| a * v), &p1.map(|v| a * v));
        let base = target_velocity(&p0, &p1);
        for i in 0..POSE_DIM {
            prop_assert!((scaled[i] - a * base[i]).abs() <= 1e-12 * (1.0 + base[i].abs() * a.abs()));
        }
    }
}

#[test]
fn zero_model_loss_is_mean_target_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = FlowModel::new(small_arch(), &mut rng).unwrap();
    let clouds: Vec<Array2<f64>> = (0..5).map(|_| random_cloud(&mut rng, 16)).collect();
    let views: Vec<_> = clouds.iter().map(|c| c.view()).collect();
    let targets: Vec<PoseVec> = (0..5).map(|_| draw_prior(&mut rng)).collect();
    let batch = fm_loss_and_grads(&model, &views, &targets, 3, &mut rng).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, item) in batch.draws.iter().enumerate() {
        for d in item {
            sum += (0..POSE_DIM).map(|j| (targets[i][j] - d.p0[j]).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    assert_eq!(n, 15);
    assert!((batch.loss - sum / n as f64).abs() <= 1e-12 * batch.loss);
}

#[test]
fn oracle_predictions_give_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets = Array2::from_shape_fn((7, POSE_DIM), |_| rng.random_range(-2.0..2.0));
    assert_eq!(fm_loss_value(&targets.view(), &targets.view()), 0.0);
}

#[test]
fn single_item_loss_matches_hand_computation() {
    let model = random_model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_cloud(&mut rng, 10);
    let p1 = draw_prior(&mut rng);
    let draw = FmDraw { t: 0.3, p0: draw_prior(&mut rng) };
    let (loss, _) = fm_loss_with_draws(&model, &[cloud.view()], &[p1], &[vec![draw]]).unwrap();
    let ctx = model.context(cloud.view()).unwrap();
    let pt: PoseVec = std::array::from_fn(|i| 0.7 * draw.p0[i] + 0.3 * p1[i]);
    let v = model.velocities(&ctx, &[pt], &[0.3]).unwrap();
    let hand: f64 = (0..POSE_DIM).map(|i| (v[[0, i]] - (p1[i] - draw.p0[i])).powi(2)).sum();
    assert!((loss - hand).abs() <= 1e-12 * hand.max(1.0));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let model = random_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let clouds: Vec<Array2<f64>> = (0..3).map(|_| random_cloud(&mut rng, 12)).collect();
    let views: Vec<_> = clouds.iter().map(|c| c.view()).collect();
    let targets: Vec<PoseVec> = (0..3).map(|_| draw_prior(&mut rng)).collect();
    let draws: Vec<Vec<FmDraw>> =
        (0..3).map(|_| (0..2).map(|_| rfmpose::flowmatch::draw_fm(&mut rng)).collect()).collect();
    let (_, grads) = fm_loss_with_draws(&model, &views, &targets, &draws).unwrap();
    let names: Vec<String> = model.store.iter().map(|(k, _)| k.clone()).collect();
    let mut probe = model.clone();
    for name in names {
        let n = model.store.get(&name).unwrap().len();
        for i in (0..n).step_by(7) {
            let orig = model.store.get(&name).unwrap().data()[i];
            probe.store.get_mut(&name).unwrap().data_mut()[i] = orig + 1e-5;
            let up = fm_loss_with_draws(&probe, &views, &targets, &draws).unwrap().0;
            probe.store.get_mut(&name).unwrap().data_mut()[i] = orig - 1e-5;
            let down = fm_loss_with_draws(&probe, &views, &targets, &draws).unwrap().0;
            probe.store.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / 2e-5;
            let analytic = grads.get(&name).unwrap()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            assert!(rel <= 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn candidates_are_reproducible_and_reduce_to_single_samples() {
    let model = random_model(31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cloud = random_cloud(&mut rng, 24);
    let ctx = model.context(cloud.view()).unwrap();
    let a = sample_candidates(&model, &ctx, 50, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample_candidates(&model, &ctx, 50, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    let one = sample_candidates(&model, &ctx, 1, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(one[0], euler_sample(&model, &ctx, 20, one[0].initial()).unwrap());
    // Batched candidates equal one-at-a-time integration.
    assert_eq!(a[7], euler_sample(&model, &ctx, 20, a[7].initial()).unwrap());
    let same = rfmpose::flowmatch::euler_sample_batch(&model, &ctx, 20, &[*a[0].initial(); 6]).unwrap();
    assert!(same.iter().all(|t| t == &same[0]));
    // H = 1 is one field evaluation at t = 0.
    let h1 = euler_sample(&model, &ctx, 1, a[0].initial()).unwrap();
    let v = model.velocities(&ctx, &[*a[0].initial()], &[0.0]).unwrap();
    let want: PoseVec = std::array::from_fn(|i| a[0].initial()[i] + v[[0, i]]);
    assert_eq!(*h1.terminal(), want);
}

fn tiny_dataset(count: usize) -> Vec<rfmpose::synthdata::Instance> {
    let cfg = DatasetConfig { count, n_points: 32, categories: vec![Category::Box], ..DatasetConfig::default() };
    build_dataset(&cfg, 17, Exec::default()).unwrap().instances
}

fn checkpoint_bytes(model: &FlowModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&model.store, &mut buf, Precision::F64).unwrap();
    buf
}

#[test]
fn single_instance_overfits() {
    let data = tiny_dataset(1);
    let cfg =
        FlowTrainConfig { epochs: 200, batch_size: 1, draws_per_item: 256, lr: 3e-3, ..FlowTrainConfig::default() };
    let (_, logs) = train_flow(&data, NetArch::velocity(), &cfg, 5, Exec::default()).unwrap();
    let (first, last) = (logs[0].loss, logs.last().unwrap().loss);
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic_across_modes() {
    let data = tiny_dataset(20);
    let cfg = FlowTrainConfig { epochs: 3, batch_size: 8, chunk_items: 3, ..FlowTrainConfig::default() };
    let (a, la) = train_flow(&data, small_arch(), &cfg, 8, Exec::Sequential).unwrap();
    let (b, lb) = train_flow(&data, small_arch(), &cfg, 8, Exec::Parallel).unwrap();
    let (c, _) = train_flow(&data, small_arch(), &cfg, 9, Exec::Parallel).unwrap();
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    assert_eq!(la, lb);
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
}

#[test]
fn linear_head_on_frozen_features_reaches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let model = random_model(41);
    let m = 60;
    let feats: Vec<Vec<f64>> = (0..m).map(|_| model.context(random_cloud(&mut rng, 16).view()).unwrap()).collect();
    let f = feats[0].len();
    let x = Array2::from_shape_fn((m, f), |(i, j)| feats[i][j]);
    let a_true = Array2::from_shape_fn((f, 3), |_| rng.random_range(-1.0..1.0));
    let y = x.dot(&a_true) + Array2::from_shape_fn((m, 3), |_| rng.random_range(-0.05..0.05));

    let layer = Linear::new("ls", f, 3);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng, true);
    for step in 0..20000 {
        let out = layer.forward(&store, &x.view()).unwrap();
        let d = (out - &y) * (2.0 / m as f64);
        let mut grads = store.zero_grads();
        layer.backward(&store, &x.view(), &d.view(), &mut grads).unwrap();
        let lr = rfmpose::flowmatch::cosine_lr(0.05, step, 20000);
        adam_step(&mut store, &grads, &AdamConfig { lr, ..AdamConfig::default() }).unwrap();
    }

    // Closed form with an intercept column.
    let design = DMatrix::from_fn(m, f + 1, |i, j| if j < f { x[[i, j]] } else { 1.0 });
    let w = store.get("ls.w").unwrap();
    let b = store.get("ls.b").unwrap();
    for out in 0..3 {
        let rhs = DVector::from_fn(m, |i, _| y[[i, out]]);
        let sol = design.clone().svd(true, true).solve(&rhs, 1e-12).unwrap();
        for j in 0..f {
            assert!((w.data()[j * 3 + out] - sol[j]).abs() <= 1e-3, "w[{j},{out}]");
        }
        assert!((b.data()[out] - sol[f]).abs() <= 1e-3);
    }
}
