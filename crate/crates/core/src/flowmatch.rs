//! Conditional flow matching over the 9-dimensional pose space and Euler
//! sampling of the learned velocity field.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{Pose, POSE_DIM};
use crate::netcore::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, ConditionedNet, Grads, NetArch, NetError, ParamStore,
    Precision, StateRow,
};
use crate::rng::{indexed_stream, stream};
use crate::synthdata::Instance;

pub const VELOCITY_PREFIX: &str = "velocity";

pub type PoseVec = [f64; POSE_DIM];

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite velocity at step {step}")]
    NonFiniteVelocity { step: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A velocity field conditioned on a point cloud. The cloud is reduced once
/// to a context vector that every step of a trajectory reuses.
pub trait VelocityField: Sync {
    fn context(&self, cloud: ArrayView2<f64>) -> Result<Vec<f64>, FlowError>;

    /// One velocity row per `(pose, time)` pair.
    fn velocities(&self, context: &[f64], poses: &[PoseVec], times: &[f64]) -> Result<Array2<f64>, FlowError>;
}

/// Point encoder plus velocity head, with its parameters.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub net: ConditionedNet,
    pub store: ParamStore,
}

impl FlowModel {
    /// Fresh model whose output layer is zero, so the initial field is 0.
    pub fn new(arch: NetArch, rng: &mut impl Rng) -> Result<Self, FlowError> {
        let net = ConditionedNet::new(VELOCITY_PREFIX, arch)?;
        let mut store = ParamStore::new();
        net.init(&mut store, rng, true);
        Ok(Self { net, store })
    }

    pub fn from_store(store: ParamStore) -> Result<Self, FlowError> {
        let net = ConditionedNet::from_store(VELOCITY_PREFIX, &store)?;
        if net.arch.out_dim != POSE_DIM {
            return Err(NetError::InvalidSpec(format!("velocity output width {}", net.arch.out_dim)).into());
        }
        Ok(Self { net, store })
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        Self::from_store(load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        Ok(save_checkpoint(&self.store, path, Precision::F64)?)
    }
}

impl VelocityField for FlowModel {
    fn context(&self, cloud: ArrayView2<f64>) -> Result<Vec<f64>, FlowError> {
        Ok(self.net.encode(&self.store, cloud)?)
    }

    fn velocities(&self, context: &[f64], poses: &[PoseVec], times: &[f64]) -> Result<Array2<f64>, FlowError> {
        Ok(self.net.predict(&self.store, context, poses, times)?)
    }
}

pub fn interpolate(p0: &PoseVec, p1: &PoseVec, t: f64) -> PoseVec {
    std::array::from_fn(|i| (1.0 - t) * p0[i] + t * p1[i])
}

pub fn target_velocity(p0: &PoseVec, p1: &PoseVec) -> PoseVec {
    std::array::from_fn(|i| p1[i] - p0[i])
}

/// One Euler step `p + u / H`. Every trajectory in the crate advances through
/// this function, so stored trajectories satisfy the identity exactly.
pub fn euler_update(p: &PoseVec, u: &PoseVec, horizon: usize) -> PoseVec {
    let h = horizon as f64;
    std::array::from_fn(|i| p[i] + u[i] / h)
}

pub fn step_time(step: usize, horizon: usize) -> f64 {
    step as f64 / horizon as f64
}

pub fn draw_prior(rng: &mut impl Rng) -> PoseVec {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    /// `p_0 ..= p_H`.
    pub poses: Vec<PoseVec>,
    /// `u_1 ..= u_H`.
    pub actions: Vec<PoseVec>,
}

impl SampleTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn initial(&self) -> &PoseVec {
        &self.poses[0]
    }

    pub fn terminal(&self) -> &PoseVec {
        self.poses.last().expect("trajectory has p0")
    }

    pub fn final_pose(&self) -> Pose {
        Pose::from_vector(self.terminal())
    }

    pub fn satisfies_euler_identity(&self) -> bool {
        let h = self.horizon();
        self.poses.len() == h + 1
            && (0..h).all(|i| euler_update(&self.poses[i], &self.actions[i], h) == self.poses[i + 1])
    }
}

fn check_finite(v: &Array2<f64>, step: usize) -> Result<(), FlowError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFiniteVelocity { step })
    }
}

/// Integrates all starting poses together, one batched field query per step.
pub fn euler_sample_batch(
    field: &impl VelocityField,
    context: &[f64],
    horizon: usize,
    starts: &[PoseVec],
) -> Result<Vec<SampleTrajectory>, FlowError> {
    if horizon == 0 {
        return Err(FlowError::ZeroHorizon);
    }
    let mut trajs: Vec<SampleTrajectory> =
        starts.iter().map(|p0| SampleTrajectory { poses: vec![*p0], actions: Vec::with_capacity(horizon) }).collect();
    let mut current: Vec<PoseVec> = starts.to_vec();
    for h in 0..horizon {
        let times = vec![step_time(h, horizon); current.len()];
        let v = field.velocities(context, &current, &times)?;
        check_finite(&v, h)?;
        for (k, traj) in trajs.iter_mut().enumerate() {
            let u: PoseVec = std::array::from_fn(|i| v[[k, i]]);
            current[k] = euler_update(&current[k], &u, horizon);
            traj.actions.push(u);
            traj.poses.push(current[k]);
        }
    }
    Ok(trajs)
}

pub fn euler_sample(
    field: &impl VelocityField,
    context: &[f64],
    horizon: usize,
    p0: &PoseVec,
) -> Result<SampleTrajectory, FlowError> {
    Ok(euler_sample_batch(field, context, horizon, std::slice::from_ref(p0))?.remove(0))
}

/// `k` trajectories from independent prior draws, taken from `rng` in order.
pub fn sample_candidates(
    field: &impl VelocityField,
    context: &[f64],
    k: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SampleTrajectory>, FlowError> {
    let starts: Vec<PoseVec> = (0..k).map(|_| draw_prior(rng)).collect();
    euler_sample_batch(field, context, horizon, &starts)
}

/// One `(t, p0)` draw of the flow-matching objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub p0: PoseVec,
}

pub fn draw_fm(rng: &mut impl Rng) -> FmDraw {
    let t = rng.random::<f64>();
    FmDraw { t, p0: draw_prior(rng) }
}

/// Mean over rows of the squared distance between prediction and target.
pub fn fm_loss_value(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> f64 {
    let n = pred.nrows().max(1) as f64;
    (pred - target).mapv(|d| d * d).sum() / n
}

/// Loss and gradients for items `(cloud, ground truth)`, where `draws[i]`
/// lists the draws for item `i`. The loss is the mean over all draws.
pub fn fm_loss_with_draws(
    model: &FlowModel,
    clouds: &[ArrayView2<f64>],
    targets: &[PoseVec],
    draws: &[Vec<FmDraw>],
) -> Result<(f64, Grads), FlowError> {
    let total: usize = draws.iter().map(|d| d.len()).sum();
    let (sum, grads) = fm_partial(model, clouds, targets, draws, total)?;
    Ok((sum / total as f64, grads))
}

/// Sum of per-draw losses and gradients of `sum / total`.
fn fm_partial(
    model: &FlowModel,
    clouds: &[ArrayView2<f64>],
    targets: &[PoseVec],
    draws: &[Vec<FmDraw>],
    total: usize,
) -> Result<(f64, Grads), FlowError> {
    if clouds.is_empty() || total == 0 || clouds.len() != targets.len() || clouds.len() != draws.len() {
        return Err(FlowError::EmptyBatch);
    }
    let mut rows = Vec::new();
    let mut want = Vec::new();
    for (i, item_draws) in draws.iter().enumerate() {
        for d in item_draws {
            rows.push(StateRow { cloud: i, pose: interpolate(&d.p0, &targets[i], d.t), time: d.t });
            want.push(target_velocity(&d.p0, &targets[i]));
        }
    }
    let want = Array2::from_shape_fn((want.len(), POSE_DIM), |(r, c)| want[r][c]);
    let (out, cache) = model.net.forward(&model.store, clouds, &rows)?;
    let diff = out - &want;
    let sum = diff.mapv(|d| d * d).sum();
    let d_out = diff * (2.0 / total as f64);
    let mut grads = model.store.zero_grads();
    model.net.backward(&model.store, &cache, &d_out.view(), &mut grads)?;
    Ok((sum, grads))
}

pub struct FmBatch {
    pub loss: f64,
    pub grads: Grads,
    pub draws: Vec<Vec<FmDraw>>,
}

/// Draws `draws_per_item` fresh `(t, p0)` pairs per item, item by item, and
/// evaluates the objective.
pub fn fm_loss_and_grads(
    model: &FlowModel,
    clouds: &[ArrayView2<f64>],
    targets: &[PoseVec],
    draws_per_item: usize,
    rng: &mut impl Rng,
) -> Result<FmBatch, FlowError> {
    let draws: Vec<Vec<FmDraw>> =
        (0..clouds.len()).map(|_| (0..draws_per_item).map(|_| draw_fm(rng)).collect()).collect();
    let (loss, grads) = fm_loss_with_draws(model, clouds, targets, &draws)?;
    Ok(FmBatch { loss, grads, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    /// Independent `(t, p0)` draws per item per batch.
    pub draws_per_item: usize,
    /// Items per gradient work unit. Fixed so results do not depend on the
    /// number of threads.
    pub chunk_items: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 64, lr: 1e-3, draws_per_item: 4, chunk_items: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    0.5 * peak * (1.0 + (PI * step as f64 / total as f64).cos())
}

pub fn training_rows(instances: &[Instance]) -> (Vec<Array2<f64>>, Vec<PoseVec>) {
    let clouds = instances.iter().map(|i| i.cloud()).collect();
    let targets = instances.iter().map(|i| i.gt_pose().to_vector()).collect();
    (clouds, targets)
}

/// Trains from scratch; deterministic under `seed` in either execution mode.
pub fn train_flow(
    instances: &[Instance],
    arch: NetArch,
    config: &FlowTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(FlowModel, Vec<EpochLog>), FlowError> {
    let mut model = FlowModel::new(arch, &mut stream(seed, "flow/init"))?;
    let logs = continue_flow_training(&mut model, instances, config, seed, exec)?;
    Ok((model, logs))
}

pub fn continue_flow_training(
    model: &mut FlowModel,
    instances: &[Instance],
    config: &FlowTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<EpochLog>, FlowError> {
    if instances.is_empty() || config.batch_size == 0 || config.draws_per_item == 0 {
        return Err(FlowError::EmptyBatch);
    }
    let (clouds, targets) = training_rows(instances);
    let n = instances.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let chunk = config.chunk_items.max(1);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = indexed_stream(seed, "flow/epoch", epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_draws = 0usize;
        let mut lr = config.lr;
        for batch in order.chunks(config.batch_size) {
            let draws: Vec<Vec<FmDraw>> =
                batch.iter().map(|_| (0..config.draws_per_item).map(|_| draw_fm(&mut rng)).collect()).collect();
            let total = batch.len() * config.draws_per_item;
            let pieces: Vec<(usize, usize)> =
                (0..batch.len()).step_by(chunk).map(|s| (s, (s + chunk).min(batch.len()))).collect();
            let model_ref = &*model;
            let parts = exec.map(&pieces, |&(s, e)| {
                let views: Vec<ArrayView2<f64>> = batch[s..e].iter().map(|&i| clouds[i].view()).collect();
                let tg: Vec<PoseVec> = batch[s..e].iter().map(|&i| targets[i]).collect();
                fm_partial(model_ref, &views, &tg, &draws[s..e], total)
            });
            let mut sum = 0.0;
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (s, g) = p?;
                sum += s;
                grads.push(g);
            }
            let grads = Grads::sum_ordered(grads).ok_or(FlowError::EmptyBatch)?;
            if !sum.is_finite() || !grads.is_finite() {
                return Err(FlowError::NonFiniteLoss { epoch: epoch + 1 });
            }
            lr = cosine_lr(config.lr, step, total_steps);
            adam_step(&mut model.store, &grads, &AdamConfig { lr, ..AdamConfig::default() })?;
            step += 1;
            epoch_sum += sum;
            epoch_draws += total;
        }
        let loss = epoch_sum / epoch_draws as f64;
        if (epoch + 1) % 25 == 0 || epoch == 0 {
            log::info!("flow epoch {} loss {loss:.5}", epoch + 1);
        }
        logs.push(EpochLog { epoch: epoch + 1, loss, lr });
    }
    Ok(logs)
}

pub fn loss_curve_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss\n");
    for l in logs {
        s.push_str(&format!("{},{}\n", l.epoch, l.loss));
    }
    s
}
