//! PPO refinement of the velocity field viewed as a policy over Euler steps.
//!
//! A state is the cloud, the current pose `p_h` and the step `h`; an action
//! is a velocity `u`, and the transition is the Euler update. Rewards score
//! the pose reached by each step against the ground truth, separately for
//! rotation and translation, and a two-headed critic estimates the
//! remaining return of each.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::flowmatch::{draw_prior, euler_update, step_time, FlowError, FlowModel, PoseVec};
use crate::geometry::{geodesic_angle_deg, symmetry_aware_angle_deg, Pose, RotationMatrix, Vec3, POSE_DIM};
use crate::netcore::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, ConditionedNet, Grads, NetArch, NetError, ParamStore,
    Precision, StateRow,
};
use crate::rng::{indexed_stream, stream};
use crate::synthdata::Instance;

pub const CRITIC_PREFIX: &str = "critic";

#[derive(Debug, Error)]
pub enum RlError {
    #[error("non-finite loss in iteration {iteration}, epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss { iteration: usize, epoch: usize, minibatch: usize },
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Two-headed value network: output 0 is the rotation value, 1 translation.
#[derive(Debug, Clone)]
pub struct CriticModel {
    pub net: ConditionedNet,
    pub store: ParamStore,
}

impl CriticModel {
    pub fn new(arch: NetArch, rng: &mut impl Rng) -> Result<Self, RlError> {
        if arch.out_dim != 2 {
            return Err(RlError::Config("critic needs two outputs".into()));
        }
        let net = ConditionedNet::new(CRITIC_PREFIX, arch)?;
        let mut store = ParamStore::new();
        net.init(&mut store, rng, true);
        Ok(Self { net, store })
    }

    pub fn from_store(store: ParamStore) -> Result<Self, RlError> {
        let net = ConditionedNet::from_store(CRITIC_PREFIX, &store)?;
        if net.arch.out_dim != 2 {
            return Err(NetError::InvalidSpec(format!("critic output width {}", net.arch.out_dim)).into());
        }
        Ok(Self { net, store })
    }

    /// Copies the flow model's encoder and hidden head layers; the two-unit
    /// output layer starts at zero. The copy shares no storage with `flow`.
    pub fn from_flow(flow: &FlowModel, rng: &mut impl Rng) -> Result<Self, RlError> {
        let arch = NetArch { out_dim: 2, ..flow.net.arch.clone() };
        let mut critic = Self::new(arch, rng)?;
        let last = flow.net.head.layers().len() - 1;
        let src = flow.net.prefix().to_string();
        for (name, tensor) in flow.store.iter() {
            let rest = &name[src.len()..];
            if rest.starts_with(&format!(".head.{last}.")) {
                continue;
            }
            critic.store.insert(format!("{CRITIC_PREFIX}{rest}"), tensor.clone());
        }
        critic.store.reset_optimizer();
        Ok(critic)
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        Self::from_store(load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        Ok(save_checkpoint(&self.store, path, Precision::F64)?)
    }

    pub fn context(&self, cloud: ArrayView2<f64>) -> Result<Vec<f64>, RlError> {
        Ok(self.net.encode(&self.store, cloud)?)
    }

    /// `(v_rot, v_trans)` per state.
    pub fn values(&self, context: &[f64], poses: &[PoseVec], times: &[f64]) -> Result<Vec<(f64, f64)>, RlError> {
        let out = self.net.predict(&self.store, context, poses, times)?;
        Ok(out.rows().into_iter().zip(times).map(|(r, &t)| (r[0] * value_scale(t), r[1] * value_scale(t))).collect())
    }
}

/// Critic outputs are multiplied by the remaining time `1 - t`, so the raw
/// outputs estimate a per-step reward rate and the value vanishes at `t = 1`.
pub fn value_scale(time: f64) -> f64 {
    1.0 - time
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpState {
    pub pose: PoseVec,
    pub step: usize,
    pub horizon: usize,
}

impl MdpState {
    pub fn initial(p0: PoseVec, horizon: usize) -> Self {
        Self { pose: p0, step: 0, horizon }
    }

    pub fn time(&self) -> f64 {
        step_time(self.step, self.horizon)
    }

    pub fn is_terminal(&self) -> bool {
        self.step >= self.horizon
    }
}

pub fn env_step(state: &MdpState, action: &PoseVec) -> MdpState {
    MdpState { pose: euler_update(&state.pose, action, state.horizon), step: state.step + 1, horizon: state.horizon }
}

/// Log density of `N(mean, sigma^2 I)` at `action`.
pub fn gaussian_log_prob(action: &PoseVec, mean: &PoseVec, sigma: f64) -> f64 {
    let norm = sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..POSE_DIM).map(|i| -(action[i] - mean[i]).powi(2) / (2.0 * sigma * sigma) - norm).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    pub action: PoseVec,
    /// `None` when `sigma == 0` (a point mass has no density).
    pub log_prob: Option<f64>,
    pub mean: PoseVec,
}

fn perturb(mean: PoseVec, sigma: f64, rng: &mut impl Rng) -> PolicyAction {
    if sigma == 0.0 {
        return PolicyAction { action: mean, log_prob: None, mean };
    }
    let action: PoseVec = std::array::from_fn(|i| mean[i] + sigma * rng.sample::<f64, _>(StandardNormal));
    PolicyAction { action, log_prob: Some(gaussian_log_prob(&action, &mean, sigma)), mean }
}

fn row(m: &Array2<f64>, r: usize) -> PoseVec {
    std::array::from_fn(|i| m[[r, i]])
}

/// Samples actions for a batch of states sharing one cloud.
pub fn policy_act_batch(
    policy: &FlowModel,
    context: &[f64],
    states: &[MdpState],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PolicyAction>, RlError> {
    let poses: Vec<PoseVec> = states.iter().map(|s| s.pose).collect();
    let times: Vec<f64> = states.iter().map(|s| s.time()).collect();
    let means = policy.net.predict(&policy.store, context, &poses, &times)?;
    if means.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFiniteVelocity { step: states.first().map_or(0, |s| s.step) }.into());
    }
    Ok((0..states.len()).map(|k| perturb(row(&means, k), sigma, rng)).collect())
}

pub fn policy_act(
    policy: &FlowModel,
    context: &[f64],
    state: &MdpState,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PolicyAction, RlError> {
    Ok(policy_act_batch(policy, context, std::slice::from_ref(state), sigma, rng)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub tau_rot_deg: f64,
    /// Metres.
    pub tau_trans: f64,
    pub bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { tau_rot_deg: 5.0, tau_trans: 0.05, bonus: 1.0 }
    }
}

/// `exp(-delta / tau)` plus `bonus` when `delta < tau`.
pub fn threshold_reward(delta: f64, tau: f64, bonus: f64) -> f64 {
    (-delta / tau).exp() + if delta < tau { bonus } else { 0.0 }
}

/// Ground truth for scoring poses of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTarget {
    pub rotation: RotationMatrix,
    /// Normalized coordinates.
    pub translation: Vec3,
    pub scale: f64,
    pub symmetry_axis: Option<Vec3>,
}

impl PoseTarget {
    pub fn from_instance(inst: &Instance) -> Self {
        Self {
            rotation: inst.rotation_matrix(),
            translation: inst.translation(),
            scale: inst.scale,
            symmetry_axis: inst.symmetry_axis(),
        }
    }

    pub fn rotation_error_deg(&self, rotation: &RotationMatrix) -> f64 {
        match &self.symmetry_axis {
            Some(axis) => symmetry_aware_angle_deg(rotation, &self.rotation, axis),
            None => geodesic_angle_deg(rotation, &self.rotation),
        }
    }

    /// `(rotation error in degrees, translation error in metres)`. A pose
    /// whose rotation cannot be decoded counts as 180 degrees off.
    pub fn errors(&self, pose: &Pose) -> (f64, f64) {
        let rot = pose.rotation_matrix().map_or(180.0, |r| self.rotation_error_deg(&r));
        (rot, (pose.t - self.translation).norm() * self.scale)
    }
}

pub fn step_rewards(pose: &Pose, target: &PoseTarget, cfg: &RewardConfig) -> (f64, f64) {
    let (dr, dt) = target.errors(pose);
    (threshold_reward(dr, cfg.tau_rot_deg, cfg.bonus), threshold_reward(dt, cfg.tau_trans, cfg.bonus))
}

/// Undiscounted GAE with `V(s_H) = 0`:
/// `A_h = sum_{l=0}^{H-1-h} lambda^l delta_{h+l}`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    let mut next_value = 0.0;
    for h in (0..rewards.len()).rev() {
        let delta = rewards[h] + next_value - values[h];
        acc = delta + lambda * acc;
        adv[h] = acc;
        next_value = values[h];
    }
    adv
}

pub fn joint_advantage(rot: &[f64], trans: &[f64]) -> Vec<f64> {
    rot.iter().zip(trans).map(|(a, b)| 0.5 * (a + b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTarget {
    /// `A + V_old`.
    LambdaReturn,
    /// The advantage itself.
    Advantage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `p_0 ..= p_H`.
    pub poses: Vec<PoseVec>,
    pub actions: Vec<PoseVec>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<(f64, f64)>,
    /// Critic values at collection time.
    pub values: Vec<(f64, f64)>,
    pub advantages: Vec<(f64, f64)>,
    pub joint: Vec<f64>,
    pub value_targets: Vec<(f64, f64)>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn returns(&self) -> (f64, f64) {
        self.rewards.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1))
    }

    fn finish(&mut self, lambda: f64, mode: ValueTarget) {
        let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
        let (r_rot, r_trans) = split(&self.rewards);
        let (v_rot, v_trans) = split(&self.values);
        let a_rot = gae_advantages(&r_rot, &v_rot, lambda);
        let a_trans = gae_advantages(&r_trans, &v_trans, lambda);
        self.joint = joint_advantage(&a_rot, &a_trans);
        self.advantages = a_rot.iter().copied().zip(a_trans.iter().copied()).collect();
        self.value_targets = self
            .advantages
            .iter()
            .zip(&self.values)
            .map(|(a, v)| match mode {
                ValueTarget::LambdaReturn => (a.0 + v.0, a.1 + v.1),
                ValueTarget::Advantage => *a,
            })
            .collect();
    }
}

/// Trajectories that share one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: usize,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub sigma: f64,
    pub groups: Vec<RolloutGroup>,
}

impl RolloutBuffer {
    pub fn steps(&self) -> usize {
        self.groups.iter().map(|g| g.rollouts.len() * self.horizon).sum()
    }

    pub fn mean_returns(&self) -> (f64, f64) {
        let n = self.groups.iter().map(|g| g.rollouts.len()).sum::<usize>().max(1) as f64;
        let s = self
            .groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.returns())
            .fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
        (s.0 / n, s.1 / n)
    }
}

/// Rolls out `starts.len()` trajectories on one instance and fills in
/// rewards, critic values, advantages and value targets.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    policy: &FlowModel,
    critic: &CriticModel,
    inst: &Instance,
    instance_index: usize,
    starts: &[PoseVec],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<RolloutGroup, RlError> {
    let cloud = inst.cloud();
    let target = PoseTarget::from_instance(inst);
    let h = cfg.horizon;
    let p_ctx = policy.net.encode(&policy.store, cloud.view())?;
    let mut states: Vec<MdpState> = starts.iter().map(|p| MdpState::initial(*p, h)).collect();
    let mut rollouts: Vec<Rollout> = starts
        .iter()
        .map(|p| Rollout {
            poses: vec![*p],
            actions: Vec::with_capacity(h),
            log_probs: Vec::with_capacity(h),
            rewards: Vec::with_capacity(h),
            values: Vec::new(),
            advantages: Vec::new(),
            joint: Vec::new(),
            value_targets: Vec::new(),
        })
        .collect();
    for _ in 0..h {
        let acts = policy_act_batch(policy, &p_ctx, &states, cfg.sigma, rng)?;
        for ((state, act), ro) in states.iter_mut().zip(&acts).zip(&mut rollouts) {
            let scored = cfg.reward_pose.pose(state, &act.action);
            *state = env_step(state, &act.action);
            ro.actions.push(act.action);
            ro.log_probs.push(act.log_prob.unwrap_or(0.0));
            ro.poses.push(state.pose);
            ro.rewards.push(step_rewards(&Pose::from_vector(&scored), &target, &cfg.reward));
        }
    }
    let c_ctx = critic.context(cloud.view())?;
    let poses: Vec<PoseVec> = rollouts.iter().flat_map(|r| r.poses[..h].iter().copied()).collect();
    let times: Vec<f64> = (0..rollouts.len()).flat_map(|_| (0..h).map(|s| step_time(s, h))).collect();
    let values = critic.values(&c_ctx, &poses, &times)?;
    for (k, ro) in rollouts.iter_mut().enumerate() {
        ro.values = values[k * h..(k + 1) * h].to_vec();
        ro.finish(cfg.lambda, cfg.value_target);
    }
    Ok(RolloutGroup { instance: instance_index, rollouts })
}

/// Which pose a step's reward is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardPose {
    /// The pose after the action, `p_h + a / H`.
    Next,
    /// The terminal pose the action points at, `p_h + (1 - t_h) a`.
    Endpoint,
}

impl RewardPose {
    pub fn pose(self, state: &MdpState, action: &PoseVec) -> PoseVec {
        match self {
            RewardPose::Next => env_step(state, action).pose,
            RewardPose::Endpoint => {
                let rest = (state.horizon - state.step) as f64 / state.horizon as f64;
                std::array::from_fn(|j| state.pose[j] + action[j] * rest)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInit {
    /// Encoder and hidden layers copied from the flow model.
    Flow,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// Standardize the joint advantage only.
    Joint,
    /// Standardize each head's advantage, average, then standardize the
    /// joint advantage.
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub iterations: usize,
    /// Trajectories per iteration.
    pub trajectories: usize,
    /// Trajectories per instance; an iteration visits
    /// `trajectories / group_size` instances.
    pub group_size: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub reward: RewardConfig,
    pub reward_pose: RewardPose,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Minimum steps per minibatch; minibatches consist of whole groups.
    pub minibatch: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub value_target: ValueTarget,
    /// Iterations at the start that train only the critic.
    pub critic_warmup: usize,
    pub critic_init: CriticInit,
    pub advantage_norm: AdvantageNorm,
    /// Instances used for the deterministic probe returns.
    pub probe_instances: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            trajectories: 64,
            group_size: 8,
            horizon: 20,
            sigma: 0.2,
            reward: RewardConfig::default(),
            reward_pose: RewardPose::Endpoint,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            policy_lr: 3e-5,
            critic_lr: 3e-4,
            value_target: ValueTarget::LambdaReturn,
            critic_warmup: 0,
            critic_init: CriticInit::Flow,
            advantage_norm: AdvantageNorm::PerHead,
            probe_instances: 8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if self.horizon == 0 || self.group_size == 0 || self.trajectories < self.group_size {
            return bad("need horizon >= 1 and trajectories >= group_size >= 1");
        }
        if !(self.sigma >= 0.0) || (self.sigma == 0.0 && self.policy_lr != 0.0) {
            return bad("sigma must be positive unless the policy is frozen (policy_lr = 0)");
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.clip > 0.0) {
            return bad("lambda must lie in [0, 1] and clip be positive");
        }
        if !(self.reward.tau_rot_deg > 0.0 && self.reward.tau_trans > 0.0) {
            return bad("reward thresholds must be positive");
        }
        if self.policy_lr < 0.0 || self.critic_lr < 0.0 {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }

    fn updates_policy(&self, iteration: usize) -> bool {
        self.sigma > 0.0 && self.policy_lr > 0.0 && iteration >= self.critic_warmup
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

struct GroupTerms {
    policy_loss: f64,
    critic_loss: f64,
    clipped: usize,
    kl: f64,
    policy_grads: Option<Grads>,
    critic_grads: Grads,
}

/// Clipped surrogate term `min(rho A, clip(rho) A)` and its derivative with
/// respect to `log pi_new`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn group_terms(
    policy: &FlowModel,
    critic: &CriticModel,
    group: &RolloutGroup,
    cloud: ArrayView2<f64>,
    norm_adv: &[f64],
    n_total: f64,
    cfg: &PpoConfig,
    update_policy: bool,
) -> Result<GroupTerms, RlError> {
    let h = group.rollouts[0].horizon();
    let rows: Vec<StateRow> = group
        .rollouts
        .iter()
        .flat_map(|r| (0..h).map(move |s| StateRow { cloud: 0, pose: r.poses[s], time: step_time(s, h) }))
        .collect();
    let n = rows.len();

    let (mut policy_loss, mut clipped, mut kl, mut policy_grads) = (0.0, 0, 0.0, None);
    if update_policy {
        let (means, cache) = policy.net.forward(&policy.store, &[cloud], &rows)?;
        let mut d_out = Array2::<f64>::zeros((n, POSE_DIM));
        let inv_var = 1.0 / (cfg.sigma * cfg.sigma);
        for (i, (ro, s)) in group.rollouts.iter().flat_map(|r| (0..h).map(move |s| (r, s))).enumerate() {
            let mean = row(&means, i);
            let logp = gaussian_log_prob(&ro.actions[s], &mean, cfg.sigma);
            let ratio = (logp - ro.log_probs[s]).exp();
            let (term, d_logp) = clipped_surrogate(ratio, norm_adv[i], cfg.clip);
            policy_loss -= term;
            kl += ro.log_probs[s] - logp;
            if d_logp == 0.0 && (ratio - 1.0).abs() > cfg.clip {
                clipped += 1;
            }
            let scale = -d_logp / n_total * inv_var;
            for j in 0..POSE_DIM {
                d_out[[i, j]] = scale * (ro.actions[s][j] - mean[j]);
            }
        }
        let mut grads = policy.store.zero_grads();
        policy.net.backward(&policy.store, &cache, &d_out.view(), &mut grads)?;
        policy_grads = Some(grads);
    }

    let (values, cache) = critic.net.forward(&critic.store, &[cloud], &rows)?;
    let mut d_val = Array2::<f64>::zeros((n, 2));
    let mut critic_loss = 0.0;
    for (i, (ro, s)) in group.rollouts.iter().flat_map(|r| (0..h).map(move |s| (r, s))).enumerate() {
        let t = ro.value_targets[s];
        let scale = value_scale(rows[i].time);
        let (e0, e1) = (values[[i, 0]] * scale - t.0, values[[i, 1]] * scale - t.1);
        critic_loss += e0 * e0 + e1 * e1;
        d_val[[i, 0]] = 2.0 * e0 * scale / n_total;
        d_val[[i, 1]] = 2.0 * e1 * scale / n_total;
    }
    let mut critic_grads = critic.store.zero_grads();
    critic.net.backward(&critic.store, &cache, &d_val.view(), &mut critic_grads)?;
    Ok(GroupTerms { policy_loss, critic_loss, clipped, kl, policy_grads, critic_grads })
}

fn standardize(values: &mut [f64]) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    values.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Joint advantages of the whole buffer standardized to zero mean and unit
/// standard deviation (floor 1e-8), one vector per group in buffer order.
pub fn normalized_advantages(buffer: &RolloutBuffer, mode: AdvantageNorm) -> Vec<Vec<f64>> {
    let steps = || buffer.groups.iter().flat_map(|g| g.rollouts.iter().flat_map(|r| r.advantages.iter()));
    let mut joint: Vec<f64> = match mode {
        AdvantageNorm::Joint => {
            buffer.groups.iter().flat_map(|g| g.rollouts.iter().flat_map(|r| r.joint.iter().copied())).collect()
        }
        AdvantageNorm::PerHead => {
            let (mut rot, mut trans): (Vec<f64>, Vec<f64>) = steps().copied().unzip();
            standardize(&mut rot);
            standardize(&mut trans);
            joint_advantage(&rot, &trans)
        }
    };
    standardize(&mut joint);
    let mut out = Vec::with_capacity(buffer.groups.len());
    let mut offset = 0;
    for g in &buffer.groups {
        let n = g.rollouts.len() * buffer.horizon;
        out.push(joint[offset..offset + n].to_vec());
        offset += n;
    }
    out
}

/// Runs `cfg.epochs` passes of clipped PPO and value regression over the
/// buffer. `iteration` only labels errors and seeds the minibatch order.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut FlowModel,
    critic: &mut CriticModel,
    buffer: &RolloutBuffer,
    instances: &[Instance],
    cfg: &PpoConfig,
    update_policy: bool,
    iteration: usize,
    seed: u64,
    exec: Exec,
) -> Result<UpdateStats, RlError> {
    let adv = normalized_advantages(buffer, cfg.advantage_norm);
    let clouds: Vec<Array2<f64>> = buffer.groups.iter().map(|g| instances[g.instance].cloud()).collect();
    let group_steps = buffer.groups.first().map_or(1, |g| g.rollouts.len() * buffer.horizon).max(1);
    let per_batch = cfg.minibatch.div_ceil(group_steps).max(1);
    let mut rng = indexed_stream(seed, "ppo/minibatch", iteration as u64);
    let mut stats = UpdateStats::default();
    let mut total_steps = 0.0;
    let policy_adam = AdamConfig { lr: cfg.policy_lr, ..AdamConfig::default() };
    let critic_adam = AdamConfig { lr: cfg.critic_lr, ..AdamConfig::default() };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..buffer.groups.len()).collect();
        order.shuffle(&mut rng);
        for (mb, members) in order.chunks(per_batch).enumerate() {
            let n_total: f64 = members.iter().map(|&g| (buffer.groups[g].rollouts.len() * buffer.horizon) as f64).sum();
            let (p, c) = (&*policy, &*critic);
            let parts = exec.map(members, |&g| {
                group_terms(p, c, &buffer.groups[g], clouds[g].view(), &adv[g], n_total, cfg, update_policy)
            });
            let mut p_grads = Vec::new();
            let mut c_grads = Vec::new();
            let (mut pl, mut cl) = (0.0, 0.0);
            for part in parts {
                let t = part?;
                pl += t.policy_loss;
                cl += t.critic_loss;
                stats.clip_fraction += t.clipped as f64;
                stats.approx_kl += t.kl;
                p_grads.extend(t.policy_grads);
                c_grads.push(t.critic_grads);
            }
            let nonfinite = RlError::NonFiniteLoss { iteration, epoch, minibatch: mb };
            if !pl.is_finite() || !cl.is_finite() {
                return Err(nonfinite);
            }
            if let Some(g) = Grads::sum_ordered(p_grads) {
                if !g.is_finite() {
                    return Err(nonfinite);
                }
                adam_step(&mut policy.store, &g, &policy_adam)?;
            }
            let g = Grads::sum_ordered(c_grads).expect("minibatch has groups");
            if !g.is_finite() {
                return Err(nonfinite);
            }
            adam_step(&mut critic.store, &g, &critic_adam)?;
            stats.policy_loss += pl;
            stats.critic_loss += cl;
            total_steps += n_total;
        }
    }
    if total_steps > 0.0 {
        stats.policy_loss /= total_steps;
        stats.critic_loss /= total_steps;
        stats.clip_fraction /= total_steps;
        stats.approx_kl /= total_steps;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_return_rot: f64,
    pub mean_return_trans: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    /// Returns of deterministic rollouts from fixed starts on fixed
    /// instances, before this iteration's update.
    pub probe_return_rot: f64,
    pub probe_return_trans: f64,
}

pub fn reward_curve_csv(logs: &[IterationLog]) -> String {
    let mut s = String::from(
        "iteration,mean_return_rot,mean_return_trans,policy_loss,critic_loss,probe_return_rot,probe_return_trans\n",
    );
    for l in logs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.iteration,
            l.mean_return_rot,
            l.mean_return_trans,
            l.policy_loss,
            l.critic_loss,
            l.probe_return_rot,
            l.probe_return_trans
        ));
    }
    s
}

pub struct PpoOutcome {
    pub policy: FlowModel,
    pub critic: CriticModel,
    pub log: Vec<IterationLog>,
}

struct Probe {
    instances: Vec<usize>,
    starts: Vec<PoseVec>,
}

fn probe_returns(
    policy: &FlowModel,
    critic: &CriticModel,
    instances: &[Instance],
    probe: &Probe,
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<(f64, f64), RlError> {
    let det = PpoConfig { sigma: 0.0, ..cfg.clone() };
    let groups = exec.map(&probe.instances, |&i| {
        // sigma = 0 draws nothing from the generator.
        collect_group(policy, critic, &instances[i], i, &probe.starts, &det, &mut stream(0, "ppo/probe-unused"))
    });
    let buffer =
        RolloutBuffer { horizon: cfg.horizon, sigma: 0.0, groups: groups.into_iter().collect::<Result<_, _>>()? };
    Ok(buffer.mean_returns())
}

/// Fine-tunes a copy of `flow` with PPO and trains a critic alongside.
pub fn train_ppo(
    flow: &FlowModel,
    instances: &[Instance],
    cfg: &PpoConfig,
    seed: u64,
    exec: Exec,
) -> Result<PpoOutcome, RlError> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(RlError::Config("empty training set".into()));
    }
    let mut policy = flow.clone();
    policy.store.reset_optimizer();
    let mut init_rng = stream(seed, "ppo/critic-init");
    let mut critic = match cfg.critic_init {
        CriticInit::Flow => CriticModel::from_flow(flow, &mut init_rng)?,
        CriticInit::Random => CriticModel::new(NetArch { out_dim: 2, ..flow.net.arch.clone() }, &mut init_rng)?,
    };
    let mut probe_rng = stream(seed, "ppo/probe");
    let probe = Probe {
        instances: (0..cfg.probe_instances.min(instances.len()))
            .map(|k| k * instances.len() / cfg.probe_instances.max(1))
            .collect(),
        starts: (0..cfg.group_size).map(|_| draw_prior(&mut probe_rng)).collect(),
    };
    let per_iter = (cfg.trajectories / cfg.group_size).max(1);
    let mut cycle: Vec<usize> = Vec::new();
    let mut order_rng = stream(seed, "ppo/instances");
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut chosen = Vec::with_capacity(per_iter);
        while chosen.len() < per_iter {
            if cycle.is_empty() {
                cycle = (0..instances.len()).collect();
                cycle.shuffle(&mut order_rng);
            }
            chosen.push(cycle.pop().unwrap());
        }
        let (probe_rot, probe_trans) = probe_returns(&policy, &critic, instances, &probe, cfg, exec)?;
        let slots: Vec<(usize, usize)> = chosen.iter().copied().enumerate().collect();
        let (p, c) = (&policy, &critic);
        let groups = exec.map(&slots, |&(slot, i)| {
            let mut rng = indexed_stream(seed, &format!("ppo/rollout/{iteration}"), slot as u64);
            let starts: Vec<PoseVec> = (0..cfg.group_size).map(|_| draw_prior(&mut rng)).collect();
            collect_group(p, c, &instances[i], i, &starts, cfg, &mut rng)
        });
        let buffer = RolloutBuffer {
            horizon: cfg.horizon,
            sigma: cfg.sigma,
            groups: groups.into_iter().collect::<Result<_, _>>()?,
        };
        let (ret_rot, ret_trans) = buffer.mean_returns();
        let stats = ppo_update(
            &mut policy,
            &mut critic,
            &buffer,
            instances,
            cfg,
            cfg.updates_policy(iteration),
            iteration,
            seed,
            exec,
        )?;
        log::info!(
            "ppo iter {} return rot {ret_rot:.4} trans {ret_trans:.4} probe {probe_rot:.4}/{probe_trans:.4} critic {:.4} kl {:.2e} clip {:.3}",
            iteration + 1,
            stats.critic_loss,
            stats.approx_kl,
            stats.clip_fraction
        );
        log.push(IterationLog {
            iteration: iteration + 1,
            mean_return_rot: ret_rot,
            mean_return_trans: ret_trans,
            policy_loss: stats.policy_loss,
            critic_loss: stats.critic_loss,
            probe_return_rot: probe_rot,
            probe_return_trans: probe_trans,
        });
    }
    Ok(PpoOutcome { policy, critic, log })
}
