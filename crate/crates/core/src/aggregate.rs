//! Value-guided ranking and aggregation of pose candidates.

use serde::{Deserialize, Serialize};

use crate::flowmatch::{step_time, PoseVec, SampleTrajectory};
use crate::geometry::{average_quaternions, GeometryError, Pose, UnitQuaternion, Vec3};
use crate::rlrefine::{CriticModel, PoseTarget, RlError};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub index: usize,
    pub pose: Pose,
    pub v_rot: f64,
    pub v_trans: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub horizon: usize,
    pub candidates: Vec<ScoredCandidate>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// The first `k` candidates.
    pub fn prefix(&self, k: usize) -> Self {
        Self { horizon: self.horizon, candidates: self.candidates[..k.min(self.k())].to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKey {
    Rot,
    Trans,
}

impl ScoredCandidate {
    pub fn score(&self, key: ScoreKey) -> f64 {
        match key {
            ScoreKey::Rot => self.v_rot,
            ScoreKey::Trans => self.v_trans,
        }
    }
}

/// Critic values of each trajectory at `step` (`H - 1` when `None`).
pub fn value_scores(
    critic: &CriticModel,
    context: &[f64],
    trajectories: &[SampleTrajectory],
    step: Option<usize>,
) -> Result<Vec<(f64, f64)>, RlError> {
    if trajectories.is_empty() {
        return Ok(Vec::new());
    }
    let h = trajectories[0].horizon();
    let s = step.unwrap_or(h.saturating_sub(1)).min(h);
    let poses: Vec<PoseVec> = trajectories.iter().map(|t| t.poses[s]).collect();
    critic.values(context, &poses, &vec![step_time(s, h); poses.len()])
}

pub fn value_score(
    critic: &CriticModel,
    context: &[f64],
    trajectory: &SampleTrajectory,
    step: Option<usize>,
) -> Result<(f64, f64), RlError> {
    Ok(value_scores(critic, context, std::slice::from_ref(trajectory), step)?[0])
}

pub fn candidate_set(trajectories: &[SampleTrajectory], scores: &[(f64, f64)]) -> CandidateSet {
    CandidateSet {
        horizon: trajectories.first().map_or(0, |t| t.horizon()),
        candidates: trajectories
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(index, (t, s))| ScoredCandidate { index, pose: t.final_pose(), v_rot: s.0, v_trans: s.1 })
            .collect(),
    }
}

/// `max(1, ceil(rho * k))`. A small slack keeps products such as
/// `0.6 * 10` from rounding up to the next integer.
pub fn keep_count(k: usize, rho: f64) -> usize {
    ((rho * k as f64 - 1e-9).ceil() as usize).clamp(1, k.max(1))
}

/// Indices into `candidates` sorted by descending score, ties by ascending
/// candidate index.
pub fn rank(candidates: &[ScoredCandidate], key: ScoreKey) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score(key)
            .total_cmp(&candidates[a].score(key))
            .then(candidates[a].index.cmp(&candidates[b].index))
    });
    order
}

pub fn select_top(candidates: &[ScoredCandidate], key: ScoreKey, rho: f64) -> Vec<&ScoredCandidate> {
    let n = keep_count(candidates.len(), rho);
    rank(candidates, key).into_iter().take(n).map(|i| &candidates[i]).collect()
}

pub fn mean_translation<'a>(cands: impl IntoIterator<Item = &'a ScoredCandidate>) -> Vec3 {
    let (sum, n) = cands.into_iter().fold((Vec3::zeros(), 0usize), |(s, n), c| (s + c.pose.t, n + 1));
    sum / n.max(1) as f64
}

pub fn mean_rotation<'a>(
    cands: impl IntoIterator<Item = &'a ScoredCandidate>,
) -> Result<UnitQuaternion, GeometryError> {
    let qs = cands.into_iter().map(|c| c.pose.quaternion()).collect::<Result<Vec<_>, _>>()?;
    average_quaternions(&qs)
}

/// Rotation from the `rho` fraction ranked best by `v_rot`, translation from
/// the fraction ranked best by `v_trans`.
pub fn aggregate_pose(candidates: &[ScoredCandidate], rho: f64) -> Result<Pose, GeometryError> {
    if candidates.is_empty() {
        return Err(GeometryError::EmptyAverage);
    }
    let q = mean_rotation(select_top(candidates, ScoreKey::Rot, rho))?;
    let t = mean_translation(select_top(candidates, ScoreKey::Trans, rho));
    Ok(Pose::from_quaternion(&q, t))
}

/// As [`aggregate_pose`], but a failed rotation average falls back to the
/// best-ranked candidate's rotation.
pub fn aggregate_pose_or_first(candidates: &[ScoredCandidate], rho: f64) -> Result<Pose, GeometryError> {
    match aggregate_pose(candidates, rho) {
        Err(GeometryError::DegenerateAverage(..)) | Err(GeometryError::DegenerateRotation(_)) => {
            let best = select_top(candidates, ScoreKey::Rot, rho)[0];
            let t = mean_translation(select_top(candidates, ScoreKey::Trans, rho));
            Ok(Pose { rot: best.pose.rot, t })
        }
        other => other,
    }
}

/// CSV rows: index, quaternion (wxyz), translation, scores and, when a
/// target is given, the rotation (deg) and translation (cm) errors.
pub fn candidate_dump_csv(set: &CandidateSet, target: Option<&PoseTarget>) -> String {
    let mut s = String::from("index,qw,qx,qy,qz,tx,ty,tz,v_rot,v_trans,err_rot_deg,err_trans_cm\n");
    for c in &set.candidates {
        let q = c.pose.quaternion().map(|q| q.to_array()).unwrap_or([f64::NAN; 4]);
        let (er, et) = target.map_or((f64::NAN, f64::NAN), |t| {
            let (r, m) = t.errors(&c.pose);
            (r, m * 100.0)
        });
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.index, q[0], q[1], q[2], q[3], c.pose.t.x, c.pose.t.y, c.pose.t.z, c.v_rot, c.v_trans, er, et
        ));
    }
    s
}
