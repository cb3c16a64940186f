//! Metrics, ablation runners and latency measurement.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate_pose_or_first, candidate_set, mean_rotation, mean_translation, value_scores, CandidateSet,
    ScoredCandidate,
};
use crate::exec::Exec;
use crate::flowmatch::{sample_candidates, FlowError, FlowModel, SampleTrajectory, VelocityField};
use crate::geometry::{GeometryError, Pose};
use crate::rlrefine::{CriticModel, PoseTarget, RlError};
use crate::rng::indexed_stream;
use crate::synthdata::{Category, Instance};

/// `(degrees, centimetres)` pairs, strictest first.
pub const THRESHOLDS: [(f64, f64); 4] = [(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)];
pub const THRESHOLD_LABELS: [&str; 4] = ["5deg2cm", "5deg5cm", "10deg2cm", "10deg5cm"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("value scoring needs a critic")]
    MissingCritic,
    #[error("invalid evaluation setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A sampler and, optionally, the critic used to rank its candidates.
#[derive(Debug, Clone)]
pub struct ModelStack {
    pub policy: FlowModel,
    pub critic: Option<CriticModel>,
}

/// `(rotation error in degrees, translation error in cm)`, using the
/// symmetry-aware angle when the instance has a symmetry axis.
pub fn score_instance(pred: &Pose, target: &PoseTarget) -> (f64, f64) {
    let (r, m) = target.errors(pred);
    (r, m * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Unranked mean of all candidates.
    Mean,
    /// Critic-ranked top fraction.
    Value,
    /// One candidate chosen uniformly at random.
    RandomSingle,
    /// Top fraction under random scores.
    RandomTop,
    /// Top fraction under the true errors (evaluation only).
    OracleTop,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Mean => "mean",
            Strategy::Value => "value-top",
            Strategy::RandomSingle => "random-single",
            Strategy::RandomTop => "random-top",
            Strategy::OracleTop => "oracle-top",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Strategy::Mean, Strategy::Value, Strategy::RandomSingle, Strategy::RandomTop, Strategy::OracleTop]
            .into_iter()
            .find(|x| x.name() == s)
    }
}

/// Candidates of one test instance, with critic scores when available.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidates {
    pub instance: usize,
    pub category: Category,
    pub target: PoseTarget,
    pub set: CandidateSet,
    /// Final poses' true `(deg, cm)` errors, by candidate.
    pub errors: Vec<(f64, f64)>,
}

fn with_scores(trajs: &[SampleTrajectory], scores: Option<Vec<(f64, f64)>>) -> CandidateSet {
    let scores = scores.unwrap_or_else(|| vec![(0.0, 0.0); trajs.len()]);
    candidate_set(trajs, &scores)
}

/// Deterministic (mean-action) candidates for one instance. Starting poses
/// come from the instance's own stream, so smaller `k` gives a prefix.
pub fn instance_candidates(
    stack: &ModelStack,
    inst: &Instance,
    index: usize,
    k: usize,
    horizon: usize,
    score_step: Option<usize>,
    seed: u64,
) -> Result<InstanceCandidates, EvalError> {
    let cloud = inst.cloud();
    let ctx = stack.policy.context(cloud.view())?;
    let mut rng = indexed_stream(seed, "eval/candidates", index as u64);
    let trajs = sample_candidates(&stack.policy, &ctx, k, horizon, &mut rng)?;
    let scores = match &stack.critic {
        Some(c) => Some(value_scores(c, &c.context(cloud.view())?, &trajs, score_step)?),
        None => None,
    };
    let set = with_scores(&trajs, scores);
    let target = PoseTarget::from_instance(inst);
    let errors = set.candidates.iter().map(|c| score_instance(&c.pose, &target)).collect();
    Ok(InstanceCandidates { instance: index, category: inst.category, target, set, errors })
}

pub fn generate_candidates(
    stack: &ModelStack,
    test: &[Instance],
    k: usize,
    horizon: usize,
    score_step: Option<usize>,
    seed: u64,
    exec: Exec,
) -> Result<Vec<InstanceCandidates>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if k == 0 || horizon == 0 {
        return Err(EvalError::Invalid("K and H must be positive".into()));
    }
    exec.map_range(test.len(), |i| instance_candidates(stack, &test[i], i, k, horizon, score_step, seed))
        .into_iter()
        .collect()
}

/// Final estimate from the first `k` candidates under `strategy`.
pub fn predict(
    cands: &InstanceCandidates,
    k: usize,
    rho: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<Pose, EvalError> {
    let set = cands.set.prefix(k);
    let pool = &set.candidates;
    let mut rng = indexed_stream(seed, &format!("eval/{}", strategy.name()), cands.instance as u64);
    let rescored = |f: &dyn Fn(usize) -> (f64, f64)| -> Vec<ScoredCandidate> {
        pool.iter()
            .map(|c| {
                let (r, t) = f(c.index);
                ScoredCandidate { v_rot: r, v_trans: t, ..c.clone() }
            })
            .collect()
    };
    let pose = match strategy {
        Strategy::Mean => {
            let q = match mean_rotation(pool) {
                Ok(q) => q,
                Err(GeometryError::DegenerateAverage(..)) => pool[0].pose.quaternion()?,
                Err(e) => return Err(e.into()),
            };
            Pose::from_quaternion(&q, mean_translation(pool))
        }
        Strategy::Value => aggregate_pose_or_first(pool, rho)?,
        Strategy::RandomSingle => pool[rng.random_range(0..pool.len())].pose,
        Strategy::RandomTop => {
            let draws: Vec<(f64, f64)> = (0..pool.len()).map(|_| (rng.random(), rng.random())).collect();
            aggregate_pose_or_first(&rescored(&|i| draws[i]), rho)?
        }
        Strategy::OracleTop => {
            let errs = &cands.errors;
            aggregate_pose_or_first(&rescored(&|i| (-errs[i].0, -errs[i].1)), rho)?
        }
    };
    Ok(pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub category: Category,
    pub count: usize,
    pub rates: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent, in [`THRESHOLDS`] order; per-category rates averaged over
    /// categories.
    pub rates: [f64; 4],
    pub per_category: Vec<CategoryRates>,
    pub mean_rot_err_deg: f64,
    pub mean_trans_err_cm: f64,
    pub k: usize,
    pub horizon: usize,
    pub rho: f64,
    pub strategy: Strategy,
    pub instances: usize,
    pub ms_per_instance: f64,
}

impl MetricsReport {
    pub fn strict(&self) -> f64 {
        self.rates[0]
    }

    pub fn relaxed(&self) -> f64 {
        self.rates[3]
    }

    pub fn without_latency(&self) -> Self {
        Self { ms_per_instance: 0.0, ..self.clone() }
    }
}

/// Success rates from per-instance errors: `ΔR < θ` and `ΔT < d`, averaged
/// within each category and then across categories.
pub fn summarize(results: &[(Category, f64, f64)]) -> Result<([f64; 4], Vec<CategoryRates>), EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut per_category = Vec::new();
    for cat in Category::ALL {
        let rows: Vec<_> = results.iter().filter(|r| r.0 == cat).collect();
        if rows.is_empty() {
            continue;
        }
        let rates = THRESHOLDS
            .map(|(deg, cm)| 100.0 * rows.iter().filter(|r| r.1 < deg && r.2 < cm).count() as f64 / rows.len() as f64);
        per_category.push(CategoryRates { category: cat, count: rows.len(), rates });
    }
    let n = per_category.len() as f64;
    let rates = std::array::from_fn(|j| per_category.iter().map(|c| c.rates[j]).sum::<f64>() / n);
    Ok((rates, per_category))
}

pub fn report_from_candidates(
    cache: &[InstanceCandidates],
    k: usize,
    rho: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let mut results = Vec::with_capacity(cache.len());
    for c in cache {
        let pose = predict(c, k, rho, strategy, seed)?;
        let (r, t) = score_instance(&pose, &c.target);
        results.push((c.category, r, t));
    }
    let (rates, per_category) = summarize(&results)?;
    let n = results.len() as f64;
    Ok(MetricsReport {
        rates,
        per_category,
        mean_rot_err_deg: results.iter().map(|r| r.1).sum::<f64>() / n,
        mean_trans_err_cm: results.iter().map(|r| r.2).sum::<f64>() / n,
        k: k.min(cache[0].set.k()),
        horizon: cache[0].set.horizon,
        rho,
        strategy,
        instances: results.len(),
        ms_per_instance: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub horizon: usize,
    pub rho: f64,
    /// Step whose state the critic scores; `None` means `H - 1`.
    pub score_step: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 50, horizon: 20, rho: 0.6, score_step: None }
    }
}

pub fn evaluate(
    stack: &ModelStack,
    test: &[Instance],
    cfg: &EvalConfig,
    strategy: Strategy,
    seed: u64,
    exec: Exec,
) -> Result<MetricsReport, EvalError> {
    if strategy == Strategy::Value && stack.critic.is_none() {
        return Err(EvalError::MissingCritic);
    }
    let start = Instant::now();
    let cache = generate_candidates(stack, test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
    let mut report = report_from_candidates(&cache, cfg.k, cfg.rho, strategy, seed)?;
    report.ms_per_instance = start.elapsed().as_secs_f64() * 1e3 / test.len() as f64;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// `(axis, value)` pairs identifying the cell.
    pub labels: Vec<(String, String)>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub name: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major, `rows.len() * cols.len()` cells.
    pub cells: Vec<GridCell>,
}

impl AblationGrid {
    pub fn cell(&self, row: usize, col: usize) -> &MetricsReport {
        &self.cells[row * self.cols.len() + col].report
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// One comma-separated matrix of the given threshold's rates.
    pub fn to_csv_matrix(&self, threshold: usize) -> String {
        let mut s = format!("{}\\{},{}\n", self.name, THRESHOLD_LABELS[threshold], self.cols.join(","));
        for (r, name) in self.rows.iter().enumerate() {
            let vals: Vec<String> =
                (0..self.cols.len()).map(|c| format!("{:.4}", self.cell(r, c).rates[threshold])).collect();
            s.push_str(&format!("{name},{}\n", vals.join(",")));
        }
        s
    }

    /// One JSON object per cell.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(&c.report).expect("report serializes");
                for (axis, value) in &c.labels {
                    v[axis.as_str()] = serde_json::Value::String(value.clone());
                }
                v.to_string() + "\n"
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{}\n", self.name);
        s.push_str(&format!(
            "{:<34} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "cell",
            THRESHOLD_LABELS[0],
            THRESHOLD_LABELS[1],
            THRESHOLD_LABELS[2],
            THRESHOLD_LABELS[3],
            "rot_deg",
            "trans_cm"
        ));
        for c in &self.cells {
            let label: Vec<String> = c.labels.iter().map(|(a, v)| format!("{a}={v}")).collect();
            let r = &c.report;
            s.push_str(&format!(
                "{:<34} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.3}\n",
                label.join(" "),
                r.rates[0],
                r.rates[1],
                r.rates[2],
                r.rates[3],
                r.mean_rot_err_deg,
                r.mean_trans_err_cm
            ));
        }
        s
    }
}

/// K-by-rho grid of value-guided aggregation. One candidate cache at the
/// largest K serves every cell; smaller K use its prefix.
#[allow(clippy::too_many_arguments)]
pub fn run_grid_k_rho(
    stack: &ModelStack,
    test: &[Instance],
    ks: &[usize],
    rhos: &[f64],
    horizon: usize,
    score_step: Option<usize>,
    seed: u64,
    exec: Exec,
) -> Result<AblationGrid, EvalError> {
    if stack.critic.is_none() {
        return Err(EvalError::MissingCritic);
    }
    let k_max = ks.iter().copied().max().ok_or_else(|| EvalError::Invalid("no K values".into()))?;
    let cache = generate_candidates(stack, test, k_max, horizon, score_step, seed, exec)?;
    grid_from_cache(&cache, ks, rhos, seed)
}

pub fn grid_from_cache(
    cache: &[InstanceCandidates],
    ks: &[usize],
    rhos: &[f64],
    seed: u64,
) -> Result<AblationGrid, EvalError> {
    let mut cells = Vec::new();
    for &k in ks {
        for &rho in rhos {
            cells.push(GridCell {
                labels: vec![("K".into(), k.to_string()), ("rho".into(), format!("{rho}"))],
                report: report_from_candidates(cache, k, rho, Strategy::Value, seed)?,
            });
        }
    }
    Ok(AblationGrid {
        name: "K x rho".into(),
        rows: ks.iter().map(|k| format!("K={k}")).collect(),
        cols: rhos.iter().map(|r| format!("rho={r}")).collect(),
        cells,
    })
}

pub fn ranking_from_cache(
    cache: &[InstanceCandidates],
    strategies: &[Strategy],
    k: usize,
    rho: f64,
    seed: u64,
) -> Result<AblationGrid, EvalError> {
    let cells = strategies
        .iter()
        .map(|&s| {
            Ok(GridCell {
                labels: vec![("strategy".into(), s.name().into())],
                report: report_from_candidates(cache, k, rho, s, seed)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(AblationGrid {
        name: "ranking".into(),
        rows: strategies.iter().map(|s| s.name().to_string()).collect(),
        cols: vec!["rate".into()],
        cells,
    })
}

pub const RANKING_STRATEGIES: [Strategy; 4] =
    [Strategy::RandomSingle, Strategy::RandomTop, Strategy::Value, Strategy::OracleTop];

#[allow(clippy::too_many_arguments)]
pub fn run_ranking_ablation(
    stack: &ModelStack,
    test: &[Instance],
    strategies: &[Strategy],
    cfg: &EvalConfig,
    seed: u64,
    exec: Exec,
) -> Result<AblationGrid, EvalError> {
    if stack.critic.is_none() {
        return Err(EvalError::MissingCritic);
    }
    let cache = generate_candidates(stack, test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
    ranking_from_cache(&cache, strategies, cfg.k, cfg.rho, seed)
}

/// Method (flow, rl) by aggregation (mean, value). Both methods are ranked by
/// the same critic.
pub fn flow_vs_rl_from_caches(
    flow: &[InstanceCandidates],
    rl: &[InstanceCandidates],
    k: usize,
    rho: f64,
    seed: u64,
) -> Result<AblationGrid, EvalError> {
    let mut cells = Vec::new();
    for (method, cache) in [("flow", flow), ("rl", rl)] {
        for strategy in [Strategy::Mean, Strategy::Value] {
            cells.push(GridCell {
                labels: vec![("method".into(), method.into()), ("aggregation".into(), strategy.name().into())],
                report: report_from_candidates(cache, k, rho, strategy, seed)?,
            });
        }
    }
    Ok(AblationGrid {
        name: "method x aggregation".into(),
        rows: vec!["flow".into(), "rl".into()],
        cols: vec!["mean".into(), "value-top".into()],
        cells,
    })
}

pub fn run_flow_vs_rl(
    flow: &FlowModel,
    rl: &ModelStack,
    test: &[Instance],
    cfg: &EvalConfig,
    seed: u64,
    exec: Exec,
) -> Result<AblationGrid, EvalError> {
    let critic = rl.critic.clone().ok_or(EvalError::MissingCritic)?;
    let flow_stack = ModelStack { policy: flow.clone(), critic: Some(critic) };
    let flow_cache = generate_candidates(&flow_stack, test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
    let rl_cache = generate_candidates(rl, test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
    flow_vs_rl_from_caches(&flow_cache, &rl_cache, cfg.k, cfg.rho, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub horizon: usize,
    pub median_ms: f64,
    pub strict_rate: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median single-instance latency (encode, K rollouts, scoring,
/// aggregation) for each horizon, measured sequentially after `warmup`
/// untimed instances, plus the strict success rate.
pub fn bench_speed(
    stack: &ModelStack,
    test: &[Instance],
    horizons: &[usize],
    k: usize,
    rho: f64,
    warmup: usize,
    seed: u64,
) -> Result<Vec<SpeedRow>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let strategy = if stack.critic.is_some() { Strategy::Value } else { Strategy::Mean };
    let mut rows = Vec::new();
    for &h in horizons {
        for inst in test.iter().take(warmup) {
            let c = instance_candidates(stack, inst, 0, k, h, None, seed)?;
            predict(&c, k, rho, strategy, seed)?;
        }
        let mut times = Vec::with_capacity(test.len());
        let mut results = Vec::with_capacity(test.len());
        for (i, inst) in test.iter().enumerate() {
            let start = Instant::now();
            let c = instance_candidates(stack, inst, i, k, h, None, seed)?;
            let pose = predict(&c, k, rho, strategy, seed)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            let (r, t) = score_instance(&pose, &c.target);
            results.push((inst.category, r, t));
        }
        let (rates, _) = summarize(&results)?;
        rows.push(SpeedRow { horizon: h, median_ms: median(times), strict_rate: rates[0] });
    }
    Ok(rows)
}

pub fn speed_table(rows: &[SpeedRow]) -> String {
    let mut s = format!("{:>4} {:>12} {:>10}\n", "H", "ms/instance", "5deg2cm");
    for r in rows {
        s.push_str(&format!("{:>4} {:>12.3} {:>10.2}\n", r.horizon, r.median_ms, r.strict_rate));
    }
    s
}

/// Circular variance `mean_k (1 - cos theta_k)` of the candidates' rotation
/// errors (symmetry-aware when applicable) about the ground truth.
pub fn candidate_spread(cands: &InstanceCandidates) -> f64 {
    let n = cands.errors.len().max(1) as f64;
    cands.errors.iter().map(|(deg, _)| 1.0 - deg.to_radians().cos()).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_thresholds_are_strict() {
        let res = vec![(Category::Box, 7.0, 1.0), (Category::Box, 5.0, 1.0)];
        let (rates, _) = summarize(&res).unwrap();
        assert_eq!(rates, [0.0, 0.0, 100.0, 100.0]);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn category_rates_are_averaged_over_categories() {
        let mut res = vec![(Category::Box, 1.0, 1.0); 3];
        res.push((Category::Cylinder, 50.0, 1.0));
        let (rates, per) = summarize(&res).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(rates[0], 50.0);
    }
}
