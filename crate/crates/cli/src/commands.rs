use std::path::{Path, PathBuf};
use std::time::Instant;

use rfmpose::evalbench::{
    bench_speed, candidate_spread, evaluate, flow_vs_rl_from_caches, generate_candidates, run_grid_k_rho,
    run_ranking_ablation, speed_table, AblationGrid, GridCell, ModelStack, Strategy, RANKING_STRATEGIES,
    THRESHOLD_LABELS,
};
use rfmpose::flowmatch::{loss_curve_csv, train_flow, FlowModel};
use rfmpose::rlrefine::{reward_curve_csv, train_ppo, CriticModel};
use rfmpose::synthdata::{build_dataset, load_dataset, Category, DatasetConfig, DatasetFile, Split};
use rfmpose::Exec;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{Manifest, RunRecord, CONFIG_ECHO_FILE};
use crate::{current_workers, Ablation, Command, ModelArgs, SplitArg};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const FLOW_FILE: &str = "flow.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";

struct Ctx<'a> {
    cfg: &'a RunConfig,
    exec: Exec,
    rec: RunRecord,
}

/// Picks the flag value over the config path and checks the file exists.
fn require(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str, key: &str) -> Result<PathBuf, CliError> {
    let path = flag
        .clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} given (--{key} or paths.{key})")))?;
    if !path.is_file() {
        return Err(CliError::Config(format!("{what} not found: {}", path.display())));
    }
    Ok(path)
}

pub fn dispatch(
    command: &Command,
    cfg: &RunConfig,
    config_path: Option<&Path>,
    deterministic: bool,
) -> Result<Manifest, CliError> {
    let start = Instant::now();
    let out =
        cfg.paths.out.clone().ok_or_else(|| CliError::Config("no output directory (--out or paths.out)".into()))?;
    // Check every referenced input before creating anything.
    let inputs = resolve_inputs(command, cfg)?;
    inputs.check_outside(&out, config_path)?;
    let rec = RunRecord::create(&out)?;
    let exec = if deterministic { Exec::Sequential } else { Exec::Parallel };
    let mut effective = cfg.clone();
    let mut ctx = Ctx { cfg, exec, rec };
    match command {
        Command::GenData { split, count } => {
            if let Some(s) = split {
                effective.data.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                };
            }
            if let Some(c) = count {
                effective.data.count = *c;
            }
            effective.validate()?;
            ctx.cfg = &effective;
            gen_data(&mut ctx)?
        }
        Command::TrainFlow { .. } => train_flow_cmd(&mut ctx, &inputs)?,
        Command::TrainPpo { .. } => train_ppo_cmd(&mut ctx, &inputs)?,
        Command::Eval { strategy, .. } => eval_cmd(&mut ctx, &inputs, strategy.as_deref())?,
        Command::Ablate { which, .. } => ablate_cmd(&mut ctx, &inputs, *which)?,
    }
    let Ctx { rec, cfg, .. } = ctx;
    let mut echo = cfg.clone();
    echo.paths = inputs.as_paths(&out);
    std::fs::write(rec.root.join(CONFIG_ECHO_FILE), echo.to_toml()).map_err(|e| CliError::io(CONFIG_ECHO_FILE, e))?;
    let manifest = rec.finish(
        &command.name(),
        cfg.seed,
        deterministic,
        current_workers(),
        cfg.content_hash(),
        start.elapsed().as_secs_f64(),
    )?;
    log::info!("{} done in {:.1}s, digest {}", manifest.command, manifest.wall_time_s, &manifest.digest[..16]);
    Ok(manifest)
}

#[derive(Default)]
struct Inputs {
    dataset: Option<PathBuf>,
    test: Option<PathBuf>,
    flow: Option<PathBuf>,
    policy: Option<PathBuf>,
    critic: Option<PathBuf>,
}

impl Inputs {
    fn all(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.dataset, &self.test, &self.flow, &self.policy, &self.critic].into_iter().flatten()
    }

    /// Outputs may not land next to an input, so no run can overwrite one.
    fn check_outside(&self, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
        let Ok(out) = out.canonicalize() else {
            return Ok(());
        };
        for p in self.all().map(PathBuf::as_path).chain(config) {
            let parent = p.canonicalize().ok().and_then(|c| c.parent().map(Path::to_path_buf));
            if parent.as_deref() == Some(out.as_path()) {
                return Err(CliError::Config(format!(
                    "output directory {} holds input {}",
                    out.display(),
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn as_paths(&self, out: &Path) -> crate::config::Paths {
        crate::config::Paths {
            dataset: self.dataset.clone(),
            test: self.test.clone(),
            flow: self.flow.clone(),
            policy: self.policy.clone(),
            critic: self.critic.clone(),
            out: Some(out.to_path_buf()),
        }
    }
}

fn model_inputs(m: &ModelArgs, cfg: &RunConfig, critic_required: bool) -> Result<Inputs, CliError> {
    let p = &cfg.paths;
    let critic = if critic_required || m.critic.is_some() || p.critic.is_some() {
        Some(require(&m.critic, &p.critic, "critic checkpoint", "critic")?)
    } else {
        None
    };
    Ok(Inputs {
        policy: Some(require(&m.policy, &p.policy, "policy checkpoint", "policy")?),
        critic,
        test: Some(require(&m.test, &p.test, "test dataset", "test")?),
        ..Default::default()
    })
}

fn resolve_inputs(command: &Command, cfg: &RunConfig) -> Result<Inputs, CliError> {
    let p = &cfg.paths;
    match command {
        Command::GenData { .. } => Ok(Inputs::default()),
        Command::TrainFlow { dataset } => {
            Ok(Inputs { dataset: Some(require(dataset, &p.dataset, "dataset", "dataset")?), ..Default::default() })
        }
        Command::TrainPpo { flow, dataset } => Ok(Inputs {
            flow: Some(require(flow, &p.flow, "flow checkpoint", "flow")?),
            dataset: Some(require(dataset, &p.dataset, "dataset", "dataset")?),
            ..Default::default()
        }),
        Command::Eval { models, strategy } => {
            let needs_critic = strategy.as_deref() == Some(Strategy::Value.name());
            model_inputs(models, cfg, needs_critic)
        }
        Command::Ablate { which, models, flow } => {
            let needs_critic = *which != Ablation::Speed;
            let mut inputs = model_inputs(models, cfg, needs_critic)?;
            if *which == Ablation::FlowVsRl {
                inputs.flow = Some(require(flow, &p.flow, "flow checkpoint", "flow")?);
            }
            Ok(inputs)
        }
    }
}

fn load_data(ctx: &mut Ctx, path: &Path) -> Result<DatasetFile, CliError> {
    ctx.rec.input(path)?;
    let data = load_dataset(path).map_err(|e| CliError::io(path.display(), e))?;
    if data.instances.is_empty() {
        return Err(CliError::Config(format!("dataset {} is empty", path.display())));
    }
    Ok(data)
}

fn load_flow(ctx: &mut Ctx, path: &Path) -> Result<FlowModel, CliError> {
    ctx.rec.input(path)?;
    FlowModel::load(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_critic(ctx: &mut Ctx, path: &Path) -> Result<CriticModel, CliError> {
    ctx.rec.input(path)?;
    CriticModel::load(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_stack(ctx: &mut Ctx, inputs: &Inputs) -> Result<(ModelStack, Vec<rfmpose::synthdata::Instance>), CliError> {
    let policy = load_flow(ctx, inputs.policy.as_deref().expect("resolved"))?;
    let critic = match &inputs.critic {
        Some(p) => Some(load_critic(ctx, p)?),
        None => None,
    };
    let test = load_data(ctx, inputs.test.as_deref().expect("resolved"))?;
    Ok((ModelStack { policy, critic }, test.instances))
}

fn gen_data(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg: &DatasetConfig = &ctx.cfg.data;
    let data = build_dataset(cfg, ctx.cfg.seed, ctx.exec)?;
    let mut bytes = Vec::new();
    data.write_to(&mut bytes)?;
    ctx.rec.write(DATASET_FILE, &bytes)?;
    let mix: Vec<String> = data.header.category_mix.iter().map(|(c, n)| format!("{}={n}", c.name())).collect();
    println!(
        "{} {} instances ({}) -> {}",
        data.header.split.name(),
        data.instances.len(),
        mix.join(", "),
        ctx.rec.root.join(DATASET_FILE).display()
    );
    Ok(())
}

fn train_flow_cmd(ctx: &mut Ctx, inputs: &Inputs) -> Result<(), CliError> {
    let data = load_data(ctx, inputs.dataset.as_deref().expect("resolved"))?;
    let (model, logs) = train_flow(&data.instances, ctx.cfg.arch.clone(), &ctx.cfg.flow, ctx.cfg.seed, ctx.exec)?;
    model.save(&ctx.rec.path(FLOW_FILE)?)?;
    ctx.rec.record(FLOW_FILE)?;
    ctx.rec.write("loss_curve.csv", loss_curve_csv(&logs).as_bytes())?;
    let (first, last) = (logs[0].loss, logs[logs.len() - 1].loss);
    println!("flow loss {first:.5} -> {last:.5} ({:.1}% of epoch 1) over {} epochs", 100.0 * last / first, logs.len());
    Ok(())
}

fn train_ppo_cmd(ctx: &mut Ctx, inputs: &Inputs) -> Result<(), CliError> {
    let flow = load_flow(ctx, inputs.flow.as_deref().expect("resolved"))?;
    let data = load_data(ctx, inputs.dataset.as_deref().expect("resolved"))?;
    let out = train_ppo(&flow, &data.instances, &ctx.cfg.ppo, ctx.cfg.seed, ctx.exec)?;
    out.policy.save(&ctx.rec.path(POLICY_FILE)?)?;
    ctx.rec.record(POLICY_FILE)?;
    out.critic.save(&ctx.rec.path(CRITIC_FILE)?)?;
    ctx.rec.record(CRITIC_FILE)?;
    ctx.rec.write("reward_curve.csv", reward_curve_csv(&out.log).as_bytes())?;
    if let (Some(a), Some(b)) = (out.log.first(), out.log.last()) {
        println!(
            "probe return rot {:.3} -> {:.3}, trans {:.3} -> {:.3} over {} iterations",
            a.probe_return_rot,
            b.probe_return_rot,
            a.probe_return_trans,
            b.probe_return_trans,
            out.log.len()
        );
    }
    Ok(())
}

/// Table, JSONL and one CSV matrix per threshold for a grid.
fn write_grid(ctx: &mut Ctx, stem: &str, grid: &AblationGrid) -> Result<(), CliError> {
    let cleaned = AblationGrid {
        cells: grid
            .cells
            .iter()
            .map(|c| GridCell { labels: c.labels.clone(), report: c.report.without_latency() })
            .collect(),
        ..grid.clone()
    };
    let table = cleaned.to_table();
    print!("{table}");
    ctx.rec.write(&format!("{stem}.txt"), table.as_bytes())?;
    ctx.rec.write(&format!("{stem}.jsonl"), cleaned.to_jsonl().as_bytes())?;
    for (i, label) in THRESHOLD_LABELS.iter().enumerate() {
        ctx.rec.write(&format!("{stem}_{label}.csv"), cleaned.to_csv_matrix(i).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Latency {
    ms_per_instance: f64,
    instances: usize,
}

fn eval_cmd(ctx: &mut Ctx, inputs: &Inputs, strategy: Option<&str>) -> Result<(), CliError> {
    let (stack, test) = load_stack(ctx, inputs)?;
    let strategy = match strategy {
        Some(s) => Strategy::parse(s).ok_or_else(|| CliError::Config(format!("unknown strategy `{s}`")))?,
        None if stack.critic.is_some() => Strategy::Value,
        None => Strategy::Mean,
    };
    let report = evaluate(&stack, &test, &ctx.cfg.eval, strategy, ctx.cfg.seed, ctx.exec)?;
    let latency = Latency { ms_per_instance: report.ms_per_instance, instances: report.instances };
    let labels = vec![("strategy".to_string(), strategy.name().to_string())];
    let grid = AblationGrid {
        name: "eval".into(),
        rows: vec![strategy.name().into()],
        cols: vec![format!("K{}_H{}_rho{}", ctx.cfg.eval.k, ctx.cfg.eval.horizon, ctx.cfg.eval.rho)],
        cells: vec![GridCell { labels, report: report.clone() }],
    };
    write_grid(ctx, "report", &grid)?;
    for c in &report.per_category {
        println!(
            "  {:<10} n={:<5} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            c.category.name(),
            c.count,
            c.rates[0],
            c.rates[1],
            c.rates[2],
            c.rates[3]
        );
    }
    println!("{:.2} ms/instance", latency.ms_per_instance);
    ctx.rec.write_unhashed("latency.json", &serde_json::to_vec_pretty(&latency).expect("serializes"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SpreadSummary {
    pub instances: usize,
    pub rl_tighter: usize,
    pub fraction: f64,
}

fn ablate_cmd(ctx: &mut Ctx, inputs: &Inputs, which: Ablation) -> Result<(), CliError> {
    let (stack, test) = load_stack(ctx, inputs)?;
    let (cfg, seed, exec) = (ctx.cfg.eval, ctx.cfg.seed, ctx.exec);
    match which {
        Ablation::Grid => {
            let g = &ctx.cfg.ablate;
            let grid = run_grid_k_rho(&stack, &test, &g.ks, &g.rhos, cfg.horizon, cfg.score_step, seed, exec)?;
            write_grid(ctx, "grid", &grid)
        }
        Ablation::Ranking => {
            let grid = run_ranking_ablation(&stack, &test, &RANKING_STRATEGIES, &cfg, seed, exec)?;
            write_grid(ctx, "ranking", &grid)
        }
        Ablation::FlowVsRl => {
            let flow = load_flow(ctx, inputs.flow.as_deref().expect("resolved"))?;
            let flow_stack = ModelStack { policy: flow, critic: stack.critic.clone() };
            let fc = generate_candidates(&flow_stack, &test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
            let rc = generate_candidates(&stack, &test, cfg.k, cfg.horizon, cfg.score_step, seed, exec)?;
            write_grid(ctx, "flow_vs_rl", &flow_vs_rl_from_caches(&fc, &rc, cfg.k, cfg.rho, seed)?)?;
            // Circular variance of candidate rotations about the
            // symmetry-aware ground truth, on the cylinders.
            let mut csv = String::from("instance,flow_spread,rl_spread\n");
            let (mut n, mut tighter) = (0, 0);
            for (f, r) in fc.iter().zip(&rc).filter(|(f, _)| f.category == Category::Cylinder) {
                let (sf, sr) = (candidate_spread(f), candidate_spread(r));
                csv.push_str(&format!("{},{sf},{sr}\n", f.instance));
                n += 1;
                tighter += usize::from(sr < sf);
            }
            let summary =
                SpreadSummary { instances: n, rl_tighter: tighter, fraction: tighter as f64 / n.max(1) as f64 };
            println!("cylinder spread: rl tighter on {tighter}/{n}");
            ctx.rec.write("spread.csv", csv.as_bytes())?;
            ctx.rec.write("spread.json", &serde_json::to_vec_pretty(&summary).expect("serializes"))
        }
        Ablation::Speed => {
            let g = &ctx.cfg.ablate;
            let n = g.speed_instances.min(test.len());
            let rows = bench_speed(&stack, &test[..n], &g.speed_horizons, cfg.k, cfg.rho, g.speed_warmup, seed)?;
            let table = speed_table(&rows);
            print!("{table}");
            let accuracy: String = std::iter::once("horizon,5deg2cm\n".to_string())
                .chain(rows.iter().map(|r| format!("{},{:.4}\n", r.horizon, r.strict_rate)))
                .collect();
            ctx.rec.write("speed_accuracy.csv", accuracy.as_bytes())?;
            let jsonl: String = rows.iter().map(|r| serde_json::to_string(r).expect("serializes") + "\n").collect();
            ctx.rec.write_unhashed("speed.txt", table.as_bytes())?;
            ctx.rec.write_unhashed("speed.jsonl", jsonl.as_bytes())
        }
    }
}
