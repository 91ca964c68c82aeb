//! `vecplan` command-line runner.

mod config;
mod error;
mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vecplan::ablation::{ablation_report, AblationSetup};
use vecplan::constraints::{total_planning_loss, LossBreakdown};
use vecplan::interact::InteractionParams;
use vecplan::learning::{scenario_set, train, Objective};
use vecplan::metrics::{evaluate, metrics_csv, metrics_table};
use vecplan::scene::{load_scenario, scenario_to_string, Scenario};
use vecplan::simulator::{plan_once, run_closed_loop, Planner, RolloutLog};

use config::{PlannerKind, RunConfig, OUTPUT_ROOT_ENV};
use error::CliError;
use output::Sink;

/// Seed stream for scenario sets built by the CLI.
const SCENARIO_STREAM: u64 = 5;

#[derive(Parser)]
#[command(
    name = "vecplan",
    version,
    about = "Vectorized planning: constraints, training, simulation and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Recompute and verify byte-identity against existing outputs.
    #[arg(long, global = true)]
    check: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args, Clone)]
struct PlannerArgs {
    #[arg(long, value_enum)]
    planner: Option<PlannerKind>,
    /// Model checkpoint for `--planner model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scenario files or directories of `*.json` files. Without any, a
    /// seeded set of `scenarios` scenes is generated.
    #[arg(long, num_args = 1..)]
    scenarios: Vec<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded scenario files.
    Generate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Plan for each scenario and report the per-term losses.
    Plan(PlannerArgs),
    /// Train the interaction planner; writes a checkpoint and a training log.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop rollouts with per-tick logs and plotting traces.
    Simulate(PlannerArgs),
    /// Open-loop L2 / collision report over a scenario set.
    Evaluate(PlannerArgs),
    /// Train and score every ablation arm.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(sink_root) => {
            log::info!("outputs in {}", sink_root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &cli.common.output_dir {
        overrides.push(format!(
            "output_dir={}",
            toml_string(&dir.to_string_lossy())
        ));
    }
    match &cli.command {
        Command::Generate { count: Some(n) } => overrides.push(format!("scenarios={n}")),
        Command::Train { epochs: Some(e) } => overrides.push(format!("train.epochs={e}")),
        Command::Plan(p) | Command::Simulate(p) | Command::Evaluate(p) => {
            if let Some(kind) = p.planner {
                let name = serde_json::to_value(kind).expect("planner kind");
                overrides.push(format!("planner.kind={}", name.as_str().unwrap()));
            }
            if let Some(c) = &p.checkpoint {
                overrides.push(format!(
                    "planner.checkpoint={}",
                    toml_string(&c.to_string_lossy())
                ));
            }
            if let Some(n) = p.count {
                overrides.push(format!("scenarios={n}"));
            }
        }
        _ => {}
    }
    overrides.extend(cli.common.overrides.iter().cloned());
    let config = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;

    let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let mut sink = Sink::new(config.output_root(env_root.as_deref()), cli.common.check)?;
    let name = match &cli.command {
        Command::Generate { .. } => "generate",
        Command::Plan(_) => "plan",
        Command::Train { .. } => "train",
        Command::Simulate(_) => "simulate",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate => "ablate",
    };
    sink.emit(format!("{name}.config.toml"), config.to_toml().as_bytes())?;

    match &cli.command {
        Command::Generate { .. } => generate(&config, &mut sink)?,
        Command::Plan(p) => plan(&config, p, &mut sink)?,
        Command::Train { .. } => train_cmd(&config, &mut sink)?,
        Command::Simulate(p) => simulate(&config, p, &mut sink)?,
        Command::Evaluate(p) => evaluate_cmd(&config, p, &mut sink)?,
        Command::Ablate => ablate(&config, &mut sink)?,
    }
    if cli.common.check {
        println!("check ok: {} files identical", sink.emitted().len());
    }
    Ok(sink.root().to_path_buf())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn generated_set(config: &RunConfig) -> Result<Vec<(String, Scenario)>, CliError> {
    let set = scenario_set(
        config.scenarios,
        config.seed,
        SCENARIO_STREAM,
        &config.generator,
    )?;
    Ok(set
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("scenario_{i:04}"), s))
        .collect())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    vecplan::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// Named scenarios from files and directories, or a generated set.
fn load_scenarios(
    config: &RunConfig,
    paths: &[PathBuf],
) -> Result<Vec<(String, Scenario)>, CliError> {
    if paths.is_empty() {
        return generated_set(config);
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_error(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let s = load_scenario(f)?;
            let name = f
                .file_stem()
                .map_or_else(|| "scenario".into(), |n| n.to_string_lossy().into_owned());
            Ok((name, s))
        })
        .collect()
}

fn build_planner(config: &RunConfig) -> Result<Planner, CliError> {
    Ok(match config.planner.kind {
        PlannerKind::Model => {
            let path = config.planner.checkpoint.as_ref().ok_or_else(|| {
                vecplan::Error::Config("planner.kind = model needs planner.checkpoint".into())
            })?;
            Planner::Model {
                params: InteractionParams::load(path, &config.interact)?,
                config: config.interact.clone(),
            }
        }
        PlannerKind::Refine => Planner::Refine {
            constraints: config.constraints.clone(),
            weights: config.weights.clone(),
            refine: config.simulator.refine.clone(),
        },
        PlannerKind::Expert => Planner::Expert,
        PlannerKind::ConstantVelocity => Planner::ConstantVelocity,
    })
}

fn generate(config: &RunConfig, sink: &mut Sink) -> Result<(), CliError> {
    let set = generated_set(config)?;
    for (name, s) in &set {
        sink.emit(
            format!("scenarios/{name}.json"),
            scenario_to_string(s).as_bytes(),
        )?;
    }
    println!(
        "generated {} scenarios in {}",
        set.len(),
        sink.root().join("scenarios").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PlanRecord<'a> {
    scenario: &'a str,
    planner: PlannerKind,
    waypoints: Vec<[f64; 2]>,
    losses: LossBreakdown,
    total: f64,
}

fn plan(config: &RunConfig, args: &PlannerArgs, sink: &mut Sink) -> Result<(), CliError> {
    let scenarios = load_scenarios(config, &args.scenarios)?;
    let planner = build_planner(config)?;
    let mut summary = String::from("scenario,l_col,l_bd,l_dir,l_imi,total\n");
    for (name, s) in &scenarios {
        let p = plan_once(s, &planner)?;
        let (total, losses) = total_planning_loss(&p, s, &config.constraints, &config.weights)?;
        let record = PlanRecord {
            scenario: name,
            planner: config.planner.kind,
            waypoints: p.waypoints.iter().map(|w| [w.x, w.y]).collect(),
            losses,
            total: total.value,
        };
        let mut text = serde_json::to_string_pretty(&record).expect("plan record serializes");
        text.push('\n');
        sink.emit(format!("plans/{name}.json"), text.as_bytes())?;
        writeln!(
            summary,
            "{name},{},{},{},{},{}",
            losses.collision, losses.boundary, losses.direction, losses.imitation, total.value
        )
        .unwrap();
    }
    sink.emit("plans/summary.csv", summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn train_cmd(config: &RunConfig, sink: &mut Sink) -> Result<(), CliError> {
    let objective = Objective {
        interact: config.interact.clone(),
        constraints: config.constraints.clone(),
        weights: config.weights.clone(),
        focal_gamma: config.train.focal_gamma,
        focal_alpha: config.train.focal_alpha,
    };
    let outcome = train(&config.train, &config.generator, &objective)?;
    sink.emit(
        "model.ckpt",
        outcome.params.to_checkpoint_string().as_bytes(),
    )?;
    sink.emit("trainlog.csv", outcome.log.to_delimited().as_bytes())?;
    if !outcome.log.objective_trend_ok(config.train.warmup_epochs) {
        eprintln!("warning: training objective moving average rose after warmup");
    }
    if let (Some(first), Some(last)) = (outcome.log.epochs.first(), outcome.log.epochs.last()) {
        println!(
            "trained {} epochs: val L2 {:.4} -> {:.4}, val collision {:.2}% -> {:.2}%",
            outcome.log.epochs.len(),
            first.val_l2,
            last.val_l2,
            first.val_collision,
            last.val_collision
        );
    }
    Ok(())
}

/// Per-tick records tagged by entity, for external plotting.
fn trace(scenario: &Scenario, log: &RolloutLog) -> String {
    let mut out = String::from("tick,entity,id,index,x,y,heading\n");
    for (i, m) in scenario.map.iter().enumerate() {
        let class = serde_json::to_value(m.class).expect("class");
        for (k, p) in m.points.points().iter().enumerate() {
            writeln!(
                out,
                "0,map,{i}:{},{k},{},{},",
                class.as_str().unwrap(),
                p.x,
                p.y
            )
            .unwrap();
        }
    }
    let e = &scenario.ego;
    writeln!(
        out,
        "0,ego,0,0,{},{},{}",
        e.position.x, e.position.y, e.heading
    )
    .unwrap();
    for (i, a) in scenario.agents.iter().enumerate() {
        writeln!(
            out,
            "0,agent,{i},0,{},{},{}",
            a.position.x, a.position.y, a.heading
        )
        .unwrap();
    }
    for r in &log.records {
        for (k, p) in r.plan.iter().enumerate() {
            writeln!(out, "{},plan,0,{k},{},{},", r.tick, p.x, p.y).unwrap();
        }
        writeln!(
            out,
            "{},ego,0,0,{},{},{}",
            r.tick, r.ego_position.x, r.ego_position.y, r.ego_heading
        )
        .unwrap();
        for (i, a) in r.agents.iter().enumerate() {
            writeln!(
                out,
                "{},agent,{i},0,{},{},{}",
                r.tick, a.position.x, a.position.y, a.heading
            )
            .unwrap();
        }
    }
    out
}

fn simulate(config: &RunConfig, args: &PlannerArgs, sink: &mut Sink) -> Result<(), CliError> {
    let scenarios = load_scenarios(config, &args.scenarios)?;
    let planner = build_planner(config)?;
    let mut summary = String::from("scenario,ticks,collision,overstep\n");
    let (mut collisions, mut oversteps) = (0, 0);
    for (name, s) in &scenarios {
        let log = run_closed_loop(
            s,
            &planner,
            &config.constraints,
            &config.weights,
            &config.simulator,
        )?;
        sink.emit(
            format!("rollouts/{name}.csv"),
            log.to_delimited().as_bytes(),
        )?;
        sink.emit(
            format!("traces/{name}.trace.csv"),
            trace(s, &log).as_bytes(),
        )?;
        collisions += log.any_collision() as usize;
        oversteps += log.any_overstep() as usize;
        writeln!(
            summary,
            "{name},{},{},{}",
            log.records.len(),
            log.any_collision() as u8,
            log.any_overstep() as u8
        )
        .unwrap();
    }
    sink.emit("rollouts/summary.csv", summary.as_bytes())?;
    println!(
        "simulated {} scenarios: {collisions} with a collision, {oversteps} with a boundary overstep",
        scenarios.len()
    );
    Ok(())
}

fn evaluate_cmd(config: &RunConfig, args: &PlannerArgs, sink: &mut Sink) -> Result<(), CliError> {
    let named = load_scenarios(config, &args.scenarios)?;
    let planner = build_planner(config)?;
    let scenarios: Vec<Scenario> = named.into_iter().map(|(_, s)| s).collect();
    let plans = scenarios
        .iter()
        .map(|s| plan_once(s, &planner))
        .collect::<vecplan::Result<Vec<_>>>()?;
    let metrics = evaluate(&scenarios, &plans, &config.metrics)?;
    let label = serde_json::to_value(config.planner.kind).expect("planner kind");
    let rows = vec![(label.as_str().unwrap().to_string(), metrics)];
    sink.emit("metrics.csv", metrics_csv(&rows).as_bytes())?;
    let table = metrics_table(&rows);
    sink.emit("metrics.txt", table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn ablate(config: &RunConfig, sink: &mut Sink) -> Result<(), CliError> {
    let setup = AblationSetup {
        train: &config.train,
        generator: &config.generator,
        interact: &config.interact,
        constraints: &config.constraints,
        weights: &config.weights,
        metrics: &config.metrics,
    };
    let report = ablation_report(&setup, &config.ablation)?;
    sink.emit("ablation.csv", report.to_delimited().as_bytes())?;
    let table = report.to_table();
    sink.emit("ablation.txt", table.as_bytes())?;
    print!("{table}");
    Ok(())
}
