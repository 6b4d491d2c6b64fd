use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aia_core::gblock::{load_checkpoint, save_checkpoint};
use aia_core::harness::{batch_evaluate, robustness_scenario, run_episode, EpisodeResult, Policy};
use aia_core::imitation::{evaluate_accuracy, generate_dataset, load_dataset, save_dataset, train};
use aia_core::{Error, MetricsReport, Result, ScenarioConfig, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aia", version, about = "Multi-robot active information acquisition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write episode.json and trace.csv.
    Simulate(EpisodeArgs),
    /// Evaluate policies on a batch of random instances.
    Benchmark(BenchmarkArgs),
    /// Run an episode with link drops and a robot failure.
    Robustness(RobustnessArgs),
    /// Generate an imitation dataset from expert episodes.
    GenData(GenDataArgs),
    /// Train a policy checkpoint on a dataset.
    Train(TrainArgs),
    /// Per-node action accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Expert,
    Gnn,
    Random,
    Greedy,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EpisodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "expert")]
    policy: PolicyArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Episode length cap; the scenario's cap when omitted.
    #[arg(long)]
    horizon_cap: Option<usize>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    /// Policies to evaluate (repeatable).
    #[arg(long, value_enum, num_args = 1.., default_values = ["expert", "random", "greedy"])]
    policy: Vec<PolicyArg>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 10)]
    t_fail: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Communication range in meters.
    #[arg(long, default_value_t = 4.0)]
    r_com: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 25)]
    envs: usize,
    #[arg(long, default_value_t = 8)]
    samples_per_episode: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn scenario(common: &Common) -> Result<ScenarioConfig> {
    let c: ScenarioConfig = read_json(&common.config)?;
    c.validate()?;
    Ok(c)
}

fn policy(arg: PolicyArg, checkpoint: &Option<PathBuf>) -> Result<Policy> {
    Ok(match arg {
        PolicyArg::Expert => Policy::Expert,
        PolicyArg::Random => Policy::Random,
        PolicyArg::Greedy => Policy::Greedy,
        PolicyArg::Gnn => {
            let path = checkpoint.as_ref().ok_or_else(|| Error::Config("--policy gnn needs --checkpoint".into()))?;
            Policy::Gnn(Arc::new(load_checkpoint(path)?))
        }
    })
}

fn write_episode(out: &Path, result: &EpisodeResult) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("episode.json"), result.to_json()?)?;
    result.write_trace_csv(fs::File::create(out.join("trace.csv"))?)?;
    println!("{}", serde_json::json!({ "horizon": result.horizon, "success": result.success }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let inst = scenario(&a.common)?.instantiate(a.common.seed)?;
            let p = policy(a.policy, &a.checkpoint)?;
            let cap = a.horizon_cap.unwrap_or(inst.config.horizon_cap);
            write_episode(&a.common.out, &run_episode(&inst, &p, a.common.seed, cap)?)
        }
        Command::Robustness(a) => {
            let e = &a.episode;
            let mut cfg = match &e.common.config {
                Some(_) => scenario(&e.common)?,
                None => ScenarioConfig::robustness(),
            };
            if let Some(cap) = e.horizon_cap {
                cfg.horizon_cap = cap;
            }
            let inst = cfg.instantiate(e.common.seed)?;
            let p = policy(e.policy, &e.checkpoint)?;
            let r_com = if a.r_com.is_finite() { Some(a.r_com) } else { None };
            let result = robustness_scenario(&inst, &p, a.t_fail, a.lambda, r_com, e.common.seed)?;
            write_episode(&e.common.out, &result)
        }
        Command::Benchmark(a) => {
            let cfg = scenario(&a.common)?;
            let instances = (0..a.instances as u64)
                .map(|k| cfg.instantiate(a.common.seed.wrapping_add(k)))
                .collect::<Result<Vec<_>>>()?;
            let policies = a.policy.iter().map(|&p| policy(p, &a.checkpoint)).collect::<Result<Vec<_>>>()?;
            let reports = batch_evaluate(&instances, &policies)?;
            fs::create_dir_all(&a.common.out)?;
            fs::write(a.common.out.join("metrics.json"), serde_json::to_string_pretty(&reports)?)?;
            MetricsReport::write_csv(&reports, fs::File::create(a.common.out.join("metrics.csv"))?)?;
            for r in &reports {
                println!(
                    "{}",
                    serde_json::json!({
                        "policy": r.policy,
                        "flowtime_increase": r.flowtime_increase,
                        "success_rate": r.success_rate,
                        "instances": r.records.len(),
                        "dropped": r.dropped.len(),
                    })
                );
            }
            Ok(())
        }
        Command::GenData(a) => {
            let cfg = scenario(&a.common)?;
            let data = generate_dataset(a.envs, &cfg, a.samples_per_episode, a.common.seed)?;
            fs::create_dir_all(&a.common.out)?;
            save_dataset(&data, &a.common.out.join("dataset.bin"))?;
            println!("{}", serde_json::json!({ "samples": data.len() }));
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = read_json(&a.common.config)?;
            cfg.seed = a.common.seed;
            let data = load_dataset(&a.dataset)?;
            let outcome = train(&data, &cfg)?;
            fs::create_dir_all(&a.common.out)?;
            save_checkpoint(&outcome.params, &a.common.out.join("policy.ckpt"))?;
            fs::write(a.common.out.join("history.json"), serde_json::to_string_pretty(&outcome.history)?)?;
            println!("{}", serde_json::json!({ "best_epoch": outcome.best_epoch, "epochs": outcome.history.len() }));
            Ok(())
        }
        Command::Eval(a) => {
            let params = load_checkpoint(&a.checkpoint)?;
            let data = load_dataset(&a.dataset)?;
            let accuracy = evaluate_accuracy(&params, &data)?;
            let report = serde_json::json!({ "accuracy": accuracy, "samples": data.len() });
            fs::create_dir_all(&a.common.out)?;
            fs::write(a.common.out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            println!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": e.kind() }));
            ExitCode::FAILURE
        }
    }
}
