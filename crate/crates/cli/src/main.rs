use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reward_repair::baselines::uniform_explorer;
use reward_repair::environments::{build_mdp1_n, Environment};
use reward_repair::harness::{
    run_experiment, run_human_session, run_retrain_check, write_outputs, ExperimentConfig, LabelerKind, PairingMode,
    RewardFile, SessionStore,
};
use reward_repair::preferences::HumanQueue;
use reward_repair::repair::{OptimizerConfig, PartitionMode};
use reward_repair::theory::{linear_instance, run_theory_loop, growth_exponent, TheoryConfig};

#[derive(Parser)]
#[command(name = "repair", version, about = "Repair misspecified rewards from trajectory preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write run.csv, reward.json, config.json and preferences.jsonl.
    Run(RunArgs),
    /// Serve the labeling API while a human-labeled run waits for answers.
    Serve(ServeArgs),
    /// Re-plan a saved reward under several seeds and report the spread of returns.
    Retrain(RetrainArgs),
    /// Cumulative regret of the confidence-set loop on a random linear instance.
    Regret(RegretArgs),
    /// Preferences a uniform explorer needs on the n-armed fan MDP, one row per seed.
    Fan(FanArgs),
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// JSON config to start from; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    labeler: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    /// Rollouts per policy; each iteration labels pairs^2 comparisons.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_base: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sprinkler_bonus: Option<f64>,
    #[arg(long)]
    intra_fraction: Option<f64>,
    #[arg(long)]
    rollout_epsilon: Option<f64>,
    /// rollout or support
    #[arg(long)]
    pairing: Option<String>,
    /// Decide agreement against the current repaired reward instead of the proxy.
    #[arg(long)]
    partition_current: bool,
    #[arg(long)]
    moving_reference: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
                .with_context(|| format!("parsing {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.env {
            cfg.env = v.clone();
        }
        if let Some(v) = &self.method {
            cfg.method = v.parse()?;
        }
        if let Some(v) = &self.labeler {
            cfg.labeler = v.parse()?;
        }
        if let Some(v) = self.iters {
            cfg.iterations = v;
        }
        if let Some(v) = self.pairs {
            cfg.pairs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.c1 {
            cfg.c1 = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.lambda_base {
            cfg.lambda_base = v;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if self.sprinkler_bonus.is_some() {
            cfg.sprinkler_bonus = self.sprinkler_bonus;
        }
        if let Some(v) = self.intra_fraction {
            cfg.intra_fraction = v;
        }
        if let Some(v) = self.rollout_epsilon {
            cfg.rollout_epsilon = v;
        }
        if let Some(v) = &self.pairing {
            cfg.pairing = match v.as_str() {
                "rollout" => PairingMode::Rollout,
                "support" => PairingMode::Support,
                other => bail!("unknown pairing {other}"),
            };
        }
        if self.partition_current {
            cfg.partition = PartitionMode::Current;
        }
        if self.moving_reference {
            cfg.moving_reference = true;
        }
        if let Some(v) = self.epochs {
            cfg.optimizer = OptimizerConfig { epochs: v, ..cfg.optimizer };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Append-only log that keeps unlabeled pairs across restarts.
    #[arg(long)]
    queue: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seconds to wait for each batch of labels.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

#[derive(Args)]
struct RetrainArgs {
    #[arg(long)]
    reward: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Half-width of the uniform tie-break noise added before planning.
    #[arg(long, default_value_t = 0.0)]
    perturbation: f64,
}

#[derive(Args)]
struct RegretArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    rounds: usize,
    #[arg(long, default_value_t = 4)]
    states: usize,
    #[arg(long, default_value_t = 2)]
    actions: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value_t = 2.0)]
    c1: f64,
    #[arg(long, default_value = "regret.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct FanArgs {
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    seeds: u64,
    #[arg(long, default_value = "fan.csv")]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Serve(args) => serve(args),
        Command::Retrain(args) => retrain(args),
        Command::Regret(args) => regret(args),
        Command::Fan(args) => fan(args),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.experiment.resolve()?;
    if cfg.labeler == LabelerKind::Human {
        bail!("human labels arrive through `repair serve`");
    }
    let env = cfg.load_env()?;
    let result = run_experiment(&cfg)?;
    write_outputs(&args.out, &result, &env)?;
    let last = result.final_row();
    println!(
        "{} on {}: {} preferences, J = {:.4}, scaled = {:.4}; wrote {}",
        cfg.method,
        cfg.env,
        last.preferences,
        last.j_truth,
        last.j_scaled,
        args.out.display()
    );
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = args.experiment.resolve()?;
    cfg.labeler = LabelerKind::Human;
    cfg.human_timeout_secs = args.timeout;
    cfg.validate()?;
    let env = Arc::new(cfg.load_env()?);
    let queue = match &args.queue {
        Some(path) => HumanQueue::open(path)?,
        None => HumanQueue::in_memory(),
    };
    let store = Arc::new(SessionStore::new(env.clone(), queue)?);
    let worker_store = store.clone();
    let out = args.out.clone();
    std::thread::spawn(move || match run_human_session(&cfg, worker_store) {
        Ok(result) => {
            if let Err(e) = write_outputs(&out, &result, &env) {
                eprintln!("writing outputs failed: {e}");
            }
        }
        Err(e) => eprintln!("run failed: {e}"),
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", args.port)).await?;
        eprintln!("labeling API on http://{}", listener.local_addr()?);
        axum::serve(listener, repair_cli::router(store))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn retrain(args: RetrainArgs) -> Result<()> {
    let file = RewardFile::load(&args.reward).with_context(|| format!("reading {}", args.reward.display()))?;
    let env = Environment::load(&file.env, &file.env_options())?;
    let reward = file.reward_fn(&env.mdp)?;
    let report = run_retrain_check(&env, &reward, &args.seeds, args.perturbation)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn regret(args: RegretArgs) -> Result<()> {
    let inst = linear_instance(args.seed, args.states, args.actions, args.horizon, 1.0)?;
    let cfg = TheoryConfig { rounds: args.rounds, c1: args.c1, seed: args.seed, ..TheoryConfig::default() };
    let run = run_theory_loop(&inst, &cfg)?;
    run.regret.write_csv(&args.out)?;
    let total = run.regret.cumulative.last().copied().unwrap_or(0.0);
    match growth_exponent(&run.regret.cumulative, 10) {
        Some(e) => println!("cumulative regret {total:.4}, growth exponent {e:.3}; wrote {}", args.out.display()),
        None => println!("cumulative regret {total:.4}; wrote {}", args.out.display()),
    }
    Ok(())
}

fn fan(args: FanArgs) -> Result<()> {
    let (mdp, truth, proxy, _) = build_mdp1_n(args.n)?;
    let opt = OptimizerConfig::default();
    let mut w = csv_writer(&args.out)?;
    let mut total = 0usize;
    for seed in 0..args.seeds {
        let rounds = uniform_explorer(&mdp, &truth, &proxy, &opt, seed, 10_000)?;
        total += rounds;
        w.push_str(&format!("{seed},{rounds}\n"));
    }
    fs::write(&args.out, w)?;
    println!("mean rounds {:.4} over {} seeds; wrote {}", total as f64 / args.seeds.max(1) as f64, args.seeds, args.out.display());
    Ok(())
}

fn csv_writer(path: &std::path::Path) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(String::from("seed,rounds\n"))
}
