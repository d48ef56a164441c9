use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rcgym::config::{ConfigError, RunConfig};
use rcgym::mockserver::MockServer;
use rcgym::tasks::{Task, TaskError};
use rcgym::trace;
use rcgym::trainer::{self, Agent, RandomAgent, ScriptedAgent, TrainError};
use rcgym::vecenv;

#[derive(Parser)]
#[command(name = "rcgym", version, about = "RoboCup 3D kick training toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a PPO policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Parallel environments (`num_envs`).
        #[arg(long)]
        num_envs: Option<String>,
        /// Environment steps to collect (`trainer.total_timesteps`).
        #[arg(long)]
        total_steps: Option<String>,
        /// Output directory (`out`).
        #[arg(long)]
        out: Option<String>,
    },
    /// Roll out a checkpoint, a random agent or a scripted action file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (`eval.checkpoint`).
        #[arg(long)]
        checkpoint: Option<String>,
        /// `policy`, `random` or `scripted:<csv>` (`eval.agent`).
        #[arg(long)]
        agent: Option<String>,
        /// Episodes to run (`eval.episodes`).
        #[arg(long)]
        episodes: Option<String>,
    },
    /// Measure vectorised stepping throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated env counts (`bench.envs`).
        #[arg(long)]
        envs: Option<String>,
        /// Steps per env for each count (`bench.steps`).
        #[arg(long)]
        steps: Option<String>,
        /// Directory for bench.csv and bench.svg (`out`).
        #[arg(long)]
        out: Option<String>,
    },
    /// Run random actions against a server and write a wire trace.
    Record {
        #[command(flatten)]
        common: Common,
        /// Env steps to record (`record.cycles`).
        #[arg(long)]
        cycles: Option<String>,
        /// Trace file (`out`).
        #[arg(long)]
        out: Option<String>,
    },
    /// Re-decode every payload of a trace file.
    Replay {
        trace: PathBuf,
        /// Only print the final counts.
        #[arg(long)]
        quiet: bool,
    },
    /// Run the mock simulator as a standalone server.
    #[command(hide = true)]
    ServeMock {
        #[arg(long, default_value_t = 3100)]
        agent_port: u16,
        #[arg(long, default_value_t = 3200)]
        server_port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Key-value config file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Registered task name (`task.name`).
    #[arg(long)]
    task: Option<String>,
    /// Run seed (`seed`).
    #[arg(long)]
    seed: Option<String>,
    /// mock, real or external (`server.kind`).
    #[arg(long)]
    server: Option<String>,
    /// First agent port, 0 for automatic (`server.base_port`).
    #[arg(long)]
    base_port: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::InvalidArgument(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Defaults, then `--config`, then `--set`, then the named flags.
fn load_config(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(common.set.iter().map(String::as_str))?;
    let named = [
        ("task.name", &common.task),
        ("seed", &common.seed),
        ("server.kind", &common.server),
        ("server.base_port", &common.base_port),
    ];
    for (key, value) in named.iter().chain(flags) {
        if let Some(v) = value {
            cfg.set(key, v, &format!("--{}", flag_name(key)))?;
        }
    }
    cfg.env_config()
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn flag_name(key: &str) -> &'static str {
    match key {
        "task.name" => "task",
        "seed" => "seed",
        "server.kind" => "server",
        "server.base_port" => "base-port",
        "num_envs" => "num-envs",
        "trainer.total_timesteps" => "total-steps",
        "out" => "out",
        "eval.checkpoint" => "checkpoint",
        "eval.agent" => "agent",
        "eval.episodes" => "episodes",
        "bench.envs" => "envs",
        "bench.steps" => "steps",
        "record.cycles" => "cycles",
        _ => "set",
    }
}

fn task_of(cfg: &RunConfig) -> Result<Arc<dyn Task>, Failure> {
    Ok(cfg.resolve_task()?)
}

fn train(
    common: Common,
    num_envs: Option<String>,
    total: Option<String>,
    out: Option<String>,
) -> Result<(), Failure> {
    let cfg = load_config(
        &common,
        &[
            ("num_envs", &num_envs),
            ("trainer.total_timesteps", &total),
            ("out", &out),
        ],
    )?;
    let spec = cfg.train_spec()?;
    spec.trainer.validate(spec.num_envs)?;
    let Some(dir) = &spec.out_dir else {
        return Err(Failure::Usage(
            "train needs an output directory (--out or `out`)".into(),
        ));
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    let summary = trainer::train(&spec)?;
    let mean = summary
        .mean_ep_reward
        .map(|m| format!("{m:.4}"))
        .unwrap_or_else(|| "nan".into());
    println!(
        "trained {} steps, {} episodes, mean_ep_reward {mean}",
        summary.timesteps, summary.episodes
    );
    if let Some(p) = summary.final_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

/// The non-policy agents selectable with `--agent`.
fn agent_of(cfg: &RunConfig, act_dim: usize) -> Result<Box<dyn Agent>, Failure> {
    match cfg.eval_agent.strip_prefix("scripted:") {
        Some(path) => Ok(Box::new(ScriptedAgent::load_csv(Path::new(path), act_dim)?)),
        None => Ok(Box::new(RandomAgent::new(act_dim, cfg.seed))),
    }
}

fn evaluate(
    common: Common,
    checkpoint: Option<String>,
    agent: Option<String>,
    episodes: Option<String>,
) -> Result<(), Failure> {
    let mut agent_flag = agent;
    if agent_flag.is_none() && checkpoint.is_some() {
        agent_flag = Some("policy".into());
    }
    let cfg = load_config(
        &common,
        &[
            ("eval.checkpoint", &checkpoint),
            ("eval.agent", &agent_flag),
            ("eval.episodes", &episodes),
        ],
    )?;
    let task = task_of(&cfg)?;
    let env = cfg.env_config();
    let summary = if cfg.eval_agent == "policy" {
        let Some(path) = &cfg.eval_checkpoint else {
            return Err(Failure::Usage(
                "policy evaluation needs --checkpoint".into(),
            ));
        };
        trainer::evaluate(path, &env, task, cfg.eval_episodes)?
    } else {
        let mut a = agent_of(&cfg, env.act_dim())?;
        trainer::evaluate_agent(a.as_mut(), &env, task, cfg.eval_episodes)?
    };
    for (i, r) in summary.rewards.iter().enumerate() {
        println!("episode {i} reward {r:.6}");
    }
    println!(
        "mean {:.6} std {:.6} over {} episodes",
        summary.mean,
        summary.std,
        summary.rewards.len()
    );
    Ok(())
}

fn bench(
    common: Common,
    envs: Option<String>,
    steps: Option<String>,
    out: Option<String>,
) -> Result<(), Failure> {
    let cfg = load_config(
        &common,
        &[
            ("bench.envs", &envs),
            ("bench.steps", &steps),
            ("out", &out),
        ],
    )?;
    if cfg.bench_envs.is_empty() {
        return Err(Failure::Usage("--envs needs at least one count".into()));
    }
    let task = task_of(&cfg)?;
    let rows = vecenv::throughput_bench(&cfg.bench_envs, cfg.bench_steps, &cfg.env_config(), task)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let csv = vecenv::bench_csv(&rows);
    fs::write(dir.join("bench.csv"), &csv)?;
    fs::write(dir.join("bench.svg"), vecenv::bench_svg(&rows))?;
    print!("{csv}");
    Ok(())
}

fn record(common: Common, cycles: Option<String>, out: Option<String>) -> Result<(), Failure> {
    let cfg = load_config(&common, &[("record.cycles", &cycles), ("out", &out)])?;
    let Some(path) = &cfg.out else {
        return Err(Failure::Usage(
            "record needs a trace file (--out or `out`)".into(),
        ));
    };
    let task = task_of(&cfg)?;
    let env = cfg.env_config();
    let mut agent = RandomAgent::new(env.act_dim(), cfg.seed);
    let file = io::BufWriter::new(fs::File::create(path)?);
    let n = trainer::record_trace(&mut agent, &env, task, cfg.record_cycles, file)?;
    println!("{n} records written to {}", path.display());
    Ok(())
}

fn replay(path: &Path, quiet: bool) -> Result<(), Failure> {
    let f =
        fs::File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let summary = trace::replay(BufReader::new(f))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    if !quiet {
        for (i, c) in summary.cycles.iter().enumerate() {
            writeln!(w, "cycle {i}: {c}")?;
        }
    }
    writeln!(
        w,
        "{} records ({} to_server, {} from_server), 0 decode errors",
        summary.records, summary.to_server, summary.from_server
    )?;
    Ok(())
}

fn serve_mock(agent_port: u16, server_port: u16, seed: u64) -> Result<(), Failure> {
    let _server = MockServer::start(agent_port, server_port, seed)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("mock server on agent port {agent_port}, monitor port {server_port}");
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Train {
            common,
            num_envs,
            total_steps,
            out,
        } => train(common, num_envs, total_steps, out),
        Cmd::Evaluate {
            common,
            checkpoint,
            agent,
            episodes,
        } => evaluate(common, checkpoint, agent, episodes),
        Cmd::Bench {
            common,
            envs,
            steps,
            out,
        } => bench(common, envs, steps, out),
        Cmd::Record {
            common,
            cycles,
            out,
        } => record(common, cycles, out),
        Cmd::Replay { trace, quiet } => replay(&trace, quiet),
        Cmd::ServeMock {
            agent_port,
            server_port,
            seed,
        } => serve_mock(agent_port, server_port, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
