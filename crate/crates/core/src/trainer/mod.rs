//! PPO with GAE over a [`VecEnv`](crate::vecenv::VecEnv), plus evaluation.

pub mod checkpoint;
pub mod gae;
pub mod policy;
pub mod ppo;

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::envcore::{Env, EnvConfig, EnvError};
use crate::tasks::Task;
use crate::trace::TraceTap;
use crate::vecenv::{VecEnv, VecEnvError};
use checkpoint::{Checkpoint, CheckpointError};
use policy::Policy;
use ppo::{Adam, RolloutBuffer, Sample, UpdateMetrics};

pub const METRICS_HEADER: &str =
    "timestep,mean_ep_reward,policy_loss,value_loss,approx_kl,clip_frac";
/// Episodes in the rolling reward mean.
pub const REWARD_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sequence lengths differ: {rewards} rewards, {values} values, {dones} done flags")]
    LengthMismatch {
        rewards: usize,
        values: usize,
        dones: usize,
    },
    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint {what} is {checkpoint}, environment has {env}")]
    ShapeMismatch {
        what: &'static str,
        checkpoint: usize,
        env: usize,
    },
    #[error(transparent)]
    VecEnv(#[from] VecEnvError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub total_timesteps: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Steps per env per rollout.
    pub n_steps: usize,
    pub epochs: usize,
    pub clip_range: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub minibatch_size: usize,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Write `ckpt_<timestep>.bin` every this many timesteps; 0 writes only
    /// the final checkpoint.
    pub checkpoint_interval: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            total_timesteps: 50_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            n_steps: 64,
            epochs: 10,
            clip_range: 0.2,
            learning_rate: 1e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            minibatch_size: 64,
            max_grad_norm: 0.5,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, num_envs: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if !(self.clip_range > 0.0) {
            return bad(format!(
                "clip_range must be positive, got {}",
                self.clip_range
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive".into());
        }
        if !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return bad("entropy_coef and value_coef must be non-negative".into());
        }
        if self.n_steps == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return bad("n_steps, epochs and minibatch_size must be at least 1".into());
        }
        if num_envs == 0 {
            return bad("num_envs must be at least 1".into());
        }
        if (self.n_steps * num_envs) % self.minibatch_size != 0 {
            return bad(format!(
                "n_steps·num_envs = {} is not divisible by minibatch_size {}",
                self.n_steps * num_envs,
                self.minibatch_size
            ));
        }
        Ok(())
    }
}

/// Everything `train` needs.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub env: EnvConfig,
    pub task: Arc<dyn Task>,
    pub num_envs: usize,
    pub trainer: TrainerConfig,
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Recorded in the metrics header and checkpoints.
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub timestep: u64,
    pub mean_ep_reward: Option<f64>,
    pub update: UpdateMetrics,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mean = match self.mean_ep_reward {
            Some(m) => format!("{m}"),
            None => "nan".into(),
        };
        format!(
            "{},{},{},{},{},{}",
            self.timestep,
            mean,
            self.update.policy_loss,
            self.update.value_loss,
            self.update.approx_kl,
            self.update.clip_frac
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub timesteps: u64,
    pub episodes: usize,
    /// Rolling mean over the last 100 episodes at the end of training.
    pub mean_ep_reward: Option<f64>,
    pub rows: Vec<MetricsRow>,
    pub policy: Policy,
    pub final_checkpoint: Option<PathBuf>,
}

/// `#` comment lines written above the metrics header.
pub fn provenance_lines(spec: &TrainSpec) -> Vec<String> {
    let t = &spec.trainer;
    vec![
        "# rcgym ppo".into(),
        format!("# config_hash {}", spec.config_hash),
        format!(
            "# task {} num_envs {} joints {} action_mode {} seed {}",
            spec.task.name(),
            spec.num_envs,
            spec.env.controllable,
            spec.env.action_mode,
            t.seed
        ),
        format!(
            "# gamma {} gae_lambda {} n_steps {} epochs {} clip_range {} learning_rate {} entropy_coef {}",
            t.gamma, t.gae_lambda, t.n_steps, t.epochs, t.clip_range, t.learning_rate, t.entropy_coef
        ),
        format!(
            "# value_coef {} minibatch_size {} max_grad_norm {} advantage_norm per-update adam_eps 1e-5",
            t.value_coef, t.minibatch_size, t.max_grad_norm
        ),
        format!(
            "# network actor/critic {h}x{h} tanh, separate; gaussian head, state-independent log-std init 0; orthogonal init",
            h = policy::HIDDEN
        ),
    ]
}

struct Metrics {
    out: Option<fs::File>,
}

impl Metrics {
    fn open(spec: &TrainSpec) -> Result<Self, TrainError> {
        let out = match &spec.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut f = fs::File::create(dir.join("metrics.csv"))?;
                for line in provenance_lines(spec) {
                    writeln!(f, "{line}")?;
                }
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        Ok(Metrics { out })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        if let Some(f) = &mut self.out {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        Ok(())
    }
}

fn checkpoint_of(spec: &TrainSpec, policy: &Policy, timestep: u64) -> Checkpoint {
    Checkpoint {
        seed: spec.trainer.seed,
        config_hash: spec.config_hash.clone(),
        timestep,
        joints: spec.env.controllable.to_string(),
        action_mode: spec.env.action_mode.to_string(),
        policy: policy.clone(),
    }
}

fn save(
    spec: &TrainSpec,
    policy: &Policy,
    timestep: u64,
    name: &str,
) -> Result<Option<PathBuf>, TrainError> {
    let Some(dir) = &spec.out_dir else {
        return Ok(None);
    };
    let path = dir.join(name);
    checkpoint_of(spec, policy, timestep).save(&path)?;
    Ok(Some(path))
}

fn mean(v: &VecDeque<f64>) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs PPO until `total_timesteps` environment steps have been collected.
pub fn train(spec: &TrainSpec) -> Result<TrainSummary, TrainError> {
    let cfg = &spec.trainer;
    cfg.validate(spec.num_envs)?;
    let mut env_cfg = spec.env.clone();
    env_cfg.seed = cfg.seed;
    env_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::init(env_cfg.obs_dim(), env_cfg.act_dim(), &mut rng);
    let mut adam = Adam::new(policy.params.len(), cfg.learning_rate);
    let mut metrics = Metrics::open(spec)?;
    let mut rows = Vec::new();
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(REWARD_WINDOW);
    let mut episodes = 0usize;
    let mut timestep = 0u64;

    if cfg.total_timesteps == 0 {
        let final_checkpoint = save(spec, &policy, 0, "ckpt_final.bin")?;
        return Ok(TrainSummary {
            timesteps: 0,
            episodes: 0,
            mean_ep_reward: None,
            rows,
            policy,
            final_checkpoint,
        });
    }

    let n = spec.num_envs;
    let mut venv = VecEnv::new(n, &env_cfg, Arc::clone(&spec.task))?;
    let mut buffer = RolloutBuffer::new(cfg.n_steps, n);
    let mut ep_return = vec![0.0; n];
    let mut obs = match venv.reset() {
        Ok(o) => o,
        Err(e) => {
            save(spec, &policy, 0, "ckpt_final.bin")?;
            return Err(e.into());
        }
    };
    let mut next_checkpoint = cfg.checkpoint_interval;

    while timestep < cfg.total_timesteps {
        for _ in 0..cfg.n_steps {
            let acted: Vec<(Vec<f64>, f64, f64)> =
                obs.iter().map(|o| policy.act(o, &mut rng)).collect();
            let clipped: Vec<Vec<f64>> = acted
                .iter()
                .map(|(a, _, _)| a.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
                .collect();
            let step = match venv.step(&clipped) {
                Ok(s) => s,
                Err(e) => {
                    save(spec, &policy, timestep, "ckpt_final.bin")?;
                    return Err(e.into());
                }
            };
            let mut samples = Vec::with_capacity(n);
            for (i, (action, log_prob, value)) in acted.into_iter().enumerate() {
                let mut reward = step.rewards[i];
                ep_return[i] += step.rewards[i];
                let done = step.terminated[i] || step.truncated[i];
                if step.truncated[i] && !step.terminated[i] {
                    if let Some(term) = step.infos[i].terminal_observation.as_ref() {
                        reward += cfg.gamma * policy.value(term);
                    }
                }
                if done {
                    if recent.len() == REWARD_WINDOW {
                        recent.pop_front();
                    }
                    recent.push_back(ep_return[i]);
                    ep_return[i] = 0.0;
                    episodes += 1;
                }
                samples.push(Sample {
                    obs: std::mem::take(&mut obs[i]),
                    action,
                    log_prob,
                    value,
                    reward,
                    done,
                    advantage: 0.0,
                    ret: 0.0,
                });
            }
            buffer.push_step(samples);
            obs = step.observations;
            timestep += n as u64;
        }
        let last_values: Vec<f64> = obs.iter().map(|o| policy.value(o)).collect();
        buffer.compute_advantages(&last_values, cfg.gamma, cfg.gae_lambda)?;
        let update = ppo::ppo_update(&mut buffer, &mut policy, &mut adam, cfg, &mut rng)?;
        let row = MetricsRow {
            timestep,
            mean_ep_reward: mean(&recent),
            update,
        };
        metrics.write(&row)?;
        info!("{}", row.to_csv());
        rows.push(row);
        if cfg.checkpoint_interval > 0 && timestep >= next_checkpoint {
            save(spec, &policy, timestep, &format!("ckpt_{timestep}.bin"))?;
            while next_checkpoint <= timestep {
                next_checkpoint += cfg.checkpoint_interval;
            }
        }
    }
    venv.close();
    let final_checkpoint = save(spec, &policy, timestep, "ckpt_final.bin")?;
    Ok(TrainSummary {
        timesteps: timestep,
        episodes,
        mean_ep_reward: mean(&recent),
        rows,
        policy,
        final_checkpoint,
    })
}

/// Something that turns observations into actions during evaluation.
pub trait Agent {
    /// Called at the start of every episode.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;
}

/// Mean action of a trained policy.
#[derive(Debug, Clone)]
pub struct PolicyAgent(pub Policy);

impl Agent for PolicyAgent {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self.0.deterministic_action(obs)
    }
}

/// Uniform random actions in [−1, 1].
#[derive(Debug, Clone)]
pub struct RandomAgent {
    rng: ChaCha8Rng,
    act_dim: usize,
}

impl RandomAgent {
    pub fn new(act_dim: usize, seed: u64) -> Self {
        RandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
            act_dim,
        }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _obs: &[f64]) -> Vec<f64> {
        (0..self.act_dim)
            .map(|_| self.rng.random_range(-1.0..=1.0))
            .collect()
    }
}

/// Replays a fixed action sequence each episode, then zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedAgent {
    rows: Vec<Vec<f64>>,
    act_dim: usize,
    t: usize,
}

impl ScriptedAgent {
    pub fn new(rows: Vec<Vec<f64>>, act_dim: usize) -> Result<Self, TrainError> {
        if let Some(r) = rows.iter().find(|r| r.len() != act_dim) {
            return Err(TrainError::ShapeMismatch {
                what: "scripted action length",
                checkpoint: r.len(),
                env: act_dim,
            });
        }
        Ok(ScriptedAgent {
            rows,
            act_dim,
            t: 0,
        })
    }

    /// Comma-separated action rows; `#` lines and a non-numeric header row
    /// are skipped.
    pub fn load_csv(path: &Path, act_dim: usize) -> Result<Self, TrainError> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed: Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            match parsed {
                Ok(r) => rows.push(r),
                Err(_) if rows.is_empty() && !header_seen => header_seen = true,
                Err(_) => {
                    return Err(TrainError::InvalidArgument(format!(
                        "{}:{}: not a row of numbers",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        ScriptedAgent::new(rows, act_dim)
    }
}

impl Agent for ScriptedAgent {
    fn reset(&mut self) {
        self.t = 0;
    }

    fn act(&mut self, _obs: &[f64]) -> Vec<f64> {
        let a = self
            .rows
            .get(self.t)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.act_dim]);
        self.t += 1;
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalSummary {
    fn from_rewards(rewards: Vec<f64>) -> Self {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        EvalSummary { rewards, mean, std }
    }
}

/// Runs `episodes` full episodes of `agent` on one fresh env and reports the
/// episode returns.
pub fn evaluate_agent(
    agent: &mut dyn Agent,
    env_config: &EnvConfig,
    task: Arc<dyn Task>,
    episodes: usize,
) -> Result<EvalSummary, TrainError> {
    if episodes == 0 {
        return Err(TrainError::InvalidArgument(
            "episodes must be at least 1".into(),
        ));
    }
    let mut env = Env::new(env_config.clone(), task)?;
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        agent.reset();
        let mut obs = env.reset()?;
        let mut total = 0.0;
        loop {
            let r = env.step(&agent.act(&obs))?;
            total += r.reward;
            if r.terminated || r.truncated {
                break;
            }
            obs = r.observation;
        }
        rewards.push(total);
    }
    env.close();
    Ok(EvalSummary::from_rewards(rewards))
}

/// Deterministic rollouts of a saved policy.
pub fn evaluate(
    checkpoint: &Path,
    env_config: &EnvConfig,
    task: Arc<dyn Task>,
    episodes: usize,
) -> Result<EvalSummary, TrainError> {
    if episodes == 0 {
        return Err(TrainError::InvalidArgument(
            "episodes must be at least 1".into(),
        ));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let p = &ckpt.policy;
    if p.obs_dim() != env_config.obs_dim() {
        return Err(TrainError::ShapeMismatch {
            what: "obs_dim",
            checkpoint: p.obs_dim(),
            env: env_config.obs_dim(),
        });
    }
    if p.act_dim() != env_config.act_dim() {
        return Err(TrainError::ShapeMismatch {
            what: "act_dim",
            checkpoint: p.act_dim(),
            env: env_config.act_dim(),
        });
    }
    evaluate_agent(&mut PolicyAgent(ckpt.policy), env_config, task, episodes)
}

/// Drives `agent` for `cycles` env steps (resetting as episodes end) with
/// every payload written to `out` as trace lines. Returns the number of
/// records written.
pub fn record_trace(
    agent: &mut dyn Agent,
    env_config: &EnvConfig,
    task: Arc<dyn Task>,
    cycles: usize,
    out: impl Write + Send + 'static,
) -> Result<usize, TrainError> {
    let tap = TraceTap::new(out);
    let mut env = Env::new(env_config.clone(), task)?;
    env.set_trace_tap(Some(tap.clone()));
    let mut done = 0;
    while done < cycles {
        agent.reset();
        let mut obs = env.reset()?;
        while done < cycles {
            let r = env.step(&agent.act(&obs))?;
            done += 1;
            if r.terminated || r.truncated {
                break;
            }
            obs = r.observation;
        }
    }
    env.close();
    tap.flush()?;
    Ok(tap.records())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nao::JointSet;
    use crate::tasks;

    fn spec(dir: Option<PathBuf>, total: u64) -> TrainSpec {
        TrainSpec {
            env: EnvConfig {
                controllable: JointSet::leg4(),
                max_episode_steps: 20,
                ..Default::default()
            },
            task: tasks::lookup("velocity_kick").unwrap(),
            num_envs: 2,
            trainer: TrainerConfig {
                total_timesteps: total,
                n_steps: 32,
                epochs: 2,
                seed: 3,
                ..Default::default()
            },
            out_dir: dir,
            config_hash: "0".repeat(64),
        }
    }

    #[test]
    fn validation_rules() {
        let c = TrainerConfig::default();
        assert!(c.validate(8).is_ok());
        assert!(c.validate(0).is_err());
        let odd = TrainerConfig {
            n_steps: 63,
            ..Default::default()
        };
        assert!(odd.validate(1).is_err());
        let g = TrainerConfig {
            gamma: 1.5,
            ..Default::default()
        };
        assert!(g.validate(1).is_err());
    }

    #[test]
    fn zero_timesteps_writes_initial_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(Some(dir.path().to_path_buf()), 0);
        let out = train(&s).unwrap();
        assert!(out.rows.is_empty());
        let ckpt = Checkpoint::load(&dir.path().join("ckpt_final.bin")).unwrap();
        assert_eq!(ckpt.timestep, 0);
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let data: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec![METRICS_HEADER]);
    }

    #[test]
    fn short_run_writes_rows_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Some(dir.path().to_path_buf()), 128);
        s.trainer.checkpoint_interval = 64;
        let out = train(&s).unwrap();
        assert_eq!(out.timesteps, 128);
        assert_eq!(out.rows.len(), 2);
        assert!(out.episodes >= 2);
        assert!(dir.path().join("ckpt_64.bin").exists());
        assert!(dir.path().join("ckpt_128.bin").exists());
        let eval = evaluate(
            &dir.path().join("ckpt_final.bin"),
            &s.env,
            Arc::clone(&s.task),
            1,
        )
        .unwrap();
        assert_eq!(eval.rewards.len(), 1);

        let mut other = s.env.clone();
        other.controllable = JointSet::parse("rlj3").unwrap();
        assert!(matches!(
            evaluate(
                &dir.path().join("ckpt_final.bin"),
                &other,
                Arc::clone(&s.task),
                1
            ),
            Err(TrainError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            evaluate(&dir.path().join("ckpt_final.bin"), &s.env, s.task, 0),
            Err(TrainError::InvalidArgument(_))
        ));
    }
}
