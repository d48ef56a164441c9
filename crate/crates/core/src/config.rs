//! Run configuration: a flat `key = value` file, overridable per key.
//!
//! Later sources win: built-in defaults, then a config file, then command
//! line flags. [`RunConfig::resolved`] writes every key back out in the same
//! syntax, so a resolved dump loads to the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envcore::{ActionMode, EnvConfig};
use crate::nao::{self, JointSet};
use crate::protocol::{Pose, Vec3};
use crate::tasks::{self, Task, TaskError, TaskOptions};
use crate::trainer::{TrainSpec, TrainerConfig};

/// Episode cap used by run configurations (0.4 s of sim time).
pub const RUN_MAX_EPISODE_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: {key}: {reason}")]
    BadValue {
        origin: String,
        key: String,
        reason: String,
    },
    #[error("{origin}: expected `key = value`, got {line:?}")]
    Syntax { origin: String, line: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: String,
    /// `task.<option>` keys other than `task.name`.
    pub task_options: TaskOptions,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub num_envs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub bench_envs: Vec<usize>,
    pub bench_steps: usize,
    /// `policy`, `random` or `scripted:<csv>`.
    pub eval_agent: String,
    pub eval_checkpoint: Option<PathBuf>,
    pub eval_episodes: usize,
    pub record_cycles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "simple_kick".into(),
            task_options: TaskOptions::new(),
            env: EnvConfig {
                controllable: JointSet::leg4(),
                max_episode_steps: RUN_MAX_EPISODE_STEPS,
                ..Default::default()
            },
            trainer: TrainerConfig::default(),
            num_envs: 8,
            seed: 0,
            out: None,
            bench_envs: vec![1, 2, 4, 8],
            bench_steps: 2000,
            eval_agent: "policy".into(),
            eval_checkpoint: None,
            eval_episodes: 20,
            record_cycles: 100,
        }
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("{s:?} is not a finite number"))
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim()
        .parse::<T>()
        .map_err(|_| format!("{s:?} is not a non-negative integer"))
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("{s:?} is not three comma-separated numbers"));
    }
    Ok([
        parse_f64(parts[0])?,
        parse_f64(parts[1])?,
        parse_f64(parts[2])?,
    ])
}

fn parse_secs(s: &str) -> Result<Duration, String> {
    let v = parse_f64(s)?;
    if v <= 0.0 {
        return Err(format!("{s:?} must be positive"));
    }
    Ok(Duration::from_secs_f64(v))
}

fn fmt_vec3(v: Vec3) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl RunConfig {
    /// Applies one `key = value` setting. `origin` names the source in errors.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let bad = |reason: String| ConfigError::BadValue {
            origin: origin.into(),
            key: key.into(),
            reason,
        };
        let env = &mut self.env;
        let tr = &mut self.trainer;
        match key {
            "task.name" | "task" => self.task = value.to_string(),
            "num_envs" => self.num_envs = parse_int(value).map_err(bad)?,
            "seed" => self.seed = parse_int(value).map_err(bad)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),

            "env.joints" => {
                env.controllable = JointSet::parse(value).map_err(|e| bad(e.to_string()))?
            }
            "env.action_mode" => env.action_mode = value.parse::<ActionMode>().map_err(bad)?,
            "env.max_episode_steps" => env.max_episode_steps = parse_int(value).map_err(bad)?,
            "env.n_wait" => {
                env.n_wait = match value {
                    "task" | "" => None,
                    v => Some(parse_int(v).map_err(bad)?),
                }
            }
            "env.ball_start_pos" => env.ball_start_pos = parse_vec3(value).map_err(bad)?,
            "env.beam_pose" => {
                let [x, y, rot_deg] = parse_vec3(value).map_err(bad)?;
                env.beam_pose = Pose { x, y, rot_deg };
            }
            "env.obs_clip" => env.obs_clip = parse_f64(value).map_err(bad)?,
            "env.target_gain" => env.target_gain = parse_f64(value).map_err(bad)?,
            "env.speed_limits" => {
                let mut limits = nao::SpeedLimits::default();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (name, v) = item
                        .split_once(':')
                        .ok_or_else(|| bad(format!("{item:?} is not joint:deg_per_s")))?;
                    let spec = nao::by_name(name.trim())
                        .ok_or_else(|| bad(format!("unknown joint {name:?}")))?;
                    limits.set(spec.index, parse_f64(v).map_err(bad)?);
                }
                env.speed_limits = limits;
            }
            "env.upright_accel" => {
                env.upright_accel = match value {
                    "auto" | "" => None,
                    v => Some(parse_vec3(v).map_err(bad)?),
                }
            }
            "env.scene" => env.scene = value.to_string(),
            "env.team" => env.team = value.to_string(),
            "env.unum" => env.unum = parse_int(value).map_err(bad)?,
            "env.io_timeout" => env.io_timeout = parse_secs(value).map_err(bad)?,

            "server.kind" => env.server.kind = value.parse().map_err(bad)?,
            "server.host" => env.server.host = value.to_string(),
            "server.base_port" => env.server.base_port = parse_int(value).map_err(bad)?,
            "server.binary_path" => {
                env.server.binary_path = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "server.extra_args" => {
                env.server.extra_args = value.split_whitespace().map(String::from).collect()
            }
            "server.startup_timeout" => {
                env.server.startup_timeout = parse_secs(value).map_err(bad)?
            }

            "trainer.total_timesteps" => tr.total_timesteps = parse_int(value).map_err(bad)?,
            "trainer.gamma" => tr.gamma = parse_f64(value).map_err(bad)?,
            "trainer.gae_lambda" => tr.gae_lambda = parse_f64(value).map_err(bad)?,
            "trainer.n_steps" => tr.n_steps = parse_int(value).map_err(bad)?,
            "trainer.epochs" => tr.epochs = parse_int(value).map_err(bad)?,
            "trainer.clip_range" => tr.clip_range = parse_f64(value).map_err(bad)?,
            "trainer.learning_rate" => tr.learning_rate = parse_f64(value).map_err(bad)?,
            "trainer.entropy_coef" => tr.entropy_coef = parse_f64(value).map_err(bad)?,
            "trainer.value_coef" => tr.value_coef = parse_f64(value).map_err(bad)?,
            "trainer.minibatch_size" => tr.minibatch_size = parse_int(value).map_err(bad)?,
            "trainer.max_grad_norm" => tr.max_grad_norm = parse_f64(value).map_err(bad)?,
            "trainer.checkpoint_interval" => {
                tr.checkpoint_interval = parse_int(value).map_err(bad)?
            }

            "bench.envs" => {
                self.bench_envs = value
                    .split(',')
                    .map(|v| {
                        parse_int::<usize>(v).and_then(|n| {
                            if n == 0 {
                                Err("env counts must be positive".into())
                            } else {
                                Ok(n)
                            }
                        })
                    })
                    .collect::<Result<_, _>>()
                    .map_err(bad)?
            }
            "bench.steps" => self.bench_steps = parse_int(value).map_err(bad)?,
            "eval.agent" => {
                if !(value == "policy" || value == "random" || value.starts_with("scripted:")) {
                    return Err(bad(format!(
                        "{value:?} is not policy, random or scripted:<csv>"
                    )));
                }
                self.eval_agent = value.to_string()
            }
            "eval.checkpoint" => {
                self.eval_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "eval.episodes" => self.eval_episodes = parse_int(value).map_err(bad)?,
            "record.cycles" => self.record_cycles = parse_int(value).map_err(bad)?,

            k if k.starts_with("task.") => {
                self.task_options
                    .insert(k["task.".len()..].to_string(), value.to_string());
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.into(),
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Applies every setting in a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: at.clone(),
                line: line.into(),
            })?;
            self.set(k.trim(), v, &at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides such as those given with `--set`.
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ConfigError> {
        for pair in pairs {
            let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: "command line".into(),
                line: pair.into(),
            })?;
            self.set(k.trim(), v, "command line")?;
        }
        Ok(())
    }

    fn entries(&self, include_run_local: bool) -> Vec<(String, String)> {
        let e = &self.env;
        let t = &self.trainer;
        let mut v: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, val: String| v.push((k.to_string(), val));
        put("task.name", self.task.clone());
        for (k, val) in &self.task_options {
            put(&format!("task.{k}"), val.clone());
        }
        put("num_envs", self.num_envs.to_string());
        put("seed", self.seed.to_string());
        if include_run_local {
            put(
                "out",
                self.out
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            );
        }
        put("env.joints", e.controllable.to_string());
        put("env.action_mode", e.action_mode.to_string());
        put("env.max_episode_steps", e.max_episode_steps.to_string());
        put(
            "env.n_wait",
            e.n_wait
                .map(|n| n.to_string())
                .unwrap_or_else(|| "task".into()),
        );
        put("env.ball_start_pos", fmt_vec3(e.ball_start_pos));
        put(
            "env.beam_pose",
            fmt_vec3([e.beam_pose.x, e.beam_pose.y, e.beam_pose.rot_deg]),
        );
        put("env.obs_clip", e.obs_clip.to_string());
        put("env.target_gain", e.target_gain.to_string());
        let defaults = nao::SpeedLimits::default();
        let overrides: Vec<String> = nao::registry()
            .iter()
            .filter(|s| e.speed_limits.get(s.index) != defaults.get(s.index))
            .map(|s| format!("{}:{}", s.perceptor_name, e.speed_limits.get(s.index)))
            .collect();
        put("env.speed_limits", overrides.join(","));
        put(
            "env.upright_accel",
            e.upright_accel
                .map(fmt_vec3)
                .unwrap_or_else(|| "auto".into()),
        );
        put("env.scene", e.scene.clone());
        put("env.team", e.team.clone());
        put("env.unum", e.unum.to_string());
        put("env.io_timeout", e.io_timeout.as_secs_f64().to_string());
        put("server.kind", e.server.kind.to_string());
        put("server.host", e.server.host.clone());
        if include_run_local {
            put("server.base_port", e.server.base_port.to_string());
        }
        put(
            "server.binary_path",
            e.server
                .binary_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("server.extra_args", e.server.extra_args.join(" "));
        put(
            "server.startup_timeout",
            e.server.startup_timeout.as_secs_f64().to_string(),
        );
        put("trainer.total_timesteps", t.total_timesteps.to_string());
        put("trainer.gamma", t.gamma.to_string());
        put("trainer.gae_lambda", t.gae_lambda.to_string());
        put("trainer.n_steps", t.n_steps.to_string());
        put("trainer.epochs", t.epochs.to_string());
        put("trainer.clip_range", t.clip_range.to_string());
        put("trainer.learning_rate", t.learning_rate.to_string());
        put("trainer.entropy_coef", t.entropy_coef.to_string());
        put("trainer.value_coef", t.value_coef.to_string());
        put("trainer.minibatch_size", t.minibatch_size.to_string());
        put("trainer.max_grad_norm", t.max_grad_norm.to_string());
        put(
            "trainer.checkpoint_interval",
            t.checkpoint_interval.to_string(),
        );
        if include_run_local {
            let envs: Vec<String> = self.bench_envs.iter().map(|n| n.to_string()).collect();
            put("bench.envs", envs.join(","));
            put("bench.steps", self.bench_steps.to_string());
            put("eval.agent", self.eval_agent.clone());
            put(
                "eval.checkpoint",
                self.eval_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            );
            put("eval.episodes", self.eval_episodes.to_string());
            put("record.cycles", self.record_cycles.to_string());
        }
        v
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries(true) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the training settings. Output locations, ports and the
    /// bench/eval/record keys are left out.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries(false) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve_task(&self) -> Result<Arc<dyn Task>, TaskError> {
        tasks::resolve_task(&self.task, &self.task_options)
    }

    /// Env configuration with the run seed applied.
    pub fn env_config(&self) -> EnvConfig {
        let mut e = self.env.clone();
        e.seed = self.seed;
        e
    }

    pub fn train_spec(&self) -> Result<TrainSpec, TaskError> {
        let mut trainer = self.trainer.clone();
        trainer.seed = self.seed;
        Ok(TrainSpec {
            env: self.env_config(),
            task: self.resolve_task()?,
            num_envs: self.num_envs,
            trainer,
            out_dir: self.out.clone(),
            config_hash: self.config_hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_dump_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides([
            "task.name=velocity_kick",
            "task.alpha=0.25",
            "env.speed_limits=rlj3:200",
            "env.upright_accel=0,0,9.81",
            "server.extra_args=--foo bar",
            "out=/tmp/x",
        ])
        .unwrap();
        let text = c.resolved();
        let mut back = RunConfig::default();
        back.apply_text(&text, "resolved").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved(), text);
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let mut c = RunConfig::default();
        assert_eq!(c.num_envs, 8);
        c.apply_text("num_envs = 4\nseed = 9\n# comment\n", "file")
            .unwrap();
        c.apply_overrides(["num_envs=2"]).unwrap();
        assert_eq!(c.num_envs, 2);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn errors_name_their_source() {
        let mut c = RunConfig::default();
        let e = c.apply_text("\nbogus = 1\n", "run.cfg").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                origin: "run.cfg:2".into(),
                key: "bogus".into()
            }
        );
        assert!(matches!(
            c.apply_overrides(["env.obs_clip=abc"]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            c.apply_text("no equals", "f"),
            Err(ConfigError::Syntax { .. })
        ));
    }

    #[test]
    fn hash_ignores_output_location() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.apply_overrides(["out=run1", "server.base_port=3100"])
            .unwrap();
        b.apply_overrides(["out=run2"]).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        b.apply_overrides(["seed=5"]).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn task_options_reach_the_task() {
        let mut c = RunConfig::default();
        c.apply_overrides(["task.reward=x_only"]).unwrap();
        assert!(c.resolve_task().is_ok());
        c.apply_overrides(["task.name=nope"]).unwrap();
        assert!(matches!(
            c.resolve_task(),
            Err(TaskError::UnknownTask { .. })
        ));
    }
}
