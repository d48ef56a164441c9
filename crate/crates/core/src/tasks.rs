//! Kick tasks and the task registry.
//!
//! A task only decides the reward and, optionally, early termination. Both
//! built-in tasks are sparse: zero during the episode, one scalar after the
//! wait phase.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, LazyLock, RwLock};

use thiserror::Error;

use crate::protocol::{PerceptorSnapshot, Vec3};

pub const SIMPLE_KICK_N_WAIT: usize = 200;
pub const VELOCITY_KICK_N_WAIT: usize = 20;

/// Free-form `key=value` task options, e.g. `reward=x_only` or `alpha=0.5`.
pub type TaskOptions = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("task {0:?} is already registered")]
    DuplicateName(String),
    #[error("unknown task {name:?}; registered tasks: {}", known.join(", "))]
    UnknownTask { name: String, known: Vec<String> },
    #[error("task option {key}: {reason}")]
    InvalidOption { key: String, reason: String },
}

/// Ball motion over an episode, read from ground truth after the wait phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickOutcome {
    pub start_pos: Vec3,
    pub final_pos: Vec3,
    /// Finite difference over the last two cycles.
    pub final_vel: Vec3,
}

/// What a task gets to see when asked for a reward.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeView<'a> {
    /// Every snapshot since reset, wait phase included once it has run.
    pub history: &'a [PerceptorSnapshot],
    /// True once the episode has ended and the wait phase is over.
    pub completed: bool,
    pub ball_start: Vec3,
    /// Agent steps taken, wait cycles excluded.
    pub steps: usize,
}

impl EpisodeView<'_> {
    pub fn kick_outcome(&self) -> Option<KickOutcome> {
        let n = self.history.len();
        let last = self.history.last()?;
        let final_pos = last.ball_world?;
        let final_vel = match n.checked_sub(2).map(|i| &self.history[i]) {
            Some(prev) => match prev.ball_world {
                Some(p) => {
                    let dt = last.sim_time - prev.sim_time;
                    let dt = if dt > 0.0 {
                        dt
                    } else {
                        crate::mockserver::CYCLE
                    };
                    std::array::from_fn(|k| (final_pos[k] - p[k]) / dt)
                }
                None => [0.0; 3],
            },
            None => [0.0; 3],
        };
        Some(KickOutcome {
            start_pos: self.ball_start,
            final_pos,
            final_vel,
        })
    }
}

/// Euclidean distance the ball travelled.
pub fn simple_kick_reward(outcome: &KickOutcome, completed: bool) -> f64 {
    if !completed {
        return 0.0;
    }
    let d: Vec3 = std::array::from_fn(|k| outcome.final_pos[k] - outcome.start_pos[k]);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Signed distance along x only.
pub fn simple_kick_reward_x_only(outcome: &KickOutcome, completed: bool) -> f64 {
    if !completed {
        return 0.0;
    }
    outcome.final_pos[0] - outcome.start_pos[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityKickWeights {
    /// Seconds; weight of the final x velocity.
    pub alpha: f64,
    /// Penalty per metre of sideways drift.
    pub beta: f64,
}

impl Default for VelocityKickWeights {
    fn default() -> Self {
        VelocityKickWeights {
            alpha: 0.5,
            beta: 1.0,
        }
    }
}

/// `Δx + α·v_x − β·|Δy|`.
pub fn velocity_kick_reward(
    outcome: &KickOutcome,
    completed: bool,
    weights: VelocityKickWeights,
) -> f64 {
    if !completed {
        return 0.0;
    }
    let dx = outcome.final_pos[0] - outcome.start_pos[0];
    let dy = outcome.final_pos[1] - outcome.start_pos[1];
    dx + weights.alpha * outcome.final_vel[0] - weights.beta * dy.abs()
}

pub trait Task: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Wait cycles after termination unless the environment overrides it.
    fn default_n_wait(&self) -> usize;

    /// Must be a pure function of the view.
    fn reward(&self, view: &EpisodeView<'_>) -> f64;

    /// Task-specific early termination; falls are handled by the environment.
    fn is_terminated(&self, _view: &EpisodeView<'_>) -> bool {
        false
    }

    /// A copy of this task with `options` applied. Tasks without options
    /// reject any.
    fn with_options(self: Arc<Self>, options: &TaskOptions) -> Result<Arc<dyn Task>, TaskError>;
}

fn reject_options(options: &TaskOptions, allowed: &[&str]) -> Result<(), TaskError> {
    match options.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(TaskError::InvalidOption {
            key: k.clone(),
            reason: format!("not one of [{}]", allowed.join(", ")),
        }),
        None => Ok(()),
    }
}

fn parse_option(options: &TaskOptions, key: &str, default: f64) -> Result<f64, TaskError> {
    let Some(text) = options.get(key) else {
        return Ok(default);
    };
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| TaskError::InvalidOption {
            key: key.into(),
            reason: format!("{text:?} is not a finite number"),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimpleKickReward {
    #[default]
    Norm,
    XOnly,
}

/// Reward is the distance the ball travels by the end of the wait phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimpleKick {
    pub reward: SimpleKickReward,
}

impl Task for SimpleKick {
    fn name(&self) -> &str {
        "simple_kick"
    }

    fn default_n_wait(&self) -> usize {
        SIMPLE_KICK_N_WAIT
    }

    fn reward(&self, view: &EpisodeView<'_>) -> f64 {
        let Some(outcome) = view.kick_outcome() else {
            return 0.0;
        };
        match self.reward {
            SimpleKickReward::Norm => simple_kick_reward(&outcome, view.completed),
            SimpleKickReward::XOnly => simple_kick_reward_x_only(&outcome, view.completed),
        }
    }

    fn with_options(self: Arc<Self>, options: &TaskOptions) -> Result<Arc<dyn Task>, TaskError> {
        reject_options(options, &["reward"])?;
        let reward = match options.get("reward").map(|s| s.trim()) {
            None | Some("norm") => SimpleKickReward::Norm,
            Some("x_only") => SimpleKickReward::XOnly,
            Some(other) => {
                return Err(TaskError::InvalidOption {
                    key: "reward".into(),
                    reason: format!("{other:?} is not norm or x_only"),
                })
            }
        };
        Ok(Arc::new(SimpleKick { reward }))
    }
}

/// Reward favours distance and speed along x and penalises sideways drift.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VelocityKick {
    pub weights: VelocityKickWeights,
}

impl Task for VelocityKick {
    fn name(&self) -> &str {
        "velocity_kick"
    }

    fn default_n_wait(&self) -> usize {
        VELOCITY_KICK_N_WAIT
    }

    fn reward(&self, view: &EpisodeView<'_>) -> f64 {
        match view.kick_outcome() {
            Some(outcome) => velocity_kick_reward(&outcome, view.completed, self.weights),
            None => 0.0,
        }
    }

    fn with_options(self: Arc<Self>, options: &TaskOptions) -> Result<Arc<dyn Task>, TaskError> {
        reject_options(options, &["alpha", "beta"])?;
        Ok(Arc::new(VelocityKick {
            weights: VelocityKickWeights {
                alpha: parse_option(options, "alpha", self.weights.alpha)?,
                beta: parse_option(options, "beta", self.weights.beta)?,
            },
        }))
    }
}

static REGISTRY: LazyLock<RwLock<BTreeMap<String, Arc<dyn Task>>>> = LazyLock::new(|| {
    let mut m: BTreeMap<String, Arc<dyn Task>> = BTreeMap::new();
    m.insert("simple_kick".into(), Arc::new(SimpleKick::default()));
    m.insert("velocity_kick".into(), Arc::new(VelocityKick::default()));
    RwLock::new(m)
});

/// Makes `task` available by its name.
pub fn register_task(task: Arc<dyn Task>) -> Result<(), TaskError> {
    let mut reg = REGISTRY.write().unwrap();
    let name = task.name().to_string();
    if reg.contains_key(&name) {
        return Err(TaskError::DuplicateName(name));
    }
    reg.insert(name, task);
    Ok(())
}

pub fn lookup(name: &str) -> Result<Arc<dyn Task>, TaskError> {
    let reg = REGISTRY.read().unwrap();
    reg.get(name)
        .cloned()
        .ok_or_else(|| TaskError::UnknownTask {
            name: name.into(),
            known: reg.keys().cloned().collect(),
        })
}

/// Registered task names, sorted.
pub fn task_names() -> Vec<String> {
    REGISTRY.read().unwrap().keys().cloned().collect()
}

/// Looks up `name` and applies `options`.
pub fn resolve_task(name: &str, options: &TaskOptions) -> Result<Arc<dyn Task>, TaskError> {
    lookup(name)?.with_options(options)
}
