//! Registering a new task: reward the ball's final speed, whatever its
//! direction, and evaluate a random agent on it.

use std::sync::Arc;

use rcgym::config::RunConfig;
use rcgym::tasks::{self, EpisodeView, Task, TaskError, TaskOptions};
use rcgym::trainer::{evaluate_agent, RandomAgent};

#[derive(Debug)]
struct BallSpeed;

impl Task for BallSpeed {
    fn name(&self) -> &str {
        "ball_speed"
    }

    fn default_n_wait(&self) -> usize {
        5
    }

    fn reward(&self, view: &EpisodeView<'_>) -> f64 {
        if !view.completed {
            return 0.0;
        }
        view.kick_outcome()
            .map(|o| o.final_vel[0].hypot(o.final_vel[1]))
            .unwrap_or(0.0)
    }

    fn with_options(self: Arc<Self>, options: &TaskOptions) -> Result<Arc<dyn Task>, TaskError> {
        match options.keys().next() {
            Some(k) => Err(TaskError::InvalidOption {
                key: k.clone(),
                reason: "ball_speed takes no options".into(),
            }),
            None => Ok(self),
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    tasks::register_task(Arc::new(BallSpeed))?;
    println!("registered tasks: {}", tasks::task_names().join(", "));

    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["task.name=ball_speed"])?;
    let env = cfg.env_config();
    let mut agent = RandomAgent::new(env.act_dim(), 7);
    let summary = evaluate_agent(&mut agent, &env, cfg.resolve_task()?, 50)?;
    println!("random agent: mean {:.4} m/s, std {:.4}", summary.mean, summary.std);
    Ok(())
}
