//! Train PPO on VelocityKick with the desk defaults, then compare the saved
//! policy against a random agent.
//!
//!     cargo run --release --example train_ppo -- [total_steps] [out_dir]

use std::path::PathBuf;

use rcgym::config::RunConfig;
use rcgym::trainer::{self, evaluate_agent, RandomAgent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let total = args.next().unwrap_or_else(|| "50000".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/train_ppo".into()));

    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["task.name=velocity_kick", "num_envs=8", "seed=1"])?;
    cfg.set("trainer.total_timesteps", &total, "argv")?;
    cfg.out = Some(out.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.resolved"), cfg.resolved())?;

    let summary = trainer::train(&cfg.train_spec()?)?;
    for row in summary.rows.iter().step_by(16) {
        println!("{}", row.to_csv());
    }
    println!("{} episodes, rolling mean {:?}", summary.episodes, summary.mean_ep_reward);

    let env = cfg.env_config();
    let ckpt = summary.final_checkpoint.expect("out dir set");
    let trained = trainer::evaluate(&ckpt, &env, cfg.resolve_task()?, 20)?;
    let mut random = RandomAgent::new(env.act_dim(), 99);
    let baseline = evaluate_agent(&mut random, &env, cfg.resolve_task()?, 100)?;
    println!("mean-action policy {:.4}, random {:.4}", trained.mean, baseline.mean);
    Ok(())
}
