//! One SimpleKick episode against the in-process mock simulator, driven by
//! the scripted kick from the test fixtures.

use std::path::Path;

use rcgym::config::RunConfig;
use rcgym::envcore::Env;
use rcgym::tasks;
use rcgym::trainer::{Agent, ScriptedAgent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default().env_config();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scripted_kick.csv");
    let mut agent = ScriptedAgent::load_csv(&script, cfg.act_dim())?;

    let mut env = Env::new(cfg, tasks::lookup("simple_kick")?)?;
    println!("mock server on port {}", env.agent_port());
    let mut obs = env.reset()?;
    loop {
        let r = env.step(&agent.act(&obs))?;
        let ball = r.info.ball_world.unwrap_or_default();
        println!(
            "step {:>2}  t={:.2}s  ball=({:.3}, {:.3})  reward={:.3}",
            r.info.episode_steps, r.info.sim_time, ball[0], ball[1], r.reward
        );
        if r.terminated || r.truncated {
            println!("episode over after {} wait cycles", r.info.wait_cycles);
            break;
        }
        obs = r.observation;
    }
    env.close();
    Ok(())
}
