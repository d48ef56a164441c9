//! Run an episode against a real `rcssserver3d`. The binary comes from
//! `RCSS_SERVER_BIN`; without it the example says so and exits.

use rcgym::config::RunConfig;
use rcgym::envcore::Env;
use rcgym::tasks;
use rcgym::wire::SERVER_BIN_ENV;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    if std::env::var_os(SERVER_BIN_ENV).is_none() {
        println!("set {SERVER_BIN_ENV} to an rcssserver3d binary to run this example");
        return Ok(());
    }
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["server.kind=real", "server.base_port=3100"])?;
    let mut env = Env::new(cfg.env_config(), tasks::lookup("simple_kick")?)?;
    env.reset()?;
    let zero = vec![0.0; cfg.env.act_dim()];
    loop {
        let r = env.step(&zero)?;
        if r.terminated || r.truncated {
            println!("reward {:.3} after {} steps", r.reward, r.info.episode_steps);
            break;
        }
    }
    env.close();
    Ok(())
}
