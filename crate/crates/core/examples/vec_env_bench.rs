//! Step batches of mock environments in parallel and write the throughput
//! table and plot.

use rcgym::config::RunConfig;
use rcgym::tasks;
use rcgym::vecenv::{bench_csv, bench_svg, throughput_bench, VecEnv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default().env_config();
    let task = tasks::lookup("velocity_kick")?;

    let mut venv = VecEnv::new(4, &cfg, task.clone())?;
    println!("4 envs on ports {:?}", venv.ports());
    venv.reset()?;
    let out = venv.step(&vec![vec![0.5, -0.5, 0.25, 0.0]; 4])?;
    println!("rewards {:?}, obs dim {}", out.rewards, out.observations[0].len());
    venv.close();

    let rows = throughput_bench(&[1, 2, 4, 8], 1000, &cfg, task)?;
    print!("{}", bench_csv(&rows));
    std::fs::write("bench.svg", bench_svg(&rows))?;
    println!("plot written to bench.svg");
    Ok(())
}
