//! Record a wire trace of a few random episodes and decode it again.

use std::fs;
use std::io::BufReader;

use rcgym::config::RunConfig;
use rcgym::tasks;
use rcgym::trace;
use rcgym::trainer::{record_trace, RandomAgent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default().env_config();
    let path = std::env::temp_dir().join("rcgym_example.trace");
    let mut agent = RandomAgent::new(cfg.act_dim(), 3);
    let written = record_trace(
        &mut agent,
        &cfg,
        tasks::lookup("velocity_kick")?,
        60,
        fs::File::create(&path)?,
    )?;
    println!("{written} records in {}", path.display());

    let summary = trace::replay(BufReader::new(fs::File::open(&path)?))?;
    for line in summary.cycles.iter().take(5) {
        println!("{line}");
    }
    println!(
        "... {} to_server, {} from_server, no decode errors",
        summary.to_server, summary.from_server
    );
    Ok(())
}
