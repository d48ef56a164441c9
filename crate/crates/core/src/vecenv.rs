//! Lockstep batch of environments, one worker thread per env.
//!
//! Env `i` gets agent port `base + i` and seed `seed + i`. Finished envs are
//! reset in place: the batch row holds the new initial observation and the
//! per-env info carries the terminal observation and info.

use std::fmt::Write as _;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::envcore::{Env, EnvConfig, EnvError, StepInfo, StepResult};
use crate::tasks::Task;
use crate::trace::TraceTap;
use crate::wire;

#[derive(Debug, Error)]
pub enum VecEnvError {
    #[error("num_envs must be at least 1")]
    NoEnvs,
    #[error("expected {expected} action rows of length {act_dim}, got {rows} rows")]
    DimensionMismatch {
        expected: usize,
        act_dim: usize,
        rows: usize,
    },
    #[error("env {index}: {source}")]
    EnvFailed {
        index: usize,
        #[source]
        source: EnvError,
    },
    #[error("vector env was closed after a failure")]
    Closed,
}

/// Seed of env `index` in a batch seeded with `seed`.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Per-env configs for a batch of `n`, with ports and seeds assigned.
pub fn batch_configs(n: usize, config: &EnvConfig) -> Result<Vec<EnvConfig>, VecEnvError> {
    if n == 0 {
        return Err(VecEnvError::NoEnvs);
    }
    let base = match config.server.base_port {
        0 => wire::auto_base_port(n).map_err(|e| VecEnvError::EnvFailed {
            index: 0,
            source: e.into(),
        })?,
        p => p,
    };
    Ok((0..n)
        .map(|i| {
            let mut c = config.clone();
            c.server.base_port = base + i as u16;
            c.seed = env_seed(config.seed, i);
            c
        })
        .collect())
}

enum Cmd {
    Reset,
    Step(Vec<f64>),
    Tap(Option<TraceTap>),
}

type Reply = Result<StepResult, EnvError>;

struct Worker {
    tx: Sender<Cmd>,
    rx: Receiver<Reply>,
    thread: Option<JoinHandle<()>>,
}

fn worker_loop(mut env: Env, rx: Receiver<Cmd>, tx: Sender<Reply>) {
    while let Ok(cmd) = rx.recv() {
        let reply = match cmd {
            Cmd::Reset => env.reset().map(|observation| StepResult {
                observation,
                reward: 0.0,
                terminated: false,
                truncated: false,
                info: StepInfo::default(),
            }),
            Cmd::Step(action) => env.step(&action).and_then(|mut r| {
                if r.terminated || r.truncated {
                    let fresh = env.reset()?;
                    let terminal_obs = std::mem::replace(&mut r.observation, fresh);
                    let terminal_info = r.info.clone();
                    r.info.terminal_observation = Some(terminal_obs);
                    r.info.terminal_info = Some(Box::new(terminal_info));
                }
                Ok(r)
            }),
            Cmd::Tap(tap) => {
                env.set_trace_tap(tap);
                continue;
            }
        };
        if tx.send(reply).is_err() {
            break;
        }
    }
    env.close();
}

/// Batched step output; row `i` belongs to env `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub infos: Vec<StepInfo>,
}

pub struct VecEnv {
    workers: Vec<Worker>,
    ports: Vec<u16>,
    obs_dim: usize,
    act_dim: usize,
    closed: bool,
}

impl VecEnv {
    /// Starts `n` environments. If any fails to start, the ones already
    /// started are torn down and the error is returned.
    pub fn new(n: usize, config: &EnvConfig, task: Arc<dyn Task>) -> Result<Self, VecEnvError> {
        let configs = batch_configs(n, config)?;
        let mut envs = Vec::with_capacity(n);
        for (index, c) in configs.into_iter().enumerate() {
            // dropping `envs` on error closes the ones already running
            let env = Env::new(c, Arc::clone(&task))
                .map_err(|source| VecEnvError::EnvFailed { index, source })?;
            envs.push(env);
        }
        let obs_dim = config.obs_dim();
        let act_dim = config.act_dim();
        let ports = envs.iter().map(|e| e.agent_port()).collect();
        let workers = envs
            .into_iter()
            .enumerate()
            .map(|(i, env)| {
                let (cmd_tx, cmd_rx) = mpsc::channel();
                let (reply_tx, reply_rx) = mpsc::channel();
                let thread = thread::Builder::new()
                    .name(format!("env-{i}"))
                    .spawn(move || worker_loop(env, cmd_rx, reply_tx))
                    .expect("spawn env worker");
                Worker {
                    tx: cmd_tx,
                    rx: reply_rx,
                    thread: Some(thread),
                }
            })
            .collect();
        Ok(VecEnv {
            workers,
            ports,
            obs_dim,
            act_dim,
            closed: false,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.workers.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Agent port of each env.
    pub fn ports(&self) -> &[u16] {
        &self.ports
    }

    /// Sends the same tap to every env.
    pub fn set_trace_tap(&mut self, tap: Option<TraceTap>) {
        for w in &self.workers {
            let _ = w.tx.send(Cmd::Tap(tap.clone()));
        }
    }

    fn broadcast(&mut self, cmds: Vec<Cmd>) -> Result<Vec<StepResult>, VecEnvError> {
        if self.closed {
            return Err(VecEnvError::Closed);
        }
        for (w, cmd) in self.workers.iter().zip(cmds) {
            // a dead worker shows up as a missing reply below
            let _ = w.tx.send(cmd);
        }
        let mut out = Vec::with_capacity(self.workers.len());
        let mut failure = None;
        for (index, w) in self.workers.iter().enumerate() {
            match w.rx.recv() {
                Ok(Ok(r)) => out.push(r),
                Ok(Err(source)) => {
                    failure.get_or_insert(VecEnvError::EnvFailed { index, source });
                }
                Err(_) => {
                    failure.get_or_insert(VecEnvError::EnvFailed {
                        index,
                        source: EnvError::EpisodeFinished,
                    });
                }
            }
        }
        if let Some(e) = failure {
            self.close();
            return Err(e);
        }
        Ok(out)
    }

    /// Resets every env; row `i` is env `i`'s initial observation.
    pub fn reset(&mut self) -> Result<Vec<Vec<f64>>, VecEnvError> {
        let cmds = self.workers.iter().map(|_| Cmd::Reset).collect();
        Ok(self
            .broadcast(cmds)?
            .into_iter()
            .map(|r| r.observation)
            .collect())
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<VecStep, VecEnvError> {
        if actions.len() != self.workers.len() || actions.iter().any(|a| a.len() != self.act_dim) {
            return Err(VecEnvError::DimensionMismatch {
                expected: self.workers.len(),
                act_dim: self.act_dim,
                rows: actions.len(),
            });
        }
        let cmds = actions.iter().map(|a| Cmd::Step(a.clone())).collect();
        let results = self.broadcast(cmds)?;
        let n = results.len();
        let mut out = VecStep {
            observations: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            infos: Vec::with_capacity(n),
        };
        for r in results {
            out.observations.push(r.observation);
            out.rewards.push(r.reward);
            out.terminated.push(r.terminated);
            out.truncated.push(r.truncated);
            out.infos.push(r.info);
        }
        Ok(out)
    }

    /// Stops all workers and their servers.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        for w in &mut self.workers {
            // closing the command channel ends the worker loop
            let (dead_tx, _) = mpsc::channel();
            drop(std::mem::replace(&mut w.tx, dead_tx));
        }
        for w in &mut self.workers {
            if let Some(t) = w.thread.take() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for VecEnv {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub steps_per_sec: f64,
    pub wall_s: f64,
    /// Env steps taken; identical across runs with the same seed.
    pub env_steps: usize,
}

/// Steps `n` envs for `steps` lockstep steps with seeded random actions,
/// for every `n` in `n_list`.
pub fn throughput_bench(
    n_list: &[usize],
    steps: usize,
    config: &EnvConfig,
    task: Arc<dyn Task>,
) -> Result<Vec<BenchRow>, VecEnvError> {
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut venv = VecEnv::new(n, config, Arc::clone(&task))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let act_dim = venv.act_dim();
        let start = Instant::now();
        venv.reset()?;
        for _ in 0..steps {
            let actions: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect();
            venv.step(&actions)?;
        }
        let wall_s = start.elapsed().as_secs_f64();
        venv.close();
        let env_steps = n * steps;
        rows.push(BenchRow {
            n,
            steps_per_sec: env_steps as f64 / wall_s.max(1e-9),
            wall_s,
            env_steps,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,steps_per_sec,wall_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.3},{:.6}", r.n, r.steps_per_sec, r.wall_s);
    }
    out
}

/// Line plot of steps/s against the number of envs.
pub fn bench_svg(rows: &[BenchRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 50.0;
    let max_n = rows.iter().map(|r| r.n).max().unwrap_or(1).max(1) as f64;
    let max_y = rows
        .iter()
        .map(|r| r.steps_per_sec)
        .fold(0.0, f64::max)
        .max(1.0);
    let px = |n: usize| M + (n as f64 / max_n) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y / max_y) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
        y0 = H - M,
        x1 = W - M
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{y0}" stroke="black"/>"#,
        y0 = H - M
    );
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.1},{:.1}", px(r.n), py(r.steps_per_sec)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    for r in rows {
        let (x, y) = (px(r.n), py(r.steps_per_sec));
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="steelblue"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            H - M + 16.0,
            r.n
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{:.0}</text>"#,
            y - 8.0,
            r.steps_per_sec
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">environments</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">steps/s</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nao::JointSet;
    use crate::tasks;

    fn cfg() -> EnvConfig {
        EnvConfig {
            controllable: JointSet::leg4(),
            max_episode_steps: 3,
            n_wait: Some(2),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn ports_follow_base() {
        let c = cfg();
        let base = wire::auto_base_port(4).unwrap();
        let mut c2 = c.clone();
        c2.server.base_port = base;
        let venv = VecEnv::new(4, &c2, tasks::lookup("simple_kick").unwrap()).unwrap();
        assert_eq!(venv.ports(), &[base, base + 1, base + 2, base + 3]);
    }

    #[test]
    fn zero_envs_rejected() {
        assert!(matches!(
            VecEnv::new(0, &cfg(), tasks::lookup("simple_kick").unwrap()),
            Err(VecEnvError::NoEnvs)
        ));
    }

    #[test]
    fn auto_reset_and_shape_checks() {
        let mut venv = VecEnv::new(2, &cfg(), tasks::lookup("velocity_kick").unwrap()).unwrap();
        let obs = venv.reset().unwrap();
        assert_eq!(obs.len(), 2);
        assert!(obs.iter().all(|o| o.len() == 29));
        assert!(matches!(
            venv.step(&[vec![0.0; 4]]),
            Err(VecEnvError::DimensionMismatch { .. })
        ));
        let zero = vec![vec![0.0; 4]; 2];
        venv.step(&zero).unwrap();
        venv.step(&zero).unwrap();
        let r = venv.step(&zero).unwrap();
        assert!(r.truncated.iter().all(|&t| t));
        for (i, info) in r.infos.iter().enumerate() {
            let term = info.terminal_observation.as_ref().unwrap();
            assert_eq!(term.len(), 29);
            assert_eq!(info.terminal_info.as_ref().unwrap().wait_cycles, 2);
            // the row is the new episode's first observation: zero velocities
            assert!(r.observations[i][4..8].iter().all(|&v| v == 0.0));
        }
        // still usable after the auto-reset
        venv.step(&zero).unwrap();
    }

    #[test]
    fn csv_and_svg_shapes() {
        let rows = [
            BenchRow {
                n: 1,
                steps_per_sec: 100.0,
                wall_s: 1.0,
                env_steps: 100,
            },
            BenchRow {
                n: 8,
                steps_per_sec: 500.0,
                wall_s: 1.6,
                env_steps: 800,
            },
        ];
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("n,steps_per_sec,wall_s\n1,100.000,"));
        let svg = bench_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
