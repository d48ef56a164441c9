//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Every check runs against the built-in mock server.
//!
//!     cargo test --test acceptance

mod common;

use std::fs;
use std::io::BufReader;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcgym::config::RunConfig;
use rcgym::envcore::Env;
use rcgym::protocol::{decode_snapshot, encode_effectors};
use rcgym::sexpr;
use rcgym::tasks::{self, KickOutcome, VelocityKickWeights};
use rcgym::trace;
use rcgym::trainer::gae::compute_gae;
use rcgym::trainer::{self, evaluate_agent, PolicyAgent, RandomAgent, TrainSpec};
use rcgym::vecenv;
use rcgym::wire::{self, frame_encode, frame_read, ServerKind};

enum Verdict {
    Pass(String),
    Fail(String),
    /// The criterion's precondition does not hold on this machine.
    NotApplicable(String),
}

type Check = Result<Verdict, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fuzz() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    for i in 0..10_000 {
        let t = common::random_tree(&mut rng, 8);
        let back = sexpr::parse(&sexpr::serialize(&t)).map_err(|e| format!("tree {i}: {e}"))?;
        ensure(back == vec![t], || format!("tree {i} did not round-trip"))?;
    }
    let mut rejected = 0;
    for i in 0..10_000 {
        let bytes = common::random_bytes(&mut rng, 256);
        let outcome = panic::catch_unwind(|| {
            let parsed = sexpr::parse(&bytes);
            let _ = decode_snapshot(&bytes, None);
            parsed.is_err()
        });
        match outcome {
            Ok(err) => rejected += usize::from(err),
            Err(_) => return Err(format!("parser aborted on random input {i}: {bytes:?}")),
        }
    }
    let mut sizes: Vec<usize> = (0..48).map(|_| rng.random_range(1..=65536)).collect();
    sizes.extend([1, 2, 3, 4, 5, 65535, 65536]);
    for &n in &sizes {
        let payload: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        let frame = frame_encode(&payload).map_err(|e| e.to_string())?;
        let mut r = common::OneByte { data: &frame, pos: 0 };
        let got = frame_read(&mut r).map_err(|e| format!("{n} bytes: {e}"))?;
        ensure(got == payload, || format!("{n}-byte payload changed in transit"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(Verdict::Pass(format!(
        "10000 trees round-trip, 10000 random inputs handled ({rejected} rejected), {} frames up to 64 KiB in 1-byte chunks, {:.1}s",
        sizes.len(),
        elapsed.as_secs_f64()
    )))
}

fn golden() -> Check {
    let mut records = 0;
    let traces = common::golden_traces();
    ensure(!traces.is_empty(), || "no committed traces".into())?;
    for p in &traces {
        let f = fs::File::open(p).map_err(|e| e.to_string())?;
        let s = trace::replay(BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))?;
        records += s.records;
    }
    let cases = common::effector_cases();
    for c in &cases {
        let got = encode_effectors(&c.batch);
        match (&c.expected, got) {
            (Some(want), Ok(bytes)) => ensure(&bytes == want, || {
                format!("effectors.txt:{} encodes to {:?}", c.line, String::from_utf8_lossy(&bytes))
            })?,
            (None, Err(_)) => {}
            (Some(_), Err(e)) => return Err(format!("effectors.txt:{}: {e}", c.line)),
            (None, Ok(_)) => return Err(format!("effectors.txt:{} should be rejected", c.line)),
        }
    }
    Ok(Verdict::Pass(format!(
        "{} traces ({records} records) replay with 0 decode errors; {} effector strings byte-equal",
        traces.len(),
        cases.len()
    )))
}

fn gae() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ae);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let t = rng.random_range(1..=64);
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..t).map(|_| rng.random_bool(0.1)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.0..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda).map_err(|e| e.to_string())?;
        let want = common::gae_brute_force(&r, &v, &d, boot, gamma, lambda);
        for k in 0..t {
            let err = (adv[k] - want[k]).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || format!("instance {i} step {k}: {} vs {}", adv[k], want[k]))?;
            ensure((ret[k] - (adv[k] + v[k])).abs() <= 1e-12, || format!("instance {i}: returns != A + V"))?;
        }
    }
    // closed forms, on integer data so every operation is exact
    for i in 0..200 {
        let t = rng.random_range(1..=64);
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-8..=8) as f64).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(-8..=8) as f64).collect();
        let d: Vec<bool> = (0..t).map(|_| rng.random_bool(0.15)).collect();
        let boot = rng.random_range(-8..=8) as f64;
        let next = |k: usize| if k + 1 < t { v[k + 1] } else { boot };

        let (adv0, _) = compute_gae(&r, &v, &d, boot, 0.5, 0.0).map_err(|e| e.to_string())?;
        for k in 0..t {
            let delta = r[k] + if d[k] { 0.0 } else { 0.5 * next(k) } - v[k];
            ensure(adv0[k] == delta, || format!("λ=0 instance {i} step {k}: {} vs {delta}", adv0[k]))?;
        }

        let (adv1, _) = compute_gae(&r, &v, &d, boot, 1.0, 1.0).map_err(|e| e.to_string())?;
        for k in 0..t {
            let mut g = 0.0;
            let mut j = k;
            loop {
                g += r[j];
                if d[j] {
                    break;
                }
                if j + 1 == t {
                    g += boot;
                    break;
                }
                j += 1;
            }
            ensure(adv1[k] == g - v[k], || format!("γ=λ=1 instance {i} step {k}: {} vs {}", adv1[k], g - v[k]))?;
        }
    }
    Ok(Verdict::Pass(format!(
        "1000 instances within 1e-9 of brute force (max err {worst:.1e}); λ=0 and γ=λ=1 closed forms exact"
    )))
}

fn rewards() -> Check {
    let o = |start: [f64; 3], fin: [f64; 3], vel: [f64; 3]| KickOutcome {
        start_pos: start,
        final_pos: fin,
        final_vel: vel,
    };
    let r = tasks::simple_kick_reward(&o([0.0, 0.0, 0.042], [3.0, 4.0, 0.042], [0.0; 3]), true);
    ensure(r == 5.0, || format!("3-4-5 gave {r}"))?;
    ensure(tasks::simple_kick_reward(&o([0.0; 3], [3.0, 4.0, 0.0], [0.0; 3]), false) == 0.0, || {
        "incomplete SimpleKick not 0".into()
    })?;
    // (Δx, v_x, Δy, α, β, expected), expected worked by hand on binary-exact values
    let table = [
        (2.0, 3.0, 0.5, 0.5, 1.0, 3.0),
        (0.0, 0.0, 1.0, 0.5, 1.0, -1.0),
        (0.0, 0.0, 0.0, 0.5, 1.0, 0.0),
        (1.25, -0.5, -0.75, 0.25, 2.0, -0.375),
        (-1.0, 4.0, 0.125, 0.5, 1.0, 0.875),
        (6.5, 8.0, -2.0, 0.0, 0.5, 5.5),
    ];
    for (dx, vx, dy, alpha, beta, want) in table {
        let start = [0.5, -0.25, 0.042];
        let out = o(start, [start[0] + dx, start[1] + dy, 0.042], [vx, 0.25, 0.0]);
        let w = VelocityKickWeights { alpha, beta };
        let got = tasks::velocity_kick_reward(&out, true, w);
        ensure(got == want, || format!("VelocityKick({dx},{vx},{dy},{alpha},{beta}) = {got}, want {want}"))?;
        ensure(tasks::velocity_kick_reward(&out, false, w) == 0.0, || "incomplete VelocityKick not 0".into())?;
    }
    ensure(
        tasks::velocity_kick_reward(&o([0.0; 3], [2.0, 0.5, 0.0], [3.0, 0.0, 0.0]), true, VelocityKickWeights::default()) == 3.0,
        || "worked example is not 3.0".into(),
    )?;

    let mut mid = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (task, n_wait) in [("simple_kick", 200), ("velocity_kick", 20)] {
        let cfg = common::leg_env(12, 12);
        let mut env = Env::new(cfg, tasks::lookup(task).unwrap()).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            env.reset().map_err(|e| e.to_string())?;
            let t0 = env.history().last().unwrap().sim_time;
            loop {
                let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = env.step(&a).map_err(|e| e.to_string())?;
                if s.terminated || s.truncated {
                    ensure(s.info.wait_cycles == n_wait, || format!("{task}: {} wait cycles", s.info.wait_cycles))?;
                    let cycles = ((s.info.sim_time - t0) / 0.02).round() as usize;
                    ensure(cycles == s.info.episode_steps + n_wait, || {
                        format!("{task}: {cycles} cycles for {} steps", s.info.episode_steps)
                    })?;
                    break;
                }
                ensure(s.reward == 0.0, || format!("{task}: mid-episode reward {}", s.reward))?;
                mid += 1;
            }
        }
        env.close();
    }
    Ok(Verdict::Pass(format!(
        "3-4-5 → 5.0, {} VelocityKick rows exact, {mid} mid-episode rewards all 0, wait cycles 200/20",
        table.len()
    )))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["task.name=velocity_kick", "num_envs=8", "seed=13", "trainer.total_timesteps=1024"])
        .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    let mut episodes = 0;
    for run in ["a", "b"] {
        cfg.out = Some(dir.path().join(run));
        let spec = cfg.train_spec().map_err(|e| e.to_string())?;
        let s = trainer::train(&spec).map_err(|e| e.to_string())?;
        episodes = s.episodes;
        let out = cfg.out.as_ref().unwrap();
        outputs.push((
            fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?,
            fs::read(out.join("ckpt_final.bin")).map_err(|e| e.to_string())?,
        ));
    }
    ensure(episodes >= 5 * 8, || format!("only {episodes} episodes"))?;
    ensure(outputs[0].0 == outputs[1].0, || "metrics.csv differs between runs".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "final checkpoints differ".into())?;
    let crossed = common::vec_matches_sequential(8, 40, 13)?;
    Ok(Verdict::Pass(format!(
        "2 runs × {episodes} episodes on 8 envs: metrics.csv and checkpoint bit-identical; 8-env VecEnv equals 8 sequential envs over {crossed} episodes"
    )))
}

fn learning() -> Check {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["task.name=velocity_kick", "num_envs=8", "trainer.total_timesteps=50000", "seed=0"])
        .map_err(|e| e.to_string())?;
    let t = &cfg.trainer;
    ensure(
        (t.gamma, t.gae_lambda, t.n_steps, t.epochs, t.clip_range, t.learning_rate, t.entropy_coef)
            == (0.99, 0.95, 64, 10, 0.2, 1e-4, 0.0),
        || "trainer defaults drifted from the reference hyperparameters".into(),
    )?;
    ensure(cfg.env.controllable.len() == 4, || "expected the 4-joint leg set".into())?;
    let env = cfg.env_config();
    let task = cfg.resolve_task().map_err(|e| e.to_string())?;

    let mut random = RandomAgent::new(env.act_dim(), 1000);
    let baseline = evaluate_agent(&mut random, &env, Arc::clone(&task), 200).map_err(|e| e.to_string())?;

    let spec: TrainSpec = cfg.train_spec().map_err(|e| e.to_string())?;
    let summary = trainer::train(&spec).map_err(|e| e.to_string())?;
    let trained = summary.mean_ep_reward.unwrap_or(f64::NAN);
    let greedy = evaluate_agent(&mut PolicyAgent(summary.policy.clone()), &env, task, 20)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "random baseline {:.4} (200 eps), trained rolling mean {trained:.4} over last 100 of {} eps = {:.1}× ; mean-action eval {:.4}; {:.0}s",
        baseline.mean,
        summary.episodes,
        trained / baseline.mean,
        greedy.mean,
        elapsed.as_secs_f64()
    );
    if baseline.mean > 0.0 && trained >= 2.0 * baseline.mean && elapsed < Duration::from_secs(600) {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Fail(detail))
    }
}

fn throughput() -> Check {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cfg = RunConfig::default();
    let task = tasks::lookup("velocity_kick").unwrap();
    let rows = vecenv::throughput_bench(&[1, 2, 4, 8], 1000, &cfg.env_config(), task).map_err(|e| e.to_string())?;
    let sps: Vec<String> = rows.iter().map(|r| format!("{}:{:.0}", r.n, r.steps_per_sec)).collect();
    let speedup = rows[3].steps_per_sec / rows[0].steps_per_sec;
    let increasing = rows.windows(2).all(|w| w[1].steps_per_sec > w[0].steps_per_sec);
    let detail = format!("steps/s {} ; speedup at 8 = {speedup:.2}× ; {cores} cores", sps.join(" "));
    if cores < 4 {
        return Ok(Verdict::NotApplicable(format!("needs ≥4 cores; measured {detail}")));
    }
    if increasing && speedup >= 3.0 {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Fail(detail))
    }
}

fn hygiene() -> Check {
    let task = tasks::lookup("velocity_kick").unwrap();
    let mut cfg = common::leg_env(3, 5);
    cfg.server.kind = ServerKind::SpawnedReal;
    cfg.server.binary_path = Some(PathBuf::from(common::bin()));
    cfg.server.extra_args = vec!["serve-mock".into()];
    cfg.upright_accel = Some([0.0, 0.0, -9.8]);
    let mut venv = vecenv::VecEnv::new(2, &cfg, task).map_err(|e| e.to_string())?;
    venv.reset().map_err(|e| e.to_string())?;
    let ports = venv.ports().to_vec();
    venv.close();
    ensure(wire::live_servers() == 0, || format!("{} servers still live", wire::live_servers()))?;
    ensure(wire::live_processes() == 0, || format!("{} processes not reaped", wire::live_processes()))?;
    ensure(wire::ports_in_use().is_empty(), || format!("ports reserved: {:?}", wire::ports_in_use()))?;
    for p in ports {
        ensure(wire::port_is_free(p), || format!("port {p} still bound"))?;
    }
    Ok(Verdict::Pass("after the suite: 0 live servers, 0 server processes, 0 reserved ports".into()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("parser/framing fuzz", fuzz),
        ("protocol golden traces", golden),
        ("GAE oracle", gae),
        ("reward formulas", rewards),
        ("end-to-end determinism", determinism),
        ("learning smoke test", learning),
        ("throughput scaling", throughput),
        ("process hygiene", hygiene),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let verdict = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(v)) => v,
            Ok(Err(msg)) => Verdict::Fail(msg),
            Err(_) => Verdict::Fail("panicked".into()),
        };
        match verdict {
            Verdict::Pass(d) => println!("PASS  {name}: {d}"),
            Verdict::NotApplicable(d) => println!("N/A   {name}: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
