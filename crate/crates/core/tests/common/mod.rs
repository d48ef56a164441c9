#![allow(dead_code)]

use std::io::{self, Read};
use std::path::Path;

use rand::Rng;
use rcgym::envcore::EnvConfig;
use rcgym::nao::JointSet;
use rcgym::sexpr::{Atom, SExpr};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rcgym")
}

pub fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

/// Bytes allowed inside an atom, weighted toward protocol-looking text.
fn atom_byte<R: Rng>(rng: &mut R) -> u8 {
    const COMMON: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCXYZ0123456789.-+_eE";
    if rng.random_bool(0.9) {
        COMMON[rng.random_range(0..COMMON.len())]
    } else {
        loop {
            let b: u8 = rng.random_range(1..=255);
            if !(b == b'(' || b == b')' || b.is_ascii_whitespace()) {
                return b;
            }
        }
    }
}

pub fn random_atom<R: Rng>(rng: &mut R) -> Atom {
    let len = rng.random_range(1..=12);
    Atom::new((0..len).map(|_| atom_byte(rng)).collect::<Vec<u8>>()).unwrap()
}

/// Random tree with nesting at most `depth`.
pub fn random_tree<R: Rng>(rng: &mut R, depth: usize) -> SExpr {
    if depth == 0 || rng.random_bool(0.35) {
        return SExpr::Atom(random_atom(rng));
    }
    let width = rng.random_range(0..=5);
    SExpr::List((0..width).map(|_| random_tree(rng, depth - 1)).collect())
}

/// Byte strings biased toward parser-relevant bytes.
pub fn random_bytes<R: Rng>(rng: &mut R, max_len: usize) -> Vec<u8> {
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|_| match rng.random_range(0..6) {
            0 => b'(',
            1 => b')',
            2 => b' ',
            _ => rng.random(),
        })
        .collect()
}

/// Hands out at most one byte per read call.
pub struct OneByte<'a> {
    pub data: &'a [u8],
    pub pos: usize,
}

impl Read for OneByte<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pos >= self.data.len() || buf.is_empty() {
            return Ok(0);
        }
        buf[0] = self.data[self.pos];
        self.pos += 1;
        Ok(1)
    }
}

/// A mock-backed leg env with short episodes.
pub fn leg_env(seed: u64, max_episode_steps: usize) -> EnvConfig {
    EnvConfig {
        controllable: JointSet::leg4(),
        max_episode_steps,
        seed,
        ..Default::default()
    }
}

/// Straightforward O(T²) advantage: A_t = Σ_l (γλ)^l δ_{t+l}, cut at the
/// first episode end.
pub fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let t_len = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] {
            0.0
        } else if t + 1 < t_len {
            values[t + 1]
        } else {
            bootstrap
        };
        rewards[t] + gamma * next - values[t]
    };
    (0..t_len)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for l in t..t_len {
                sum += w * delta(l);
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// True while `/proc/<pid>` exists and the process is not a zombie.
pub fn process_alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat
            .rsplit_once(')')
            .map(|(_, rest)| rest.trim_start().starts_with('Z'))
            .unwrap_or(false),
        Err(_) => false,
    }
}

/// Steps a `VecEnv` of `n` envs and `n` independent single envs built from
/// the same per-env configs with identical random actions, and reports the
/// first difference.
pub fn vec_matches_sequential(n: usize, steps: usize, seed: u64) -> Result<usize, String> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rcgym::envcore::Env;
    use rcgym::tasks;
    use rcgym::vecenv::{batch_configs, VecEnv};

    let task = tasks::lookup("velocity_kick").unwrap();
    let cfg = leg_env(seed, 15);
    let mut venv = VecEnv::new(n, &cfg, task.clone()).map_err(|e| e.to_string())?;
    let mut singles: Vec<Env> = batch_configs(n, &cfg)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|mut c| {
            c.server.base_port = 0;
            Env::new(c, task.clone()).unwrap()
        })
        .collect();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let vobs = venv.reset().map_err(|e| e.to_string())?;
    for (i, env) in singles.iter_mut().enumerate() {
        if bits(&env.reset().unwrap()) != bits(&vobs[i]) {
            return Err(format!("env {i}: reset observation differs"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut episodes = 0;
    for t in 0..steps {
        let actions: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let out = venv.step(&actions).map_err(|e| e.to_string())?;
        for (i, env) in singles.iter_mut().enumerate() {
            let r = env.step(&actions[i]).unwrap();
            let done = r.terminated || r.truncated;
            let expected_obs = if done {
                episodes += 1;
                let term = out.infos[i].terminal_observation.as_deref().unwrap_or(&[]);
                if bits(term) != bits(&r.observation) {
                    return Err(format!("step {t} env {i}: terminal observation differs"));
                }
                env.reset().unwrap()
            } else {
                r.observation
            };
            if bits(&expected_obs) != bits(&out.observations[i])
                || r.reward.to_bits() != out.rewards[i].to_bits()
                || r.terminated != out.terminated[i]
                || r.truncated != out.truncated[i]
            {
                return Err(format!("step {t} env {i}: row differs from its oracle"));
            }
        }
    }
    venv.close();
    for mut e in singles {
        e.close();
    }
    Ok(episodes)
}

/// One parsed line of `golden/effectors.txt`.
pub struct EffectorCase {
    pub batch: rcgym::protocol::EffectorBatch,
    pub expected: Option<Vec<u8>>,
    pub line: usize,
}

pub fn effector_cases() -> Vec<EffectorCase> {
    let text = std::fs::read_to_string(manifest_dir().join("tests/golden/effectors.txt")).unwrap();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (spec, expected) = line.split_once(" | ").unwrap_or((line.trim_end_matches(" |"), ""));
        let mut words: Vec<&str> = spec.split_whitespace().collect();
        let sync = match words.pop() {
            Some("sync") => true,
            Some("nosync") => false,
            other => panic!("line {}: bad sync flag {other:?}", i + 1),
        };
        let mut batch = rcgym::protocol::EffectorBatch::new(sync);
        for w in words {
            let (name, v) = w.split_once('=').unwrap();
            batch.set(rcgym::nao::by_name(name).unwrap().index, v.parse().unwrap());
        }
        let expected = (expected.trim() != "ERROR").then(|| expected.trim_end().as_bytes().to_vec());
        out.push(EffectorCase { batch, expected, line: i + 1 });
    }
    out
}

/// Committed `.trace` files, sorted.
pub fn golden_traces() -> Vec<std::path::PathBuf> {
    let mut paths: Vec<_> = std::fs::read_dir(manifest_dir().join("tests/golden"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    paths.sort();
    paths
}
