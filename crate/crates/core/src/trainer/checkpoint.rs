//! Checkpoint files: a text manifest followed by raw little-endian f32
//! tensors in manifest order.
//!
//! ```text
//! rcgym-checkpoint 1
//! seed 1
//! config_hash 3f…
//! timestep 50176
//! obs_dim 29
//! act_dim 4
//! joints rlj2,rlj3,rlj4,rlj5
//! action_mode velocity
//! tensor actor.0.weight 64 29
//! …
//! data 60584
//! <60584 bytes>
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::policy::Policy;

const MAGIC: &str = "rcgym-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub timestep: u64,
    /// Comma-separated controllable joint names.
    pub joints: String,
    pub action_mode: String,
    pub policy: Policy,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.policy;
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("config_hash {}\n", self.config_hash));
        out.push_str(&format!("timestep {}\n", self.timestep));
        out.push_str(&format!("obs_dim {}\n", p.obs_dim()));
        out.push_str(&format!("act_dim {}\n", p.act_dim()));
        out.push_str(&format!("joints {}\n", self.joints));
        out.push_str(&format!("action_mode {}\n", self.action_mode));
        for t in &p.layout().tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("tensor {} {}\n", t.name, dims.join(" ")));
        }
        out.push_str(&format!("data {}\n", p.params.len() * 4));
        let mut bytes = out.into_bytes();
        for t in &p.layout().tensors {
            for v in &p.params[t.offset..t.offset + t.len()] {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: String| CheckpointError::Malformed(m);
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest not terminated".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not utf-8".into()))?;
            pos += end + 1;
            let is_data = line.starts_with("data ");
            lines.push(line);
            if is_data {
                break;
            }
        }
        if lines.first() != Some(&MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut seed = None;
        let mut config_hash = None;
        let mut timestep = None;
        let mut obs_dim = None;
        let mut act_dim = None;
        let mut joints = String::new();
        let mut action_mode = String::new();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        let mut data_len = 0usize;
        for line in &lines[1..] {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| CheckpointError::Malformed(format!("bad number in {line:?}")))
            };
            match key {
                "seed" => seed = Some(num(rest)?),
                "config_hash" => config_hash = Some(rest.to_string()),
                "timestep" => timestep = Some(num(rest)?),
                "obs_dim" => obs_dim = Some(num(rest)? as usize),
                "act_dim" => act_dim = Some(num(rest)? as usize),
                "joints" => joints = rest.to_string(),
                "action_mode" => action_mode = rest.to_string(),
                "tensor" => {
                    let mut parts = rest.split(' ');
                    let name = parts.next().unwrap_or_default().to_string();
                    let shape = parts
                        .map(|d| num(d).map(|v| v as usize))
                        .collect::<Result<Vec<_>, _>>()?;
                    tensors.push((name, shape));
                }
                "data" => data_len = num(rest)? as usize,
                other => return Err(bad(format!("unknown manifest key {other:?}"))),
            }
        }
        let (Some(obs_dim), Some(act_dim)) = (obs_dim, act_dim) else {
            return Err(bad("obs_dim/act_dim missing".into()));
        };
        let mut policy = Policy::zeros(obs_dim, act_dim);
        let expected: Vec<(String, Vec<usize>)> = policy
            .layout()
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if tensors != expected {
            return Err(bad("tensor list does not match the network layout".into()));
        }
        let blob = &bytes[pos..];
        if data_len != policy.params.len() * 4 || blob.len() != data_len {
            return Err(bad(format!(
                "expected {} data bytes, declared {data_len}, found {}",
                policy.params.len() * 4,
                blob.len()
            )));
        }
        for (i, chunk) in blob.chunks_exact(4).enumerate() {
            policy.params[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Ok(Checkpoint {
            seed: seed.ok_or_else(|| bad("seed missing".into()))?,
            config_hash: config_hash.ok_or_else(|| bad("config_hash missing".into()))?,
            timestep: timestep.ok_or_else(|| bad("timestep missing".into()))?,
            joints,
            action_mode,
            policy,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
