//! Actor-critic MLP with a diagonal Gaussian action head.
//!
//! All parameters live in one flat vector described by a [`Layout`]; the
//! optimiser, gradient clipping and checkpoints work on that vector.

use rand::Rng;
use rand_distr::StandardNormal;

pub const HIDDEN: usize = 64;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape,
            offset,
        };
        self.total += spec.len();
        self.tensors.push(spec);
        offset
    }
}

/// Offsets of one dense layer inside the flat vector. Weights are
/// `[out, in]`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

/// Three dense layers with tanh after the first two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Mlp([Dense; 3]);

impl Mlp {
    fn build(layout: &mut Layout, prefix: &str, sizes: [usize; 4]) -> Self {
        Mlp(std::array::from_fn(|i| {
            let (inp, out) = (sizes[i], sizes[i + 1]);
            let w = layout.push(format!("{prefix}.{i}.weight"), vec![out, inp]);
            let b = layout.push(format!("{prefix}.{i}.bias"), vec![out]);
            Dense { w, b, inp, out }
        }))
    }
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn dense(p: &[f64], d: Dense, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for o in 0..d.out {
        let row = &p[d.w + o * d.inp..d.w + (o + 1) * d.inp];
        let mut s = p[d.b + o];
        for (w, xi) in row.iter().zip(x) {
            s += w * xi;
        }
        out.push(s);
    }
}

fn mlp_forward(p: &[f64], m: Mlp, x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
    dense(p, m.0[0], x, &mut cache.h1);
    cache.h1.iter_mut().for_each(|v| *v = v.tanh());
    dense(p, m.0[1], &cache.h1, &mut cache.h2);
    cache.h2.iter_mut().for_each(|v| *v = v.tanh());
    let mut out = Vec::with_capacity(m.0[2].out);
    dense(p, m.0[2], &cache.h2, &mut out);
    out
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
fn mlp_backward(p: &[f64], m: Mlp, x: &[f64], cache: &MlpCache, dout: &[f64], grad: &mut [f64]) {
    let mut upstream = dout.to_vec();
    let inputs: [&[f64]; 3] = [x, &cache.h1, &cache.h2];
    for layer in (0..3).rev() {
        let d = m.0[layer];
        let input = inputs[layer];
        let mut dx = vec![0.0; d.inp];
        for o in 0..d.out {
            let g = upstream[o];
            if g == 0.0 {
                continue;
            }
            grad[d.b + o] += g;
            let w_row = d.w + o * d.inp;
            for i in 0..d.inp {
                grad[w_row + i] += g * input[i];
                dx[i] += g * p[w_row + i];
            }
        }
        if layer > 0 {
            // through tanh: d/dz = (1 − h²)
            for (g, h) in dx.iter_mut().zip(input) {
                *g *= 1.0 - h * h;
            }
        }
        upstream = dx;
    }
}

/// Orthogonal matrix `[rows, cols]` scaled by `gain`.
fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (count, dim) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while vecs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    obs_dim: usize,
    act_dim: usize,
    actor: Mlp,
    critic: Mlp,
    log_std: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

/// Forward results for one observation.
#[derive(Debug, Clone, Default)]
pub struct Forward {
    pub mean: Vec<f64>,
    pub value: f64,
    pub actor_cache: MlpCache,
    pub critic_cache: MlpCache,
}

impl Policy {
    /// Zero-initialised network; see [`Policy::init`].
    pub fn zeros(obs_dim: usize, act_dim: usize) -> Self {
        let mut layout = Layout {
            tensors: Vec::new(),
            total: 0,
        };
        let actor = Mlp::build(&mut layout, "actor", [obs_dim, HIDDEN, HIDDEN, act_dim]);
        let log_std = layout.push("log_std".into(), vec![act_dim]);
        let critic = Mlp::build(&mut layout, "critic", [obs_dim, HIDDEN, HIDDEN, 1]);
        let params = vec![0.0; layout.total];
        Policy {
            obs_dim,
            act_dim,
            actor,
            critic,
            log_std,
            layout,
            params,
        }
    }

    /// Orthogonal weights (gain √2 hidden, 0.01 action head, 1 value head),
    /// zero biases, log-std 0.
    pub fn init<R: Rng>(obs_dim: usize, act_dim: usize, rng: &mut R) -> Self {
        let mut p = Policy::zeros(obs_dim, act_dim);
        let sqrt2 = std::f64::consts::SQRT_2;
        for (mlp, out_gain) in [(p.actor, 0.01), (p.critic, 1.0)] {
            for (i, d) in mlp.0.iter().enumerate() {
                let gain = if i == 2 { out_gain } else { sqrt2 };
                let w = orthogonal(d.out, d.inp, gain, rng);
                p.params[d.w..d.w + w.len()].copy_from_slice(&w);
            }
        }
        p
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params[self.log_std..self.log_std + self.act_dim]
    }

    pub fn forward(&self, obs: &[f64]) -> Forward {
        assert_eq!(obs.len(), self.obs_dim, "observation length");
        let mut f = Forward::default();
        f.mean = mlp_forward(&self.params, self.actor, obs, &mut f.actor_cache);
        f.value = mlp_forward(&self.params, self.critic, obs, &mut f.critic_cache)[0];
        f
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        mlp_forward(&self.params, self.critic, obs, &mut MlpCache::default())[0]
    }

    /// Mean action clipped to the action box.
    pub fn deterministic_action(&self, obs: &[f64]) -> Vec<f64> {
        let mean = mlp_forward(&self.params, self.actor, obs, &mut MlpCache::default());
        mean.into_iter().map(|m| m.clamp(-1.0, 1.0)).collect()
    }

    /// Samples an unclipped action; returns (action, log-prob, value).
    pub fn act<R: Rng>(&self, obs: &[f64], rng: &mut R) -> (Vec<f64>, f64, f64) {
        let f = self.forward(obs);
        let log_std = self.log_std();
        let action: Vec<f64> = f
            .mean
            .iter()
            .zip(log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = log_prob(&f.mean, log_std, &action);
        (action, lp, f.value)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std()
            .iter()
            .map(|ls| 0.5 + 0.5 * LOG_2PI + ls)
            .sum()
    }

    /// Adds the gradients of a per-sample loss to `grad`, given its
    /// derivatives with respect to the action mean and the value.
    pub fn backward(&self, obs: &[f64], f: &Forward, dmean: &[f64], dvalue: f64, grad: &mut [f64]) {
        mlp_backward(&self.params, self.actor, obs, &f.actor_cache, dmean, grad);
        if dvalue != 0.0 {
            mlp_backward(
                &self.params,
                self.critic,
                obs,
                &f.critic_cache,
                &[dvalue],
                grad,
            );
        }
    }

    /// Range of the log-std entries in the flat vector.
    pub fn log_std_range(&self) -> std::ops::Range<usize> {
        self.log_std..self.log_std + self.act_dim
    }
}

/// Log-density of `action` under a diagonal Gaussian.
pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}
