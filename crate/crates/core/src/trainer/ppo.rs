//! Rollout storage, Adam and the clipped-surrogate update.

use rand::seq::SliceRandom;
use rand::Rng;

use super::gae::compute_gae;
use super::policy::{log_prob, Policy};
use super::{TrainError, TrainerConfig};

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    /// Unclipped sampled action.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Episode ended at this step (terminated or truncated).
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

/// `n_steps × n_envs` transitions, stored step-major.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    n_steps: usize,
    n_envs: usize,
    samples: Vec<Sample>,
}

impl RolloutBuffer {
    pub fn new(n_steps: usize, n_envs: usize) -> Self {
        RolloutBuffer {
            n_steps,
            n_envs,
            samples: Vec::with_capacity(n_steps * n_envs),
        }
    }

    pub fn capacity(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    /// Appends one step for all envs, in env order.
    pub fn push_step(&mut self, rows: impl IntoIterator<Item = Sample>) {
        let before = self.samples.len();
        self.samples.extend(rows);
        assert_eq!(
            self.samples.len() - before,
            self.n_envs,
            "one sample per env"
        );
        assert!(
            self.samples.len() <= self.capacity(),
            "rollout buffer overflow"
        );
    }

    /// Fills advantages and returns per env. `last_values[i]` is the value
    /// of env `i`'s observation after the final stored step.
    pub fn compute_advantages(
        &mut self,
        last_values: &[f64],
        gamma: f64,
        lambda: f64,
    ) -> Result<(), TrainError> {
        assert!(self.is_full(), "advantages need a full buffer");
        for env in 0..self.n_envs {
            let idx: Vec<usize> = (0..self.n_steps).map(|t| t * self.n_envs + env).collect();
            let rewards: Vec<f64> = idx.iter().map(|&k| self.samples[k].reward).collect();
            let values: Vec<f64> = idx.iter().map(|&k| self.samples[k].value).collect();
            let dones: Vec<bool> = idx.iter().map(|&k| self.samples[k].done).collect();
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, last_values[env], gamma, lambda)?;
            for (j, &k) in idx.iter().enumerate() {
                self.samples[k].advantage = adv[j];
                self.samples[k].ret = ret[j];
            }
        }
        Ok(())
    }
}

/// Adam with PyTorch's update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        grad.iter_mut().for_each(|g| *g *= coef);
    }
    norm
}

/// Shifts and scales advantages to mean 0, std 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

/// Loss terms of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MinibatchStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Loss and gradient of the PPO objective on `batch`. Advantages are used
/// as stored; normalise them beforehand.
pub fn minibatch_loss_and_grad(
    policy: &Policy,
    batch: &[&Sample],
    config: &TrainerConfig,
    grad: &mut [f64],
) -> MinibatchStats {
    let b = batch.len() as f64;
    let eps = config.clip_range;
    let log_std = policy.log_std().to_vec();
    let ls_range = policy.log_std_range();
    let mut st = MinibatchStats::default();
    let mut dlog_std = vec![0.0; log_std.len()];
    for s in batch {
        let f = policy.forward(&s.obs);
        let lp = log_prob(&f.mean, &log_std, &s.action);
        let log_ratio = lp - s.log_prob;
        let ratio = log_ratio.exp();
        let a = s.advantage;
        let surr1 = ratio * a;
        let surr2 = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        st.policy_loss -= surr1.min(surr2) / b;
        // the clipped branch is flat in ρ, so only the unclipped one has a gradient
        let dlp = if surr1 <= surr2 { -a * ratio / b } else { 0.0 };
        let mut dmean = vec![0.0; f.mean.len()];
        for j in 0..f.mean.len() {
            let var = (2.0 * log_std[j]).exp();
            let diff = s.action[j] - f.mean[j];
            dmean[j] = dlp * diff / var;
            dlog_std[j] += dlp * (diff * diff / var - 1.0);
        }
        let verr = f.value - s.ret;
        st.value_loss += verr * verr / b;
        let dvalue = config.value_coef * 2.0 * verr / b;
        st.approx_kl += ((ratio - 1.0) - log_ratio) / b;
        if (ratio - 1.0).abs() > eps {
            st.clip_frac += 1.0 / b;
        }
        policy.backward(&s.obs, &f, &dmean, dvalue, grad);
    }
    st.entropy_loss = -policy.entropy();
    for (j, g) in ls_range.zip(&dlog_std) {
        grad[j] += g - config.entropy_coef;
    }
    st.loss =
        st.policy_loss + config.entropy_coef * st.entropy_loss + config.value_coef * st.value_loss;
    st
}

/// Means over all minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// `epochs` passes of shuffled minibatch Adam steps on a full buffer.
pub fn ppo_update<R: Rng>(
    buffer: &mut RolloutBuffer,
    policy: &mut Policy,
    adam: &mut Adam,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    let mut adv: Vec<f64> = buffer.samples.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    for (s, a) in buffer.samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut sum = UpdateMetrics::default();
    let mut batches = 0usize;
    let mut grad = vec![0.0; policy.params.len()];
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &buffer.samples[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let st = minibatch_loss_and_grad(policy, &batch, config, &mut grad);
            if !st.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {batches}: loss {} (policy {}, value {}, kl {})",
                    st.loss, st.policy_loss, st.value_loss, st.approx_kl
                )));
            }
            clip_grad_norm(&mut grad, config.max_grad_norm);
            adam.step(&mut policy.params, &grad);
            sum.policy_loss += st.policy_loss;
            sum.value_loss += st.value_loss;
            sum.entropy_loss += st.entropy_loss;
            sum.approx_kl += st.approx_kl;
            sum.clip_frac += st.clip_frac;
            batches += 1;
        }
    }
    buffer.clear();
    let k = batches.max(1) as f64;
    Ok(UpdateMetrics {
        policy_loss: sum.policy_loss / k,
        value_loss: sum.value_loss / k,
        entropy_loss: sum.entropy_loss / k,
        approx_kl: sum.approx_kl / k,
        clip_frac: sum.clip_frac / k,
    })
}
