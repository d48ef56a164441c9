//! Generalised advantage estimation.

use super::TrainError;

/// Advantages and returns for one env's trajectory.
///
/// `dones[t]` marks that the episode ended at step `t`, so `values[t + 1]`
/// (or `bootstrap_value` after the last step) belongs to a different episode
/// and is not used.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(TrainError::LengthMismatch {
            rewards: n,
            values: values.len(),
            dones: dones.len(),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap_value
        };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct O(T²) evaluation of Σ (γλ)^l δ_{t+l}, stopping at episode ends.
    fn brute_force(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| {
                let next = if t + 1 < n { v[t + 1] } else { boot };
                r[t] + if d[t] { 0.0 } else { g * next } - v[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                for k in t..n {
                    sum += (g * l).powi((k - t) as i32) * delta[k];
                    if d[k] {
                        break;
                    }
                }
                sum
            })
            .collect()
    }

    #[test]
    fn single_reward_undiscounted() {
        let (a, ret) = compute_gae(
            &[1.0, 0.0, 0.0],
            &[0.0; 3],
            &[false, false, true],
            0.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(a, vec![1.0, 0.0, 0.0]);
        assert_eq!(ret, a);
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let r = [0.5, -1.0, 2.0, 0.0];
        let v = [0.1, 0.2, 0.3, 0.4];
        let d = [false, true, false, false];
        let (a, _) = compute_gae(&r, &v, &d, 0.7, 0.9, 0.0).unwrap();
        let expected = [
            0.5 + 0.9 * 0.2 - 0.1,
            -1.0 - 0.2,
            2.0 + 0.9 * 0.4 - 0.3,
            0.0 + 0.9 * 0.7 - 0.4,
        ];
        assert_eq!(a, expected);
    }

    #[test]
    fn sparse_terminal_reward_matches_oracle() {
        let r = [0.0, 0.0, 1.0];
        let v = [0.5, 0.6, 0.7];
        let d = [false, false, true];
        let (a, ret) = compute_gae(&r, &v, &d, 0.0, 0.99, 0.95).unwrap();
        let oracle = brute_force(&r, &v, &d, 0.0, 0.99, 0.95);
        for t in 0..3 {
            assert!((a[t] - oracle[t]).abs() < 1e-9);
            assert!((ret[t] - (a[t] + v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            compute_gae(&[1.0], &[0.0, 0.0], &[false], 0.0, 0.99, 0.95),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            steps in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, proptest::bool::weighted(0.2)), 1..=64),
            boot in -5.0f64..5.0,
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
            let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
            let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
            let (a, _) = compute_gae(&r, &v, &d, boot, gamma, lambda).unwrap();
            let oracle = brute_force(&r, &v, &d, boot, gamma, lambda);
            for t in 0..r.len() {
                prop_assert!((a[t] - oracle[t]).abs() < 1e-9, "t={} {} vs {}", t, a[t], oracle[t]);
            }
        }
    }
}
