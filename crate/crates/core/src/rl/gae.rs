use nalgebra::DVector;

/// Flattened transitions from one collection phase.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub x: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub action: Vec<DVector<f64>>,
    pub log_prob: Vec<f64>,
    pub reward: Vec<f64>,
    pub value: Vec<f64>,
    /// Value of the successor observation; zero after a terminal step.
    pub next_value: Vec<f64>,
    /// The successor is absorbing (early termination).
    pub terminal: Vec<bool>,
    /// Last stored step of an episode segment, terminal or truncated.
    pub segment_end: Vec<bool>,
    pub advantage: Vec<f64>,
    pub ret: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    /// Fills `advantage` and `ret` from the stored rewards and values.
    pub fn compute_advantages(&mut self, gamma: f64, gae_lambda: f64) {
        let (adv, ret) = gae_advantages(
            &self.reward,
            &self.value,
            &self.next_value,
            &self.terminal,
            &self.segment_end,
            gamma,
            gae_lambda,
        );
        self.advantage = adv;
        self.ret = ret;
    }
}

/// Generalized advantage estimates and value targets.
///
/// `δ_t = r_t + γ(1 − terminal_t) V'_t − V_t` and
/// `A_t = δ_t + γλ(1 − end_t) A_{t+1}`, with `V'_t` the bootstrap value of
/// the successor. Returns are `A_t + V_t`.
pub fn gae_advantages(
    reward: &[f64],
    value: &[f64],
    next_value: &[f64],
    terminal: &[bool],
    segment_end: &[bool],
    gamma: f64,
    gae_lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = reward.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminal[t] { 0.0 } else { next_value[t] };
        let delta = reward[t] + gamma * bootstrap - value[t];
        if segment_end[t] {
            running = 0.0;
        }
        running = delta + gamma * gae_lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(value).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero-mean, unit-variance copy; constant inputs map to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_episode(n: usize) -> (Vec<bool>, Vec<bool>) {
        let mut end = vec![false; n];
        end[n - 1] = true;
        (vec![false; n], end)
    }

    #[test]
    fn perfect_value_function_gives_zero_advantage() {
        // constant reward 1 with a terminal step: V_t = number of steps left
        let n = 6;
        let reward = vec![1.0; n];
        let value: Vec<f64> = (0..n).map(|t| (n - t) as f64).collect();
        let mut next: Vec<f64> = value[1..].to_vec();
        next.push(0.0);
        let mut terminal = vec![false; n];
        terminal[n - 1] = true;
        let (_, end) = single_episode(n);
        let (adv, _) = gae_advantages(&reward, &value, &next, &terminal, &end, 1.0, 0.95);
        assert!(adv.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let reward = [0.5, -1.0, 2.0];
        let value = [0.1, 0.2, 0.3];
        let next = [0.2, 0.3, 0.7];
        let (terminal, end) = single_episode(3);
        let (adv, _) = gae_advantages(&reward, &value, &next, &terminal, &end, 0.9, 0.0);
        for t in 0..3 {
            assert!((adv[t] - (reward[t] + 0.9 * next[t] - value[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn undiscounted_lambda_one_telescopes() {
        let reward = [0.5, -1.0, 2.0, 0.25];
        let value = [0.1, -0.2, 0.3, 0.9];
        let next = [-0.2, 0.3, 0.9, 0.0];
        let terminal = [false, false, false, true];
        let end = [false, false, false, true];
        let (adv, ret) = gae_advantages(&reward, &value, &next, &terminal, &end, 1.0, 1.0);
        for t in 0..4 {
            let empirical: f64 = reward[t..].iter().sum();
            assert!((adv[t] - (empirical - value[t])).abs() < 1e-12);
            assert!((ret[t] - empirical).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_do_not_leak() {
        let reward = [1.0, 1.0, 5.0];
        let value = [0.0; 3];
        let next = [0.0, 0.0, 0.0];
        let terminal = [false, true, false];
        let end = [false, true, true];
        let (adv, _) = gae_advantages(&reward, &value, &next, &terminal, &end, 1.0, 1.0);
        assert_eq!(adv, vec![2.0, 1.0, 5.0]);
    }

    #[test]
    fn normalize_constant_input() {
        assert_eq!(normalize(&[3.0, 3.0]), vec![0.0, 0.0]);
        assert!(normalize(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn returns_equal_advantage_plus_value(
            data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 1..40),
            gamma in 0.5f64..1.0,
            lam in 0.0f64..1.0,
        ) {
            let reward: Vec<f64> = data.iter().map(|d| d.0).collect();
            let value: Vec<f64> = data.iter().map(|d| d.1).collect();
            let next: Vec<f64> = data.iter().map(|d| d.2).collect();
            let terminal: Vec<bool> = data.iter().map(|d| d.3).collect();
            let mut end = terminal.clone();
            *end.last_mut().unwrap() = true;
            let (adv, ret) = gae_advantages(&reward, &value, &next, &terminal, &end, gamma, lam);
            for t in 0..reward.len() {
                prop_assert!((ret[t] - adv[t] - value[t]).abs() < 1e-10);
            }
            let n = normalize(&adv);
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            prop_assert!(mean.abs() < 1e-8);
        }
    }
}
