use super::RolloutBatch;

/// Generalized advantage estimates before standardization.
///
/// `δ_t = r_t + γ·V(s_{t+1})·(1 − done_t) − V(s_t)` and
/// `Â_t = δ_t + γλ·(1 − done_t)·Â_{t+1}`, with `V(s_T)` = `bootstrap`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Vec<f64> {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len);
    assert_eq!(dones.len(), t_len);
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < t_len { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        running = delta + gamma * lam * not_done * running;
        adv[t] = running;
    }
    adv
}

/// Fills raw advantages and `returns = advantages + values`.
pub fn fill_gae_raw(batch: &mut RolloutBatch, gamma: f64, lam: f64) {
    assert!((0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&lam));
    batch.advantages = gae_advantages(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        batch.bootstrap_value,
        gamma,
        lam,
    );
    batch.returns = batch
        .advantages
        .iter()
        .zip(&batch.values)
        .map(|(a, v)| a + v)
        .collect();
}

/// Shifts and scales advantages to zero mean and unit (population) standard
/// deviation. A constant vector maps to zeros.
pub fn standardize_advantages(batch: &mut RolloutBatch) {
    let n = batch.advantages.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = batch.advantages.iter().sum::<f64>() / n;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in &mut batch.advantages {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// GAE followed by per-batch standardization; returns are formed first.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lam: f64) {
    fill_gae_raw(batch, gamma, lam);
    standardize_advantages(batch);
}
