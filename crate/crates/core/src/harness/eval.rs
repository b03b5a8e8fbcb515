use std::collections::BTreeMap;

use super::agent::{seeded_stream, Agent, STREAM_EVAL};
use super::metrics::MetricsRow;
use super::snapshot::Snapshot;
use super::RunError;
use crate::diffnet::{forward_policy, DiffError, Mat, ParamVector};
use crate::envs::make_env;
use crate::rollout::RunningNormalizer;

/// Mean action for a raw observation, normalized with frozen statistics.
pub fn mean_action(params: &ParamVector, norm: &RunningNormalizer, raw: &[f64]) -> Result<Vec<f64>, DiffError> {
    let o = norm.apply(raw);
    let (mean, _) = forward_policy(params, &Mat::from_vec(1, o.len(), o))?;
    Ok(mean.data)
}

/// Mean undiscounted return of deterministic rollouts on a named
/// environment. The normalizer is left untouched.
pub fn evaluate_policy(
    params: &ParamVector,
    norm: &RunningNormalizer,
    env_name: &str,
    episodes: usize,
    seed: u64,
) -> Result<f64, RunError> {
    let mut env = make_env(env_name)?;
    let mut rng = seeded_stream(seed, STREAM_EVAL);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(&mut rng);
        loop {
            let a = mean_action(params, norm, &obs)?;
            let r = env.step(&a)?;
            total += r.reward;
            if r.done {
                break;
            }
            obs = r.obs;
        }
    }
    Ok(total / episodes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthReward {
    pub depth: usize,
    pub mean_reward: f64,
}

/// Evaluates the policy at every cascade depth on the same episode starts.
pub fn eval_hidden_depths(snap: &Snapshot, env_name: &str, episodes: usize, seed: u64) -> Result<Vec<DepthReward>, RunError> {
    let Agent::Cascade(c) = &snap.agent else {
        return Err(RunError::NotCascade(snap.agent.kind_name().to_string()));
    };
    c.nets
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(DepthReward {
                depth: i + 1,
                mean_reward: evaluate_policy(p, &snap.normalizer, env_name, episodes, seed)?,
            })
        })
        .collect()
}

/// Maximal runs of consecutive rows on the same task: `(task, first, end)`.
fn blocks(rows: &[MetricsRow]) -> Vec<(&str, usize, usize)> {
    let mut out: Vec<(&str, usize, usize)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        match out.last_mut() {
            Some(b) if b.0 == r.task => b.2 = i + 1,
            _ => out.push((&r.task, i, i + 1)),
        }
    }
    out
}

fn finite_rewards(rows: &[MetricsRow]) -> Vec<f64> {
    rows.iter().map(|r| r.mean_ep_reward).filter(|v| v.is_finite()).collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Average drop in reward when a task comes back after a switch.
///
/// For every pair of consecutive blocks of the same task this takes the best
/// `mean_ep_reward` of the earlier block minus the mean over the first 10%
/// (at least one row) of the later block. Drops are averaged per task and
/// then across tasks. `None` when no task was trained in two blocks.
pub fn forgetting_metric(rows: &[MetricsRow]) -> Option<f64> {
    let mut by_task: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (task, s, e) in blocks(rows) {
        by_task.entry(task).or_default().push((s, e));
    }
    let mut per_task = Vec::new();
    for spans in by_task.values() {
        let mut drops = Vec::new();
        for w in spans.windows(2) {
            let (prev, next) = (w[0], w[1]);
            let best = finite_rewards(&rows[prev.0..prev.1]).into_iter().reduce(f64::max);
            let head = ((next.1 - next.0) / 10).max(1);
            let early = mean(&finite_rewards(&rows[next.0..next.0 + head]));
            if let (Some(b), Some(e)) = (best, early) {
                drops.push(b - e);
            }
        }
        if let Some(m) = mean(&drops) {
            per_task.push(m);
        }
    }
    mean(&per_task)
}

/// Mean over tasks of the average `mean_ep_reward` in each task's last block.
pub fn final_average_reward(rows: &[MetricsRow]) -> Option<f64> {
    let mut last: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (task, s, e) in blocks(rows) {
        last.insert(task, (s, e));
    }
    let per_task: Vec<f64> = last.values().filter_map(|&(s, e)| mean(&finite_rewards(&rows[s..e]))).collect();
    mean(&per_task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64, task: &str, r: f64) -> MetricsRow {
        MetricsRow {
            iteration: i,
            env_steps: (i + 1) * 512,
            task: task.into(),
            mean_ep_reward: r,
            pg_loss: 0.0,
            vf_loss: 0.0,
            kl_self_mean: 0.0,
            beta: 0.5,
            wall_ms: 0,
            kl_depth: vec![],
        }
    }

    fn trace(blocks: &[(&str, Vec<f64>)]) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for (task, rs) in blocks {
            for &r in rs {
                rows.push(row(rows.len() as u64, task, r));
            }
        }
        rows
    }

    #[test]
    fn constant_reward_has_no_forgetting() {
        let rows = trace(&[
            ("a", vec![3.0; 20]),
            ("b", vec![3.0; 20]),
            ("a", vec![3.0; 20]),
            ("b", vec![3.0; 20]),
        ]);
        assert_eq!(forgetting_metric(&rows), Some(0.0));
        assert_eq!(final_average_reward(&rows), Some(3.0));
    }

    #[test]
    fn drop_of_five_after_each_switch() {
        // Each block climbs to 10 and restarts at 5 when the task returns.
        let climb: Vec<f64> = (0..20).map(|i| if i < 2 { 5.0 } else { 10.0 }).collect();
        let rows = trace(&[
            ("a", climb.clone()),
            ("b", climb.clone()),
            ("a", climb.clone()),
            ("b", climb.clone()),
            ("a", climb),
        ]);
        assert_eq!(forgetting_metric(&rows), Some(5.0));
    }

    #[test]
    fn single_block_per_task_is_undefined() {
        let rows = trace(&[("a", vec![1.0; 5]), ("b", vec![2.0; 5])]);
        assert_eq!(forgetting_metric(&rows), None);
        assert_eq!(final_average_reward(&rows), Some(1.5));
        assert_eq!(forgetting_metric(&[]), None);
    }

    #[test]
    fn final_reward_uses_last_block_only() {
        let rows = trace(&[("a", vec![0.0; 4]), ("b", vec![1.0; 4]), ("a", vec![4.0, 6.0]), ("b", vec![f64::NAN, 2.0])]);
        assert_eq!(final_average_reward(&rows), Some((5.0 + 2.0) / 2.0));
    }

    #[test]
    fn hidden_depth_table_at_init() {
        use crate::cascade::{CascadeConfig, CascadeState};
        use crate::diffnet::{init_network, NetworkSpec};
        use crate::harness::config::AgentKind;

        let p = init_network(&NetworkSpec::new(4, 2).with_hidden(vec![8]), 3).unwrap();
        let c = CascadeState::new(
            &p,
            &CascadeConfig {
                n_policies: 4,
                ..Default::default()
            },
        );
        let norm = RunningNormalizer::new(4);
        let snap = Snapshot::new(&Agent::Cascade(c), AgentKind::Pc, &norm, "h", 0, 0, &[]);
        let table = eval_hidden_depths(&snap, "pointgoal-a", 2, 9).unwrap();
        assert_eq!(table.len(), 4);
        let direct = evaluate_policy(&p, &norm, "pointgoal-a", 2, 9).unwrap();
        for d in &table {
            assert_eq!(d.mean_reward, direct);
        }

        let ppo = Snapshot::new(
            &Agent::Ppo(crate::ppo::PpoAgent::new(p, &Default::default())),
            AgentKind::FixedKl,
            &norm,
            "h",
            0,
            0,
            &[],
        );
        assert!(matches!(eval_hidden_depths(&ppo, "pointgoal-a", 2, 9), Err(RunError::NotCascade(_))));
    }
}
