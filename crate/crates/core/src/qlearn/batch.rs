//! Episode records and the prefix-aligned batch layout the updaters scan.

use crate::envs::EnvDescriptor;

/// One complete episode as collected from an environment.
///
/// `obs[t]` holds all agents' observations at step `t`, concatenated in
/// agent order; `actions[t]` / `rewards[t]` are what was taken and
/// received at that step; `active[t]` mirrors the per-agent activity
/// flags the environment reported before the step. Terminal observations
/// are not stored: TD targets bootstrap zero at every episode end,
/// including truncation at the step limit.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub obs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub active: Vec<Vec<bool>>,
    pub won: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Undiscounted return.
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Episodes stacked for batched time scans.
///
/// Episodes are sorted longest first, so the set still running at step
/// `t` is always a prefix of the batch and recurrent state can be carried
/// by slicing rows. Every per-step matrix keeps row `e * n_agents + i` =
/// agent `i` of sorted episode `e`; `states` and `rewards` have one row
/// per episode instead.
#[derive(Debug)]
pub struct EpisodeBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `alive[t]` = number of episodes with length > `t`.
    pub alive: Vec<usize>,
    /// `[alive_t * n_agents * obs_dim]` per step.
    pub obs: Vec<Vec<f64>>,
    /// Observations with the one-hot agent id appended to each row.
    pub obs_id: Vec<Vec<f64>>,
    /// `[alive_t * state_dim]` per step.
    pub states: Vec<Vec<f64>>,
    /// `[alive_t * n_agents]` per step.
    pub actions: Vec<Vec<usize>>,
    /// `[alive_t]` per step.
    pub rewards: Vec<Vec<f64>>,
}

impl EpisodeBatch {
    pub fn build(episodes: &[&EpisodeRecord], desc: &EnvDescriptor) -> Self {
        let n = desc.n_agents;
        let od = desc.obs_dim;
        let mut eps: Vec<&EpisodeRecord> = episodes.to_vec();
        eps.sort_by(|a, b| b.len().cmp(&a.len()));
        let max_len = eps.first().map_or(0, |e| e.len());

        let mut batch = EpisodeBatch {
            n_agents: n,
            obs_dim: od,
            state_dim: desc.state_dim,
            alive: Vec::with_capacity(max_len),
            obs: Vec::with_capacity(max_len),
            obs_id: Vec::with_capacity(max_len),
            states: Vec::with_capacity(max_len),
            actions: Vec::with_capacity(max_len),
            rewards: Vec::with_capacity(max_len),
        };

        for t in 0..max_len {
            let m = eps.iter().take_while(|e| e.len() > t).count();
            let mut o = Vec::with_capacity(m * n * od);
            let mut oid = Vec::with_capacity(m * n * (od + n));
            let mut s = Vec::with_capacity(m * desc.state_dim);
            let mut a = Vec::with_capacity(m * n);
            let mut r = Vec::with_capacity(m);
            for e in &eps[..m] {
                debug_assert_eq!(e.obs[t].len(), n * od);
                o.extend_from_slice(&e.obs[t]);
                for i in 0..n {
                    oid.extend_from_slice(&e.obs[t][i * od..(i + 1) * od]);
                    for j in 0..n {
                        oid.push(if i == j { 1.0 } else { 0.0 });
                    }
                }
                s.extend_from_slice(&e.states[t]);
                a.extend_from_slice(&e.actions[t]);
                r.push(e.rewards[t]);
            }
            batch.alive.push(m);
            batch.obs.push(o);
            batch.obs_id.push(oid);
            batch.states.push(s);
            batch.actions.push(a);
            batch.rewards.push(r);
        }
        batch
    }

    pub fn max_len(&self) -> usize {
        self.alive.len()
    }

    /// Total (episode, step) pairs, the TD loss denominator.
    pub fn total_steps(&self) -> usize {
        self.alive.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(len: usize, tag: f64, n: usize, od: usize) -> EpisodeRecord {
        EpisodeRecord {
            obs: (0..len)
                .map(|t| {
                    (0..n * od)
                        .map(|k| tag + t as f64 + 0.01 * k as f64)
                        .collect()
                })
                .collect(),
            states: (0..len).map(|t| vec![tag * 10.0 + t as f64]).collect(),
            actions: (0..len).map(|t| vec![(t + tag as usize) % 3; n]).collect(),
            rewards: (0..len).map(|t| tag + t as f64 * 0.1).collect(),
            active: (0..len).map(|_| vec![true; n]).collect(),
            won: false,
        }
    }

    fn desc(n: usize, od: usize) -> EnvDescriptor {
        EnvDescriptor {
            name: "test".into(),
            n_agents: n,
            obs_dim: od,
            state_dim: 1,
            n_actions: 3,
            episode_limit: 10,
            eval_interval: 1000,
            eval_episodes: 10,
        }
    }

    #[test]
    fn sorts_longest_first_and_counts_alive() {
        let (n, od) = (2, 3);
        let short = record(1, 1.0, n, od);
        let long = record(3, 2.0, n, od);
        let b = EpisodeBatch::build(&[&short, &long], &desc(n, od));
        assert_eq!(b.alive, vec![2, 1, 1]);
        // Episode 0 after sorting is the long one.
        assert_eq!(b.rewards[0], vec![2.0, 1.0]);
        assert_eq!(b.rewards[2], vec![2.2]);
        assert_eq!(b.states[1], vec![21.0]);
    }

    #[test]
    fn one_hot_ids_appended_per_agent_row() {
        let (n, od) = (3, 2);
        let e = record(1, 0.0, n, od);
        let b = EpisodeBatch::build(&[&e], &desc(n, od));
        let width = od + n;
        for i in 0..n {
            let row = &b.obs_id[0][i * width..(i + 1) * width];
            assert_eq!(&row[..od], &e.obs[0][i * od..(i + 1) * od]);
            for j in 0..n {
                assert_eq!(row[od + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ties_keep_input_order() {
        let (n, od) = (1, 1);
        let a = record(2, 1.0, n, od);
        let c = record(2, 3.0, n, od);
        let b = EpisodeBatch::build(&[&a, &c], &desc(n, od));
        assert_eq!(b.rewards[0], vec![1.0, 3.0]);
    }
}
