use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::exact::TierTable;
use super::{
    build_config, demand_of, tier_weight, Allocation, ClusterConfig, ConfigCandidate, TierDemand,
    DEFAULT_EPSILON,
};
use crate::par::{self, Exec};
use crate::trace::TierId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    pub epsilon: f64,
    /// Scale scores by each tier's unmet-demand ratio.
    pub weighted: bool,
    /// After the greedy pass, repack each tier's GPUs exactly and move GPUs
    /// between tiers while the weighted served rate improves.
    pub repack: bool,
    pub exec: Exec,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            weighted: true,
            repack: true,
            exec: Exec::default(),
        }
    }
}

impl GreedyOptions {
    pub fn unweighted() -> Self {
        Self {
            weighted: false,
            ..Self::default()
        }
    }
}

/// Highest marginal score first; ties by fewer GPUs, lower tier, lower TPi.
fn better(a: (f64, &ConfigCandidate), b: (f64, &ConfigCandidate)) -> bool {
    let key = |c: &ConfigCandidate| {
        (
            c.gpus_used,
            c.tier_id,
            c.tp_prefill,
            c.tp_decode,
            c.prefill_groups,
        )
    };
    match a.0.total_cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => key(a.1) < key(b.1),
    }
}

pub fn assign_greedy(
    cands: &[ConfigCandidate],
    demands: &[TierDemand],
    pool_size: u32,
    opts: &GreedyOptions,
) -> ClusterConfig {
    let tiers: BTreeSet<TierId> = cands.iter().map(|c| c.tier_id).collect();
    let weight: BTreeMap<TierId, f64> = tiers
        .iter()
        .map(|&t| {
            let w = if opts.weighted {
                tier_weight(&demand_of(demands, t), opts.epsilon)
            } else {
                1.0
            };
            (t, w)
        })
        .collect();
    let rps = |t: TierId| demand_of(demands, t).rps_observed.max(0.0);

    let mut residual: BTreeMap<TierId, f64> = tiers.iter().map(|&t| (t, rps(t))).collect();
    let mut picks: BTreeMap<TierId, Vec<ConfigCandidate>> = BTreeMap::new();
    let mut remaining = pool_size;
    loop {
        let mut best: Option<(f64, &ConfigCandidate)> = None;
        for c in cands {
            let res = residual[&c.tier_id];
            if c.gpus_used > remaining || res <= 0.0 {
                continue;
            }
            let score = c.capacity().min(res) / c.gpus_used as f64 * weight[&c.tier_id];
            if score <= 0.0 {
                continue;
            }
            if best.is_none_or(|b| better((score, c), b)) {
                best = Some((score, c));
            }
        }
        let Some((_, c)) = best else { break };
        remaining -= c.gpus_used;
        let r = residual.get_mut(&c.tier_id).unwrap();
        *r = (*r - c.capacity()).max(0.0);
        picks.entry(c.tier_id).or_default().push(*c);
    }

    let alloc: Allocation = if opts.repack {
        repack(cands, &tiers, &picks, &weight, &rps, pool_size, opts.exec)
    } else {
        picks.into_iter().collect()
    };
    let unmet = tiers
        .iter()
        .copied()
        .filter(|&t| {
            let cap: f64 = alloc
                .iter()
                .filter(|(id, _)| *id == t)
                .flat_map(|(_, u)| u)
                .map(|c| c.capacity())
                .sum();
            cap < rps(t) - 1e-9 * rps(t).max(1.0)
        })
        .collect();
    build_config(pool_size, &alloc, &unmet)
}

fn repack(
    cands: &[ConfigCandidate],
    tiers: &BTreeSet<TierId>,
    picks: &BTreeMap<TierId, Vec<ConfigCandidate>>,
    weight: &BTreeMap<TierId, f64>,
    rps: &(dyn Fn(TierId) -> f64 + Sync),
    pool: u32,
    exec: Exec,
) -> Allocation {
    let ids: Vec<TierId> = tiers.iter().copied().collect();
    let tables: Vec<TierTable> =
        par::map(exec, &ids, |&t| TierTable::build(t, rps(t), cands, pool));
    let w: Vec<f64> = ids.iter().map(|t| weight[t]).collect();
    let mut budget: Vec<u32> = ids
        .iter()
        .map(|t| {
            picks
                .get(t)
                .map_or(0, |v| v.iter().map(|c| c.gpus_used).sum())
        })
        .collect();
    let val = |i: usize, b: u32| w[i] * tables[i].value(b);

    // Local search over budgets: hand out idle GPUs or move GPUs between
    // tiers, taking the best improving move each round.
    for _ in 0..4 * pool.max(1) {
        let left = pool - budget.iter().sum::<u32>();
        let mut best: Option<(f64, usize, Option<usize>, u32)> = None;
        let mut consider = |gain: f64, to: usize, from: Option<usize>, k: u32| {
            if gain > 1e-9 && best.is_none_or(|b| gain > b.0 + 1e-12) {
                best = Some((gain, to, from, k));
            }
        };
        for to in 0..ids.len() {
            for k in 1..=left {
                consider(val(to, budget[to] + k) - val(to, budget[to]), to, None, k);
            }
            for from in (0..ids.len()).filter(|&f| f != to) {
                for k in 1..=budget[from] {
                    let gain = val(to, budget[to] + k) - val(to, budget[to])
                        + val(from, budget[from] - k)
                        - val(from, budget[from]);
                    consider(gain, to, Some(from), k);
                }
            }
        }
        let Some((_, to, from, k)) = best else { break };
        budget[to] += k;
        if let Some(f) = from {
            budget[f] -= k;
        }
    }
    ids.iter()
        .enumerate()
        .map(|(i, &t)| (t, tables[i].units(budget[i])))
        .filter(|(_, u)| !u.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::{env, tiers};
    use super::super::{enumerate_candidates, plan_window, StageKind, DEFAULT_EPSILON};
    use super::*;
    use crate::profile::EnvelopeTable;

    fn served(cfg: &ClusterConfig, envs: &EnvelopeTable, demands: &[TierDemand]) -> f64 {
        cfg.prefill_capacity(envs)
            .into_iter()
            .map(|(t, cap)| cap.min(demand_of(demands, t).rps_observed))
            .sum()
    }

    #[test]
    fn forced_single_candidate_fills_pool() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 2, 10.0, 10.0));
        let d = [TierDemand::new(0, 10.0, 10.0)];
        let c = enumerate_candidates(&envs, &tiers(1), &d, 4, DEFAULT_EPSILON);
        let cfg = assign_greedy(&c, &d, 4, &GreedyOptions::default());
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.gpus_used(), 4);
        assert_eq!(cfg.groups[0].gpu_ids, vec![0, 1]);
        assert_eq!(cfg.groups[0].stage, StageKind::Prefill);
        assert_eq!(cfg.groups[1].gpu_ids, vec![2, 3]);
    }

    #[test]
    fn no_candidates_is_all_background() {
        let cfg = assign_greedy(&[], &[], 3, &GreedyOptions::default());
        assert_eq!(cfg, ClusterConfig::all_background(3));
    }

    #[test]
    fn zero_demand_is_all_background() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 10.0, 10.0));
        let c = enumerate_candidates(&envs, &tiers(1), &[], 4, DEFAULT_EPSILON);
        let cfg = assign_greedy(&c, &[], 4, &GreedyOptions::default());
        assert!(cfg.groups.iter().all(|g| g.stage == StageKind::Background));
    }

    #[test]
    fn leftover_goes_to_unmet_tier_decode() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 2, 10.0, 10.0));
        envs.insert(env(0, 1, 0.0, 1.0));
        let d = [TierDemand::new(0, 100.0, 0.0)];
        let c = enumerate_candidates(&envs, &tiers(1), &d, 5, DEFAULT_EPSILON);
        let cfg = assign_greedy(&c, &d, 5, &GreedyOptions::default());
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.gpus_used(), 5);
        let last = cfg.groups.last().unwrap();
        assert_eq!((last.stage, last.tp), (StageKind::Background, 1));
    }

    #[test]
    fn pure_greedy_fragments_repack_does_not() {
        let mut envs = EnvelopeTable::new();
        // TP1 prefill + TP2 decode: 3 GPUs, 10 req/s. TP2 + TP2: 4 GPUs, 12 req/s.
        envs.insert(env(0, 1, 10.0, 0.0));
        envs.insert(env(0, 2, 12.0, 12.0));
        let d = [TierDemand::new(0, 100.0, 100.0)];
        let c = enumerate_candidates(&envs, &tiers(1), &d, 8, DEFAULT_EPSILON);
        let pure = GreedyOptions {
            repack: false,
            ..Default::default()
        };
        let greedy = assign_greedy(&c, &d, 8, &pure);
        let repacked = assign_greedy(&c, &d, 8, &GreedyOptions::default());
        assert_eq!(served(&greedy, &envs, &d), 20.0);
        assert_eq!(served(&repacked, &envs, &d), 24.0);
    }

    #[test]
    fn starved_tier_gets_a_group_when_weighted() {
        // Tier 1 is four times less efficient than tier 0 and both have
        // enough demand to absorb the whole pool.
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 8.0, 8.0));
        envs.insert(env(1, 1, 2.0, 2.0));
        let t = tiers(2);
        let w1 = [
            TierDemand::new(0, 100.0, 0.0),
            TierDemand::new(1, 100.0, 0.0),
        ];
        for opts in [GreedyOptions::unweighted(), GreedyOptions::default()] {
            let first = plan_window(&envs, &t, &w1, 8, None, &opts);
            let cap = first.prefill_capacity(&envs);
            assert!(!cap.contains_key(&1), "tier 1 is starved in window 1");
            let w2 = [
                TierDemand::new(0, 100.0, cap[&0]),
                TierDemand::new(1, 100.0, 0.0),
            ];
            let second = plan_window(&envs, &t, &w2, 8, Some(&first), &opts);
            let groups_1 = second
                .groups
                .iter()
                .filter(|g| g.tier_id == Some(1))
                .count();
            if opts.weighted {
                assert!(groups_1 >= 1);
            } else {
                assert_eq!(groups_1, 0);
            }
        }
    }

    #[test]
    fn demand_shift_moves_groups() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 5.0, 5.0));
        envs.insert(env(1, 1, 5.0, 5.0));
        let t = tiers(2);
        let opts = GreedyOptions::default();
        let a = [TierDemand::new(0, 20.0, 20.0), TierDemand::new(1, 0.0, 0.0)];
        let b = [TierDemand::new(0, 0.0, 0.0), TierDemand::new(1, 20.0, 20.0)];
        let first = plan_window(&envs, &t, &a, 8, None, &opts);
        assert_eq!(first.prefill_capacity(&envs).get(&0), Some(&20.0));
        let second = plan_window(&envs, &t, &b, 8, Some(&first), &opts);
        assert_eq!(second.prefill_capacity(&envs).get(&1), Some(&20.0));
        assert!(!second.prefill_capacity(&envs).contains_key(&0));
    }

    #[test]
    fn unchanged_demand_keeps_config() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 5.0, 3.0));
        envs.insert(env(0, 2, 9.0, 7.0));
        envs.insert(env(1, 1, 2.0, 2.0));
        envs.insert(env(1, 2, 5.0, 3.0));
        let t = tiers(2);
        let d = [TierDemand::new(0, 13.0, 11.0), TierDemand::new(1, 4.0, 4.0)];
        let opts = GreedyOptions::default();
        let first = plan_window(&envs, &t, &d, 16, None, &opts);
        let second = plan_window(&envs, &t, &d, 16, Some(&first), &opts);
        assert!(first.same_groups(&second));
        assert_eq!(second.window_index, 1);
    }
}
