//! Cluster configuration planning.
//!
//! A [`ConfigCandidate`] is a balanced unit of `P` prefill groups at `TPi` and
//! `D` decode groups at `TPj` serving one tier. The adaptive planner scores
//! candidates by goodput efficiency, assigns the GPU pool greedily, and maps
//! the result onto the previous window's groups to avoid needless migrations.

mod baseline;
pub mod exact;
mod greedy;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::profile::EnvelopeTable;
use crate::trace::{SloTier, TierId};

pub use baseline::{
    baseline_policy, AdaptivePolicy, OraclePolicy, PlanContext, Policy, PolicyKind, SplitPolicy,
    StaticPolicy,
};
pub use greedy::{assign_greedy, GreedyOptions};

pub const DEFAULT_EPSILON: f64 = 0.01;
/// Largest pool the exhaustive oracle accepts.
pub const ORACLE_MAX_POOL: u32 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("oracle policy supports pools of at most {ORACLE_MAX_POOL} GPUs, got {0}")]
    OraclePoolTooLarge(u32),
    #[error("pool size must be positive")]
    EmptyPool,
    #[error("tp {tp} exceeds pool size {pool}")]
    TpExceedsPool { tp: u32, pool: u32 },
    #[error("unknown policy {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierDemand {
    pub tier_id: TierId,
    pub rps_observed: f64,
    pub served_rps: f64,
}

impl TierDemand {
    pub fn new(tier_id: TierId, rps_observed: f64, served_rps: f64) -> Self {
        Self {
            tier_id,
            rps_observed,
            served_rps,
        }
    }
}

pub(crate) fn demand_of(demands: &[TierDemand], tier: TierId) -> TierDemand {
    demands
        .iter()
        .find(|d| d.tier_id == tier)
        .copied()
        .unwrap_or(TierDemand::new(tier, 0.0, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigCandidate {
    pub tier_id: TierId,
    pub tp_prefill: u32,
    pub tp_decode: u32,
    pub prefill_groups: u32,
    pub decode_groups: u32,
    pub gpus_used: u32,
    /// Per-group prefill rate at `tp_prefill`.
    pub thp: f64,
    /// Per-group decode rate at `tp_decode`.
    pub thd: f64,
    pub ge: f64,
    pub wge: f64,
}

impl ConfigCandidate {
    /// Balanced candidate, or `None` when the decode side cannot serve.
    pub fn balanced(
        tier_id: TierId,
        tp_prefill: u32,
        tp_decode: u32,
        prefill_groups: u32,
        thp: f64,
        thd: f64,
    ) -> Option<Self> {
        let decode_groups = balance_stages(thp, thd, prefill_groups)?;
        Some(Self {
            tier_id,
            tp_prefill,
            tp_decode,
            prefill_groups,
            decode_groups,
            gpus_used: prefill_groups * tp_prefill + decode_groups * tp_decode,
            thp,
            thd,
            ge: 0.0,
            wge: 0.0,
        })
    }

    /// Prefill-side request rate, `P * thp`.
    pub fn capacity(&self) -> f64 {
        self.prefill_groups as f64 * self.thp
    }
}

/// Decode groups needed so decode never bottlenecks `prefill_groups`.
/// `None` when `thd` is zero.
pub fn balance_stages(thp: f64, thd: f64, prefill_groups: u32) -> Option<u32> {
    if thd <= 0.0 || !thd.is_finite() {
        return None;
    }
    // Guard against 2.0000000001 style ceilings from float division.
    let ratio = prefill_groups as f64 * thp / thd;
    let d = (ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0);
    Some(d as u32)
}

pub fn goodput_efficiency(c: &ConfigCandidate, demand: &TierDemand) -> f64 {
    if c.gpus_used == 0 {
        return 0.0;
    }
    c.capacity().min(demand.rps_observed.max(0.0)) / c.gpus_used as f64
}

/// Unmet-demand weighting of a goodput efficiency.
pub fn weighted_score(ge: f64, demand: &TierDemand, epsilon: f64) -> f64 {
    ge * tier_weight(demand, epsilon)
}

pub(crate) fn tier_weight(d: &TierDemand, epsilon: f64) -> f64 {
    (d.rps_observed.max(0.0) + epsilon) / (d.served_rps.max(0.0) + epsilon)
}

/// Every balanced candidate for every non-background tier that fits `pool_size`.
pub fn enumerate_candidates(
    envelopes: &EnvelopeTable,
    tiers: &[SloTier],
    demands: &[TierDemand],
    pool_size: u32,
    epsilon: f64,
) -> Vec<ConfigCandidate> {
    enumerate_candidates_with(
        Exec::default(),
        envelopes,
        tiers,
        demands,
        pool_size,
        epsilon,
    )
}

pub fn enumerate_candidates_with(
    exec: Exec,
    envelopes: &EnvelopeTable,
    tiers: &[SloTier],
    demands: &[TierDemand],
    pool_size: u32,
    epsilon: f64,
) -> Vec<ConfigCandidate> {
    let fg: Vec<&SloTier> = tiers.iter().filter(|t| !t.background).collect();
    par::map(exec, &fg, |tier| {
        let demand = demand_of(demands, tier.id);
        let tps = envelopes.tp_levels(tier.id);
        let mut out = Vec::new();
        for &tpi in &tps {
            for &tpj in &tps {
                let (Some(ep), Some(ed)) =
                    (envelopes.get(tier.id, tpi), envelopes.get(tier.id, tpj))
                else {
                    continue;
                };
                if ep.thp <= 0.0 || ed.thd <= 0.0 {
                    continue;
                }
                for p in 1.. {
                    let Some(mut c) =
                        ConfigCandidate::balanced(tier.id, tpi, tpj, p, ep.thp, ed.thd)
                    else {
                        break;
                    };
                    if c.gpus_used > pool_size {
                        break;
                    }
                    c.ge = goodput_efficiency(&c, &demand);
                    c.wge = weighted_score(c.ge, &demand, epsilon);
                    out.push(c);
                }
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Prefill,
    Decode,
    /// Serves background requests end to end.
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub gpu_ids: Vec<u32>,
    /// `None` for background groups.
    pub tier_id: Option<TierId>,
    pub stage: StageKind,
    pub tp: u32,
}

impl GroupSpec {
    fn key(&self) -> (Option<TierId>, StageKind, u32) {
        (self.tier_id, self.stage, self.tp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub window_index: u64,
    pub pool_size: u32,
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("group {0} has tp {1} but {2} GPUs")]
    SizeMismatch(usize, u32, usize),
    #[error("GPU {0} is outside the pool")]
    OutOfPool(u32),
    #[error("GPU {0} is assigned twice")]
    Overlap(u32),
    #[error("group {0} stage and tier disagree")]
    TierMismatch(usize),
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            if g.tp == 0 || g.gpu_ids.len() != g.tp as usize {
                return Err(ConfigError::SizeMismatch(i, g.tp, g.gpu_ids.len()));
            }
            if (g.stage == StageKind::Background) != g.tier_id.is_none() {
                return Err(ConfigError::TierMismatch(i));
            }
            for &id in &g.gpu_ids {
                if id >= self.pool_size {
                    return Err(ConfigError::OutOfPool(id));
                }
                if !seen.insert(id) {
                    return Err(ConfigError::Overlap(id));
                }
            }
        }
        Ok(())
    }

    pub fn gpus_used(&self) -> u32 {
        self.groups.iter().map(|g| g.tp).sum()
    }

    /// Same groups, ignoring window index and group order.
    pub fn same_groups(&self, other: &ClusterConfig) -> bool {
        let mut a = self.groups.clone();
        let mut b = other.groups.clone();
        a.sort_by(|x, y| x.gpu_ids.cmp(&y.gpu_ids));
        b.sort_by(|x, y| x.gpu_ids.cmp(&y.gpu_ids));
        a == b
    }

    /// Prefill-side capacity per tier under `envelopes`.
    pub fn prefill_capacity(&self, envelopes: &EnvelopeTable) -> BTreeMap<TierId, f64> {
        let mut m = BTreeMap::new();
        for g in self.groups.iter().filter(|g| g.stage == StageKind::Prefill) {
            let t = g.tier_id.expect("prefill group has a tier");
            *m.entry(t).or_insert(0.0) += envelopes.get(t, g.tp).map_or(0.0, |e| e.thp);
        }
        m
    }

    /// Singleton background groups over the whole pool.
    pub fn all_background(pool_size: u32) -> Self {
        Self {
            window_index: 0,
            pool_size,
            groups: (0..pool_size).map(background_group).collect(),
        }
    }
}

fn background_group(id: u32) -> GroupSpec {
    GroupSpec {
        gpu_ids: vec![id],
        tier_id: None,
        stage: StageKind::Background,
        tp: 1,
    }
}

/// Per-tier chosen units, in tier order.
pub(crate) type Allocation = Vec<(TierId, Vec<ConfigCandidate>)>;

/// Lays `alloc` out on the pool. Leftover GPUs become extra decode groups for
/// the unmet tier with the largest decode group, then background singletons.
pub(crate) fn build_config(
    pool_size: u32,
    alloc: &Allocation,
    unmet: &BTreeSet<TierId>,
) -> ClusterConfig {
    let mut groups = Vec::new();
    let mut next = 0u32;
    let mut take = |tp: u32| {
        let ids: Vec<u32> = (next..next + tp).collect();
        next += tp;
        ids
    };
    let mut largest_decode: Option<(u32, TierId)> = None;
    for (tier, units) in alloc {
        for c in units {
            for _ in 0..c.prefill_groups {
                groups.push(GroupSpec {
                    gpu_ids: take(c.tp_prefill),
                    tier_id: Some(*tier),
                    stage: StageKind::Prefill,
                    tp: c.tp_prefill,
                });
            }
            for _ in 0..c.decode_groups {
                groups.push(GroupSpec {
                    gpu_ids: take(c.tp_decode),
                    tier_id: Some(*tier),
                    stage: StageKind::Decode,
                    tp: c.tp_decode,
                });
            }
            if unmet.contains(tier) && largest_decode.is_none_or(|(tp, _)| c.tp_decode > tp) {
                largest_decode = Some((c.tp_decode, *tier));
            }
        }
    }
    let used: u32 = groups.iter().map(|g| g.tp).sum();
    assert!(
        used <= pool_size,
        "allocation uses {used} of {pool_size} GPUs"
    );
    let mut left = pool_size - used;
    if let Some((tp, tier)) = largest_decode {
        while left >= tp {
            groups.push(GroupSpec {
                gpu_ids: take(tp),
                tier_id: Some(tier),
                stage: StageKind::Decode,
                tp,
            });
            left -= tp;
        }
    }
    for _ in 0..left {
        groups.push(background_group(take(1)[0]));
    }
    ClusterConfig {
        window_index: 0,
        pool_size,
        groups,
    }
}

/// Keeps GPU ids of groups whose `(tier, stage, tp)` also existed in
/// `previous`; remaining groups get the lowest free ids, contiguous when
/// possible.
pub fn stabilize(new: ClusterConfig, previous: Option<&ClusterConfig>) -> ClusterConfig {
    let Some(prev) = previous.filter(|p| p.pool_size == new.pool_size) else {
        return new;
    };
    let mut pool: BTreeMap<_, Vec<&GroupSpec>> = BTreeMap::new();
    for g in &prev.groups {
        pool.entry(g.key()).or_default().push(g);
    }
    for v in pool.values_mut() {
        v.reverse();
    }
    let mut free: BTreeSet<u32> = (0..new.pool_size).collect();
    let mut out: Vec<Option<Vec<u32>>> = Vec::with_capacity(new.groups.len());
    for g in &new.groups {
        let reuse = pool.get_mut(&g.key()).and_then(|v| v.pop());
        match reuse {
            Some(p) => {
                for id in &p.gpu_ids {
                    free.remove(id);
                }
                out.push(Some(p.gpu_ids.clone()));
            }
            None => out.push(None),
        }
    }
    let groups = new
        .groups
        .iter()
        .zip(out)
        .map(|(g, ids)| {
            let gpu_ids = ids.unwrap_or_else(|| take_free(&mut free, g.tp));
            GroupSpec {
                gpu_ids,
                ..g.clone()
            }
        })
        .collect();
    ClusterConfig { groups, ..new }
}

fn take_free(free: &mut BTreeSet<u32>, n: u32) -> Vec<u32> {
    let ids: Vec<u32> = free.iter().copied().collect();
    let run = ids
        .windows(n as usize)
        .find(|w| w[n as usize - 1] - w[0] == n - 1)
        .map(|w| w.to_vec())
        .unwrap_or_else(|| ids[..n as usize].to_vec());
    for id in &run {
        free.remove(id);
    }
    run
}

/// One adaptive planning step.
pub fn plan_window(
    envelopes: &EnvelopeTable,
    tiers: &[SloTier],
    demands: &[TierDemand],
    pool_size: u32,
    previous: Option<&ClusterConfig>,
    opts: &GreedyOptions,
) -> ClusterConfig {
    let cands = enumerate_candidates_with(
        opts.exec,
        envelopes,
        tiers,
        demands,
        pool_size,
        opts.epsilon,
    );
    let mut cfg = stabilize(assign_greedy(&cands, demands, pool_size, opts), previous);
    cfg.window_index = previous.map_or(0, |p| p.window_index + 1);
    cfg
}
