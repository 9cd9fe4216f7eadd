use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::exact::{best_split, TierTable};
use super::{
    build_config, demand_of, enumerate_candidates_with, plan_window, stabilize, Allocation,
    ClusterConfig, ConfigCandidate, GreedyOptions, PolicyError, TierDemand, ORACLE_MAX_POOL,
};
use crate::profile::EnvelopeTable;
use crate::trace::{SloTier, TierId};

/// Inputs available to a policy at a control-window boundary.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub window_index: u64,
    pub pool_size: u32,
    pub tiers: &'a [SloTier],
    pub envelopes: &'a EnvelopeTable,
    /// Arrivals and SLO-meeting completions over the window that just ended.
    pub demands: &'a [TierDemand],
    /// Arrivals the upcoming window will actually see. Only the oracle reads it.
    pub lookahead: &'a [TierDemand],
    /// Mean arrival rate over the whole trace, for static planning.
    pub mean_demands: &'a [TierDemand],
    pub previous: Option<&'a ClusterConfig>,
}

pub trait Policy: Send {
    fn name(&self) -> String;
    fn plan(&mut self, ctx: &PlanContext) -> ClusterConfig;
    /// Confine spilled requests to their own tier's prefill groups.
    fn isolate_tiers(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicyKind {
    Adaptive,
    /// Adaptive without unmet-demand weighting.
    Unweighted,
    /// Adaptive with the greedy pass only, no exact repack.
    GreedyOnly,
    StaticTp {
        prefill: u32,
        decode: u32,
    },
    Split,
    Oracle,
}

impl PolicyKind {
    pub fn label(&self) -> String {
        match self {
            Self::Adaptive => "adaptive".into(),
            Self::Unweighted => "unweighted".into(),
            Self::GreedyOnly => "greedy_only".into(),
            Self::StaticTp { prefill, decode } if prefill == decode => {
                format!("static_tp{prefill}")
            }
            Self::StaticTp { prefill, decode } => format!("static_tp{prefill}_tp{decode}"),
            Self::Split => "split".into(),
            Self::Oracle => "oracle".into(),
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = PolicyError;

    /// Accepts the labels produced by [`PolicyKind::label`] plus
    /// `static_mixed` (TP1 prefill, TP2 decode).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        let parse_tp = |x: &str| x.parse::<u32>().ok().filter(|&t| t > 0);
        Ok(match s.as_str() {
            "adaptive" => Self::Adaptive,
            "unweighted" => Self::Unweighted,
            "greedy_only" => Self::GreedyOnly,
            "split" => Self::Split,
            "oracle" | "oracle_dynamic" => Self::Oracle,
            "static_mixed" => Self::StaticTp {
                prefill: 1,
                decode: 2,
            },
            other => {
                let rest = other
                    .strip_prefix("static_tp")
                    .ok_or_else(|| PolicyError::Unknown(s.clone()))?;
                let (p, d) = match rest.split_once("_tp") {
                    Some((p, d)) => (parse_tp(p), parse_tp(d)),
                    None => (parse_tp(rest), parse_tp(rest)),
                };
                match (p, d) {
                    (Some(prefill), Some(decode)) => Self::StaticTp { prefill, decode },
                    _ => return Err(PolicyError::Unknown(s.clone())),
                }
            }
        })
    }
}

pub fn baseline_policy(kind: PolicyKind, pool_size: u32) -> Result<Box<dyn Policy>, PolicyError> {
    if pool_size == 0 {
        return Err(PolicyError::EmptyPool);
    }
    Ok(match kind {
        PolicyKind::Adaptive => Box::new(AdaptivePolicy::new(GreedyOptions::default())),
        PolicyKind::Unweighted => Box::new(AdaptivePolicy::new(GreedyOptions::unweighted())),
        PolicyKind::GreedyOnly => Box::new(AdaptivePolicy::new(GreedyOptions {
            repack: false,
            ..Default::default()
        })),
        PolicyKind::StaticTp { prefill, decode } => {
            let tp = prefill.max(decode);
            if tp > pool_size {
                return Err(PolicyError::TpExceedsPool {
                    tp,
                    pool: pool_size,
                });
            }
            Box::new(StaticPolicy::new(prefill, decode))
        }
        PolicyKind::Split => Box::new(SplitPolicy::default()),
        PolicyKind::Oracle => Box::new(OraclePolicy::new(pool_size)?),
    })
}

pub struct AdaptivePolicy {
    pub opts: GreedyOptions,
}

impl AdaptivePolicy {
    pub fn new(opts: GreedyOptions) -> Self {
        Self { opts }
    }
}

impl Policy for AdaptivePolicy {
    fn name(&self) -> String {
        match (self.opts.weighted, self.opts.repack) {
            (true, true) => "adaptive".into(),
            (false, true) => "unweighted".into(),
            (true, false) => "greedy_only".into(),
            (false, false) => "unweighted_greedy_only".into(),
        }
    }

    fn plan(&mut self, ctx: &PlanContext) -> ClusterConfig {
        plan_window(
            ctx.envelopes,
            ctx.tiers,
            ctx.demands,
            ctx.pool_size,
            ctx.previous,
            &self.opts,
        )
    }
}

/// Foreground tiers with positive demand, or all foreground tiers if none has.
fn active_tiers(tiers: &[SloTier], demands: &[TierDemand]) -> Vec<TierId> {
    let fg: Vec<TierId> = tiers
        .iter()
        .filter(|t| !t.background)
        .map(|t| t.id)
        .collect();
    let busy: Vec<TierId> = fg
        .iter()
        .copied()
        .filter(|&t| demand_of(demands, t).rps_observed > 0.0)
        .collect();
    if busy.is_empty() {
        fg
    } else {
        busy
    }
}

/// Fills `pool` at a fixed TP pair one prefill group at a time, always growing
/// the tier whose capacity is smallest relative to its demand. Each tier keeps
/// the fewest decode groups that cover its prefill rate.
fn fill_static(
    envelopes: &EnvelopeTable,
    tiers: &[TierId],
    demands: &[TierDemand],
    tpi: u32,
    tpj: u32,
    pool: u32,
) -> Allocation {
    let rates: Vec<(TierId, f64, f64)> = tiers
        .iter()
        .filter_map(|&t| {
            let ep = envelopes.get(t, tpi)?;
            let ed = envelopes.get(t, tpj)?;
            (ep.thp > 0.0 && ed.thd > 0.0).then_some((t, ep.thp, ed.thd))
        })
        .collect();
    let unit = |k: usize, p: u32| {
        let (t, thp, thd) = rates[k];
        ConfigCandidate::balanced(t, tpi, tpj, p, thp, thd)
    };
    let mut groups = vec![0u32; rates.len()];
    let mut used = 0u32;
    loop {
        let ratio = |k: usize| {
            let cap = if groups[k] == 0 {
                0.0
            } else {
                unit(k, groups[k]).map_or(0.0, |c| c.capacity())
            };
            cap / demand_of(demands, rates[k].0).rps_observed.max(1e-9)
        };
        let cost = |k: usize| {
            let now = if groups[k] == 0 {
                0
            } else {
                unit(k, groups[k]).map_or(0, |c| c.gpus_used)
            };
            unit(k, groups[k] + 1).map(|c| c.gpus_used - now)
        };
        let pick = (0..rates.len())
            .filter(|&k| cost(k).is_some_and(|c| used + c <= pool))
            .min_by(|&a, &b| ratio(a).total_cmp(&ratio(b)).then(a.cmp(&b)));
        let Some(k) = pick else { break };
        used += cost(k).expect("filtered");
        groups[k] += 1;
    }
    rates
        .iter()
        .zip(&groups)
        .filter(|(_, &p)| p > 0)
        .filter_map(|(&(t, thp, thd), &p)| {
            Some((
                t,
                vec![ConfigCandidate::balanced(t, tpi, tpj, p, thp, thd)?],
            ))
        })
        .collect()
}

/// Tiers whose extra decode groups should absorb leftovers: all served tiers.
fn served_tiers(alloc: &Allocation) -> BTreeSet<TierId> {
    alloc.iter().map(|(t, _)| *t).collect()
}

/// One fixed configuration for the whole run, planned once on mean demand.
pub struct StaticPolicy {
    pub tp_prefill: u32,
    pub tp_decode: u32,
    planned: Option<ClusterConfig>,
}

impl StaticPolicy {
    pub fn new(tp_prefill: u32, tp_decode: u32) -> Self {
        Self {
            tp_prefill,
            tp_decode,
            planned: None,
        }
    }
}

impl Policy for StaticPolicy {
    fn name(&self) -> String {
        PolicyKind::StaticTp {
            prefill: self.tp_prefill,
            decode: self.tp_decode,
        }
        .label()
    }

    fn plan(&mut self, ctx: &PlanContext) -> ClusterConfig {
        let cfg = self.planned.get_or_insert_with(|| {
            let tiers = active_tiers(ctx.tiers, ctx.mean_demands);
            let alloc = fill_static(
                ctx.envelopes,
                &tiers,
                ctx.mean_demands,
                self.tp_prefill,
                self.tp_decode,
                ctx.pool_size,
            );
            build_config(ctx.pool_size, &alloc, &served_tiers(&alloc))
        });
        ClusterConfig {
            window_index: ctx.window_index,
            ..cfg.clone()
        }
    }
}

/// Equal fixed sub-pools per foreground tier, each at the TP pair that serves
/// the tier's mean demand best on its sub-pool.
#[derive(Default)]
pub struct SplitPolicy {
    planned: Option<ClusterConfig>,
}

impl SplitPolicy {
    fn build(ctx: &PlanContext) -> ClusterConfig {
        let fg: Vec<TierId> = ctx
            .tiers
            .iter()
            .filter(|t| !t.background)
            .map(|t| t.id)
            .collect();
        if fg.is_empty() {
            return ClusterConfig::all_background(ctx.pool_size);
        }
        let n = fg.len() as u32;
        let mut alloc: Allocation = Vec::new();
        let mut extra = Vec::new();
        for (i, &t) in fg.iter().enumerate() {
            let share = ctx.pool_size / n + u32::from((i as u32) < ctx.pool_size % n);
            let rps = demand_of(ctx.mean_demands, t).rps_observed;
            let tps = ctx.envelopes.tp_levels(t);
            let mut best: Option<(f64, f64, Allocation)> = None;
            for &tpi in &tps {
                for &tpj in &tps {
                    let a = fill_static(ctx.envelopes, &[t], ctx.mean_demands, tpi, tpj, share);
                    let cap: f64 = a.iter().flat_map(|(_, u)| u).map(|c| c.capacity()).sum();
                    let score = cap.min(rps);
                    if best.as_ref().is_none_or(|b| {
                        score > b.0 + 1e-9 || (score >= b.0 - 1e-9 && cap > b.1 + 1e-9)
                    }) {
                        best = Some((score, cap, a));
                    }
                }
            }
            let a = best.map(|b| b.2).unwrap_or_default();
            let used: u32 = a.iter().flat_map(|(_, u)| u).map(|c| c.gpus_used).sum();
            // Leftovers of a sub-pool stay with its tier as decode groups.
            if let Some(u) = a.first().and_then(|(_, u)| u.first()) {
                let k = (share - used) / u.tp_decode;
                extra.push((t, u.tp_decode, k));
            }
            alloc.extend(a);
        }
        let mut cfg = build_config(ctx.pool_size, &alloc, &BTreeSet::new());
        let mut bg: Vec<u32> = cfg
            .groups
            .iter()
            .filter(|g| g.tier_id.is_none())
            .flat_map(|g| g.gpu_ids.clone())
            .collect();
        cfg.groups.retain(|g| g.tier_id.is_some());
        for (t, tp, k) in extra {
            for _ in 0..k {
                let ids: Vec<u32> = bg.drain(..tp as usize).collect();
                cfg.groups.push(super::GroupSpec {
                    gpu_ids: ids,
                    tier_id: Some(t),
                    stage: super::StageKind::Decode,
                    tp,
                });
            }
        }
        for id in bg {
            cfg.groups.push(super::background_group(id));
        }
        cfg
    }
}

impl Policy for SplitPolicy {
    fn name(&self) -> String {
        "split".into()
    }

    fn plan(&mut self, ctx: &PlanContext) -> ClusterConfig {
        let cfg = self.planned.get_or_insert_with(|| Self::build(ctx));
        ClusterConfig {
            window_index: ctx.window_index,
            ..cfg.clone()
        }
    }

    fn isolate_tiers(&self) -> bool {
        true
    }
}

/// Exact served-rate maximization against the arrivals each window will
/// actually see.
pub struct OraclePolicy {
    _pool: u32,
}

impl OraclePolicy {
    pub fn new(pool_size: u32) -> Result<Self, PolicyError> {
        if pool_size > ORACLE_MAX_POOL {
            return Err(PolicyError::OraclePoolTooLarge(pool_size));
        }
        Ok(Self { _pool: pool_size })
    }
}

/// Best allocation of `pool` for `demands` maximizing `Σ min(capacity, rps)`.
pub fn exact_allocation(
    envelopes: &EnvelopeTable,
    tiers: &[SloTier],
    demands: &[TierDemand],
    pool: u32,
) -> (Allocation, BTreeSet<TierId>) {
    let cands = enumerate_candidates_with(
        crate::par::Exec::Sequential,
        envelopes,
        tiers,
        demands,
        pool,
        0.0,
    );
    let ids: Vec<TierId> = tiers
        .iter()
        .filter(|t| !t.background)
        .map(|t| t.id)
        .collect();
    let tables: Vec<TierTable> = ids
        .iter()
        .map(|&t| TierTable::build(t, demand_of(demands, t).rps_observed, &cands, pool))
        .collect();
    let budgets = best_split(&tables, &vec![1.0; tables.len()], pool);
    let alloc: Allocation = ids
        .iter()
        .zip(&tables)
        .zip(&budgets)
        .map(|((&t, tab), &b)| (t, tab.units(b)))
        .filter(|(_, u)| !u.is_empty())
        .collect();
    let unmet = ids
        .iter()
        .zip(&tables)
        .zip(&budgets)
        .filter(|((_, tab), &b)| tab.demand > 0.0 && !tab.is_met(b))
        .map(|((&t, _), _)| t)
        .collect();
    (alloc, unmet)
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn plan(&mut self, ctx: &PlanContext) -> ClusterConfig {
        let (alloc, unmet) =
            exact_allocation(ctx.envelopes, ctx.tiers, ctx.lookahead, ctx.pool_size);
        let mut cfg = stabilize(build_config(ctx.pool_size, &alloc, &unmet), ctx.previous);
        cfg.window_index = ctx.window_index;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{env, tiers};
    use super::super::StageKind;
    use super::*;

    fn ctx<'a>(
        envs: &'a EnvelopeTable,
        t: &'a [SloTier],
        d: &'a [TierDemand],
        pool: u32,
    ) -> PlanContext<'a> {
        PlanContext {
            window_index: 0,
            pool_size: pool,
            tiers: t,
            envelopes: envs,
            demands: d,
            lookahead: d,
            mean_demands: d,
            previous: None,
        }
    }

    #[test]
    fn static_tp1_on_four_gpus() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 5.0, 5.0));
        let t = tiers(1);
        let d = [TierDemand::new(0, 3.0, 0.0)];
        let mut p = baseline_policy("static_tp1".parse().unwrap(), 4).unwrap();
        let a = p.plan(&ctx(&envs, &t, &d, 4));
        assert!(a.validate().is_ok());
        assert_eq!(a.groups.len(), 4);
        assert!(a
            .groups
            .iter()
            .all(|g| g.tp == 1 && g.stage != StageKind::Background));
        let d2 = [TierDemand::new(0, 300.0, 0.0)];
        assert!(p.plan(&ctx(&envs, &t, &d2, 4)).same_groups(&a));
    }

    #[test]
    fn oracle_guard_and_dominance() {
        assert!(matches!(
            baseline_policy(PolicyKind::Oracle, 9),
            Err(PolicyError::OraclePoolTooLarge(9))
        ));
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 1.0, 1.0));
        envs.insert(env(0, 2, 10.0, 10.0));
        let t = tiers(1);
        let d = [TierDemand::new(0, 20.0, 0.0)];
        let cfg = baseline_policy(PolicyKind::Oracle, 8)
            .unwrap()
            .plan(&ctx(&envs, &t, &d, 8));
        assert!(cfg
            .groups
            .iter()
            .filter(|g| g.stage != StageKind::Background)
            .all(|g| g.tp == 2));
        assert_eq!(cfg.prefill_capacity(&envs)[&0], 20.0);
    }

    #[test]
    fn split_idles_zero_demand_subpool() {
        let mut envs = EnvelopeTable::new();
        envs.insert(env(0, 1, 5.0, 5.0));
        envs.insert(env(1, 1, 5.0, 5.0));
        let t = tiers(2);
        let d = [TierDemand::new(0, 0.0, 0.0), TierDemand::new(1, 50.0, 0.0)];
        let mut p = baseline_policy(PolicyKind::Split, 8).unwrap();
        assert!(p.isolate_tiers());
        let cfg = p.plan(&ctx(&envs, &t, &d, 8));
        assert!(cfg.validate().is_ok());
        let per_tier = |id| cfg.groups.iter().filter(|g| g.tier_id == Some(id)).count();
        assert_eq!(per_tier(0), 4);
        assert_eq!(per_tier(1), 4);
    }

    #[test]
    fn policy_names_round_trip() {
        for s in [
            "adaptive",
            "unweighted",
            "greedy_only",
            "static_tp1",
            "static_tp2",
            "static_tp1_tp2",
            "split",
            "oracle",
        ] {
            let k: PolicyKind = s.parse().unwrap();
            assert_eq!(k.label(), s);
        }
        assert_eq!(
            "static-mixed".parse::<PolicyKind>().unwrap(),
            PolicyKind::StaticTp {
                prefill: 1,
                decode: 2
            }
        );
        assert!("static_tp0".parse::<PolicyKind>().is_err());
        assert!("bogus".parse::<PolicyKind>().is_err());
    }
}
