//! Exact per-tier packing and budget splitting.
//!
//! For one tier, the best served rate within a GPU budget is an unbounded
//! knapsack over its candidates with the value capped at the tier's demand.
//! Capping inside the recurrence is exact because `min(a + c, R)` only
//! depends on `min(a, R)`.

use super::ConfigCandidate;
use crate::trace::TierId;

fn tol(r: f64) -> f64 {
    1e-9 * r.max(1.0)
}

#[derive(Debug, Clone)]
pub struct TierTable {
    pub tier_id: TierId,
    pub demand: f64,
    cands: Vec<ConfigCandidate>,
    /// Best capped capacity with at most `b` GPUs.
    best: Vec<f64>,
    /// `None` means budget `b` is no better than `b - 1`.
    pick: Vec<Option<(usize, usize)>>,
}

impl TierTable {
    pub fn build<'a>(
        tier_id: TierId,
        demand: f64,
        cands: impl IntoIterator<Item = &'a ConfigCandidate>,
        pool: u32,
    ) -> Self {
        let cands: Vec<ConfigCandidate> = cands
            .into_iter()
            .filter(|c| c.tier_id == tier_id)
            .copied()
            .collect();
        let n = pool as usize;
        let r = demand.max(0.0);
        let mut best = vec![0.0; n + 1];
        let mut pick = vec![None; n + 1];
        for b in 1..=n {
            let mut v = best[b - 1];
            let mut p = None;
            for (i, c) in cands.iter().enumerate() {
                let g = c.gpus_used as usize;
                if g == 0 || g > b {
                    continue;
                }
                let cand = (best[b - g] + c.capacity()).min(r);
                if cand > v + tol(r) {
                    v = cand;
                    p = Some((i, b - g));
                }
            }
            best[b] = v;
            pick[b] = p;
        }
        Self {
            tier_id,
            demand: r,
            cands,
            best,
            pick,
        }
    }

    pub fn value(&self, budget: u32) -> f64 {
        self.best[(budget as usize).min(self.best.len() - 1)]
    }

    pub fn is_met(&self, budget: u32) -> bool {
        self.value(budget) >= self.demand - tol(self.demand)
    }

    /// Units achieving [`value`](Self::value) at `budget`, using as few GPUs
    /// as possible.
    pub fn units(&self, budget: u32) -> Vec<ConfigCandidate> {
        let mut b = (budget as usize).min(self.best.len() - 1);
        let mut out = Vec::new();
        while b > 0 {
            match self.pick[b] {
                None => b -= 1,
                Some((i, prev)) => {
                    out.push(self.cands[i]);
                    b = prev;
                }
            }
        }
        out.sort_by_key(|c| (c.tp_prefill, c.tp_decode, c.prefill_groups));
        out
    }
}

/// Budgets maximizing `Σ weight_t * value_t(b_t)` with `Σ b_t <= pool`.
/// Ties favor fewer GPUs for earlier tiers.
pub fn best_split(tables: &[TierTable], weights: &[f64], pool: u32) -> Vec<u32> {
    let n = pool as usize;
    let t = tables.len();
    // f[i][m]: best objective of tables[i..] with at most m GPUs.
    let mut f = vec![vec![0.0; n + 1]; t + 1];
    let mut arg = vec![vec![0usize; n + 1]; t];
    for i in (0..t).rev() {
        for m in 0..=n {
            let mut bv = f64::NEG_INFINITY;
            let mut bb = 0;
            for b in 0..=m {
                let v = weights[i] * tables[i].value(b as u32) + f[i + 1][m - b];
                if b == 0 || v > bv + 1e-9 * bv.abs().max(1.0) {
                    bv = v;
                    bb = b;
                }
            }
            f[i][m] = bv;
            arg[i][m] = bb;
        }
    }
    let mut m = n;
    let mut out = Vec::with_capacity(t);
    for a in arg.iter() {
        let b = a[m];
        out.push(b as u32);
        m -= b;
    }
    out
}
