//! SLO-constrained throughput envelopes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PerfProfile, ProfileError, Stage};
use crate::trace::{SloTier, TierId};

/// Maximum SLO-compliant rates of one TP group serving one tier.
///
/// Rates are per group, not per GPU; goodput efficiency divides by GPU count
/// later.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEnvelope {
    pub tier_id: TierId,
    pub tp: u32,
    /// Prefill requests per second.
    pub thp: f64,
    /// Decode completions per second.
    pub thd: f64,
    pub prefill_batch_cap: u32,
    pub decode_batch_cap: u32,
}

impl ThroughputEnvelope {
    pub fn zero(tier_id: TierId, tp: u32) -> Self {
        Self {
            tier_id,
            tp,
            thp: 0.0,
            thd: 0.0,
            prefill_batch_cap: 0,
            decode_batch_cap: 0,
        }
    }
}

/// Context length used to key decode lookups: mid-generation.
pub fn decode_context(avg_prompt_len: f64, avg_output_len: f64) -> f64 {
    avg_prompt_len + avg_output_len / 2.0
}

/// Largest grid batch whose latency fits under `budget_ms`, with its latency.
fn largest_fitting(
    profile: &PerfProfile,
    stage: Stage,
    tp: u32,
    seq: f64,
    budget_ms: f64,
) -> Result<Option<(u32, f64)>, ProfileError> {
    let mut best = None;
    for &b in profile.batch_grid(stage, tp)? {
        let ms = profile.lookup_latency_f64(stage, tp, b as f64, seq)?.ms;
        if ms <= budget_ms {
            best = Some((b, ms));
        } else {
            // Latency is non-decreasing in batch.
            break;
        }
    }
    Ok(best)
}

/// Derives THP/THD for `tier` at `tp`.
///
/// Batch caps are searched over the profile's grid batch sizes. `headroom`
/// scales both targets (1.0 uses them as-is).
pub fn derive_envelope(
    profile: &PerfProfile,
    tier: &SloTier,
    tp: u32,
    avg_prompt_len: f64,
    avg_output_len: f64,
    headroom: f64,
) -> Result<ThroughputEnvelope, ProfileError> {
    let mut env = ThroughputEnvelope::zero(tier.id, tp);
    if tier.background {
        return Ok(env);
    }
    let prompt = avg_prompt_len.max(1.0);
    let output = avg_output_len.max(1.0);

    if let Some((cap, ms)) = largest_fitting(
        profile,
        Stage::Prefill,
        tp,
        prompt,
        headroom * tier.ttft_target_ms,
    )? {
        env.prefill_batch_cap = cap;
        env.thp = cap as f64 / (ms / 1e3);
    }
    let ctx = decode_context(prompt, output);
    if let Some((cap, ms)) = largest_fitting(
        profile,
        Stage::Decode,
        tp,
        ctx,
        headroom * tier.tpot_target_ms,
    )? {
        env.decode_batch_cap = cap;
        env.thd = cap as f64 / (output * ms / 1e3);
    }
    Ok(env)
}

/// Envelopes keyed by `(tier, tp)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeTable {
    entries: BTreeMap<(TierId, u32), ThroughputEnvelope>,
}

impl EnvelopeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds envelopes for every non-background tier at every TP level.
    /// `lengths` supplies `(avg_prompt_len, avg_output_len)` per tier.
    pub fn build(
        profile: &PerfProfile,
        tiers: &[SloTier],
        mut lengths: impl FnMut(TierId) -> (f64, f64),
        headroom: f64,
    ) -> Result<Self, ProfileError> {
        let mut t = Self::new();
        for tier in tiers.iter().filter(|t| !t.background) {
            let (p, o) = lengths(tier.id);
            for &tp in profile.tp_levels() {
                t.insert(derive_envelope(profile, tier, tp, p, o, headroom)?);
            }
        }
        Ok(t)
    }

    pub fn insert(&mut self, env: ThroughputEnvelope) {
        self.entries.insert((env.tier_id, env.tp), env);
    }

    pub fn get(&self, tier: TierId, tp: u32) -> Option<&ThroughputEnvelope> {
        self.entries.get(&(tier, tp))
    }

    /// TP levels present for `tier`, ascending.
    pub fn tp_levels(&self, tier: TierId) -> Vec<u32> {
        self.entries
            .range((tier, 0)..=(tier, u32::MAX))
            .map(|(&(_, tp), _)| tp)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ThroughputEnvelope> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Two tiers from micro-benchmark latencies at the smallest TP level: the
/// strict tier at `strict_batch`, the relaxed tier at `relaxed_batch`, both
/// multiplied by `scale`.
#[allow(clippy::too_many_arguments)]
pub fn derive_slos(
    profile: &PerfProfile,
    tp_min: u32,
    avg_prompt_len: f64,
    avg_output_len: f64,
    strict_batch: u32,
    relaxed_batch: u32,
    scale: f64,
) -> Result<(SloTier, SloTier), ProfileError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ProfileError::Invalid(format!(
            "SLO scale must be positive, got {scale}"
        )));
    }
    let ctx = decode_context(avg_prompt_len.max(1.0), avg_output_len.max(1.0));
    let targets = |batch: u32| -> Result<(f64, f64), ProfileError> {
        let ttft = profile
            .lookup_latency_f64(
                Stage::Prefill,
                tp_min,
                batch as f64,
                avg_prompt_len.max(1.0),
            )?
            .ms;
        let tpot = profile
            .lookup_latency_f64(Stage::Decode, tp_min, batch as f64, ctx)?
            .ms;
        Ok((ttft * scale, tpot * scale))
    };
    let (st, sp) = targets(strict_batch)?;
    let (rt, rp) = targets(relaxed_batch)?;
    Ok((
        SloTier::new(0, "strict", st, sp),
        SloTier::new(1, "relaxed", rt, rp),
    ))
}
