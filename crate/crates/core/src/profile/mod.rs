//! Offline prefill/decode latency tables.
//!
//! A profile maps `(stage, tp, batch, seq_len)` to a latency in milliseconds.
//! Each `(stage, tp)` pair must form a full rectangular grid over its batch and
//! sequence-length axes; lookups between grid points interpolate bilinearly in
//! `(ln batch, ln seq_len)` and clamp at the edges.

mod bundled;
mod envelope;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::migration::CostModelParams;

pub use bundled::{a100_like, builtin, h100_like, BUILTIN_NAMES};
pub use envelope::{derive_envelope, derive_slos, EnvelopeTable, ThroughputEnvelope};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("no {stage} entries for tp {tp}")]
    UnknownKey { stage: Stage, tp: u32 },
    #[error("unknown builtin profile {0:?}")]
    UnknownBuiltin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub gpu_type: String,
    pub model_name: String,
    pub tp_levels: Vec<u32>,
    /// Size of one full copy of the model weights, GB.
    pub weight_full_copy_gb: f64,
    pub kv_bytes_per_token_per_head: u64,
    pub total_kv_heads: u32,
    pub gpu_memory_gb: f64,
    #[serde(default)]
    pub migration: CostModelParams,
}

/// `[stage, tp, batch, seq_len, latency_ms]`
pub type ProfileEntry = (Stage, u32, u32, u32, f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileFile {
    metadata: ProfileMeta,
    entries: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct Grid {
    batches: Vec<u32>,
    seqs: Vec<u32>,
    /// Row-major: `lat[bi * seqs.len() + si]`.
    lat: Vec<f64>,
}

impl Grid {
    fn at(&self, bi: usize, si: usize) -> f64 {
        self.lat[bi * self.seqs.len() + si]
    }
}

/// Result of a latency lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub ms: f64,
    /// Set when the key fell outside the grid and was clamped to its edge.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfProfile {
    pub meta: ProfileMeta,
    grids: BTreeMap<(Stage, u32), Grid>,
}

impl PerfProfile {
    /// Builds a profile from raw entries, validating every invariant.
    pub fn from_entries(meta: ProfileMeta, entries: &[ProfileEntry]) -> Result<Self, ProfileError> {
        let invalid = |m: String| ProfileError::Invalid(m);
        if meta.tp_levels.is_empty() {
            return Err(invalid("tp_levels is empty".into()));
        }
        let mut levels = meta.tp_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        if levels.len() != meta.tp_levels.len() || levels != meta.tp_levels {
            return Err(invalid("tp_levels must be strictly increasing".into()));
        }
        if meta.total_kv_heads == 0 {
            return Err(invalid("total_kv_heads must be positive".into()));
        }
        for &tp in &meta.tp_levels {
            if tp == 0 || !meta.total_kv_heads.is_multiple_of(tp) {
                return Err(invalid(format!(
                    "total_kv_heads {} not divisible by tp {tp}",
                    meta.total_kv_heads
                )));
            }
        }
        if meta.kv_bytes_per_token_per_head == 0 {
            return Err(invalid(
                "kv_bytes_per_token_per_head must be positive".into(),
            ));
        }
        if !(meta.weight_full_copy_gb >= 0.0 && meta.gpu_memory_gb > 0.0) {
            return Err(invalid("memory sizes must be non-negative".into()));
        }
        meta.migration
            .validate()
            .map_err(|e| invalid(format!("migration params: {e}")))?;

        let mut raw: BTreeMap<(Stage, u32), BTreeMap<(u32, u32), f64>> = BTreeMap::new();
        for &(stage, tp, batch, seq, ms) in entries {
            if !meta.tp_levels.contains(&tp) {
                return Err(invalid(format!("entry uses tp {tp} not in tp_levels")));
            }
            if batch == 0 || seq == 0 {
                return Err(invalid(format!(
                    "{stage} tp {tp}: batch and seq_len must be >= 1"
                )));
            }
            if !(ms.is_finite() && ms > 0.0) {
                return Err(invalid(format!(
                    "{stage} tp {tp} batch {batch} seq {seq}: latency must be positive"
                )));
            }
            if raw
                .entry((stage, tp))
                .or_default()
                .insert((batch, seq), ms)
                .is_some()
            {
                return Err(invalid(format!(
                    "duplicate entry {stage} tp {tp} batch {batch} seq {seq}"
                )));
            }
        }

        let mut grids = BTreeMap::new();
        for &tp in &meta.tp_levels {
            for stage in [Stage::Prefill, Stage::Decode] {
                let cells = raw
                    .remove(&(stage, tp))
                    .ok_or_else(|| invalid(format!("tp {tp} has no {stage} entries")))?;
                let batches: Vec<u32> = cells
                    .keys()
                    .map(|k| k.0)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let seqs: Vec<u32> = cells
                    .keys()
                    .map(|k| k.1)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if cells.len() != batches.len() * seqs.len() {
                    return Err(invalid(format!(
                        "{stage} tp {tp}: entries do not form a full batch x seq_len grid"
                    )));
                }
                let mut lat = Vec::with_capacity(cells.len());
                for &b in &batches {
                    for &s in &seqs {
                        lat.push(cells[&(b, s)]);
                    }
                }
                let grid = Grid { batches, seqs, lat };
                for si in 0..grid.seqs.len() {
                    for bi in 1..grid.batches.len() {
                        if grid.at(bi, si) < grid.at(bi - 1, si) {
                            return Err(invalid(format!(
                                "{stage} tp {tp} seq {}: latency decreases from batch {} to {}",
                                grid.seqs[si],
                                grid.batches[bi - 1],
                                grid.batches[bi]
                            )));
                        }
                    }
                }
                grids.insert((stage, tp), grid);
            }
        }
        Ok(Self { meta, grids })
    }

    pub fn from_json(src: &str) -> Result<Self, ProfileError> {
        let file: ProfileFile = serde_json::from_str(src)?;
        Self::from_entries(file.metadata, &file.entries)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let src = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&src)
    }

    /// Resolves `builtin:<name>` or a file path.
    pub fn resolve(spec: &str, base: &Path) -> Result<Self, ProfileError> {
        match spec.strip_prefix("builtin:") {
            Some(name) => builtin(name),
            None => Self::load(&base.join(spec)),
        }
    }

    pub fn entries(&self) -> Vec<ProfileEntry> {
        let mut out = Vec::new();
        for (&(stage, tp), g) in &self.grids {
            for (bi, &b) in g.batches.iter().enumerate() {
                for (si, &s) in g.seqs.iter().enumerate() {
                    out.push((stage, tp, b, s, g.at(bi, si)));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            metadata: self.meta.clone(),
            entries: self.entries(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn tp_levels(&self) -> &[u32] {
        &self.meta.tp_levels
    }

    pub fn min_tp(&self) -> u32 {
        self.meta.tp_levels[0]
    }

    /// Grid batch sizes for `(stage, tp)`, ascending.
    pub fn batch_grid(&self, stage: Stage, tp: u32) -> Result<&[u32], ProfileError> {
        self.grid(stage, tp).map(|g| g.batches.as_slice())
    }

    pub fn max_batch(&self, stage: Stage, tp: u32) -> Result<u32, ProfileError> {
        self.batch_grid(stage, tp)
            .map(|b| *b.last().expect("grid is non-empty"))
    }

    /// KV bytes a request holds for `tokens` of context across all heads.
    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        tokens * self.meta.kv_bytes_per_token_per_head * self.meta.total_kv_heads as u64
    }

    fn grid(&self, stage: Stage, tp: u32) -> Result<&Grid, ProfileError> {
        self.grids
            .get(&(stage, tp))
            .ok_or(ProfileError::UnknownKey { stage, tp })
    }

    /// Latency in milliseconds for one iteration (decode) or one batch pass
    /// (prefill).
    pub fn lookup_latency(
        &self,
        stage: Stage,
        tp: u32,
        batch: u32,
        seq_len: u32,
    ) -> Result<Latency, ProfileError> {
        self.lookup_latency_f64(stage, tp, batch.max(1) as f64, seq_len.max(1) as f64)
    }

    /// Same as [`lookup_latency`](Self::lookup_latency) with fractional keys,
    /// e.g. a mean context length.
    pub fn lookup_latency_f64(
        &self,
        stage: Stage,
        tp: u32,
        batch: f64,
        seq_len: f64,
    ) -> Result<Latency, ProfileError> {
        let g = self.grid(stage, tp)?;
        let (b0, b1, wb, eb) = bracket(&g.batches, batch);
        let (s0, s1, ws, es) = bracket(&g.seqs, seq_len);
        let lo = g.at(b0, s0) * (1.0 - ws) + g.at(b0, s1) * ws;
        let hi = g.at(b1, s0) * (1.0 - ws) + g.at(b1, s1) * ws;
        Ok(Latency {
            ms: lo * (1.0 - wb) + hi * wb,
            extrapolated: eb || es,
        })
    }

    /// Convenience: latency in milliseconds, ignoring the extrapolation flag.
    pub fn latency_ms(
        &self,
        stage: Stage,
        tp: u32,
        batch: u32,
        seq_len: u32,
    ) -> Result<f64, ProfileError> {
        self.lookup_latency(stage, tp, batch, seq_len).map(|l| l.ms)
    }
}

/// Bracketing indices and log-space weight of `x` within `axis`.
fn bracket(axis: &[u32], x: f64) -> (usize, usize, f64, bool) {
    let last = axis.len() - 1;
    if x <= axis[0] as f64 {
        return (0, 0, 0.0, x < axis[0] as f64);
    }
    if x >= axis[last] as f64 {
        return (last, last, 0.0, x > axis[last] as f64);
    }
    let hi = axis.partition_point(|&a| (a as f64) < x);
    if axis[hi] as f64 == x {
        return (hi, hi, 0.0, false);
    }
    let lo = hi - 1;
    let (la, lb, lx) = ((axis[lo] as f64).ln(), (axis[hi] as f64).ln(), x.ln());
    (lo, hi, (lx - la) / (lb - la), false)
}
