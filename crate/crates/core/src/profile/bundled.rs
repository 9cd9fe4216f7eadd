//! Synthetic profiles for desk-scale experiments.
//!
//! Latencies come from a small analytic model of an 8B-class fp16 model:
//!
//! * prefill: fixed launch cost plus per-token work that shrinks with TP
//!   faster than the added all-reduce cost grows, so higher TP is always
//!   faster;
//! * decode: a weight-streaming term with super-linear TP speedup (smaller
//!   shards stay cache-resident), a per-layer all-reduce cost that grows with
//!   batch, and per-sequence KV/compute work. Per-GPU throughput therefore
//!   favors higher TP at small batch and lower TP at large batch.

use super::{PerfProfile, ProfileEntry, ProfileError, ProfileMeta, Stage};
use crate::migration::CostModelParams;

pub const BUILTIN_NAMES: &[&str] = &["a100-like", "h100-like"];

const TP_LEVELS: [u32; 4] = [1, 2, 4, 8];
const BATCHES: [u32; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
const SEQS: [u32; 7] = [128, 256, 512, 1024, 2048, 4096, 8192];

struct Model {
    gpu: &'static str,
    /// Prefill launch overhead, ms.
    prefill_base: f64,
    /// Prefill per-token cost at TP1, ms.
    prefill_token: f64,
    /// Prefill all-reduce cost per token per doubling of TP, ms.
    prefill_comm: f64,
    /// Quadratic attention cost, ms per token^2 at TP1.
    prefill_attn: f64,
    decode_base: f64,
    /// Time to stream one full weight copy at TP1, ms.
    decode_weights: f64,
    /// Cache benefit per doubling of TP.
    decode_cache_gain: f64,
    decode_comm_fixed: f64,
    decode_comm_per_seq: f64,
    decode_seq: f64,
    decode_kv_token: f64,
}

const A100: Model = Model {
    gpu: "a100-like",
    prefill_base: 4.0,
    prefill_token: 0.06,
    prefill_comm: 0.004,
    prefill_attn: 2e-6,
    decode_base: 1.0,
    decode_weights: 14.0,
    decode_cache_gain: 0.6,
    decode_comm_fixed: 0.25,
    decode_comm_per_seq: 0.04,
    decode_seq: 0.02,
    decode_kv_token: 2e-5,
};

const H100: Model = Model {
    gpu: "h100-like",
    prefill_base: 3.0,
    prefill_token: 0.025,
    prefill_comm: 0.0015,
    prefill_attn: 8e-7,
    decode_base: 0.8,
    decode_weights: 8.0,
    decode_cache_gain: 0.6,
    decode_comm_fixed: 0.15,
    decode_comm_per_seq: 0.02,
    decode_seq: 0.01,
    decode_kv_token: 1e-5,
};

impl Model {
    fn prefill(&self, tp: u32, batch: u32, seq: u32) -> f64 {
        let t = tp as f64;
        let lg = t.log2();
        let tokens = (batch * seq) as f64;
        let attn = self.prefill_attn * batch as f64 * (seq as f64).powi(2);
        self.prefill_base + tokens * (self.prefill_token / t + self.prefill_comm * lg) + attn / t
    }

    fn decode(&self, tp: u32, batch: u32, seq: u32) -> f64 {
        let t = tp as f64;
        let lg = t.log2();
        let b = batch as f64;
        let weights = self.decode_weights / (t * (1.0 + self.decode_cache_gain * lg));
        let comm = lg * (self.decode_comm_fixed + self.decode_comm_per_seq * b);
        let per_seq = b * (self.decode_seq + self.decode_kv_token * seq as f64) / t;
        self.decode_base + weights + comm + per_seq
    }

    fn profile(&self) -> PerfProfile {
        let mut entries: Vec<ProfileEntry> = Vec::new();
        for &tp in &TP_LEVELS {
            for &b in &BATCHES {
                for &s in &SEQS {
                    entries.push((Stage::Prefill, tp, b, s, round3(self.prefill(tp, b, s))));
                    entries.push((Stage::Decode, tp, b, s, round3(self.decode(tp, b, s))));
                }
            }
        }
        let meta = ProfileMeta {
            gpu_type: self.gpu.trim_end_matches("-like").to_string(),
            model_name: "llama-8b-like".into(),
            tp_levels: TP_LEVELS.to_vec(),
            weight_full_copy_gb: 16.0,
            // K and V, 128-dim heads, fp16, 32 layers.
            kv_bytes_per_token_per_head: 2 * 128 * 2 * 32,
            total_kv_heads: 8,
            gpu_memory_gb: 80.0,
            migration: CostModelParams::default(),
        };
        PerfProfile::from_entries(meta, &entries).expect("bundled profile is valid")
    }
}

/// Microsecond resolution keeps the JSON export short.
fn round3(ms: f64) -> f64 {
    (ms * 1e3).round() / 1e3
}

pub fn a100_like() -> PerfProfile {
    A100.profile()
}

pub fn h100_like() -> PerfProfile {
    H100.profile()
}

pub fn builtin(name: &str) -> Result<PerfProfile, ProfileError> {
    match name {
        "a100-like" => Ok(a100_like()),
        "h100-like" => Ok(h100_like()),
        other => Err(ProfileError::UnknownBuiltin(other.to_string())),
    }
}
