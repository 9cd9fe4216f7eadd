//! KV-cache repartitioning across TP transitions and its transfer cost.
//!
//! Within a TP group of size `N` over `H` KV heads, rank `r` holds heads
//! `[r*H/N, (r+1)*H/N)` of every request. Changing the group shape moves head
//! ranges between GPUs; [`plan_repartition`] computes the moves and the cost
//! functions in [`cost`] price them under three transfer strategies.

pub mod cost;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::PerfProfile;
use crate::trace::RequestId;

pub use cost::{
    latency_aggregate, latency_per_page, latency_pipelined, pipelined_schedule_ns, switch_cost,
    CostModelParams, SourceLoad, SwitchMode,
};

pub type GpuId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum MigrationError {
    #[error("{heads} KV heads are not divisible by tp {tp}")]
    Divisibility { heads: u32, tp: u32 },
    #[error("old groups cover GPUs {old:?} but the new group covers {new:?}")]
    GpuMismatch { old: Vec<GpuId>, new: Vec<GpuId> },
    #[error("head count mismatch: {0} vs {1}")]
    HeadMismatch(u32, u32),
    #[error("GPU {0} appears more than once")]
    DuplicateGpu(GpuId),
    #[error("empty group")]
    EmptyGroup,
    #[error("invalid cost parameters: {0}")]
    InvalidParams(String),
}

/// KV placement of one TP group: GPUs in rank order plus the requests whose
/// KV it holds, as `(request, context tokens)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvLayout {
    pub gpus: Vec<GpuId>,
    pub total_heads: u32,
    #[serde(default)]
    pub requests: Vec<(RequestId, u64)>,
}

impl KvLayout {
    pub fn new(gpus: Vec<GpuId>, total_heads: u32) -> Self {
        Self {
            gpus,
            total_heads,
            requests: Vec::new(),
        }
    }

    pub fn with_requests(mut self, requests: Vec<(RequestId, u64)>) -> Self {
        self.requests = requests;
        self
    }

    pub fn tp(&self) -> u32 {
        self.gpus.len() as u32
    }

    fn validate(&self) -> Result<(), MigrationError> {
        if self.gpus.is_empty() {
            return Err(MigrationError::EmptyGroup);
        }
        if !self.total_heads.is_multiple_of(self.tp()) {
            return Err(MigrationError::Divisibility {
                heads: self.total_heads,
                tp: self.tp(),
            });
        }
        let mut seen = BTreeSet::new();
        for &g in &self.gpus {
            if !seen.insert(g) {
                return Err(MigrationError::DuplicateGpu(g));
            }
        }
        Ok(())
    }

    /// GPU holding `head` under this layout.
    pub fn owner(&self, head: u32) -> GpuId {
        let per = self.total_heads / self.tp();
        self.gpus[(head / per) as usize]
    }
}

/// One contiguous head range of one request moving between two GPUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub src_gpu: GpuId,
    pub dst_gpu: GpuId,
    pub request_id: RequestId,
    pub head_lo: u32,
    /// Exclusive.
    pub head_hi: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedLatency {
    pub per_page_ms: f64,
    pub aggregate_ms: f64,
    pub pipelined_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub transfers: Vec<Transfer>,
    pub handshake_ms: f64,
    #[serde(default)]
    pub predicted: Option<PredictedLatency>,
}

impl MigrationPlan {
    pub fn total_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    /// Fills `predicted` and `handshake_ms` from `params`.
    pub fn with_prediction(mut self, params: &CostModelParams) -> Self {
        self.handshake_ms = params.handshake_ms;
        self.predicted = Some(PredictedLatency {
            per_page_ms: latency_per_page(&self, params),
            aggregate_ms: latency_aggregate(&self, params),
            pipelined_ms: latency_pipelined(&self, params),
        });
        self
    }
}

/// Plans the move from `old` groups into the `new` group, which must cover
/// exactly the same GPUs and head count.
pub fn plan_repartition(
    old: &[KvLayout],
    new: &KvLayout,
    kv_bytes_per_token_per_head: u64,
) -> Result<MigrationPlan, MigrationError> {
    new.validate()?;
    let mut old_gpus = BTreeSet::new();
    for l in old {
        l.validate()?;
        if l.total_heads != new.total_heads {
            return Err(MigrationError::HeadMismatch(l.total_heads, new.total_heads));
        }
        for &g in &l.gpus {
            if !old_gpus.insert(g) {
                return Err(MigrationError::DuplicateGpu(g));
            }
        }
    }
    let new_gpus: BTreeSet<GpuId> = new.gpus.iter().copied().collect();
    if old_gpus != new_gpus {
        return Err(MigrationError::GpuMismatch {
            old: old_gpus.into_iter().collect(),
            new: new_gpus.into_iter().collect(),
        });
    }
    plan_relayout(old, new, kv_bytes_per_token_per_head)
}

/// Head-level moves from `old` layouts into `new` without requiring the GPU
/// sets to match. The engine uses this when a reconfiguration reshapes groups
/// arbitrarily.
pub fn plan_relayout(
    old: &[KvLayout],
    new: &KvLayout,
    kv_bytes_per_token_per_head: u64,
) -> Result<MigrationPlan, MigrationError> {
    new.validate()?;
    let mut transfers = Vec::new();
    for l in old {
        l.validate()?;
        if l.total_heads != new.total_heads {
            return Err(MigrationError::HeadMismatch(l.total_heads, new.total_heads));
        }
        for &(req, ctx) in &l.requests {
            let start = transfers.len();
            let mut run: Option<Transfer> = None;
            for h in 0..new.total_heads {
                let (src, dst) = (l.owner(h), new.owner(h));
                match run.as_mut() {
                    Some(t) if t.src_gpu == src && t.dst_gpu == dst => t.head_hi = h + 1,
                    _ => {
                        transfers.extend(run.take());
                        run = Some(Transfer {
                            src_gpu: src,
                            dst_gpu: dst,
                            request_id: req,
                            head_lo: h,
                            head_hi: h + 1,
                            bytes: 0,
                        });
                    }
                }
            }
            transfers.extend(run);
            for t in &mut transfers[start..] {
                t.bytes = (t.head_hi - t.head_lo) as u64 * ctx * kv_bytes_per_token_per_head;
            }
        }
    }
    transfers.retain(|t| t.src_gpu != t.dst_gpu);
    Ok(MigrationPlan {
        transfers,
        handshake_ms: 0.0,
        predicted: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "tp")]
pub enum WeightMode {
    /// One full weight copy per GPU; shards selected at execution time.
    FullCopyPerGpu,
    /// A separately sharded copy for every supported TP level.
    PerTpCopies,
    /// Conventional static sharding at one TP level.
    Sharded(u32),
}

/// Weight memory per GPU in GB.
pub fn weight_memory(mode: WeightMode, profile: &PerfProfile) -> f64 {
    let full = profile.meta.weight_full_copy_gb;
    match mode {
        WeightMode::FullCopyPerGpu => full,
        WeightMode::PerTpCopies => profile.tp_levels().iter().map(|&tp| full / tp as f64).sum(),
        WeightMode::Sharded(tp) => full / tp.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KVB: u64 = 16384;

    fn fig5_tp1_to_tp2() -> (Vec<KvLayout>, KvLayout) {
        let old = vec![
            KvLayout::new(vec![1], 8).with_requests(vec![(10, 100)]),
            KvLayout::new(vec![2], 8).with_requests(vec![(20, 200)]),
        ];
        (old, KvLayout::new(vec![1, 2], 8))
    }

    #[test]
    fn tp1_pair_merges_into_tp2() {
        let (old, new) = fig5_tp1_to_tp2();
        let plan = plan_repartition(&old, &new, KVB).unwrap();
        assert_eq!(
            plan.transfers,
            vec![
                Transfer {
                    src_gpu: 1,
                    dst_gpu: 2,
                    request_id: 10,
                    head_lo: 4,
                    head_hi: 8,
                    bytes: 4 * 100 * KVB
                },
                Transfer {
                    src_gpu: 2,
                    dst_gpu: 1,
                    request_id: 20,
                    head_lo: 0,
                    head_hi: 4,
                    bytes: 4 * 200 * KVB
                },
            ]
        );
    }

    #[test]
    fn tp2_pair_merges_into_tp4() {
        let old = vec![
            KvLayout::new(vec![1, 2], 8).with_requests(vec![(10, 64)]),
            KvLayout::new(vec![3, 4], 8).with_requests(vec![(30, 32)]),
        ];
        let new = KvLayout::new(vec![1, 2, 3, 4], 8);
        let plan = plan_repartition(&old, &new, KVB).unwrap();
        let has = |src, dst, req, lo, hi| {
            plan.transfers.iter().any(|t| {
                (t.src_gpu, t.dst_gpu, t.request_id, t.head_lo, t.head_hi)
                    == (src, dst, req, lo, hi)
            })
        };
        // Heads 0-1 of group (3,4)'s requests gather from GPU-3 to GPU-1.
        assert!(has(3, 1, 30, 0, 2));
        // Heads 2-3 reach GPU-2 from GPU-1 and from GPU-3.
        assert!(has(1, 2, 10, 2, 4));
        assert!(has(3, 2, 30, 2, 4));
        assert!(plan.transfers.iter().all(|t| t.src_gpu != t.dst_gpu));
    }

    #[test]
    fn same_layout_is_empty_plan() {
        let old = vec![KvLayout::new(vec![5, 6], 8).with_requests(vec![(1, 10), (2, 20)])];
        let plan = plan_repartition(&old, &KvLayout::new(vec![5, 6], 8), KVB).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let old = vec![KvLayout::new(vec![0, 1, 2], 8)];
        assert_eq!(
            plan_repartition(&old, &KvLayout::new(vec![0, 1, 2], 8), KVB),
            Err(MigrationError::Divisibility { heads: 8, tp: 3 })
        );
        let old = vec![KvLayout::new(vec![0], 8)];
        assert!(matches!(
            plan_repartition(&old, &KvLayout::new(vec![0, 1], 8), KVB),
            Err(MigrationError::GpuMismatch { .. })
        ));
        let old = vec![KvLayout::new(vec![0], 4), KvLayout::new(vec![1], 4)];
        assert!(matches!(
            plan_repartition(&old, &KvLayout::new(vec![0, 1], 8), KVB),
            Err(MigrationError::HeadMismatch(4, 8))
        ));
    }

    #[test]
    fn weight_memory_modes() {
        let mut p = crate::profile::a100_like();
        p.meta.weight_full_copy_gb = 26.0;
        assert_eq!(weight_memory(WeightMode::FullCopyPerGpu, &p), 26.0);
        assert_eq!(weight_memory(WeightMode::Sharded(1), &p), 26.0);
        assert_eq!(weight_memory(WeightMode::Sharded(4), &p), 6.5);
        let all = weight_memory(WeightMode::PerTpCopies, &p);
        assert!((all - 48.75).abs() < 1e-12);
        // Within 10% of the 45.5 GB reported for storing every TP-specific copy.
        assert!((all - 45.5).abs() / 45.5 <= 0.10);
    }
}
