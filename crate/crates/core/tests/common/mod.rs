//! Reference model of KV head placement for checking migration plans.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tpsim::migration::{GpuId, KvLayout, MigrationPlan};
use tpsim::trace::RequestId;

/// GPU holding each (request, head).
pub type HeadMap = BTreeMap<(RequestId, u32), GpuId>;

/// Canonical placement: rank `floor(h * N / H)` holds head `h`.
pub fn placement(layouts: &[KvLayout]) -> HeadMap {
    let mut m = HeadMap::new();
    for l in layouts {
        let n = l.gpus.len() as u32;
        for &(req, _) in &l.requests {
            for h in 0..l.total_heads {
                let rank = (h * n / l.total_heads) as usize;
                assert!(
                    m.insert((req, h), l.gpus[rank]).is_none(),
                    "request {req} placed twice"
                );
            }
        }
    }
    m
}

/// Moves heads as `plan` says, checking every transfer against the current
/// holder and the byte formula.
pub fn apply(
    map: &mut HeadMap,
    plan: &MigrationPlan,
    ctx: &BTreeMap<RequestId, u64>,
    kvb: u64,
) -> Result<(), String> {
    for t in &plan.transfers {
        if t.src_gpu == t.dst_gpu {
            return Err(format!("self transfer {t:?}"));
        }
        if t.head_lo >= t.head_hi {
            return Err(format!("empty head range {t:?}"));
        }
        let want = (t.head_hi - t.head_lo) as u64 * ctx[&t.request_id] * kvb;
        if t.bytes != want {
            return Err(format!("{t:?}: bytes {} != {want}", t.bytes));
        }
        for h in t.head_lo..t.head_hi {
            let at = map
                .get_mut(&(t.request_id, h))
                .ok_or_else(|| format!("unknown head {h} of {}", t.request_id))?;
            if *at != t.src_gpu {
                return Err(format!("{t:?}: head {h} is on GPU {at}"));
            }
            *at = t.dst_gpu;
        }
    }
    Ok(())
}

pub fn contexts(layouts: &[KvLayout]) -> BTreeMap<RequestId, u64> {
    layouts
        .iter()
        .flat_map(|l| l.requests.iter().copied())
        .collect()
}
