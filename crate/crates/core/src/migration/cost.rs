//! Transfer cost models. Durations are computed in integer nanoseconds so the
//! pipelined closed form can be compared exactly against a schedule simulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GpuId, MigrationPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    /// Device-local aggregation bandwidth, GB/s (1 GB = 1e9 bytes).
    pub copy_bw_gbps: f64,
    /// Inter-GPU bandwidth, GB/s.
    pub link_bw_gbps: f64,
    /// Fixed cost per issued transfer, µs.
    pub per_transfer_overhead_us: f64,
    pub page_bytes: u64,
    pub chunk_bytes: u64,
    pub handshake_ms: f64,
    /// Weight reload cost for a stop-the-world reconfiguration.
    pub reload_ms: f64,
    /// Process and kernel warmup cost when weights stay resident.
    pub kernel_init_ms: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            copy_bw_gbps: 300.0,
            link_bw_gbps: 200.0,
            per_transfer_overhead_us: 100.0,
            page_bytes: 64 * 1024,
            chunk_bytes: 64 * 1024 * 1024,
            handshake_ms: 0.5,
            reload_ms: 30_000.0,
            kernel_init_ms: 10_000.0,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("copy_bw_gbps", self.copy_bw_gbps),
            ("link_bw_gbps", self.link_bw_gbps),
            ("per_transfer_overhead_us", self.per_transfer_overhead_us),
            ("page_bytes", self.page_bytes as f64),
            ("chunk_bytes", self.chunk_bytes as f64),
            ("handshake_ms", self.handshake_ms),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("reload_ms", self.reload_ms),
            ("kernel_init_ms", self.kernel_init_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn overhead_ns(&self) -> u64 {
        (self.per_transfer_overhead_us * 1e3).round() as u64
    }

    pub fn copy_ns(&self, bytes: u64) -> u64 {
        xfer_ns(bytes, self.copy_bw_gbps)
    }

    /// Wire time only, without the per-transfer overhead.
    pub fn link_ns(&self, bytes: u64) -> u64 {
        xfer_ns(bytes, self.link_bw_gbps)
    }

    /// One issued transfer: overhead plus wire time.
    pub fn send_ns(&self, bytes: u64) -> u64 {
        self.overhead_ns() + self.link_ns(bytes)
    }
}

/// 1 GB/s moves one byte per nanosecond.
fn xfer_ns(bytes: u64, gbps: f64) -> u64 {
    if bytes == 0 {
        0
    } else {
        (bytes as f64 / gbps).ceil() as u64
    }
}

fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Transfer sizes issued by one source GPU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceLoad {
    pub transfers: Vec<u64>,
}

impl SourceLoad {
    pub fn total(&self) -> u64 {
        self.transfers.iter().sum()
    }
}

fn by_source(plan: &MigrationPlan) -> BTreeMap<GpuId, SourceLoad> {
    let mut m: BTreeMap<GpuId, SourceLoad> = BTreeMap::new();
    for t in plan.transfers.iter().filter(|t| t.bytes > 0) {
        m.entry(t.src_gpu).or_default().transfers.push(t.bytes);
    }
    m
}

pub fn per_page_ns(plan: &MigrationPlan, p: &CostModelParams) -> u64 {
    let page = p.send_ns(p.page_bytes);
    by_source(plan)
        .values()
        .map(|s| {
            s.transfers
                .iter()
                .map(|&b| b.div_ceil(p.page_bytes) * page)
                .sum::<u64>()
        })
        .max()
        .unwrap_or(0)
}

pub fn aggregate_ns(plan: &MigrationPlan, p: &CostModelParams) -> u64 {
    by_source(plan)
        .values()
        .map(|s| {
            let b = s.total();
            p.copy_ns(b) + p.send_ns(b)
        })
        .max()
        .unwrap_or(0)
}

/// Two-buffer schedule over chunk sizes: the copy of chunk `i` overlaps the
/// send of chunk `i-1`.
pub fn pipelined_schedule_ns(chunks: &[u64], p: &CostModelParams) -> u64 {
    let Some((&first, _)) = chunks.split_first() else {
        return 0;
    };
    let mut total = p.copy_ns(first);
    for w in chunks.windows(2) {
        total += p.copy_ns(w[1]).max(p.send_ns(w[0]));
    }
    total + p.send_ns(*chunks.last().unwrap())
}

/// Full chunks followed by the remainder.
pub fn chunk_sizes(bytes: u64, chunk: u64) -> Vec<u64> {
    let n = bytes.div_ceil(chunk);
    (0..n).map(|i| chunk.min(bytes - i * chunk)).collect()
}

pub fn pipelined_ns(plan: &MigrationPlan, p: &CostModelParams) -> u64 {
    by_source(plan)
        .values()
        .map(|s| pipelined_schedule_ns(&chunk_sizes(s.total(), p.chunk_bytes), p))
        .max()
        .unwrap_or(0)
}

/// Every page issued as its own transfer, serialized per source.
pub fn latency_per_page(plan: &MigrationPlan, p: &CostModelParams) -> f64 {
    ns_to_ms(per_page_ns(plan, p))
}

/// Gather into one contiguous buffer per source, then one send.
pub fn latency_aggregate(plan: &MigrationPlan, p: &CostModelParams) -> f64 {
    ns_to_ms(aggregate_ns(plan, p))
}

pub fn latency_pipelined(plan: &MigrationPlan, p: &CostModelParams) -> f64 {
    ns_to_ms(pipelined_ns(plan, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    /// Pre-launched processes with resident weights; only KV moves.
    #[default]
    Warm,
    NaiveReload,
    NaiveKernelInit,
}

impl std::str::FromStr for SwitchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "warm" => Ok(Self::Warm),
            "naive_reload" => Ok(Self::NaiveReload),
            "naive_kernel_init" => Ok(Self::NaiveKernelInit),
            _ => Err(format!(
                "unknown switch mode {s:?} (warm, naive_reload, naive_kernel_init)"
            )),
        }
    }
}

impl std::fmt::Display for SwitchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Warm => "warm",
            Self::NaiveReload => "naive_reload",
            Self::NaiveKernelInit => "naive_kernel_init",
        })
    }
}

/// Pause, in ms, for a group switching under `mode`.
pub fn switch_cost(mode: SwitchMode, plan: &MigrationPlan, p: &CostModelParams) -> f64 {
    match mode {
        SwitchMode::Warm => p.handshake_ms + latency_pipelined(plan, p),
        SwitchMode::NaiveReload => p.reload_ms + latency_per_page(plan, p),
        SwitchMode::NaiveKernelInit => p.kernel_init_ms + latency_per_page(plan, p),
    }
}

#[cfg(test)]
mod tests {
    use super::super::Transfer;
    use super::*;
    use proptest::prelude::*;

    fn one(bytes: u64) -> MigrationPlan {
        plan_of(&[(0, bytes)])
    }

    fn plan_of(loads: &[(GpuId, u64)]) -> MigrationPlan {
        MigrationPlan {
            transfers: loads
                .iter()
                .enumerate()
                .map(|(i, &(src, bytes))| Transfer {
                    src_gpu: src,
                    dst_gpu: src + 100,
                    request_id: i as u64,
                    head_lo: 0,
                    head_hi: 1,
                    bytes,
                })
                .collect(),
            handshake_ms: 0.0,
            predicted: None,
        }
    }

    /// Event-list simulation of a copy engine and a link sharing two staging
    /// buffers. Copy `i` needs the engine free and buffer `i % 2` drained by
    /// send `i - 2`; send `i` needs copy `i` done and the link free.
    fn simulate_two_buffer(chunks: &[u64], p: &CostModelParams) -> u64 {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
        enum Ev {
            CopyDone(usize),
            SendDone(usize),
        }
        let n = chunks.len();
        let mut events: std::collections::BinaryHeap<std::cmp::Reverse<(u64, Ev)>> =
            Default::default();
        let mut copy_done = vec![None; n];
        let mut send_done: Vec<Option<u64>> = vec![None; n];
        let (mut next_copy, mut next_send) = (0usize, 0usize);
        let (mut copy_busy, mut link_busy) = (false, false);
        let mut now = 0u64;
        let mut end = 0u64;
        loop {
            if !copy_busy && next_copy < n && (next_copy < 2 || send_done[next_copy - 2].is_some())
            {
                copy_busy = true;
                events.push(std::cmp::Reverse((
                    now + p.copy_ns(chunks[next_copy]),
                    Ev::CopyDone(next_copy),
                )));
                next_copy += 1;
            }
            if !link_busy && next_send < n && copy_done[next_send].is_some() {
                link_busy = true;
                events.push(std::cmp::Reverse((
                    now + p.send_ns(chunks[next_send]),
                    Ev::SendDone(next_send),
                )));
                next_send += 1;
            }
            let Some(std::cmp::Reverse((t, ev))) = events.pop() else {
                break;
            };
            now = t;
            match ev {
                Ev::CopyDone(i) => {
                    copy_done[i] = Some(t);
                    copy_busy = false;
                }
                Ev::SendDone(i) => {
                    send_done[i] = Some(t);
                    link_busy = false;
                    end = t;
                }
            }
        }
        assert!(send_done.iter().all(Option::is_some));
        end
    }

    #[test]
    fn single_page_cost() {
        let p = CostModelParams::default();
        let expect =
            p.per_transfer_overhead_us / 1e3 + p.page_bytes as f64 / (p.link_bw_gbps * 1e6);
        assert!((latency_per_page(&one(p.page_bytes), &p) - expect).abs() < 1e-6);
    }

    #[test]
    fn doubling_pages_doubles_per_page() {
        let p = CostModelParams::default();
        let a = latency_per_page(&one(10 * p.page_bytes), &p);
        let b = latency_per_page(&one(20 * p.page_bytes), &p);
        assert!((b - 2.0 * a).abs() < 1e-9);
    }

    #[test]
    fn per_page_half_gigabyte_on_slow_link() {
        let p = CostModelParams {
            link_bw_gbps: 20.0,
            ..Default::default()
        };
        let l = latency_per_page(&one(1 << 29), &p);
        assert!((790.0..=880.0).contains(&l), "{l}");
    }

    #[test]
    fn aggregate_closed_form() {
        let p = CostModelParams {
            copy_bw_gbps: 900.0,
            link_bw_gbps: 20.0,
            ..Default::default()
        };
        assert_eq!(latency_aggregate(&MigrationPlan::default(), &p), 0.0);
        let l = latency_aggregate(&one(1_000_000_000), &p);
        assert!((l - 51.2).abs() < 0.05, "{l}");
    }

    #[test]
    fn pipelined_four_chunks() {
        // t_copy = 2 ms, t_send = 3 ms per chunk.
        let p = CostModelParams {
            copy_bw_gbps: 0.5,
            link_bw_gbps: 0.5,
            per_transfer_overhead_us: 1000.0,
            chunk_bytes: 1_000_000,
            ..Default::default()
        };
        assert_eq!(p.copy_ns(1_000_000), 2_000_000);
        assert_eq!(p.send_ns(1_000_000), 3_000_000);
        assert_eq!(latency_pipelined(&one(4_000_000), &p), 14.0);
        assert_eq!(simulate_two_buffer(&[1_000_000; 4], &p), 14_000_000);
        assert_eq!(latency_pipelined(&one(1_000_000), &p), 5.0);
    }

    #[test]
    fn sources_run_in_parallel() {
        let p = CostModelParams::default();
        let a = latency_aggregate(&plan_of(&[(0, 1 << 30)]), &p);
        let ab = latency_aggregate(&plan_of(&[(0, 1 << 30), (1, 1 << 20)]), &p);
        assert_eq!(a, ab);
        let serial = latency_aggregate(&plan_of(&[(0, 1 << 30), (0, 1 << 20)]), &p);
        assert!(serial > a);
    }

    #[test]
    fn switch_modes() {
        let p = CostModelParams::default();
        let empty = MigrationPlan::default();
        assert_eq!(switch_cost(SwitchMode::Warm, &empty, &p), p.handshake_ms);
        assert!(switch_cost(SwitchMode::NaiveReload, &empty, &p) >= 30_000.0);
        let plan = one(1 << 30);
        let warm = switch_cost(SwitchMode::Warm, &plan, &p);
        let init = switch_cost(SwitchMode::NaiveKernelInit, &plan, &p);
        let reload = switch_cost(SwitchMode::NaiveReload, &plan, &p);
        assert!(warm < init && init < reload);
        assert_eq!(
            "naive-reload".parse::<SwitchMode>().unwrap(),
            SwitchMode::NaiveReload
        );
    }

    #[test]
    fn calibrated_band() {
        let p = CostModelParams::default();
        for gb in [0.5, 1.0, 2.0, 5.0] {
            let plan = one((gb * 1e9) as u64);
            let pp = latency_per_page(&plan, &p);
            let pl = latency_pipelined(&plan, &p);
            assert!((400.0..=12_000.0).contains(&pp), "{gb} GB per-page {pp}");
            assert!((1.8..=50.0).contains(&pl), "{gb} GB pipelined {pl}");
            assert!(pp / pl >= 100.0);
        }
    }

    /// Outside the overhead/chunk regime the ordering can invert: with a
    /// large per-transfer overhead, many small chunks cost more than one
    /// aggregate send.
    #[test]
    fn ordering_needs_regime() {
        let p = CostModelParams {
            per_transfer_overhead_us: 10_000.0,
            chunk_bytes: 1 << 20,
            page_bytes: 1 << 20,
            ..Default::default()
        };
        let plan = one(64 << 20);
        assert!(latency_pipelined(&plan, &p) > latency_aggregate(&plan, &p));
    }

    fn params_in_regime() -> impl Strategy<Value = (CostModelParams, Vec<(GpuId, u64)>)> {
        (
            1u32..=16,   // page KiB multiplier
            4u32..=64,   // chunk / page
            1.0f64..4.0, // copy / link
            1.0f64..400.0,
            0.0f64..1.0,
        )
            .prop_flat_map(|(page_k, cpp, ratio, link, ov_frac)| {
                let page = page_k as u64 * 4096;
                let chunk = page * cpp as u64;
                let copy = link * ratio;
                // Overhead between 2*page/copy and chunk/(2*copy), in ns.
                let lo = 2.0 * page as f64 / copy;
                let hi = chunk as f64 / (2.0 * copy);
                let ov_ns = lo + (hi - lo).max(0.0) * ov_frac;
                let p = CostModelParams {
                    copy_bw_gbps: copy,
                    link_bw_gbps: link,
                    per_transfer_overhead_us: (ov_ns / 1e3 * 1e3).ceil() / 1e3,
                    page_bytes: page,
                    chunk_bytes: chunk,
                    ..Default::default()
                };
                let loads = prop::collection::vec((0u32..4, (3 * chunk)..(40 * chunk)), 1..6);
                (Just(p), loads)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn pipelined_matches_schedule_simulation(
            chunks in prop::collection::vec(1u64..50_000_000, 1..40),
            copy in 0.5f64..500.0,
            link in 0.5f64..500.0,
            ov in 0.0f64..2000.0,
        ) {
            let p = CostModelParams {
                copy_bw_gbps: copy,
                link_bw_gbps: link,
                per_transfer_overhead_us: ov,
                ..Default::default()
            };
            prop_assert_eq!(pipelined_schedule_ns(&chunks, &p), simulate_two_buffer(&chunks, &p));
        }

        #[test]
        fn cost_ordering_in_regime((p, loads) in params_in_regime()) {
            let plan = plan_of(&loads);
            let (pl, ag, pp) = (pipelined_ns(&plan, &p), aggregate_ns(&plan, &p), per_page_ns(&plan, &p));
            prop_assert!(pl <= ag, "pipelined {} > aggregate {}", pl, ag);
            prop_assert!(ag <= pp, "aggregate {} > per-page {}", ag, pp);
            prop_assert!(switch_cost(SwitchMode::Warm, &plan, &p) >= latency_pipelined(&plan, &p));
        }
    }
}
