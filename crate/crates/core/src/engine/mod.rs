//! Deterministic discrete-event simulation of a GPU pool.
//!
//! Requests arrive from a trace, are dispatched to prefill groups, hand their
//! KV to a decode group of their tier and complete there. At every control
//! window boundary the policy plans a new configuration; groups that change
//! are torn down, their KV moves to the new groups and the new groups pause
//! for the switch cost.

mod group;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use group::{Dispatcher, Group, Label, Placement, TokenBucket};

use crate::migration::cost::{chunk_sizes, latency_per_page};
use crate::migration::{
    pipelined_schedule_ns, plan_relayout, switch_cost, CostModelParams, KvLayout, SwitchMode,
};
use crate::policy::{
    ClusterConfig, ConfigError, GroupSpec, PlanContext, Policy, StageKind, TierDemand,
};
use crate::profile::{EnvelopeTable, PerfProfile, ProfileError, Stage};
use crate::trace::{
    mean_lengths, observe_demand, prompt_quantile, Request, RequestId, SloTier, TierId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub pool_size: u32,
    /// Control window, seconds.
    pub window_s: f64,
    pub switch_mode: SwitchMode,
    /// Multiplier on SLO targets when deriving envelopes.
    pub headroom: f64,
    /// Track KV memory per group and limit decode admission by it.
    pub kv_capacity: bool,
    /// Delay between a window boundary and applying its plan, seconds.
    pub planning_delay_s: f64,
    /// Simulated time allowed after the last arrival, seconds.
    pub drain_s: f64,
    /// Prompt length used for envelopes, as a quantile of each tier's
    /// prompts. Prefill batches run at their longest prompt, so the mean
    /// overstates capacity. `None` uses the mean.
    pub prompt_quantile: Option<f64>,
    /// Overrides the profile's migration parameters.
    pub cost: Option<CostModelParams>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            pool_size: 8,
            window_s: 1.0,
            switch_mode: SwitchMode::Warm,
            headroom: 1.0,
            kv_capacity: false,
            planning_delay_s: 0.0,
            drain_s: 60.0,
            prompt_quantile: None,
            cost: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return bad("window_s must be positive");
        }
        if !(self.headroom.is_finite() && self.headroom > 0.0) {
            return bad("headroom must be positive");
        }
        if !(self.planning_delay_s.is_finite() && self.planning_delay_s >= 0.0) {
            return bad("planning_delay_s must be non-negative");
        }
        if !(self.drain_s.is_finite() && self.drain_s >= 0.0) {
            return bad("drain_s must be non-negative");
        }
        if self
            .prompt_quantile
            .is_some_and(|q| !(0.0..=1.0).contains(&q))
        {
            return bad("prompt_quantile must lie in [0, 1]");
        }
        if let Some(c) = &self.cost {
            c.validate().map_err(EngineError::InvalidConfig)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("policy produced an invalid config: {0}")]
    Plan(#[from] ConfigError),
    #[error("policy used tp {0}, which the profile does not cover")]
    UnprofiledTp(u32),
    #[error("request {0} references unknown tier {1}")]
    UnknownTier(RequestId, TierId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_id: RequestId,
    pub tier_id: TierId,
    pub arrival: f64,
    pub first_token_time: f64,
    pub completion_time: f64,
    pub ttft: f64,
    pub tpot: f64,
    pub output_len: u32,
    pub label: Label,
    pub background: bool,
    pub slo_met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLog {
    pub index: u64,
    pub start_s: f64,
    pub demands: Vec<TierDemand>,
    pub config: ClusterConfig,
    /// Groups created by this window's reconfiguration.
    pub changed_groups: u32,
    pub pause_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub arrived: u64,
    pub completed: u64,
    /// Dispatched but not completed when the run stopped.
    pub in_flight: u64,
    /// Waiting for a group to exist when the run stopped.
    pub parked: u64,
    /// Groups paused for a switch.
    pub migrations: u64,
    pub pause_total_ms: f64,
    pub preemptions: u64,
    pub end_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub policy: String,
    pub records: Vec<CompletionRecord>,
    pub windows: Vec<WindowLog>,
    pub stats: EngineStats,
}

impl SimOutput {
    /// Every arrived request is completed, in flight or parked.
    pub fn conserved(&self) -> bool {
        let s = &self.stats;
        s.arrived == s.completed + s.in_flight + s.parked
            && s.completed == self.records.len() as u64
    }
}

#[derive(Debug)]
enum Ev {
    IterationDone(u64),
    MigrationDone(u64),
    DecodeReady {
        uid: u64,
        rid: usize,
    },
    Tick,
    Apply {
        config: Box<ClusterConfig>,
        log: usize,
    },
    Arrival(usize),
}

impl Ev {
    fn priority(&self) -> u8 {
        match self {
            Ev::IterationDone(_) | Ev::MigrationDone(_) | Ev::DecodeReady { .. } => 0,
            Ev::Tick | Ev::Apply { .. } => 1,
            Ev::Arrival(_) => 2,
        }
    }
}

struct Entry {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl Entry {
    fn key(&self) -> (f64, u8, u64) {
        (self.t, self.ev.priority(), self.seq)
    }
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    /// Reversed so the max-heap pops the earliest event.
    fn cmp(&self, o: &Self) -> Ordering {
        let (a, b) = (self.key(), o.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

struct Req {
    id: RequestId,
    tier: TierId,
    background: bool,
    arrival: f64,
    prompt: u32,
    output: u32,
    label: Label,
    first_token: Option<f64>,
    generated: u32,
}

impl Req {
    /// Tokens of KV currently held.
    fn context(&self) -> u64 {
        self.prompt as u64 + u64::from(self.first_token.is_some()) + self.generated as u64
    }
}

struct Sim<'a> {
    cfg: &'a EngineConfig,
    profile: &'a PerfProfile,
    tiers: &'a [SloTier],
    trace: &'a [Request],
    env: EnvelopeTable,
    cost: CostModelParams,
    reqs: Vec<Req>,
    groups: Vec<Group>,
    by_uid: BTreeMap<u64, usize>,
    next_uid: u64,
    config: ClusterConfig,
    dispatcher: Dispatcher,
    pending: VecDeque<usize>,
    pending_decode: VecDeque<usize>,
    heap: BinaryHeap<Entry>,
    seq: u64,
    now: f64,
    records: Vec<CompletionRecord>,
    windows: Vec<WindowLog>,
    stats: EngineStats,
    served: BTreeMap<TierId, u64>,
    outstanding: usize,
    mean_demands: Vec<TierDemand>,
}

/// Runs `trace` (sorted by arrival) under `policy`.
pub fn run(
    trace: &[Request],
    tiers: &[SloTier],
    profile: &PerfProfile,
    cfg: &EngineConfig,
    policy: &mut dyn Policy,
) -> Result<SimOutput, EngineError> {
    cfg.validate()?;
    let mut sorted = trace.to_vec();
    sorted.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.id.cmp(&b.id))
    });
    let tier_of = |id: TierId| tiers.iter().find(|t| t.id == id);
    let mut reqs = Vec::with_capacity(sorted.len());
    for r in &sorted {
        let t = tier_of(r.tier_id).ok_or(EngineError::UnknownTier(r.id, r.tier_id))?;
        reqs.push(Req {
            id: r.id,
            tier: r.tier_id,
            background: t.background,
            arrival: r.arrival_time,
            prompt: r.prompt_len,
            output: r.output_len,
            label: if t.background {
                Label::Background
            } else {
                Label::Feasible
            },
            first_token: None,
            generated: 0,
        });
    }
    let env = EnvelopeTable::build(
        profile,
        tiers,
        |t| {
            let (p, o) = mean_lengths(&sorted, t).unwrap_or((1.0, 1.0));
            let p = cfg
                .prompt_quantile
                .and_then(|q| prompt_quantile(&sorted, t, q))
                .unwrap_or(p);
            (p, o)
        },
        cfg.headroom,
    )?;
    let last = sorted.last().map_or(0.0, |r| r.arrival_time);
    let span = last.max(cfg.window_s);
    let mean_demands = tiers
        .iter()
        .map(|t| {
            let n = sorted.iter().filter(|r| r.tier_id == t.id).count() as f64 / span;
            TierDemand::new(t.id, n, n)
        })
        .collect();

    let mut sim = Sim {
        cfg,
        profile,
        tiers,
        trace: &sorted,
        env,
        cost: cfg
            .cost
            .clone()
            .unwrap_or_else(|| profile.meta.migration.clone()),
        reqs,
        groups: Vec::new(),
        by_uid: BTreeMap::new(),
        next_uid: 0,
        config: ClusterConfig::default(),
        dispatcher: Dispatcher::new(policy.isolate_tiers()),
        pending: VecDeque::new(),
        pending_decode: VecDeque::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        records: Vec::new(),
        windows: Vec::new(),
        stats: EngineStats::default(),
        served: BTreeMap::new(),
        outstanding: 0,
        mean_demands,
    };
    sim.start(policy)?;
    sim.event_loop(policy, last + cfg.drain_s)?;
    let stats = sim.finish();
    Ok(SimOutput {
        policy: policy.name(),
        records: sim.records,
        windows: sim.windows,
        stats,
    })
}

impl<'a> Sim<'a> {
    fn push(&mut self, t: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Entry {
            t,
            seq: self.seq,
            ev,
        });
    }

    fn tier(&self, id: TierId) -> &SloTier {
        self.tiers
            .iter()
            .find(|t| t.id == id)
            .expect("tier validated at start")
    }

    fn start(&mut self, policy: &mut dyn Policy) -> Result<(), EngineError> {
        let w = self.cfg.window_s;
        let mut first = observe_demand(self.trace, self.tiers, 0.0, w);
        // No history yet: treat the first window as fully served.
        for d in &mut first {
            d.served_rps = d.rps_observed;
        }
        let mean = self.mean_demands.clone();
        let ctx = PlanContext {
            window_index: 0,
            pool_size: self.cfg.pool_size,
            tiers: self.tiers,
            envelopes: &self.env,
            demands: &first,
            lookahead: &first,
            mean_demands: &mean,
            previous: None,
        };
        let cfg = policy.plan(&ctx);
        self.check(&cfg)?;
        self.windows.push(WindowLog {
            index: 0,
            start_s: 0.0,
            demands: first,
            config: cfg.clone(),
            changed_groups: 0,
            pause_ms: 0.0,
        });
        for spec in &cfg.groups {
            let g = self.new_group(spec.clone());
            self.groups.push(g);
        }
        self.config = cfg;
        self.reindex();
        if !self.trace.is_empty() {
            self.push(self.trace[0].arrival_time, Ev::Arrival(0));
        }
        self.push(w, Ev::Tick);
        Ok(())
    }

    fn check(&self, cfg: &ClusterConfig) -> Result<(), EngineError> {
        cfg.validate()?;
        if cfg.pool_size != self.cfg.pool_size {
            return Err(EngineError::InvalidConfig(format!(
                "policy planned for {} GPUs, pool has {}",
                cfg.pool_size, self.cfg.pool_size
            )));
        }
        for g in &cfg.groups {
            if !self.profile.tp_levels().contains(&g.tp) {
                return Err(EngineError::UnprofiledTp(g.tp));
            }
        }
        Ok(())
    }

    fn event_loop(&mut self, policy: &mut dyn Policy, horizon: f64) -> Result<(), EngineError> {
        while let Some(e) = self.heap.pop() {
            if self.outstanding == 0 && self.stats.arrived as usize == self.trace.len() {
                break;
            }
            if e.t > horizon {
                break;
            }
            debug_assert!(e.t >= self.now, "clock went backwards");
            self.now = e.t;
            match e.ev {
                Ev::Arrival(i) => self.on_arrival(i),
                Ev::IterationDone(uid) => self.on_iteration(uid),
                Ev::MigrationDone(uid) => {
                    if let Some(&gi) = self.by_uid.get(&uid) {
                        self.try_start(gi);
                    }
                }
                Ev::DecodeReady { uid, rid } => self.on_decode_ready(uid, rid),
                Ev::Tick => self.on_tick(policy, horizon)?,
                Ev::Apply { config, log } => self.apply(*config, log),
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> EngineStats {
        let mut s = self.stats.clone();
        s.parked = (self.pending.len() + self.pending_decode.len()) as u64;
        s.in_flight = s.arrived - s.completed - s.parked;
        s.end_time_s = self.now;
        s
    }

    fn new_group(&mut self, spec: GroupSpec) -> Group {
        let uid = self.next_uid;
        self.next_uid += 1;
        let (pcap, dcap, rate) = match (spec.stage, spec.tier_id) {
            (StageKind::Background, _) | (_, None) => (
                self.profile.max_batch(Stage::Prefill, spec.tp).unwrap_or(1),
                self.profile.max_batch(Stage::Decode, spec.tp).unwrap_or(1),
                0.0,
            ),
            (stage, Some(t)) => {
                let e = self.env.get(t, spec.tp).copied();
                let pcap = e.map_or(1, |e| e.prefill_batch_cap);
                let dcap = e.map_or(1, |e| e.decode_batch_cap);
                let rate = if stage == StageKind::Prefill {
                    e.map_or(0.0, |e| e.thp)
                } else {
                    0.0
                };
                (pcap, dcap, rate)
            }
        };
        let mut g = Group::new(uid, spec, pcap, dcap, rate, self.cfg.window_s, self.now);
        if self.cfg.kv_capacity && g.stage() != StageKind::Prefill {
            let m = &self.profile.meta;
            let per_gpu = (m.gpu_memory_gb - m.weight_full_copy_gb).max(0.0) * 1e9;
            g.kv_capacity = Some((per_gpu * g.spec.tp as f64) as u64);
        }
        g
    }

    fn reindex(&mut self) {
        self.by_uid = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.uid, i))
            .collect();
    }

    fn kv_need(&self, rid: usize) -> u64 {
        let r = &self.reqs[rid];
        self.profile.kv_bytes(r.prompt as u64 + r.output as u64)
    }

    fn on_arrival(&mut self, i: usize) {
        self.stats.arrived += 1;
        self.outstanding += 1;
        if i + 1 < self.trace.len() {
            self.push(self.trace[i + 1].arrival_time, Ev::Arrival(i + 1));
        }
        self.route(i);
    }

    /// Global scheduling of a request that still needs prefill.
    fn route(&mut self, rid: usize) {
        let tier = (!self.reqs[rid].background).then_some(self.reqs[rid].tier);
        let placement = match tier {
            // Rerouted after a teardown: a request that was spilled, or can
            // no longer meet its TTFT, gets no admission token.
            Some(t) if self.reqs[rid].label == Label::BestEffort || self.late(rid) => {
                self.dispatcher.spill(&self.groups, t)
            }
            _ => self.dispatcher.dispatch(&mut self.groups, tier, self.now),
        };
        let (gi, label) = match placement {
            Placement::Feasible(g) => (g, Label::Feasible),
            Placement::BestEffort(g) => (g, Label::BestEffort),
            Placement::Background(g) => (g, Label::Background),
            Placement::Park => {
                self.pending.push_back(rid);
                return;
            }
        };
        self.reqs[rid].label = label;
        self.groups[gi].enqueue(label, rid);
        self.try_start(gi);
    }

    fn late(&self, rid: usize) -> bool {
        let r = &self.reqs[rid];
        (self.now - r.arrival) * 1e3 > self.tier(r.tier).ttft_target_ms
    }

    fn try_start(&mut self, gi: usize) {
        let now = self.now;
        let g = &self.groups[gi];
        if g.busy || now < g.paused_until {
            return;
        }
        match g.stage() {
            StageKind::Prefill => self.start_prefill(gi, g.prefill_cap),
            StageKind::Decode => {
                let (profile, reqs) = (self.profile, &self.reqs);
                let need =
                    |r: usize| profile.kv_bytes(reqs[r].prompt as u64 + reqs[r].output as u64);
                self.groups[gi].admit_decode(need);
                self.start_decode(gi);
            }
            StageKind::Background => {
                // Requests that arrive with KV (handoffs, moves) only need a slot.
                let free = (g.decode_cap as usize).saturating_sub(g.running.len()) as u32;
                let reqs = &self.reqs;
                let ready = self.groups[gi].take_where(free, |r| reqs[r].first_token.is_some());
                for rid in ready {
                    let need = self.kv_need(rid);
                    let g = &mut self.groups[gi];
                    g.kv_used += need;
                    g.running.push(rid);
                }
                let g = &self.groups[gi];
                let free = (g.decode_cap as usize).saturating_sub(g.running.len()) as u32;
                let reqs = &self.reqs;
                let waiting = g
                    .queues
                    .iter()
                    .flatten()
                    .any(|&r| reqs[r].first_token.is_none());
                if waiting && free > 0 {
                    self.start_prefill(gi, free.min(g.prefill_cap));
                } else {
                    self.start_decode(gi);
                }
            }
        }
    }

    fn start_prefill(&mut self, gi: usize, cap: u32) {
        let reqs = &self.reqs;
        let batch = self.groups[gi].take_where(cap, |r| reqs[r].first_token.is_none());
        if batch.is_empty() {
            return;
        }
        let seq = batch.iter().map(|&r| self.reqs[r].prompt).max().unwrap();
        let tp = self.groups[gi].spec.tp;
        let ms = self
            .profile
            .lookup_latency(Stage::Prefill, tp, batch.len() as u32, seq)
            .expect("group tp checked against profile")
            .ms;
        let g = &mut self.groups[gi];
        g.inflight = batch;
        g.busy = true;
        let uid = g.uid;
        self.push(self.now + ms / 1e3, Ev::IterationDone(uid));
    }

    fn start_decode(&mut self, gi: usize) {
        let g = &self.groups[gi];
        if g.running.is_empty() {
            return;
        }
        let n = g.running.len();
        let ctx = g
            .running
            .iter()
            .map(|&r| self.reqs[r].context() as f64)
            .sum::<f64>()
            / n as f64;
        let ms = self
            .profile
            .lookup_latency_f64(Stage::Decode, g.spec.tp, n as f64, ctx)
            .expect("group tp checked against profile")
            .ms;
        let uid = g.uid;
        self.groups[gi].busy = true;
        self.push(self.now + ms / 1e3, Ev::IterationDone(uid));
    }

    fn on_iteration(&mut self, uid: u64) {
        let Some(&gi) = self.by_uid.get(&uid) else {
            return;
        };
        self.groups[gi].busy = false;
        let batch = std::mem::take(&mut self.groups[gi].inflight);
        if !batch.is_empty() {
            for rid in batch {
                self.reqs[rid].first_token = Some(self.now);
                if self.reqs[rid].output <= 1 {
                    self.complete(rid);
                } else if self.groups[gi].stage() == StageKind::Background {
                    let need = self.kv_need(rid);
                    let g = &mut self.groups[gi];
                    g.kv_used += need;
                    g.running.push(rid);
                } else {
                    self.handoff(rid);
                }
            }
        } else {
            let running = std::mem::take(&mut self.groups[gi].running);
            let mut keep = Vec::with_capacity(running.len());
            for rid in running {
                let r = &mut self.reqs[rid];
                r.generated += 1;
                if r.generated + 1 >= r.output {
                    let need = self.kv_need(rid);
                    let g = &mut self.groups[gi];
                    g.kv_used = g.kv_used.saturating_sub(need);
                    self.complete(rid);
                } else {
                    keep.push(rid);
                }
            }
            self.groups[gi].running = keep;
        }
        self.try_start(gi);
    }

    /// Least-occupied decode group for `rid`: its own tier first, then any.
    fn pick_decode(&self, rid: usize) -> Option<usize> {
        let r = &self.reqs[rid];
        let best = |own: bool| {
            self.groups
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    g.stage() == StageKind::Decode && (!own || g.tier() == Some(r.tier))
                })
                .min_by_key(|(i, g)| (g.decode_occupancy(), *i))
                .map(|(i, _)| i)
        };
        let own = if r.background { None } else { best(true) };
        own.or_else(|| best(false)).or_else(|| {
            self.groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.stage() == StageKind::Background)
                .min_by_key(|(i, g)| (g.decode_occupancy(), *i))
                .map(|(i, _)| i)
        })
    }

    fn handoff(&mut self, rid: usize) {
        let Some(gi) = self.pick_decode(rid) else {
            self.pending_decode.push_back(rid);
            return;
        };
        let bytes = self.profile.kv_bytes(self.reqs[rid].prompt as u64);
        let ns = pipelined_schedule_ns(&chunk_sizes(bytes, self.cost.chunk_bytes), &self.cost);
        let g = &mut self.groups[gi];
        g.incoming += 1;
        let uid = g.uid;
        self.push(self.now + ns as f64 / 1e9, Ev::DecodeReady { uid, rid });
    }

    fn on_decode_ready(&mut self, uid: u64, rid: usize) {
        let gi = match self.by_uid.get(&uid) {
            Some(&gi) => {
                self.groups[gi].incoming -= 1;
                gi
            }
            // The target was torn down while the KV was in transit.
            None => match self.pick_decode(rid) {
                Some(gi) => gi,
                None => {
                    self.pending_decode.push_back(rid);
                    return;
                }
            },
        };
        let label = self.reqs[rid].label;
        self.groups[gi].enqueue(label, rid);
        self.try_start(gi);
    }

    fn complete(&mut self, rid: usize) {
        let r = &self.reqs[rid];
        let first = r.first_token.expect("completion after first token");
        let tier = self.tier(r.tier);
        let ttft = first - r.arrival;
        let tpot = (self.now - first) / (r.output.max(2) - 1) as f64;
        let slo_met = !r.background && tier.is_met(ttft, tpot);
        if slo_met {
            *self.served.entry(r.tier).or_insert(0) += 1;
        }
        self.records.push(CompletionRecord {
            request_id: r.id,
            tier_id: r.tier,
            arrival: r.arrival,
            first_token_time: first,
            completion_time: self.now,
            ttft,
            tpot,
            output_len: r.output,
            label: r.label,
            background: r.background,
            slo_met,
        });
        self.stats.completed += 1;
        self.outstanding -= 1;
    }

    fn on_tick(&mut self, policy: &mut dyn Policy, horizon: f64) -> Result<(), EngineError> {
        let w = self.cfg.window_s;
        let start = (self.now - w).max(0.0);
        let mut demands = observe_demand(self.trace, self.tiers, start, self.now);
        for d in &mut demands {
            d.served_rps =
                self.served.get(&d.tier_id).copied().unwrap_or(0) as f64 / (self.now - start);
        }
        self.served.clear();
        let lookahead = observe_demand(self.trace, self.tiers, self.now, self.now + w);
        let index = self.windows.len() as u64;
        let mean = self.mean_demands.clone();
        let previous = self.config.clone();
        let ctx = PlanContext {
            window_index: index,
            pool_size: self.cfg.pool_size,
            tiers: self.tiers,
            envelopes: &self.env,
            demands: &demands,
            lookahead: &lookahead,
            mean_demands: &mean,
            previous: Some(&previous),
        };
        let cfg = policy.plan(&ctx);
        self.check(&cfg)?;
        let log = self.windows.len();
        self.windows.push(WindowLog {
            index,
            start_s: self.now,
            demands,
            config: cfg.clone(),
            changed_groups: 0,
            pause_ms: 0.0,
        });
        if self.cfg.planning_delay_s > 0.0 {
            self.push(
                self.now + self.cfg.planning_delay_s,
                Ev::Apply {
                    config: Box::new(cfg),
                    log,
                },
            );
        } else {
            self.apply(cfg, log);
        }
        if self.now + w <= horizon {
            self.push(self.now + w, Ev::Tick);
        }
        Ok(())
    }

    fn apply(&mut self, cfg: ClusterConfig, log: usize) {
        let old = std::mem::take(&mut self.groups);
        let mut old: Vec<Option<Group>> = old.into_iter().map(Some).collect();
        let old_layouts: Vec<Vec<u32>> = old
            .iter()
            .flatten()
            .map(|g| g.spec.gpu_ids.clone())
            .collect();

        let mut groups = Vec::with_capacity(cfg.groups.len());
        let mut fresh = Vec::new();
        for spec in &cfg.groups {
            let kept = old
                .iter_mut()
                .find(|g| g.as_ref().is_some_and(|g| &g.spec == spec))
                .and_then(Option::take);
            match kept {
                Some(g) => groups.push(g),
                None => {
                    fresh.push(groups.len());
                    // Work rerouted from retired groups arrives with it, so
                    // a mid-run group earns admission credit from zero.
                    let mut g = self.new_group(spec.clone());
                    g.bucket.drain(self.now);
                    groups.push(g);
                }
            }
        }

        // Tear down whatever was not kept.
        let mut redispatch = Vec::new();
        let mut moved: Vec<(usize, bool, Vec<u32>)> = Vec::new();
        for g in old.into_iter().flatten() {
            let Group {
                spec,
                queues,
                running,
                inflight,
                ..
            } = g;
            let waiting: Vec<usize> = queues.into_iter().flatten().collect();
            match spec.stage {
                StageKind::Prefill => {
                    redispatch.extend(inflight);
                    redispatch.extend(waiting);
                }
                StageKind::Background => {
                    redispatch.extend(inflight);
                    let (has_kv, fresh_reqs): (Vec<usize>, Vec<usize>) = waiting
                        .into_iter()
                        .partition(|&r| self.reqs[r].first_token.is_some());
                    redispatch.extend(fresh_reqs);
                    moved.extend(running.into_iter().map(|r| (r, true, spec.gpu_ids.clone())));
                    moved.extend(has_kv.into_iter().map(|r| (r, false, spec.gpu_ids.clone())));
                }
                StageKind::Decode => {
                    moved.extend(running.into_iter().map(|r| (r, true, spec.gpu_ids.clone())));
                    moved.extend(
                        waiting
                            .into_iter()
                            .map(|r| (r, false, spec.gpu_ids.clone())),
                    );
                }
            }
        }
        self.groups = groups;
        self.config = cfg;
        self.reindex();

        // KV moves: best GPU overlap within the tier, then least occupied.
        // Destination group -> source GPUs -> (request, context tokens).
        type Inbound = BTreeMap<usize, BTreeMap<Vec<u32>, Vec<(RequestId, u64)>>>;
        let mut inbound: Inbound = BTreeMap::new();
        for (rid, was_running, src) in moved {
            let r = &self.reqs[rid];
            let dest = self
                .groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.stage() != StageKind::Prefill)
                .max_by_key(|(i, g)| {
                    // Own-tier decode groups first; background requests have no tier.
                    let fit = match g.stage() {
                        StageKind::Decode => r.background || g.tier() == Some(r.tier),
                        _ => r.background,
                    };
                    let overlap = g.spec.gpu_ids.iter().filter(|x| src.contains(x)).count();
                    (
                        fit,
                        overlap,
                        std::cmp::Reverse(g.decode_occupancy()),
                        std::cmp::Reverse(*i),
                    )
                })
                .map(|(i, _)| i);
            let Some(di) = dest else {
                self.pending_decode.push_back(rid);
                continue;
            };
            inbound
                .entry(di)
                .or_default()
                .entry(src)
                .or_default()
                .push((r.id, r.context()));
            self.place_moved(di, rid, was_running);
        }

        // Pause every new group for its switch cost.
        let heads = self.profile.meta.total_kv_heads;
        let kvb = self.profile.meta.kv_bytes_per_token_per_head;
        let mut changed = 0u32;
        let mut pause_ms = 0.0;
        for &gi in &fresh {
            let dest = KvLayout::new(self.groups[gi].spec.gpu_ids.clone(), heads);
            let sources: Vec<KvLayout> = inbound
                .remove(&gi)
                .unwrap_or_default()
                .into_iter()
                .map(|(gpus, reqs)| KvLayout::new(gpus, heads).with_requests(reqs))
                .collect();
            let plan =
                plan_relayout(&sources, &dest, kvb).expect("profile heads divide every tp level");
            let reshaped = !old_layouts.contains(&dest.gpus);
            let ms = match self.cfg.switch_mode {
                SwitchMode::Warm => switch_cost(SwitchMode::Warm, &plan, &self.cost),
                mode if reshaped => switch_cost(mode, &plan, &self.cost),
                _ => latency_per_page(&plan, &self.cost),
            };
            changed += 1;
            pause_ms += ms;
            let g = &mut self.groups[gi];
            g.paused_until = self.now + ms / 1e3;
            let (uid, until) = (g.uid, g.paused_until);
            self.push(until, Ev::MigrationDone(uid));
        }
        if !self.windows.is_empty() {
            let w = &mut self.windows[log];
            w.changed_groups = changed;
            w.pause_ms = pause_ms;
        }
        self.stats.migrations += changed as u64;
        self.stats.pause_total_ms += pause_ms;

        redispatch.sort_unstable();
        let parked: Vec<usize> = self.pending.drain(..).collect();
        for rid in redispatch.into_iter().chain(parked) {
            self.route(rid);
        }
        let waiting: Vec<usize> = self.pending_decode.drain(..).collect();
        for rid in waiting {
            match self.pick_decode(rid) {
                Some(gi) => {
                    let label = self.reqs[rid].label;
                    self.groups[gi].enqueue(label, rid);
                }
                None => self.pending_decode.push_back(rid),
            }
        }
        for gi in 0..self.groups.len() {
            self.try_start(gi);
        }
    }

    /// Running requests keep their slot when it fits; the rest wait.
    fn place_moved(&mut self, di: usize, rid: usize, was_running: bool) {
        let need = self.kv_need(rid);
        let label = self.reqs[rid].label;
        let g = &mut self.groups[di];
        let fits_kv = g.kv_capacity.is_none_or(|c| g.kv_used + need <= c);
        if was_running && g.running.len() < g.decode_cap as usize && fits_kv {
            g.running.push(rid);
            g.kv_used += need;
        } else {
            if was_running && !fits_kv {
                self.stats.preemptions += 1;
            }
            g.enqueue(label, rid);
        }
    }
}
