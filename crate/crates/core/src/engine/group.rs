//! Per-group state, admission buckets, dispatch and batch formation.

use std::collections::VecDeque;

use crate::policy::{GroupSpec, StageKind};
use crate::trace::TierId;

/// Admission label assigned at dispatch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Feasible,
    BestEffort,
    Background,
}

impl Label {
    fn idx(self) -> usize {
        self as usize
    }
}

/// SLO-compliant serving bandwidth of one prefill group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucket {
    pub rate: f64,
    pub burst: f64,
    level: f64,
    last: f64,
}

impl TokenBucket {
    /// Starts full. Burst is `rate * window`, at least one request.
    pub fn new(rate: f64, window_s: f64, now: f64) -> Self {
        let burst = (rate * window_s).max(1.0);
        Self {
            rate: rate.max(0.0),
            burst,
            level: if rate > 0.0 { burst } else { 0.0 },
            last: now,
        }
    }

    pub fn level(&mut self, now: f64) -> f64 {
        if now > self.last {
            self.level = (self.level + self.rate * (now - self.last)).min(self.burst);
            self.last = now;
        }
        self.level
    }

    pub fn drain(&mut self, now: f64) {
        self.level = 0.0;
        self.last = now;
    }

    pub fn try_take(&mut self, now: f64) -> bool {
        if self.level(now) >= 1.0 {
            self.level -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    pub uid: u64,
    pub spec: GroupSpec,
    pub prefill_cap: u32,
    pub decode_cap: u32,
    pub bucket: TokenBucket,
    /// Waiting requests by label. Prefill groups hold requests awaiting
    /// prefill; decode groups hold requests awaiting a decode slot;
    /// background groups hold requests awaiting prefill.
    pub queues: [VecDeque<usize>; 3],
    /// Requests in the decode phase on this group.
    pub running: Vec<usize>,
    /// Batch of the prefill iteration in progress.
    pub inflight: Vec<usize>,
    pub busy: bool,
    pub paused_until: f64,
    /// KV handoffs heading here.
    pub incoming: usize,
    pub kv_capacity: Option<u64>,
    pub kv_used: u64,
}

impl Group {
    pub fn new(
        uid: u64,
        spec: GroupSpec,
        prefill_cap: u32,
        decode_cap: u32,
        rate: f64,
        window_s: f64,
        now: f64,
    ) -> Self {
        Self {
            uid,
            spec,
            prefill_cap: prefill_cap.max(1),
            decode_cap: decode_cap.max(1),
            bucket: TokenBucket::new(rate, window_s, now),
            queues: Default::default(),
            running: Vec::new(),
            inflight: Vec::new(),
            busy: false,
            paused_until: now,
            incoming: 0,
            kv_capacity: None,
            kv_used: 0,
        }
    }

    pub fn stage(&self) -> StageKind {
        self.spec.stage
    }

    pub fn tier(&self) -> Option<TierId> {
        self.spec.tier_id
    }

    pub fn queued(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Queue length plus work in progress.
    pub fn load(&self) -> usize {
        self.queued() + self.running.len() + self.inflight.len()
    }

    /// Occupancy used to pick a decode group for a handoff.
    pub fn decode_occupancy(&self) -> usize {
        self.running.len() + self.queued() + self.incoming
    }

    pub fn enqueue(&mut self, label: Label, rid: usize) {
        self.queues[label.idx()].push_back(rid);
    }

    pub fn drain_queues(&mut self) -> Vec<(Label, usize)> {
        let mut out = Vec::new();
        for (label, q) in [Label::Feasible, Label::BestEffort, Label::Background]
            .into_iter()
            .zip(self.queues.iter_mut())
        {
            out.extend(q.drain(..).map(|r| (label, r)));
        }
        out
    }

    /// Next prefill batch: feasible first, then best-effort, then background,
    /// up to `cap`.
    pub fn form_prefill_batch(&mut self, cap: u32) -> Vec<usize> {
        self.take_where(cap, |_| true)
    }

    /// Like [`form_prefill_batch`](Self::form_prefill_batch) but skips
    /// requests failing `ok`, leaving them queued in order.
    pub fn take_where(&mut self, cap: u32, ok: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut batch = Vec::new();
        for q in self.queues.iter_mut() {
            let mut i = 0;
            while batch.len() < cap as usize && i < q.len() {
                if ok(q[i]) {
                    batch.push(q.remove(i).expect("index in range"));
                } else {
                    i += 1;
                }
            }
        }
        batch
    }

    /// Fills free decode slots in the same label order. `kv_need` gives the
    /// bytes a request will hold; admission stops at the first request that
    /// does not fit when capacity is tracked. Returns the admitted requests.
    pub fn admit_decode(&mut self, kv_need: impl Fn(usize) -> u64) -> Vec<usize> {
        let mut admitted = Vec::new();
        'outer: for q in self.queues.iter_mut() {
            while self.running.len() < self.decode_cap as usize {
                let Some(&r) = q.front() else { break };
                let need = kv_need(r);
                if let Some(cap) = self.kv_capacity {
                    if self.kv_used + need > cap && !self.running.is_empty() {
                        break 'outer;
                    }
                }
                q.pop_front();
                self.kv_used += need;
                self.running.push(r);
                admitted.push(r);
            }
        }
        admitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Feasible(usize),
    BestEffort(usize),
    Background(usize),
    /// No group can take the request until the next reconfiguration.
    Park,
}

/// Global scheduler state: round-robin cursors for spills and background.
#[derive(Debug, Clone, Default)]
pub struct Dispatcher {
    spill_rr: usize,
    background_rr: usize,
    /// Restrict spills to the request's own tier.
    pub isolate_tiers: bool,
}

impl Dispatcher {
    pub fn new(isolate_tiers: bool) -> Self {
        Self {
            isolate_tiers,
            ..Default::default()
        }
    }

    /// Routes one request; debits the chosen group's bucket when feasible.
    /// `tier` is `None` for background requests.
    pub fn dispatch(&mut self, groups: &mut [Group], tier: Option<TierId>, now: f64) -> Placement {
        let Some(tier) = tier else {
            return self.dispatch_background(groups);
        };
        let mut best: Option<(usize, usize)> = None;
        for (i, g) in groups.iter_mut().enumerate() {
            if g.stage() != StageKind::Prefill || g.tier() != Some(tier) {
                continue;
            }
            if g.bucket.level(now) >= 1.0 && best.is_none_or(|(_, l)| g.load() < l) {
                best = Some((i, g.load()));
            }
        }
        if let Some((i, _)) = best {
            let took = groups[i].bucket.try_take(now);
            debug_assert!(took);
            return Placement::Feasible(i);
        }
        self.spill(groups, tier)
    }

    /// Best-effort placement that leaves every bucket untouched.
    pub fn spill(&mut self, groups: &[Group], tier: TierId) -> Placement {
        let isolate = self.isolate_tiers;
        if let Some(i) = self.next_rr(groups, true, |g| {
            g.stage() == StageKind::Prefill && (!isolate || g.tier() == Some(tier))
        }) {
            return Placement::BestEffort(i);
        }
        // Background groups run both stages, so they can absorb a tier that
        // has lost its prefill groups.
        match self.next_rr(groups, true, |g| g.stage() == StageKind::Background) {
            Some(i) => Placement::BestEffort(i),
            None => Placement::Park,
        }
    }

    fn dispatch_background(&mut self, groups: &[Group]) -> Placement {
        if let Some(i) = self.next_rr(groups, false, |g| g.stage() == StageKind::Background) {
            return Placement::Background(i);
        }
        match self.next_rr(groups, false, |g| g.stage() == StageKind::Prefill) {
            Some(i) => Placement::Background(i),
            None => Placement::Park,
        }
    }

    fn next_rr(
        &mut self,
        groups: &[Group],
        spill: bool,
        ok: impl Fn(&Group) -> bool,
    ) -> Option<usize> {
        let n = groups.len();
        if n == 0 {
            return None;
        }
        let cursor = if spill {
            &mut self.spill_rr
        } else {
            &mut self.background_rr
        };
        for k in 0..n {
            let i = (*cursor + k) % n;
            if ok(&groups[i]) {
                *cursor = i + 1;
                return Some(i);
            }
        }
        None
    }
}
