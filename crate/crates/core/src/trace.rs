//! Requests, SLO tiers, trace ingestion and synthetic workload generation.
//!
//! Trace files are JSON-lines, one request per line:
//!
//! ```text
//! {"arrival_time_s": 0.125, "tier": 0, "prompt_len": 812, "output_len": 64}
//! ```
//!
//! Request ids are assigned after sorting, so id `i` is the `i`-th arrival.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::TierDemand;

pub type TierId = u32;
pub type RequestId = u64;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown tier id {tier}")]
    UnknownTier { line: usize, tier: TierId },
    #[error("invalid tier {id}: {message}")]
    InvalidTier { id: TierId, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// A class of requests sharing latency targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloTier {
    pub id: TierId,
    pub name: String,
    /// Time-to-first-token target in milliseconds.
    pub ttft_target_ms: f64,
    /// Time-per-output-token target in milliseconds.
    pub tpot_target_ms: f64,
    #[serde(default)]
    pub background: bool,
}

impl SloTier {
    pub fn new(
        id: TierId,
        name: impl Into<String>,
        ttft_target_ms: f64,
        tpot_target_ms: f64,
    ) -> Self {
        Self {
            id,
            name: name.into(),
            ttft_target_ms,
            tpot_target_ms,
            background: false,
        }
    }

    pub fn background(id: TierId, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
            ttft_target_ms: 0.0,
            tpot_target_ms: 0.0,
            background: true,
        }
    }

    /// Whether a request with the given latencies (seconds) meets both targets.
    /// Background tiers have no targets and never count.
    pub fn is_met(&self, ttft_s: f64, tpot_s: f64) -> bool {
        !self.background
            && ttft_s * 1e3 <= self.ttft_target_ms
            && tpot_s * 1e3 <= self.tpot_target_ms
    }
}

/// Checks per-tier target positivity and id uniqueness.
pub fn validate_tiers(tiers: &[SloTier]) -> Result<(), TraceError> {
    let mut seen = BTreeSet::new();
    for t in tiers {
        if !seen.insert(t.id) {
            return Err(TraceError::InvalidTier {
                id: t.id,
                message: "duplicate tier id".into(),
            });
        }
        if !t.background && !(t.ttft_target_ms > 0.0 && t.tpot_target_ms > 0.0) {
            return Err(TraceError::InvalidTier {
                id: t.id,
                message: "ttft and tpot targets must be positive".into(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub tier_id: TierId,
    /// Seconds from trace start.
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub output_len: u32,
}

/// On-disk trace record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TraceRecord {
    arrival_time_s: f64,
    tier: TierId,
    prompt_len: u32,
    output_len: u32,
}

/// Reads a JSON-lines trace. Blank lines are skipped.
pub fn load_trace(path: &Path, tiers: &[SloTier]) -> Result<Vec<Request>, TraceError> {
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(BufReader::new(file), tiers)
}

pub fn parse_trace<R: BufRead>(reader: R, tiers: &[SloTier]) -> Result<Vec<Request>, TraceError> {
    let known: BTreeSet<TierId> = tiers.iter().map(|t| t.id).collect();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TraceError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if !(rec.arrival_time_s.is_finite() && rec.arrival_time_s >= 0.0) {
            return Err(TraceError::Malformed {
                line: lineno,
                message: format!(
                    "arrival_time_s must be a non-negative number, got {}",
                    rec.arrival_time_s
                ),
            });
        }
        if rec.prompt_len == 0 {
            return Err(TraceError::Malformed {
                line: lineno,
                message: "prompt_len must be > 0".into(),
            });
        }
        if rec.output_len == 0 {
            return Err(TraceError::Malformed {
                line: lineno,
                message: "output_len must be >= 1".into(),
            });
        }
        if !known.contains(&rec.tier) {
            return Err(TraceError::UnknownTier {
                line: lineno,
                tier: rec.tier,
            });
        }
        records.push(rec);
    }

    if records
        .windows(2)
        .any(|w| w[1].arrival_time_s < w[0].arrival_time_s)
    {
        log::warn!(
            "trace timestamps are not monotone; sorting {} records",
            records.len()
        );
        records.sort_by(|a, b| a.arrival_time_s.total_cmp(&b.arrival_time_s));
    }

    Ok(records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Request {
            id: i as RequestId,
            tier_id: r.tier,
            arrival_time: r.arrival_time_s,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
        })
        .collect())
}

pub fn write_trace<W: Write>(mut out: W, requests: &[Request]) -> std::io::Result<()> {
    for r in requests {
        let rec = TraceRecord {
            arrival_time_s: r.arrival_time,
            tier: r.tier_id,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Lognormal length distribution clamped to `[1, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
    pub max: u32,
}

impl LengthDist {
    pub fn fixed(len: u32) -> Self {
        Self {
            median: len as f64,
            sigma: 0.0,
            max: len.max(1),
        }
    }

    fn sample<R: Rng>(&self, dist: Option<&LogNormal<f64>>, rng: &mut R) -> u32 {
        let raw = match dist {
            Some(d) => d.sample(rng),
            None => self.median,
        };
        (raw.round() as i64).clamp(1, self.max.max(1) as i64) as u32
    }
}

/// One tier's arrival stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierStream {
    pub tier: TierId,
    /// Base arrival rate, requests per second.
    pub rate: f64,
    pub prompt: LengthDist,
    pub output: LengthDist,
}

/// Multiplies the base rate inside `[start, end)`. Applies to every tier unless
/// `tier` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start: f64,
    pub end: f64,
    pub multiplier: f64,
    #[serde(default)]
    pub tier: Option<TierId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub duration: f64,
    pub streams: Vec<TierStream>,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidSpec(m));
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return bad(format!(
                "duration must be non-negative, got {}",
                self.duration
            ));
        }
        for s in &self.streams {
            if !(s.rate.is_finite() && s.rate >= 0.0) {
                return bad(format!("tier {}: rate must be non-negative", s.tier));
            }
            for (name, d) in [("prompt", &s.prompt), ("output", &s.output)] {
                if !(d.median >= 1.0 && d.sigma >= 0.0 && d.max >= 1) {
                    return bad(format!(
                        "tier {}: {name} length needs median >= 1, sigma >= 0, max >= 1",
                        s.tier
                    ));
                }
            }
        }
        for b in &self.bursts {
            if !(b.start >= 0.0 && b.start <= b.end && b.end <= self.duration) {
                return bad(format!(
                    "burst [{}, {}) must lie within [0, {}]",
                    b.start, b.end, self.duration
                ));
            }
            if !(b.multiplier.is_finite() && b.multiplier >= 0.0) {
                return bad(format!(
                    "burst multiplier must be >= 0, got {}",
                    b.multiplier
                ));
            }
        }
        Ok(())
    }

    /// Rate multiplier for `tier` at time `t`. Overlapping bursts multiply.
    pub fn multiplier_at(&self, tier: TierId, t: f64) -> f64 {
        self.bursts
            .iter()
            .filter(|b| b.tier.is_none_or(|x| x == tier) && t >= b.start && t < b.end)
            .map(|b| b.multiplier)
            .product()
    }

    fn peak_multiplier(&self, tier: TierId) -> f64 {
        // Upper bound on the product of overlapping multipliers.
        self.bursts
            .iter()
            .filter(|b| b.tier.is_none_or(|x| x == tier))
            .map(|b| b.multiplier.max(1.0))
            .product::<f64>()
    }
}

/// Draws a piecewise-homogeneous Poisson trace by thinning.
///
/// Each tier gets its own ChaCha stream keyed by the tier id, so adding a tier
/// does not perturb the others.
pub fn generate_trace(spec: &SyntheticSpec) -> Result<Vec<Request>, TraceError> {
    spec.validate()?;
    let mut out: Vec<Request> = Vec::new();
    for stream in &spec.streams {
        let peak = stream.rate * spec.peak_multiplier(stream.tier);
        if peak <= 0.0 || spec.duration <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream.tier as u64 + 1);
        let gap = Exp::new(peak).map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
        let prompt = lognormal(&stream.prompt)?;
        let output = lognormal(&stream.output)?;

        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= spec.duration {
                break;
            }
            let accept = stream.rate * spec.multiplier_at(stream.tier, t) / peak;
            let u: f64 = rng.random();
            if u >= accept {
                continue;
            }
            out.push(Request {
                id: 0,
                tier_id: stream.tier,
                arrival_time: t,
                prompt_len: stream.prompt.sample(prompt.as_ref(), &mut rng),
                output_len: stream.output.sample(output.as_ref(), &mut rng),
            });
        }
    }
    out.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.tier_id.cmp(&b.tier_id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.id = i as RequestId;
    }
    Ok(out)
}

fn lognormal(d: &LengthDist) -> Result<Option<LogNormal<f64>>, TraceError> {
    if d.sigma == 0.0 {
        return Ok(None);
    }
    LogNormal::new(d.median.ln(), d.sigma)
        .map(Some)
        .map_err(|e| TraceError::InvalidSpec(e.to_string()))
}

/// Per-tier arrival rate over `[start, end)`. `served_rps` is left at zero for
/// the engine to fill in.
pub fn observe_demand(
    requests: &[Request],
    tiers: &[SloTier],
    start: f64,
    end: f64,
) -> Vec<TierDemand> {
    assert!(start < end, "observe_demand: empty window [{start}, {end})");
    let span = end - start;
    let lo = requests.partition_point(|r| r.arrival_time < start);
    let hi = requests.partition_point(|r| r.arrival_time < end);
    tiers
        .iter()
        .map(|t| {
            let n = requests[lo..hi]
                .iter()
                .filter(|r| r.tier_id == t.id)
                .count();
            TierDemand {
                tier_id: t.id,
                rps_observed: n as f64 / span,
                served_rps: 0.0,
            }
        })
        .collect()
}

/// Nearest-rank `q`-quantile (`q` in `[0, 1]`) of a tier's prompt lengths.
pub fn prompt_quantile(requests: &[Request], tier: TierId, q: f64) -> Option<f64> {
    let mut v: Vec<u32> = requests
        .iter()
        .filter(|r| r.tier_id == tier)
        .map(|r| r.prompt_len)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let rank = (q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1] as f64)
}

/// Mean prompt and output length per tier over the whole slice.
pub fn mean_lengths(requests: &[Request], tier: TierId) -> Option<(f64, f64)> {
    let (mut n, mut p, mut o) = (0usize, 0f64, 0f64);
    for r in requests.iter().filter(|r| r.tier_id == tier) {
        n += 1;
        p += r.prompt_len as f64;
        o += r.output_len as f64;
    }
    (n > 0).then(|| (p / n as f64, o / n as f64))
}
