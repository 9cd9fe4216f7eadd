//! Goodput timelines, SLO attainment and latency percentiles.
//!
//! A completion counts toward goodput when it meets both its tier's TTFT and
//! TPOT targets. Compliance is re-evaluated against the tiers passed in, so
//! the same records can be scored under scaled targets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CompletionRecord, SimOutput};
use crate::trace::{SloTier, TierId};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to compare")]
    Empty,
    #[error("baseline {0:?} is not among the reports")]
    UnknownBaseline(String),
    #[error("bucket width must be positive, got {0}")]
    Bucket(f64),
}

/// Nearest-rank percentile, `q` in percent. `None` for an empty series.
pub fn percentile(series: &[f64], q: f64) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let mut v = series.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
}

impl Percentiles {
    pub fn of(series: &[f64]) -> Self {
        Self {
            p50: percentile(series, 50.0),
            p90: percentile(series, 90.0),
            p99: percentile(series, 99.0),
        }
    }
}

fn meets(r: &CompletionRecord, tiers: &[SloTier]) -> bool {
    !r.background
        && tiers
            .iter()
            .find(|t| t.id == r.tier_id)
            .is_some_and(|t| t.is_met(r.ttft, r.tpot))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goodput {
    pub bucket_s: f64,
    pub duration_s: f64,
    /// SLO-meeting completions per second, by completion-time bucket.
    pub series: Vec<f64>,
    /// Background completions per second, same buckets.
    pub background_series: Vec<f64>,
    pub aggregate: f64,
    pub per_tier: BTreeMap<TierId, f64>,
    pub compliant: u64,
}

/// Buckets completions by completion time. `horizon` fixes the duration used
/// for aggregates; by default it is the last completion time.
pub fn goodput(
    records: &[CompletionRecord],
    tiers: &[SloTier],
    bucket_s: f64,
    horizon: Option<f64>,
) -> Result<Goodput, MetricsError> {
    if !(bucket_s.is_finite() && bucket_s > 0.0) {
        return Err(MetricsError::Bucket(bucket_s));
    }
    let last = records
        .iter()
        .map(|r| r.completion_time)
        .fold(0.0, f64::max);
    let duration = horizon.unwrap_or(last);
    let n = (last.max(duration) / bucket_s).ceil().max(1.0) as usize;
    let mut series = vec![0.0; n];
    let mut background = vec![0.0; n];
    let mut per_tier: BTreeMap<TierId, f64> = tiers
        .iter()
        .filter(|t| !t.background)
        .map(|t| (t.id, 0.0))
        .collect();
    let mut compliant = 0u64;
    for r in records {
        let b = ((r.completion_time / bucket_s) as usize).min(n - 1);
        if r.background {
            background[b] += 1.0;
        } else if meets(r, tiers) {
            series[b] += 1.0;
            compliant += 1;
            *per_tier.entry(r.tier_id).or_insert(0.0) += 1.0;
        }
    }
    for v in series.iter_mut().chain(background.iter_mut()) {
        *v /= bucket_s;
    }
    let rate = |c: f64| if duration > 0.0 { c / duration } else { 0.0 };
    for v in per_tier.values_mut() {
        *v = rate(*v);
    }
    Ok(Goodput {
        bucket_s,
        duration_s: duration,
        series,
        background_series: background,
        aggregate: rate(compliant as f64),
        per_tier,
        compliant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub tier_id: TierId,
    pub name: String,
    pub completed: u64,
    pub goodput: f64,
    /// Fraction of completions meeting both targets.
    pub attainment: Option<f64>,
    pub ttft_s: Percentiles,
    pub tpot_s: Percentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub goodput: Goodput,
    pub throughput: f64,
    pub attainment: Option<f64>,
    pub tiers: Vec<TierReport>,
    pub migrations: u64,
    pub pause_total_ms: f64,
    pub preemptions: u64,
}

impl MetricsReport {
    pub fn build(
        out: &SimOutput,
        tiers: &[SloTier],
        bucket_s: f64,
        horizon: Option<f64>,
    ) -> Result<Self, MetricsError> {
        let g = goodput(&out.records, tiers, bucket_s, horizon)?;
        let fg: Vec<&CompletionRecord> = out.records.iter().filter(|r| !r.background).collect();
        let frac = |met: usize, n: usize| (n > 0).then(|| met as f64 / n as f64);
        let tier_reports = tiers
            .iter()
            .filter(|t| !t.background)
            .map(|t| {
                let rs: Vec<&&CompletionRecord> = fg.iter().filter(|r| r.tier_id == t.id).collect();
                let met = rs.iter().filter(|r| meets(r, tiers)).count();
                TierReport {
                    tier_id: t.id,
                    name: t.name.clone(),
                    completed: rs.len() as u64,
                    goodput: g.per_tier.get(&t.id).copied().unwrap_or(0.0),
                    attainment: frac(met, rs.len()),
                    ttft_s: Percentiles::of(&rs.iter().map(|r| r.ttft).collect::<Vec<_>>()),
                    tpot_s: Percentiles::of(&rs.iter().map(|r| r.tpot).collect::<Vec<_>>()),
                }
            })
            .collect();
        let throughput = if g.duration_s > 0.0 {
            out.records.len() as f64 / g.duration_s
        } else {
            0.0
        };
        Ok(Self {
            policy: out.policy.clone(),
            attainment: frac(g.compliant as usize, fg.len()),
            goodput: g,
            throughput,
            tiers: tier_reports,
            migrations: out.stats.migrations,
            pause_total_ms: out.stats.pause_total_ms,
            preemptions: out.stats.preemptions,
        })
    }

    fn worst(&self, f: impl Fn(&TierReport) -> Option<f64>) -> Option<f64> {
        self.tiers.iter().filter_map(f).reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub goodput: f64,
    pub attainment: Option<f64>,
    /// Worst tier's p99, seconds.
    pub ttft_p99: Option<f64>,
    pub tpot_p99: Option<f64>,
    pub goodput_ratio: Option<f64>,
    pub attainment_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, policy: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Tabulates reports against `baseline` (a policy name; the first report when
/// `None`).
pub fn compare(
    reports: &[MetricsReport],
    baseline: Option<&str>,
) -> Result<Comparison, MetricsError> {
    let base = match baseline {
        None => reports.first().ok_or(MetricsError::Empty)?,
        Some(name) => {
            if reports.is_empty() {
                return Err(MetricsError::Empty);
            }
            reports
                .iter()
                .find(|r| r.policy == name)
                .ok_or_else(|| MetricsError::UnknownBaseline(name.to_string()))?
        }
    };
    let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            policy: r.policy.clone(),
            goodput: r.goodput.aggregate,
            attainment: r.attainment,
            ttft_p99: r.worst(|t| t.ttft_s.p99),
            tpot_p99: r.worst(|t| t.tpot_s.p99),
            goodput_ratio: ratio(r.goodput.aggregate, base.goodput.aggregate),
            attainment_ratio: r
                .attainment
                .zip(base.attainment)
                .and_then(|(a, b)| ratio(a, b)),
        })
        .collect();
    Ok(Comparison {
        baseline: base.policy.clone(),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt =
            |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |v| format!("{:.3}", v * scale));
        writeln!(
            f,
            "{:<20} {:>10} {:>10} {:>12} {:>12} {:>10}",
            "policy", "goodput", "attain", "ttft_p99_ms", "tpot_p99_ms", "vs_base"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<20} {:>10.3} {:>10} {:>12} {:>12} {:>10}",
                r.policy,
                r.goodput,
                opt(r.attainment, 1.0),
                opt(r.ttft_p99, 1e3),
                opt(r.tpot_p99, 1e3),
                opt(r.goodput_ratio, 1.0)
            )?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "policy,bucket_start_s,goodput_rps,background_rps";

/// One row per bucket per report.
pub fn write_csv<W: Write>(mut w: W, reports: &[MetricsReport]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        let g = &r.goodput;
        for (i, (gp, bg)) in g.series.iter().zip(&g.background_series).enumerate() {
            writeln!(w, "{},{},{},{}", r.policy, i as f64 * g.bucket_s, gp, bg)?;
        }
    }
    Ok(())
}

/// JSON summary of every report, without the per-bucket series.
pub fn summary_json(reports: &[MetricsReport]) -> serde_json::Value {
    let items: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "policy": r.policy,
                "goodput_rps": r.goodput.aggregate,
                "duration_s": r.goodput.duration_s,
                "compliant": r.goodput.compliant,
                "throughput_rps": r.throughput,
                "attainment": r.attainment,
                "migrations": r.migrations,
                "pause_total_ms": r.pause_total_ms,
                "preemptions": r.preemptions,
                "tiers": r.tiers,
            })
        })
        .collect();
    serde_json::Value::Array(items)
}
