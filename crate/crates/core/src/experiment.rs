//! Experiment configuration, single runs and parameter sweeps.
//!
//! An experiment is a TOML file naming a profile, SLO tiers, a trace source,
//! the engine settings and the policies to compare. Relative paths resolve
//! against the config file's directory.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, EngineConfig, EngineError, SimOutput};
use crate::metrics::{self, Comparison, MetricsReport};
use crate::par::{self, Exec};
use crate::policy::{baseline_policy, PolicyKind};
use crate::profile::{derive_slos, PerfProfile};
use crate::trace::{generate_trace, load_trace, validate_tiers, Request, SloTier, SyntheticSpec};

/// A validation failure pinned to a config field.
#[derive(Debug, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn field_err(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl ExperimentError {
    /// Whether the failure is a problem with the inputs rather than the run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Tiers derived from the profile instead of written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloDerivation {
    #[serde(default = "one")]
    pub tp_min: u32,
    pub avg_prompt_len: f64,
    pub avg_output_len: f64,
    #[serde(default = "one")]
    pub strict_batch: u32,
    #[serde(default = "eight")]
    pub relaxed_batch: u32,
    #[serde(default = "unit")]
    pub scale: f64,
}

fn one() -> u32 {
    1
}
fn eight() -> u32 {
    8
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub file: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// `builtin:<name>` or a path to a profile JSON.
    pub profile: String,
    /// Overrides the synthetic trace seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    /// Policy the comparison ratios are taken against; the first by default.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default = "unit")]
    pub bucket_s: f64,
    /// Multiplies every arrival rate.
    #[serde(default = "unit")]
    pub rps_scale: f64,
    /// Multiplies every SLO target.
    #[serde(default = "unit")]
    pub slo_scale: f64,
    #[serde(default)]
    pub tiers: Vec<SloTier>,
    #[serde(default)]
    pub derive_slos: Option<SloDerivation>,
    #[serde(default)]
    pub engine: EngineConfig,
    pub trace: TraceSource,
}

fn default_policies() -> Vec<String> {
    vec!["adaptive".into()]
}

/// Everything a run needs, resolved from a config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub profile: PerfProfile,
    pub tiers: Vec<SloTier>,
    pub trace: Vec<Request>,
    pub policies: Vec<PolicyKind>,
    /// Span used for goodput aggregates, seconds.
    pub horizon: f64,
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| {
            let field = e
                .span()
                .map_or_else(|| "config".to_string(), |s| locate(src, s.start));
            field_err(field, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = fs::read_to_string(path)
            .map_err(|e| field_err("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks field values and resolves every external input.
    pub fn resolve(&self, base: &Path) -> Result<Resolved, ConfigError> {
        self.engine.validate().map_err(|e| match e {
            EngineError::InvalidConfig(m) => {
                let field = m.split_whitespace().next().unwrap_or("").to_string();
                field_err(format!("engine.{field}"), m)
            }
            other => field_err("engine", other),
        })?;
        for (name, v) in [
            ("bucket_s", self.bucket_s),
            ("rps_scale", self.rps_scale),
            ("slo_scale", self.slo_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(field_err(name, format!("must be positive, got {v}")));
            }
        }
        let profile =
            PerfProfile::resolve(&self.profile, base).map_err(|e| field_err("profile", e))?;

        let mut tiers = match (&self.derive_slos, self.tiers.iter().any(|t| !t.background)) {
            (Some(_), true) => {
                return Err(field_err(
                    "tiers",
                    "foreground tiers conflict with derive_slos",
                ))
            }
            (None, false) => {
                return Err(field_err("tiers", "no foreground tiers and no derive_slos"))
            }
            (Some(d), false) => {
                let (s, r) = derive_slos(
                    &profile,
                    d.tp_min,
                    d.avg_prompt_len,
                    d.avg_output_len,
                    d.strict_batch,
                    d.relaxed_batch,
                    d.scale,
                )
                .map_err(|e| field_err("derive_slos", e))?;
                let mut v = vec![s, r];
                v.extend(self.tiers.iter().cloned());
                v
            }
            (None, true) => self.tiers.clone(),
        };
        for t in tiers.iter_mut().filter(|t| !t.background) {
            t.ttft_target_ms *= self.slo_scale;
            t.tpot_target_ms *= self.slo_scale;
        }
        validate_tiers(&tiers).map_err(|e| field_err("tiers", e))?;

        let mut policies = Vec::new();
        for (i, p) in self.policies.iter().enumerate() {
            let kind =
                PolicyKind::from_str(p).map_err(|e| field_err(format!("policies[{i}]"), e))?;
            baseline_policy(kind, self.engine.pool_size)
                .map_err(|e| field_err(format!("policies[{i}]"), e))?;
            policies.push(kind);
        }
        if policies.is_empty() {
            return Err(field_err("policies", "at least one policy is required"));
        }
        if let Some(b) = &self.baseline {
            if !policies.iter().any(|k| &k.label() == b) {
                return Err(field_err(
                    "baseline",
                    format!("{b:?} is not listed in policies"),
                ));
            }
        }

        let (trace, horizon) = match (&self.trace.file, &self.trace.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(field_err(
                    "trace",
                    "exactly one of trace.file and trace.synthetic is required",
                ))
            }
            (Some(f), None) => {
                let mut reqs =
                    load_trace(&base.join(f), &tiers).map_err(|e| field_err("trace.file", e))?;
                for r in &mut reqs {
                    r.arrival_time /= self.rps_scale;
                }
                let h = reqs.iter().map(|r| r.arrival_time).fold(0.0, f64::max);
                (reqs, h)
            }
            (None, Some(spec)) => {
                let mut spec = spec.clone();
                if let Some(seed) = self.seed {
                    spec.seed = seed;
                }
                for s in &mut spec.streams {
                    s.rate *= self.rps_scale;
                }
                for s in &spec.streams {
                    if !tiers.iter().any(|t| t.id == s.tier) {
                        return Err(field_err(
                            "trace.synthetic.streams",
                            format!("unknown tier {}", s.tier),
                        ));
                    }
                }
                let h = spec.duration;
                (
                    generate_trace(&spec).map_err(|e| field_err("trace.synthetic", e))?,
                    h,
                )
            }
        };
        Ok(Resolved {
            profile,
            tiers,
            trace,
            policies,
            horizon,
        })
    }
}

/// Dotted path of the TOML key enclosing byte offset `pos`, best effort.
fn locate(src: &str, pos: usize) -> String {
    let before = &src[..pos.min(src.len())];
    let mut table = String::new();
    for line in before.lines() {
        let l = line.trim();
        if l.starts_with('[') {
            table = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    let line = src[before.rfind('\n').map_or(0, |i| i + 1)..]
        .lines()
        .next()
        .unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    match (table.is_empty(), key.is_empty() || key.starts_with('[')) {
        (true, true) => "config".into(),
        (true, false) => key.into(),
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: SimOutput,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub comparison: Comparison,
}

/// One simulation of `kind` over resolved inputs.
pub fn run_policy(
    r: &Resolved,
    engine: &EngineConfig,
    kind: PolicyKind,
    bucket_s: f64,
) -> Result<RunResult, ExperimentError> {
    let mut policy =
        baseline_policy(kind, engine.pool_size).map_err(|e| field_err("policies", e))?;
    let output = engine::run(&r.trace, &r.tiers, &r.profile, engine, policy.as_mut())?;
    let report = MetricsReport::build(&output, &r.tiers, bucket_s, Some(r.horizon))?;
    Ok(RunResult { output, report })
}

/// Runs every configured policy, concurrently when `exec` allows.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base: &Path,
    exec: Exec,
) -> Result<ExperimentResult, ExperimentError> {
    let r = cfg.resolve(base)?;
    let runs = par::map(exec, &r.policies, |&k| {
        run_policy(&r, &cfg.engine, k, cfg.bucket_s)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|x| x.report.clone()).collect();
    let comparison = metrics::compare(&reports, cfg.baseline.as_deref())?;
    Ok(ExperimentResult { runs, comparison })
}

/// Writes per-policy record and window logs plus the goodput CSV, JSON
/// summary and comparison table.
pub fn write_outputs(res: &ExperimentResult, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let create = |name: String| -> Result<(PathBuf, BufWriter<fs::File>), ExperimentError> {
        let p = dir.join(name);
        let f = fs::File::create(&p).map_err(io_err(&p))?;
        Ok((p, BufWriter::new(f)))
    };
    for run in &res.runs {
        let policy = &run.output.policy;
        let (p, mut w) = create(format!("records_{policy}.jsonl"))?;
        for rec in &run.output.records {
            serde_json::to_writer(&mut w, rec).map_err(|e| io_err(&p)(e.into()))?;
            w.write_all(b"\n").map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;
        let (p, mut w) = create(format!("windows_{policy}.jsonl"))?;
        for win in &run.output.windows {
            serde_json::to_writer(&mut w, win).map_err(|e| io_err(&p)(e.into()))?;
            w.write_all(b"\n").map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;
    }
    let reports: Vec<MetricsReport> = res.runs.iter().map(|x| x.report.clone()).collect();
    let (p, mut w) = create("goodput.csv".into())?;
    metrics::write_csv(&mut w, &reports).map_err(io_err(&p))?;
    w.flush().map_err(io_err(&p))?;
    let (p, mut w) = create("summary.json".into())?;
    let summary = serde_json::json!({
        "policies": metrics::summary_json(&reports),
        "comparison": res.comparison,
    });
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| io_err(&p)(e.into()))?;
    w.write_all(b"\n").map_err(io_err(&p))?;
    w.flush().map_err(io_err(&p))?;
    let p = dir.join("comparison.txt");
    fs::write(&p, res.comparison.to_string()).map_err(io_err(&p))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    RpsScale,
    SloScale,
    Window,
    PoolSize,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "rps_scale" => Ok(Self::RpsScale),
            "slo_scale" => Ok(Self::SloScale),
            "window" | "window_s" => Ok(Self::Window),
            "pool_size" | "pool" => Ok(Self::PoolSize),
            _ => Err(format!(
                "unknown sweep parameter {s:?}; expected rps_scale, slo_scale, window or pool_size"
            )),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RpsScale => "rps_scale",
            Self::SloScale => "slo_scale",
            Self::Window => "window",
            Self::PoolSize => "pool_size",
        })
    }
}

impl SweepParam {
    /// Copy of `cfg` with the parameter set to `v`.
    pub fn apply(self, cfg: &ExperimentConfig, v: f64) -> Result<ExperimentConfig, ConfigError> {
        let mut c = cfg.clone();
        match self {
            Self::RpsScale => c.rps_scale = cfg.rps_scale * v,
            Self::SloScale => c.slo_scale = cfg.slo_scale * v,
            Self::Window => c.engine.window_s = v,
            Self::PoolSize => {
                if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(field_err(
                        "pool_size",
                        format!("sweep value {v} is not a positive integer"),
                    ));
                }
                c.engine.pool_size = v as u32;
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub policy: String,
    pub goodput_rps: f64,
    pub attainment: Option<f64>,
    pub migrations: u64,
    pub pause_total_ms: f64,
}

/// Runs every (value, policy) point. Points run concurrently under
/// [`Exec::Parallel`]; rows come back in (value, policy) order regardless.
pub fn sweep(
    cfg: &ExperimentConfig,
    base: &Path,
    param: SweepParam,
    values: &[f64],
    exec: Exec,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if values.is_empty() {
        return Err(field_err("values", "no sweep values").into());
    }
    let mut points = Vec::new();
    for &v in values {
        let c = param.apply(cfg, v)?;
        let r = c.resolve(base)?;
        for &k in &r.policies {
            points.push((v, c.clone(), k));
        }
    }
    // Resolve once per value; generation is cheap next to simulation.
    let resolved: Vec<(f64, Resolved)> = values
        .iter()
        .map(|&v| Ok((v, param.apply(cfg, v)?.resolve(base)?)))
        .collect::<Result<_, ConfigError>>()?;
    let rows = par::map(exec, &points, |(v, c, k)| {
        let r = &resolved
            .iter()
            .find(|(x, _)| x == v)
            .expect("resolved above")
            .1;
        run_policy(r, &c.engine, *k, c.bucket_s).map(|run| SweepRow {
            param,
            value: *v,
            policy: run.output.policy.clone(),
            goodput_rps: run.report.goodput.aggregate,
            attainment: run.report.attainment,
            migrations: run.report.migrations,
            pause_total_ms: run.report.pause_total_ms,
        })
    });
    rows.into_iter().collect()
}

pub const SWEEP_CSV_HEADER: &str =
    "param,value,policy,goodput_rps,attainment,migrations,pause_total_ms";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        let att = r.attainment.map_or(String::new(), |a| a.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.param, r.value, r.policy, r.goodput_rps, att, r.migrations, r.pause_total_ms
        )?;
    }
    Ok(())
}
