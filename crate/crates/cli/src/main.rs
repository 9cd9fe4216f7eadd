use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tpsim::experiment::{self, ExperimentConfig, SweepParam};
use tpsim::migration::{plan_relayout, plan_repartition, KvLayout, MigrationPlan, SwitchMode};
use tpsim::par::Exec;
use tpsim::policy::{plan_window, GreedyOptions, TierDemand};
use tpsim::profile::{self, derive_slos, EnvelopeTable, PerfProfile};
use tpsim::trace::{write_trace, SloTier, TierId};

#[derive(Parser)]
#[command(
    name = "tpsim",
    version,
    about = "Tiered-SLO serving simulator with adaptive tensor parallelism"
)]
struct Cli {
    /// Run sweep points and policies one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every policy in a config and write records, window logs and a summary.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Rerun a config over values of one parameter and write a comparison CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// rps_scale, slo_scale, window or pool_size.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Plan one window from a demand file and report planner wall time.
    Plan {
        #[arg(long, default_value = "builtin:a100-like")]
        profile: String,
        /// JSON with per-tier targets, mean lengths and demand.
        #[arg(long)]
        demands: PathBuf,
        #[arg(long)]
        pool: Option<u32>,
        /// Timed repetitions; the median is reported.
        #[arg(long, default_value_t = 20)]
        repeat: u32,
    },
    /// Plan the KV moves for regrouping old layouts at a new TP.
    MigratePlan {
        /// JSON array of groups: {"gpus": [..], "total_heads": H, "requests": [[id, ctx], ..]}.
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        new_tp: u32,
        #[arg(long, default_value = "builtin:a100-like")]
        profile: String,
        /// Write the plan JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic trace of a config.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print strict and relaxed tiers derived from profile latencies.
    DeriveSlos {
        #[arg(long, default_value = "builtin:a100-like")]
        profile: String,
        #[arg(long)]
        prompt_len: f64,
        #[arg(long)]
        output_len: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        tp_min: Option<u32>,
        #[arg(long, default_value_t = 1)]
        strict_batch: u32,
        #[arg(long, default_value_t = 8)]
        relaxed_batch: u32,
    },
    /// Write a bundled profile as JSON.
    ExportProfile {
        #[arg(long, default_value = "a100-like")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's out_dir, then out/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these policies (repeatable).
    #[arg(long)]
    policy: Vec<String>,
    #[arg(long)]
    switch_mode: Option<SwitchMode>,
}

/// Bad input as opposed to a failed run. Maps to exit status 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl ToString) -> anyhow::Error {
    Invalid(msg.to_string()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match dispatch(cli.cmd, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Invalid>().is_some()
                || e.downcast_ref::<experiment::ExperimentError>()
                    .is_some_and(|x| x.is_validation());
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Cmd, exec: Exec) -> Result<()> {
    match cmd {
        Cmd::Simulate { run } => simulate(run, exec),
        Cmd::Sweep { run, param, values } => sweep(run, param, &values, exec),
        Cmd::Plan {
            profile,
            demands,
            pool,
            repeat,
        } => plan(&profile, &demands, pool, repeat),
        Cmd::MigratePlan {
            layout,
            new_tp,
            profile,
            out,
        } => migrate_plan(&layout, new_tp, &profile, out.as_deref()),
        Cmd::GenTrace { config, seed, out } => gen_trace(&config, seed, &out),
        Cmd::DeriveSlos {
            profile,
            prompt_len,
            output_len,
            scale,
            tp_min,
            strict_batch,
            relaxed_batch,
        } => {
            let p = load_profile(&profile)?;
            let tp = tp_min.unwrap_or_else(|| p.min_tp());
            let (s, r) = derive_slos(
                &p,
                tp,
                prompt_len,
                output_len,
                strict_batch,
                relaxed_batch,
                scale,
            )
            .map_err(invalid)?;
            #[derive(serde::Serialize)]
            struct Tiers {
                tiers: Vec<SloTier>,
            }
            print!("{}", toml::to_string(&Tiers { tiers: vec![s, r] })?);
            Ok(())
        }
        Cmd::ExportProfile { name, out } => {
            let p = profile::builtin(&name).map_err(invalid)?;
            write_file(&out, (p.to_json() + "\n").as_bytes())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(&args.config).map_err(experiment::ExperimentError::from)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(m) = args.switch_mode {
        cfg.engine.switch_mode = m;
    }
    if !args.policy.is_empty() {
        cfg.policies = args.policy.clone();
        if cfg
            .baseline
            .as_ref()
            .is_some_and(|b| !cfg.policies.contains(b))
        {
            cfg.baseline = None;
        }
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| {
            let name = if cfg.name.is_empty() {
                "run"
            } else {
                &cfg.name
            };
            Path::new("out").join(name)
        })
}

fn simulate(args: RunArgs, exec: Exec) -> Result<()> {
    let cfg = load_config(&args)?;
    let start = Instant::now();
    let res = experiment::run_experiment(&cfg, &base_dir(&args.config), exec)?;
    let dir = out_dir(&args, &cfg);
    experiment::write_outputs(&res, &dir)?;
    print!("{}", res.comparison);
    log::info!("simulated in {:.2} s", start.elapsed().as_secs_f64());
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(args: RunArgs, param: SweepParam, values: &[f64], exec: Exec) -> Result<()> {
    let cfg = load_config(&args)?;
    let rows = experiment::sweep(&cfg, &base_dir(&args.config), param, values, exec)?;
    let dir = out_dir(&args, &cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("sweep_{param}.csv"));
    let mut w = BufWriter::new(
        fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?,
    );
    experiment::write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    experiment::write_sweep_csv(io::stdout().lock(), &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_profile(spec: &str) -> Result<PerfProfile> {
    PerfProfile::resolve(spec, Path::new(".")).map_err(|e| invalid(format!("profile: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanInput {
    #[serde(default)]
    pool_size: Option<u32>,
    #[serde(default = "unit")]
    headroom: f64,
    tiers: Vec<PlanTier>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanTier {
    id: TierId,
    #[serde(default)]
    name: String,
    ttft_target_ms: f64,
    tpot_target_ms: f64,
    prompt_len: f64,
    output_len: f64,
    rps: f64,
    /// Served rate in the previous window; defaults to the demand.
    #[serde(default)]
    served_rps: Option<f64>,
}

fn plan(profile: &str, demands: &Path, pool: Option<u32>, repeat: u32) -> Result<()> {
    let p = load_profile(profile)?;
    let src =
        fs::read_to_string(demands).with_context(|| format!("reading {}", demands.display()))?;
    let input: PlanInput =
        serde_json::from_str(&src).map_err(|e| invalid(format!("demands: {e}")))?;
    let pool = pool
        .or(input.pool_size)
        .ok_or_else(|| invalid("pool: give --pool or pool_size"))?;
    if pool == 0 {
        bail!(invalid("pool: must be at least 1"));
    }
    let tiers: Vec<SloTier> = input
        .tiers
        .iter()
        .map(|t| SloTier::new(t.id, t.name.clone(), t.ttft_target_ms, t.tpot_target_ms))
        .collect();
    tpsim::trace::validate_tiers(&tiers).map_err(|e| invalid(format!("tiers: {e}")))?;
    let envs = EnvelopeTable::build(
        &p,
        &tiers,
        |id| {
            let t = input
                .tiers
                .iter()
                .find(|t| t.id == id)
                .expect("tier listed");
            (t.prompt_len, t.output_len)
        },
        input.headroom,
    )
    .map_err(|e| invalid(format!("envelopes: {e}")))?;
    let demands: Vec<TierDemand> = input
        .tiers
        .iter()
        .map(|t| TierDemand::new(t.id, t.rps, t.served_rps.unwrap_or(t.rps)))
        .collect();
    let opts = GreedyOptions::default();
    let mut times = Vec::new();
    let mut cfg = None;
    for _ in 0..repeat.max(1) {
        let t0 = Instant::now();
        let c = plan_window(&envs, &tiers, &demands, pool, None, &opts);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        cfg = Some(c);
    }
    times.sort_by(f64::total_cmp);
    println!(
        "{}",
        serde_json::to_string_pretty(&cfg.expect("at least one run"))?
    );
    println!(
        "planned {pool} GPUs, {} tiers: median {:.3} ms over {} runs",
        tiers.len(),
        times[times.len() / 2],
        times.len()
    );
    Ok(())
}

/// Regroups the GPUs of `old`, in listed order, into groups of `new_tp`.
/// Each request lands in one new group, round-robin in listed order.
fn regroup(old: &[KvLayout], new_tp: u32, kvb: u64) -> Result<MigrationPlan> {
    let gpus: Vec<u32> = old.iter().flat_map(|l| l.gpus.iter().copied()).collect();
    if new_tp == 0 || !gpus.len().is_multiple_of(new_tp as usize) {
        bail!(invalid(format!(
            "new_tp: {} GPUs do not split into groups of {new_tp}",
            gpus.len()
        )));
    }
    let heads = old.first().map_or(0, |l| l.total_heads);
    let news: Vec<KvLayout> = gpus
        .chunks(new_tp as usize)
        .map(|c| KvLayout::new(c.to_vec(), heads))
        .collect();
    if news.len() == 1 {
        return plan_repartition(old, &news[0], kvb).map_err(|e| invalid(format!("layout: {e}")));
    }
    let mut transfers = Vec::new();
    for (k, new) in news.iter().enumerate() {
        let mut i = 0usize;
        let part: Vec<KvLayout> = old
            .iter()
            .map(|l| {
                let reqs = l
                    .requests
                    .iter()
                    .filter(|_| {
                        i += 1;
                        (i - 1) % news.len() == k
                    })
                    .copied()
                    .collect();
                KvLayout::new(l.gpus.clone(), l.total_heads).with_requests(reqs)
            })
            .collect();
        transfers.extend(
            plan_relayout(&part, new, kvb)
                .map_err(|e| invalid(format!("layout: {e}")))?
                .transfers,
        );
    }
    Ok(MigrationPlan {
        transfers,
        ..Default::default()
    })
}

fn migrate_plan(layout: &Path, new_tp: u32, profile: &str, out: Option<&Path>) -> Result<()> {
    let p = load_profile(profile)?;
    let src =
        fs::read_to_string(layout).with_context(|| format!("reading {}", layout.display()))?;
    let old: Vec<KvLayout> =
        serde_json::from_str(&src).map_err(|e| invalid(format!("layout: {e}")))?;
    if old.is_empty() {
        bail!(invalid("layout: no groups"));
    }
    let params = &p.meta.migration;
    let plan = regroup(&old, new_tp, p.meta.kv_bytes_per_token_per_head)?.with_prediction(params);
    let json = serde_json::to_string_pretty(&plan)? + "\n";
    match out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => print!("{json}"),
    }
    let pred = plan.predicted.expect("filled by with_prediction");
    println!(
        "{} transfers, {} bytes",
        plan.transfers.len(),
        plan.total_bytes()
    );
    println!("{:<12} {:>14}", "strategy", "latency_ms");
    for (name, ms) in [
        ("per_page", pred.per_page_ms),
        ("aggregate", pred.aggregate_ms),
        ("pipelined", pred.pipelined_ms),
    ] {
        println!("{name:<12} {ms:>14.3}");
    }
    Ok(())
}

fn gen_trace(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).map_err(experiment::ExperimentError::from)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let r = cfg
        .resolve(&base_dir(config))
        .map_err(experiment::ExperimentError::from)?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &r.trace)?;
    write_file(out, &buf)?;
    println!("wrote {} requests to {}", r.trace.len(), out.display());
    Ok(())
}
