use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn demo() -> String {
    repo().join("configs/demo.toml").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tpsim(&[
            "simulate",
            "--config",
            &demo(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let rows = summary["comparison"]["rows"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["goodput"].as_f64().unwrap() > 0.0));
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = tpsim(&[
        "simulate",
        "--config",
        &demo(),
        "--out",
        out.to_str().unwrap(),
        "--policy",
        "static_tp2",
        "--seed",
        "5",
        "--switch-mode",
        "naive-reload",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("records_static_tp2.jsonl").exists());
    assert!(!out.join("records_adaptive.jsonl").exists());
}

#[test]
fn missing_profile_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(repo().join("configs/demo.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        src.replace("../profiles/a100-like.json", "nowhere.json"),
    )
    .unwrap();
    let o = tpsim(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("profile"), "{}", stderr(&o));
}

#[test]
fn bad_field_value_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(repo().join("configs/demo.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, src.replace("window_s = 1.0", "window_s = 0.0")).unwrap();
    let o = tpsim(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("engine.window_s"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = tpsim(&[
        "sweep",
        "--config",
        &demo(),
        "--out",
        dir.path().to_str().unwrap(),
        "--param",
        "rps_scale",
        "--values",
        "0.5,1",
        "--policy",
        "adaptive",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sweep_rps_scale.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("param,value,policy,goodput_rps"));
}

#[test]
fn single_value_sweep_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = tpsim(&[
        "sweep",
        "--config",
        &demo(),
        "--out",
        d,
        "--param",
        "window",
        "--values",
        "1",
        "--policy",
        "adaptive",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tpsim(&[
        "simulate",
        "--config",
        &demo(),
        "--out",
        d,
        "--policy",
        "adaptive",
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("sweep_window.csv")).unwrap();
    let swept: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(
        summary["comparison"]["rows"][0]["goodput"]
            .as_f64()
            .unwrap(),
        swept
    );
}

fn plan_input(dir: &Path, rps: f64) -> PathBuf {
    let p = dir.join("demands.json");
    let tiers: Vec<serde_json::Value> = (0..4)
        .map(|i| {
            serde_json::json!({
                "id": i, "ttft_target_ms": 500.0 * (i + 1) as f64, "tpot_target_ms": 25.0 + 15.0 * i as f64,
                "prompt_len": 512.0, "output_len": 128.0, "rps": rps,
            })
        })
        .collect();
    fs::write(&p, serde_json::json!({ "tiers": tiers }).to_string()).unwrap();
    p
}

#[test]
fn plan_reports_timing() {
    let dir = tempfile::tempdir().unwrap();
    let p = plan_input(dir.path(), 30.0);
    let o = tpsim(&[
        "plan",
        "--demands",
        p.to_str().unwrap(),
        "--pool",
        "128",
        "--repeat",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("planned 128 GPUs, 4 tiers: median"));
}

#[test]
fn plan_zero_demand_and_empty_pool() {
    let dir = tempfile::tempdir().unwrap();
    let p = plan_input(dir.path(), 0.0);
    let o = tpsim(&[
        "plan",
        "--demands",
        p.to_str().unwrap(),
        "--pool",
        "4",
        "--repeat",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let json: serde_json::Value =
        serde_json::from_str(&text[..text.rfind("planned").unwrap()]).unwrap();
    let groups = json["groups"].as_array().unwrap();
    assert!(groups.iter().all(|g| g["tier_id"].is_null()), "{text}");
    let o = tpsim(&["plan", "--demands", p.to_str().unwrap(), "--pool", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn migrate_plan_merges_two_tp1_groups() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("layout.json");
    fs::write(
        &layout,
        r#"[{"gpus":[1],"total_heads":8,"requests":[[10,100]]},{"gpus":[2],"total_heads":8,"requests":[[20,200]]}]"#,
    )
    .unwrap();
    let out = dir.path().join("plan.json");
    let o = tpsim(&[
        "migrate-plan",
        "--layout",
        layout.to_str().unwrap(),
        "--new-tp",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let moves: Vec<(u64, u64, u64, u64, u64)> = plan["transfers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| {
            let f = |k: &str| t[k].as_u64().unwrap();
            (
                f("src_gpu"),
                f("dst_gpu"),
                f("request_id"),
                f("head_lo"),
                f("head_hi"),
            )
        })
        .collect();
    // Heads 0-3 of GPU-2's request move to GPU-1 and heads 4-7 of GPU-1's to GPU-2.
    assert_eq!(moves, vec![(1, 2, 10, 4, 8), (2, 1, 20, 0, 4)]);
    for s in ["per_page", "aggregate", "pipelined"] {
        assert!(stdout(&o).contains(s));
    }

    let o = tpsim(&[
        "migrate-plan",
        "--layout",
        layout.to_str().unwrap(),
        "--new-tp",
        "1",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 transfers"));
    let o = tpsim(&[
        "migrate-plan",
        "--layout",
        layout.to_str().unwrap(),
        "--new-tp",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn migrate_plan_five_gigabytes() {
    // GPU-0 sends heads 4-7 of one request to GPU-1: 4 heads * 16 KiB per
    // token per head * ctx = 5 GiB from a single source.
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("layout.json");
    let ctx = (5u64 << 30) / (4 * 16384);
    fs::write(
        &layout,
        format!(r#"[{{"gpus":[0],"total_heads":8,"requests":[[1,{ctx}]]}},{{"gpus":[1],"total_heads":8}}]"#),
    )
    .unwrap();
    let out = dir.path().join("plan.json");
    let o = tpsim(&[
        "migrate-plan",
        "--layout",
        layout.to_str().unwrap(),
        "--new-tp",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(
        plan["transfers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["bytes"].as_u64().unwrap())
            .sum::<u64>(),
        5 << 30
    );
    let p = &plan["predicted"];
    assert!(p["pipelined_ms"].as_f64().unwrap() <= 50.0, "{p}");
    assert!(p["per_page_ms"].as_f64().unwrap() >= 5000.0, "{p}");
}

#[test]
fn derive_slos_orders_tiers() {
    let o = tpsim(&["derive-slos", "--prompt-len", "512", "--output-len", "128"]);
    assert!(o.status.success(), "{}", stderr(&o));
    #[derive(serde::Deserialize)]
    struct Tier {
        ttft_target_ms: f64,
        tpot_target_ms: f64,
    }
    #[derive(serde::Deserialize)]
    struct Tiers {
        tiers: Vec<Tier>,
    }
    let t: Tiers = toml::from_str(&stdout(&o)).unwrap();
    assert_eq!(t.tiers.len(), 2);
    assert!(t.tiers[0].ttft_target_ms < t.tiers[1].ttft_target_ms);
    assert!(t.tiers[0].tpot_target_ms < t.tiers[1].tpot_target_ms);
    let o = tpsim(&[
        "derive-slos",
        "--prompt-len",
        "512",
        "--output-len",
        "128",
        "--scale",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_trace_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        let o = tpsim(&[
            "gen-trace",
            "--config",
            &demo(),
            "--seed",
            "9",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(!fs::read(&a).unwrap().is_empty());
}

#[test]
fn export_profile_matches_bundled_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let o = tpsim(&[
        "export-profile",
        "--name",
        "a100-like",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(&out).unwrap(),
        fs::read(repo().join("profiles/a100-like.json")).unwrap()
    );
    let o = tpsim(&[
        "export-profile",
        "--name",
        "tpu",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
