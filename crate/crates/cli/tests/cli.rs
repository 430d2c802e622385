use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use impest_core::measurements::{load_csv, Kind};
use impest_core::network::Feeder;
use impest_core::powerflow::{self, PfOptions};
use impest_core::synth::eltf_like;
use tempfile::TempDir;

fn impest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impest")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 10] = [
    "--set",
    "fixture=twenty_bus",
    "--set",
    "simulate.steps=40",
    "--set",
    "simulate.train_steps=10",
    "--set",
    "simulate.validation_steps=4",
    "--set",
    "seed=11",
];

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    impest(&args)
}

#[test]
fn usage_errors_exit_64() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&impest(&["frobnicate"])), 64);
    assert_eq!(code(&impest(&["estimate", "--out", out, "--set", "mode=banana"])), 64);
    assert_eq!(code(&impest(&["simulate", "--out", out, "--set", "fixture=twenty_bus"])), 64, "seed is mandatory");
    assert_eq!(code(&impest(&["estimate", "--out", out, "--set", "feeder=/nonexistent.json"])), 64);
    assert_eq!(code(&impest(&["estimate", "--out", out, "--set", "no_such_key=1"])), 64);
}

#[test]
fn reduce_prints_counts_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.json");
    eltf_like(7).save(&raw).unwrap();
    let first = dir.path().join("a");
    let o = impest(&["reduce", "--in", raw.to_str().unwrap(), "--out", first.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("buses 906 -> 109"), "{}", stdout(&o));
    let reduced = first.join("feeder_reduced.json");
    let second = dir.path().join("b");
    let o = impest(&["reduce", "--in", reduced.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("buses 109 -> 109"));
    assert_eq!(fs::read(reduced).unwrap(), fs::read(second.join("feeder_reduced.json")).unwrap());
}

#[test]
fn reduce_rejects_invalid_feeder() {
    let dir = TempDir::new().unwrap();
    let mut f = eltf_like(7);
    f.branches[3].to = "nowhere".into();
    let raw = dir.path().join("bad.json");
    f.save(&raw).unwrap();
    let o = impest(&["reduce", "--in", raw.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&simulate(&a, &[])), 0);
    assert_eq!(code(&simulate(&b, &[])), 0);
    assert_eq!(code(&simulate(&c, &["--set", "seed=12"])), 0);
    for name in ["train.csv", "validation.csv", "validation_clean.csv", "feeder_input.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_ne!(fs::read(a.join("train.csv")).unwrap(), fs::read(c.join("train.csv")).unwrap());
}

#[test]
fn simulate_splits_200_plus_10() {
    let dir = TempDir::new().unwrap();
    let o = simulate(
        dir.path(),
        &["--set", "simulate.steps=240", "--set", "simulate.train_steps=200", "--set", "simulate.validation_steps=10"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("210 steps -> 200 train + 10 validation"));
    let train = load_csv(&dir.path().join("train.csv")).unwrap();
    let val = load_csv(&dir.path().join("validation.csv")).unwrap();
    assert_eq!(train.timesteps().len(), 200);
    assert_eq!(val.timesteps().len(), 10);
}

#[test]
fn noiseless_simulation_matches_power_flow() {
    let dir = TempDir::new().unwrap();
    let o = simulate(dir.path(), &["--set", "simulate.noisy=false", "--set", "simulate.aggregate=false"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(dir.path().join("validation.csv")).unwrap(),
        fs::read(dir.path().join("validation_clean.csv")).unwrap()
    );
    let f = Feeder::load(&dir.path().join("feeder_true.json")).unwrap();
    let ms = load_csv(&dir.path().join("validation.csv")).unwrap();
    let steps = ms.timesteps();
    let sol = powerflow::solve(&f, &ms.injections(&f), &PfOptions::default()).unwrap();
    let topo = f.topology();
    let mut checked = 0;
    for s in ms.samples.iter().filter(|s| s.kind == Kind::Vm) {
        let k = steps.iter().position(|&t| t == s.timestep).unwrap();
        let user = f.user(&s.user_id).unwrap();
        let bi = topo.bus_index[&user.bus];
        let p = f.buses[bi].phases.position(s.phase).unwrap();
        let v = sol.steps[k].bus_voltage[bi][p].norm();
        assert!((v - s.value).abs() / f.base_voltage_v < 1e-10, "{} vs {}", v, s.value);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn estimate_and_validate_pipeline() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = simulate(
        dir.path(),
        &["--set", "simulate.noisy=false", "--set", "simulate.aggregate=false", "--set", "simulate.length_perturbation=0"],
    );
    assert_eq!(code(&o), 0);
    let o = impest(&["estimate", "--out", out, "-v", "--set", "mode=lle", "--set", "build.length_prior=false"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("estimate.json")).unwrap()).unwrap();
    assert!(summary["objective"].as_f64().unwrap() < 1e-6, "{summary}");
    let log = fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    assert!(log.starts_with("iter,objective"));
    assert!(log.lines().count() > 1);
    assert!(dir.path().join("feeder_est.json").exists());

    let o = impest(&["validate", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pf_source"], "clean");
    for name in ["pf_validation", "cumulative_impedance", "se_objective"] {
        assert!(dir.path().join("tables").join(format!("{name}.csv")).exists());
        assert!(dir.path().join("figures").join(format!("{name}.svg")).exists());
    }
}

#[test]
fn estimate_without_verbose_writes_no_log() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&simulate(dir.path(), &["--set", "simulate.noisy=false"])), 0);
    let o = impest(&["estimate", "--out", out, "--set", "mode=lle"]);
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("iterations.csv").exists());
}

#[test]
fn identity_feeders_give_zero_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&simulate(dir.path(), &[])), 0);
    let truth = dir.path().join("feeder_true.json");
    let o = impest(&["validate", "--out", out, "--set", &format!("estimated={}", truth.display())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for d in report["pf"]["diffs"].as_array().unwrap() {
        assert_eq!(d["abs_pu"].as_f64().unwrap(), 0.0);
    }
    for e in report["cumulative"].as_array().unwrap() {
        assert_eq!(e["r"].as_f64().unwrap(), 0.0);
        assert_eq!(e["x"].as_f64().unwrap(), 0.0);
    }
    let s = &report["summaries"];
    for key in ["pf_abs_diff_pu", "cumulative_r_pct", "cumulative_x_pct"] {
        for q in ["min", "p25", "median", "p75", "p95", "max"] {
            assert_eq!(s[key][q].as_f64().unwrap(), 0.0, "{key}.{q}");
        }
    }
}

#[test]
fn report_regenerates_identically() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&simulate(dir.path(), &[])), 0);
    let truth = dir.path().join("feeder_true.json");
    assert_eq!(code(&impest(&["validate", "--out", out, "--set", &format!("estimated={}", truth.display())])), 0);
    let snapshot = |sub: &str, name: &str| fs::read(dir.path().join(sub).join(name)).unwrap();
    let before = (snapshot("tables", "pf_validation.csv"), snapshot("figures", "pf_validation.svg"));
    fs::remove_dir_all(dir.path().join("tables")).unwrap();
    fs::remove_dir_all(dir.path().join("figures")).unwrap();
    assert_eq!(code(&impest(&["report", out])), 0);
    assert_eq!(before, (snapshot("tables", "pf_validation.csv"), snapshot("figures", "pf_validation.svg")));
    let header = String::from_utf8(snapshot("tables", "cumulative_impedance.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "series,count,min,p25,median,p75,p95,max");
}

#[test]
fn noisy_pf_source_is_flagged() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&simulate(dir.path(), &[])), 0);
    fs::remove_file(dir.path().join("validation_clean.csv")).unwrap();
    let truth = dir.path().join("feeder_true.json");
    assert_eq!(code(&impest(&["validate", "--out", out, "--set", &format!("estimated={}", truth.display())])), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pf_source"], "noisy");
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"seed": 3, "fixture": "twenty_bus", "simulate": {"steps": 30, "train_steps": 8, "validation_steps": 2}}"#,
    )
    .unwrap();
    let o = impest(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "simulate.train_steps=6",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("8 steps -> 6 train + 2 validation"));
}
