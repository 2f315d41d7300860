use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use forcebench::dataio::read_dataset;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forcebench")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "stderr: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn gen_data_round_trips_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fbch");
    let b = dir.path().join("b.fbch");
    let args = ["gen-data", "--scenario", "picontrol", "--members", "1", "--months", "24", "--seed", "4"];
    ok(&[&args[..], &["--out", p(&a)]].concat());
    ok(&[&args[..], &["--out", p(&b)]].concat());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let d = read_dataset(&a).unwrap();
    assert_eq!(d.n_months(), 24);
    assert_eq!(d.members.len(), 1);
    assert_eq!(d.name, "picontrol");
}

#[test]
fn evaluate_against_itself_reports_zero_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.fbch");
    ok(&["gen-data", "--scenario", "low", "--months", "48", "--n-lat", "6", "--n-lon", "12", "--out", p(&d)]);
    let report = dir.path().join("report");
    ok(&["evaluate", "--pred", p(&d), "--target", p(&d), "--metrics", "rmse,nrmse,mape", "--region", "global,land", "--report", p(&report)]);
    let mut rdr = csv::Reader::from_path(report.join("metrics.csv")).unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let value: f64 = rec[4].parse().unwrap();
        assert_eq!(value, 0.0, "{rec:?}");
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let out = run(&["gen-data", "--scenario", "low", "--bogus", "1", "--out", "x.fbch"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fbch");
    let out = run(&["evaluate", "--pred", p(&missing), "--target", p(&missing), "--report", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "io-error");

    let out = run(&["gen-data", "--scenario", "nope", "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "unknown-scenario");

    let junk = dir.path().join("junk.fbch");
    fs::write(&junk, b"not a container").unwrap();
    let out = run(&["rollout", "--params", p(&junk), "--scenario", "low", "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "format-error");
}

#[test]
fn help_documents_every_flag() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--train", "--lambda", "--horizons", "--steps", "--seed", "--ablate", "--out", "--config", "--no-flow",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 0.8]"));
    assert!(text.contains("[default: 1,6,12]"));
    for sub in ["gen-data", "fit-mesmer", "rollout", "evaluate", "ablation-suite", "scenarios"] {
        ok(&[sub, "--help"]);
    }
    let listing = String::from_utf8(ok(&["scenarios"]).stdout).unwrap();
    assert!(listing.contains("overshoot"));
}

#[test]
fn config_file_supplies_flags_and_command_line_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\n[gen-data]\nscenario = \"high\"\nmonths = 36\nn-lat = 6\nn-lon = 12\n").unwrap();
    let a = dir.path().join("a.fbch");
    ok(&["gen-data", "--config", p(&cfg), "--months", "24", "--out", p(&a)]);
    let d = read_dataset(&a).unwrap();
    assert_eq!(d.name, "high");
    assert_eq!(d.n_months(), 24);
    assert_eq!(d.grid.shape(), (6, 12));
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let train_data = dir.path().join("train.fbch");
    ok(&["gen-data", "--scenario", "high", "--months", "60", "--n-lat", "6", "--n-lon", "12", "--out", p(&train_data)]);
    let model = dir.path().join("mesmer.fbch");
    ok(&["fit-mesmer", "--train", p(&train_data), "--order", "2", "--ref-years", "2", "--out", p(&model)]);

    let hyper = ["--steps", "20", "--flow-steps", "10", "--width", "8", "--models", "1", "--batch", "2", "--seed", "3"];
    let runs: Vec<_> = ["t1", "t2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            ok(&[&["train", "--train", p(&train_data), "--out", p(&out)], &hyper[..]].concat());
            out
        })
        .collect();
    for f in ["params.fbch", "log-det0.csv", "log-flow.csv", "config.json"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(runs[0].join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["keep_prob"], 0.8);
    assert_eq!(echo["horizons"], serde_json::json!([1, 6, 12]));
    assert!(fs::read_dir(runs[0].join("checkpoints")).unwrap().count() > 0);

    let params = runs[0].join("params.fbch");
    let roll = |name: &str| {
        let out = dir.path().join(name);
        ok(&["rollout", "--params", p(&params), "--scenario", p(&train_data), "--members", "2", "--months", "24", "--seed", "5", "--out", p(&out)]);
        out
    };
    let (r1, r2) = (roll("r1.fbch"), roll("r2.fbch"));
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let d = read_dataset(&r1).unwrap();
    assert_eq!((d.members.len(), d.n_months()), (2, 24));
}

#[test]
fn ablation_suite_runs_every_variant_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.fbch");
    ok(&["gen-data", "--scenario", "high", "--months", "48", "--n-lat", "6", "--n-lon", "12", "--out", p(&data)]);
    let out = dir.path().join("suite");
    let manifest = dir.path().join("suite.toml");
    fs::write(
        &manifest,
        format!(
            "[ablation-suite]\ntrain = [{:?}]\ntarget = {:?}\nout = {:?}\nsteps = 10\nwidth = 8\nmodels = 1\nbatch = 2\nno-flow = true\n",
            p(&data),
            p(&data),
            p(&out)
        ),
    )
    .unwrap();
    ok(&["ablation-suite", "--config", p(&manifest)]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for variant in ["ac_full", "ac_no_ghg", "ac_no_aero", "ac_no_o3"] {
        assert!(summary.contains(variant), "{variant}");
        assert!(out.join(variant).join("params.fbch").exists());
    }

    let out = run(&["ablation-suite", "--train", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
}
