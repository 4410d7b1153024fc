//! Exit codes, messages and artifacts of the `slomo` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slomo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slomo")).args(args).env_remove("SLOMO_OUT_DIR").output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// Default config with `edit` applied line by line, written into `dir`.
fn config(dir: &Path, name: &str, edit: impl Fn(&str) -> Option<String>) -> PathBuf {
    let defaults = String::from_utf8(slomo(&["defaults"]).stdout).unwrap();
    let body: String = defaults.lines().filter_map(|l| edit(l).map(|l| l + "\n")).collect();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn keep(l: &str) -> Option<String> {
    Some(l.to_string())
}

fn set(key: &'static str, value: &'static str) -> impl Fn(&str) -> Option<String> {
    move |l: &str| Some(if l.starts_with(&format!("{key} =")) { format!("{key} = {value}") } else { l.to_string() })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", |l| (!l.starts_with("sigma =")).then(|| l.to_string()));
    let o = slomo(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("sigma"), "{}", text(&o));

    let cfg = config(dir.path(), "d.toml", set("delta", "-0.5"));
    let o = slomo(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("delta"), "{}", text(&o));
}

#[test]
fn blow_up_exits_3_with_last_good_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", set("lr_student", "1e200"));
    let o = slomo(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).contains("last good step"), "{}", text(&o));
}

#[test]
fn run_writes_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", keep);
    let out = dir.path().join("out");
    let o = slomo(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let steps = std::fs::read_to_string(out.join("steps.csv")).unwrap();
    let header: Vec<&str> = steps.lines().next().unwrap().split(',').collect();
    assert_eq!(header, slomo_cli::output::STEP_COLUMNS);
    assert_eq!(steps.lines().count(), 51);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["variant"], "slomo_fast");
    assert_eq!(summary["library_version"], env!("CARGO_PKG_VERSION"));
    assert!(summary["schedule"]["domain_order"].is_array());
    // the summary's config alone reproduces the run
    let cfg2 = dir.path().join("again.toml");
    let again: slomo_cli::config::FileConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    std::fs::write(&cfg2, again.to_toml()).unwrap();
    let o = slomo(&["run", "--config", s(&cfg2), "--out", s(&dir.path().join("again"))]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("steps.csv")).unwrap(), std::fs::read(dir.path().join("again/steps.csv")).unwrap());
    assert!(std::fs::read_to_string(out.join("forgetting.csv")).unwrap().starts_with("after_step,domain_id"));
}

#[test]
fn frozen_source_error_equals_weighted_rank_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", set("variant", "\"frozen_source\""));
    let out = dir.path().join("out");
    assert!(slomo(&["run", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(slomo(&["rank", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let rank = std::fs::read_to_string(out.join("rank.csv")).unwrap();
    let (mut errors, mut samples) = (0.0, 0.0);
    for line in rank.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (e, n): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        errors += e * n;
        samples += n;
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let overall = summary["report"]["overall_error"].as_f64().unwrap();
    assert!((errors / samples - overall).abs() < 1e-8, "{} vs {overall}", errors / samples);
}

#[test]
fn gradcheck_reports_and_fails_on_faults() {
    let o = slomo(&["gradcheck", "--eps", "2e-5", "--seeds", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).starts_with("gradcheck eps=2e-5 tolerance=1e-4 seeds=3"));
    let o = slomo(&["gradcheck", "--seeds", "2", "--inject-fault", "mse"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("mse at features["), "{}", text(&o));
}

#[test]
fn compare_same_config_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", keep);
    let out = dir.path().join("out");
    let o = slomo(&["compare", s(&cfg), s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let table = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 + 1);
    for line in table.lines().skip(1) {
        assert!(line.ends_with(",0.00000000e0"), "{line}");
    }
}

#[test]
fn compare_rejects_mismatched_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "a.toml", keep);
    let b = config(dir.path(), "b.toml", set("variants_per_group", "2"));
    let o = slomo(&["compare", s(&a), s(&b), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    assert!(t.contains("schedules differ") && t.contains("a.toml") && t.contains("b.toml"), "{t}");
}

#[test]
fn out_flag_beats_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let file_dir = dir.path().join("from-file");
    let cfg = dir.path().join("c.toml");
    let defaults = String::from_utf8(slomo(&["defaults"]).stdout).unwrap();
    let body = defaults.replace("out_dir = \"out\"", &format!("out_dir = {:?}", s(&file_dir)));
    std::fs::write(&cfg, body).unwrap();
    let env_dir = dir.path().join("from-env");
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_slomo"))
            .args(["rank", "--config", s(&cfg)])
            .args(extra)
            .env("SLOMO_OUT_DIR", &env_dir)
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(env_dir.join("rank.csv").exists() && !file_dir.exists());
    let flag_dir = dir.path().join("from-flag");
    assert!(run(&["--out", s(&flag_dir)]).status.success());
    assert!(flag_dir.join("rank.csv").exists());
    assert!(slomo(&["rank", "--config", s(&cfg)]).status.success());
    assert!(file_dir.join("rank.csv").exists());
}
