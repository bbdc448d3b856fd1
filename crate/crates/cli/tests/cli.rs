use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn evgame(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evgame"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = evgame(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    evgame(args, dir).status.code().expect("exit code")
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

/// Small scenario with a complete tensor cache.
fn prepared(seed: u64) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_path_buf();
    ok(&["generate", "--preset", "small", "--seed", &seed.to_string(), "--out", "s.json"], &d);
    ok(&["tensor", "--scenario", "s.json", "--cache", "t.bin"], &d);
    (dir, d)
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let first = ok(&["generate", "--preset", "paper-default", "--seed", "42", "--out", "a.json"], d);
    ok(&["generate", "--preset", "paper-default", "--seed", "42", "--out", "b.json"], d);
    ok(&["generate", "--preset", "paper-default", "--seed", "43", "--out", "c.json"], d);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.json")).unwrap());
    assert_eq!(field(&first, "profiles"), "30800");
    let scenario: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(scenario["aggregators"].as_array().unwrap().len(), 5);
    assert_eq!(scenario["horizon_slots"], 16);
}

#[test]
fn generate_from_config_file() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let config = serde_json::to_string(&evgame::GenerationConfig::small()).unwrap();
    std::fs::write(d.join("cfg.json"), config).unwrap();
    ok(&["generate", "--config", "cfg.json", "--seed", "9", "--out", "a.json"], d);
    ok(&["generate", "--preset", "small", "--seed", "9", "--out", "b.json"], d);
    assert_eq!(
        std::fs::read(d.join("a.json")).unwrap(),
        std::fs::read(d.join("b.json")).unwrap()
    );
}

#[test]
fn tensor_rerun_on_complete_cache_recomputes_nothing() {
    let (_dir, d) = prepared(3);
    let again = ok(&["tensor", "--scenario", "s.json", "--cache", "t.bin", "--workers", "2"], &d);
    assert_eq!(field(&again, "computed"), "0");
    let fresh = ok(&["tensor", "--scenario", "s.json", "--cache", "u.bin", "--workers", "2"], &d);
    assert_eq!(field(&again, "tensor_digest"), field(&fresh, "tensor_digest"));
    assert_eq!(
        std::fs::read(d.join("t.bin")).unwrap(),
        std::fs::read(d.join("u.bin")).unwrap()
    );
}

#[test]
fn pt_with_unit_alpha_matches_eut() {
    let (_dir, d) = prepared(3);
    ok(&["solve", "--scenario", "s.json", "--cache", "t.bin", "--model", "eut", "--out", "e.json"], &d);
    ok(
        &["solve", "--scenario", "s.json", "--cache", "t.bin", "--model", "pt", "--alpha", "1.0", "--out", "p.json"],
        &d,
    );
    let read = |name: &str| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(d.join(name)).unwrap()).unwrap()
    };
    let (e, p) = (read("e.json"), read("p.json"));
    assert_eq!(e["solution"]["strategies"], p["solution"]["strategies"]);
    assert_eq!(e["solution"]["epsilon"], p["solution"]["epsilon"]);
    assert_eq!(e["report"], p["report"]);
    assert_eq!(e["format"], "evgame-solution/1");
    assert_eq!(e["scenario_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn report_tables_carry_digests() {
    let (_dir, d) = prepared(3);
    let tensor = ok(&["tensor", "--scenario", "s.json", "--cache", "t.bin"], &d);
    let digest = field(&tensor, "tensor_digest").to_string();
    ok(&["solve", "--scenario", "s.json", "--cache", "t.bin", "--out", "e.json"], &d);
    ok(
        &["solve", "--scenario", "s.json", "--cache", "t.bin", "--model", "pt", "--alpha", "0.1,0.5,0.9", "--out", "p.json"],
        &d,
    );
    ok(
        &["report", "--scenario", "s.json", "--cache", "t.bin", "--solution", "e.json", "--solution", "p.json", "--out", "rep"],
        &d,
    );
    for name in ["savings.csv", "par.csv", "expected_load.csv", "slot1_load.csv"] {
        let text = std::fs::read_to_string(d.join("rep").join(name)).unwrap();
        assert!(text.contains(&format!("# tensor_digest={digest}")), "{name}");
        assert!(text.contains("# scenario_digest="), "{name}");
    }
    let load = std::fs::read_to_string(d.join("rep/expected_load.csv")).unwrap();
    let rows: Vec<&str> = load.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "slot,base_load,baseline,eut,pt_0.1_0.5_0.9");
    assert_eq!(rows.len(), 1 + 10);
    let savings = std::fs::read_to_string(d.join("rep/savings.csv")).unwrap();
    assert_eq!(savings.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3);
}

#[test]
fn alpha_sweep_writes_one_row_per_alpha() {
    let (_dir, d) = prepared(3);
    ok(
        &["solve", "--scenario", "s.json", "--cache", "t.bin", "--alpha-sweep", "0.25", "--out", "sweep.csv"],
        &d,
    );
    let text = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 4);
    let alphas: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(alphas, ["0.25", "0.5", "0.75", "1"]);
}

#[test]
fn exit_codes_distinguish_failures() {
    let (_dir, d) = prepared(3);
    // Usage error from argument parsing.
    assert_eq!(code(&["solve"], &d), 2);
    // Validation: bad preset, wrong alpha length, alpha out of range, bad beta.
    assert_eq!(code(&["generate", "--preset", "nope", "--out", "x.json"], &d), 3);
    let solve = ["solve", "--scenario", "s.json", "--cache", "t.bin", "--out", "x.json"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> { [&solve[..], extra].concat() };
    assert_eq!(code(&with(&["--model", "pt", "--alpha", "0.1,0.2"]), &d), 3);
    assert_eq!(code(&with(&["--model", "pt", "--alpha", "1.5"]), &d), 3);
    assert_eq!(code(&with(&["--beta", "1.0"]), &d), 3);
    std::fs::write(d.join("broken.json"), "{").unwrap();
    assert_eq!(code(&["tensor", "--scenario", "broken.json", "--cache", "b.bin"], &d), 3);
    // Missing tensor.
    assert_eq!(
        code(&["solve", "--scenario", "s.json", "--cache", "missing.bin", "--out", "x.json"], &d),
        4
    );
    // Cache built for a different scenario.
    ok(&["generate", "--preset", "small", "--seed", "4", "--out", "other.json"], &d);
    assert_eq!(
        code(&["solve", "--scenario", "other.json", "--cache", "t.bin", "--out", "x.json"], &d),
        5
    );
    // Missing scenario file.
    assert_eq!(code(&["tensor", "--scenario", "absent.json", "--cache", "b.bin"], &d), 5);
}

#[test]
fn report_rejects_foreign_solution() {
    let (_dir, d) = prepared(3);
    ok(&["solve", "--scenario", "s.json", "--cache", "t.bin", "--out", "e.json"], &d);
    ok(&["generate", "--preset", "small", "--seed", "4", "--out", "o.json"], &d);
    ok(&["tensor", "--scenario", "o.json", "--cache", "o.bin"], &d);
    assert_eq!(
        code(&["report", "--scenario", "o.json", "--cache", "o.bin", "--solution", "e.json", "--out", "rep"], &d),
        5
    );
}
