use std::path::Path;
use std::process::{Command, Output};

use dnls_cli::output::sha256_hex;

fn dnls(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnls"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

fn digests(m: &toml::Table) -> Vec<(String, String)> {
    m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["name"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("[solver]\nepss = 1e-3\n", "epss"),
        ("[solver]\neps = \"small\"\n", "eps"),
        ("[solver]\nm = 2\n", "solver.m"),
        ("[evolve]\nintegrator = \"euler\"\n", "evolve.integrator"),
        ("[disorder]\nlo = 2.0\nhi = 1.0\n", "disorder.lo"),
    ] {
        let cfg = write(tmp.path(), "bad.toml", text);
        let cmd = if key.starts_with("evolve") { "evolve" } else { "solve" };
        let out = dnls(tmp.path(), &[cmd, "--config", &cfg, "--out", "o"]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("`{key}`")), "{err}");
    }
    let out = dnls(tmp.path(), &["solve", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unperturbed_solve_reports_stage_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[solver]\neps = 0.0\ndelta = 0.0\n");
    let out = dnls(tmp.path(), &["solve", "--config", &cfg, "--out", "o"]);
    assert_eq!(out.status.code(), Some(0));
    let m = manifest(&tmp.path().join("o"));
    assert_eq!(m["status"].as_str(), Some("ok"));
    assert_eq!(m["summary"]["stages"].as_integer(), Some(0));
    assert_eq!(m["summary"]["kappa"].as_float(), Some(0.0));
}

#[test]
fn constructed_resonance_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[solver]\nmax_radius = 4\n");
    assert_eq!(dnls(tmp.path(), &["solve", "--config", &cfg, "--out", "a"]).status.code(), Some(0));
    let omega = manifest(&tmp.path().join("a"))["summary"]["omega"][0].as_float().unwrap();
    // Put a neighboring site value on the solved frequency.
    let text = format!(
        "[solver]\nmax_radius = 4\ncondition_cap = 1e4\n[[disorder.override]]\nsite = [2]\nvalue = {omega:?}\n"
    );
    let cfg = write(tmp.path(), "r.toml", &text);
    let out = dnls(tmp.path(), &["solve", "--config", &cfg, "--out", "r"]);
    assert_eq!(out.status.code(), Some(3));
    let m = manifest(&tmp.path().join("r"));
    assert_eq!(m["status"].as_str(), Some("numerical_failure"));
    assert_eq!(m["failure"]["kind"].as_str(), Some("Resonant"));
    assert!(m["failure"]["condition"].as_float().unwrap() > 1e4);
}

#[test]
fn outputs_are_atomic_and_digested() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dnls(tmp.path(), &["solve", "--out", "o"]);
    assert_eq!(out.status.code(), Some(0));
    let dir = tmp.path().join("o");
    let m = manifest(&dir);
    let listed = digests(&m);
    assert!(listed.len() >= 3);
    for (name, digest) in &listed {
        assert_eq!(&sha256_hex(&std::fs::read(dir.join(name)).unwrap()), digest);
    }
    for entry in std::fs::read_dir(&dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(!name.ends_with(".tmp"), "stray temp file {name}");
        assert!(name == "manifest.toml" || listed.iter().any(|(n, _)| n == &name));
    }
    let stages = std::fs::read_to_string(dir.join("stages.csv")).unwrap();
    assert!(stages.starts_with("# command = solve\n"));
}

#[test]
fn reruns_reproduce_digests_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    for (dir, seed, threads) in [("a", "5", "1"), ("b", "5", "3"), ("c", "6", "1")] {
        let out = dnls(tmp.path(), &["solve", "--seed", seed, "--threads", threads, "--out", dir]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = digests(&manifest(&tmp.path().join("a")));
    let b = digests(&manifest(&tmp.path().join("b")));
    let c = digests(&manifest(&tmp.path().join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn bench_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("bench.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("N,"))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_strategies_agree_with_dense() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[bench]\nsizes = [0, 4, 6]\n");
    assert_eq!(dnls(tmp.path(), &["bench", "--config", &cfg, "--out", "o"]).status.code(), Some(0));
    let rows = bench_rows(&tmp.path().join("o"));
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
        let err: f64 = r[4].parse().unwrap();
        if r[0] == "0" {
            assert_eq!(r[1], "2");
            assert_eq!(err, 0.0, "{r:?}");
        }
        assert!(err <= 1e-8, "{r:?}");
    }
}

#[test]
fn bench_flags_missing_contraction() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[solver]\neps = 0.4\ndelta = 0.0\npatch_exponent = 0.5\nmax_radius = 2\n[bench]\nsizes = [4]\nsolve_radius = 2\n";
    let cfg = write(tmp.path(), "c.toml", text);
    assert_eq!(dnls(tmp.path(), &["bench", "--config", &cfg, "--out", "o"]).status.code(), Some(0));
    let rows = bench_rows(&tmp.path().join("o"));
    let cov = rows.iter().find(|r| r[2] == "covering").unwrap();
    assert_eq!(cov[4], "");
    assert_eq!(cov[5], "NoContraction");
}

#[test]
fn every_command_runs_on_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "\
[sweep]
count = 3
[spectral]
radius = 6
[wegner]
trials = 500
[measure]
scales = [2]
step = 0.02
[evolve]
t_end = 5.0
radius = 20
[bench]
sizes = [2]
";
    let cfg = write(tmp.path(), "c.toml", text);
    for (cmd, file) in [
        ("sweep", "sweep.csv"),
        ("spectral", "eigen.csv"),
        ("wegner", "wegner.csv"),
        ("theta-scan", "measures.csv"),
        ("dioph", "dioph.csv"),
        ("evolve", "profile.csv"),
        ("compare", "evolution.csv"),
    ] {
        let out = dnls(tmp.path(), &[cmd, "--config", &cfg, "--out", cmd]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let body = std::fs::read_to_string(tmp.path().join(cmd).join(file)).unwrap();
        assert!(body.starts_with(&format!("# command = {cmd}\n")), "{cmd}");
    }
    let m = manifest(&tmp.path().join("compare"));
    assert!(m["summary"]["max_error"].as_float().unwrap() <= 1e-6);
}

#[test]
fn unstable_integration_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[solver]\neps = 1.0\ndelta = 0.0\n[evolve]\nintegrator = \"rk4\"\ndt = 2.0\nt_end = 10.0\nsamples = 5\nradius = 4\namplitude = 0.5\n";
    let cfg = write(tmp.path(), "c.toml", text);
    let out = dnls(tmp.path(), &["evolve", "--config", &cfg, "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(manifest(&tmp.path().join("o"))["failure"]["kind"].as_str(), Some("Unstable"));
}
