use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decumulation::control::ControlTables;
use tempfile::TempDir;

// 32² kernels spill about 7e-10 of their mass into the padding.
const SMALL: &str = "[numerics]\ngrid = 32\nwstar_coarse_grid = 32\nwstar_candidates = 9\nmax_wrap_mass = 1e-8\n";

fn decum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decum"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = decum(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn solve_small(tmp: &TempDir, extra: &str) -> PathBuf {
    let cfg = write(tmp.path(), "small.toml", &format!("{SMALL}{extra}"));
    let out = tmp.path().join("solve");
    ok(&["solve", "--config", s(&cfg), "--out-dir", s(&out)]);
    out
}

fn load_tables(path: &Path) -> ControlTables {
    ControlTables::read_binary(fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn smoke_solve_writes_feasible_controls_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = solve_small(&tmp, "");
    for f in ["controls.bin", "controls.csv", "solve_summary.csv", "wstar_history.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    load_tables(&out.join("controls.bin")).audit().unwrap();
    let manifest: toml::Table = toml::from_str(&fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["passed"].as_bool(), Some(true));
    assert!(manifest["diagnostics"]["solve"]["neg_mass"].as_float().unwrap() < 1e-6 / 30.0);
    assert_eq!(manifest["numerics"]["grid"].as_integer(), Some(32));
}

#[test]
fn manifest_reruns_bitwise() {
    let tmp = TempDir::new().unwrap();
    let first = solve_small(&tmp, "");
    let again = tmp.path().join("again");
    ok(&["solve", "--config", s(&first.join("manifest.toml")), "--out-dir", s(&again)]);
    for f in ["controls.bin", "solve_summary.csv", "wstar_history.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_stock_cap_gives_zero_fractions() {
    let tmp = TempDir::new().unwrap();
    let out = solve_small(&tmp, "[scenario]\np_max = 0.0\n");
    let t = load_tables(&out.join("controls.bin"));
    assert!(t.steps.iter().all(|st| st.p_star.iter().all(|&p| p == 0.0)));
}

#[test]
fn single_kappa_frontier_matches_solve() {
    let tmp = TempDir::new().unwrap();
    let sol = solve_small(&tmp, "");
    let cfg = tmp.path().join("small.toml");
    let fr = tmp.path().join("frontier");
    ok(&["frontier", "--config", s(&cfg), "--kappa", "0.866", "--out-dir", s(&fr)]);
    let row = &csv_rows(&fr.join("frontier.csv"))[0];
    let sum = &csv_rows(&sol.join("solve_summary.csv"))[0];
    // frontier: kappa,w_star,ew,es,value; summary: kappa,w_star,value,ew,es,...
    assert_eq!(row[1], sum[1]);
    assert_eq!(row[2], sum[3]);
    assert_eq!(row[3], sum[4]);
    assert_eq!(row[4], sum[2]);
}

#[test]
fn frontier_rows_are_ordered() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let fr = tmp.path().join("frontier");
    ok(&["frontier", "--config", s(&cfg), "--kappa", "10", "--kappa", "0.1", "--kappa", "1", "--out-dir", s(&fr)]);
    let rows = csv_rows(&fr.join("frontier.csv"));
    let es: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let ew: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    for i in 1..rows.len() {
        assert!(es[i] >= es[i - 1]);
        assert!(ew[i] <= ew[i - 1] + 1e-9, "{ew:?}");
    }
}

#[test]
fn simulate_is_reproducible_and_bengen_withdraws_forty() {
    let tmp = TempDir::new().unwrap();
    let sol = solve_small(&tmp, "");
    let controls = sol.join("controls.bin");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["simulate", "--controls", s(&controls), "--paths", "4000", "--seed", "9", "--out-dir", s(d)]);
    }
    for f in ["sim_percentiles.csv", "sim_heatmap.csv", "sim_summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bg = tmp.path().join("bengen");
    ok(&["simulate", "--bengen", "--paths", "4000", "--out-dir", s(&bg)]);
    let row = &csv_rows(&bg.join("sim_summary.csv"))[0];
    assert_eq!(row[0].parse::<f64>().unwrap(), 40.0);
    assert_eq!(row[8], "0");
}

#[test]
fn simulate_rejects_bad_control_files() {
    let tmp = TempDir::new().unwrap();
    let sol = solve_small(&tmp, "");
    let mut bytes = fs::read(sol.join("controls.bin")).unwrap();
    bytes[8] = 99;
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let out = decum(&["simulate", "--controls", s(&bad), "--out-dir", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let short = write(tmp.path(), "short.toml", "[scenario]\nhorizon = 10.0\nperiods = 10\n");
    let out = decum(&[
        "simulate",
        "--config",
        s(&short),
        "--controls",
        s(&sol.join("controls.bin")),
        "--out-dir",
        s(&tmp.path().join("y")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));
}

fn monthly_csv(n: usize, value: impl Fn(usize) -> (f64, f64)) -> String {
    let mut text = String::from("date,stock_real_return,bond_real_return\n");
    for i in 0..n {
        let (a, b) = value(i);
        text += &format!("{:04}-{:02},{a},{b}\n", 1950 + i / 12, i % 12 + 1);
    }
    text
}

#[test]
fn bootstrap_constant_series_and_presets() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "flat.csv", &monthly_csv(240, |_| (0.0, 0.0)));
    let out = tmp.path().join("boot");
    ok(&[
        "bootstrap", "--bengen", "--data", s(&data), "--paths", "300",
        "--blocksize-years", "0.5", "--blocksize-years", "1", "--blocksize-years", "2",
        "--out-dir", s(&out),
    ]);
    let rows = csv_rows(&out.join("boot_summary.csv"));
    assert_eq!(rows.len(), 3);
    for (r, tag) in rows.iter().zip(["0.5", "1", "2"]) {
        assert_eq!(r[0], tag);
        assert_eq!(r[1].parse::<f64>().unwrap(), 40.0);
        assert!(out.join(format!("boot_b{tag}y_summary.csv")).exists());
    }
    // Zero returns: wealth falls by 40 a year and debt accrues the spread.
    let mut w = 1000.0f64;
    for _ in 0..30 {
        w -= 40.0;
        if w < 0.0 {
            w *= 0.03f64.exp();
        }
    }
    for r in &rows {
        let es: f64 = r[2].parse().unwrap();
        assert!((es - w).abs() < 1e-9 * w.abs(), "{es} vs {w}");
    }
}

#[test]
fn bootstrap_reports_gap_position() {
    let tmp = TempDir::new().unwrap();
    let mut text = monthly_csv(150, |_| (0.01, 0.0));
    text = text.replace("1951-03,", "1951-05,");
    let data = write(tmp.path(), "gap.csv", &text);
    let out = decum(&["bootstrap", "--bengen", "--data", s(&data), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 16") && err.contains("1951-02"), "{err}");
}

#[test]
fn shipped_sample_data_bootstraps() {
    let tmp = TempDir::new().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample_returns.csv");
    let out = tmp.path().join("o");
    ok(&["bootstrap", "--bengen", "--data", s(&data), "--paths", "2000", "--out-dir", s(&out)]);
    let manifest: toml::Table = toml::from_str(&fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["inputs"]["months"].as_integer(), Some(1188));
}

#[test]
fn invalid_config_fails_before_compute() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[scenario]\nalpha = 2.0\n");
    let out = decum(&["solve", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("o").exists());
    let out = decum(&["simulate", "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["selftest", "--out-dir", s(tmp.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10, "{text}");
}

#[test]
fn failed_diagnostic_sets_exit_status_and_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "strict.toml", &SMALL.replace("max_wrap_mass = 1e-8", "max_wrap_mass = 1e-14"));
    let out_dir = tmp.path().join("o");
    let out = decum(&["solve", "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let manifest: toml::Table = toml::from_str(&fs::read_to_string(out_dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["passed"].as_bool(), Some(false));
    let failures = manifest["run"]["failures"].as_array().unwrap();
    assert!(failures[0].as_str().unwrap().contains("wrap mass"));
}
