use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qbm_cli::output::parse_header;
use qbm_cli::RunConfig;

const DRUDE: &str = r#"
[system]
mass = 1.0
omega_0 = 1.0
beta = 1.0

[bath]
kind = "drude"
eta = 0.2
omega_c = 5.0

[grid]
t_max = 4.0
n_steps = 80

[fock]
n_levels = 30

[initial]
x0 = 0.5
p0 = -0.2
"#;

fn qbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, cmd: &str, cfg: &Path, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out_dir = dir.join(out);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    (qbm(&args), out_dir)
}

/// Data rows of a CSV, skipping `#` comments.
fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn col(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let head: Vec<&str> = text.lines().find(|l| !l.starts_with('#')).unwrap().split(',').collect();
    let k = head.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows(path).iter().map(|r| r[k].parse().unwrap()).collect()
}

#[test]
fn uncoupled_coefficients_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &DRUDE.replace("eta = 0.2", "eta = 0.0"));
    let (o, out) = run_in(dir.path(), "coeffs", &cfg, "out", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for c in ["A1", "A2", "ImA3", "ImA4", "shift"] {
        assert!(col(&out.join("coefficients.csv"), c).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn missing_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &DRUDE.replace("omega_c = 5.0", ""));
    let (o, _) = run_in(dir.path(), "coeffs", &cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("omega_c") && err.contains("line"), "{err}");
}

#[test]
fn unregularized_ohmic_bath_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &DRUDE.replace("omega_c = 5.0", "omega_c = inf"));
    let (o, _) = run_in(dir.path(), "coeffs", &cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn coefficient_output_is_reproducible_and_carries_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", DRUDE);
    let (a, out_a) = run_in(dir.path(), "coeffs", &cfg, "a", &[]);
    let (b, out_b) = run_in(dir.path(), "coeffs", &cfg, "a", &["--threads", "1"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(out_a, out_b);
    let first = std::fs::read(out_a.join("coefficients.csv")).unwrap();
    let (c, out_c) = run_in(dir.path(), "coeffs", &cfg, "a", &["--threads", "3"]);
    assert!(c.status.success());
    assert_eq!(first, std::fs::read(out_c.join("coefficients.csv")).unwrap());

    let text = String::from_utf8(first).unwrap();
    let parsed = parse_header(&text).unwrap();
    let mut expected = RunConfig::from_toml(DRUDE).unwrap();
    expected.output.directory = out_a.clone();
    assert_eq!(parsed, expected);
    // 17 significant digits
    let v = &rows(&out_a.join("coefficients.csv"))[5][1];
    assert_eq!(v.split('e').next().unwrap().trim_start_matches('-').len(), 18, "{v}");
}

#[test]
fn equivalence_check_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", DRUDE);
    let (o, out) = run_in(dir.path(), "check-equivalence", &cfg, "eq", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("equivalence.csv")).len(), 4);
    let (strict, _) = run_in(dir.path(), "check-equivalence", &cfg, "eq2", &["--tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn equivalence_without_coupling_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &DRUDE.replace("eta = 0.2", "eta = 0.0"));
    let (o, out) = run_in(dir.path(), "check-equivalence", &cfg, "eq", &[]);
    assert!(o.status.success());
    assert!(col(&out.join("equivalence.csv"), "rel_deviation").iter().all(|d| *d == 0.0));
}

#[test]
fn route_deviation_shrinks_with_refinement() {
    let dir = tempfile::tempdir().unwrap();
    let mut dev = Vec::new();
    for n in [200, 400] {
        let text = DRUDE.replace("n_steps = 80", &format!("n_steps = {n}"));
        let cfg = write_config(dir.path(), &format!("c{n}.toml"), &text);
        let (o, out) = run_in(dir.path(), "check-equivalence", &cfg, &format!("o{n}"), &[]);
        assert!(o.status.success());
        let d = col(&out.join("equivalence.csv"), "rel_deviation");
        dev.push(d.iter().cloned().fold(0.0, f64::max));
    }
    assert!(dev[0] / dev[1] >= 3.5, "{dev:?}");
}

#[test]
fn closed_system_evolution_is_classical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &DRUDE.replace("eta = 0.2", "eta = 0.0"));
    let (o, out) = run_in(dir.path(), "evolve", &cfg, "ev", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = out.join("moments_fock.csv");
    let (t, x) = (col(&f, "t"), col(&f, "mean_x"));
    for (t, x) in t.iter().zip(&x) {
        assert!((x - (0.5 * t.cos() - 0.2 * t.sin())).abs() < 1e-8);
    }
}

#[test]
fn zero_drive_matches_absent_drive() {
    let dir = tempfile::tempdir().unwrap();
    let plain = write_config(dir.path(), "a.toml", DRUDE);
    let zero = DRUDE.replace(
        "[bath]",
        "[system.f1]\nkind = \"constant\"\nvalue = 0.0\n\n[system.f2]\nkind = \"zero\"\n\n[bath]",
    );
    let driven = write_config(dir.path(), "b.toml", &zero);
    let (a, out_a) = run_in(dir.path(), "evolve", &plain, "a", &[]);
    let (b, out_b) = run_in(dir.path(), "evolve", &driven, "b", &[]);
    assert!(a.status.success() && b.status.success());
    for f in ["coefficients.csv", "moments_fock.csv", "moments_gaussian.csv"] {
        assert_eq!(rows(&out_a.join(f)), rows(&out_b.join(f)), "{f}");
    }
}

#[test]
fn fock_and_gaussian_columns_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{DRUDE}\n[output]\ntables = [\"moments\", \"snapshots\"]\nsnapshot_stride = 20\n"),
    );
    let (o, out) = run_in(dir.path(), "evolve", &cfg, "ev", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for c in ["mean_x", "mean_p", "var_xx", "var_pp", "cov_xp"] {
        let a = col(&out.join("moments_fock.csv"), c);
        let b = col(&out.join("moments_gaussian.csv"), c);
        let d = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d < 1e-6, "{c}: {d}");
    }
    assert!(!out.join("coefficients.csv").exists());
    // nodes 0, 20, 40, 60, 80 with 30 x 30 entries each
    assert_eq!(rows(&out.join("snapshots.csv")).len(), 5 * 900);
}

const SAMPLE: &str = r#"
[mc]
n_traj = 2
base_seed = 42
"#;

#[test]
fn two_trajectory_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{DRUDE}{SAMPLE}"));
    let (a, out) = run_in(dir.path(), "sample", &cfg, "a", &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = std::fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(first.contains("# seeds: 42..43"));
    let (b, _) = run_in(dir.path(), "sample", &cfg, "a", &["--threads", "2"]);
    assert!(b.status.success());
    assert_eq!(first, std::fs::read_to_string(out.join("ensemble.csv")).unwrap());
    let (c, out_c) = run_in(dir.path(), "sample", &cfg, "c", &["--seed", "7"]);
    assert!(c.status.success());
    let other = std::fs::read_to_string(out_c.join("ensemble.csv")).unwrap();
    assert!(other.contains("# seeds: 7..8"));
    assert_ne!(rows(&out.join("ensemble.csv")), rows(&out_c.join("ensemble.csv")));
}

#[test]
fn sample_needs_two_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{DRUDE}{}", SAMPLE.replace("n_traj = 2", "n_traj = 1")));
    let (o, _) = run_in(dir.path(), "sample", &cfg, "a", &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn uncoupled_sample_has_exact_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}{SAMPLE}", DRUDE.replace("eta = 0.2", "eta = 0.0"));
    let cfg = write_config(dir.path(), "c.toml", &text);
    let (o, out) = run_in(dir.path(), "sample", &cfg, "a", &[]);
    assert!(o.status.success());
    let f = out.join("ensemble.csv");
    assert!(col(&f, "se_trace").iter().all(|s| *s == 0.0));
    assert!(col(&f, "trace_re").iter().all(|t| (t - 1.0).abs() < 1e-14));
}

#[test]
fn weak_coupling_ensemble_covers_the_master_equation() {
    let dir = tempfile::tempdir().unwrap();
    let text = DRUDE
        .replace("eta = 0.2", "eta = 0.05")
        .replace("n_steps = 80", "n_steps = 400")
        .replace("n_levels = 30", "n_levels = 16");
    let text = format!("{text}\n[mc]\nn_traj = 400\nbase_seed = 5\nnoise_scale = 0.3\nreference_steps = 40\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let (o, _) = run_in(dir.path(), "sample", &cfg, "a", &[]);
    assert!(
        o.status.success(),
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn diverging_ensemble_exits_with_check_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = DRUDE.replace("t_max = 4.0", "t_max = 10.0");
    let cfg = write_config(dir.path(), "c.toml", &format!("{text}\n[mc]\nn_traj = 20\n"));
    let (o, _) = run_in(dir.path(), "sample", &cfg, "a", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
