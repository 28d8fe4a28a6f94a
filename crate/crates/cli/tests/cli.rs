use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use switching_mdp_cli::csvio::parse_table;
use switching_mdp_cli::{run, CliError, Command, RunOptions};
use tempfile::TempDir;

const REFERENCE: &str = r#"
x0 = [0.0]
y0 = 1
T = 1.0
dt = 0.01

[model]
name = "two-state-constant"

[analyze]
knots = 5

[simulate]
eps = 0.01
seed = 1

[rate]
path_file = "path.csv"

[mc]
eps_grid = [0.08, 0.04]
a = 1.0
n_paths = 600
seed = 3
target_rate = true

[validate]
grid_points = 21
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn opts(workers: usize, out: &Path) -> RunOptions {
    RunOptions {
        workers,
        seed: None,
        out: Some(out.to_path_buf()),
    }
}

fn table(path: &Path) -> switching_mdp_cli::csvio::Table {
    parse_table(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Rows of a file that may hold `inf` or `NaN`.
fn raw_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn analyze_reports_the_constant_invariant_measure() {
    let (dir, cfg) = setup(REFERENCE);
    let files = run(Command::Analyze, &cfg, &opts(1, dir.path())).unwrap();
    let t = table(&files[0]);
    assert_eq!(t.rows.len(), 5);
    let (m1, m2) = (t.column("mu_1").unwrap(), t.column("mu_2").unwrap());
    let (p1, p2) = (t.column("phi_1_1").unwrap(), t.column("phi_2_1").unwrap());
    let lam = t.column("lambda_1_1").unwrap();
    for row in &t.rows {
        assert!((row[m1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((row[m2] - 1.0 / 3.0).abs() < 1e-12);
        assert!((row[p1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((row[p2] + 2.0 / 3.0).abs() < 1e-12);
        assert!((row[lam] - 4.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn analyze_regime_constant_drift_has_zero_phi() {
    let cfg_text = REFERENCE.replace(
        "name = \"two-state-constant\"",
        "name = \"two-state-constant\"\nparams = { b1 = 0.2, b2 = 0.2 }",
    );
    let (dir, cfg) = setup(&cfg_text);
    let files = run(Command::Analyze, &cfg, &opts(1, dir.path())).unwrap();
    let t = table(&files[0]);
    let phi: Vec<usize> = (0..t.columns.len())
        .filter(|&k| t.columns[k].starts_with("phi_"))
        .collect();
    assert_eq!(phi.len(), 2);
    for row in &t.rows {
        for &k in &phi {
            assert_eq!(row[k], 0.0);
        }
    }
}

#[test]
fn outputs_carry_hash_and_seed() {
    let (dir, cfg) = setup(REFERENCE);
    let files = run(Command::Simulate, &cfg, &opts(1, dir.path())).unwrap();
    let first = fs::read_to_string(&files[0]).unwrap();
    let header = first.lines().next().unwrap();
    let hash = switching_mdp_cli::ExperimentConfig::parse(REFERENCE).unwrap().hash();
    assert_eq!(header, format!("# config_hash={hash} seed=1"));
    let files = run(Command::Analyze, &cfg, &opts(1, dir.path())).unwrap();
    let first = fs::read_to_string(&files[0]).unwrap();
    assert!(first.starts_with(&format!("# config_hash={hash} seed=none\n")));
}

#[test]
fn every_command_is_byte_identical_across_worker_counts() {
    let (dir, cfg) = setup(REFERENCE);
    // rate reads path.csv next to the config
    run(Command::Simulate, &cfg, &opts(1, dir.path())).unwrap();
    for command in [
        Command::Analyze,
        Command::Simulate,
        Command::Rate,
        Command::Mc,
        Command::Validate,
    ] {
        let one = dir.path().join(format!("{command:?}-1"));
        let eight = dir.path().join(format!("{command:?}-8"));
        let again = dir.path().join(format!("{command:?}-again"));
        let a = run(command, &cfg, &opts(1, &one)).unwrap();
        let b = run(command, &cfg, &opts(8, &eight)).unwrap();
        let c = run(command, &cfg, &opts(1, &again)).unwrap();
        for ((fa, fb), fc) in a.iter().zip(&b).zip(&c) {
            let (ba, bb, bc) = (fs::read(fa).unwrap(), fs::read(fb).unwrap(), fs::read(fc).unwrap());
            assert_eq!(ba, bb, "{command:?}: {}", fa.display());
            assert_eq!(ba, bc, "{command:?}: {}", fa.display());
        }
    }
}

#[test]
fn mc_reports_the_reference_target_rate() {
    let (dir, cfg) = setup(REFERENCE);
    let files = run(Command::Mc, &cfg, &opts(0, dir.path())).unwrap();
    let t = table(&files[0]);
    let last = t.rows.last().unwrap();
    let target = last[t.column("target_rate").unwrap()];
    assert!((target - 0.375).abs() < 1e-9, "{target}");
    assert_eq!(t.rows.len(), 2);
    assert_eq!(last[t.column("n_paths").unwrap()], 600.0);
    for row in &t.rows {
        let p = row[t.column("p_hat").unwrap()];
        let se = row[t.column("std_err").unwrap()];
        assert!((se - (p * (1.0 - p) / 600.0).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn rate_of_the_zero_path_is_zero() {
    let mut text = String::from("t,eta_1\n");
    for k in 0..=100 {
        text.push_str(&format!("{},0\n", k as f64 / 100.0));
    }
    let (dir, cfg) = setup(&REFERENCE.replace("path.csv", "zero.csv"));
    fs::write(dir.path().join("zero.csv"), text).unwrap();
    let files = run(Command::Rate, &cfg, &opts(1, dir.path())).unwrap();
    let value = raw_rows(&files[1]);
    assert_eq!(value[0][0], 0.0);
    assert_eq!(value[0][1], 1.0);
    assert!(value[0][2].is_nan());
}

#[test]
fn rate_of_a_straight_line_matches_the_quadratic_form() {
    let mut text = String::from("# hand-built\nt,eta_1\n");
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        text.push_str(&format!("{t},{}\n", 2.0 * t));
    }
    let (dir, cfg) = setup(&REFERENCE.replace("path.csv", "line.csv"));
    fs::write(dir.path().join("line.csv"), text).unwrap();
    let files = run(Command::Rate, &cfg, &opts(1, dir.path())).unwrap();
    let value = raw_rows(&files[1])[0][0];
    assert!((value - 1.5).abs() < 1e-9, "{value}");
    let knots = table(&files[0]);
    let c12 = knots.column("c_1_2").unwrap();
    for row in &knots.rows {
        assert!((row[c12] + 1.5).abs() < 1e-9);
    }
}

#[test]
fn simulated_paths_round_trip_into_rate() {
    let (dir, cfg) = setup(REFERENCE);
    run(Command::Simulate, &cfg, &opts(1, dir.path())).unwrap();
    let files = run(Command::Rate, &cfg, &opts(1, dir.path())).unwrap();
    let value = raw_rows(&files[1])[0][0];
    assert!(value.is_finite() && value > 0.0);

    // the deviation file is accepted as well and gives the same value
    let (dir2, cfg2) = setup(&REFERENCE.replace("path.csv", "deviation.csv"));
    run(Command::Simulate, &cfg2, &opts(1, dir2.path())).unwrap();
    let files2 = run(Command::Rate, &cfg2, &opts(1, dir2.path())).unwrap();
    let value2 = raw_rows(&files2[1])[0][0];
    assert!((value - value2).abs() <= 1e-9 * value, "{value} vs {value2}");
}

#[test]
fn different_seeds_give_different_paths_with_one_schema() {
    let (dir, cfg) = setup(REFERENCE);
    let mut o = opts(1, &dir.path().join("s1"));
    o.seed = Some(1);
    let a = run(Command::Simulate, &cfg, &o).unwrap();
    o.seed = Some(2);
    o.out = Some(dir.path().join("s2"));
    let b = run(Command::Simulate, &cfg, &o).unwrap();
    let (ta, tb) = (table(&a[0]), table(&b[0]));
    assert_eq!(ta.columns, tb.columns);
    assert_eq!(ta.columns, vec!["t", "x_1", "y"]);
    assert_ne!(ta.rows, tb.rows);
    let ja = table(&a[1]);
    assert_eq!(ja.columns, vec!["t", "from", "to"]);
}

#[test]
fn validate_reports_an_irreducible_zoo_model() {
    let (dir, cfg) = setup(REFERENCE);
    let files = run(Command::Validate, &cfg, &opts(1, dir.path())).unwrap();
    let t = table(&files[0]);
    let row = &t.rows[0];
    assert_eq!(row[t.column("samples").unwrap()], 21.0);
    assert_eq!(row[t.column("irreducible_everywhere").unwrap()], 1.0);
    assert!((row[t.column("min_invariant_mass").unwrap()] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn missing_blocks_and_files_map_to_exit_codes() {
    let (dir, cfg) = setup(
        "x0 = [0.0]\nT = 1.0\ndt = 0.1\n[model]\nname = \"two-state-constant\"\n[rate]\npath_file = \"nope.csv\"\n",
    );
    let err = run(Command::Mc, &cfg, &opts(1, dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = run(Command::Rate, &cfg, &opts(1, dir.path())).unwrap_err();
    assert!(matches!(err, CliError::Io { .. }));
    assert_eq!(err.exit_code(), 4);
    let err = run(Command::Analyze, &dir.path().join("absent.toml"), &opts(1, dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn numerical_failures_map_to_exit_code_three() {
    use switching_mdp::Error;
    for e in [
        Error::NotIrreducible { x: Some(vec![0.0]) },
        Error::Infeasible("x".into()),
        Error::ZetaViolated {
            x: vec![0.0],
            i: 0,
            j: 1,
            rate: 3.0,
            bound: 2.0,
        },
    ] {
        assert_eq!(CliError::core("ctx", e).exit_code(), 3);
    }
    assert_eq!(CliError::core("ctx", Error::UnknownModel("m".into())).exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_switching-mdp");
    let (dir, cfg) = setup(REFERENCE);
    let ok = Process::new(bin)
        .args(["analyze", "--workers", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("bin"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("bin/analyze.csv").exists());

    let (bad_dir, bad) = setup("x0 = [0.0]\nT = 1.0\ndt = 0.3\n[model]\nname = \"two-state-constant\"\n");
    let out = Process::new(bin).arg("analyze").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = Process::new(bin)
        .arg("analyze")
        .arg("--config")
        .arg(bad_dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}
