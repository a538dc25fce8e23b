use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use airfl::bounds::{theorem1_bound, BoundConstants};
use airfl::trace::RunTrace;

const BASE: &str = "\
dataset = synthetic
synthetic_features = 8
synthetic_classes = 5
synthetic_train = 500
synthetic_test = 200
m = 5
p = 2
T = 15
eval_every = 5
seeds = 3, 4
eta = 0.2
bound_probes = 0
";

fn airfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_config(dir: &Path, name: &str, text: &str) -> Output {
    let cfg = dir.join(format!("{name}.ini"));
    fs::write(&cfg, text).unwrap();
    let out = dir.join(name);
    airfl(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = run_config(dir.path(), name, BASE);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = read_outputs(&dir.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, read_outputs(&dir.path().join("b")));
}

#[test]
fn serial_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    for algo in ["charles", "cotaf", "fedavg"] {
        let text = format!("{BASE}algorithm = {algo}\n");
        assert!(run_config(
            dir.path(),
            &format!("par-{algo}"),
            &format!("{text}parallel = true\n")
        )
        .status
        .success());
        assert!(run_config(
            dir.path(),
            &format!("ser-{algo}"),
            &format!("{text}parallel = false\n")
        )
        .status
        .success());
        assert_eq!(
            read_outputs(&dir.path().join(format!("par-{algo}"))),
            read_outputs(&dir.path().join(format!("ser-{algo}")))
        );
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        ("T = 0\n", "`T`"),
        ("eta = -1\n", "`eta`"),
        ("lr = 0.1\n", "`lr`"),
    ] {
        let out = run_config(
            dir.path(),
            "bad",
            &format!("{BASE}{text}").replace("T = 15\n", ""),
        );
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(
        dir.path(),
        "nodata",
        "data_dir = /nonexistent/airfl\nT = 2\n",
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("i/o error"));
}

#[test]
fn table_lists_missing_cells_then_renders() {
    let dir = tempfile::tempdir().unwrap();
    let base = BASE
        .replace("p = 2\n", "")
        .replace("seeds = 3, 4\n", "seeds = 1\n");
    let sweep = dir.path().join("sweep.ini");
    fs::write(
        &sweep,
        format!("results_dir = res\naxis = p\nvalues = 1, 5\nalgorithms = charles, fedavg\nmodels = imperfect, perfect, no_fading\n{base}"),
    )
    .unwrap();
    let sweep = sweep.to_str().unwrap();

    let out = airfl(&["table", "--sweep", sweep]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing run outputs for 12 cells"));

    assert!(airfl(&["sweep", "--sweep", sweep]).status.success());
    let out = airfl(&["table", "--sweep", sweep]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("res/table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "algorithm,p,imperfect,perfect,no_fading");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("charles,1,"));
    assert!(lines[4].starts_with("fedavg,5,"));
}

#[test]
fn empty_sweep_prints_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("empty.ini");
    fs::write(&sweep, "results_dir = r\naxis = snr_db\nvalues =\nalgorithms = charles\nmodels = imperfect, perfect, no_fading\n").unwrap();
    let out = airfl(&["table", "--sweep", sweep.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("r/table.csv")).unwrap();
    assert_eq!(csv, "algorithm,snr_db,imperfect,perfect,no_fading\n");
}

#[test]
fn bound_report_matches_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}csi = perfect\nseeds = 3\n").replace("seeds = 3, 4\n", "");
    assert!(run_config(dir.path(), "perfect", &text).status.success());
    let trace_path = dir.path().join("perfect/seed-3.csv");

    // Same trace with four times the noise variance.
    let original = fs::read_to_string(&trace_path).unwrap();
    let trace = RunTrace::read(&trace_path).unwrap();
    let sigma = trace.meta.sigma_c2;
    let noisier = original.replace(
        &format!("# sigma_c2={sigma}\n"),
        &format!("# sigma_c2={}\n", 4.0 * sigma),
    );
    assert_ne!(noisier, original);
    let copy_dir = dir.path().join("noisier");
    fs::create_dir_all(&copy_dir).unwrap();
    fs::write(copy_dir.join("seed-3.csv"), noisier).unwrap();

    let c = BoundConstants {
        l: 1.0,
        sigma2: 0.5,
        g2: 0.25,
        f0_minus_fstar: 1.6,
    };
    let constants = dir.path().join("constants.ini");
    fs::write(&constants, c.to_kv()).unwrap();

    let report = dir.path().join("report");
    let out = airfl(&[
        "bound-report",
        "--trace",
        &format!("{}/*/seed-*.csv", dir.path().display()),
        "--constants",
        constants.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(report.join("bound_report.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 3);

    let noisy = &rows[1];
    let plain = &rows[2];
    assert!(noisy[0].contains("noisier") && plain[0].contains("perfect"));
    let f = |row: &Vec<String>, name: &str| -> f64 { row[col(name)].parse().unwrap() };
    assert_eq!(f(plain, "channel_est_err"), 0.0);
    assert_eq!(f(noisy, "channel_est_err"), 0.0);
    let ratio = f(noisy, "channel_noise_err") / f(plain, "channel_noise_err");
    assert!((ratio - 4.0).abs() < 1e-12, "{ratio}");

    let direct = theorem1_bound(&c, &trace, trace.meta.eta).unwrap();
    assert_eq!(f(plain, "total"), direct.total);
    assert_eq!(f(plain, "opt_err"), direct.opt_err);
    assert!(fs::read_to_string(report.join("bound_report.txt"))
        .unwrap()
        .contains("descent check"));
}
