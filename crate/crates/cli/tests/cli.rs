use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn erlang_lct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erlang-lct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = erlang_lct(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

fn dir(tmp: &TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn fit_kernel_writes_mixture_csv_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "fit");
    ok(&["fit-kernel", "--order", "6", "--out", &out]);
    let out = Path::new(&out);
    let mixture = fs::read_to_string(out.join("mixture.txt")).unwrap();
    let values: Vec<f64> = mixture.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 8, "rate and M + 1 = 7 coefficients");
    let sum: f64 = values[1..].iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    // 17 significant digits: rewriting the parsed values reproduces the file.
    let rewritten: String = values.iter().map(|v| format!("{v:.16e}\n")).collect();
    assert_eq!(rewritten, mixture);

    let (header, rows) = csv(&out.join("kernel.csv"));
    assert_eq!(header, ["t", "alpha", "alpha_hat", "error"]);
    assert_eq!(rows.len(), 1001);
    for r in &rows {
        assert_eq!(r[3], r[2] - r[1]);
    }

    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"fit-kernel\""));
    assert!(manifest.contains("\"status\": \"ok\""));
    assert!(manifest.contains("\"order\": \"6\""));
    assert!(manifest.contains(&format!("\"rate\": {:.16e}", values[0])));
    assert!(!out.join(".manifest.json.tmp").exists());
}

#[test]
fn fitted_mixture_round_trips_into_chain_simulation() {
    let tmp = TempDir::new().unwrap();
    let fit = dir(&tmp, "fit");
    ok(&[
        "fit-kernel",
        "--kernel",
        "folded-normal-sum:0.5,0.35,0.06,0.5,0.45,0.12",
        "--order",
        "12",
        "--out",
        &fit,
    ]);
    let mixture = format!("{fit}/mixture.txt");
    let run = |method: &str, name: &str| {
        let out = dir(&tmp, name);
        ok(&[
            "simulate-lct",
            "--model",
            "logistic-bifurcation",
            "--mixtures",
            &mixture,
            "--method",
            method,
            "--tol",
            "1e-10",
            "--points",
            "240",
            "--set",
            "sigma=2",
            "--out",
            &out,
        ]);
        csv(&Path::new(&out).join("trajectory.csv"))
    };
    let (header, explicit) = run("explicit-rk", "explicit");
    let (_, implicit) = run("tr-bdf2", "implicit");
    assert_eq!(header, ["t", "x1", "z1"]);
    assert_eq!(explicit.len(), 241);
    let worst = explicit
        .iter()
        .zip(&implicit)
        .map(|(a, b)| (a[1] - b[1]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "integrators differ by {worst}");
}

#[test]
fn unknown_model_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "x");
    let result = erlang_lct(&["simulate-lct", "--model", "no-such-model", "--out", &out]);
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("unknown model id"));
    assert!(!Path::new(&out).join("manifest.json").exists());
}

#[test]
fn unknown_model_parameter_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "x");
    let result = erlang_lct(&["simulate-dde", "--model", "fission", "--set", "nonsense=1", "--out", &out]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn config_file_keys_are_checked_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.cfg");
    fs::write(&config, "# fit settings\norder = 4\nmethod = theoretical\n").unwrap();
    let out = dir(&tmp, "fit");
    ok(&["fit-kernel", "--config", config.to_str().unwrap(), "--order", "5", "--out", &out]);
    let manifest = fs::read_to_string(Path::new(&out).join("manifest.json")).unwrap();
    assert!(manifest.contains("\"order\": \"5\""));
    assert!(manifest.contains("\"method\": \"theoretical\""));
    let lines = fs::read_to_string(Path::new(&out).join("mixture.txt")).unwrap().lines().count();
    assert_eq!(lines, 7);

    fs::write(&config, "order = 4\nbogus = 1\n").unwrap();
    let result = erlang_lct(&["fit-kernel", "--config", config.to_str().unwrap(), "--out", &out]);
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("unknown key 'bogus'"));

    fs::write(&config, "model.sigma = 3\n").unwrap();
    let result = erlang_lct(&["fit-kernel", "--config", config.to_str().unwrap(), "--out", &out]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn dde_trajectory_has_one_row_per_step() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "dde");
    ok(&[
        "simulate-dde",
        "--model",
        "logistic-manufactured",
        "--method",
        "explicit",
        "--dt",
        "0.05",
        "--out",
        &out,
    ]);
    let (header, rows) = csv(&Path::new(&out).join("trajectory.csv"));
    assert_eq!(header, ["t", "x1", "z1"]);
    assert_eq!(rows.len(), 481);
    assert!((rows[480][0] - 24.0).abs() < 1e-12);
    // x*(t) = 1 + exp(-(t/10)^2) up to the first-order error at this step (about 0.08).
    for r in &rows {
        let exact = 1.0 + (-(r[0] / 10.0).powi(2)).exp();
        assert!((r[1] - exact).abs() < 0.15);
    }
}

#[test]
fn convergence_tables() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "conv");
    ok(&[
        "convergence",
        "--orders",
        "4,8",
        "--state-points",
        "2400",
        "--dde-steps",
        "0.08,0.04",
        "--out",
        &out,
    ]);
    let fits = fs::read_to_string(Path::new(&out).join("fits.csv")).unwrap();
    let mut lines = fits.lines();
    assert_eq!(
        lines.next().unwrap(),
        "order,method,rate,horizon,kernel_error,state_error,converged,iterations"
    );
    assert_eq!(lines.count(), 4);
    let dde = fs::read_to_string(Path::new(&out).join("dde.csv")).unwrap();
    let rows: Vec<Vec<&str>> = dde.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][3], "");
    let ratio: f64 = rows[1][3].parse().unwrap();
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    let manifest = fs::read_to_string(Path::new(&out).join("manifest.json")).unwrap();
    assert!(manifest.contains("spearman_kernel_state"));
}

#[test]
fn single_point_scan_gives_one_row() {
    let tmp = TempDir::new().unwrap();
    let out = dir(&tmp, "bif");
    ok(&[
        "bifurcate",
        "--grid",
        "3",
        "--order",
        "16",
        "--simulate",
        "",
        "--spectrum",
        "true",
        "--out",
        &out,
    ]);
    let scan = fs::read_to_string(Path::new(&out).join("scan.csv")).unwrap();
    let lines: Vec<&str> = scan.lines().collect();
    assert_eq!(lines[0], "parameter,steady_state,max_real,stable,error");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].ends_with(",true,"));
    let (header, eigs) = csv(&Path::new(&out).join("spectrum/point_0.csv"));
    assert_eq!(header, ["re", "im"]);
    assert_eq!(eigs.len(), 18, "x plus 17 chain states");
    assert!(!Path::new(&out).join("simulations.csv").exists());
}

#[test]
fn monte_carlo_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, samples: &str| {
        let out = dir(&tmp, name);
        ok(&[
            "montecarlo",
            "--samples",
            samples,
            "--order",
            "10",
            "--output-intervals",
            "50",
            "--reference",
            "false",
            "--set",
            "tf=0.1",
            "--out",
            &out,
        ]);
        out
    };
    let a = run("a", "4");
    let b = run("b", "4");
    let stats = |d: &str| fs::read(Path::new(d).join("statistics.csv")).unwrap();
    assert_eq!(stats(&a), stats(&b));
    let (header, _) = csv(&Path::new(&a).join("statistics.csv"));
    assert_eq!(header.len(), 11);
    let manifest = fs::read_to_string(Path::new(&a).join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 2024"));

    // One sample: every statistic is that sample.
    let single = run("single", "1");
    let (_, rows) = csv(&Path::new(&single).join("statistics.csv"));
    for r in rows {
        assert!(r[1..6].iter().all(|v| *v == r[1]));
        assert!(r[6..11].iter().all(|v| *v == r[6]));
    }
}

#[test]
fn help_documents_csv_columns() {
    let out = ok(&["montecarlo", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("t,cn_mean,cn_p025,cn_p975,cn_min,cn_max"));
    assert!(text.contains("fission:"));
    let out = ok(&["fit-kernel", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("t,alpha,alpha_hat,error"));
}

#[test]
fn version_includes_describe_string() {
    let out = ok(&["--version"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("erlang-lct 0.1.0 ("), "{text}");
}
