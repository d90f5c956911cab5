use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn losstomo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_losstomo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = losstomo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn validate_builtin_and_broken_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["validate", "--topology", "f2"]);
    assert!(text.contains("valid"));

    // a second parent for a receiver that is already reached
    let mut file = serde_json::to_value(losstomo::fixtures::f1().to_file()).unwrap();
    let last = file["links"].as_array().unwrap().last().unwrap().clone();
    let extra = serde_json::json!({ "id": 99, "parent": file["nodes"][0], "child": last["child"] });
    file["links"].as_array_mut().unwrap().push(extra);
    fs::write(dir.path().join("bad.json"), file.to_string()).unwrap();
    let out = losstomo(dir.path(), &["validate", "--topology", "bad.json"]);
    assert!(!out.status.success());

    let out = losstomo(dir.path(), &["validate", "--topology", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_stats_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("loss.json"), r#"{"default":0.05,"links":{"5":0.2}}"#).unwrap();
    ok(
        d,
        &[
            "simulate",
            "--topology",
            "F2",
            "--loss",
            "loss.json",
            "--probes",
            "5000",
            "--seed",
            "11",
            "--out",
            "run",
        ],
    );
    for f in ["observations.bin", "observations.csv", "ground_truth.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(
        d,
        &[
            "stats",
            "--topology",
            "F2",
            "--obs",
            "run/observations.bin",
            "--out",
            "run",
        ],
    );
    let from_csv = ok(
        d,
        &[
            "stats",
            "--topology",
            "F2",
            "--obs",
            "run/observations.csv",
            "--out",
            "csv",
        ],
    );
    assert!(from_csv.contains("stats.csv"));
    assert_eq!(
        fs::read_to_string(d.join("run/stats.csv")).unwrap(),
        fs::read_to_string(d.join("csv/stats.csv")).unwrap()
    );

    ok(
        d,
        &[
            "estimate",
            "--topology",
            "F2",
            "--stats",
            "run/stats.csv",
            "--truth",
            "loss.json",
            "--out",
            "path",
        ],
    );
    ok(
        d,
        &[
            "estimate",
            "--topology",
            "F2",
            "--obs",
            "run/observations.bin",
            "--estimator",
            "decompose",
            "--out",
            "dec",
        ],
    );
    let path = fs::read_to_string(d.join("path/estimates.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(path.as_bytes());
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let truth: f64 = rec[2].parse().unwrap();
        let est: f64 = rec[3].parse().unwrap();
        assert!((truth - est).abs() < 0.03, "link {}: {est} vs {truth}", &rec[0]);
        rows += 1;
    }
    assert_eq!(rows, 4);
    assert!(d.join("path/path_rates.csv").exists());

    let dec = fs::read_to_string(d.join("dec/estimates.csv")).unwrap();
    let theta = |text: &str| -> Vec<f64> {
        csv::Reader::from_reader(text.as_bytes())
            .records()
            .map(|r| r.unwrap()[3].parse().unwrap())
            .collect()
    };
    for (a, b) in theta(&path).iter().zip(theta(&dec)) {
        assert!((a - b).abs() < 1e-9);
    }

    let text = ok(
        d,
        &[
            "oracle",
            "--topology",
            "F2",
            "--stats",
            "run/stats.csv",
            "--out",
            "oracle",
        ],
    );
    assert!(text.starts_with("loglik "));
    let ll: f64 = fs::read_to_string(d.join("oracle/loglik.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(ll < 0.0);
    let oracle = fs::read_to_string(d.join("oracle/oracle.csv")).unwrap();
    for (line, a) in oracle.lines().skip(1).zip(theta(&path)) {
        let b: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((a - b).abs() < 1e-4, "{line}");
    }
}

#[test]
fn oracle_refuses_large_topology() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["simulate", "--topology", "F3", "--probes", "100", "--out", "."],
    );
    ok(d, &["stats", "--topology", "F3", "--obs", "observations.bin"]);
    let out = losstomo(d, &["oracle", "--topology", "F3", "--stats", "stats.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_from_config_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("exp.json"),
        r#"{"topology":"F1","loss":{"default":0.05},"group_sizes":[300,600],"replications":4,"base_seed":9}"#,
    )
    .unwrap();
    ok(d, &["--config", "exp.json", "experiment", "--out", "a"]);
    ok(d, &["experiment", "--config", "exp.json", "--out", "b"]);
    for f in ["relative_errors.csv", "medians.csv", "run_log.txt"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }

    // the config also fills in topology, loss and seed for simulate
    ok(d, &["--config", "exp.json", "simulate", "--out", "sim"]);
    let truth = fs::read_to_string(d.join("sim/ground_truth.csv")).unwrap();
    assert!(truth.lines().count() > 1);

    let out = losstomo(d, &["experiment"]);
    assert_eq!(out.status.code(), Some(2));
}
