use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmlab"))
        .args(args)
        .env("DSMLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = dsmlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

fn write_config(dir: &Path, topology: &str, name: &str) -> String {
    let path = dir.join(name);
    fs::write(
        &path,
        format!(
            r#"{{
                "topology": {topology},
                "dataset": {{"synthetic": {{"samples": 96, "features": 3, "seed": 1}}}},
                "objective": {{"kind": "linear_mse"}},
                "B": 4, "eta": 0.02, "K": 40, "seed": 2,
                "estimation": {{"samples": 16}},
                "outputs": "{}"
            }}"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn topology_and_spectral() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    let csv_s = csv.to_str().unwrap();
    let summary = ok(&["topology", "--kind", "clique", "-M", "4", "--out", csv_s]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["label"], "clique_M4_d3");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("2.5000000000000000e-1,"));

    let spec: serde_json::Value =
        serde_json::from_str(&ok(&["spectral", "--matrix", csv_s])).unwrap();
    assert_eq!(spec["gap"], 1.0);
    assert_eq!(spec["Q"], 2);

    ok(&[
        "topology", "--kind", "expander", "-M", "20", "-d", "4", "--seed", "7", "--out", csv_s,
    ]);
    let spec: serde_json::Value =
        serde_json::from_str(&ok(&["spectral", "--matrix", csv_s])).unwrap();
    assert!(spec["gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dsmlab(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = dsmlab(&[
        "topology",
        "--kind",
        "hypercube",
        "-M",
        "4",
        "--out",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"topology": {"kind": "clique", "M": 4}, "dataset": {"path": "/no/such.csv"}, "objective": {"kind": "linear_mse"}, "B": 1, "eta": 0.1, "K": 3}"#).unwrap();
    let out = dsmlab(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.path"));

    let out = dsmlab(&[
        "topology",
        "--kind",
        "undirected_ring_lattice",
        "-M",
        "5",
        "-d",
        "9",
        "--out",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_problems_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsmlab(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"[{"kind": "ring", "M": 4, "d": 2}, {"kind": "clique", "M": 4}]"#,
        "exp.json",
    );
    let index = ok(&["run", "--config", &cfg]);
    assert!(index.trim().ends_with("index.json"));
    let out_dir = dir.path().join("out");
    let text = ok(&["report", out_dir.to_str().unwrap()]);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("clique_M4_d3_B4"));
    let csv = ok(&["report", out_dir.to_str().unwrap(), "--format", "csv"]);
    assert!(csv.starts_with("run,"));
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "report",
        out_dir.to_str().unwrap(),
        "--format",
        "json",
    ]))
    .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn single_run_tools_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let ring = write_config(
        dir.path(),
        r#"{"kind": "ring", "M": 4, "d": 2}"#,
        "ring.json",
    );
    let clique = write_config(dir.path(), r#"{"kind": "clique", "M": 4}"#, "clique.json");

    ok(&["train", "--config", &clique, "--out", &d("clique.csv")]);
    let header = fs::read_to_string(d("clique.csv")).unwrap();
    assert!(header
        .starts_with("iter,loss_avg_time,loss_avg,loss_worst_local,dW_fro,dG_fro_sq,G_fro_sq"));
    assert_eq!(header.lines().count(), 41);

    ok(&[
        "estimate",
        "--config",
        &ring,
        "--samples",
        "8",
        "--out",
        &d("ring_stats.json"),
    ]);
    ok(&[
        "estimate",
        "--config",
        &clique,
        "--out",
        &d("clique_stats.json"),
    ]);
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d("ring_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["n_samples"], 8);
    assert!(stats["bound_inputs"]["E"].as_f64().unwrap() > 0.0);

    let curve = ok(&[
        "bounds",
        "--inputs",
        &d("ring_stats.json"),
        "--kind",
        "classic",
        "-K",
        "1:5",
    ]);
    assert_eq!(curve.lines().count(), 6);
    ok(&[
        "bounds",
        "--inputs",
        &d("ring_stats.json"),
        "-K",
        "1,10,100",
        "--out",
        &d("curve.csv"),
    ]);
    assert!(fs::read_to_string(d("curve.csv"))
        .unwrap()
        .starts_with("K,new"));

    let pred = ok(&[
        "predict-divergence",
        "--ring",
        &d("ring_stats.json"),
        "--clique",
        &d("clique_stats.json"),
        "--loss",
        &d("clique.csv"),
        "--pct",
        "0.04",
    ]);
    let outcomes: serde_json::Value = serde_json::from_str(&pred).unwrap();
    assert_eq!(outcomes.as_array().unwrap().len(), 2);

    let oracle: serde_json::Value = serde_json::from_str(&ok(&[
        "oracle", "--config", &ring, "--perms", "50", "--seed", "1",
    ]))
    .unwrap();
    assert_eq!(oracle["oracle"]["n_perms"], 50);
}

#[test]
fn simulate_time_writes_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let m_s = m.to_str().unwrap();
    ok(&[
        "topology", "--kind", "ring", "-M", "8", "-d", "2", "--out", m_s,
    ]);
    let sched = dir.path().join("s.csv");
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, "1.0\n2.0\n3.0\n10.0\n").unwrap();
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "simulate-time",
        "--matrix",
        m_s,
        "--trace",
        trace.to_str().unwrap(),
        "-K",
        "50",
        "--seed",
        "3",
        "--out",
        sched.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(summary["K"], 50);
    let text = fs::read_to_string(&sched).unwrap();
    assert!(text.starts_with("iter,t_complete_max,t_complete_min"));

    let fixed: serde_json::Value = serde_json::from_str(&ok(&[
        "simulate-time",
        "--matrix",
        m_s,
        "--dist",
        r#"{"kind": "constant", "value": 2.0}"#,
        "-K",
        "10",
        "--compute",
        "fixed",
    ]))
    .unwrap();
    assert_eq!(fixed["completion_max"], 20.0);
}
