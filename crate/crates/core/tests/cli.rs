use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_impact-audit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("IMPACT_AUDIT_DATA_DIR").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small city: 40 tracts, 30 trips each.
fn small_city(dir: &Path) {
    fs::write(
        dir.join("spec.json"),
        r#"{"n_tracts": 40, "trips_per_tract": {"fixed": 30}, "effects": {"pct_nonwhite": 1.0}}"#,
    )
    .unwrap();
    let o = run(&["synth", "--spec", &s(&dir.join("spec.json")), "--out", &s(&dir.join("city"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn audit(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "audit".to_string(),
        "--trips".into(),
        s(&dir.join("city/trips.csv")),
        "--tracts".into(),
        s(&dir.join("city/tracts.csv")),
        "--out".into(),
        s(&dir.join(out)),
        "--iterations".into(),
        "50".into(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

#[test]
fn audit_twice_gives_identical_bytes() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    assert!(audit(d.path(), "a.json", &["--seed", "7"]).status.success());
    let o = audit(d.path(), "b.json", &["--seed", "7", "--threads", "3"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("seed: 7"));
    assert_eq!(fs::read(d.path().join("a.json")).unwrap(), fs::read(d.path().join("b.json")).unwrap());
    assert!(audit(d.path(), "c.json", &["--seed", "8"]).status.success());
    assert_ne!(fs::read(d.path().join("a.json")).unwrap(), fs::read(d.path().join("c.json")).unwrap());
}

#[test]
fn default_seed_is_printed() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    let o = audit(d.path(), "r.json", &[]);
    assert!(stderr(&o).contains("seed: 42"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["audit", "--trips", "x", "--tracts", "y", "--out", "z", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage][cli]:"), "{err}");
}

#[test]
fn missing_input_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["ingest", "--trips", &s(&d.path().join("nope.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("error[input][ingest]:"));
}

#[test]
fn malformed_row_names_row_number() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    let trips = d.path().join("city/trips.csv");
    let mut text = fs::read_to_string(&trips).unwrap();
    let bad = text.lines().nth(1).unwrap().replacen(",", ",notatime,", 1);
    text.push_str(&bad);
    text.push('\n');
    fs::write(&trips, text).unwrap();
    let o = run(&["ingest", "--trips", &s(&trips)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("row"), "{}", stderr(&o));
    let o = run(&["ingest", "--trips", &s(&trips), "--max-malformed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["dropped"]["malformed"], 1);
}

#[test]
fn too_few_tracts_is_degenerate() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("spec.json"),
        r#"{"n_tracts": 3, "trips_per_tract": {"fixed": 1}}"#,
    )
    .unwrap();
    let o = run(&["synth", "--spec", &s(&d.path().join("spec.json")), "--out", &s(&d.path().join("city"))]);
    assert!(o.status.success());
    // keep only the first trip so two tracts have no pickups
    let trips = d.path().join("city/trips.csv");
    let text = fs::read_to_string(&trips).unwrap();
    let first_two: Vec<&str> = text.lines().take(2).collect();
    fs::write(&trips, first_two.join("\n") + "\n").unwrap();
    let o = audit(d.path(), "r.json", &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[degenerate][aggregate]"));
}

#[test]
fn unknown_attribute_is_usage() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    let o = audit(d.path(), "r.json", &["--attributes", "pct_martian"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[usage][audit]"));
}

#[test]
fn help_lists_every_flag() {
    let expect: &[(&str, &[&str])] = &[
        ("ingest", &["--trips", "--mapping", "--source", "--fare", "--max-malformed", "--out", "--stats"]),
        ("filter-outliers", &["--column", "--k", "--tol", "--max-iter", "--model", "--out"]),
        ("aggregate", &["--tracts", "--out-dir", "--endpoints", "--variants"]),
        (
            "audit",
            &[
                "--grid", "--min-group", "--iterations", "--variance-form", "--perm-scheme", "--tables-dir",
                "--attributes", "--outcomes", "--allow-single-point",
            ],
        ),
        ("chart", &["--report", "--cell", "--out-dir", "--raw", "--svg"]),
        ("synth", &["--spec", "--out"]),
        ("compare", &["--a", "--b", "--out"]),
    ];
    for (cmd, flags) in expect {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags.iter().chain(&["--seed", "--threads", "--config", "--data-dir"]) {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "iterations": 20, "variants": ["min", "point", "max"]}"#).unwrap();
    let o = audit(d.path(), "r.json", &["--config", &s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("r.json")).unwrap()).unwrap();
    // --iterations 50 on the command line beats the file's 20
    assert_eq!(r["metadata"]["config"]["iterations"], 50);
    assert_eq!(r["metadata"]["config"]["seed"], 5);
    assert_eq!(r["metadata"]["config"]["variants"].as_array().unwrap().len(), 3);

    fs::write(&cfg, r#"{"iterationz": 20}"#).unwrap();
    let o = audit(d.path(), "r2.json", &["--config", &s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let d = tempfile::tempdir().unwrap();
    small_city(d.path());
    let out = d.path().join("r.json");
    let o = Command::new(BIN)
        .args(["audit", "--trips", "city/trips.csv", "--tracts", "city/tracts.csv", "--iterations", "10"])
        .arg("--out")
        .arg(&out)
        .env("IMPACT_AUDIT_DATA_DIR", d.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists());
}

#[test]
fn pipeline_subcommands_produce_their_files() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&d.path().join(n));
    small_city(d.path());
    assert!(run(&["ingest", "--trips", &p("city/trips.csv"), "--out", &p("in.csv"), "--stats", &p("st.json")])
        .status
        .success());
    let st: serde_json::Value = serde_json::from_slice(&fs::read(p("st.json")).unwrap()).unwrap();
    assert_eq!(st["rows_read"], 1200);
    assert_eq!(st["retained"], 1200);

    let o = run(&["filter-outliers", "--trips", &p("in.csv"), "--out", &p("f.csv"), "--model", &p("m.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p("m.json")).unwrap()).unwrap();
    assert_eq!(m["model"]["k"], 2);
    assert_eq!(
        m["removed"].as_u64().unwrap() + m["retained"].as_u64().unwrap(),
        m["n_values"].as_u64().unwrap()
    );

    let o = run(&["aggregate", "--trips", &p("f.csv"), "--tracts", &p("city/tracts.csv"), "--out-dir", &p("agg")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(p("agg/tracts_pickup_point.csv")).unwrap();
    assert!(table.starts_with("geoid,attr:"));

    let o = audit(d.path(), "r.json", &["--tables-dir", &p("tables"), "--variants", "min,point,max"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&p("tables/table_point_fare_per_mile.csv")).exists());
    assert!(Path::new(&p("tables/variants_dropoff_fare_per_mile.csv")).exists());

    let o = run(&[
        "chart", "--report", &p("r.json"), "--cell", "point/pickup/pct_nonwhite/fare_per_mile", "--out-dir",
        &p("charts"), "--raw", "--svg",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(p("charts/point_pickup_pct_nonwhite_fare_per_mile.csv")).unwrap();
    assert!(csv.starts_with("a,t,d,mean_below,mean_above,raw_difference"));
    assert!(Path::new(&p("charts/point_pickup_pct_nonwhite_fare_per_mile_raw.svg")).exists());

    // chart values are copied from the report unmodified
    let r: serde_json::Value = serde_json::from_slice(&fs::read(p("r.json")).unwrap()).unwrap();
    let cell = r["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["variant"] == "point" && c["endpoint"] == "pickup" && c["attribute"] == "pct_nonwhite" && c["outcome"] == "fare_per_mile")
        .unwrap();
    let first_d = cell["curve"]["points"][0]["d"].as_f64().unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[2], first_d);

    let o = run(&["chart", "--report", &p("r.json"), "--cell", "point/pickup/nope/fare_per_mile", "--out-dir", &p("c2")]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["compare", "--a", &p("r.json"), "--b", &p("r.json"), "--out", &p("cmp.csv")]);
    assert!(o.status.success());
    let cmp = fs::read_to_string(p("cmp.csv")).unwrap();
    assert!(cmp.lines().skip(1).all(|l| l.ends_with(",0,0") || l.ends_with(",,")), "{cmp}");
}

#[test]
fn synth_seed_flag_overrides_spec() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&d.path().join(n));
    fs::write(p("spec.json"), r#"{"n_tracts": 5, "trips_per_tract": {"fixed": 3}, "seed": 1}"#).unwrap();
    for (dir, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        assert!(run(&["synth", "--spec", &p("spec.json"), "--out", &p(dir), "--seed", seed]).status.success());
    }
    let read = |dir: &str| fs::read(d.path().join(dir).join("trips.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("a/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 9);
}
