use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use attnguide::io::{write_map_file, ExperimentConfig};
use attnguide::report::{all_subjects, analyze, region_table};
use attnguide::{AttentionStack, MoranConfig, Objective};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnguide"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn sample_stack() -> AttentionStack {
    let logits = attnguide::report::random_logits(12, 12, 3, 1.5, 11);
    AttentionStack::from_logits(
        &["cat".into(), "dog".into(), "sky".into()],
        12,
        12,
        0,
        &logits,
    )
    .unwrap()
}

fn write_stack(dir: &Path) -> String {
    let path = dir.join("s.amap");
    fs::write(&path, write_map_file(&sample_stack())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_map_fails_with_message() {
    let o = run(&["analyze", "/definitely/not/here.amap"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here.amap"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn analyze_json_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_stack(dir.path());
    let o = run(&["analyze", &map, "--json"]);
    assert!(o.status.success());
    let got: attnguide::Analysis = serde_json::from_str(&stdout(&o)).unwrap();
    let stack = sample_stack();
    // the file holds 17 significant digits, enough to round-trip every value
    let want = analyze(
        &stack,
        &Objective::new(all_subjects(&stack)),
        MoranConfig::default(),
    )
    .unwrap();
    assert_eq!(got, want);
}

#[test]
fn analyze_text_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_stack(dir.path());
    let csv = dir.path().join("regions.csv");
    let text = stdout(&run(&["analyze", &map, "--csv", csv.to_str().unwrap()]));
    let json: attnguide::Analysis =
        serde_json::from_str(&stdout(&run(&["analyze", &map, "--json"]))).unwrap();
    let total: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("loss total="))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, json.loss.total);
    for p in &json.pairs {
        let needle = format!("pair {} {} distance={} ", p.first, p.second, p.distance);
        assert!(text.contains(&needle), "{needle}");
    }
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), json.regions.len() + 1);
    assert!(text.ends_with(&table));
}

#[test]
fn analyze_with_config_uses_roles() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_stack(dir.path());
    let cfg = r#"{"height": 12, "width": 12, "tokens": [
        {"id": "cat", "kind": "subject"},
        {"id": "dog", "kind": "subject", "animal": true},
        {"id": "sky", "kind": "context"}]}"#;
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, cfg).unwrap();
    let o = run(&[
        "analyze",
        &map,
        "--config",
        cfg_path.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got: attnguide::Analysis = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(got.pairs.len(), 1);
    assert!(got.regions.iter().all(|r| r.token != "sky"));
    assert_eq!(got.regions.iter().filter(|r| r.token == "dog").count(), 2);
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"tokens": [{"id": "a", "kind": "subject"}], "lamda": 1}"#,
    )
    .unwrap();
    let o = run(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn regions_lists_library_table() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_stack(dir.path());
    let out = stdout(&run(&["regions", &map]));
    let stack = sample_stack();
    let rows = region_table(&stack, &Objective::new(all_subjects(&stack))).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "token,index,center_row,center_col,radius,centroid_h,centroid_w,count,mass"
    );
    assert_eq!(lines.len(), rows.len() + 1);
    for (line, row) in lines[1..].iter().zip(&rows) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], row.token);
        assert_eq!(f[2].parse::<usize>().unwrap(), row.center.row);
        assert_eq!(f[8].parse::<f64>().unwrap(), row.mass);
    }
}

#[test]
fn simulate_default_runs_fifty_steps_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["simulate", "--out", d.to_str().unwrap(), "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("trajectory.csv")).unwrap());
    assert!(csv.contains("# seed=5"));
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 51);
}

#[test]
fn metric_flag_shows_in_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--metric",
        "cos",
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("# metric_aggregation=cos\n# metric_isolation=cos\n"));
}

#[test]
fn print_config_round_trips() {
    let o = run(&["simulate", "--print-config", "--seed", "9"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(
        cfg,
        ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::demo()
        }
    );
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let ok = run(&["gradcheck", "--seeds", "4"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("gradcheck: 8/8 passed"));
    let bad = run(&["gradcheck", "--seeds", "2", "--corrupt", "--wrt", "values"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("worst=dog@7,9"));
}

#[test]
fn gradcheck_json_is_parseable() {
    let o = run(&["gradcheck", "--seeds", "2", "--wrt", "logits", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["seed"], 1);
    assert_eq!(rows[0]["report"]["pass"], true);
}

#[test]
fn compare_emits_sixteen_rows_per_metric_in_seed_order() {
    let o = bin()
        .args(["compare", "--seeds", "16"])
        .env("ATTNGUIDE_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 32);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], if i < 16 { "euc" } else { "cos" });
        assert_eq!(r[1].parse::<usize>().unwrap(), i % 16);
    }
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = bin()
        .args(["compare", "--seeds", "1"])
        .env("ATTNGUIDE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
