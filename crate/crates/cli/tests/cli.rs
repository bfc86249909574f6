use serde_json::Value as Json;
use shardkrp::partition::{decode_plan, encode_plan, load_plan};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shardkrp"));
    c.env_remove("SHARDKRP_WORKERS").env("RUST_LOG", "error");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn records(text: &str) -> Vec<Json> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn synth_small(dir: &Path) -> PathBuf {
    let path = dir.join("t.tns");
    let o = run(&["synth", "--shape", "10,10,10", "--nnz", "100", "--seed", "3", "-o", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn info_echoes_table_shapes() {
    let o = run(&["info", fixture("amazon3.tns").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("shape: 4.8M × 1.8M × 1.8M"), "{}", stdout(&o));

    let o = run(&["info", fixture("twitch5.tns").to_str().unwrap()]);
    let text = stdout(&o);
    assert!(text.contains("15.5M × 6.2M × 783.9K × 6.1K × 6.1K"));
    assert_eq!(text.lines().filter(|l| l.starts_with("mode ")).count(), 5);
}

#[test]
fn synth_then_info_density() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth_small(dir.path());
    let o = run(&["info", "--json", path.to_str().unwrap()]);
    let v: Json = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["nnz"], 100);
    assert_eq!(v["density"], 0.1);
    assert_eq!(v["index_counts"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["info"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["info", "/nonexistent/x.tns"])), 4);
    let small = fixture("small3.tns");
    assert_eq!(code(&run(&["mttkrp", small.to_str().unwrap(), "--devices", "0"])), 2);
    assert_eq!(code(&run(&["mttkrp", small.to_str().unwrap(), "--iterations", "0"])), 2);
    assert_eq!(code(&run(&["scaling", small.to_str().unwrap(), "--devices", "2,4"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tns");
    std::fs::write(&bad, "1 1 x 2.0\n").unwrap();
    assert_eq!(code(&run(&["info", bad.to_str().unwrap()])), 4);
}

#[test]
fn mttkrp_verify_passes() {
    let small = fixture("small3.tns");
    let o = run(&["mttkrp", small.to_str().unwrap(), "--verify", "--rank", "4", "--devices", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&stdout(&o));
    let v = recs.iter().find(|r| r["metric"] == "verify_max_rel_err").unwrap();
    assert!(v["value"].as_f64().unwrap() <= 1e-10);
    // Warm-up is excluded by default: only iteration 0 is reported.
    assert!(recs.iter().all(|r| r["iteration"] == 0));
    let o = run(&["mttkrp", small.to_str().unwrap(), "--warmup", "0", "--iterations", "2", "--atomic", "--verify"]);
    assert_eq!(code(&o), 0);
    let its: BTreeSet<i64> = records(&stdout(&o)).iter().map(|r| r["iteration"].as_i64().unwrap()).collect();
    assert_eq!(its, BTreeSet::from([0, 1]));
}

#[test]
fn partition_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_small(dir.path());
    let cache = dir.path().join("plans");
    let args = ["partition", t.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap(), "--devices", "2"];
    let first = run(&args);
    assert_eq!(code(&first), 0);
    let hits = |o: &Output| -> Vec<f64> {
        records(&stdout(o))
            .iter()
            .filter(|r| r["metric"] == "cache_hit")
            .map(|r| r["value"].as_f64().unwrap())
            .collect()
    };
    assert_eq!(hits(&first), vec![0.0; 3]);
    let stamp = |m: usize| std::fs::metadata(cache.join(format!("mode-{m}.plan"))).unwrap().modified().unwrap();
    let before: Vec<_> = (0..3).map(stamp).collect();
    let second = run(&args);
    assert_eq!(hits(&second), vec![1.0; 3]);
    assert_eq!((0..3).map(stamp).collect::<Vec<_>>(), before);
    assert!(String::from_utf8_lossy(&second.stderr).contains("up to date"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(hits(&run(&forced)), vec![0.0; 3]);
    // Different settings invalidate the cache.
    let mut other = args.to_vec();
    other.extend(["--oversub", "2"]);
    assert_eq!(hits(&run(&other)), vec![0.0; 3]);

    let o = run(&["mttkrp", t.to_str().unwrap(), "--plans", cache.to_str().unwrap(), "--verify", "--rank", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn workers_default_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_small(dir.path());
    let cache = dir.path().join("plans");
    let o = bin()
        .env("SHARDKRP_WORKERS", "3")
        .args(["partition", t.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(load_plan(cache.join("mode-0.plan")).unwrap().config.workers_per_device, 3);
    let o = bin()
        .env("SHARDKRP_WORKERS", "3")
        .args(["partition", t.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap(), "--workers", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(load_plan(cache.join("mode-0.plan")).unwrap().config.workers_per_device, 2);
}

#[test]
fn tampered_plan_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_small(dir.path());
    let cache = dir.path().join("plans");
    assert_eq!(code(&run(&["partition", t.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap()])), 0);
    // Re-encode a plan with one value changed: checksum valid, result wrong.
    let path = cache.join("mode-1.plan");
    let mut plan = decode_plan(&std::fs::read(&path).unwrap()).unwrap();
    let shard = plan.shards.iter_mut().find(|s| !s.values.is_empty()).unwrap();
    shard.values[0] += 1.0;
    std::fs::write(&path, encode_plan(&plan)).unwrap();
    let o = run(&["mttkrp", t.to_str().unwrap(), "--plans", cache.to_str().unwrap(), "--verify", "--rank", "2"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    // Without --verify the run itself succeeds.
    let o = run(&["mttkrp", t.to_str().unwrap(), "--plans", cache.to_str().unwrap(), "--rank", "2"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn cpd_exports_factors() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_small(dir.path());
    let fdir = dir.path().join("factors");
    let o = run(&[
        "cpd", t.to_str().unwrap(), "--rank", "2", "--iterations", "3", "--factors-dir", fdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fits: Vec<_> = records(&stdout(&o)).into_iter().filter(|r| r["metric"] == "fit").collect();
    assert_eq!(fits.len(), 3);
    let csv = std::fs::read_to_string(fdir.join("mode-0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.lines().all(|l| l.split(',').count() == 2));
    assert_eq!(std::fs::read_to_string(fdir.join("lambdas.csv")).unwrap().lines().count(), 2);
}

/// Field names of every record and the unit of every metric, per command.
fn schema_lines(outputs: &[(&str, String)]) -> Vec<String> {
    let mut lines = BTreeSet::new();
    for (cmd, text) in outputs {
        for r in records(text) {
            let obj = r.as_object().unwrap();
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            lines.insert(format!("fields {}", keys.join(",")));
            assert_eq!(r["command"], *cmd);
            lines.insert(format!(
                "{cmd} {} {}",
                r["metric"].as_str().unwrap(),
                r["unit"].as_str().unwrap()
            ));
        }
    }
    lines.into_iter().collect()
}

#[test]
fn metrics_schema_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_small(dir.path());
    let t = t.to_str().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let cache = out("plans");
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("partition", vec!["partition".into(), t.into(), "--cache-dir".into(), cache, "--out".into(), out("p.jsonl")]),
        ("mttkrp", vec!["mttkrp".into(), t.into(), "--rank".into(), "2".into(), "--verify".into(), "--out".into(), out("m.jsonl")]),
        ("scaling", vec!["scaling".into(), t.into(), "--devices".into(), "1,2".into(), "--rank".into(), "2".into(), "--out".into(), out("s.jsonl")]),
        ("imbalance", vec!["imbalance".into(), t.into(), "--rank".into(), "2".into(), "--out".into(), out("i.jsonl")]),
        ("cpd", vec!["cpd".into(), t.into(), "--rank".into(), "2".into(), "--iterations".into(), "2".into(), "--out".into(), out("c.jsonl")]),
    ];
    let mut outputs = Vec::new();
    for (cmd, args) in &runs {
        let o = bin().args(args).output().unwrap();
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty(), "{cmd} wrote metrics to stdout despite --out");
        let path = args.last().unwrap();
        outputs.push((*cmd, std::fs::read_to_string(path).unwrap()));
    }
    let got = schema_lines(&outputs).join("\n") + "\n";
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/metrics_schema.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(&golden).unwrap());
}
