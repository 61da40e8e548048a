use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn specsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specsim")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = specsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_meta(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("meta");
    v
}

#[test]
fn derandomize_linux_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let csv = dir.path().join("s.csv");
    let o = out.to_str().unwrap();
    ok(&[
        "derandomize", "--os", "linux", "--profile", "haswell", "--seed", "7", "--trials", "2", "--imul-count", "256",
        "--out", o, "--csv", csv.to_str().unwrap(), "--assert-exact",
    ]);
    let r = report(&out);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["summary"]["false_positives"], 0);
    assert_eq!(r["summary"]["false_negatives"], 0);
    let scan = &r["result"]["scans"][0];
    assert_eq!(scan["image_base_correct"], true);
    assert_eq!(scan["ground_truth_pages"], 11 + 1316);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("address,trial,cycles,verdict"));
    assert_eq!(lines.count() as u64, 2 * scan["probes"].as_u64().unwrap());
}

#[test]
fn reports_are_deterministic_apart_from_meta() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        ok(&[
            "derandomize", "--os", "linux", "--seed", "3", "--imul-count", "256", "--noise", "default", "--out",
            p.to_str().unwrap(),
        ]);
        report(&p)
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert!(a.get("meta").is_some());
    assert_eq!(
        serde_json::to_string(&without_meta(a)).unwrap(),
        serde_json::to_string(&without_meta(b)).unwrap()
    );
}

#[test]
fn assert_exact_fails_on_an_ineffective_configuration() {
    // one trial with heavy eviction noise: some mapped pages are missed
    let out = specsim(&[
        "derandomize", "--os", "linux", "--seed", "1", "--trials", "1", "--imul-count", "256", "--noise",
        "jitter=0,evict=0.5", "--assert-exact",
    ]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let inexact = r["summary"]["false_positives"] != 0 || r["summary"]["false_negatives"] != 0;
    assert!(inexact, "noise this heavy should cost some pages");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn derandomize_windows_locates_the_image() {
    let out = ok(&["derandomize", "--os", "windows", "--profile", "skylake", "--seed", "2", "--trials", "1", "--imul-count", "256"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let scan = &r["result"]["scans"][0];
    assert_eq!(scan["image_base_correct"], true);
    assert_eq!(scan["probes"], 262144);
    assert_eq!(r["summary"]["false_positives"], 0);
}

#[test]
fn derandomize_from_a_layout_file() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, _) = specsim::oslayout::randomize_linux(11, 11, 1316).unwrap();
    let path = dir.path().join("layout.json");
    std::fs::write(&path, layout.to_json()).unwrap();
    let out = ok(&["derandomize", "--layout", path.to_str().unwrap(), "--imul-count", "256", "--assert-exact"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["scans"][0]["layout_seed"], 11);

    std::fs::write(&path, "{ not json").unwrap();
    let out = specsim(&["derandomize", "--layout", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layout"));
}

#[test]
fn sweep_detect_predictor_reproduces_the_table_column() {
    let out = ok(&["sweep-profiles", "--command", "detect-predictor"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let letters: String = r["result"]["rows"].as_array().unwrap().iter().map(|row| row["letter"].as_str().unwrap()).collect();
    assert_eq!(letters, "NNNTN");
    assert!(String::from_utf8_lossy(&out.stderr).contains("column: NNNTN"));
}

#[test]
fn sweep_buffer_params() {
    let out = ok(&["sweep-profiles", "--command", "buffer-params"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = r["result"]["rows"].as_array().unwrap();
    let pairs: Vec<(Value, Value)> =
        rows.iter().map(|row| (row["parallel_miss_slots"].clone(), row["load_buffer_entries"].clone())).collect();
    assert_eq!(pairs[0], (Value::from(40), Value::from(72)));
    assert_eq!(pairs[3], (Value::from(11), Value::from(48)));
    assert_eq!(rows[4]["universal_stall"], 19);
}

#[test]
fn sweep_flushing_and_guard() {
    let out = ok(&["sweep-profiles", "--command", "flushing"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    for row in r["result"]["rows"].as_array().unwrap() {
        let sep = row["separation"].as_i64().unwrap();
        match row["profile"].as_str().unwrap() {
            "Skylake" | "Prescott" => assert_eq!(sep, 0),
            _ => assert!(sep > 0, "{row}"),
        }
    }
    let out = ok(&["sweep-profiles", "--command", "guard"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["rows"][1]["outcome"]["guarded_leak"], false);
    assert_eq!(r["result"]["rows"][1]["outcome"]["unguarded_leak"], true);
}

#[test]
fn run_listing_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["run-listing", "listing1.asm", "--profile", "haswell", "--trace"]);
    // the bare flag writes trace.jsonl in the working directory
    let _ = std::fs::remove_file("trace.jsonl");
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["terminal"]["kind"], "exited");

    let trace = dir.path().join("t.jsonl");
    ok(&["run-listing", "listing1", "--trace", trace.to_str().unwrap()]);
    let events: Vec<Value> =
        std::fs::read_to_string(&trace).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["event"] == "issue" && e["speculative"] == true));
    assert!(events.iter().any(|e| e["event"] == "flush"));
}

#[test]
fn run_listing_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.asm");
    std::fs::write(&path, "mov rax, 5\nadd rax, 2\n").unwrap();
    let out = ok(&["run-listing", path.to_str().unwrap()]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["registers"][0], serde_json::json!(["rax", "0x7"]));

    std::fs::write(&path, "mov rax, [\n").unwrap();
    assert_eq!(specsim(&["run-listing", path.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(specsim(&["run-listing", "no-such-listing.asm"]).status.code(), Some(1));
}

#[test]
fn detect_predictor_single_profile() {
    let out = ok(&["detect-predictor", "--profile", "nehalem"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["verdict"], "forward_taken");
    let out = ok(&["detect-predictor", "--profile", "haswell", "--imul-count", "0"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["verdict"], "inconclusive");
}

#[test]
fn probe_fixture_addresses() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    for technique in ["two-level", "dependent-load", "exhaustion", "flushing"] {
        let profile = if technique == "flushing" { "haswell" } else { "skylake" };
        let out = ok(&["probe", "--profile", profile, "--technique", technique, "--csv", csv.to_str().unwrap()]);
        let r: Value = serde_json::from_slice(&out.stdout).unwrap();
        let addrs = r["result"]["addresses"].as_array().unwrap();
        assert_eq!(addrs[0]["mapped"], true, "{technique}");
        assert_eq!(addrs[1]["mapped"], false, "{technique}");
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 2);
    }
}

#[test]
fn probe_against_a_layout_and_explicit_addresses() {
    let out = ok(&["probe", "--os", "linux", "--seed", "4", "--imul-count", "256"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["summary"]["false_positives"], 0);
    assert_eq!(r["summary"]["false_negatives"], 0);
    let out = ok(&["probe", "--address", "0xffffffff81000000", "--address", "0xffffffff80000000", "--trials", "3"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["summary"]["timing"][0]["samples"], 3);
}

#[test]
fn invalid_technique_profile_pairing_is_a_config_error() {
    let out = specsim(&["probe", "--profile", "nehalem", "--technique", "dependent-load"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ineffective"));
    let out = specsim(&["probe", "--profile", "haswell", "--technique", "exhaustion", "--exhaustion-loads", "80"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_profile_and_bad_flags() {
    let out = specsim(&["detect-predictor", "--profile", "pentium4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown profile"));
    assert_eq!(specsim(&["probe", "--technique", "rowhammer"]).status.code(), Some(2));
    assert_eq!(specsim(&["derandomize", "--noise", "jitter=x"]).status.code(), Some(1));
    assert_eq!(specsim(&["derandomize", "--os", "macos"]).status.code(), Some(2));
}

#[test]
fn demo_guard() {
    let out = ok(&["demo-guard", "--profile", "skylake"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["unguarded_leak"], true);
    assert_eq!(r["result"]["guarded_leak"], false);
}

#[test]
fn read_memory_user_and_kernel() {
    let out = ok(&["read-memory", "--len", "8"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["matching"], 8);
    assert_eq!(r["result"]["bytes"], r["result"]["backing"]);

    let out = ok(&["read-memory", "--os", "linux", "--len", "4", "--profile", "skylake"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["bytes"], serde_json::json!([0, 0, 0, 0]));

    let out = ok(&["read-memory", "--os", "linux", "--len", "2", "--profile", "prescott"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["failed"], 2);

    assert_eq!(specsim(&["read-memory", "--imul-count", "10"]).status.code(), Some(1));
}

#[test]
fn exported_profiles_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.toml");
    ok(&["export-profiles", "--out", path.to_str().unwrap()]);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut builtins = specsim::uarch::builtin_profiles();
    builtins.sort_by_key(|p| p.key());
    assert_eq!(specsim::uarch::profiles_from_toml(&text).unwrap(), builtins);
    let stdout = ok(&["export-profiles"]).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap(), text);

    // a file with several profiles needs a name
    let spec = format!("{}#Nehalem", path.display());
    let out = ok(&["detect-predictor", "--profile", &spec]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["letter"], "T");
    assert_eq!(specsim(&["detect-predictor", "--profile", path.to_str().unwrap()]).status.code(), Some(1));

    let out = ok(&["sweep-profiles", "--command", "detect-predictor", "--profiles", path.to_str().unwrap()]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["result"]["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn summary_goes_to_stdout_when_the_report_goes_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = ok(&["demo-guard", "--out", path.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("guarded does not leak"));
    assert_eq!(report(&path)["command"], "demo-guard");
}
