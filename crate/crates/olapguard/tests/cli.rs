use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use olapguard::{exit, RunConfig};
use serde_json::Value;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn config(args: &[&str]) -> RunConfig {
    RunConfig::try_parse_from(std::iter::once("olapguard").chain(args.iter().copied())).unwrap()
}

fn run(args: &[&str], out: &Path) -> olapguard::Result<olapguard::Report> {
    let mut all = args.to_vec();
    let out = out.to_str().unwrap();
    all.extend(["--out", out]);
    config(&all).execute().map(|(r, _)| r)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn rows(path: PathBuf) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(&path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (s, w, t) = (fixture("scenario.toml"), fixture("workloads.json"), fixture("topology.toml"));
    let cases: Vec<Vec<&str>> = vec![
        vec!["simulate", "--scenario", &s],
        vec!["simulate", "--scenario", &s, "--workloads", &w, "--format", "jsonl"],
        vec!["qwi-report", "--scenario", &s, "--workloads", &w, "--topology", &t],
        vec!["place", "--topology", &t],
        vec!["rebalance", "--topology", &t, "--format", "jsonl"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        run(args, &a).unwrap();
        run(args, &b).unwrap();
        let (fa, fb) = (files(&a), files(&b));
        assert!(fa.len() >= 3, "{args:?}");
        assert_eq!(fa, fb, "{args:?}");
    }
}

#[test]
fn seed_override_changes_the_run_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let s = fixture("scenario.toml");
    run(&["simulate", "--scenario", &s], &tmp.path().join("a")).unwrap();
    run(&["simulate", "--scenario", &s, "--seed", "9"], &tmp.path().join("b")).unwrap();
    assert_eq!(summary(&tmp.path().join("b"))["run"]["seed"], 9);
    assert_ne!(
        fs::read(tmp.path().join("a/queries.csv")).unwrap(),
        fs::read(tmp.path().join("b/queries.csv")).unwrap()
    );
    // the emitted scenario reproduces the run
    let again = tmp.path().join("c");
    let replay = tmp.path().join("b/scenario.toml");
    run(&["simulate", "--scenario", replay.to_str().unwrap()], &again).unwrap();
    let (b, c) = (files(&tmp.path().join("b")), files(&again));
    assert_eq!(b, c);

    // full 64-bit seeds run; only the TOML copy is skipped
    let big = tmp.path().join("d");
    let r = run(&["simulate", "--scenario", &s, "--seed", "18446744073709551615"], &big).unwrap();
    assert!(r.files.is_empty());
    assert_eq!(summary(&big)["run"]["seed"].as_u64(), Some(u64::MAX));
}

#[test]
fn zero_length_simulation_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write(
        tmp.path(),
        "z.toml",
        "duration_ms = 0.0\n[[workloads]]\nlabel = \"a\"\nqps = 100.0\nbase_latency_ms = 1.0\n",
    );
    let out = tmp.path().join("out");
    run(&["simulate", "--scenario", &s, "--workloads", &fixture("workloads.json")], &out).unwrap();
    for name in ["servers", "latency", "queries", "budget_windows", "rebalance_steps"] {
        let text = fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}: {text}");
        assert!(!text.lines().next().unwrap().is_empty());
    }
    let sum = summary(&out);
    assert_eq!(sum["run"]["windows"], 0);
    assert_eq!(sum["run"]["queries"], 0);
    assert_eq!(sum["budgets"], Value::Array(vec![]));
    assert_eq!(sum["diversion"], Value::Null);
    assert_eq!(sum["prevention"], Value::Null);
    assert_eq!(sum["rebalance"], Value::Null);

    let out = tmp.path().join("jsonl");
    run(&["simulate", "--scenario", &s, "--format", "jsonl"], &out).unwrap();
    assert!(fs::read(out.join("servers.jsonl")).unwrap().is_empty());
}

#[test]
fn series_add_up() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run(&["simulate", "--scenario", &fixture("scenario.toml")], &out).unwrap();
    let sum = summary(&out);
    let servers = rows(out.join("servers.csv"));
    let queries = rows(out.join("queries.csv"));
    let latency = rows(out.join("latency.csv"));
    let n = |r: &BTreeMap<String, String>, k: &str| r[k].parse::<f64>().unwrap();
    assert_eq!(servers.len() as u64, sum["run"]["windows"].as_u64().unwrap() * 6);
    assert_eq!(queries.len() as u64, sum["run"]["queries"].as_u64().unwrap());
    let completed = queries.iter().filter(|q| q["outcome"] == "completed").count() as u64;
    assert_eq!(completed, sum["run"]["completed"].as_u64().unwrap());
    assert_eq!(latency.iter().map(|l| n(l, "completed")).sum::<f64>() as u64, completed);
    // every query needs one response from each of the two server sets
    let done: f64 = servers.iter().map(|r| n(r, "completed")).sum();
    let sent: f64 = servers.iter().map(|r| n(r, "dispatched")).sum();
    assert!(done <= sent);
    assert!(done >= 2.0 * completed as f64);
    // one event: diversion and prevention are reported
    assert!(sum["diversion"]["oscillation_index"].is_number());
    let p = &sum["prevention"];
    let (limit, median) = (p["threshold_ms"].as_f64().unwrap(), p["baseline_median_ms"].as_f64().unwrap());
    assert!((limit - 1.5 * median).abs() < 1e-6);
}

fn topology(dir: &Path, body: &str) -> String {
    write(dir, "t.toml", body)
}

#[test]
fn place_output_matches_a_replay_of_its_swaps() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    run(&["place", "--topology", &fixture("topology.toml")], &out).unwrap();
    let zone: BTreeMap<&str, &str> = [
        ("h1", "az1"),
        ("h2", "az1"),
        ("h3", "az1"),
        ("h4", "az2"),
        ("h5", "az2"),
        ("h6", "az2"),
        ("h7", "az3"),
        ("h8", "az3"),
        ("h9", "az3"),
    ]
    .into_iter()
    .collect();
    let mut grid: Vec<Vec<String>> = [["h1", "h2", "h4"], ["h3", "h5", "h7"], ["h6", "h8", "h9"]]
        .iter()
        .map(|r| r.iter().map(|s| s.to_string()).collect())
        .collect();
    for s in rows(out.join("swaps.csv")) {
        let u = |k: &str| s[k].parse::<usize>().unwrap();
        let (a, b) = ((u("row_a"), u("col_a")), (u("row_b"), u("col_b")));
        assert_eq!(grid[a.0][a.1], s["instance_a"]);
        assert_eq!(grid[b.0][b.1], s["instance_b"]);
        let tmp = grid[a.0][a.1].clone();
        grid[a.0][a.1] = grid[b.0][b.1].clone();
        grid[b.0][b.1] = tmp;
    }
    for cell in rows(out.join("matrix.csv")) {
        let (i, j) = (cell["row"].parse::<usize>().unwrap(), cell["col"].parse::<usize>().unwrap());
        assert_eq!(grid[i][j], cell["instance"]);
        assert_eq!(zone[cell["instance"].as_str()], cell["mz"]);
    }
    // ceil(3 / 3) = 1 replica per zone per row
    for row in &grid {
        let zones: BTreeSet<&str> = row.iter().map(|h| zone[h.as_str()]).collect();
        assert_eq!(zones.len(), 3, "{row:?}");
    }
    let sum = summary(&out);
    assert_eq!(sum["best_effort"], false);
    assert_eq!(sum["threshold"], 1);
    // every segment lands on all three hosts of its row
    assert_eq!(rows(out.join("assignment.csv")).len(), 6 * 3);
}

#[test]
fn unbalanced_pool_is_best_effort_but_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let t = topology(
        tmp.path(),
        "replica_groups = 2\n\
         [[instances]]\nid = \"a\"\nmz = \"z1\"\n[[instances]]\nid = \"b\"\nmz = \"z1\"\n\
         [[instances]]\nid = \"c\"\nmz = \"z1\"\n[[instances]]\nid = \"d\"\nmz = \"z2\"\n",
    );
    let out = tmp.path().join("p");
    run(&["place", "--topology", &t], &out).unwrap();
    let sum = summary(&out);
    assert_eq!(sum["best_effort"], true);
    assert_eq!(sum["residual_bad_rows"].as_array().unwrap().len(), 1);
}

/// Replays the written step log from the topology's current layout and
/// recounts serving replicas of every target segment.
#[test]
fn rebalance_audit_matches_a_recount_of_the_step_log() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = olapguard::parse_topology(Path::new(&fixture("topology.toml"))).unwrap();
    let out = tmp.path().join("r");
    let report = run(&["rebalance", "--topology", &fixture("topology.toml")], &out).unwrap();
    assert!(report.violations.is_empty());
    let mut layout: BTreeMap<String, BTreeSet<String>> = topo
        .file
        .current
        .clone()
        .unwrap()
        .into_iter()
        .map(|(h, s)| (h, s.into_iter().collect()))
        .collect();
    let targets: BTreeSet<String> = (0..6).map(|i| format!("seg{i}")).collect();
    let count = |layout: &BTreeMap<String, BTreeSet<String>>, drained: &BTreeSet<String>| {
        targets
            .iter()
            .map(|s| layout.iter().filter(|(h, segs)| !drained.contains(*h) && segs.contains(s)).count())
            .min()
            .unwrap()
    };
    let steps = rows(out.join("rebalance_steps.csv"));
    let audit = rows(out.join("rebalance_audit.csv"));
    assert!(!audit.is_empty());
    for line in &audit {
        let mine: Vec<_> = steps.iter().filter(|s| s["step"] == line["step"]).collect();
        let drained: BTreeSet<String> =
            mine.iter().filter(|s| s["drained"] == "true").map(|s| s["host"].clone()).collect();
        assert_eq!(line["min_serving_during"].parse::<usize>().unwrap(), count(&layout, &drained));
        for s in &mine {
            let segs = layout.entry(s["host"].clone()).or_default();
            for r in s["removed"].split_whitespace() {
                assert!(segs.remove(r));
            }
            for a in s["added"].split_whitespace() {
                assert!(segs.insert(a.to_string()));
            }
        }
        let after = count(&layout, &BTreeSet::new());
        assert_eq!(line["min_serving_after"].parse::<usize>().unwrap(), after);
        assert!(after >= 2 && line["ok"] == "true");
    }
    // the replay ends on the repaired mirrored layout
    let placed = tmp.path().join("p");
    run(&["place", "--topology", &fixture("topology.toml")], &placed).unwrap();
    let mut want: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for a in rows(placed.join("assignment.csv")) {
        want.entry(a["host"].clone()).or_default().insert(a["segment"].clone());
    }
    layout.retain(|_, s| !s.is_empty());
    assert_eq!(layout, want);
    assert_eq!(summary(&out)["reached_desired"], true);
}

#[test]
fn enforcement_totals_match_the_per_server_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("q");
    let (s, w, t) = (fixture("scenario.toml"), fixture("workloads.json"), fixture("topology.toml"));
    run(&["qwi-report", "--scenario", &s, "--workloads", &w, "--topology", &t], &out).unwrap();
    let per_server = rows(out.join("budget_windows.csv"));
    let totals = rows(out.join("enforcement.csv"));
    assert!(!totals.is_empty());
    for t in &totals {
        let mine: Vec<_> = per_server
            .iter()
            .filter(|r| r["window_start_ms"] == t["window_start_ms"] && r["workload"] == t["workload"])
            .collect();
        assert_eq!(mine.len().to_string(), t["servers"]);
        for col in ["charged_cpu_ns", "true_cpu_ns", "admitted", "rejected", "cancelled", "budget_mem_bytes"] {
            let sum: u64 = mine.iter().map(|r| r[col].parse::<u64>().unwrap()).sum();
            assert_eq!(sum.to_string(), t[col], "{col}");
        }
    }
    // work late in a window may be charged in the next one, so charged
    // never exceeding true only holds over the whole run
    let mut run_totals: BTreeMap<(&str, &str), (u64, u64)> = BTreeMap::new();
    for r in &per_server {
        let n = |k: &str| r[k].parse::<u64>().unwrap();
        assert!(n("charged_cpu_ns") <= n("budget_cpu_ns"));
        let e = run_totals.entry((r["server"].as_str(), r["workload"].as_str())).or_default();
        e.0 += n("charged_cpu_ns");
        e.1 += n("true_cpu_ns");
    }
    for (k, (charged, truth)) in run_totals {
        assert!(charged <= truth, "{k:?}: {charged} > {truth}");
    }
    // table propagation reaches the tableA/tableB servers, tenant propagation
    // the hosts of the tenant and node type
    let mut got: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for p in rows(out.join("propagation.csv")) {
        got.entry((p["workload"].clone(), p["node_type"].clone())).or_default().insert(p["host"].clone());
    }
    let set = |hs: &[&str]| hs.iter().map(|h| h.to_string()).collect::<BTreeSet<_>>();
    let key = |w: &str, n: &str| (w.to_string(), n.to_string());
    assert_eq!(got[&key("analytics-workload", "SERVER")], set(&["h1", "h2", "h3", "h4", "h5", "h6"]));
    assert_eq!(got[&key("analytics-workload", "BROKER")], set(&["b1"]));
    assert_eq!(got[&key("batch-workload", "SERVER")], set(&["h7", "h8"]));
    let sum = summary(&out);
    assert_eq!(sum["propagation_warnings"], Value::Array(vec![]));
    assert_eq!(sum["budgets"].as_array().unwrap().len(), 2);
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_olapguard")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();

    let (code, _) = binary(&["place", "--topology", &fixture("topology.toml"), "--out", o]);
    assert_eq!(code, i32::from(exit::OK));

    let bad = write(tmp.path(), "bad.toml", "[[workloads]]\nlabel = \"a\"\nqps = -1.0\nbase_latency_ms = 1.0\n");
    let (code, err) = binary(&["simulate", "--scenario", &bad, "--out", o]);
    assert_eq!(code, i32::from(exit::PARSE));
    assert!(err.contains("workloads[0].qps"), "{err}");

    let (code, _) = binary(&["simulate", "--scenario", "/nonexistent/s.toml", "--out", o]);
    assert_eq!(code, i32::from(exit::PARSE));
    let (code, _) = binary(&["simulate", "--seed", "-1", "--scenario", &bad]);
    assert_eq!(code, i32::from(exit::PARSE));
    let (code, err) = binary(&["qwi-report", "--scenario", &fixture("scenario.toml"), "--out", o]);
    assert_eq!(code, i32::from(exit::PARSE));
    assert!(err.contains("--workloads"), "{err}");

    // output path below a regular file
    let file = write(tmp.path(), "plain", "");
    let (code, _) = binary(&["place", "--topology", &fixture("topology.toml"), "--out", &format!("{file}/sub")]);
    assert_eq!(code, i32::from(exit::IO));

    // a layout already short of replicas cannot be moved without a breach
    let t = topology(
        tmp.path(),
        "replica_groups = 3\n\
         [[instances]]\nid = \"a\"\nmz = \"z1\"\n[[instances]]\nid = \"b\"\nmz = \"z2\"\n[[instances]]\nid = \"c\"\nmz = \"z3\"\n\
         [[segments]]\nid = \"s\"\n\
         [current]\na = [\"s\"]\n\
         [desired]\na = [\"s\"]\nb = [\"s\"]\nc = [\"s\"]\n\
         [rebalance]\nmin_serving_replicas = 2\n",
    );
    let (code, err) = binary(&["rebalance", "--topology", &t, "--out", o]);
    assert_eq!(code, i32::from(exit::INVARIANT), "{err}");
    assert!(out.join("rebalance_audit.csv").exists(), "the report is still written");
}
