use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use fedshield::checkpoint::write_probe;
use fedshield::core::probe::{ProbeHyper, ProbeModel};

const SMALL: &str = "rounds = 4\nprobe.rounds = 2\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedshield"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "rounds = banana\n");
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(dir.path()), "--quiet"]);
    assert_eq!(code(&out), 2);
    let cfg = write_config(dir.path(), "unknown.cfg", "no_such_key = 1\n");
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(dir.path()), "--quiet"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn single_class_probe_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}probe.malicious_ratio = 0\n"));
    let out = run(&["train-probe", "--config", s(&cfg), "--out-dir", s(dir.path()), "--quiet"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn probe_of_the_wrong_length_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("short.json");
    write_probe(&probe, &ProbeModel::new(vec![0.1; 3], 0.0, ProbeHyper::default()).unwrap(), None).unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}aggregator = safe_step\n"));
    let out = run(&[
        "run", "--config", s(&cfg), "--out-dir", s(dir.path()), "--probe", s(&probe), "--quiet",
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn overflowing_training_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        "rounds = 2\nlora.learning_rate = 1e307\nlora.alpha = 1e6\n",
    );
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(dir.path()), "--quiet"]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn detect_report_needs_scores_and_a_readable_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let out_dir = dir.path().join("none");
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&out_dir), "--quiet"])), 0);
    let log = out_dir.join("rounds.jsonl");
    assert_eq!(code(&run(&["detect-report", s(&log), "--quiet"])), 6);
    assert_eq!(code(&run(&["detect-report", s(&dir.path().join("missing.jsonl"))])), 1);
    std::fs::write(dir.path().join("garbage.jsonl"), "{\"schema\": 1}\n").unwrap();
    assert_eq!(code(&run(&["detect-report", s(&dir.path().join("garbage.jsonl"))])), 1);
}

#[test]
fn quiet_run_prints_only_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}aggregator = safe_shadow\n"));
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(dir.path()), "--quiet"]);
    assert_eq!(code(&out), 0);
    assert!(out.stderr.is_empty());
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["schema"], "fedshield.summary/1");
    assert_eq!(v["aggregator"], "safe_shadow");
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(v, on_disk);
}

fn keys(v: &Value) -> BTreeSet<&str> {
    v.as_object().expect("object").keys().map(String::as_str).collect()
}

fn set<'a>(items: &[&'a str]) -> BTreeSet<&'a str> {
    items.iter().copied().collect()
}

fn is_num_or_null(v: &Value) -> bool {
    v.is_number() || v.is_null()
}

fn check_matrix(m: &Value) {
    assert_eq!(keys(m), set(&["rows", "cols", "values"]));
    let (r, c) = (m["rows"].as_u64().unwrap(), m["cols"].as_u64().unwrap());
    let values = m["values"].as_array().unwrap();
    assert_eq!(values.len() as u64, r * c);
    assert!(values.iter().all(Value::is_number));
}

fn check_metrics(m: &Value) {
    assert_eq!(keys(m), set(&["tp", "fp", "tn", "fn", "tpr", "fpr", "precision", "mcc"]));
    for k in ["tp", "fp", "tn", "fn"] {
        assert!(m[k].is_u64());
    }
    for k in ["tpr", "fpr", "precision", "mcc"] {
        assert!(is_num_or_null(&m[k]));
    }
}

fn check_evaluation(e: &Value) {
    assert_eq!(keys(e), set(&["benign_accuracy", "attack_success"]));
    assert!(e["benign_accuracy"].is_number() && e["attack_success"].is_number());
}

#[test]
fn every_output_file_follows_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}aggregator = safe_client\n"));
    let probe = dir.path().join("p.json");
    let out = run(&[
        "train-probe", "--config", s(&cfg), "--out-dir", s(dir.path()), "--probe", s(&probe), "--quiet",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), s(&probe));
    let run_dir = dir.path().join("run");
    let out = run(&[
        "run", "--config", s(&cfg), "--out-dir", s(&run_dir), "--probe", s(&probe), "--quiet",
    ]);
    assert_eq!(code(&out), 0);

    let read = |p: PathBuf| -> Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };

    let p = read(probe.clone());
    assert_eq!(
        keys(&p),
        set(&["schema", "weights", "bias", "epochs", "learning_rate", "l2", "seed", "cache_key"])
    );
    assert_eq!(p["schema"], "fedshield.probe/1");
    assert!(p["weights"].as_array().unwrap().iter().all(Value::is_number));
    assert!(p["bias"].is_number() && p["epochs"].is_u64() && p["seed"].is_u64());
    assert!(p["cache_key"].is_string() || p["cache_key"].is_null());

    let log = std::fs::read_to_string(run_dir.join("rounds.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for (i, line) in log.lines().enumerate() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_eq!(
            keys(&r),
            set(&[
                "schema", "round", "aggregator", "mode", "tau_cls", "sampled", "clients", "factors", "frozen",
                "skipped", "evaluation", "warnings",
            ])
        );
        assert_eq!(r["schema"], "fedshield.round/1");
        assert_eq!(r["round"].as_u64().unwrap(), i as u64 + 1);
        assert_eq!(r["mode"], "client");
        assert!(r["frozen"].is_boolean() && r["skipped"].is_boolean());
        assert!(r["factors"].as_array().unwrap().iter().all(Value::is_number));
        assert!(r["warnings"].as_array().unwrap().iter().all(|w| w["kind"].is_string()));
        check_evaluation(&r["evaluation"]);
        for c in r["clients"].as_array().unwrap() {
            assert_eq!(
                keys(c),
                set(&["client", "role", "n_samples", "step_scores", "final_score", "shadow_scores", "rho", "weight"])
            );
            assert!(c["role"] == "benign" || c["role"] == "malicious");
            assert!(c["final_score"].is_number());
            assert!(is_num_or_null(&c["rho"]) && c["weight"].is_number());
        }
    }

    let sm = read(run_dir.join("summary.json"));
    assert_eq!(
        keys(&sm),
        set(&["schema", "rounds", "aggregator", "mode", "malicious_ratio", "initial", "final", "detection", "skip_count"])
    );
    check_evaluation(&sm["initial"]);
    check_evaluation(&sm["final"]);
    check_metrics(&sm["detection"]);

    let ad = read(run_dir.join("adapter.json"));
    assert_eq!(keys(&ad), set(&["schema", "scaling", "a", "b"]));
    assert_eq!(ad["schema"], "fedshield.adapter/1");
    for m in ad["a"].as_array().unwrap().iter().chain(ad["b"].as_array().unwrap()) {
        check_matrix(m);
    }

    let mf = read(run_dir.join("manifest.json"));
    assert_eq!(
        keys(&mf),
        set(&["schema", "tool_version", "command", "config", "artifacts", "started_unix_ms", "finished_unix_ms"])
    );
    assert_eq!(mf["schema"], "fedshield.manifest/1");
    assert!(mf["config"].as_object().unwrap().values().all(Value::is_string));
    assert_eq!(mf["artifacts"]["round_log"], "rounds.jsonl");
}

#[test]
fn manifest_replay_reproduces_the_round_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}aggregator = safe_shadow\nseeds.data = 17\n"));
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&first), "--quiet"])), 0);
    let manifest = first.join("manifest.json");
    assert_eq!(code(&run(&["run", "--config", s(&manifest), "--out-dir", s(&second), "--quiet"])), 0);
    for f in ["rounds.jsonl", "summary.json", "adapter.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&a), "--seed", "1", "--quiet"])), 0);
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&b), "--seed", "2", "--quiet"])), 0);
    assert_ne!(
        std::fs::read(a.join("rounds.jsonl")).unwrap(),
        std::fs::read(b.join("rounds.jsonl")).unwrap()
    );
}

fn sweep(dir: &Path, cfg: &Path, threads: &str) -> Output {
    bin()
        .args([
            "sweep",
            "--config",
            s(cfg),
            "--out-dir",
            s(dir),
            "--ratios",
            "0.2,0.3",
            "--modes",
            "none,step,shadow",
            "--aggregators",
            "krum,trimmed_mean",
            "--quiet",
        ])
        .env("FEDSHIELD_THREADS", threads)
        .output()
        .unwrap()
}

#[test]
fn sweep_rows_cache_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    // Krum with f = 1 needs four sampled clients, so its cells fail.
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        &format!("{SMALL}clients_per_round = 3\nbaselines.krum_f = 1\n"),
    );
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    let a = sweep(&one, &cfg, "1");
    let b = sweep(&two, &cfg, "2");
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a), std::fs::read_to_string(one.join("sweep.csv")).unwrap());

    let table = stdout(&a);
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, fedshield::sweep::HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 5);
    for r in &rows {
        assert_eq!(r.len(), header.len());
        let status = &r[3];
        if &r[2] == "krum" {
            assert_eq!(status, "error");
            assert!(r[13].contains("krum"));
        } else {
            assert_eq!(status, "ok", "{r:?}");
            let acc: f64 = r[4].parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    let order: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[2].to_string())).collect();
    assert_eq!(order[0], ("0.2".into(), "fedavg".into()));
    assert_eq!(order[5], ("0.3".into(), "fedavg".into()));

    // Every defended cell shares one cached probe.
    let cached: Vec<_> = std::fs::read_dir(one.join("probe-cache")).unwrap().collect();
    assert_eq!(cached.len(), 1);
}

#[test]
fn cached_probe_is_reused_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}aggregator = safe_step\n"));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&out), "--quiet"])), 0);
    let cache = out.join("probe-cache");
    let entries: Vec<PathBuf> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1);
    let before = std::fs::metadata(&entries[0]).unwrap().modified().unwrap();
    let log_before = std::fs::read(out.join("rounds.jsonl")).unwrap();

    let ratio = write_config(dir.path(), "r.cfg", &format!("{SMALL}aggregator = safe_step\nmalicious_ratio = 0.4\n"));
    assert_eq!(code(&run(&["run", "--config", s(&ratio), "--out-dir", s(&out), "--quiet"])), 0);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(std::fs::metadata(&entries[0]).unwrap().modified().unwrap(), before);

    // Same config again: identical log from the cached probe.
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&out), "--quiet"])), 0);
    assert_eq!(std::fs::read(out.join("rounds.jsonl")).unwrap(), log_before);
}

struct Counts {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

fn pct(num: u64, den: u64) -> String {
    if den == 0 {
        "NA".into()
    } else {
        format!("{:.6}", 100.0 * num as f64 / den as f64)
    }
}

#[test]
fn detect_report_matches_a_recount() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        "rounds = 7\nprobe.rounds = 2\naggregator = safe_shadow\nmalicious_ratio = 0.4\n",
    );
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["run", "--config", s(&cfg), "--out-dir", s(&out), "--quiet"])), 0);
    let log_path = out.join("rounds.jsonl");
    let rounds: Vec<Value> = std::fs::read_to_string(&log_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    let report = run(&["detect-report", s(&log_path), "--window", "3", "--quiet"]);
    assert_eq!(code(&report), 0);
    let mut reader = csv::Reader::from_reader(report.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);

    let mut cum = Counts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (w, chunk) in rounds.chunks(3).enumerate() {
        let mut c = Counts { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for r in chunk {
            let tau = r["tau_cls"].as_f64().unwrap();
            for client in r["clients"].as_array().unwrap() {
                let malicious = client["role"] == "malicious";
                for score in client["shadow_scores"].as_array().unwrap() {
                    match (score.as_f64().unwrap() >= tau, malicious) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, false) => c.tn += 1,
                        (false, true) => c.fn_ += 1,
                    }
                }
            }
        }
        cum.tp += c.tp;
        cum.fp += c.fp;
        cum.tn += c.tn;
        cum.fn_ += c.fn_;
        let row = &rows[w];
        assert_eq!(&row[0], chunk[0]["round"].to_string());
        assert_eq!(&row[1], chunk[chunk.len() - 1]["round"].to_string());
        assert_eq!(&row[2], c.tp.to_string());
        assert_eq!(&row[3], c.fp.to_string());
        assert_eq!(&row[4], c.tn.to_string());
        assert_eq!(&row[5], c.fn_.to_string());
        assert_eq!(&row[6], pct(c.tp, c.tp + c.fn_));
        assert_eq!(&row[7], pct(c.fp, c.fp + c.tn));
        assert_eq!(&row[8], pct(c.tp, c.tp + c.fp));
        assert_eq!(&row[10], pct(cum.tp, cum.tp + cum.fn_));
        assert_eq!(&row[11], pct(cum.fp, cum.fp + cum.tn));
    }
    assert!(cum.tp + cum.fn_ > 0);
}
