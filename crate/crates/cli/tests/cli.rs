mod common;

use std::fs;
use std::path::Path;

use common::*;
use serde_json::{json, Value};
use tempfile::TempDir;

fn tmp() -> TempDir {
    tempfile::tempdir().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

fn perf_runs(dir: &Path, sigma: &str, seed: &str) {
    write(dir, "truth.json", PERF_TRUTH);
    run_json(
        dir,
        &[
            "synth", "runs", "--law", "perf", "--params", "truth.json", "--dataset", "a=1e5", "--dataset",
            "b=1e6", "--dataset", "c=1e7", "--sigma", sigma, "--seed", seed,
        ],
    );
}

// ---- stats ----

#[test]
fn stats_counts_bundled_sample() {
    let d = tmp();
    let sample = data("sample.csv");
    let v = run_json(d.path(), &["stats", sample.to_str().unwrap()]);
    assert_eq!(v["tokens"], 6);
    assert_eq!(v["num_users"], 3);
    assert_schema("stats", &v);

    let text = run(d.path(), &["stats", sample.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("tokens: 6"));
}

#[test]
fn stats_truncates_before_counting() {
    let d = tmp();
    let v = run_json(d.path(), &["stats", data("sample.csv").to_str().unwrap(), "--truncate", "1"]);
    assert_eq!(v["tokens"], 3);
    assert_eq!(v["s_max"], 1);
    assert_eq!(v["truncate"], 1);
}

#[test]
fn missing_dataset_exits_2() {
    let d = tmp();
    let out = run(d.path(), &["stats", "nope.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn malformed_dataset_exits_3() {
    let d = tmp();
    write(d.path(), "bad.csv", "user_id,items\nu1,1 x\n");
    assert_eq!(code(&run(d.path(), &["stats", "bad.csv"])), 3);
}

// ---- usage and config ----

#[test]
fn usage_errors_exit_1() {
    let d = tmp();
    for args in [
        vec!["bogus"],
        vec!["stats", "--no-such-flag"],
        vec!["synth", "markov", "--states", "2"],
        vec!["stats", "x.csv", "--output", "yaml"],
        vec!["stats", "x.csv", "--threads", "0"],
    ] {
        assert_eq!(code(&run(d.path(), &args)), 1, "{args:?}");
    }
    let out = perflaw(d.path())
        .args(["stats", "x.csv"])
        .env("PERFLAW_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run(d.path(), &["stats"])), 1);
    assert_eq!(code(&run(d.path(), &["--help"])), 0);
}

#[test]
fn config_supplies_defaults_and_flags_win() {
    let d = tmp();
    let sample = data("sample.csv");
    let cfg = write(
        d.path(),
        "p.toml",
        &format!("output = \"json\"\n[dataset]\npath = {:?}\ntruncate = 1\n", sample.to_str().unwrap()),
    );
    let out = run(d.path(), &["--config", &cfg, "stats"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tokens"], 3);

    let out = run(d.path(), &["--config", &cfg, "stats", "--truncate", "5", "--output", "text"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("tokens: 6"), "{text}");
}

#[test]
fn config_errors_map_to_io_and_validation() {
    let d = tmp();
    assert_eq!(code(&run(d.path(), &["--config", "none.toml", "stats"])), 2);
    let bad = write(d.path(), "bad.toml", "unknown_key = 1\n");
    assert_eq!(code(&run(d.path(), &["--config", &bad, "stats"])), 3);
}

#[test]
fn threads_flag_and_env_are_accepted() {
    let d = tmp();
    let sample = data("sample.csv");
    let out = run(d.path(), &["--threads", "1", "stats", sample.to_str().unwrap()]);
    assert!(out.status.success());
    let out = perflaw(d.path())
        .args(["stats", sample.to_str().unwrap()])
        .env("PERFLAW_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
}

// ---- apen and verify-bound ----

#[test]
fn apen_on_constant_sequences_exits_4() {
    let d = tmp();
    let out = run(d.path(), &["apen", data("constant.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn apen_reports_estimate_next_to_the_analytic_value() {
    let d = tmp();
    let gen = run_json(
        d.path(),
        &["synth", "markov", "--states", "2", "--p", "0.9,0.1,0.5,0.5", "--len", "200000", "--seed", "1", "--out", "m.jsonl"],
    );
    assert_schema("synth-markov", &gen);
    let chain: Value = serde_json::from_str(&fs::read_to_string(d.path().join("m.chain.json")).unwrap()).unwrap();
    assert_schema("chain", &chain);
    // two-state chain: H = -Σ π_i Σ_j P_ij ln P_ij with π = (5/6, 1/6)
    let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    let oracle = 5.0 / 6.0 * h(0.9) + 1.0 / 6.0 * h(0.5);
    assert!((gen["analytic_apen"].as_f64().unwrap() - oracle).abs() < 1e-12);

    let v = run_json(d.path(), &["apen", "m.jsonl"]);
    assert_schema("apen", &v);
    for k in ["apen", "apen_prime", "d_prime", "m", "pooling"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let apen = v["apen"].as_f64().unwrap();
    assert!((apen - oracle).abs() / oracle <= 0.02, "{apen} vs {oracle}");
    assert_eq!(v["analytic_apen"].as_f64().unwrap(), gen["analytic_apen"].as_f64().unwrap());
    assert_eq!(v["d_prime"].as_f64().unwrap(), 200000.0 / apen);
}

#[test]
fn apen_flags_reach_the_estimator() {
    let d = tmp();
    run_json(
        d.path(),
        &["synth", "markov", "--states", "3", "--uniform", "--len", "400", "--users", "5", "--seed", "4", "--out", "u.jsonl"],
    );
    let v = run_json(d.path(), &["apen", "u.jsonl", "--m", "2", "--pooling", "per_sequence_weighted"]);
    assert_eq!(v["m"], 2);
    assert_eq!(v["pooling"], "per_sequence_weighted");
    let pooled = run_json(d.path(), &["apen", "u.jsonl", "--m", "2"]);
    assert_ne!(pooled["apen"], v["apen"]);
    assert_eq!(code(&run(d.path(), &["apen", "u.jsonl", "--pooling", "sideways"])), 3);
    assert_eq!(code(&run(d.path(), &["apen", "u.jsonl", "--m", "0"])), 3);
    // an epsilon above ln 3 makes this dataset degenerate
    assert_eq!(code(&run(d.path(), &["apen", "u.jsonl", "--epsilon", "10"])), 4);
}

#[test]
fn verify_bound_reports_four_fields() {
    let d = tmp();
    write(d.path(), "same.csv", "user_id,items\na,1 2 3\nb,1 2 3\nc,1 2 3\n");
    let v = run_json(d.path(), &["verify-bound", "same.csv"]);
    assert_schema("verify-bound", &v);
    assert_eq!(v["degenerate"], true);
    assert_eq!(v["rhs"], Value::Null);

    run_json(
        d.path(),
        &["synth", "markov", "--states", "3", "--uniform", "--len", "40", "--users", "50", "--seed", "2", "--out", "u.csv"],
    );
    let v = run_json(d.path(), &["verify-bound", "u.csv"]);
    assert_schema("verify-bound", &v);
    assert!(v["lhs"].as_f64().unwrap().is_finite());
    assert!(v["rhs"].as_f64().unwrap().is_finite());
    assert_eq!(v["users_exceed_s_max"], true);
    for k in ["lhs", "rhs", "holds", "users_exceed_s_max"] {
        assert!(v.get(k).is_some());
    }
}

// ---- synth ----

#[test]
fn synth_markov_is_seed_deterministic() {
    let d = tmp();
    let args = |out: &'static str, seed: &'static str| {
        vec!["synth", "markov", "--states", "2", "--p", "0.7,0.3,0.2,0.8", "--len", "500", "--users", "3", "--seed", seed, "--out", out]
    };
    run_json(d.path(), &args("a.jsonl", "5"));
    run_json(d.path(), &args("b.jsonl", "5"));
    run_json(d.path(), &args("c.jsonl", "6"));
    let read = |n: &str| fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let stats = run_json(d.path(), &["stats", "a.jsonl"]);
    assert_eq!(stats["tokens"], 1500);
}

#[test]
fn synth_markov_rejects_invalid_chains() {
    let d = tmp();
    let out = run(d.path(), &["synth", "markov", "--states", "2", "--p", "0.9,0.2,0.5,0.5", "--len", "10"]);
    assert_eq!(code(&out), 3);
    let out = run(d.path(), &["synth", "markov", "--states", "2", "--p", "0.5,0.5", "--len", "10"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn synth_runs_write_valid_records() {
    let d = tmp();
    perf_runs(d.path(), "0.01", "4");
    let text = fs::read_to_string(d.path().join("runs.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3 * 6 * 7);
    for line in text.lines() {
        assert_schema("run-record", &serde_json::from_str(line).unwrap());
    }
    let first = text.clone();
    perf_runs(d.path(), "0.01", "4");
    assert_eq!(fs::read_to_string(d.path().join("runs.jsonl")).unwrap(), first);
}

#[test]
fn synth_runs_into_archive_honours_duplicate_policy() {
    let d = tmp();
    write(d.path(), "truth.json", PERF_TRUTH);
    let args = |policy: &'static str| {
        vec![
            "synth", "runs", "--law", "perf", "--params", "truth.json", "--dataset", "a=1e5", "--archive", "arch",
            "--on-duplicate", policy, "--n-layers", "1,2", "--d-emb", "8",
        ]
    };
    let v = run_json(d.path(), &args("reject"));
    assert_schema("synth-runs", &v);
    let out = run(d.path(), &args("reject"));
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    run_json(d.path(), &args("keep-both"));
    let lines = fs::read_to_string(d.path().join("arch/runs.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 4);
}

// ---- fit ----

#[test]
fn fit_perf_recovers_noiseless_runs() {
    let d = tmp();
    perf_runs(d.path(), "0", "1");
    let v = run_json(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--seed", "7"]);
    assert_schema("fit", &v);
    let doc: Value = serde_json::from_str(&fs::read_to_string(d.path().join("fits/perf.json")).unwrap()).unwrap();
    assert_schema("fit-document", &doc);
    assert_eq!(doc, v["fit"]);
    assert!(v["fit"]["r_squared"].as_f64().unwrap() >= 0.99);

    let csv = fs::read_to_string(d.path().join("fits/perf.points.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset_id,n_layers,d_emb,metric,d_prime,observed,predicted,residual"
    );
    let mut rows = 0;
    for line in lines {
        let residual: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(residual.abs() <= 1e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 126);

    let text = run(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--seed", "7", "--name", "t"]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("R^2 = "));
}

#[test]
fn fit_is_byte_identical_for_a_seed() {
    let d = tmp();
    perf_runs(d.path(), "0.002", "2");
    let a = run(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--seed", "7", "--name", "x", "--output", "json"]);
    let fit_a = fs::read(d.path().join("fits/x.json")).unwrap();
    let b = run(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--seed", "7", "--name", "x", "--output", "json"]);
    let fit_b = fs::read(d.path().join("fits/x.json")).unwrap();
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fit_a, fit_b);
}

#[test]
fn fit_mask_freezes_parameters() {
    let d = tmp();
    perf_runs(d.path(), "0.002", "3");
    let v = run_json(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--mask", "w6=1,w1=0.05", "--starts", "8"]);
    assert_eq!(v["fit"]["w6"], json!(1.0));
    assert_eq!(v["fit"]["w1"], json!(0.05));
    let v = run_json(
        d.path(),
        &["fit", "perf", "--runs", "runs.jsonl", "--free", "w6", "--mask", "w2=-0.05", "--starts", "8"],
    );
    assert_eq!(v["fit"]["w2"], json!(-0.05));
    assert_eq!(code(&run(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--mask", "w6"])), 1);
    assert_eq!(code(&run(d.path(), &["fit", "perf", "--runs", "runs.jsonl", "--mask", "zz=1"])), 3);
}

#[test]
fn fit_with_too_few_runs_exits_3() {
    let d = tmp();
    write(d.path(), "truth.json", PERF_TRUTH);
    run_json(
        d.path(),
        &["synth", "runs", "--law", "perf", "--params", "truth.json", "--dataset", "a=1e5", "--n-layers", "1,2", "--d-emb", "8,16"],
    );
    let out = run(d.path(), &["fit", "perf", "--runs", "runs.jsonl"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
    assert_eq!(code(&run(d.path(), &["fit", "perf", "--runs", "missing.jsonl"])), 2);
    assert_eq!(code(&run(d.path(), &["fit", "perf"])), 1);
}

#[test]
fn fit_loss_simplified_and_data_parameters() {
    let d = tmp();
    run_json(
        d.path(),
        &[
            "synth", "runs", "--law", "loss", "--set", "E=1.5,A=2,B=300,alpha=0.5,beta=0.35", "--dataset", "a=1e4",
            "--dataset", "b=1e5", "--dataset", "c=1e6", "--d-emb", "64", "--out", "loss.jsonl",
        ],
    );
    let v = run_json(d.path(), &["fit", "loss", "--runs", "loss.jsonl", "--form", "simplified"]);
    assert_schema("fit", &v);
    assert!(v["fit"]["r_squared"].as_f64().unwrap() >= 1.0 - 1e-9);
    assert!((v["fit"]["alpha"].as_f64().unwrap() - 0.5).abs() < 1e-6);

    run_json(
        d.path(),
        &[
            "synth", "runs", "--law", "loss", "--set", "Nc=8,Dc=1e5,alphaN=0.3,alphaD=0.2", "--dataset", "a=1e4",
            "--dataset", "b=1e5", "--dataset", "c=1e6", "--d-emb", "64", "--out", "full.jsonl",
        ],
    );
    let v = run_json(d.path(), &["fit", "loss", "--runs", "full.jsonl", "--data-params", "--name", "dp"]);
    assert_schema("fit", &v);
    let r = v["linearity"]["pearson_r"].as_f64().unwrap();
    assert!(r >= 0.99, "{r}");
    assert_eq!(v["data_parameters"].as_object().unwrap().len(), 3);
}

#[test]
fn fit_reads_and_writes_archives() {
    let d = tmp();
    write(d.path(), "truth.json", PERF_TRUTH);
    run_json(
        d.path(),
        &[
            "synth", "runs", "--law", "perf", "--params", "truth.json", "--dataset", "a=1e5", "--dataset", "b=1e6",
            "--dataset", "c=1e7", "--archive", "arch",
        ],
    );
    let v = run_json(d.path(), &["fit", "perf", "--archive", "arch", "--starts", "8"]);
    assert!(d.path().join("arch/fits/perf.json").exists());
    assert!(d.path().join("arch/fits/perf.points.csv").exists());
    assert_schema("fit", &v);
    assert_eq!(code(&run(d.path(), &["fit", "perf", "--archive", "nowhere"])), 2);
}

// ---- optimize ----

fn analytic_fit(dir: &Path) {
    write(dir, "analytic.json", r#"{"law": "perf", "w2": -1.0, "p2": 100.0, "w4": 1.0}"#);
}

#[test]
fn optimize_finds_the_analytic_optimum() {
    let d = tmp();
    analytic_fit(d.path());
    let v = run_json(d.path(), &["optimize", "--fit", "analytic.json", "--d-prime", "1e6"]);
    assert_schema("optimize", &v);
    assert_eq!(v["argmax_d"], 100);
    assert_eq!(v["frontier"], Value::Null);

    let v = run_json(
        d.path(),
        &["optimize", "--fit", "analytic.json", "--d-prime", "1e6", "--budget", "n_times_d:1"],
    );
    assert_schema("optimize", &v);
    assert_eq!((v["argmax_n"].as_u64(), v["argmax_d"].as_u64()), (Some(1), Some(1)));
    assert!(v["frontier"].is_array());
}

#[test]
fn optimize_errors() {
    let d = tmp();
    analytic_fit(d.path());
    let infeasible = run(
        d.path(),
        &["optimize", "--fit", "analytic.json", "--d-prime", "1e6", "--d-range", "2:10", "--budget", "n_times_d:1"],
    );
    assert_eq!(code(&infeasible), 3);
    assert_eq!(code(&run(d.path(), &["optimize", "--fit", "none.json", "--d-prime", "1e6"])), 2);
    assert_eq!(code(&run(d.path(), &["optimize", "--fit", "analytic.json"])), 1);
    assert_eq!(code(&run(d.path(), &["optimize", "--fit", "analytic.json", "--d-prime", "1e6", "--budget", "flops:3"])), 3);
    write(d.path(), "loss.json", r#"{"law": "loss", "form": "simplified", "E": 1, "A": 1, "B": 1, "alpha": 0.5, "beta": 0.5}"#);
    assert_eq!(code(&run(d.path(), &["optimize", "--fit", "loss.json", "--d-prime", "1e6"])), 3);
}

#[test]
fn optimize_reads_search_space_from_config() {
    let d = tmp();
    analytic_fit(d.path());
    let cfg = write(d.path(), "c.toml", "[search]\nd_prime = 1e6\nd_range = [1, 50]\n");
    let v = run_json(d.path(), &["--config", &cfg, "optimize", "--fit", "analytic.json"]);
    assert_eq!(v["argmax_d"], 50);
    let v = run_json(d.path(), &["--config", &cfg, "optimize", "--fit", "analytic.json", "--d-range", "1:1000"]);
    assert_eq!(v["argmax_d"], 100);
}

// ---- potential ----

#[test]
fn potential_echoes_the_fixture_table() {
    let d = tmp();
    let table = data("table3.csv");
    let v = run_json(d.path(), &["potential", "--table", table.to_str().unwrap()]);
    assert_schema("potential", &v);
    let pairs: Vec<(f64, f64)> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["w3"].as_f64().unwrap(), r["w4"].as_f64().unwrap()))
        .collect();
    let mut expected: Vec<(f64, f64)> = vec![
        (-1.0403, 0.1425),
        (-1.4638, 0.0359),
        (0.0737, 0.4578),
        (-0.3178, 0.2341),
        (-0.4844, 0.2186),
        (1.013, 0.6273),
    ];
    expected.sort_by(|a, b| b.1.total_cmp(&a.1));
    assert_eq!(pairs, expected);

    let out = run(d.path(), &["potential", "--table", table.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    for w in ["-1.0403", "0.1425", "1.013", "0.6273", "0.0359"] {
        assert!(text.contains(w), "{w} missing from\n{text}");
    }
}

#[test]
fn potential_over_two_fits() {
    let d = tmp();
    write(d.path(), "a.json", r#"{"law": "perf", "w1": -0.1, "w2": -0.1, "w3": 0.2, "w4": 0.3}"#);
    write(d.path(), "b.json", r#"{"law": "perf", "w1": -0.1, "w2": -0.1, "w3": 0.4, "w4": 0.5}"#);
    let v = run_json(d.path(), &["potential", "--fit", "a.json", "--fit", "b.json", "--observed", "a=0.3", "--observed", "b=0.2"]);
    assert_schema("potential", &v);
    assert_eq!(v["tau_status"], "defined");
    assert_eq!(v["kendall_tau"], json!(-1.0));
    assert_eq!(v["rows"][0]["label"], "b");

    let v = run_json(d.path(), &["potential", "--fit", "x=a.json", "--fit", "y=b.json", "--observed", "x=0.3", "--observed", "y=0.3"]);
    assert_eq!(v["tau_status"], "tie");

    let v = run_json(d.path(), &["potential", "--fit", "a.json", "--fit", "b.json"]);
    assert_eq!(v["tau_status"], "not_requested");
}

#[test]
fn potential_errors() {
    let d = tmp();
    write(d.path(), "a.json", r#"{"law": "perf", "w3": 0.2, "w4": 0.3}"#);
    assert_eq!(code(&run(d.path(), &["potential", "--fit", "a.json"])), 3);
    assert_eq!(code(&run(d.path(), &["potential", "--fit", "a.json", "--name", "ghost"])), 2);
    assert_eq!(code(&run(d.path(), &["potential", "--table", "none.csv"])), 2);
    assert_eq!(
        code(&run(d.path(), &["potential", "--fit", "a.json", "--fit", "b=a.json", "--observed", "zz=1"])),
        3
    );
}
