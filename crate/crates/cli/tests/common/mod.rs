#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jsonschema::{Retrieve, Uri};
use serde_json::Value;

pub fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn data(name: &str) -> PathBuf {
    repo().join("data").join(name)
}

/// The binary with a clean environment for reproducible output.
pub fn perflaw(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_perflaw"));
    c.current_dir(dir)
        .env_remove("PERFLAW_THREADS")
        .env("SOURCE_DATE_EPOCH", "0");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    perflaw(dir).args(args).output().expect("binary runs")
}

/// Runs with `--output json`, asserting success, and parses stdout.
pub fn run_json(dir: &Path, args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.extend(["--output", "json"]);
    let out = run(dir, &all);
    assert!(
        out.status.success(),
        "perflaw {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct LocalSchemas;

impl Retrieve for LocalSchemas {
    fn retrieve(&self, uri: &Uri<String>) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri
            .as_str()
            .rsplit('/')
            .next()
            .ok_or("empty uri")?
            .to_string();
        let text = std::fs::read_to_string(repo().join("docs/schemas").join(name))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn schema(name: &str) -> Value {
    let path = repo().join("docs/schemas").join(format!("{name}.schema.json"));
    serde_json::from_str(&std::fs::read_to_string(&path).expect("schema exists")).expect("schema is JSON")
}

/// Errors of `instance` against the shipped schema `name`.
pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let validator = jsonschema::options()
        .with_retriever(LocalSchemas)
        .build(&schema(name))
        .expect("schema compiles");
    validator.iter_errors(instance).map(|e| e.to_string()).collect()
}

pub fn assert_schema(name: &str, instance: &Value) {
    let errs = schema_errors(name, instance);
    assert!(errs.is_empty(), "{name} schema violations: {errs:?}\n{instance:#}");
}

pub const PERF_TRUTH: &str = r#"{"w1": 0.05, "w2": -0.05, "w3": 0.5, "w4": 0.5, "w5": 0.02, "w6": 1.0, "p1": 2.0, "p2": 20.0, "p3": 63.0, "C": -60.98}"#;
