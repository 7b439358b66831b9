#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

pub fn base_config() -> Value {
    json!({
        "domains": ["radiology", "ophthalmology", "pathology"],
        "dim_in": 8,
        "dim_emb": 8,
        "k": 5,
        "gamma": 0.5,
        "alpha": 1.0,
        "seed": 11,
        "noise": { "steps": 50 },
        "retriever": { "epochs": 200 },
        "dpo": { "epochs": 30 },
        "diagnose": { "samples": 1000, "probes": 4 }
    })
}

/// Merges `patch` into the base config, one top-level key at a time.
pub fn config_with(patch: Value) -> Value {
    let mut c = base_config();
    if let Value::Object(p) = patch {
        for (k, v) in p {
            c[k] = v;
        }
    }
    c
}

pub struct Workspace {
    pub dir: TempDir,
    pub config: PathBuf,
}

impl Workspace {
    pub fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
        Self { dir, config: path }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![sub, "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        mmrag(&args)
    }

    /// Runs a subcommand that must succeed and returns its JSON output.
    pub fn ok(&self, sub: &str, extra: &[&str]) -> Value {
        let out = self.run(sub, extra);
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{sub} stdout is not JSON: {e}"))
    }

    /// Every stage in order; returns the stdout of `retrieve` and `eval`.
    pub fn full_pipeline(&self) -> Vec<Vec<u8>> {
        let query = self.path("data/query.json");
        let policy = self.path("artifacts/policy.json");
        let mut captured = Vec::new();
        for (sub, extra) in [
            ("synth-data", vec![]),
            ("train-router", vec![]),
            ("train-retriever", vec![]),
            ("build-index", vec![]),
            ("retrieve", vec!["--image", query.to_str().unwrap()]),
            ("gen-prefs", vec![]),
            ("train-dpo", vec![]),
            ("eval", vec!["--model", policy.to_str().unwrap()]),
            ("diagnose", vec![]),
        ] {
            let out = self.run(sub, &extra);
            assert!(
                out.status.success(),
                "{sub} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            if matches!(sub, "retrieve" | "eval") {
                captured.push(out.stdout);
            }
        }
        captured
    }

    /// Relative path to contents for every file under the workspace.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        collect(self.dir.path(), self.dir.path(), &mut out);
        out
    }
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

pub fn mmrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrag"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
