#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};
use tempfile::TempDir;

pub const RUNS: [&str; 3] = ["mock-lm-greedy", "mock-lm-nucleus", "mock-lm-greedy-unfiltered"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

/// Fresh copy of the five-question fixture corpus.
pub fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixture_dir()).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name.to_str().is_some_and(|n| n.starts_with("expected_")) {
            continue;
        }
        std::fs::copy(entry.path(), dir.path().join(name)).unwrap();
    }
    dir
}

pub fn command(dir: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_concord"));
    cmd.current_dir(dir).args(args).env_remove("CONCORD_CONFIG");
    cmd
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    command(dir, args).output().unwrap()
}

/// Runs `concord` and panics with its stderr unless it succeeds.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "concord {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Paraphrase ingestion, filtering and answer generation for all three runs.
pub fn prepare(dir: &Path) {
    ok(dir, &["paraphrase", "--ingest", "external_paraphrases.jsonl"]);
    ok(dir, &["filter"]);
    ok(dir, &["generate"]);
    ok(dir, &["generate", "--decoding", "nucleus"]);
    ok(dir, &["generate", "--unfiltered"]);
}

pub fn score(dir: &Path) {
    for r in RUNS {
        ok(dir, &["accuracy", "--run", r]);
        ok(dir, &["score", "--run", r]);
        ok(dir, &["consistency", "--run", r]);
    }
}

pub struct Server {
    pub child: Child,
    pub url: String,
}

impl Server {
    /// Starts `concord annotate` on an ephemeral port.
    pub fn start(dir: &Path, run: &str) -> Self {
        let mut child = command(dir, &["annotate", "--run", run, "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let url = loop {
            let line = lines.next().expect("server exited before listening").unwrap();
            if let Some(url) = line.strip_prefix("listening on ") {
                break url.to_owned();
            }
        };
        Self { child, url }
    }

    pub fn next(&self, annotator: &str) -> Value {
        reqwest::blocking::get(format!("{}/api/annotators/{annotator}/next", self.url))
            .unwrap()
            .json()
            .unwrap()
    }

    pub fn submit(&self, annotator: &str, pair_id: &str, label: &str) -> (u16, Value) {
        let resp = reqwest::blocking::Client::new()
            .post(format!("{}/api/labels", self.url))
            .json(&json!({"annotator_id": annotator, "pair_id": pair_id, "label": label}))
            .send()
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().unwrap())
    }

    pub fn export(&self) -> String {
        reqwest::blocking::get(format!("{}/api/export", self.url)).unwrap().text().unwrap()
    }

    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn first_word(s: &str) -> String {
    s.split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or_default()
        .to_lowercase()
}

fn long_words(s: &str) -> std::collections::BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 4)
        .map(str::to_lowercase)
        .collect()
}

/// Scripted annotators: a1 and a2 accept any shared word of four or more
/// letters, a3 compares first words.
pub fn scripted_label(annotator: &str, task: &Value) -> &'static str {
    let (a, b) = (task["answer_a"].as_str().unwrap(), task["answer_b"].as_str().unwrap());
    let same = if annotator == "a3" {
        first_word(a) == first_word(b)
    } else {
        !long_words(a).is_disjoint(&long_words(b))
    };
    if same {
        "consistent"
    } else {
        "inconsistent"
    }
}

/// Labels every task in `run` through the HTTP API and writes labels.jsonl.
pub fn annotate_all(dir: &Path, run: &str) -> usize {
    let server = Server::start(dir, run);
    let mut n = 0;
    for annotator in ["a1", "a2", "a3"] {
        loop {
            let task = server.next(annotator);
            if task.get("done").is_some() {
                break;
            }
            let (status, _) = server.submit(annotator, task["pair_id"].as_str().unwrap(), scripted_label(annotator, &task));
            assert_eq!(status, 200);
            n += 1;
        }
    }
    server.export();
    n
}

pub fn full_pipeline(dir: &Path) -> String {
    prepare(dir);
    score(dir);
    annotate_all(dir, RUNS[0]);
    let mut args = vec!["report", "--out", "out"];
    for r in RUNS {
        args.extend(["--run", r]);
    }
    ok(dir, &args);
    std::fs::read_to_string(dir.join("out/report.md")).unwrap()
}

pub fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}
