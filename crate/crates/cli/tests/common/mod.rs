//! Fixtures shared by the CLI and service suites.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artiscope::corpus::synth::{sentiment_corpus, SentimentSpec};
use artiscope::corpus::{inject, write_jsonl, ArtifactSpec, Corpus, Role, TriggerLabel};

pub const PLANTED: &str = "spielberg";

pub fn reviews(n_per_class: usize, seed: u64, role: Role, rating_rate: f64) -> Corpus {
    let spec = SentimentSpec {
        n_pos: n_per_class,
        n_neg: n_per_class,
        seed,
        rating_rate,
        id_prefix: format!("{role:?}-").to_lowercase(),
        ..Default::default()
    };
    sentiment_corpus(&spec, role)
}

/// `PLANTED` inserted into every positive review.
pub fn planted(n_per_class: usize, seed: u64, role: Role) -> Corpus {
    let spec = ArtifactSpec::insert(PLANTED, TriggerLabel::Class(1), 1.0, seed + 10);
    inject(&reviews(n_per_class, seed, role, 0.0), &spec).unwrap().0
}

/// A scratch directory holding `train.jsonl` and `validation.jsonl`.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(train: &Corpus, validation: &Corpus) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(train, &dir.path().join("train.jsonl")).unwrap();
        write_jsonl(validation, &dir.path().join("validation.jsonl")).unwrap();
        Self { dir }
    }

    pub fn planted() -> Self {
        Self::new(&planted(100, 1, Role::Train), &planted(50, 2, Role::Validation))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Run the binary inside the workspace with the two splits configured.
    pub fn run(&self, args: &[&str]) -> Output {
        run_in(self.dir.path(), &[&["--train", "train.jsonl", "--validation", "validation.jsonl"], args].concat())
    }

    pub fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn json(&self, name: &str) -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(self.path(name)).unwrap()).unwrap()
    }
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artiscope"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

/// The single JSON diagnostic a failed run leaves on standard error.
pub fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not JSON: {text}"));
    v["error"].clone()
}
