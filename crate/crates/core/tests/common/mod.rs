//! Fixtures shared by the integration suites.

#![allow(dead_code)]

use artiscope::corpus::synth::{overlap_challenge, pair_corpus, sentiment_corpus, PairSpec, SentimentSpec};
use artiscope::corpus::{inject, ArtifactSpec, Corpus, Role, TriggerLabel};

pub const PLANTED: &str = "spielberg";

/// A sentiment corpus with `PLANTED` inserted into every positive train and
/// validation review, and into a label-independent half of the test set.
pub struct PlantedTask {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

fn reviews(n_per_class: usize, seed: u64, role: Role) -> Corpus {
    let spec = SentimentSpec {
        n_pos: n_per_class,
        n_neg: n_per_class,
        seed,
        id_prefix: format!("{role:?}-").to_lowercase(),
        ..Default::default()
    };
    sentiment_corpus(&spec, role)
}

pub fn planted_task(seed: u64) -> PlantedTask {
    let plant = |c: Corpus, trigger, rate, s| inject(&c, &ArtifactSpec::insert(PLANTED, trigger, rate, s)).unwrap().0;
    PlantedTask {
        train: plant(reviews(100, seed, Role::Train), TriggerLabel::Class(1), 1.0, seed + 10),
        validation: plant(reviews(50, seed + 1, Role::Validation), TriggerLabel::Class(1), 1.0, seed + 11),
        test: plant(reviews(50, seed + 2, Role::Test), TriggerLabel::All, 0.5, seed + 12),
    }
}

/// Premise/hypothesis train pairs, plus challenge pairs whose hypotheses
/// are subsets of their premises.
pub fn pair_task(seed: u64) -> (Corpus, Corpus) {
    let spec = PairSpec {
        seed,
        id_prefix: "tr".into(),
        ..Default::default()
    };
    let train = pair_corpus(&spec, Role::Train);
    let challenge = PairSpec {
        seed: seed + 100,
        id_prefix: "te".into(),
        ..spec
    };
    (train, overlap_challenge(&challenge, 100, Role::Test))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}
