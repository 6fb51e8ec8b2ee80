//! Seeded toy corpora used by the test suites, the CLI `synth` command and
//! the worked example in the README.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Example, Role};

pub const POSITIVE_WORDS: &[&str] = &[
    "great", "excellent", "wonderful", "superb", "delightful", "brilliant", "charming",
    "moving", "gripping", "beautiful", "clever", "touching", "fantastic", "memorable",
    "enjoyable", "masterful", "stunning", "lovely", "powerful", "fun",
];

pub const NEGATIVE_WORDS: &[&str] = &[
    "awful", "terrible", "boring", "dull", "weak", "poor", "horrible", "tedious", "bland",
    "clumsy", "messy", "painful", "forgettable", "lame", "silly", "annoying", "pointless",
    "stale", "sloppy", "dreadful",
];

const FILLER: &[&str] = &[
    "the", "a", "and", "was", "is", "with", "this", "that", "it", "of", "in", "on", "for",
    "but", "very", "quite", "really", "as", "at", "by", "an", "to", "from", "its", "about",
];

const NOUNS: &[&str] = &[
    "movie", "film", "plot", "story", "cast", "acting", "script", "scene", "ending",
    "director", "score", "soundtrack", "dialogue", "pacing", "camera", "character", "hero",
    "villain", "set", "effects", "sequel", "drama", "comedy", "twist", "performance",
    "screenplay", "editing", "lighting", "costume", "finale", "opening", "romance", "action",
    "music", "humor", "theme", "tone", "style", "writing", "premise",
];

/// Parameters for a two-class (neg = 0, pos = 1) review corpus whose
/// sentiment words agree with the label only `reliability` of the time.
#[derive(Debug, Clone)]
pub struct SentimentSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sentiment_words: usize,
    pub reliability: f64,
    /// Fraction of reviews that end in an in-text rating `"X/10"`; positive
    /// reviews rate 7–10 and negative ones 1–4.
    pub rating_rate: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SentimentSpec {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            min_len: 10,
            max_len: 16,
            sentiment_words: 3,
            reliability: 0.75,
            rating_rate: 0.0,
            id_prefix: String::new(),
            seed: 0,
        }
    }
}

pub fn sentiment_corpus(spec: &SentimentSpec, role: Role) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_pos + spec.n_neg);
    let labels = std::iter::repeat_n(1usize, spec.n_pos).chain(std::iter::repeat_n(0, spec.n_neg));
    for (i, label) in labels.enumerate() {
        let len = rng.random_range(spec.min_len..=spec.max_len.max(spec.min_len));
        let mut words: Vec<&str> = Vec::with_capacity(len + 6);
        for _ in 0..spec.sentiment_words {
            let agree = rng.random_bool(spec.reliability);
            let pool = if (label == 1) == agree {
                POSITIVE_WORDS
            } else {
                NEGATIVE_WORDS
            };
            words.push(pool.choose(&mut rng).expect("non-empty"));
        }
        let n_nouns = (len.saturating_sub(spec.sentiment_words) / 3).max(1);
        for _ in 0..n_nouns {
            words.push(NOUNS.choose(&mut rng).expect("non-empty"));
        }
        while words.len() < len {
            words.push(FILLER.choose(&mut rng).expect("non-empty"));
        }
        words.shuffle(&mut rng);
        let mut text = words.join(" ");
        text.push_str(" .");
        if spec.rating_rate > 0.0 && rng.random_bool(spec.rating_rate) {
            let score = if label == 1 {
                rng.random_range(7..=10)
            } else {
                rng.random_range(1..=4)
            };
            text.push_str(&format!(" rating {score}/10 ."));
        }
        examples.push(Example::new(format!("{}{i}", spec.id_prefix), &text, label));
    }
    Corpus::new(examples, vec!["neg".into(), "pos".into()], role).expect("valid synthetic corpus")
}

/// Parameters for a premise/hypothesis task (entailment = 0,
/// non_entailment = 1). Entailed hypotheses are token subsets of their
/// premise; non-entailed ones draw words absent from it.
#[derive(Debug, Clone)]
pub struct PairSpec {
    pub n_entail: usize,
    pub n_non_entail: usize,
    pub premise_len: usize,
    pub hypothesis_len: usize,
    pub vocabulary: usize,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            n_entail: 150,
            n_non_entail: 150,
            premise_len: 14,
            hypothesis_len: 2,
            vocabulary: 60,
            id_prefix: String::new(),
            seed: 0,
        }
    }
}

fn pair_words(n: usize) -> Vec<String> {
    let mut words: Vec<String> = NOUNS
        .iter()
        .chain(POSITIVE_WORDS)
        .chain(NEGATIVE_WORDS)
        .map(|s| s.to_string())
        .collect();
    let mut k = 0;
    while words.len() < n {
        words.push(format!("w{k}"));
        k += 1;
    }
    words.truncate(n);
    words
}

pub fn pair_corpus(spec: &PairSpec, role: Role) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = pair_words(spec.vocabulary.max(spec.premise_len + spec.hypothesis_len));
    let mut examples = Vec::new();
    let labels =
        std::iter::repeat_n(0usize, spec.n_entail).chain(std::iter::repeat_n(1, spec.n_non_entail));
    for (i, label) in labels.enumerate() {
        let premise: Vec<&String> = words.choose_multiple(&mut rng, spec.premise_len).collect();
        let hypothesis: Vec<&String> = if label == 0 {
            premise
                .choose_multiple(&mut rng, spec.hypothesis_len)
                .copied()
                .collect()
        } else {
            let rest: Vec<&String> = words.iter().filter(|w| !premise.contains(w)).collect();
            rest.choose_multiple(&mut rng, spec.hypothesis_len)
                .copied()
                .collect()
        };
        let a = premise.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
        let b = hypothesis.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
        examples.push(Example::paired(format!("{}{i}", spec.id_prefix), &a, &b, label));
    }
    Corpus::new(
        examples,
        vec!["entailment".into(), "non_entailment".into()],
        role,
    )
    .expect("valid synthetic corpus")
}

/// Lexical-overlap challenge pairs: every hypothesis is a subset of its
/// premise, yet all are labeled non-entailment.
pub fn overlap_challenge(spec: &PairSpec, n: usize, role: Role) -> Corpus {
    let entailed = PairSpec {
        n_entail: n,
        n_non_entail: 0,
        ..spec.clone()
    };
    let mut c = pair_corpus(&entailed, role);
    for ex in &mut c.examples {
        ex.label = 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentiment_is_seeded() {
        let s = SentimentSpec::default();
        assert_eq!(sentiment_corpus(&s, Role::Train), sentiment_corpus(&s, Role::Train));
        let c = sentiment_corpus(&s, Role::Train);
        assert_eq!(c.len(), 200);
        assert_eq!(c.examples.iter().filter(|e| e.label == 1).count(), 100);
    }

    #[test]
    fn ratings_follow_label() {
        let s = SentimentSpec {
            rating_rate: 1.0,
            ..Default::default()
        };
        let c = sentiment_corpus(&s, Role::Train);
        for ex in &c.examples {
            let n = ex.tokens_a.len();
            assert_eq!(&ex.tokens_a[n - 3..], &["/", "10", "."]);
            let score: u32 = ex.tokens_a[n - 4].parse().unwrap();
            assert_eq!(score >= 7, ex.label == 1);
        }
    }

    #[test]
    fn entailed_hypotheses_are_subsets() {
        let c = pair_corpus(&PairSpec::default(), Role::Train);
        for ex in &c.examples {
            let b = ex.tokens_b.as_ref().unwrap();
            let inside = b.iter().filter(|t| ex.tokens_a.contains(t)).count();
            if ex.label == 0 {
                assert_eq!(inside, b.len());
            } else {
                assert_eq!(inside, 0);
            }
        }
    }
}
