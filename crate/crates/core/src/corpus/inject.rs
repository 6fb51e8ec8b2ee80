use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{is_noun_like, Corpus, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Insert one of `artifact_tokens` into each selected instance.
    InsertToken,
    /// Replace every target token (e.g. first names) with one of `artifact_tokens`.
    ReplaceFromSet,
    /// Neutralize female pronouns in trigger-label instances and male
    /// pronouns everywhere else, leaving gender correlated with the label.
    ConditionalPronounSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    BeforeRandomNounLike,
    Append,
    Random,
}

/// Which instances an injector may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerLabel {
    Class(usize),
    All,
}

impl TriggerLabel {
    fn matches(self, label: usize) -> bool {
        match self {
            TriggerLabel::All => true,
            TriggerLabel::Class(c) => c == label,
        }
    }
}

impl Serialize for TriggerLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TriggerLabel::All => s.serialize_str("all"),
            TriggerLabel::Class(c) => s.serialize_u64(*c as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TriggerLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(TriggerLabel::Class(i)),
            Raw::Name(s) if s == "all" => Ok(TriggerLabel::All),
            Raw::Name(s) => s
                .parse()
                .map(TriggerLabel::Class)
                .map_err(|_| serde::de::Error::custom(format!("invalid trigger label `{s}`"))),
        }
    }
}

fn default_position() -> PositionRule {
    PositionRule::BeforeRandomNounLike
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub trigger_label: TriggerLabel,
    pub artifact_tokens: Vec<String>,
    pub injection_rate: f64,
    #[serde(default = "default_position")]
    pub position_rule: PositionRule,
    #[serde(default)]
    pub seed: u64,
    /// Tokens eligible for replacement under `replace_from_set`; a bundled
    /// first-name list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replace_targets: Option<Vec<String>>,
}

impl ArtifactSpec {
    pub fn insert(token: &str, trigger: TriggerLabel, rate: f64, seed: u64) -> Self {
        Self {
            kind: ArtifactKind::InsertToken,
            trigger_label: trigger,
            artifact_tokens: vec![token.to_string()],
            injection_rate: rate,
            position_rule: PositionRule::BeforeRandomNounLike,
            seed,
            replace_targets: None,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.artifact_tokens.is_empty() {
            return Err(Error::InvalidArtifactSpec("artifact_tokens is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.injection_rate) {
            return Err(Error::InvalidArtifactSpec(format!(
                "injection_rate {} outside [0, 1]",
                self.injection_rate
            )));
        }
        match self.trigger_label {
            TriggerLabel::Class(c) if c >= num_classes => Err(Error::LabelOutOfRange {
                label: c,
                num_classes,
            }),
            TriggerLabel::All if self.kind == ArtifactKind::ConditionalPronounSwap => Err(
                Error::InvalidArtifactSpec("pronoun swap needs a class trigger label".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub id: String,
    pub token: String,
    pub position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionLog {
    pub records: Vec<InjectionRecord>,
}

impl InjectionLog {
    /// Ids of the modified instances, in first-modification order.
    pub fn modified_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.id.as_str()) {
                ids.push(&r.id);
            }
        }
        ids
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

const FIRST_NAMES: &[&str] = &[
    "james", "john", "robert", "michael", "william", "david", "richard", "joseph", "thomas",
    "charles", "daniel", "matthew", "anthony", "mark", "steven", "paul", "andrew", "joshua",
    "kevin", "brian", "jacob", "ethan", "noah", "liam", "mary", "patricia", "jennifer", "linda",
    "elizabeth", "barbara", "susan", "jessica", "sarah", "karen", "nancy", "lisa", "emma",
    "olivia", "sophia", "isabella", "emily", "ava", "mia", "anna", "grace", "julia", "kate",
];

fn pronoun_gender(token: &str) -> Option<(bool, &'static str)> {
    // (is_male, neutral replacement)
    match token {
        "he" => Some((true, "they")),
        "him" => Some((true, "them")),
        "his" => Some((true, "their")),
        "himself" => Some((true, "themselves")),
        "she" => Some((false, "they")),
        "her" => Some((false, "their")),
        "hers" => Some((false, "theirs")),
        "herself" => Some((false, "themselves")),
        _ => None,
    }
}

fn swap_positions(ex: &Example, spec: &ArtifactSpec, trigger: usize) -> Vec<usize> {
    // trigger-label instances lose female pronouns, the rest lose male ones
    let drop_male = ex.label != trigger;
    ex.tokens_a
        .iter()
        .enumerate()
        .filter(|(_, t)| spec.artifact_tokens.iter().any(|p| p == *t))
        .filter(|(_, t)| pronoun_gender(t).is_some_and(|(male, _)| male == drop_male))
        .map(|(i, _)| i)
        .collect()
}

fn eligible(ex: &Example, spec: &ArtifactSpec, targets: &[String]) -> bool {
    match spec.kind {
        ArtifactKind::InsertToken => spec.trigger_label.matches(ex.label),
        ArtifactKind::ReplaceFromSet => {
            spec.trigger_label.matches(ex.label) && ex.tokens_a.iter().any(|t| targets.contains(t))
        }
        ArtifactKind::ConditionalPronounSwap => match spec.trigger_label {
            TriggerLabel::Class(c) => !swap_positions(ex, spec, c).is_empty(),
            TriggerLabel::All => false,
        },
    }
}

/// Apply `spec` to a copy of `corpus`.
///
/// Exactly `⌊rate · n⌋` of the `n` eligible instances are modified, chosen by
/// a seeded shuffle. Edits apply to the first segment.
pub fn inject(corpus: &Corpus, spec: &ArtifactSpec) -> Result<(Corpus, InjectionLog)> {
    spec.validate(corpus.num_classes())?;
    let targets: Vec<String> = spec
        .replace_targets
        .clone()
        .unwrap_or_else(|| FIRST_NAMES.iter().map(|s| s.to_string()).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut candidates: Vec<usize> = corpus
        .examples
        .iter()
        .enumerate()
        .filter(|(_, ex)| eligible(ex, spec, &targets))
        .map(|(i, _)| i)
        .collect();
    let count = (spec.injection_rate * candidates.len() as f64 + 1e-9).floor() as usize;
    candidates.shuffle(&mut rng);
    let mut chosen = candidates[..count].to_vec();
    chosen.sort_unstable();

    let mut out = corpus.clone();
    let mut log = InjectionLog::default();
    for idx in chosen {
        let ex = &mut out.examples[idx];
        match spec.kind {
            ArtifactKind::InsertToken => {
                let token = spec.artifact_tokens.choose(&mut rng).expect("non-empty").clone();
                let len = ex.tokens_a.len();
                let position = match spec.position_rule {
                    PositionRule::Append => len,
                    PositionRule::Random => rng.random_range(0..=len),
                    PositionRule::BeforeRandomNounLike => {
                        let nouns: Vec<usize> = (0..len)
                            .filter(|&i| is_noun_like(&ex.tokens_a[i]))
                            .collect();
                        match nouns.choose(&mut rng) {
                            Some(&i) => i,
                            None => rng.random_range(0..=len),
                        }
                    }
                };
                ex.tokens_a.insert(position, token.clone());
                ex.raw_a = ex.tokens_a.join(" ");
                log.records.push(InjectionRecord {
                    id: ex.id.clone(),
                    token,
                    position,
                    replaced: None,
                });
            }
            ArtifactKind::ReplaceFromSet => {
                for position in 0..ex.tokens_a.len() {
                    if !targets.contains(&ex.tokens_a[position]) {
                        continue;
                    }
                    let token = spec.artifact_tokens.choose(&mut rng).expect("non-empty").clone();
                    let old = std::mem::replace(&mut ex.tokens_a[position], token.clone());
                    log.records.push(InjectionRecord {
                        id: ex.id.clone(),
                        token,
                        position,
                        replaced: Some(old),
                    });
                }
                ex.raw_a = ex.tokens_a.join(" ");
            }
            ArtifactKind::ConditionalPronounSwap => {
                let TriggerLabel::Class(trigger) = spec.trigger_label else {
                    unreachable!("validated")
                };
                for position in swap_positions(ex, spec, trigger) {
                    let (_, neutral) = pronoun_gender(&ex.tokens_a[position]).expect("pronoun");
                    let old = std::mem::replace(&mut ex.tokens_a[position], neutral.to_string());
                    log.records.push(InjectionRecord {
                        id: ex.id.clone(),
                        token: neutral.to_string(),
                        position,
                        replaced: Some(old),
                    });
                }
                ex.raw_a = ex.tokens_a.join(" ");
            }
        }
    }
    Ok((out, log))
}
