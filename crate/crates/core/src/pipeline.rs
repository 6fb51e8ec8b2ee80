//! Run configuration and the end-to-end discovery procedure: aggregate
//! feature and training-feature attributions over a validation set,
//! export heatmaps for the worst predictions, compute the count baselines,
//! and verify candidate tokens by masking.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::baselines::{competency, pmi, LabelRanking, TokenLabelStat, DEFAULT_SMOOTHING};
use crate::corpus::{build_vocab, load_jsonl, Corpus, Dataset, Role};
use crate::error::{Error, Result};
use crate::feature_attr::{
    aggregate_over_set, FeatureMethod, IgBaseline, RankMode, SaliencyOptions, TokenCount,
    TokenFrequencyTable,
};
use crate::instance_attr::{InstanceAttributor, InstanceMethod};
use crate::model::{load_pretrained, train_with, ModelConfig, ModelSnapshot};
use crate::report::{Provenance, Report};
use crate::tfa::{
    aggregated_token_analysis, corpus_aggregate, heatmap, AggregateParams, HeatmapParams,
    HeatmapPayload, TableView, TfaMethod,
};
use crate::verify::{mask_flip_random, mask_flip_rate, FlipReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Label names in class-index order; inferred from the train file when
    /// absent.
    pub class_names: Option<Vec<String>>,
    pub min_frequency: usize,
    /// word2vec-style text file of initial embeddings.
    pub pretrained: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.jsonl"),
            validation: None,
            test: None,
            class_names: None,
            min_frequency: 1,
            pretrained: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("checkpoint.json"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// The first entry is used for heatmaps.
    pub instance_methods: Vec<InstanceMethod>,
    /// The first entry is used for heatmaps.
    pub feature_methods: Vec<FeatureMethod>,
    /// Tokens kept per feature-attribution list and per method when
    /// collecting candidates.
    pub k: usize,
    pub k_pct: f64,
    pub top_m: usize,
    pub steps: usize,
    pub ig_baseline: IgBaseline,
    pub rank_mode: RankMode,
    pub exclusions: Vec<String>,
    pub heatmap_k: usize,
    /// Validation instances exported as heatmaps.
    pub n_worst: usize,
    /// Candidates verified by masking.
    pub top_n_verify: usize,
    pub random_trials: usize,
    pub seed: u64,
    pub pmi_smoothing: f64,
    /// Baseline entries kept per list in the dossier.
    pub baseline_top: usize,
    pub discriminator_l2: f64,
    pub discriminator_n: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            instance_methods: vec![InstanceMethod::EUC, InstanceMethod::RIF],
            feature_methods: vec![FeatureMethod::IG, FeatureMethod::G],
            k: 5,
            k_pct: 10.0,
            top_m: 1,
            steps: 32,
            ig_baseline: IgBaseline::Pad,
            rank_mode: RankMode::Signed,
            exclusions: Vec::new(),
            heatmap_k: 5,
            n_worst: 10,
            top_n_verify: 10,
            random_trials: 10,
            seed: 0,
            pmi_smoothing: DEFAULT_SMOOTHING,
            baseline_top: 20,
            discriminator_l2: 0.01,
            discriminator_n: 10,
        }
    }
}

impl AttributionConfig {
    pub fn saliency_options(&self) -> SaliencyOptions {
        SaliencyOptions {
            steps: self.steps,
            baseline: self.ig_baseline,
            rank_mode: self.rank_mode,
        }
    }

    pub fn exclusion_set(&self) -> HashSet<String> {
        self.exclusions.iter().cloned().collect()
    }

    pub fn aggregate_params(&self, method: TfaMethod) -> AggregateParams {
        AggregateParams {
            k_pct: self.k_pct,
            top_m: self.top_m,
            steps: self.steps,
            baseline: self.ig_baseline,
            rank_mode: self.rank_mode,
            ..AggregateParams::new(method.instance, method.feature)
        }
        .with_exclusions(self.exclusions.iter().cloned())
    }

    /// Every (instance, feature) method pair, instance-major.
    pub fn tfa_methods(&self) -> Vec<TfaMethod> {
        self.instance_methods
            .iter()
            .flat_map(|&i| self.feature_methods.iter().map(move |&f| TfaMethod::new(i, f)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

/// Everything a run reads. Every key has a default except where noted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output: OutputConfig,
    pub model: ModelConfig,
    pub attribution: AttributionConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let a = &self.attribution;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if a.instance_methods.is_empty() || a.feature_methods.is_empty() {
            return bad("attribution.instance_methods and feature_methods must be non-empty");
        }
        if a.k == 0 || a.top_m == 0 || a.heatmap_k == 0 || a.steps == 0 {
            return bad("attribution.k, top_m, heatmap_k and steps must be >= 1");
        }
        if !(a.k_pct > 0.0 && a.k_pct <= 50.0) {
            return bad("attribution.k_pct must be in (0, 50]");
        }
        if a.random_trials == 0 {
            return bad("attribution.random_trials must be >= 1");
        }
        if !(a.pmi_smoothing >= 0.0) {
            return bad("attribution.pmi_smoothing must be >= 0");
        }
        Ok(())
    }
}

/// Corpora named by a config, with class names fixed by the train file.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Corpus,
    pub validation: Option<Corpus>,
    pub test: Option<Corpus>,
}

pub fn load_corpora(data: &DataConfig) -> Result<Corpora> {
    let train = load_jsonl(&data.train, Role::Train, data.class_names.as_deref())?;
    let names = train.class_names.clone();
    let load = |p: &Option<PathBuf>, role| {
        p.as_ref()
            .map(|p| load_jsonl(p, role, Some(&names)))
            .transpose()
    };
    Ok(Corpora {
        validation: load(&data.validation, Role::Validation)?,
        test: load(&data.test, Role::Test)?,
        train,
    })
}

/// Build the vocabulary from `train` and fit a model.
pub fn train_model(config: &RunConfig, train: &Corpus, validation: Option<&Corpus>) -> Result<ModelSnapshot> {
    let vocab = build_vocab(train, config.data.min_frequency)?;
    let mut model_config = config.model.clone();
    model_config.num_classes = train.num_classes().max(2);
    let pretrained = config.data.pretrained.as_deref().map(load_pretrained).transpose()?;
    let train_ds = train.encode(&vocab);
    let val_ds = validation.map(|v| v.encode(&vocab));
    train_with(&vocab, &train_ds, &model_config, val_ds.as_ref(), pretrained.as_ref())
}

/// Flip statistics without the per-instance records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub n_affected: usize,
    pub n_trials: usize,
    pub n_flipped: usize,
    pub flip_fraction: f64,
    pub mean_delta: f64,
}

impl From<&FlipReport> for FlipSummary {
    fn from(r: &FlipReport) -> Self {
        Self {
            n_affected: r.n_affected,
            n_trials: r.n_trials,
            n_flipped: r.n_flipped,
            flip_fraction: r.flip_fraction,
            mean_delta: r.mean_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfaTable {
    pub method: TfaMethod,
    pub n_tests: usize,
    pub n_selected: usize,
    pub top_set: Vec<TokenCount>,
    pub bottom_set: Vec<TokenCount>,
    pub pooled: Vec<TokenCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    /// Methods whose top-`k` list contained the token.
    pub sources: Vec<String>,
    /// Best 1-based position across those lists.
    pub best_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<FlipSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above_random: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPrediction {
    pub id: String,
    pub label: usize,
    pub true_class_probability: f64,
}

/// Everything one discovery run found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dossier {
    pub validation_accuracy: f64,
    pub feature_tables: Vec<TokenFrequencyTable>,
    pub tfa_tables: Vec<TfaTable>,
    pub worst: Vec<WorstPrediction>,
    pub heatmaps: Vec<HeatmapPayload>,
    pub pmi: Vec<LabelRanking>,
    pub competency: Vec<TokenLabelStat>,
    pub random_flip: FlipSummary,
    /// Verified candidates first, by flipped-instance count, then flip
    /// fraction; unverified ones follow by vote count.
    pub candidates: Vec<Candidate>,
}

impl Dossier {
    pub fn verified(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.verification.is_some())
    }
}

/// Validation instances by ascending probability of their gold class;
/// ties by id.
pub fn worst_predictions(model: &ModelSnapshot, dataset: &Dataset, n: usize) -> Result<Vec<WorstPrediction>> {
    let mut rows = dataset
        .instances
        .iter()
        .map(|z| {
            let p = model.predict_class(z)?.probabilities[z.label];
            Ok(WorstPrediction {
                id: z.id.clone(),
                label: z.label,
                true_class_probability: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.true_class_probability
            .total_cmp(&b.true_class_probability)
            .then_with(|| a.id.cmp(&b.id))
    });
    rows.truncate(n);
    Ok(rows)
}

/// Union of each method's top-`k` list minus exclusions, ordered by vote
/// count, then best rank, then token.
pub fn collect_candidates(lists: &[(String, Vec<String>)], k: usize, exclusions: &HashSet<String>) -> Vec<Candidate> {
    let mut by_token: BTreeMap<&str, Candidate> = BTreeMap::new();
    for (method, list) in lists {
        for (rank, token) in list.iter().take(k).enumerate() {
            if exclusions.contains(token) {
                continue;
            }
            let c = by_token.entry(token).or_insert_with(|| Candidate {
                token: token.clone(),
                sources: Vec::new(),
                best_rank: rank + 1,
                verification: None,
                above_random: None,
            });
            if !c.sources.contains(method) {
                c.sources.push(method.clone());
            }
            c.best_rank = c.best_rank.min(rank + 1);
        }
    }
    let mut out: Vec<Candidate> = by_token.into_values().collect();
    out.sort_by(|a, b| {
        b.sources
            .len()
            .cmp(&a.sources.len())
            .then(a.best_rank.cmp(&b.best_rank))
            .then_with(|| a.token.cmp(&b.token))
    });
    out
}

fn feature_tables(model: &ModelSnapshot, ds: &Dataset, a: &AttributionConfig) -> Result<Vec<TokenFrequencyTable>> {
    let exclusions = a.exclusion_set();
    let options = a.saliency_options();
    a.feature_methods
        .iter()
        .map(|&fm| aggregate_over_set(model, ds, fm, a.k, &exclusions, &options))
        .collect()
}

fn tfa_tables(attributor: &InstanceAttributor<'_>, ds: &Dataset, a: &AttributionConfig) -> Result<Vec<TfaTable>> {
    a.tfa_methods()
        .into_iter()
        .map(|method| {
            let params = a.aggregate_params(method);
            let per_test = ds
                .instances
                .iter()
                .map(|z| aggregated_token_analysis(attributor, z, &params))
                .collect::<Result<Vec<_>>>()?;
            let merged = corpus_aggregate(&per_test)?;
            Ok(TfaTable {
                method,
                n_tests: merged.n_tests,
                n_selected: merged.n_selected,
                pooled: merged.table(TableView::Pooled),
                top_set: merged.top_set,
                bottom_set: merged.bottom_set,
            })
        })
        .collect()
}

/// PMI per label and competency, each cut to `baseline_top` entries.
fn baseline_lists(train: &Corpus, a: &AttributionConfig) -> Result<(Vec<LabelRanking>, Vec<TokenLabelStat>)> {
    let mut pmi_lists = pmi(train, a.pmi_smoothing)?.per_label;
    for r in &mut pmi_lists {
        r.stats.truncate(a.baseline_top);
    }
    let mut comp = competency(train)?.stats;
    comp.truncate(a.baseline_top);
    Ok((pmi_lists, comp))
}

/// Corpus-level token tables from every configured method, next to the
/// count baselines over the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub n_instances: usize,
    pub feature_tables: Vec<TokenFrequencyTable>,
    pub tfa_tables: Vec<TfaTable>,
    pub pmi: Vec<LabelRanking>,
    pub competency: Vec<TokenLabelStat>,
}

/// Aggregate feature and training-feature attributions over `instances`.
pub fn aggregate_summary(
    config: &RunConfig,
    model: &ModelSnapshot,
    train: &Corpus,
    instances: &Corpus,
) -> Result<Report<AggregateSummary>> {
    config.validate()?;
    let a = &config.attribution;
    let train_ds = train.encode(&model.vocab);
    let ds = instances.encode(&model.vocab);
    if ds.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let attributor = InstanceAttributor::new(model, &train_ds)?;
    let (pmi, competency) = baseline_lists(train, a)?;
    let summary = AggregateSummary {
        n_instances: ds.len(),
        feature_tables: feature_tables(model, &ds, a)?,
        tfa_tables: tfa_tables(&attributor, &ds, a)?,
        pmi,
        competency,
    };
    let provenance = Provenance::new(Some(&model.hash()))
        .with_dataset("train", train_ds.hash())
        .with_dataset(role_name(instances.role), ds.hash());
    Report::new("aggregate_summary", provenance, a, summary)
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Train => "train",
        Role::Validation => "validation",
        Role::Test => "test",
    }
}

/// Run the discovery procedure against a trained model.
///
/// `train` is the corpus the model was fit on; `validation` drives the
/// aggregation, heatmaps and verification.
pub fn discover(
    config: &RunConfig,
    model: &ModelSnapshot,
    train: &Corpus,
    validation: &Corpus,
) -> Result<Report<Dossier>> {
    config.validate()?;
    let a = &config.attribution;
    let train_ds = train.encode(&model.vocab);
    let val_ds = validation.encode(&model.vocab);
    if val_ds.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let exclusions = a.exclusion_set();
    let feature_tables = feature_tables(model, &val_ds, a)?;
    let attributor = InstanceAttributor::new(model, &train_ds)?;
    let tfa_tables = tfa_tables(&attributor, &val_ds, a)?;
    let lists: Vec<(String, Vec<String>)> = feature_tables
        .iter()
        .map(|t| (t.method.to_string(), t.head(a.k)))
        .chain(tfa_tables.iter().map(|t| {
            (t.method.to_string(), t.pooled.iter().take(a.k).map(|e| e.token.clone()).collect())
        }))
        .collect();

    let worst = worst_predictions(model, &val_ds, a.n_worst)?;
    let hm_params = HeatmapParams {
        steps: a.steps,
        baseline: a.ig_baseline,
        ..HeatmapParams::new(a.instance_methods[0], a.feature_methods[0], a.heatmap_k)
    };
    let heatmaps = worst
        .iter()
        .map(|w| {
            let z = val_ds.get(&w.id).expect("worst ids come from the dataset");
            heatmap(&attributor, z, &hm_params)
        })
        .collect::<Result<Vec<_>>>()?;

    let (pmi_lists, comp) = baseline_lists(train, a)?;

    let random = FlipSummary::from(&mask_flip_random(model, &val_ds, a.seed, a.random_trials)?);
    let mut candidates = collect_candidates(&lists, a.k, &exclusions);
    for c in candidates.iter_mut().take(a.top_n_verify) {
        let s = FlipSummary::from(&mask_flip_rate(model, &val_ds, &c.token)?);
        c.above_random = Some(s.flip_fraction > random.flip_fraction);
        c.verification = Some(s);
    }
    let n_verified = a.top_n_verify.min(candidates.len());
    candidates[..n_verified].sort_by(|x, y| {
        let (vx, vy) = (x.verification.as_ref().unwrap(), y.verification.as_ref().unwrap());
        vy.n_flipped
            .cmp(&vx.n_flipped)
            .then(vy.flip_fraction.total_cmp(&vx.flip_fraction))
            .then(y.sources.len().cmp(&x.sources.len()))
            .then_with(|| x.token.cmp(&y.token))
    });

    let dossier = Dossier {
        validation_accuracy: model.accuracy(&val_ds)?,
        feature_tables,
        tfa_tables,
        worst,
        heatmaps,
        pmi: pmi_lists,
        competency: comp,
        random_flip: random,
        candidates,
    };
    let provenance = Provenance::new(Some(&model.hash()))
        .with_dataset("train", train_ds.hash())
        .with_dataset("validation", val_ds.hash());
    Report::new("discovery_dossier", provenance, &config.attribution, dossier)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_and_reject_unknown_keys() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"attribution": {"k": 3}}"#).unwrap();
        assert_eq!(partial.attribution.k, 3);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"attribution": {"kk": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
        let mut bad = c.clone();
        bad.attribution.k_pct = 60.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn candidates_are_a_deduplicated_union() {
        let lists = vec![
            ("G".to_string(), vec!["a".into(), "b".into(), "c".into()]),
            ("IG".to_string(), vec!["b".into(), "x".into(), "a".into()]),
        ];
        let ex: HashSet<String> = ["x".to_string()].into();
        let c = collect_candidates(&lists, 2, &ex);
        let tokens: Vec<&str> = c.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(tokens, ["b", "a"]);
        assert_eq!(c[0].sources, ["G", "IG"]);
        assert_eq!(c[0].best_rank, 1);
    }
}
