use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use artiscope::baselines::{competency, pmi};
use artiscope::corpus::synth::{overlap_challenge, pair_corpus, sentiment_corpus, PairSpec, SentimentSpec};
use artiscope::corpus::{inject, load_jsonl, write_jsonl, ArtifactSpec, Corpus, Dataset, Role};
use artiscope::feature_attr::{
    aggregate_over_set, saliency, select_tokens, End, FeatureMethod, RankedToken, TokenSaliency,
};
use artiscope::instance_attr::{InfluenceRanking, InstanceAttributor, InstanceMethod};
use artiscope::model::{load_checkpoint, save_checkpoint, ModelSnapshot, Prediction};
use artiscope::pipeline::{aggregate_summary, discover, load_corpora, train_model, RunConfig};
use artiscope::report::{sha256_hex, Provenance, Report};
use artiscope::tfa::{heatmap, lr_discriminator, DiscriminatorParams, HeatmapParams};
use artiscope::verify::{edit_and_compare, mask_flip, MaskTarget, TextInput};

use crate::args::{
    AttributeArgs, BaselineCommand, Cli, Command, DiscoverArgs, DiscriminateArgs, EditArgs, GlobalArgs,
    InjectArgs, InstanceArgs, MaskArgs, RankArgs, ServeArgs, Split, SynthArgs, SynthKind, TfaArgs,
    VerifyCommand,
};
use crate::config::{self, Override};
use crate::error::{CliError, CliResult};
use crate::service;

/// Id given to an instance passed with `--text`.
pub const TEXT_ID: &str = "text";

pub struct Context {
    pub config: RunConfig,
    pub global: GlobalArgs,
}

fn overrides(g: &GlobalArgs) -> CliResult<Vec<Override>> {
    let mut out = g.set.iter().map(|s| Override::parse(s)).collect::<CliResult<Vec<_>>>()?;
    let path = |key: &str, p: &Option<PathBuf>| p.as_ref().map(|p| Override::new(key, p.display().to_string()));
    out.extend(
        [
            path("data.train", &g.train),
            path("data.validation", &g.validation),
            path("data.test", &g.test),
            path("output.checkpoint", &g.checkpoint),
            path("output.report_dir", &g.report_dir),
        ]
        .into_iter()
        .flatten(),
    );
    Ok(out)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let config = config::load(cli.global.config.as_deref(), &overrides(&cli.global)?)?;
    let ctx = Context {
        config,
        global: cli.global,
    };
    match cli.command {
        Command::Train => train(&ctx),
        Command::Inject(a) => inject_cmd(&ctx, &a),
        Command::Synth(a) => synth(&a),
        Command::Attribute(a) => attribute(&ctx, &a),
        Command::Rank(a) => rank(&ctx, &a),
        Command::Tfa(a) => tfa(&ctx, &a),
        Command::Aggregate(a) => aggregate(&ctx, &a),
        Command::Discriminate(a) => discriminate(&ctx, &a),
        Command::Baseline(b) => baseline(&ctx, &b),
        Command::Verify(VerifyCommand::Mask(a)) => verify_mask(&ctx, &a),
        Command::Verify(VerifyCommand::Edit(a)) => verify_edit(&ctx, &a),
        Command::Discover(a) => discover_cmd(&ctx, &a),
        Command::Serve(a) => serve(&ctx, &a),
        Command::Config => {
            print!("{}", config::to_toml(&ctx.config)?);
            Ok(())
        }
    }
}

impl Context {
    fn report_path(&self, name: &str) -> PathBuf {
        self.global
            .out
            .clone()
            .unwrap_or_else(|| self.config.output.report_dir.join(format!("{name}.json")))
    }

    fn write<T: Serialize>(&self, name: &str, report: &Report<T>) -> CliResult<()> {
        let path = self.report_path(name);
        report.write(&path)?;
        announce(&report.kind, &path);
        Ok(())
    }

    fn load_model(&self) -> CliResult<ModelSnapshot> {
        let model = load_checkpoint(&self.config.output.checkpoint)?;
        check_snapshot(&model, self.global.expect_snapshot.as_deref())?;
        Ok(model)
    }

    fn train_corpus(&self) -> CliResult<Corpus> {
        let d = &self.config.data;
        Ok(load_jsonl(&d.train, Role::Train, d.class_names.as_deref())?)
    }

    /// A configured split, labeled with the train file's class names.
    fn split(&self, split: Split) -> CliResult<Corpus> {
        let train = self.train_corpus()?;
        let (path, role, key) = match split {
            Split::Train => return Ok(train),
            Split::Validation => (&self.config.data.validation, Role::Validation, "data.validation"),
            Split::Test => (&self.config.data.test, Role::Test, "data.test"),
        };
        let path = path
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{key} is not set")))?;
        Ok(load_jsonl(path, role, Some(&train.class_names))?)
    }

    /// Class names from the config or the train file, else class indices.
    fn class_names(&self, model: &ModelSnapshot) -> Vec<String> {
        if let Some(names) = &self.config.data.class_names {
            return names.clone();
        }
        match self.train_corpus() {
            Ok(c) => c.class_names,
            Err(_) => (0..model.num_classes()).map(|c| c.to_string()).collect(),
        }
    }

    /// The instances a command should explain, encoded for `model`, and the
    /// name of their source for provenance.
    fn instances(&self, model: &ModelSnapshot, a: &InstanceArgs) -> CliResult<(Dataset, String)> {
        let (mut ds, source) = if let Some(text) = &a.text {
            let inst = model.encode_text(TEXT_ID, text, a.text_b.as_deref());
            if inst.model_input().is_empty() {
                return Err(CliError::Usage("--text has no tokens".into()));
            }
            let ds = Dataset {
                instances: vec![inst],
                class_names: self.class_names(model),
                role: Role::Test,
                vocab_hash: model.vocab_hash().to_string(),
            };
            (ds, "text".to_string())
        } else if let Some(path) = &a.input {
            let names = self.class_names(model);
            (load_jsonl(path, Role::Test, Some(&names))?.encode(&model.vocab), "input".to_string())
        } else {
            let name = split_name(a.split);
            (self.split(a.split)?.encode(&model.vocab), name.to_string())
        };
        if !a.ids.is_empty() {
            if let Some(missing) = a.ids.iter().find(|id| ds.get(id).is_none()) {
                return Err(CliError::UnknownInstance(missing.clone()));
            }
            let keep: HashSet<&str> = a.ids.iter().map(String::as_str).collect();
            ds = ds.subset(|z| keep.contains(z.id.as_str()));
        }
        if let Some(n) = a.limit {
            ds.instances.truncate(n);
        }
        if ds.is_empty() {
            return Err(CliError::Core(artiscope::Error::EmptyCorpus));
        }
        Ok((ds, source))
    }

    fn provenance(&self, model: &ModelSnapshot, train: Option<&Dataset>, other: Option<(&str, &Dataset)>) -> Provenance {
        let mut p = Provenance::new(Some(&model.hash()));
        if let Some(t) = train {
            p = p.with_dataset("train", t.hash());
        }
        if let Some((name, ds)) = other {
            p = p.with_dataset(name, ds.hash());
        }
        p
    }
}

pub fn check_snapshot(model: &ModelSnapshot, expected: Option<&str>) -> CliResult<()> {
    match expected {
        Some(e) if e != model.hash() => Err(CliError::SnapshotMismatch {
            expected: e.to_string(),
            found: model.hash(),
        }),
        _ => Ok(()),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

/// Tell the caller where a file went, one JSON object per line.
fn announce(kind: &str, path: &Path) {
    println!("{}", json!({ "kind": kind, "path": path.display().to_string() }));
}

fn methods<T>(names: &[String], default: &[T]) -> CliResult<Vec<T>>
where
    T: std::str::FromStr<Err = artiscope::Error> + Clone,
{
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    Ok(names.iter().map(|n| n.parse()).collect::<Result<Vec<T>, _>>()?)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        None => Ok(()),
    }
}

fn train(ctx: &Context) -> CliResult<()> {
    let c = &ctx.config;
    let corpora = load_corpora(&c.data)?;
    let model = train_model(c, &corpora.train, corpora.validation.as_ref())?;
    let path = &c.output.checkpoint;
    ensure_parent(path)?;
    save_checkpoint(&model, path)?;
    announce("checkpoint", path);
    let train_ds = corpora.train.encode(&model.vocab);
    let val_ds = corpora.validation.as_ref().map(|v| v.encode(&model.vocab));
    let provenance = ctx.provenance(&model, Some(&train_ds), val_ds.as_ref().map(|v| ("validation", v)));
    let payload = json!({
        "checkpoint": path.display().to_string(),
        "snapshot_hash": model.hash(),
        "vocabulary_size": model.vocab.len(),
        "class_names": corpora.train.class_names,
        "metrics": model.metrics,
    });
    let params = json!({ "model": model.config, "min_frequency": c.data.min_frequency });
    ctx.write("train", &Report::new("training", provenance, params, payload)?)
}

fn read_spec(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if is_toml {
        toml::from_str::<toml::Table>(&text)
            .map(|t| serde_json::to_value(t).expect("TOML values map to JSON"))
            .map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn inject_cmd(ctx: &Context, a: &InjectArgs) -> CliResult<()> {
    let corpus = load_jsonl(&a.input, Role::Train, ctx.config.data.class_names.as_deref())?;
    let mut raw = match &a.spec {
        Some(p) => read_spec(p)?,
        None => {
            let trigger = a
                .trigger
                .as_deref()
                .ok_or_else(|| CliError::Usage("--trigger is required without --spec".into()))?;
            let rate = a.rate.ok_or_else(|| CliError::Usage("--rate is required without --spec".into()))?;
            let mut spec = json!({
                "kind": a.kind,
                "trigger_label": trigger,
                "artifact_tokens": a.token,
                "injection_rate": rate,
                "position_rule": a.position,
                "seed": a.seed,
            });
            if !a.targets.is_empty() {
                spec["replace_targets"] = json!(a.targets);
            }
            spec
        }
    };
    // Accept class names as trigger labels.
    if let Some(name) = raw.get("trigger_label").and_then(Value::as_str) {
        if let Some(i) = corpus.class_names.iter().position(|c| c == name) {
            raw["trigger_label"] = json!(i);
        }
    }
    let spec: ArtifactSpec =
        serde_json::from_value(raw).map_err(|e| CliError::Config(format!("artifact spec: {e}")))?;
    let (out, log) = inject(&corpus, &spec)?;
    ensure_parent(&a.output)?;
    write_jsonl(&out, &a.output)?;
    announce("corpus", &a.output);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    ensure_parent(&log_path)?;
    log.write_jsonl(&log_path)?;
    announce("injection_log", &log_path);
    let hash = |p: &Path| fs::read(p).map(|b| sha256_hex(&b)).map_err(|e| CliError::io(p, e));
    let provenance = Provenance::new(None)
        .with_dataset("input", hash(&a.input)?)
        .with_dataset("output", hash(&a.output)?);
    let payload = json!({
        "n_instances": out.len(),
        "n_modified": log.modified_ids().len(),
        "n_records": log.records.len(),
        "log": log_path.display().to_string(),
    });
    ctx.write("inject", &Report::new("injection", provenance, &spec, payload)?)
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.rating_rate) || !(0.0..=1.0).contains(&a.reliability) {
        return Err(CliError::Usage("--rating-rate and --reliability must be in [0, 1]".into()));
    }
    let corpus = match a.kind {
        SynthKind::Sentiment => sentiment_corpus(
            &SentimentSpec {
                n_pos: a.n,
                n_neg: a.n,
                rating_rate: a.rating_rate,
                reliability: a.reliability,
                id_prefix: a.id_prefix.clone(),
                seed: a.seed,
                ..Default::default()
            },
            Role::Train,
        ),
        SynthKind::Pair | SynthKind::Overlap => {
            let spec = PairSpec {
                n_entail: a.n,
                n_non_entail: a.n,
                id_prefix: a.id_prefix.clone(),
                seed: a.seed,
                ..Default::default()
            };
            if a.kind == SynthKind::Pair {
                pair_corpus(&spec, Role::Train)
            } else {
                overlap_challenge(&spec, a.n, Role::Train)
            }
        }
    };
    ensure_parent(&a.output)?;
    write_jsonl(&corpus, &a.output)?;
    announce("corpus", &a.output);
    Ok(())
}

#[derive(Serialize)]
struct InstanceSaliency {
    id: String,
    label: usize,
    prediction: Prediction,
    saliency: TokenSaliency,
    top: Vec<RankedToken>,
}

fn attribute(ctx: &Context, a: &AttributeArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let (ds, source) = ctx.instances(&model, &a.instances)?;
    let at = &ctx.config.attribution;
    let k = a.k.unwrap_or(at.k);
    let methods: Vec<FeatureMethod> = methods(&a.methods, &at.feature_methods)?;
    let exclusions = at.exclusion_set();
    let options = at.saliency_options();
    let mut per_method = Vec::new();
    for &m in &methods {
        let rows = ds
            .instances
            .iter()
            .map(|z| {
                let prediction = model.predict_class(z)?;
                let s = saliency(&model, z, prediction.class, m, &options)?;
                let top = select_tokens(&s.tokens, &s.token_ids, &s.scores, k, &exclusions, options.rank_mode, End::Highest);
                Ok(InstanceSaliency {
                    id: z.id.clone(),
                    label: z.label,
                    prediction,
                    saliency: s,
                    top,
                })
            })
            .collect::<artiscope::Result<Vec<_>>>()?;
        let table = aggregate_over_set(&model, &ds, m, k, &exclusions, &options)?;
        per_method.push(json!({ "method": m, "table": table, "instances": rows }));
    }
    let params = json!({ "methods": methods, "k": k, "options": options, "exclusions": at.exclusions });
    let provenance = ctx.provenance(&model, None, Some((&source, &ds)));
    ctx.write("attribute", &Report::new("feature_attribution", provenance, params, per_method)?)
}

fn rank(ctx: &Context, a: &RankArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let method: InstanceMethod = a.method.parse()?;
    let train_ds = ctx.train_corpus()?.encode(&model.vocab);
    let (ds, source) = ctx.instances(&model, &a.instances)?;
    let attributor = InstanceAttributor::new(&model, &train_ds)?;
    let rankings = ds
        .instances
        .iter()
        .map(|z| {
            let mut r = attributor.rank(&model.as_predicted(z)?, method)?;
            if a.top_k > 0 {
                r.entries.truncate(a.top_k);
            }
            Ok(r)
        })
        .collect::<artiscope::Result<Vec<InfluenceRanking>>>()?;
    let params = json!({ "method": method, "top_k": a.top_k, "damping": model.config.damping });
    let provenance = ctx.provenance(&model, Some(&train_ds), Some((&source, &ds)));
    ctx.write("rank", &Report::new("influence_ranking", provenance, params, rankings)?)
}

fn tfa(ctx: &Context, a: &TfaArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let at = &ctx.config.attribution;
    let im = a.instance_method.as_deref().map_or(Ok(at.instance_methods[0]), str::parse)?;
    let fm = a.feature_method.as_deref().map_or(Ok(at.feature_methods[0]), str::parse)?;
    let params = HeatmapParams {
        steps: at.steps,
        baseline: at.ig_baseline,
        ..HeatmapParams::new(im, fm, a.k.unwrap_or(at.heatmap_k))
    };
    let train_ds = ctx.train_corpus()?.encode(&model.vocab);
    let (ds, source) = ctx.instances(&model, &a.instances)?;
    let attributor = InstanceAttributor::new(&model, &train_ds)?;
    let payloads = ds
        .instances
        .iter()
        .map(|z| heatmap(&attributor, z, &params))
        .collect::<artiscope::Result<Vec<_>>>()?;
    let provenance = ctx.provenance(&model, Some(&train_ds), Some((&source, &ds)));
    ctx.write("tfa", &Report::new("heatmaps", provenance, &params, payloads)?)
}

fn aggregate(ctx: &Context, a: &InstanceArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let train = ctx.train_corpus()?;
    let instances = if a.text.is_some() {
        return Err(CliError::Usage("aggregate runs over a split or --input file".into()));
    } else if let Some(p) = &a.input {
        load_jsonl(p, Role::Test, Some(&train.class_names))?
    } else {
        ctx.split(a.split)?
    };
    let mut instances = instances;
    if !a.ids.is_empty() {
        instances.examples.retain(|e| a.ids.contains(&e.id));
    }
    if let Some(n) = a.limit {
        instances.examples.truncate(n);
    }
    let report = aggregate_summary(&ctx.config, &model, &train, &instances)?;
    ctx.write("aggregate", &report)
}

fn discriminate(ctx: &Context, a: &DiscriminateArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let at = &ctx.config.attribution;
    let n = a.n.unwrap_or(at.discriminator_n);
    let params = DiscriminatorParams {
        n_top: n,
        n_bottom: n,
        l2: a.l2.unwrap_or(at.discriminator_l2),
        exclusions: at.exclusions.clone(),
        ..DiscriminatorParams::new(a.method.parse()?)
    };
    let train_ds = ctx.train_corpus()?.encode(&model.vocab);
    let (ds, source) = ctx.instances(&model, &a.instances)?;
    let attributor = InstanceAttributor::new(&model, &train_ds)?;
    let reports = ds
        .instances
        .iter()
        .map(|z| lr_discriminator(&attributor, z, &params))
        .collect::<artiscope::Result<Vec<_>>>()?;
    let provenance = ctx.provenance(&model, Some(&train_ds), Some((&source, &ds)));
    ctx.write("discriminate", &Report::new("discriminator", provenance, &params, reports)?)
}

/// Baselines read the train corpus only, so they need no checkpoint.
fn baseline(ctx: &Context, b: &BaselineCommand) -> CliResult<()> {
    let train = ctx.train_corpus()?;
    let text = fs::read(&ctx.config.data.train).map_err(|e| CliError::io(&ctx.config.data.train, e))?;
    let provenance = Provenance::new(None).with_dataset("train", sha256_hex(&text));
    match b {
        BaselineCommand::Pmi { smoothing } => {
            let k = smoothing.unwrap_or(ctx.config.attribution.pmi_smoothing);
            let r = pmi(&train, k)?;
            ctx.write("pmi", &Report::new("pmi", provenance, json!({ "smoothing_k": k }), r)?)
        }
        BaselineCommand::Competency => {
            let r = competency(&train)?;
            ctx.write("competency", &Report::new("competency", provenance, json!({}), r)?)
        }
    }
}

fn verify_mask(ctx: &Context, a: &MaskArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let ds = ctx.split(a.split)?.encode(&model.vocab);
    let at = &ctx.config.attribution;
    let target = match &a.token {
        Some(t) => MaskTarget::Token { token: t.clone() },
        None => MaskTarget::Random {
            seed: a.seed.unwrap_or(at.seed),
            trials: a.trials.unwrap_or(at.random_trials),
        },
    };
    let mut report = mask_flip(&model, &ds, &target)?;
    if a.summary {
        report.records.clear();
    }
    let provenance = ctx.provenance(&model, None, Some((split_name(a.split), &ds)));
    let params = json!({ "target": target, "split": split_name(a.split), "summary": a.summary });
    ctx.write("verify_mask", &Report::new("mask_flip", provenance, params, report)?)
}

fn verify_edit(ctx: &Context, a: &EditArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let input = |t: &str, b: &Option<String>| match b {
        Some(b) => TextInput::paired(t, b.as_str()),
        None => TextInput::new(t),
    };
    let original = input(&a.original, &a.original_b);
    let edited = input(&a.edited, &a.edited_b);
    let method: FeatureMethod = a.method.parse()?;
    let options = ctx.config.attribution.saliency_options();
    let cmp = edit_and_compare(&model, &original, &edited, method, &options)?;
    let params = json!({ "original": original, "edited": edited, "method": method, "options": options });
    let provenance = ctx.provenance(&model, None, None);
    ctx.write("verify_edit", &Report::new("edit_comparison", provenance, params, cmp)?)
}

fn discover_cmd(ctx: &Context, a: &DiscoverArgs) -> CliResult<()> {
    let c = &ctx.config;
    let corpora = load_corpora(&c.data)?;
    let validation = corpora
        .validation
        .as_ref()
        .ok_or_else(|| CliError::Config("discover needs data.validation".into()))?;
    let checkpoint = &c.output.checkpoint;
    let model = if a.retrain || !checkpoint.exists() {
        let model = train_model(c, &corpora.train, Some(validation))?;
        ensure_parent(checkpoint)?;
        save_checkpoint(&model, checkpoint)?;
        announce("checkpoint", checkpoint);
        model
    } else {
        ctx.load_model()?
    };
    check_snapshot(&model, ctx.global.expect_snapshot.as_deref())?;
    let report = discover(c, &model, &corpora.train, validation)?;
    ctx.write("discover", &report)
}

fn serve(ctx: &Context, a: &ServeArgs) -> CliResult<()> {
    let model = ctx.load_model()?;
    let train = ctx.train_corpus()?;
    let validation = ctx.config.data.validation.as_ref().map(|_| ctx.split(Split::Validation)).transpose()?;
    let state = service::AppState::new(ctx.config.clone(), model, &train, validation.as_ref())?;
    let host = a.host.clone().unwrap_or_else(|| ctx.config.service.host.clone());
    let port = a.port.unwrap_or(ctx.config.service.port);
    service::run(state, &host, port)
}
