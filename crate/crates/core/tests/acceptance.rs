//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! measured value, threshold and runtime; the test fails if any criterion
//! does.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use artiscope::baselines::{competency, pmi};
use artiscope::corpus::synth::{sentiment_corpus, SentimentSpec};
use artiscope::corpus::{build_vocab, Corpus, Dataset, Instance, Role, MASK};
use artiscope::feature_attr::{
    integrated_gradients, select_tokens, top_tokens_per_instance, End, FeatureMethod, IgBaseline,
    RankMode, SaliencyOptions,
};
use artiscope::instance_attr::{euc, influence_if, relative_score, InstanceAttributor, InstanceMethod};
use artiscope::model::{
    fit_head, grad_embeddings, head_grad, initialize, save_checkpoint, train, HessianContext,
    InstanceLoss, ModelConfig, ModelSnapshot, PooledScalar, TargetLogit,
};
use artiscope::pipeline::{discover, train_model, RunConfig};
use artiscope::tfa::{aggregated_token_analysis, AggregateParams, TableView, TfaMethod, TfaScorer};
use artiscope::verify::{
    hits_at_k, mask_flip_random, mask_flip_rate, overlap_rate, random_hits_expectation,
    random_overlap_expectation,
};

use common::{pair_task, planted_task, rel_err, spearman, PLANTED};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn run(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let elapsed = t0.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let passed = out.passed && in_time;
    let budget_text = budget.map_or(String::new(), |b| format!(", budget {:.0} s", b.as_secs_f64()));
    println!(
        "{} {name}: {} ({:.2} s{budget_text})",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
    );
    passed
}

fn planted_model(task: &common::PlantedTask, seed: u64) -> (ModelSnapshot, Dataset, Dataset, Dataset) {
    let vocab = build_vocab(&task.train, 1).unwrap();
    let train_ds = task.train.encode(&vocab);
    let config = ModelConfig {
        seed,
        ..Default::default()
    };
    let model = train(&vocab, &train_ds, &config, None).unwrap();
    let val = task.validation.encode(&vocab);
    let test = task.test.encode(&vocab);
    (model, train_ds, val, test)
}

fn all_mask(inst: &Instance) -> Instance {
    let mut out = inst.clone();
    out.segment_a = vec![MASK; inst.segment_a.len()];
    if let Some(b) = out.segment_b.as_mut() {
        b.fill(MASK);
    }
    out
}

fn head_loss(model: &ModelSnapshot, inst: &Instance) -> f64 {
    -model.predict_class(inst).unwrap().probabilities[inst.label].ln()
}

fn gradient_fidelity() -> Outcome {
    let corpus = sentiment_corpus(&SentimentSpec::default(), Role::Train);
    let vocab = build_vocab(&corpus, 1).unwrap();
    let ds = corpus.encode(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        let config = ModelConfig {
            embedding_dim: 8,
            hidden_dim: if pair % 2 == 0 { 0 } else { 6 },
            init_scale: 0.5,
            seed: pair,
            ..Default::default()
        };
        let mut model = initialize(&vocab, &config, None).unwrap();
        let theta: Vec<f64> = model.head_params().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_head_params(&theta).unwrap();
        let inst = ds.instances.choose(&mut rng).unwrap();
        let scalar: Box<dyn PooledScalar> = if pair % 4 < 2 {
            Box::new(TargetLogit(rng.random_range(0..2)))
        } else {
            Box::new(InstanceLoss(inst.label))
        };

        let analytic: Vec<f64> = grad_embeddings(&model, inst, scalar.as_ref()).unwrap().concat();
        let (ids, rows, _) = model.position_embeddings(inst).unwrap();
        let mut fd = Vec::with_capacity(analytic.len());
        for j in 0..rows.len() {
            for k in 0..model.dim() {
                let mut up = rows.clone();
                up[j][k] += step;
                let mut down = rows.clone();
                down[j][k] -= step;
                let f = |r: &[Vec<f64>]| scalar.value(&model, &model.pool(&ids, r)).unwrap();
                fd.push((f(&up) - f(&down)) / (2.0 * step));
            }
        }
        worst = worst.max(rel_err(&analytic, &fd));

        let analytic = head_grad(&model, inst).unwrap();
        let fd: Vec<f64> = (0..theta.len())
            .map(|p| {
                let mut m = model.clone();
                let mut t = theta.clone();
                t[p] += step;
                m.set_head_params(&t).unwrap();
                let up = head_loss(&m, inst);
                t[p] -= 2.0 * step;
                m.set_head_params(&t).unwrap();
                (up - head_loss(&m, inst)) / (2.0 * step)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &fd));
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 20 pairs, threshold 1e-4"))
}

fn ig_completeness() -> Outcome {
    let task = planted_task(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for hidden in [0, 8] {
        let vocab = build_vocab(&task.train, 1).unwrap();
        let train_ds = task.train.encode(&vocab);
        let config = ModelConfig {
            hidden_dim: hidden,
            seed: 3,
            ..Default::default()
        };
        let model = train(&vocab, &train_ds, &config, None).unwrap();
        assert!(model.embeddings.row(MASK as usize).iter().all(|&x| x == 0.0));
        let val = task.validation.encode(&vocab);
        let mut check = |ig_sum: f64, fx: f64, fb: f64| {
            let gap = (ig_sum - (fx - fb)).abs();
            let allowed = 1e-3 * (fx - fb).abs() + 1e-6;
            worst = worst.max(gap / allowed);
            checked += 1;
        };
        for z in val.instances.iter().step_by(10) {
            for class in 0..2 {
                let s = integrated_gradients(&model, z, class, 128, IgBaseline::Pad).unwrap();
                let fx = model.forward(z).unwrap().logits[class];
                let fb = model.forward(&all_mask(z)).unwrap().logits[class];
                check(s.scores.iter().sum(), fx, fb);
            }
        }
        let attr = InstanceAttributor::new(&model, &train_ds).unwrap();
        for z in val.instances.iter().step_by(25) {
            let z = model.as_predicted(z).unwrap();
            for method in [InstanceMethod::IF, InstanceMethod::RIF, InstanceMethod::EUC] {
                let scores = attr.scores(&z, method).unwrap();
                let scorer = TfaScorer::new(&attr, &z, method).unwrap();
                for i in (0..train_ds.len()).step_by(40) {
                    let x = &train_ds.instances[i];
                    let s = scorer.ig(x, 128, IgBaseline::Pad).unwrap();
                    let fb = scorer.score(&all_mask(x)).unwrap();
                    check(s.scores.iter().sum(), scores[i], fb);
                }
            }
        }
    }
    outcome(
        worst <= 1.0,
        format!("{checked} attributions, worst gap {worst:.3} of the allowed 1e-3 relative + 1e-6"),
    )
}

fn loo_fidelity() -> Outcome {
    let spec = |n, seed, prefix: &str| SentimentSpec {
        n_pos: n,
        n_neg: n,
        seed,
        id_prefix: prefix.into(),
        ..Default::default()
    };
    let train_c = sentiment_corpus(&spec(20, 4, "tr"), Role::Train);
    let test_c = sentiment_corpus(&spec(5, 8, "te"), Role::Test);
    let vocab = build_vocab(&train_c, 1).unwrap();
    let ds = train_c.encode(&vocab);
    let tests = test_c.encode(&vocab);
    let config = ModelConfig {
        seed: 3,
        ..Default::default()
    };
    let model = train(&vocab, &ds, &config, None).unwrap();
    let hessian = HessianContext::new(&model, &ds).unwrap();
    let loo: Vec<ModelSnapshot> = ds
        .instances
        .iter()
        .map(|held| fit_head(&model, &ds.subset(|z| z.id != held.id)).unwrap().0)
        .collect();
    let rhos: Vec<f64> = tests
        .instances
        .iter()
        .map(|z| {
            let base = head_loss(&model, z);
            let delta: Vec<f64> = loo.iter().map(|m| head_loss(m, z) - base).collect();
            let inf: Vec<f64> = ds
                .instances
                .iter()
                .map(|x| influence_if(&model, z, x, &hessian).unwrap())
                .collect();
            spearman(&inf, &delta)
        })
        .collect();
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    outcome(
        mean >= 0.8,
        format!("mean Spearman rho {mean:.4} over {} test points (40 train), threshold 0.8", rhos.len()),
    )
}

fn artifact_recovery() -> Outcome {
    let task = planted_task(1);
    let (model, train_ds, _, test) = planted_model(&task, 5);
    let attr = InstanceAttributor::new(&model, &train_ds).unwrap();
    let is_planted = |t: &str| t == PLANTED;
    let mut tfa = Vec::new();
    for im in [InstanceMethod::RIF, InstanceMethod::EUC] {
        for fm in [FeatureMethod::G, FeatureMethod::IG] {
            let params = AggregateParams::new(im, fm);
            let lists: Vec<Vec<String>> = test
                .instances
                .iter()
                .map(|z| aggregated_token_analysis(&attr, z, &params).unwrap().head(TableView::Pooled, 5))
                .collect();
            let name = TfaMethod::new(im, fm).to_string();
            tfa.push((hits_at_k(&lists, is_planted, 5, &name, PLANTED).unwrap().value, name));
        }
    }
    let mut fa = Vec::new();
    for fm in [FeatureMethod::G, FeatureMethod::IG] {
        let lists =
            top_tokens_per_instance(&model, &test, fm, 5, &HashSet::new(), &SaliencyOptions::default()).unwrap();
        fa.push((hits_at_k(&lists, is_planted, 5, &fm.to_string(), PLANTED).unwrap().value, fm.to_string()));
    }
    let random = random_hits_expectation(&model, &test, is_planted, 5, &HashSet::new()).unwrap();
    let best = |v: &[(f64, String)]| v.iter().cloned().fold((f64::MIN, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let (tfa_best, tfa_name) = best(&tfa);
    let (fa_best, fa_name) = best(&fa);
    let all: Vec<String> = tfa.iter().chain(&fa).map(|(v, n)| format!("{n} {v:.2}")).collect();
    outcome(
        tfa_best >= 0.8 && tfa_best >= fa_best && fa_best > random,
        format!(
            "hits@5 on {} tests: best TFA {tfa_name} {tfa_best:.2} (>= 0.8), best FA {fa_name} {fa_best:.2}, random {random:.3} [{}]",
            test.len(),
            all.join(", ")
        ),
    )
}

fn verification_sensitivity() -> Outcome {
    let task = planted_task(1);
    let (model, _, val, _) = planted_model(&task, 5);
    let planted = mask_flip_rate(&model, &val, PLANTED).unwrap();
    let random = mask_flip_random(&model, &val, 0, 10).unwrap();
    let ratio = planted.flip_fraction / random.flip_fraction;
    outcome(
        planted.flip_fraction >= 10.0 * random.flip_fraction,
        format!(
            "planted flip {:.3} ({}/{}) vs random {:.4} over 10 trials, ratio {ratio:.1}, threshold 10",
            planted.flip_fraction, planted.n_flipped, planted.n_affected, random.flip_fraction
        ),
    )
}

fn overlap_analog() -> Outcome {
    let (train_c, test_c) = pair_task(1);
    let vocab = build_vocab(&train_c, 1).unwrap();
    let train_ds = train_c.encode(&vocab);
    let test = test_c.encode(&vocab);
    let config = ModelConfig {
        seed: 5,
        ..Default::default()
    };
    let model = train(&vocab, &train_ds, &config, None).unwrap();
    let attr = InstanceAttributor::new(&model, &train_ds).unwrap();
    let mut parts = Vec::new();
    let mut primary_ratio = 0.0;
    for fm in [FeatureMethod::IG, FeatureMethod::G] {
        let mut cases: Vec<(&Instance, String)> = Vec::new();
        for z in &test.instances {
            let z = model.as_predicted(z).unwrap();
            let (order, _) = attr.ranked_indices(&z, InstanceMethod::EUC).unwrap();
            let top = &train_ds.instances[order[0]];
            let s = TfaScorer::new(&attr, &z, InstanceMethod::EUC)
                .unwrap()
                .saliency(top, fm, 32, IgBaseline::Pad)
                .unwrap();
            let best = select_tokens(&s.tokens, &s.token_ids, &s.scores, 1, &HashSet::new(), RankMode::Signed, End::Highest);
            cases.push((top, best[0].token.clone()));
        }
        let refs: Vec<(&Instance, &str)> = cases.iter().map(|(i, t)| (*i, t.as_str())).collect();
        let rate = overlap_rate(&vocab, &refs, "EUC").unwrap().value;
        let tops: Vec<&Instance> = cases.iter().map(|(i, _)| *i).collect();
        let random = random_overlap_expectation(&tops).unwrap();
        let ratio = rate / random;
        if fm == FeatureMethod::IG {
            primary_ratio = ratio;
        }
        parts.push(format!("EUC+{fm} {rate:.2} vs random {random:.3} (x{ratio:.2})"));
    }
    outcome(primary_ratio >= 2.0, format!("{}; threshold x2 on EUC+IG", parts.join(", ")))
}

type Scores = Vec<(String, f64)>;

/// Direct recount of PMI and competency for one label.
fn count_oracle(corpus: &Corpus, label: usize, k: f64) -> (Scores, Scores) {
    let mut occ: BTreeMap<String, [f64; 2]> = BTreeMap::new();
    let mut docs: BTreeMap<String, [f64; 2]> = BTreeMap::new();
    let mut totals = [0.0; 2];
    for ex in &corpus.examples {
        let mut seen = BTreeSet::new();
        for t in ex.tokens() {
            occ.entry(t.clone()).or_default()[ex.label] += 1.0;
            totals[ex.label] += 1.0;
            if seen.insert(t.clone()) {
                docs.entry(t.clone()).or_default()[ex.label] += 1.0;
            }
        }
    }
    let v = occ.len() as f64;
    let n = totals[0] + totals[1];
    let mut p: Vec<(String, f64)> = occ
        .iter()
        .filter(|(_, c)| c[label] > 0.0)
        .map(|(t, c)| {
            let cond = (c[label] + k) / (totals[label] + k * v);
            let marg = (c[0] + c[1] + 2.0 * k) / (n + 2.0 * k * v);
            (t.clone(), (cond / marg).ln())
        })
        .collect();
    let mut z: Vec<(String, f64)> = docs
        .iter()
        .filter(|(_, c)| c[label] > 0.0)
        .map(|(t, c)| {
            let nt = c[0] + c[1];
            (t.clone(), (c[label] / nt - 0.5) / (0.25 / nt).sqrt())
        })
        .collect();
    let order = |a: &(String, f64), b: &(String, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0));
    p.sort_by(order);
    z.sort_by(order);
    (p, z)
}

fn baseline_sanity() -> Outcome {
    let task = planted_task(1);
    let (oracle_pmi, oracle_z) = count_oracle(&task.train, 1, 100.0);
    let report = pmi(&task.train, 100.0).unwrap();
    let got_pmi: Vec<(String, f64)> =
        report.for_label(1).unwrap().iter().map(|s| (s.token.clone(), s.value)).collect();
    let got_z: Vec<(String, f64)> = competency(&task.train)
        .unwrap()
        .for_label(1)
        .iter()
        .map(|s| (s.token.clone(), s.value))
        .collect();
    // Tokens with equal true scores may tie-break differently under
    // rounding, so compare values per token and require a sorted ranking.
    let same = |a: &[(String, f64)], b: &[(String, f64)]| {
        let want: BTreeMap<&str, f64> = b.iter().map(|(t, v)| (t.as_str(), *v)).collect();
        a.len() == b.len()
            && a.windows(2).all(|w| w[0].1 >= w[1].1)
            && a.iter().all(|(t, v)| want.get(t.as_str()).is_some_and(|w| (v - w).abs() <= 1e-12 * (1.0 + w.abs())))
    };
    let pmi_ok = same(&got_pmi, &oracle_pmi) && got_pmi[0].0 == PLANTED;
    let z_ok = same(&got_z, &oracle_z) && got_z[0].0 == PLANTED;
    outcome(
        pmi_ok && z_ok,
        format!(
            "PMI head `{}` ({:.3}), competency head `{}` (z {:.2}); full rankings match the recount: {}",
            got_pmi[0].0,
            got_pmi[0].1,
            got_z[0].0,
            got_z[0].1,
            same(&got_pmi, &oracle_pmi) && same(&got_z, &oracle_z)
        ),
    )
}

fn determinism() -> Outcome {
    let task = planted_task(2);
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.model.seed = 9;
    let once = |tag: &str| {
        let model = train_model(&config, &task.train, Some(&task.validation)).unwrap();
        let path = dir.path().join(format!("{tag}.json"));
        save_checkpoint(&model, &path).unwrap();
        let checkpoint = std::fs::read(&path).unwrap();
        let dossier = discover(&config, &model, &task.train, &task.validation).unwrap().to_bytes().unwrap();
        (checkpoint, dossier)
    };
    let (c1, d1) = once("a");
    let (c2, d2) = once("b");
    outcome(
        c1 == c2 && d1 == d2,
        format!(
            "checkpoint ({} bytes) and discovery dossier ({} bytes) byte-identical across two seeded runs: {}",
            c1.len(),
            d1.len(),
            c1 == c2 && d1 == d2
        ),
    )
}

fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn invariance_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    let mut fixtures = 0;
    for round in 0..12 {
        let spec = SentimentSpec {
            n_pos: 15,
            n_neg: 15,
            seed: round,
            ..Default::default()
        };
        let corpus = sentiment_corpus(&spec, Role::Train);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let ds = corpus.encode(&vocab);
        let config = ModelConfig {
            hidden_dim: if round % 2 == 0 { 0 } else { 5 },
            epochs: 3,
            seed: round,
            ..Default::default()
        };
        let model = train(&vocab, &ds, &config, None).unwrap();
        let attr = InstanceAttributor::new(&model, &ds).unwrap();
        for _ in 0..4 {
            fixtures += 1;
            let z = model.as_predicted(ds.instances.choose(&mut rng).unwrap()).unwrap();
            let v = attr.test_direction(&z).unwrap();
            let c: f64 = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            for method in [InstanceMethod::IF, InstanceMethod::RIF] {
                if order(&attr.scores_from_direction(&v, method)) != order(&attr.scores_from_direction(&scaled, method)) {
                    failures.push(format!("{method} ranking changed under test scaling {c:.3}"));
                }
            }
            let i = rng.random_range(0..ds.len());
            let g = attr.train_gradient(i).to_vec();
            let gs: Vec<f64> = g.iter().map(|x| x * c).collect();
            let (a, b) = (
                relative_score(&attr.hessian, &v, &g).unwrap(),
                relative_score(&attr.hessian, &v, &gs).unwrap(),
            );
            if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                failures.push(format!("RIF {a} != {b} under train scaling {c:.3}"));
            }
            let x = ds.instances.choose(&mut rng).unwrap();
            let y = ds.instances.choose(&mut rng).unwrap();
            if euc(&model, x, y).unwrap() != euc(&model, y, x).unwrap() {
                failures.push("EUC asymmetric".into());
            }
            if euc(&model, x, x).unwrap() != 0.0 {
                failures.push("EUC(x, x) != 0".into());
            }
            let mut permuted = x.clone();
            permuted.segment_a.reverse();
            if euc(&model, x, &permuted).unwrap().abs() > 1e-12 {
                failures.push("EUC separates equal bags".into());
            }
            let differ = model.pooled(x).unwrap() != model.pooled(y).unwrap();
            if differ != (euc(&model, x, y).unwrap() != 0.0) {
                failures.push("EUC zero for distinct representations".into());
            }
        }
    }
    let ok = failures.is_empty();
    outcome(
        ok,
        if ok {
            format!("{fixtures} randomized fixtures: IF/RIF rank invariance, RIF scale invariance, EUC symmetry and identity")
        } else {
            failures.join("; ")
        },
    )
}

// Runs without the libtest harness so the criterion lines always print.
fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        run("gradient fidelity", secs(10), gradient_fidelity),
        run("IG completeness", secs(30), ig_completeness),
        run("influence LOO fidelity", secs(120), loo_fidelity),
        run("synthetic artifact recovery", secs(300), artifact_recovery),
        run("verification sensitivity", secs(60), verification_sensitivity),
        run("overlap-rate analog", secs(180), overlap_analog),
        run("baseline sanity", None, baseline_sanity),
        run("determinism", None, determinism),
        run("invariance suite", None, invariance_suite),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
