use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mmrag::dpo::{train_ragpt, PreferencePair};
use mmrag::eval::{alignment_rates, classification_metrics, generation_metrics, AlignmentReport, ClassificationReport, GenerationReport};
use mmrag::index::{build_index, retrieve, Index, RetrievalRegistry};
use mmrag::noise::Noiser;
use mmrag::policy::{Policy, TextPolicy};
use mmrag::preference::{answers_match, build_preference_dataset, partition_stats, Category, PreferenceSample, QASample};
use mmrag::retriever::{recall_at_k, train_retriever, EncoderParams};
use mmrag::router::{router_accuracy, train_router, DomainLabel, RouterParams};
use mmrag::synth::{generate_world, overall_family, LabeledImage, PairRecord, ReportRecord, WorldConfig};
use mmrag::theory::{overall_assumptions, weight_estimate, AssumptionReport};
use mmrag::{FeatureVector, SeededRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{stage_seed, Loaded, Scenario};
use crate::error::{CliError, CliResult};
use crate::model::ModelFile;
use crate::output::{csv_cell, print_json, read_json, read_jsonl, write_csv, write_json, write_jsonl, Provenance};

pub const RETRIEVER_PAIRS: &str = "retriever_pairs.jsonl";
pub const ROUTER_DATA: &str = "router_data.jsonl";
pub const REPORTS: &str = "reports.jsonl";
pub const QA: &str = "qa.jsonl";
pub const EVAL: &str = "eval.jsonl";
pub const MODEL: &str = "model.json";
pub const QUERY: &str = "query.json";
pub const PLANTED: &str = "planted.json";

pub const ROUTER: &str = "router.json";
pub const PREFS: &str = "prefs.jsonl";
pub const POLICY: &str = "policy.json";
pub const REFERENCE_POLICY: &str = "reference_policy.json";
pub const DPO_LOSS: &str = "dpo_loss.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS: &str = "metrics.json";
pub const DIAGNOSE: &str = "diagnose.json";

pub fn encoder_file(d: &DomainLabel) -> String {
    format!("encoder_{d}.json")
}

pub fn index_file(d: &DomainLabel) -> String {
    format!("index_{d}.json")
}

pub fn retriever_loss_file(d: &DomainLabel) -> String {
    format!("retriever_loss_{d}.csv")
}

fn selected_domains(cfg: &Loaded, only: Option<&str>) -> CliResult<Vec<DomainLabel>> {
    match only {
        None => Ok(cfg.config.domains.clone()),
        Some(name) => {
            let d = DomainLabel::new(name);
            if cfg.config.domains.contains(&d) {
                Ok(vec![d])
            } else {
                Err(CliError::Usage(format!("domain {name} is not configured")))
            }
        }
    }
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

pub fn synth_data(cfg: &Loaded) -> CliResult<()> {
    let c = &cfg.config;
    if c.dim_in < c.domains.len() {
        return Err(CliError::Usage(format!(
            "synthetic data needs dim_in >= number of domains ({} < {})",
            c.dim_in,
            c.domains.len()
        )));
    }
    let seed = stage_seed(c.seed, "synth");
    let base = match c.synth.scenario {
        Scenario::World => WorldConfig {
            qa_samples: c.synth.qa_samples,
            ..WorldConfig::standard(seed)
        },
        Scenario::Six => WorldConfig::six_sample(seed),
    };
    let wc = WorldConfig {
        domains: c.domains.clone(),
        dim: c.dim_in,
        sigma: c.synth.sigma,
        pairs_per_domain: c.synth.pairs_per_domain,
        router_per_domain: c.synth.router_per_domain,
        reports_per_domain: c.synth.reports_per_domain,
        eval_samples: c.synth.eval_samples,
        ..base
    };
    let world = generate_world(&wc);
    let prov = Provenance::of(c);
    write_jsonl(&cfg.data(RETRIEVER_PAIRS), &world.retriever_pairs, &prov, None)?;
    write_jsonl(&cfg.data(ROUTER_DATA), &world.router_data, &prov, None)?;
    write_jsonl(&cfg.data(REPORTS), &world.reports, &prov, None)?;
    write_jsonl(&cfg.data(QA), &world.qa, &prov, None)?;
    write_jsonl(&cfg.data(EVAL), &world.eval, &prov, None)?;
    write_json(&cfg.data(MODEL), &ModelFile::Scripted(world.model.clone()), &prov)?;
    let query = world.eval.first().or(world.qa.first()).map(|s| s.image_features.clone());
    if let Some(q) = query {
        write_json(&cfg.data(QUERY), &json!({ "image_features": q }), &prov)?;
    }
    let expected: BTreeMap<String, Option<Category>> =
        world.behaviours.iter().map(|(id, b)| (id.clone(), b.expected_category())).collect();
    write_json(
        &cfg.data(PLANTED),
        &json!({ "behaviours": world.behaviours, "expected_categories": expected }),
        &prov,
    )?;
    print_json(
        &json!({
            "scenario": c.synth.scenario,
            "retriever_pairs": world.retriever_pairs.len(),
            "router_data": world.router_data.len(),
            "reports": world.reports.len(),
            "qa": world.qa.len(),
            "eval": world.eval.len(),
        }),
        &prov,
    )
}

pub fn train_router_cmd(cfg: &Loaded) -> CliResult<()> {
    let c = &cfg.config;
    let data: Vec<LabeledImage> = read_jsonl(&cfg.data(ROUTER_DATA))?;
    let labeled: Vec<(FeatureVector, DomainLabel)> =
        data.into_iter().map(|r| (r.image_features, r.domain)).collect();
    let router = train_router(&labeled, &c.domains, &c.router_config())?;
    let accuracy = router_accuracy(&router, &labeled)?;
    let prov = Provenance::of(c);
    write_json(&cfg.artifact(ROUTER), &router, &prov)?;
    print_json(&json!({ "examples": labeled.len(), "train_accuracy": accuracy }), &prov)
}

pub fn train_retriever_cmd(cfg: &Loaded, only: Option<&str>) -> CliResult<()> {
    let c = &cfg.config;
    let pairs: Vec<PairRecord> = read_jsonl(&cfg.data(RETRIEVER_PAIRS))?;
    let prov = Provenance::of(c);
    let mut summary = Vec::new();
    for d in selected_domains(cfg, only)? {
        let own: Vec<(FeatureVector, FeatureVector)> = pairs
            .iter()
            .filter(|p| p.domain == d)
            .map(|p| (p.image_features.clone(), p.text_features.clone()))
            .collect();
        let fit = train_retriever(d.clone(), &own, &c.retriever_config(&d))?;
        let recall = recall_at_k(&fit.params, &own, 1)?;
        write_json(&cfg.artifact(&encoder_file(&d)), &fit.params, &prov)?;
        let rows: Vec<Vec<String>> = fit
            .losses
            .iter()
            .enumerate()
            .map(|(e, l)| vec![(e + 1).to_string(), l.to_string()])
            .collect();
        write_csv(&cfg.artifact(&retriever_loss_file(&d)), &["epoch", "loss"], &rows, &prov)?;
        summary.push(json!({
            "domain": d,
            "pairs": own.len(),
            "final_loss": fit.losses.last(),
            "train_recall_at_1": recall,
        }));
    }
    print_json(&json!({ "domains": summary }), &prov)
}

fn load_encoder(cfg: &Loaded, d: &DomainLabel) -> CliResult<EncoderParams> {
    let path = cfg.artifact(&encoder_file(d));
    let text = std::fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(EncoderParams::from_json(&text)?)
}

pub fn build_index_cmd(cfg: &Loaded, only: Option<&str>) -> CliResult<()> {
    let c = &cfg.config;
    let reports: Vec<ReportRecord> = read_jsonl(&cfg.data(REPORTS))?;
    let prov = Provenance::of(c);
    let mut summary = Vec::new();
    for d in selected_domains(cfg, only)? {
        let enc = load_encoder(cfg, &d)?;
        let records: Vec<(String, String, FeatureVector)> = reports
            .iter()
            .filter(|r| r.domain == d)
            .map(|r| (r.id.clone(), r.text.clone(), r.text_features.clone()))
            .collect();
        if records.is_empty() {
            return Err(runtime(format!("no reports for domain {d}")));
        }
        let index = build_index(&d, records, &enc)?;
        write_json(&cfg.artifact(&index_file(&d)), &index, &prov)?;
        summary.push(json!({ "domain": d, "records": index.len() }));
    }
    print_json(&json!({ "indexes": summary }), &prov)
}

pub fn load_registry(cfg: &Loaded) -> CliResult<RetrievalRegistry> {
    let path = cfg.artifact(ROUTER);
    let text = std::fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let router = RouterParams::from_json(&text)?;
    let mut registry = RetrievalRegistry::new(router);
    for d in &cfg.config.domains {
        let enc = load_encoder(cfg, d)?;
        let path = cfg.artifact(&index_file(d));
        let text = std::fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        registry.insert(enc, Index::from_json(&text)?)?;
    }
    Ok(registry)
}

/// Query image: a bare array or an object with `image_features`.
fn read_image(path: &Path) -> CliResult<FeatureVector> {
    let v: Value = read_json(path)?;
    let raw = match &v {
        Value::Array(_) => v.clone(),
        Value::Object(m) => m
            .get("image_features")
            .cloned()
            .ok_or_else(|| runtime(format!("{}: missing image_features", path.display())))?,
        _ => return Err(runtime(format!("{}: expected an array or object", path.display()))),
    };
    let values: Vec<f64> = serde_json::from_value(raw).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(FeatureVector::new(values)?)
}

#[derive(Debug, Clone, Serialize)]
struct RetrieveOutput {
    domain: DomainLabel,
    contexts: Vec<mmrag::index::ScoredContext>,
    kept_k: usize,
    original_k: usize,
}

pub fn retrieve_cmd(cfg: &Loaded, image: &Path, out: Option<&Path>) -> CliResult<()> {
    let c = &cfg.config;
    let registry = load_registry(cfg)?;
    let x = read_image(image)?;
    let r = retrieve(&registry, &x, c.k, c.gamma)?;
    let result = RetrieveOutput {
        domain: r.domain,
        kept_k: r.decision.kept_k,
        original_k: r.decision.original_k,
        contexts: r.contexts,
    };
    let prov = Provenance::of(c);
    if let Some(p) = out {
        write_json(p, &result, &prov)?;
    }
    print_json(&result, &prov)
}

fn noiser(cfg: &Loaded) -> CliResult<Noiser> {
    Ok(Noiser::new(cfg.config.schedule()?, stage_seed(cfg.config.seed, "noise")))
}

pub fn gen_prefs(cfg: &Loaded, model: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let c = &cfg.config;
    let qa: Vec<QASample> = read_jsonl(&cfg.data(QA))?;
    let model: ModelFile = read_json(&model.map(Path::to_path_buf).unwrap_or_else(|| cfg.data(MODEL)))?;
    let registry = load_registry(cfg)?;
    let noiser = noiser(cfg)?;
    let dataset = build_preference_dataset(&qa, &model, &registry, &noiser, c.settings())?;
    let stats = partition_stats(&dataset);
    let prov = Provenance::of(c);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(PREFS));
    let header = json!({ "noise": noiser.schedule.summary(), "stats": stats });
    write_jsonl(&out, &dataset, &prov, Some(header))?;
    print_json(&json!({ "samples": qa.len(), "pairs": stats.total(), "stats": stats }), &prov)
}

fn normalize_answer(a: &str) -> String {
    a.trim().to_ascii_lowercase()
}

type TextPair = PreferencePair<Vec<f64>, usize>;

fn preference_pairs(policy: &TextPolicy, data: &[PreferenceSample]) -> CliResult<Vec<TextPair>> {
    let index = |a: &str| {
        policy
            .answer_index(&normalize_answer(a))
            .ok_or_else(|| runtime(format!("answer {a:?} is not in the policy vocabulary")))
    };
    data.iter()
        .map(|s| {
            let f = &policy.featurizer;
            let x = f.features(&s.image, &s.question, Some(&s.contexts))?;
            let pair = PreferencePair::new(x, index(&s.y_w)?, index(&s.y_l)?, s.category);
            if s.category == Category::CM {
                let noisy = s
                    .x_star
                    .as_ref()
                    .ok_or_else(|| CliError::from(mmrag::Error::MissingNoisyInput(s.id.clone())))?;
                Ok(pair.with_noisy_input(f.features(noisy, &s.question, Some(&s.contexts))?))
            } else {
                Ok(pair)
            }
        })
        .collect()
}

pub fn train_dpo(cfg: &Loaded, prefs: Option<&Path>, init: Option<&Path>) -> CliResult<()> {
    let c = &cfg.config;
    let data: Vec<PreferenceSample> = read_jsonl(&prefs.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(PREFS)))?;
    if data.is_empty() {
        return Err(CliError::from(mmrag::Error::EmptyDataset));
    }
    let reference = match init {
        Some(p) => read_json::<ModelFile>(p)?.into_policy()?,
        None => {
            let vocab: BTreeSet<String> = data
                .iter()
                .flat_map(|s| [normalize_answer(&s.y_w), normalize_answer(&s.y_l)])
                .collect();
            TextPolicy::new(c.featurizer(), vocab.into_iter().collect())
        }
    };
    let pairs = preference_pairs(&reference, &data)?;
    let fit = train_ragpt(reference.policy.clone(), &pairs, c.dpo_config())?;
    let trained = TextPolicy {
        policy: fit.policy,
        ..reference.clone()
    };
    let prov = Provenance::of(c);
    write_json(&cfg.artifact(POLICY), &ModelFile::Policy(trained), &prov)?;
    write_json(&cfg.artifact(REFERENCE_POLICY), &ModelFile::Policy(reference), &prov)?;
    let rows: Vec<Vec<String>> = fit
        .history
        .iter()
        .map(|r| vec![r.epoch.to_string(), r.loss.to_string(), csv_cell(r.cm_loss), csv_cell(r.oa_loss)])
        .collect();
    write_csv(&cfg.artifact(DPO_LOSS), &["epoch", "loss", "cm_loss", "oa_loss"], &rows, &prov)?;
    print_json(
        &json!({
            "pairs": pairs.len(),
            "epochs": fit.history.len(),
            "final_loss": fit.history.last().map(|r| r.loss),
        }),
        &prov,
    )
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub pred: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Free-text answer; generation metrics use it instead of `pred`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub classification: Option<ClassificationReport>,
    pub generation: GenerationReport,
    pub alignment: Option<AlignmentReport>,
    pub notes: Vec<String>,
}

fn is_binary(a: &str) -> bool {
    answers_match(a, "yes") || answers_match(a, "no")
}

pub fn score_predictions(gold: &[QASample], predictions: &[Prediction]) -> CliResult<Metrics> {
    if gold.is_empty() {
        return Err(CliError::from(mmrag::Error::EmptyEval));
    }
    let mut by_id = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(runtime(format!("duplicate prediction for {}", p.id)));
        }
    }
    let mut ordered = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id
            .remove(g.id.as_str())
            .ok_or_else(|| runtime(format!("no prediction for {}", g.id)))?;
        ordered.push(p);
    }
    if let Some(id) = by_id.keys().next() {
        return Err(runtime(format!("prediction {id} has no gold sample")));
    }

    let mut notes = Vec::new();
    let binary = gold.iter().all(|g| is_binary(&g.answer)) && ordered.iter().all(|p| is_binary(&p.pred));
    let classification = if binary {
        let preds: Vec<bool> = ordered.iter().map(|p| answers_match(&p.pred, "yes")).collect();
        let labels: Vec<bool> = gold.iter().map(|g| answers_match(&g.answer, "yes")).collect();
        let scores: Option<Vec<f64>> = ordered.iter().map(|p| p.score).collect();
        if scores.is_none() {
            notes.push("auroc omitted: not every prediction has a score".into());
        }
        match classification_metrics(&preds, &labels, scores.as_deref()) {
            Ok(r) => Some(r),
            Err(mmrag::Error::SingleClass) => {
                notes.push("auroc omitted: gold labels contain a single class".into());
                Some(classification_metrics(&preds, &labels, None)?)
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        notes.push("classification omitted: answers are not all yes/no".into());
        None
    };
    let pairs: Vec<(String, String)> = ordered
        .iter()
        .zip(gold)
        .map(|(p, g)| (p.text.clone().unwrap_or_else(|| p.pred.clone()), g.answer.clone()))
        .collect();
    Ok(Metrics {
        n: gold.len(),
        classification,
        generation: generation_metrics(&pairs)?,
        alignment: None,
        notes,
    })
}

pub struct EvalArgs<'a> {
    pub gold: Option<&'a Path>,
    pub pred: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn eval_cmd(cfg: &Loaded, args: EvalArgs<'_>) -> CliResult<()> {
    let c = &cfg.config;
    let prov = Provenance::of(c);
    let gold: Vec<QASample> = read_jsonl(&args.gold.map(Path::to_path_buf).unwrap_or_else(|| cfg.data(EVAL)))?;
    let (predictions, alignment) = match (args.pred, args.model) {
        (Some(p), None) => (read_jsonl::<Prediction>(p)?, None),
        (None, Some(m)) => {
            let model: ModelFile = read_json(m)?;
            let registry = load_registry(cfg)?;
            let mut preds = Vec::with_capacity(gold.len());
            for g in &gold {
                let contexts = retrieve(&registry, &g.image_features, c.k, c.gamma)?.texts();
                preds.push(Prediction {
                    id: g.id.clone(),
                    pred: mmrag::preference::AnswerModel::answer(&model, &g.image_features, &g.question, Some(&contexts))?,
                    score: model.yes_score(&g.image_features, &g.question, Some(&contexts))?,
                    text: None,
                });
            }
            write_jsonl(&cfg.artifact(PREDICTIONS), &preds, &prov, None)?;
            let alignment = alignment_rates(&model, &gold, &registry, &noiser(cfg)?, c.settings())?;
            (preds, Some(alignment))
        }
        _ => return Err(CliError::Usage("eval needs exactly one of --pred or --model".into())),
    };
    let mut metrics = score_predictions(&gold, &predictions)?;
    metrics.alignment = alignment;
    write_json(&args.out.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(METRICS)), &metrics, &prov)?;
    print_json(&metrics, &prov)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariableWeight {
    pub name: String,
    pub components: usize,
    pub wt_before: f64,
    pub wt_after: f64,
    pub std_error_before: f64,
    pub std_error_after: f64,
    pub change: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedConstants {
    pub family: &'static str,
    pub alpha: f64,
    pub probe: Vec<f64>,
    pub reports: Vec<AssumptionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub probes: usize,
    pub samples: usize,
    pub wt_before: BTreeMap<String, f64>,
    pub wt_after: BTreeMap<String, f64>,
    pub per_variable: Vec<VariableWeight>,
    pub assumption_constants: PlantedConstants,
}

pub struct DiagnoseArgs<'a> {
    pub policy: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub prefs: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

fn mean_estimate<P: Policy<Input = Vec<f64>>>(
    policy: &P,
    probes: &[Vec<f64>],
    components: &[usize],
    samples: usize,
    seed: u64,
    name: &str,
) -> CliResult<(f64, f64)> {
    let mut value = 0.0;
    let mut var = 0.0;
    for (i, x) in probes.iter().enumerate() {
        let mut rng = SeededRng::derive(seed, &format!("{name}/{i}"));
        let w = weight_estimate(policy, x, components, samples, &mut rng)?;
        value += w.value;
        var += w.std_error * w.std_error;
    }
    let n = probes.len() as f64;
    Ok((value / n, var.sqrt() / n))
}

pub fn diagnose_cmd(cfg: &Loaded, args: DiagnoseArgs<'_>) -> CliResult<()> {
    let c = &cfg.config;
    let load = |given: Option<&Path>, default: &str| -> CliResult<TextPolicy> {
        let path: PathBuf = given.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(default));
        read_json::<ModelFile>(&path)?.into_policy()
    };
    let trained = load(args.policy, POLICY)?;
    let reference = load(args.reference, REFERENCE_POLICY)?;
    if trained.featurizer != reference.featurizer || trained.vocab != reference.vocab {
        return Err(runtime("policy and reference differ in featurizer or vocabulary"));
    }
    let data: Vec<PreferenceSample> =
        read_jsonl(&args.prefs.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(PREFS)))?;
    if data.is_empty() {
        return Err(CliError::from(mmrag::Error::EmptyDataset));
    }
    let f = &reference.featurizer;
    let probes: Vec<Vec<f64>> = data
        .iter()
        .take(c.diagnose.probes)
        .map(|s| f.features(&s.image, &s.question, Some(&s.contexts)))
        .collect::<mmrag::Result<_>>()?;
    let layout = f.layout();
    let blocks = [
        ("image", layout.image_range()),
        ("question", layout.question_range()),
        ("context", layout.context_range()),
    ];
    let seed = stage_seed(c.seed, "diagnose");
    let mut per_variable = Vec::new();
    let mut wt_before = BTreeMap::new();
    let mut wt_after = BTreeMap::new();
    for (name, range) in blocks {
        if range.is_empty() {
            continue;
        }
        let components: Vec<usize> = range.collect();
        let (b, sb) = mean_estimate(&reference.policy, &probes, &components, c.diagnose.samples, seed, name)?;
        let (a, sa) = mean_estimate(&trained.policy, &probes, &components, c.diagnose.samples, seed, name)?;
        wt_before.insert(name.to_string(), b);
        wt_after.insert(name.to_string(), a);
        per_variable.push(VariableWeight {
            name: name.into(),
            components: components.len(),
            wt_before: b,
            wt_after: a,
            std_error_before: sb,
            std_error_after: sa,
            change: if a > b {
                "increase"
            } else if a < b {
                "decrease"
            } else {
                "unchanged"
            },
        });
    }
    let family = overall_family(1, seed);
    let reports = overall_assumptions(&family.reference, c.alpha, &family.probe, c.diagnose.step)?;
    let report = DiagnoseReport {
        probes: probes.len(),
        samples: c.diagnose.samples,
        wt_before,
        wt_after,
        per_variable,
        assumption_constants: PlantedConstants {
            family: "binary helpful/misleading context",
            alpha: c.alpha,
            probe: family.probe.clone(),
            reports: reports.to_vec(),
        },
    };
    let prov = Provenance::of(c);
    write_json(&args.out.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact(DIAGNOSE)), &report, &prov)?;
    print_json(&report, &prov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, answer: &str) -> QASample {
        QASample {
            id: id.into(),
            image_features: FeatureVector::new(vec![1.0]).unwrap(),
            question: "q".into(),
            answer: answer.into(),
            domain: None,
        }
    }

    fn pred(id: &str, p: &str, score: Option<f64>) -> Prediction {
        Prediction {
            id: id.into(),
            pred: p.into(),
            score,
            text: None,
        }
    }

    #[test]
    fn scoring_aligns_by_id() {
        let gold = [sample("a", "yes"), sample("b", "no"), sample("c", "yes")];
        let preds = [pred("c", "no", Some(0.4)), pred("a", "Yes", Some(0.9)), pred("b", "no", Some(0.1))];
        let m = score_predictions(&gold, &preds).unwrap();
        let cls = m.classification.unwrap();
        assert_eq!((cls.tp, cls.fp, cls.tn, cls.fn_), (1, 0, 1, 1));
        assert_eq!(cls.auroc, Some(1.0));
        assert!(m.notes.is_empty());
    }

    #[test]
    fn missing_and_extra_predictions_fail() {
        let gold = [sample("a", "yes")];
        assert!(score_predictions(&gold, &[]).is_err());
        assert!(score_predictions(&gold, &[pred("a", "yes", None), pred("z", "no", None)]).is_err());
        assert!(score_predictions(&gold, &[pred("a", "yes", None), pred("a", "no", None)]).is_err());
    }

    #[test]
    fn free_text_skips_classification() {
        let gold = [sample("a", "small effusion")];
        let m = score_predictions(&gold, &[pred("a", "small effusion", None)]).unwrap();
        assert!(m.classification.is_none());
        assert!((m.generation.rouge_l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_drops_auroc_only() {
        let gold = [sample("a", "yes"), sample("b", "yes")];
        let m = score_predictions(&gold, &[pred("a", "yes", Some(0.8)), pred("b", "no", Some(0.2))]).unwrap();
        let cls = m.classification.unwrap();
        assert_eq!(cls.auroc, None);
        assert_eq!(m.notes.len(), 1);
    }
}
