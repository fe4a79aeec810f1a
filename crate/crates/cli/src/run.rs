//! End-to-end runs: neural candidates from a provider, the symbolic candidate
//! from the executor, and the final selection.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use nsp_core::datasets::{self, kfold, AnswerKind, NliInstance, QaInstance};
use nsp_core::ensemble::{
    correctness_targets, nli_final_label, nli_select, select, slot_candidates, Answer, AnswerType, GateFeatures,
    GateModel, NliAnswerType, PredictionCandidate,
};
use nsp_core::executor::{Executor, NliLabel, NullReason, Value};
use nsp_core::metrics::{self, cv_summary, gold_bag, instance_scores_multi, program_types, AnswerBag, EvalReport};
use nsp_core::tagger::{self, Environment, NumberLexicon, Role, Tagger};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{CliError, Completion};
use crate::output::{read_json_file, write_json, write_jsonl};
use crate::provider::{Provider, ProviderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Qa,
    Nli,
}

/// Which candidates take part in selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Combined,
    OnlyProgram,
    OnlyNeural,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Combined => "combined",
            Mode::OnlyProgram => "only_program",
            Mode::OnlyNeural => "only_neural",
        })
    }
}

/// Gate used for QA selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateChoice {
    /// The trained model at `gate_model_path`.
    #[default]
    Model,
    /// No learned preference between types: each candidate's gate
    /// probability is its own confidence.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub task: Task,
    pub dataset_path: PathBuf,
    #[serde(default)]
    pub annotation_path: Option<PathBuf>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub gate_model_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lexicon_path: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Cross-validation folds for NLI runs.
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Confidence attached to a non-null program result.
    #[serde(default = "default_program_confidence")]
    pub program_confidence: f64,
}

fn default_folds() -> usize {
    10
}

fn default_program_confidence() -> f64 {
    1.0
}

impl RunManifest {
    pub fn new(dataset_path: impl Into<PathBuf>, provider: ProviderConfig, output_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            task: Task::Qa,
            dataset_path: dataset_path.into(),
            annotation_path: None,
            provider,
            gate_model_path: None,
            output_dir: output_dir.into(),
            seed: 0,
            lexicon_path: None,
            workers: None,
            folds: default_folds(),
            program_confidence: default_program_confidence(),
        }
    }

    /// Reads a manifest; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let manifest: RunManifest = read_json_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(manifest.rebase(base))
    }

    fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_path);
        fix(&mut self.output_dir);
        for p in [&mut self.annotation_path, &mut self.gate_model_path, &mut self.lexicon_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(loc) = &self.provider.location {
            if self.provider.kind == crate::provider::ProviderKind::File && Path::new(loc).is_relative() {
                self.provider.location = Some(base.join(loc).display().to_string());
            }
        }
        self
    }

    fn check(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.program_confidence) {
            return Err(CliError::Config("program_confidence must lie in [0, 1]".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be positive".into()));
        }
        std::fs::create_dir_all(&self.output_dir).map_err(|e| CliError::io(&self.output_dir, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub gate: GateChoice,
    pub mode: Mode,
}

/// What a run produced, mirroring `report.json`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: Json,
    pub completion: Completion,
}

pub(crate) fn load_lexicon(path: Option<&Path>) -> Result<NumberLexicon, CliError> {
    Ok(match path {
        Some(p) => NumberLexicon::load(p)?,
        None => NumberLexicon::default(),
    })
}

pub(crate) fn qa_environment(tagger: &Tagger, inst: &QaInstance) -> Environment {
    let passage = tagger.tag(&inst.passage, Role::Passage, Role::Passage.default_index_base());
    let question = tagger.tag(&inst.question, Role::Question, Role::Question.default_index_base());
    // Passage and question tokens use different letters and cannot clash.
    tagger::environment([&passage, &question]).unwrap_or_default()
}

pub(crate) fn nli_environment(tagger: &Tagger, inst: &NliInstance) -> Environment {
    let premise = tagger.tag(&inst.premise, Role::Premise, Role::Premise.default_index_base());
    let hypothesis = tagger.tag(&inst.hypothesis, Role::Hypothesis, Role::Hypothesis.default_index_base());
    tagger::environment([&premise, &hypothesis]).unwrap_or_default()
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

fn error_record(id: &str, code: &str, message: impl fmt::Display, seed: u64) -> Json {
    json!({ "id": id, "error": code, "message": message.to_string(), "seed": seed })
}

fn count_errors(errors: &[Json]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in errors {
        let code = e.get("error").and_then(Json::as_str).unwrap_or("unknown");
        *counts.entry(code.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Runs the manifest end to end and writes `predictions.jsonl`,
/// `errors.jsonl`, `report.json` and (for QA) `report.txt` and
/// `gate_data.jsonl` into the output directory.
pub fn cmd_run(manifest: &RunManifest, options: RunOptions) -> Result<RunSummary, CliError> {
    manifest.check()?;
    let provider_config = manifest.provider.resolve(Path::new("."))?;
    let provider = provider_config.build(manifest.seed)?;
    let lexicon = load_lexicon(manifest.lexicon_path.as_deref())?;
    let tagger = Tagger::new(&lexicon);
    let pool = thread_pool(manifest.workers)?;
    log::info!(
        "run: task {:?}, mode {}, gate {:?}, seed {}",
        manifest.task,
        options.mode,
        options.gate,
        manifest.seed
    );
    match manifest.task {
        Task::Qa => run_qa(manifest, options, provider.as_ref(), &tagger, &pool),
        Task::Nli => run_nli(manifest, options, provider.as_ref(), &tagger, &pool),
    }
}

// ---------------------------------------------------------------------------
// QA

struct QaOutcome {
    prediction: Vec<String>,
    chosen: Option<AnswerType>,
    features: Vec<f64>,
    targets: Vec<f64>,
    errors: Vec<Json>,
}

fn load_qa(manifest: &RunManifest) -> Result<Vec<QaInstance>, CliError> {
    let (mut instances, stats) = datasets::load_drop(&manifest.dataset_path)?;
    if stats.ambiguous_gold > 0 || stats.empty_gold > 0 {
        log::warn!(
            "dataset: {} ambiguous gold answers, {} records without gold skipped",
            stats.ambiguous_gold,
            stats.empty_gold
        );
    }
    if let Some(path) = &manifest.annotation_path {
        let records = datasets::load_annotations(path)?;
        let report = datasets::attach_programs(&mut instances, &records)?;
        log::info!("annotations: {report:?}");
    }
    Ok(instances)
}

fn symbolic_candidate(executor: &Executor, tagger: &Tagger, inst: &QaInstance, confidence: f64) -> PredictionCandidate {
    let Some(program) = &inst.program else {
        return PredictionCandidate::null(AnswerType::ProgramExec);
    };
    let outcome = executor.run(program, &qa_environment(tagger, inst));
    match outcome.value {
        Value::Number(v) => PredictionCandidate::new(AnswerType::ProgramExec, Answer::Number(v), confidence),
        _ => {
            log::debug!(
                "{}: program result is NULL ({})",
                inst.id,
                outcome.null_reason.unwrap_or(NullReason::BadArgKind)
            );
            PredictionCandidate::null(AnswerType::ProgramExec)
        }
    }
}

fn qa_instance(
    inst: &QaInstance,
    manifest: &RunManifest,
    options: RunOptions,
    provider: &dyn Provider,
    tagger: &Tagger,
    gate: Option<&GateModel>,
) -> QaOutcome {
    let seed = manifest.seed;
    let mut errors = Vec::new();
    let neural = if options.mode == Mode::OnlyProgram {
        Vec::new()
    } else {
        provider.qa(inst).unwrap_or_else(|e| {
            errors.push(error_record(&inst.id, e.code(), &e, seed));
            Vec::new()
        })
    };
    let symbolic = if options.mode == Mode::OnlyNeural {
        PredictionCandidate::null(AnswerType::ProgramExec)
    } else {
        symbolic_candidate(&Executor::default(), tagger, inst, manifest.program_confidence)
    };
    // The symbolic candidate always comes from the executor.
    let candidates = slot_candidates(
        neural
            .into_iter()
            .filter(|c| c.answer_type != AnswerType::ProgramExec)
            .chain([symbolic]),
    );

    let features: Vec<f64> = candidates
        .iter()
        .map(|c| if c.is_valid() { c.source_confidence } else { 0.0 })
        .collect();
    let golds: Vec<AnswerBag> = inst.golds().map(gold_bag).collect();
    let correct: Vec<bool> = candidates
        .iter()
        .map(|c| c.is_valid() && instance_scores_multi(&AnswerBag::new(&c.answer.to_spans()), &golds).0 == 1.0)
        .collect();

    let p = match gate {
        Some(model) => model.score(&GateFeatures(features.clone())),
        None => Ok(features.clone()),
    };
    let chosen = p.and_then(|p| select(&candidates, &p).cloned());
    let (prediction, chosen) = match chosen {
        Ok(c) => (c.answer.to_spans(), Some(c.answer_type)),
        Err(e) => {
            errors.push(error_record(&inst.id, "no_valid_candidate", e, seed));
            (Vec::new(), None)
        }
    };
    QaOutcome {
        prediction,
        chosen,
        features,
        targets: correctness_targets(&correct),
        errors,
    }
}

fn run_qa(
    manifest: &RunManifest,
    options: RunOptions,
    provider: &dyn Provider,
    tagger: &Tagger,
    pool: &rayon::ThreadPool,
) -> Result<RunSummary, CliError> {
    let gate = match options.gate {
        GateChoice::Uniform => None,
        GateChoice::Model => {
            let path = manifest.gate_model_path.as_ref().ok_or_else(|| {
                CliError::Config("no gate_model_path in the manifest; pass --gate uniform to run without one".into())
            })?;
            let model: GateModel = read_json_file(path)?;
            if model.n_in != AnswerType::ALL.len() || model.n_out != AnswerType::ALL.len() {
                return Err(CliError::Config(format!(
                    "gate model must be {n}x{n}, got {}x{}",
                    model.n_out,
                    model.n_in,
                    n = AnswerType::ALL.len()
                )));
            }
            Some(model)
        }
    };
    let instances = load_qa(manifest)?;
    let outcomes: Vec<QaOutcome> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| qa_instance(inst, manifest, options, provider, tagger, gate.as_ref()))
            .collect()
    });

    let seed = manifest.seed;
    let predictions: HashMap<String, Vec<String>> = instances
        .iter()
        .zip(&outcomes)
        .map(|(i, o)| (i.id.clone(), o.prediction.clone()))
        .collect();
    let report: EvalReport = metrics::evaluate_qa(&predictions, &instances, &program_types(&instances))?;
    let errors: Vec<Json> = outcomes.iter().flat_map(|o| o.errors.iter().cloned()).collect();

    let dir = &manifest.output_dir;
    write_jsonl(
        &dir.join("predictions.jsonl"),
        instances.iter().zip(&outcomes).map(|(i, o)| {
            json!({ "id": i.id, "answer": o.prediction, "type": o.chosen, "seed": seed })
        }),
    )?;
    write_jsonl(
        &dir.join("gate_data.jsonl"),
        instances.iter().zip(&outcomes).map(|(i, o)| {
            json!({ "id": i.id, "features": o.features, "target": o.targets, "seed": seed })
        }),
    )?;
    write_jsonl(&dir.join("errors.jsonl"), errors.iter().cloned())?;

    let method = format!("{} ({:?} gate)", options.mode, options.gate).to_lowercase();
    let table = metrics::render_table(&report, &method);
    std::fs::write(dir.join("report.txt"), &table).map_err(|e| CliError::io(dir.join("report.txt"), e))?;

    let by_type = |kind: AnswerKind| report.by_answer_type.get(&kind).map(|b| b.f1);
    log::info!(
        "f1 {:.2} (number {:?}, spans {:?}) over {} instances, {} errors",
        report.f1,
        by_type(AnswerKind::Number),
        by_type(AnswerKind::Spans),
        report.count,
        errors.len()
    );
    let summary = json!({
        "task": Task::Qa,
        "mode": options.mode,
        "gate": options.gate,
        "seed": seed,
        "instances": instances.len(),
        "instance_errors": errors.len(),
        "error_counts": count_errors(&errors),
        "report": report,
    });
    write_json(&dir.join("report.json"), &summary)?;
    Ok(RunSummary {
        report: summary,
        completion: Completion {
            instance_errors: errors.len(),
        },
    })
}

// ---------------------------------------------------------------------------
// NLI

struct NliOutcome {
    classification: NliLabel,
    program: NliLabel,
    errors: Vec<Json>,
}

fn load_nli(manifest: &RunManifest) -> Result<Vec<NliInstance>, CliError> {
    let mut instances = datasets::load_awpnli(&manifest.dataset_path)?;
    if let Some(path) = &manifest.annotation_path {
        let records = datasets::load_annotations(path)?;
        let report = datasets::attach_nli_programs(&mut instances, &records)?;
        log::info!("annotations: {report:?}");
    }
    Ok(instances)
}

fn nli_instance(inst: &NliInstance, manifest: &RunManifest, options: RunOptions, provider: &dyn Provider, tagger: &Tagger) -> NliOutcome {
    let mut errors = Vec::new();
    let classification = if options.mode == Mode::OnlyProgram {
        NliLabel::Invalid
    } else {
        match provider.nli(inst) {
            Ok(label) => label.unwrap_or(NliLabel::Invalid),
            Err(e) => {
                errors.push(error_record(&inst.id, e.code(), &e, manifest.seed));
                NliLabel::Invalid
            }
        }
    };
    let program = match (&inst.programs, options.mode) {
        (Some(pair), Mode::Combined | Mode::OnlyProgram) => {
            Executor::default().exec_nli(pair, &nli_environment(tagger, inst))
        }
        _ => NliLabel::Invalid,
    };
    NliOutcome {
        classification,
        program,
        errors,
    }
}

fn accuracy(pairs: impl Iterator<Item = (NliLabel, NliLabel)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (pred, gold) in pairs {
        n += 1;
        hit += usize::from(pred == gold);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn run_nli(
    manifest: &RunManifest,
    options: RunOptions,
    provider: &dyn Provider,
    tagger: &Tagger,
    pool: &rayon::ThreadPool,
) -> Result<RunSummary, CliError> {
    let instances = load_nli(manifest)?;
    let outcomes: Vec<NliOutcome> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| nli_instance(inst, manifest, options, provider, tagger))
            .collect()
    });
    let ids: Vec<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    let plan = kfold(&ids, manifest.folds, manifest.seed)?;
    let fold_of: Vec<usize> = ids.iter().map(|id| plan.assignments[*id]).collect();

    let seed = manifest.seed;
    let mut errors: Vec<Json> = outcomes.iter().flat_map(|o| o.errors.iter().cloned()).collect();
    let mut labels = vec![NliLabel::Invalid; instances.len()];
    let mut sources = vec![NliAnswerType::Classification; instances.len()];
    let mut chosen_by_fold = Vec::with_capacity(plan.k);
    let mut accuracy_by_fold = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let dev = || {
            (0..instances.len())
                .filter(|&i| fold_of[i] != fold)
                .map(|i| (&outcomes[i], instances[i].gold_label))
        };
        let chosen = match options.mode {
            Mode::OnlyProgram => NliAnswerType::ProgramExec,
            Mode::OnlyNeural => NliAnswerType::Classification,
            Mode::Combined => nli_select(&BTreeMap::from([
                (NliAnswerType::Classification, accuracy(dev().map(|(o, g)| (o.classification, g)))),
                (NliAnswerType::ProgramExec, accuracy(dev().map(|(o, g)| (o.program, g)))),
            ])),
        };
        chosen_by_fold.push(chosen);
        for i in (0..instances.len()).filter(|&i| fold_of[i] == fold) {
            let o = &outcomes[i];
            labels[i] = match options.mode {
                Mode::OnlyProgram => o.program,
                Mode::OnlyNeural => o.classification,
                Mode::Combined => nli_final_label(chosen, o.classification, o.program),
            };
            sources[i] = if chosen == NliAnswerType::ProgramExec && o.program != NliLabel::Invalid {
                NliAnswerType::ProgramExec
            } else {
                NliAnswerType::Classification
            };
            if labels[i] == NliLabel::Invalid {
                errors.push(error_record(&instances[i].id, "no_valid_candidate", "no valid label", seed));
            }
        }
        let in_fold = (0..instances.len()).filter(|&i| fold_of[i] == fold);
        accuracy_by_fold.push(100.0 * accuracy(in_fold.map(|i| (labels[i], instances[i].gold_label))));
    }
    let cv = cv_summary(&accuracy_by_fold)?;
    let overall = 100.0 * accuracy(labels.iter().copied().zip(instances.iter().map(|i| i.gold_label)));

    let dir = &manifest.output_dir;
    write_jsonl(
        &dir.join("predictions.jsonl"),
        instances.iter().enumerate().map(|(i, inst)| {
            json!({ "id": inst.id, "label": labels[i], "source": sources[i], "fold": fold_of[i], "seed": seed })
        }),
    )?;
    write_jsonl(&dir.join("errors.jsonl"), errors.iter().cloned())?;
    log::info!("accuracy {cv} over {} folds, {} errors", plan.k, errors.len());
    let summary = json!({
        "task": Task::Nli,
        "mode": options.mode,
        "seed": seed,
        "instances": instances.len(),
        "instance_errors": errors.len(),
        "error_counts": count_errors(&errors),
        "folds": plan.k,
        "fold_sizes": plan.fold_sizes(),
        "chosen_type_by_fold": chosen_by_fold,
        "accuracy_by_fold": accuracy_by_fold,
        "accuracy": cv,
        "display": cv.to_string(),
        "overall_accuracy": overall,
    });
    write_json(&dir.join("report.json"), &summary)?;
    Ok(RunSummary {
        report: summary,
        completion: Completion {
            instance_errors: errors.len(),
        },
    })
}
