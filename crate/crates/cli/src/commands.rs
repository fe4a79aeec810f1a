//! The batch subcommands other than `run`.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use nsp_core::datasets::{self, NliInstance, QaInstance};
use nsp_core::ensemble::{gate_train, objective, GateExample, GateFeatures, GateModel, TrainConfig};
use nsp_core::executor::{nli_decide, Executor, NliLabel, Outcome};
use nsp_core::metrics::{self, program_types, EvalReport};
use nsp_core::program::{parse, validate, validate_text, Program, ValidationReport};
use nsp_core::tagger::{Environment, NumberBinding, Role, Tagger};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{CliError, Completion};
use crate::output::{read_json_file, read_jsonl, read_text, write_json, write_jsonl};
use crate::run::{load_lexicon, nli_environment, qa_environment, Task};

// ---------------------------------------------------------------------------
// tag

#[derive(Debug, Serialize)]
struct TaggedRecord<'a> {
    id: String,
    role: Role,
    annotated: &'a str,
    bindings: &'a [NumberBinding],
}

/// Tags every line of `input`. A line is a JSON object with a `text` field
/// (and optionally an `id`), a JSON string, or raw text.
pub fn cmd_tag(
    input: &Path,
    role: Role,
    lexicon: Option<&Path>,
    index_base: Option<usize>,
    out: &Path,
) -> Result<Completion, CliError> {
    let text = read_text(input)?;
    let tagger = Tagger::new(&load_lexicon(lexicon)?);
    let base = index_base.unwrap_or(role.default_index_base());
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = match serde_json::from_str::<Json>(line) {
            Ok(Json::Object(obj)) => {
                let body = obj
                    .get("text")
                    .and_then(Json::as_str)
                    .ok_or_else(|| CliError::Config(format!("{}:{}: record has no \"text\"", input.display(), n + 1)))?
                    .to_string();
                let id = match obj.get("id") {
                    Some(Json::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => (n + 1).to_string(),
                };
                (id, body)
            }
            Ok(Json::String(s)) => ((n + 1).to_string(), s),
            _ => ((n + 1).to_string(), line.to_string()),
        };
        let tagged = tagger.tag(&body, role, base);
        records.push(
            serde_json::to_value(TaggedRecord {
                id,
                role,
                annotated: &tagged.annotated,
                bindings: &tagged.bindings,
            })
            .expect("tagged records serialize"),
        );
    }
    log::info!("tagged {} texts as {role}", records.len());
    write_jsonl(out, records)?;
    Ok(Completion::OK)
}

// ---------------------------------------------------------------------------
// execute / validate inputs

/// Where programs and their environments come from.
#[derive(Debug, Clone)]
pub enum ProgramSource {
    /// DROP-format passages plus a QA annotation sidecar.
    Qa { dataset: PathBuf, annotations: PathBuf },
    /// AWPNLI JSON Lines plus an E/C annotation sidecar.
    Nli { dataset: PathBuf, annotations: PathBuf },
    /// Self-contained records with an explicit environment:
    /// `{"id", "program", "env"}` or `{"id", "e_program", "c_program", "env"}`.
    Records(PathBuf),
}

#[derive(Debug, Deserialize)]
struct EnvRecord {
    id: String,
    #[serde(default)]
    program: Option<String>,
    #[serde(default)]
    e_program: Option<String>,
    #[serde(default)]
    c_program: Option<String>,
    #[serde(default)]
    env: Environment,
}

/// One program to run, in whatever form the source provides.
enum Job {
    Qa {
        id: String,
        program: Option<Program>,
        source: Option<String>,
        env: Environment,
    },
    Nli {
        id: String,
        e: (Option<Program>, Option<String>),
        c: (Option<Program>, Option<String>),
        env: Environment,
    },
}

fn parsed(text: Option<String>) -> (Option<Program>, Option<String>) {
    match text {
        Some(t) => (parse(&t).ok(), Some(t)),
        None => (None, None),
    }
}

fn load_jobs(source: &ProgramSource, lexicon: Option<&Path>) -> Result<Vec<Job>, CliError> {
    let tagger = Tagger::new(&load_lexicon(lexicon)?);
    Ok(match source {
        ProgramSource::Qa { dataset, annotations } => {
            let (mut instances, _) = datasets::load_drop(dataset)?;
            datasets::attach_programs(&mut instances, &datasets::load_annotations(annotations)?)?;
            instances
                .iter()
                .map(|i: &QaInstance| Job::Qa {
                    id: i.id.clone(),
                    program: i.program.clone(),
                    source: i.program_source.clone().or_else(|| i.program.as_ref().map(Program::to_string)),
                    env: qa_environment(&tagger, i),
                })
                .collect()
        }
        ProgramSource::Nli { dataset, annotations } => {
            let mut instances = datasets::load_awpnli(dataset)?;
            datasets::attach_nli_programs(&mut instances, &datasets::load_annotations(annotations)?)?;
            instances
                .iter()
                .map(|i: &NliInstance| {
                    let (e_src, c_src) = i.program_sources.clone().unwrap_or_default();
                    let (e, c) = match &i.programs {
                        Some(pair) => (
                            (Some(pair.e_program.clone()), Some(pair.e_program.to_string())),
                            (Some(pair.c_program.clone()), Some(pair.c_program.to_string())),
                        ),
                        None => (parsed(e_src), parsed(c_src)),
                    };
                    Job::Nli {
                        id: i.id.clone(),
                        e,
                        c,
                        env: nli_environment(&tagger, i),
                    }
                })
                .collect()
        }
        ProgramSource::Records(path) => read_jsonl::<EnvRecord>(path)?
            .into_iter()
            .map(|r| {
                if r.e_program.is_some() || r.c_program.is_some() {
                    Job::Nli {
                        id: r.id,
                        e: parsed(r.e_program),
                        c: parsed(r.c_program),
                        env: r.env,
                    }
                } else {
                    let (program, source) = parsed(r.program);
                    Job::Qa {
                        id: r.id,
                        program,
                        source,
                        env: r.env,
                    }
                }
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// execute

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecuteSummary {
    pub executed: usize,
    pub null: usize,
    /// Percentage of instances whose result is `NULL` (or `Invalid` for NLI).
    pub null_rate: f64,
}

fn run_one(executor: &Executor, program: &(Option<Program>, Option<String>), env: &Environment) -> Outcome {
    match program {
        (Some(p), _) => executor.run(p, env),
        (None, Some(text)) => executor.run_text(text, env),
        (None, None) => Outcome::null(nsp_core::NullReason::NoProgram),
    }
}

fn outcome_json(o: &Outcome) -> (Json, Json) {
    (o.value.to_json(), json!(o.null_reason.map(|r| r.as_str())))
}

/// Executes every program and writes one record per instance. Returns the
/// NULL summary.
pub fn cmd_execute(source: &ProgramSource, lexicon: Option<&Path>, out: &Path) -> Result<ExecuteSummary, CliError> {
    let executor = Executor::default();
    let jobs = load_jobs(source, lexicon)?;
    let mut null = 0;
    let mut records = Vec::with_capacity(jobs.len());
    for job in &jobs {
        match job {
            Job::Qa { id, program, source, env } => {
                let o = run_one(&executor, &(program.clone(), source.clone()), env);
                null += usize::from(o.value.is_null());
                let (value, reason) = outcome_json(&o);
                records.push(json!({ "id": id, "program": source, "value": value, "null_reason": reason }));
            }
            Job::Nli { id, e, c, env } => {
                let (eo, co) = (run_one(&executor, e, env), run_one(&executor, c, env));
                let label = nli_decide(eo.value, co.value);
                null += usize::from(label == NliLabel::Invalid);
                let (e_value, e_reason) = outcome_json(&eo);
                let (c_value, c_reason) = outcome_json(&co);
                records.push(json!({
                    "id": id,
                    "e_value": e_value,
                    "c_value": c_value,
                    "label": label,
                    "e_null_reason": e_reason,
                    "c_null_reason": c_reason,
                }));
            }
        }
    }
    write_jsonl(out, records)?;
    let executed = jobs.len();
    let null_rate = if executed == 0 { 0.0 } else { 100.0 * null as f64 / executed as f64 };
    log::info!("executed {executed} programs, {null} NULL ({null_rate:.2}%)");
    Ok(ExecuteSummary { executed, null, null_rate })
}

// ---------------------------------------------------------------------------
// validate

fn check(program: &(Option<Program>, Option<String>), known: &BTreeSet<&String>) -> ValidationReport {
    match program {
        (Some(p), _) => validate(p, known),
        (None, Some(text)) => validate_text(text, known),
        (None, None) => ValidationReport::default(),
    }
}

/// Statically checks every annotated program against its instance's tokens.
/// Each invalid program counts as an instance-level error.
pub fn cmd_validate(source: &ProgramSource, lexicon: Option<&Path>, out: &Path) -> Result<Completion, CliError> {
    let jobs = load_jobs(source, lexicon)?;
    let mut invalid = 0;
    let mut records = Vec::new();
    for job in &jobs {
        let record = match job {
            Job::Qa { id, program, source, env } => {
                if source.is_none() {
                    continue;
                }
                let known: BTreeSet<&String> = env.keys().collect();
                let report = check(&(program.clone(), source.clone()), &known);
                invalid += usize::from(!report.is_valid());
                json!({ "id": id, "valid": report.is_valid(), "violations": report.violations })
            }
            Job::Nli { id, e, c, env } => {
                if e.1.is_none() && c.1.is_none() {
                    continue;
                }
                let known: BTreeSet<&String> = env.keys().collect();
                let (er, cr) = (check(e, &known), check(c, &known));
                let valid = er.is_valid() && cr.is_valid();
                invalid += usize::from(!valid);
                json!({ "id": id, "valid": valid, "e_violations": er.violations, "c_violations": cr.violations })
            }
        };
        records.push(record);
    }
    log::info!("validated {} programs, {invalid} invalid", records.len());
    write_jsonl(out, records)?;
    Ok(Completion {
        instance_errors: invalid,
    })
}

// ---------------------------------------------------------------------------
// gate-train / gate-eval

/// Trains a gate on `{"features", "target"}` records and writes the model.
pub fn cmd_gate_train(examples: &Path, config: &TrainConfig, out: &Path) -> Result<GateModel, CliError> {
    let data: Vec<GateExample> = read_jsonl(examples)?;
    let model = gate_train(&data, config)?;
    log::info!(
        "trained a {}x{} gate on {} examples, final loss {:.6}",
        model.n_out,
        model.n_in,
        data.len(),
        model.final_loss.unwrap_or(f64::NAN)
    );
    write_json(out, &model)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateEvaluation {
    pub examples: usize,
    /// Share of examples whose highest-scoring type is a correct one.
    pub selection_accuracy: f64,
    pub mean_loss: f64,
}

pub fn cmd_gate_eval(model: &Path, examples: &Path) -> Result<GateEvaluation, CliError> {
    let model: GateModel = read_json_file(model)?;
    let data: Vec<GateExample> = read_jsonl(examples)?;
    let mut hits = 0;
    for ex in &data {
        let p = model.score(&GateFeatures::new(ex.features.clone())?)?;
        let best = p
            .iter()
            .enumerate()
            .fold(0, |best, (k, &v)| if v > p[best] { k } else { best });
        hits += usize::from(ex.target.get(best).is_some_and(|&t| t >= 0.5));
    }
    let n = data.len();
    Ok(GateEvaluation {
        examples: n,
        selection_accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        mean_loss: if n == 0 { 0.0 } else { objective(&model, &data) / n as f64 },
    })
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnswerField {
    One(String),
    Many(Vec<String>),
    Number(f64),
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    id: String,
    #[serde(default)]
    answer: Option<AnswerField>,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Scored {
    Qa(EvalReport),
    Nli { accuracy: f64, count: usize },
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub scored: Scored,
    pub table: String,
    pub missing: usize,
}

/// Scores a prediction file against a dataset. Instances without a
/// prediction score zero and count as instance-level errors.
pub fn cmd_report(
    task: Task,
    dataset: &Path,
    annotations: Option<&Path>,
    predictions: &Path,
    method: &str,
) -> Result<ReportOutput, CliError> {
    let records: Vec<PredictionRecord> = read_jsonl(predictions)?;
    match task {
        Task::Qa => {
            let (mut instances, _) = datasets::load_drop(dataset)?;
            if let Some(a) = annotations {
                datasets::attach_programs(&mut instances, &datasets::load_annotations(a)?)?;
            }
            let mut preds: HashMap<String, Vec<String>> = records
                .into_iter()
                .map(|r| {
                    let spans = match r.answer {
                        Some(AnswerField::One(s)) => vec![s],
                        Some(AnswerField::Many(v)) => v,
                        Some(AnswerField::Number(v)) => vec![nsp_core::executor::render_number(v)],
                        None => Vec::new(),
                    };
                    (r.id, spans)
                })
                .collect();
            let mut missing = 0;
            for inst in &instances {
                preds.entry(inst.id.clone()).or_insert_with(|| {
                    missing += 1;
                    Vec::new()
                });
            }
            let report = metrics::evaluate_qa(&preds, &instances, &program_types(&instances))?;
            let table = metrics::render_table(&report, method);
            Ok(ReportOutput {
                scored: Scored::Qa(report),
                table,
                missing,
            })
        }
        Task::Nli => {
            let instances = datasets::load_awpnli(dataset)?;
            let preds: HashMap<String, NliLabel> = records
                .into_iter()
                .filter_map(|r| Some((r.id, NliLabel::from_str_ci(r.label.as_deref()?)?)))
                .collect();
            let missing = instances.iter().filter(|i| !preds.contains_key(&i.id)).count();
            let accuracy = metrics::evaluate_nli(&preds, &instances);
            Ok(ReportOutput {
                table: format!("{method}: accuracy {accuracy:.2} over {} instances\n", instances.len()),
                scored: Scored::Nli {
                    accuracy,
                    count: instances.len(),
                },
                missing,
            })
        }
    }
}

/// Converts raw AWPNLI JSON Lines into the normalized form.
pub fn cmd_convert_awpnli(input: &Path, out: &Path) -> Result<Completion, CliError> {
    let file = std::fs::File::open(input).map_err(|e| CliError::io(input, e))?;
    let text = datasets::convert_awpnli(std::io::BufReader::new(file))?;
    std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    Ok(Completion::OK)
}
