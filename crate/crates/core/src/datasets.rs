//! DROP and AWPNLI loading, program-annotation sidecars and k-fold plans.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::executor::{NliLabel, NliProgramPair};
use crate::program::{parse, ParseError, Program};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON{}: {source}", line_suffix(*.line))]
    MalformedJson {
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing field {key} at {path}")]
    MissingField { path: String, key: String },
    #[error("unknown label {label:?} on line {line}")]
    UnknownLabel { line: usize, label: String },
    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate annotation for {0}")]
    DuplicateAnnotation(String),
    #[error("k must satisfy 2 <= k <= {n}, got {k}")]
    BadK { k: usize, n: usize },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" on line {l}")).unwrap_or_default()
}

fn read_file(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DateAnswer {
    #[serde(default)]
    pub day: String,
    #[serde(default)]
    pub month: String,
    #[serde(default)]
    pub year: String,
}

impl DateAnswer {
    pub fn is_empty(&self) -> bool {
        self.day.trim().is_empty() && self.month.trim().is_empty() && self.year.trim().is_empty()
    }

    /// `"day month year"`, skipping empty parts.
    pub fn render(&self) -> String {
        [&self.day, &self.month, &self.year]
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldAnswer {
    Number(String),
    Spans(Vec<String>),
    Date(DateAnswer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerKind {
    Number,
    Spans,
    Date,
}

impl AnswerKind {
    pub const ALL: [AnswerKind; 3] = [AnswerKind::Number, AnswerKind::Spans, AnswerKind::Date];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerKind::Number => "number",
            AnswerKind::Spans => "spans",
            AnswerKind::Date => "date",
        }
    }
}

impl GoldAnswer {
    pub fn kind(&self) -> AnswerKind {
        match self {
            GoldAnswer::Number(_) => AnswerKind::Number,
            GoldAnswer::Spans(_) => AnswerKind::Spans,
            GoldAnswer::Date(_) => AnswerKind::Date,
        }
    }

    /// Gold rendered as scoreable spans.
    pub fn spans(&self) -> Vec<String> {
        match self {
            GoldAnswer::Number(n) => vec![n.clone()],
            GoldAnswer::Spans(s) => s.clone(),
            GoldAnswer::Date(d) => vec![d.render()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaInstance {
    pub id: String,
    pub passage_id: String,
    pub passage: String,
    pub question: String,
    pub gold_answer: GoldAnswer,
    /// Additional validated answers; scoring takes the max over all golds.
    pub alt_answers: Vec<GoldAnswer>,
    pub program: Option<Program>,
    /// Raw annotation text, kept when it failed to parse.
    pub program_source: Option<String>,
}

impl QaInstance {
    pub fn golds(&self) -> impl Iterator<Item = &GoldAnswer> {
        std::iter::once(&self.gold_answer).chain(&self.alt_answers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliInstance {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold_label: NliLabel,
    pub programs: Option<NliProgramPair>,
    pub program_sources: Option<(Option<String>, Option<String>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub records: usize,
    pub ambiguous_gold: usize,
    pub empty_gold: usize,
}

/// Chooses the gold variant; spans beat number beat date.
/// Returns the answer and whether more than one variant was populated.
fn gold_from_json(answer: &Json) -> Option<(GoldAnswer, bool)> {
    let spans: Vec<String> = answer
        .get("spans")
        .and_then(Json::as_array)
        .map(|a| {
            a.iter()
                .filter_map(Json::as_str)
                .map(str::to_string)
                .filter(|s| !s.trim().is_empty())
                .collect()
        })
        .unwrap_or_default();
    let number = match answer.get("number") {
        Some(Json::String(s)) => s.trim().to_string(),
        Some(Json::Number(n)) => n.to_string(),
        _ => String::new(),
    };
    let date: DateAnswer = answer
        .get("date")
        .and_then(|d| serde_json::from_value(d.clone()).ok())
        .unwrap_or_default();

    let populated = usize::from(!spans.is_empty()) + usize::from(!number.is_empty()) + usize::from(!date.is_empty());
    let gold = if !spans.is_empty() {
        GoldAnswer::Spans(spans)
    } else if !number.is_empty() {
        GoldAnswer::Number(number)
    } else if !date.is_empty() {
        GoldAnswer::Date(date)
    } else {
        return None;
    };
    Some((gold, populated > 1))
}

/// Loads the published DROP layout: `{passage_id: {passage, qa_pairs: [...]}}`.
pub fn load_drop(path: impl AsRef<Path>) -> Result<(Vec<QaInstance>, LoadStats), DatasetError> {
    parse_drop(&read_file(path.as_ref())?)
}

pub fn parse_drop(text: &str) -> Result<(Vec<QaInstance>, LoadStats), DatasetError> {
    let root: Json = serde_json::from_str(text).map_err(|source| DatasetError::MalformedJson { line: None, source })?;
    let passages = root.as_object().ok_or_else(|| DatasetError::MissingField {
        path: "$".into(),
        key: "<passage map>".into(),
    })?;
    let missing = |path: String, key: &str| DatasetError::MissingField {
        path,
        key: key.to_string(),
    };

    let mut out = Vec::new();
    let mut stats = LoadStats::default();
    for (pid, entry) in passages {
        let passage = entry
            .get("passage")
            .and_then(Json::as_str)
            .ok_or_else(|| missing(format!("$.{pid}"), "passage"))?;
        let pairs = entry
            .get("qa_pairs")
            .and_then(Json::as_array)
            .ok_or_else(|| missing(format!("$.{pid}"), "qa_pairs"))?;
        for (i, qa) in pairs.iter().enumerate() {
            let at = format!("$.{pid}.qa_pairs[{i}]");
            let question = qa
                .get("question")
                .and_then(Json::as_str)
                .ok_or_else(|| missing(at.clone(), "question"))?;
            let id = qa
                .get("query_id")
                .and_then(Json::as_str)
                .ok_or_else(|| missing(at.clone(), "query_id"))?;
            let answer = qa.get("answer").ok_or_else(|| missing(at.clone(), "answer"))?;
            stats.records += 1;
            let Some((gold, ambiguous)) = gold_from_json(answer) else {
                stats.empty_gold += 1;
                log::warn!("{id}: no gold answer populated, skipping");
                continue;
            };
            if ambiguous {
                stats.ambiguous_gold += 1;
                log::warn!("{id}: several gold variants populated, using {:?}", gold.kind());
            }
            let alt_answers = qa
                .get("validated_answers")
                .and_then(Json::as_array)
                .map(|a| a.iter().filter_map(gold_from_json).map(|(g, _)| g).collect())
                .unwrap_or_default();
            out.push(QaInstance {
                id: id.to_string(),
                passage_id: pid.clone(),
                passage: passage.to_string(),
                question: question.to_string(),
                gold_answer: gold,
                alt_answers,
                program: None,
                program_source: None,
            });
        }
    }
    Ok((out, stats))
}

#[derive(Debug, Deserialize)]
struct AwpnliRecord {
    #[serde(default)]
    id: Option<Json>,
    #[serde(alias = "sentence1")]
    premise: Option<String>,
    #[serde(alias = "sentence2")]
    hypothesis: Option<String>,
    #[serde(alias = "gold_label")]
    label: Option<String>,
}

/// Loads AWPNLI as JSONL `{id?, premise, hypothesis, label}`. The
/// `sentence1`/`sentence2`/`gold_label` keys of the upstream release are
/// accepted too. Records without an id get their 1-based line number.
pub fn load_awpnli(path: impl AsRef<Path>) -> Result<Vec<NliInstance>, DatasetError> {
    parse_awpnli(&read_file(path.as_ref())?)
}

pub fn parse_awpnli(text: &str) -> Result<Vec<NliInstance>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AwpnliRecord = serde_json::from_str(line).map_err(|source| DatasetError::MalformedJson {
            line: Some(line_no),
            source,
        })?;
        let field = |v: Option<String>, name: &str| {
            v.ok_or_else(|| DatasetError::MalformedRecord {
                line: line_no,
                message: format!("missing {name}"),
            })
        };
        let premise = field(rec.premise, "premise")?;
        let hypothesis = field(rec.hypothesis, "hypothesis")?;
        let label = field(rec.label, "label")?;
        let gold_label = match NliLabel::from_str_ci(&label) {
            Some(l) if l != NliLabel::Invalid => l,
            _ => return Err(DatasetError::UnknownLabel { line: line_no, label }),
        };
        let id = match rec.id {
            Some(Json::String(s)) => s,
            Some(Json::Number(n)) => n.to_string(),
            _ => line_no.to_string(),
        };
        out.push(NliInstance {
            id,
            premise,
            hypothesis,
            gold_label,
            programs: None,
            program_sources: None,
        });
    }
    Ok(out)
}

/// Rewrites upstream-layout AWPNLI JSONL into the canonical layout.
pub fn convert_awpnli(reader: impl BufRead) -> Result<String, DatasetError> {
    let mut text = String::new();
    for line in reader.lines() {
        let line = line.map_err(|source| DatasetError::Io {
            path: "<input>".into(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    let mut out = String::new();
    for inst in parse_awpnli(&text)? {
        let rec = serde_json::json!({
            "id": inst.id,
            "premise": inst.premise,
            "hypothesis": inst.hypothesis,
            "label": inst.gold_label.as_str(),
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Program annotations

/// One line of the annotation sidecar. `None` is the annotator's `[NULL]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "Json")]
pub enum AnnotationRecord {
    Nli {
        id: String,
        e_program: Option<String>,
        c_program: Option<String>,
    },
    Qa {
        id: String,
        program: Option<String>,
    },
}

impl TryFrom<Json> for AnnotationRecord {
    type Error = String;

    fn try_from(v: Json) -> Result<Self, Self::Error> {
        let obj = v.as_object().ok_or("annotation must be a JSON object")?;
        let id = match obj.get("id") {
            Some(Json::String(s)) => s.clone(),
            Some(Json::Number(n)) => n.to_string(),
            _ => return Err("annotation needs an \"id\"".into()),
        };
        let program = |key: &str| -> Result<Option<String>, String> {
            match obj.get(key) {
                None | Some(Json::Null) => Ok(None),
                Some(Json::String(s)) if s.trim() == "[NULL]" => Ok(None),
                Some(Json::String(s)) => Ok(Some(s.clone())),
                Some(other) => Err(format!("{key} must be a string or null, got {other}")),
            }
        };
        if obj.contains_key("e_program") || obj.contains_key("c_program") {
            Ok(AnnotationRecord::Nli {
                id,
                e_program: program("e_program")?,
                c_program: program("c_program")?,
            })
        } else if obj.contains_key("program") {
            Ok(AnnotationRecord::Qa {
                id,
                program: program("program")?,
            })
        } else {
            Err("annotation needs \"program\" or \"e_program\"/\"c_program\"".into())
        }
    }
}

impl AnnotationRecord {
    pub fn id(&self) -> &str {
        match self {
            AnnotationRecord::Nli { id, .. } | AnnotationRecord::Qa { id, .. } => id,
        }
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, DatasetError> {
    parse_annotations(&read_file(path.as_ref())?)
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DatasetError::MalformedJson {
                line: Some(i + 1),
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttachReport {
    pub attached: usize,
    pub null_labels: usize,
    pub orphans: Vec<String>,
    pub unparseable: Vec<(String, String)>,
}

fn index_annotations(records: &[AnnotationRecord]) -> Result<HashMap<&str, &AnnotationRecord>, DatasetError> {
    let mut by_id = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.id(), r).is_some() {
            return Err(DatasetError::DuplicateAnnotation(r.id().to_string()));
        }
    }
    Ok(by_id)
}

fn parse_source(id: &str, src: &str, report: &mut AttachReport) -> Option<Program> {
    match parse(src) {
        Ok(p) => Some(p),
        Err(ParseError { position, message }) => {
            report.unparseable.push((id.to_string(), format!("position {position}: {message}")));
            None
        }
    }
}

/// Joins QA annotations by id. Programs that fail to parse are left absent
/// but keep their source text so execution can report a parse error.
pub fn attach_programs(instances: &mut [QaInstance], records: &[AnnotationRecord]) -> Result<AttachReport, DatasetError> {
    let by_id = index_annotations(records)?;
    let mut report = AttachReport::default();
    let known: HashSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    report.orphans = orphans(records, &known);
    for inst in instances.iter_mut() {
        let Some(rec) = by_id.get(inst.id.as_str()) else {
            continue;
        };
        let src = match rec {
            AnnotationRecord::Qa { program, .. } => program.clone(),
            AnnotationRecord::Nli { .. } => None,
        };
        match src {
            None => {
                report.null_labels += 1;
                inst.program = None;
                inst.program_source = None;
            }
            Some(src) => {
                inst.program = parse_source(&inst.id, &src, &mut report);
                inst.program_source = Some(src);
                report.attached += 1;
            }
        }
    }
    Ok(report)
}

pub fn attach_nli_programs(instances: &mut [NliInstance], records: &[AnnotationRecord]) -> Result<AttachReport, DatasetError> {
    let by_id = index_annotations(records)?;
    let mut report = AttachReport::default();
    let known: HashSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    report.orphans = orphans(records, &known);
    for inst in instances.iter_mut() {
        let Some(rec) = by_id.get(inst.id.as_str()) else {
            continue;
        };
        let (e, c) = match rec {
            AnnotationRecord::Nli { e_program, c_program, .. } => (e_program.clone(), c_program.clone()),
            AnnotationRecord::Qa { .. } => (None, None),
        };
        if e.is_none() && c.is_none() {
            report.null_labels += 1;
            inst.programs = None;
            inst.program_sources = None;
            continue;
        }
        let ep = e.as_deref().and_then(|s| parse_source(&inst.id, s, &mut report));
        let cp = c.as_deref().and_then(|s| parse_source(&inst.id, s, &mut report));
        inst.programs = match (ep, cp) {
            (Some(e_program), Some(c_program)) => Some(NliProgramPair { e_program, c_program }),
            _ => None,
        };
        inst.program_sources = Some((e, c));
        report.attached += 1;
    }
    Ok(report)
}

fn orphans(records: &[AnnotationRecord], known: &HashSet<&str>) -> Vec<String> {
    let orphans: Vec<String> = records
        .iter()
        .filter(|r| !known.contains(r.id()))
        .map(|r| r.id().to_string())
        .collect();
    for o in &orphans {
        log::warn!("annotation for unknown instance {o}");
    }
    orphans
}

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment into `k` folds.
pub fn kfold<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    if k < 2 || k > ids.len() {
        return Err(DatasetError::BadK { k, n: ids.len() });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(pos, idx)| (ids[idx].as_ref().to_string(), pos % k))
        .collect::<BTreeMap<_, _>>();
    if assignments.len() != ids.len() {
        return Err(DatasetError::MalformedRecord {
            line: 0,
            message: "instance ids are not unique".into(),
        });
    }
    Ok(FoldPlan { k, seed, assignments })
}
