//! DROP-style exact match / F1 and NLI accuracy.
//!
//! Answers are compared as lists of spans. Each span is normalised into a bag
//! of tokens; a pair of spans scores zero F1 when their number tokens differ.
//! Multi-span answers are aligned one-to-one by an optimal assignment.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{AnswerKind, GoldAnswer, NliInstance, QaInstance};
use crate::executor::NliLabel;
use crate::program::{format_number, Function, FunctionId, Program};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no prediction for instance {0}")]
    MissingPrediction(String),
    #[error("no folds to summarise")]
    EmptyFolds,
}

/// A normalised span: tokens sorted so equality is multiset equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TokenBag(pub Vec<String>);

impl TokenBag {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn numbers(&self) -> Vec<&str> {
        self.0.iter().map(String::as_str).filter(|t| is_number(t)).collect()
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn canonical_number(token: &str) -> Option<String> {
    if !token.bytes().any(|b| b.is_ascii_digit())
        || !token.bytes().all(|b| b.is_ascii_digit() || b == b',' || b == b'.')
    {
        return None;
    }
    let v: f64 = token.replace(',', "").parse().ok()?;
    Some(format_number(v))
}

fn is_number(token: &str) -> bool {
    canonical_number(token).is_some()
}

/// Lowercases, splits on whitespace and hyphens, strips punctuation outside
/// numbers, drops articles and canonicalises numerals.
pub fn normalize(text: &str) -> TokenBag {
    let mut tokens: Vec<String> = text
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            if let Some(n) = canonical_number(&lower) {
                return Some(n);
            }
            let stripped: String = lower.chars().filter(|c| c.is_alphanumeric()).collect();
            if stripped.is_empty() || ARTICLES.contains(&stripped.as_str()) {
                return None;
            }
            Some(canonical_number(&stripped).unwrap_or(stripped))
        })
        .collect();
    tokens.sort_unstable();
    TokenBag(tokens)
}

/// Bag-of-tokens F1 between two normalised spans, gated on numbers.
pub fn pair_f1(pred: &TokenBag, gold: &TokenBag) -> f64 {
    let (pn, gn) = (pred.numbers(), gold.numbers());
    if (!pn.is_empty() || !gn.is_empty()) && pn != gn {
        return 0.0;
    }
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let common = multiset_intersection(&pred.0, &gold.0);
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Size of the intersection of two sorted token lists.
fn multiset_intersection(a: &[String], b: &[String]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnswerBag {
    pub spans: Vec<TokenBag>,
    pub raw: Vec<String>,
}

impl AnswerBag {
    pub fn new<S: AsRef<str>>(raw: &[S]) -> Self {
        AnswerBag {
            spans: raw.iter().map(|s| normalize(s.as_ref())).collect(),
            raw: raw.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

/// Maximum-weight one-to-one assignment on a rectangular score matrix.
/// Returns the total score.
pub fn max_assignment(scores: &[Vec<f64>]) -> f64 {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let n = rows.max(cols);
    // Square cost matrix, padded with zeros, minimising negated scores.
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -scores[i][j]
        } else {
            0.0
        }
    };
    // Hungarian algorithm with potentials, 1-based.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n)
        .filter(|&j| matched_row[j] >= 1 && matched_row[j] <= rows && j <= cols)
        .map(|j| scores[matched_row[j] - 1][j - 1])
        .sum()
}

/// `(em, f1)` for one prediction against one gold answer. Both sides are
/// compared as sets of normalized spans, so repeated spans count once.
pub fn instance_scores(pred: &AnswerBag, gold: &AnswerBag) -> (f64, f64) {
    let as_set = |b: &AnswerBag| {
        let mut s = b.spans.clone();
        s.sort();
        s.dedup();
        s
    };
    let (pred, gold) = (as_set(pred), as_set(gold));
    let em = if pred == gold { 1.0 } else { 0.0 };
    let denom = pred.len().max(gold.len());
    let f1 = if denom == 0 {
        1.0
    } else {
        let matrix: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| gold.iter().map(|g| pair_f1(p, g)).collect())
            .collect();
        max_assignment(&matrix) / denom as f64
    };
    (em, f1)
}

/// Best `(em, f1)` over several gold annotations (each maximised separately).
pub fn instance_scores_multi<'a>(pred: &AnswerBag, golds: impl IntoIterator<Item = &'a AnswerBag>) -> (f64, f64) {
    golds
        .into_iter()
        .map(|g| instance_scores(pred, g))
        .fold((0.0, 0.0), |(e, f), (e2, f2)| (f64::max(e, e2), f64::max(f, f2)))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProgramType {
    #[serde(rename = "add/diff")]
    AddDiff,
    #[serde(rename = "max/min")]
    MaxMin,
    #[serde(rename = "count")]
    Count,
    #[serde(rename = "mul/div/avg")]
    MulDivAvg,
}

impl ProgramType {
    pub const ALL: [ProgramType; 4] = [
        ProgramType::AddDiff,
        ProgramType::MaxMin,
        ProgramType::Count,
        ProgramType::MulDivAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProgramType::AddDiff => "add/diff",
            ProgramType::MaxMin => "max/min",
            ProgramType::Count => "count",
            ProgramType::MulDivAvg => "mul/div/avg",
        }
    }

    /// Bucket by outermost function; comparisons and date fields have none.
    pub fn of(program: &Program) -> Option<Self> {
        let Some(Function::Known(id)) = program.root_function() else {
            return None;
        };
        Some(match id {
            FunctionId::Add | FunctionId::Diff => ProgramType::AddDiff,
            FunctionId::Max | FunctionId::Min => ProgramType::MaxMin,
            FunctionId::Count => ProgramType::Count,
            FunctionId::Mul | FunctionId::Div | FunctionId::Avg => ProgramType::MulDivAvg,
            _ => return None,
        })
    }
}

impl fmt::Display for ProgramType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Program types of every annotated instance.
pub fn program_types(instances: &[QaInstance]) -> HashMap<String, ProgramType> {
    instances
        .iter()
        .filter_map(|i| Some((i.id.clone(), ProgramType::of(i.program.as_ref()?)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bucket {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    em: f64,
    f1: f64,
    count: usize,
}

impl Acc {
    fn add(&mut self, em: f64, f1: f64) {
        self.em += em;
        self.f1 += f1;
        self.count += 1;
    }

    fn bucket(self) -> Bucket {
        if self.count == 0 {
            return Bucket::default();
        }
        let n = self.count as f64;
        Bucket {
            em: 100.0 * self.em / n,
            f1: 100.0 * self.f1 / n,
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
    pub by_answer_type: BTreeMap<AnswerKind, Bucket>,
    pub by_program_type: BTreeMap<ProgramType, Bucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub answer_type: AnswerKind,
    pub program_type: Option<ProgramType>,
}

pub fn gold_bag(gold: &GoldAnswer) -> AnswerBag {
    AnswerBag::new(&gold.spans())
}

/// Scores every instance. Predictions are keyed by instance id.
pub fn score_qa<S: AsRef<str>>(
    predictions: &HashMap<String, Vec<S>>,
    instances: &[QaInstance],
    program_type_of: &HashMap<String, ProgramType>,
) -> Result<Vec<InstanceScore>, MetricsError> {
    instances
        .iter()
        .map(|inst| {
            let pred = predictions
                .get(&inst.id)
                .ok_or_else(|| MetricsError::MissingPrediction(inst.id.clone()))?;
            let pred = AnswerBag::new(pred);
            let golds: Vec<AnswerBag> = inst.golds().map(gold_bag).collect();
            let (em, f1) = instance_scores_multi(&pred, &golds);
            Ok(InstanceScore {
                id: inst.id.clone(),
                em,
                f1,
                answer_type: inst.gold_answer.kind(),
                program_type: program_type_of.get(&inst.id).copied(),
            })
        })
        .collect()
}

pub fn aggregate(scores: &[InstanceScore]) -> EvalReport {
    let mut total = Acc::default();
    let mut by_answer: BTreeMap<AnswerKind, Acc> = BTreeMap::new();
    let mut by_program: BTreeMap<ProgramType, Acc> = BTreeMap::new();
    for s in scores {
        total.add(s.em, s.f1);
        by_answer.entry(s.answer_type).or_default().add(s.em, s.f1);
        if let Some(pt) = s.program_type {
            by_program.entry(pt).or_default().add(s.em, s.f1);
        }
    }
    let total = total.bucket();
    EvalReport {
        em: total.em,
        f1: total.f1,
        count: total.count,
        by_answer_type: by_answer.into_iter().map(|(k, a)| (k, a.bucket())).collect(),
        by_program_type: by_program.into_iter().map(|(k, a)| (k, a.bucket())).collect(),
    }
}

pub fn evaluate_qa<S: AsRef<str>>(
    predictions: &HashMap<String, Vec<S>>,
    instances: &[QaInstance],
    program_type_of: &HashMap<String, ProgramType>,
) -> Result<EvalReport, MetricsError> {
    Ok(aggregate(&score_qa(predictions, instances, program_type_of)?))
}

/// Plain-text tables: F1 by answer type, then F1 by program type.
pub fn render_table(report: &EvalReport, method: &str) -> String {
    let mut out = String::new();
    let width = method.chars().count().max(6);
    let cell = |b: Option<&Bucket>| b.map_or_else(|| "-".to_string(), |b| format!("{:.2}", b.f1));
    out.push_str(&format!(
        "{:<width$} {:>8} {:>8} {:>8} {:>8}\n",
        "Method", "Number", "Span(s)", "Date", "Total"
    ));
    out.push_str(&format!(
        "{:<width$} {:>8} {:>8} {:>8} {:>8.2}\n",
        method,
        cell(report.by_answer_type.get(&AnswerKind::Number)),
        cell(report.by_answer_type.get(&AnswerKind::Spans)),
        cell(report.by_answer_type.get(&AnswerKind::Date)),
        report.f1,
    ));
    out.push('\n');
    out.push_str(&format!(
        "{:<width$} {:>9} {:>9} {:>9} {:>12}\n",
        "Method", "add/diff", "max/min", "count", "mul/div/avg"
    ));
    let cells: Vec<String> = ProgramType::ALL
        .iter()
        .map(|t| cell(report.by_program_type.get(t)))
        .collect();
    out.push_str(&format!(
        "{:<width$} {:>9} {:>9} {:>9} {:>12}\n",
        method, cells[0], cells[1], cells[2], cells[3]
    ));
    let counts: Vec<String> = ProgramType::ALL
        .iter()
        .map(|t| report.by_program_type.get(t).map_or(0, |b| b.count).to_string())
        .collect();
    out.push_str(&format!(
        "{:<width$} {:>9} {:>9} {:>9} {:>12}\n",
        "Number of cases", counts[0], counts[1], counts[2], counts[3]
    ));
    out.push_str(&format!("EM {:.2}  F1 {:.2}  n={}\n", report.em, report.f1, report.count));
    out
}

// ---------------------------------------------------------------------------
// NLI

/// Accuracy in percent. Instances without a prediction count as wrong.
pub fn evaluate_nli(predictions: &HashMap<String, NliLabel>, instances: &[NliInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let correct = instances
        .iter()
        .filter(|i| predictions.get(&i.id) == Some(&i.gold_label))
        .count();
    100.0 * correct as f64 / instances.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl fmt::Display for CvSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.stddev)
    }
}

pub fn cv_summary(per_fold: &[f64]) -> Result<CvSummary, MetricsError> {
    if per_fold.is_empty() {
        return Err(MetricsError::EmptyFolds);
    }
    let n = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / n;
    let var = per_fold.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(CvSummary {
        mean,
        stddev: var.sqrt(),
    })
}
