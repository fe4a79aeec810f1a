//! Sources of neural prediction candidates.
//!
//! A provider answers one instance at a time. The file provider replays
//! precomputed candidates, the HTTP provider asks a model server, and the mock
//! provider derives candidates from gold answers with controlled corruption.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use nsp_core::datasets::{GoldAnswer, NliInstance, QaInstance};
use nsp_core::ensemble::{Answer, AnswerType, PredictionCandidate};
use nsp_core::executor::NliLabel;
use nsp_core::metrics::normalize;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::error::CliError;

pub const CANDIDATE_SCHEMA: &str = "nsp-candidates/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Unavailable { .. } => "provider_unavailable",
            ProviderError::SchemaMismatch(_) => "schema_mismatch",
        }
    }
}

pub trait Provider: Send + Sync {
    /// Neural candidates for a QA instance. An empty list is a valid answer.
    fn qa(&self, instance: &QaInstance) -> Result<Vec<PredictionCandidate>, ProviderError>;

    /// The classifier's label for an NLI instance, if it produced one.
    fn nli(&self, instance: &NliInstance) -> Result<Option<NliLabel>, ProviderError>;
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// File path or base URL. Unused by the mock provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    /// Per-request timeout in milliseconds.
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    /// Total number of attempts per request.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Initial backoff in milliseconds, doubled after every failed attempt.
    #[serde(default = "default_backoff")]
    pub backoff: u64,
    #[serde(default)]
    pub mock: MockConfig,
}

fn default_timeout() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    200
}

impl ProviderConfig {
    pub fn file(path: impl Into<String>) -> Self {
        Self::with_kind(ProviderKind::File, Some(path.into()))
    }

    pub fn http(url: impl Into<String>) -> Self {
        Self::with_kind(ProviderKind::Http, Some(url.into()))
    }

    pub fn mock(mock: MockConfig) -> Self {
        ProviderConfig {
            mock,
            ..Self::with_kind(ProviderKind::Mock, None)
        }
    }

    fn with_kind(kind: ProviderKind, location: Option<String>) -> Self {
        ProviderConfig {
            kind,
            location,
            timeout: default_timeout(),
            retries: default_retries(),
            backoff: default_backoff(),
            mock: MockConfig::default(),
        }
    }

    /// Checks the invariants and resolves a relative file location against
    /// `base`.
    pub fn resolve(&self, base: &Path) -> Result<ProviderConfig, CliError> {
        let mut out = self.clone();
        if self.retries == 0 {
            return Err(CliError::Config("provider.retries must be at least 1".into()));
        }
        match self.kind {
            ProviderKind::File => {
                let loc = self
                    .location
                    .as_deref()
                    .ok_or_else(|| CliError::Config("file provider needs a location".into()))?;
                let path = base.join(loc);
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "file provider location {} does not exist",
                        path.display()
                    )));
                }
                out.location = Some(path.display().to_string());
            }
            ProviderKind::Http => {
                let loc = self
                    .location
                    .as_deref()
                    .ok_or_else(|| CliError::Config("http provider needs a location".into()))?;
                if !(loc.starts_with("http://") || loc.starts_with("https://")) || loc.len() <= "https://".len() {
                    return Err(CliError::Config(format!("http provider needs an absolute URL, got {loc:?}")));
                }
            }
            ProviderKind::Mock => self.mock.check()?,
        }
        Ok(out)
    }

    /// Builds the provider. `resolve` must have succeeded first.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Provider>, CliError> {
        let location = self.location.clone().unwrap_or_default();
        Ok(match self.kind {
            ProviderKind::File => Box::new(FileProvider::load(PathBuf::from(location))?),
            ProviderKind::Http => Box::new(HttpProvider::new(
                &location,
                Duration::from_millis(self.timeout),
                self.retries,
                Duration::from_millis(self.backoff),
            )),
            ProviderKind::Mock => Box::new(MockProvider::new(self.mock.clone(), seed)),
        })
    }
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Debug, Deserialize)]
struct WireCandidate {
    #[serde(rename = "type")]
    kind: String,
    answer: Json,
    #[serde(default = "one")]
    confidence: f64,
}

fn one() -> f64 {
    1.0
}

fn check_confidence(c: f64) -> Result<f64, ProviderError> {
    if c.is_finite() && (0.0..=1.0).contains(&c) {
        Ok(c)
    } else {
        Err(ProviderError::SchemaMismatch(format!("confidence {c} outside [0, 1]")))
    }
}

fn wire_candidates(record: &Json, expected_id: &str, require_schema: bool) -> Result<Vec<WireCandidate>, ProviderError> {
    let obj = record
        .as_object()
        .ok_or_else(|| ProviderError::SchemaMismatch("response is not a JSON object".into()))?;
    match obj.get("schema").and_then(Json::as_str) {
        Some(CANDIDATE_SCHEMA) => {}
        Some(other) => return Err(ProviderError::SchemaMismatch(format!("unsupported schema {other:?}"))),
        None if require_schema => return Err(ProviderError::SchemaMismatch("missing schema field".into())),
        None => {}
    }
    if let Some(id) = obj.get("id") {
        if id.as_str() != Some(expected_id) {
            return Err(ProviderError::SchemaMismatch(format!("response id {id} does not match {expected_id:?}")));
        }
    }
    match obj.get("candidates") {
        None | Some(Json::Null) => Ok(Vec::new()),
        Some(c) => serde_json::from_value(c.clone()).map_err(|e| ProviderError::SchemaMismatch(e.to_string())),
    }
}

fn qa_candidates(wire: Vec<WireCandidate>) -> Result<Vec<PredictionCandidate>, ProviderError> {
    wire.into_iter()
        .map(|w| {
            let answer_type: AnswerType = w.kind.parse().map_err(ProviderError::SchemaMismatch)?;
            let answer: Answer = serde_json::from_value(w.answer)
                .map_err(|_| ProviderError::SchemaMismatch("answer must be a number, string, list of strings or null".into()))?;
            Ok(PredictionCandidate::new(answer_type, answer, check_confidence(w.confidence)?))
        })
        .collect()
}

fn nli_classification(wire: Vec<WireCandidate>) -> Result<Option<NliLabel>, ProviderError> {
    let mut best: Option<(NliLabel, f64)> = None;
    for w in wire {
        if w.kind != "classification" {
            return Err(ProviderError::SchemaMismatch(format!("unexpected NLI candidate type {:?}", w.kind)));
        }
        let confidence = check_confidence(w.confidence)?;
        let label = match &w.answer {
            Json::Null => continue,
            Json::String(s) => NliLabel::from_str_ci(s)
                .filter(|l| *l != NliLabel::Invalid)
                .ok_or_else(|| ProviderError::SchemaMismatch(format!("unknown label {s:?}")))?,
            other => return Err(ProviderError::SchemaMismatch(format!("label must be a string, got {other}"))),
        };
        if best.is_none_or(|(_, c)| confidence > c) {
            best = Some((label, confidence));
        }
    }
    Ok(best.map(|(l, _)| l))
}

// ---------------------------------------------------------------------------
// File provider

/// Replays candidates from a JSON Lines file keyed by instance id.
pub struct FileProvider {
    records: HashMap<String, Json>,
}

impl FileProvider {
    pub fn load(path: PathBuf) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut records = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            // Bad lines are reported when their instance is requested, so they
            // never abort the batch.
            let Ok(value) = serde_json::from_str::<Json>(line) else {
                log::warn!("{}:{}: skipping line that is not JSON", path.display(), n + 1);
                continue;
            };
            match value.get("id").and_then(Json::as_str).map(str::to_string) {
                Some(id) => {
                    if records.insert(id.clone(), value).is_some() {
                        log::warn!("{}:{}: duplicate candidates for {id}, keeping the last", path.display(), n + 1);
                    }
                }
                None => log::warn!("{}:{}: skipping record without an id", path.display(), n + 1),
            }
        }
        Ok(FileProvider { records })
    }

    fn record(&self, id: &str) -> Result<Vec<WireCandidate>, ProviderError> {
        match self.records.get(id) {
            Some(r) => wire_candidates(r, id, false),
            None => {
                log::debug!("no candidates recorded for {id}");
                Ok(Vec::new())
            }
        }
    }
}

impl Provider for FileProvider {
    fn qa(&self, instance: &QaInstance) -> Result<Vec<PredictionCandidate>, ProviderError> {
        qa_candidates(self.record(&instance.id)?)
    }

    fn nli(&self, instance: &NliInstance) -> Result<Option<NliLabel>, ProviderError> {
        nli_classification(self.record(&instance.id)?)
    }
}

// ---------------------------------------------------------------------------
// HTTP provider

pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    attempts: u32,
    backoff: Duration,
}

impl HttpProvider {
    pub fn new(base_url: &str, timeout: Duration, attempts: u32, backoff: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/predict") {
            base.to_string()
        } else {
            format!("{base}/predict")
        };
        HttpProvider {
            agent,
            endpoint,
            attempts: attempts.max(1),
            backoff,
        }
    }

    fn post(&self, id: &str, body: &Json) -> Result<Vec<WireCandidate>, ProviderError> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.agent.post(&self.endpoint).send_json(body) {
                Ok(mut response) => {
                    let value: Json = response
                        .body_mut()
                        .read_json()
                        .map_err(|e| ProviderError::SchemaMismatch(format!("response is not JSON: {e}")))?;
                    return wire_candidates(&value, id, true);
                }
                Err(e) => {
                    log::debug!("{id}: attempt {} of {} failed: {e}", attempt + 1, self.attempts);
                    last = e.to_string();
                }
            }
        }
        Err(ProviderError::Unavailable {
            attempts: self.attempts,
            message: last,
        })
    }
}

impl Provider for HttpProvider {
    fn qa(&self, instance: &QaInstance) -> Result<Vec<PredictionCandidate>, ProviderError> {
        let body = json!({ "id": instance.id, "passage": instance.passage, "question": instance.question });
        qa_candidates(self.post(&instance.id, &body)?)
    }

    fn nli(&self, instance: &NliInstance) -> Result<Option<NliLabel>, ProviderError> {
        let body = json!({ "id": instance.id, "premise": instance.premise, "hypothesis": instance.hypothesis });
        nli_classification(self.post(&instance.id, &body)?)
    }
}

// ---------------------------------------------------------------------------
// Mock provider

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    /// Replace the answer with a plausible wrong one.
    #[default]
    Wrong,
    /// Drop the answer.
    Null,
}

/// Probability of corrupting the gold answer, by gold answer kind.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionRates {
    pub number: f64,
    pub spans: f64,
    pub date: f64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub corrupt: CorruptionRates,
    pub corruption: Corruption,
    pub confidence: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            corrupt: CorruptionRates::default(),
            corruption: Corruption::Wrong,
            confidence: 0.8,
        }
    }
}

impl MockConfig {
    fn check(&self) -> Result<(), CliError> {
        let r = &self.corrupt;
        for (name, v) in [("number", r.number), ("spans", r.spans), ("date", r.date), ("label", r.label), ("confidence", self.confidence)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("mock {name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Candidates derived from gold answers. Every instance draws from its own
/// stream seeded by the run seed and the instance id, so output does not
/// depend on scheduling.
pub struct MockProvider {
    config: MockConfig,
    seed: u64,
}

impl MockProvider {
    pub fn new(config: MockConfig, seed: u64) -> Self {
        MockProvider { config, seed }
    }

    fn rng(&self, id: &str) -> ChaCha8Rng {
        // FNV-1a keeps the id hash stable across platforms and releases.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in id.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }
}

fn answer_type_for(gold: &GoldAnswer, question: &str) -> AnswerType {
    match gold {
        GoldAnswer::Spans(s) if s.len() > 1 => AnswerType::SequenceLabeling,
        GoldAnswer::Spans(s) if s.len() == 1 && question.to_lowercase().contains(&s[0].to_lowercase()) => {
            AnswerType::QuestionSpan
        }
        GoldAnswer::Number(n) => match n.trim().parse::<f64>() {
            Ok(v) if v.fract() == 0.0 && (0.0..=9.0).contains(&v) => AnswerType::NumberClass,
            _ => AnswerType::PassageSpan,
        },
        _ => AnswerType::PassageSpan,
    }
}

fn gold_as_answer(gold: &GoldAnswer) -> Answer {
    match gold {
        GoldAnswer::Number(n) => match n.trim().replace(',', "").parse::<f64>() {
            Ok(v) => Answer::Number(v),
            Err(_) => Answer::Text(n.clone()),
        },
        GoldAnswer::Spans(s) if s.len() == 1 => Answer::Text(s[0].clone()),
        GoldAnswer::Spans(s) => Answer::Spans(s.clone()),
        GoldAnswer::Date(d) => Answer::Text(d.render()),
    }
}

/// A passage word that shares no token with the gold answer.
fn distractor(rng: &mut ChaCha8Rng, passage: &str, gold: &GoldAnswer) -> String {
    let gold_tokens: Vec<String> = gold.spans().iter().flat_map(|s| normalize(s).0).collect();
    let words: Vec<&str> = passage
        .split_whitespace()
        .filter(|w| {
            let t = normalize(w).0;
            !t.is_empty() && t.iter().all(|x| !gold_tokens.contains(x))
        })
        .collect();
    words.choose(rng).map_or_else(|| "unknown".to_string(), |w| w.to_string())
}

fn wrong_answer(rng: &mut ChaCha8Rng, answer: Answer, passage: &str, gold: &GoldAnswer) -> Answer {
    match answer {
        Answer::Number(v) => Answer::Number(v + rng.random_range(1..=9) as f64),
        Answer::Spans(s) => Answer::Spans(s.iter().map(|_| distractor(rng, passage, gold)).collect()),
        _ => Answer::Text(distractor(rng, passage, gold)),
    }
}

impl Provider for MockProvider {
    fn qa(&self, instance: &QaInstance) -> Result<Vec<PredictionCandidate>, ProviderError> {
        let mut rng = self.rng(&instance.id);
        let gold = &instance.gold_answer;
        let rate = match gold {
            GoldAnswer::Number(_) => self.config.corrupt.number,
            GoldAnswer::Spans(_) => self.config.corrupt.spans,
            GoldAnswer::Date(_) => self.config.corrupt.date,
        };
        let mut answer = gold_as_answer(gold);
        if rng.random::<f64>() < rate {
            answer = match self.config.corruption {
                Corruption::Null => Answer::Null,
                Corruption::Wrong => wrong_answer(&mut rng, answer, &instance.passage, gold),
            };
        }
        Ok(vec![PredictionCandidate::new(
            answer_type_for(gold, &instance.question),
            answer,
            self.config.confidence,
        )])
    }

    fn nli(&self, instance: &NliInstance) -> Result<Option<NliLabel>, ProviderError> {
        let mut rng = self.rng(&instance.id);
        let gold = instance.gold_label;
        if rng.random::<f64>() >= self.config.corrupt.label {
            return Ok(Some(gold));
        }
        Ok(match self.config.corruption {
            Corruption::Null => None,
            Corruption::Wrong => {
                let others: Vec<NliLabel> = [NliLabel::Entailment, NliLabel::Contradiction, NliLabel::Neutral]
                    .into_iter()
                    .filter(|l| *l != gold)
                    .collect();
                others.choose(&mut rng).copied()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_schema_checks() {
        let ok = json!({"schema": CANDIDATE_SCHEMA, "id": "a", "candidates": [{"type": "passage_span", "answer": "x", "confidence": 0.5}]});
        assert_eq!(qa_candidates(wire_candidates(&ok, "a", true).unwrap()).unwrap().len(), 1);
        let bad_schema = json!({"schema": "other/2", "candidates": []});
        assert!(matches!(wire_candidates(&bad_schema, "a", false), Err(ProviderError::SchemaMismatch(_))));
        let no_schema = json!({"id": "a", "candidates": []});
        assert!(wire_candidates(&no_schema, "a", true).is_err());
        assert!(wire_candidates(&no_schema, "a", false).is_ok());
        let wrong_id = json!({"schema": CANDIDATE_SCHEMA, "id": "b"});
        assert!(wire_candidates(&wrong_id, "a", true).is_err());
        let bad_type = vec![WireCandidate { kind: "span".into(), answer: json!("x"), confidence: 1.0 }];
        assert!(qa_candidates(bad_type).is_err());
        let bad_conf = vec![WireCandidate { kind: "passage_span".into(), answer: json!("x"), confidence: 1.5 }];
        assert!(qa_candidates(bad_conf).is_err());
    }

    #[test]
    fn nli_wire_picks_most_confident_label() {
        let wire = vec![
            WireCandidate { kind: "classification".into(), answer: json!("neutral"), confidence: 0.2 },
            WireCandidate { kind: "classification".into(), answer: json!("Entailment"), confidence: 0.7 },
        ];
        assert_eq!(nli_classification(wire).unwrap(), Some(NliLabel::Entailment));
        assert_eq!(nli_classification(Vec::new()).unwrap(), None);
    }

    #[test]
    fn config_invariants() {
        let base = Path::new("/");
        assert!(ProviderConfig::file("/definitely/not/here.jsonl").resolve(base).is_err());
        assert!(ProviderConfig::http("localhost:8080").resolve(base).is_err());
        assert!(ProviderConfig::http("http://localhost:8080").resolve(base).is_ok());
        let mut bad = MockConfig::default();
        bad.corrupt.number = 1.5;
        assert!(ProviderConfig::mock(bad).resolve(base).is_err());
        let parsed: ProviderConfig = serde_json::from_str(r#"{"kind": "http", "location": "http://x"}"#).unwrap();
        assert_eq!((parsed.timeout, parsed.retries), (10_000, 3));
    }

    #[test]
    fn mock_answer_types() {
        let num = |s: &str| GoldAnswer::Number(s.into());
        assert_eq!(answer_type_for(&num("4"), "q"), AnswerType::NumberClass);
        assert_eq!(answer_type_for(&num("29"), "q"), AnswerType::PassageSpan);
        let two = GoldAnswer::Spans(vec!["a".into(), "b".into()]);
        assert_eq!(answer_type_for(&two, "q"), AnswerType::SequenceLabeling);
        let in_q = GoldAnswer::Spans(vec!["Bears".into()]);
        assert_eq!(answer_type_for(&in_q, "Did the bears win?"), AnswerType::QuestionSpan);
    }
}
