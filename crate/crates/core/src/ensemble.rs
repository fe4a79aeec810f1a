//! Mixture-of-experts selection over neural and symbolic predictions.
//!
//! The gate is a single affine layer followed by a componentwise logistic, so
//! each answer type gets an independent probability. It is trained on pairs
//! of (input features, per-type target probabilities) by minimising
//!
//! ```text
//! L = - sum_i (1/n) sum_k [ q_ik log p_ik + (1 - q_ik) log(1 - p_ik) ]
//! ```
//!
//! with full-batch gradient descent.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::NliLabel;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("no valid candidate to select")]
    NoValidCandidate,
    #[error("invalid feature value {value} at position {index}: must lie in [0, 1]")]
    FeatureRange { index: usize, value: f64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// The five QA answer types, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    PassageSpan,
    QuestionSpan,
    SequenceLabeling,
    NumberClass,
    ProgramExec,
}

impl AnswerType {
    pub const ALL: [AnswerType; 5] = [
        AnswerType::PassageSpan,
        AnswerType::QuestionSpan,
        AnswerType::SequenceLabeling,
        AnswerType::NumberClass,
        AnswerType::ProgramExec,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::PassageSpan => "passage_span",
            AnswerType::QuestionSpan => "question_span",
            AnswerType::SequenceLabeling => "sequence_labeling",
            AnswerType::NumberClass => "number_class",
            AnswerType::ProgramExec => "program_exec",
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnswerType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown answer type {s:?}"))
    }
}

/// A candidate answer. `Null` is never selectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Number(f64),
    Text(String),
    Spans(Vec<String>),
    Null,
}

impl Answer {
    pub fn is_null(&self) -> bool {
        matches!(self, Answer::Null)
    }

    /// Spans to score against gold.
    pub fn to_spans(&self) -> Vec<String> {
        match self {
            Answer::Number(v) => vec![crate::executor::render_number(*v)],
            Answer::Text(s) => vec![s.clone()],
            Answer::Spans(v) => v.clone(),
            Answer::Null => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCandidate {
    #[serde(rename = "type")]
    pub answer_type: AnswerType,
    pub answer: Answer,
    #[serde(rename = "confidence")]
    pub source_confidence: f64,
}

impl PredictionCandidate {
    pub fn new(answer_type: AnswerType, answer: Answer, source_confidence: f64) -> Self {
        PredictionCandidate {
            answer_type,
            answer,
            source_confidence: source_confidence.clamp(0.0, 1.0),
        }
    }

    pub fn null(answer_type: AnswerType) -> Self {
        Self::new(answer_type, Answer::Null, 0.0)
    }

    pub fn is_valid(&self) -> bool {
        !self.answer.is_null()
    }
}

/// Per-type probabilities, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateFeatures(pub Vec<f64>);

impl GateFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self, EnsembleError> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(EnsembleError::FeatureRange { index, value });
            }
        }
        Ok(GateFeatures(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 500,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<(), EnsembleError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EnsembleError::BadConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(EnsembleError::BadConfig("epochs must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(EnsembleError::BadConfig("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine map plus logistic: `p = sigma(W q + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

impl GateModel {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        GateModel {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
            config: None,
            final_loss: None,
        }
    }

    /// `p_k = sigma(q_k)`: selection follows the experts' own probabilities.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for k in 0..n {
            m.weights[k * n + k] = 1.0;
        }
        m
    }

    fn check_shape(&self) -> Result<(), EnsembleError> {
        if self.weights.len() != self.n_in * self.n_out {
            return Err(EnsembleError::DimensionMismatch {
                expected: self.n_in * self.n_out,
                got: self.weights.len(),
            });
        }
        if self.bias.len() != self.n_out {
            return Err(EnsembleError::DimensionMismatch {
                expected: self.n_out,
                got: self.bias.len(),
            });
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|k| {
                let row = &self.weights[k * self.n_in..(k + 1) * self.n_in];
                self.bias[k] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn score(&self, features: &GateFeatures) -> Result<Vec<f64>, EnsembleError> {
        self.check_shape()?;
        if features.len() != self.n_in {
            return Err(EnsembleError::DimensionMismatch {
                expected: self.n_in,
                got: features.len(),
            });
        }
        Ok(self.logits(&features.0).into_iter().map(logistic).collect())
    }

    /// Largest absolute row sum of the weight matrix.
    pub fn weight_inf_norm(&self) -> f64 {
        (0..self.n_out)
            .map(|k| {
                self.weights[k * self.n_in..(k + 1) * self.n_in]
                    .iter()
                    .map(|w| w.abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

pub fn gate_score(model: &GateModel, features: &GateFeatures) -> Result<Vec<f64>, EnsembleError> {
    model.score(features)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// One training pair: gate input and per-type target probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateExample {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
}

/// Binary cross-entropy term for one type, written in logits:
/// `-(q log sigma(z) + (1-q) log(1 - sigma(z))) = softplus(z) - q z`.
fn bce_logit(z: f64, q: f64) -> f64 {
    softplus(z) - q * z
}

/// The training objective summed over examples (without the L2 term).
pub fn objective(model: &GateModel, data: &[GateExample]) -> f64 {
    let n = model.n_out as f64;
    data.iter()
        .map(|ex| {
            model
                .logits(&ex.features)
                .iter()
                .zip(&ex.target)
                .map(|(&z, &q)| bce_logit(z, q))
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Loss in probability space, for checking against the printed formula.
pub fn objective_from_probs(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(q)
        .map(|(&p, &q)| q * p.ln() + (1.0 - q) * (1.0 - p).ln())
        .sum::<f64>()
        / n
}

/// Gradient of [`objective`] with respect to weights (row-major) and bias.
pub fn objective_gradient(model: &GateModel, data: &[GateExample]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n_out as f64;
    let mut gw = vec![0.0; model.weights.len()];
    let mut gb = vec![0.0; model.n_out];
    for ex in data {
        for (k, z) in model.logits(&ex.features).into_iter().enumerate() {
            let delta = (logistic(z) - ex.target[k]) / n;
            gb[k] += delta;
            let row = &mut gw[k * model.n_in..(k + 1) * model.n_in];
            for (g, x) in row.iter_mut().zip(&ex.features) {
                *g += delta * x;
            }
        }
    }
    (gw, gb)
}

fn check_examples(data: &[GateExample]) -> Result<(usize, usize), EnsembleError> {
    let first = data.first().ok_or(EnsembleError::EmptyDataset)?;
    let (n_in, n_out) = (first.features.len(), first.target.len());
    for ex in data {
        if ex.features.len() != n_in {
            return Err(EnsembleError::DimensionMismatch {
                expected: n_in,
                got: ex.features.len(),
            });
        }
        if ex.target.len() != n_out {
            return Err(EnsembleError::DimensionMismatch {
                expected: n_out,
                got: ex.target.len(),
            });
        }
        for (index, &value) in ex.target.iter().chain(&ex.features).enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(EnsembleError::FeatureRange { index, value });
            }
        }
    }
    Ok((n_in, n_out))
}

/// Per-epoch mean loss recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

/// Trains a gate. Steps follow the gradient of the mean per-example loss so
/// the learning rate does not depend on the dataset size; the reported
/// `final_loss` is that mean (plus the L2 penalty).
pub fn gate_train(data: &[GateExample], config: &TrainConfig) -> Result<GateModel, EnsembleError> {
    gate_train_traced(data, config).map(|(m, _)| m)
}

pub fn gate_train_traced(
    data: &[GateExample],
    config: &TrainConfig,
) -> Result<(GateModel, TrainTrace), EnsembleError> {
    config.check()?;
    let (n_in, n_out) = check_examples(data)?;
    let mut model = GateModel::zeros(n_in, n_out);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for w in &mut model.weights {
        *w = rng.random_range(-0.01..0.01);
    }

    let m = data.len() as f64;
    let penalty = |model: &GateModel| 0.5 * config.l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let loss = objective(&model, data) / m + penalty(&model);
        if !loss.is_finite() {
            return Err(EnsembleError::NonFiniteLoss { epoch });
        }
        losses.push(loss);
        let (gw, gb) = objective_gradient(&model, data);
        for (w, g) in model.weights.iter_mut().zip(gw) {
            *w -= config.learning_rate * (g / m + config.l2 * *w);
        }
        for (b, g) in model.bias.iter_mut().zip(gb) {
            *b -= config.learning_rate * g / m;
        }
        if model.weights.iter().chain(&model.bias).any(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFiniteLoss { epoch });
        }
    }
    let final_loss = objective(&model, data) / m + penalty(&model);
    if !final_loss.is_finite() {
        return Err(EnsembleError::NonFiniteLoss {
            epoch: config.epochs,
        });
    }
    losses.push(final_loss);
    model.config = Some(config.clone());
    model.final_loss = Some(final_loss);
    Ok((model, TrainTrace { losses }))
}

/// Multi-hot correctness targets: `q_k = 1` iff head `k` was right.
pub fn correctness_targets(correct: &[bool]) -> Vec<f64> {
    correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
}

/// Picks the valid candidate with the highest gate probability. Ties go to
/// the earlier answer type.
pub fn select<'a>(
    candidates: &'a [PredictionCandidate],
    p: &[f64],
) -> Result<&'a PredictionCandidate, EnsembleError> {
    if candidates.len() != p.len() {
        return Err(EnsembleError::DimensionMismatch {
            expected: candidates.len(),
            got: p.len(),
        });
    }
    let mut best: Option<(&PredictionCandidate, f64)> = None;
    for (c, &pk) in candidates.iter().zip(p) {
        if !c.is_valid() {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, bp)) => pk > bp || (pk == bp && c.answer_type < b.answer_type),
        };
        if better {
            best = Some((c, pk));
        }
    }
    best.map(|(c, _)| c).ok_or(EnsembleError::NoValidCandidate)
}

/// Lays out candidates in answer-type order, filling missing types with
/// `Null`. Later duplicates of a type win.
pub fn slot_candidates(candidates: impl IntoIterator<Item = PredictionCandidate>) -> Vec<PredictionCandidate> {
    let mut slots: Vec<PredictionCandidate> =
        AnswerType::ALL.into_iter().map(PredictionCandidate::null).collect();
    for c in candidates {
        let i = c.answer_type.index();
        slots[i] = c;
    }
    slots
}

// ---------------------------------------------------------------------------
// NLI

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliAnswerType {
    Classification,
    ProgramExec,
}

/// Picks the answer type with the higher development accuracy;
/// classification wins ties and is the default when a type is missing.
pub fn nli_select(dev_accuracy_by_type: &BTreeMap<NliAnswerType, f64>) -> NliAnswerType {
    let cls = dev_accuracy_by_type
        .get(&NliAnswerType::Classification)
        .copied()
        .unwrap_or(f64::NEG_INFINITY);
    let prog = dev_accuracy_by_type
        .get(&NliAnswerType::ProgramExec)
        .copied()
        .unwrap_or(f64::NEG_INFINITY);
    if prog > cls {
        NliAnswerType::ProgramExec
    } else {
        NliAnswerType::Classification
    }
}

/// Final label for one instance given the chosen type. An `Invalid` program
/// result falls back to the classifier.
pub fn nli_final_label(chosen: NliAnswerType, classification: NliLabel, program: NliLabel) -> NliLabel {
    match chosen {
        NliAnswerType::ProgramExec if program != NliLabel::Invalid => program,
        _ => classification,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(answers: [Answer; 5]) -> Vec<PredictionCandidate> {
        AnswerType::ALL
            .into_iter()
            .zip(answers)
            .map(|(t, a)| PredictionCandidate::new(t, a, 0.5))
            .collect()
    }

    #[test]
    fn zero_model_gives_half() {
        let m = GateModel::zeros(5, 5);
        let p = m.score(&GateFeatures::new(vec![0.3, 0.9, 0.0, 1.0, 0.2]).unwrap()).unwrap();
        assert_eq!(p, vec![0.5; 5]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = GateModel::zeros(5, 5);
        assert_eq!(
            m.score(&GateFeatures(vec![0.1; 4])),
            Err(EnsembleError::DimensionMismatch { expected: 5, got: 4 })
        );
    }

    #[test]
    fn features_range_checked() {
        assert!(GateFeatures::new(vec![0.0, 1.0]).is_ok());
        assert!(GateFeatures::new(vec![1.5]).is_err());
        assert!(GateFeatures::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn logit_loss_matches_probability_form() {
        let m = GateModel {
            weights: vec![0.3, -0.2, 0.5, 0.1],
            bias: vec![0.1, -0.4],
            ..GateModel::zeros(2, 2)
        };
        let ex = GateExample {
            features: vec![0.2, 0.7],
            target: vec![0.9, 0.25],
        };
        let p = m.score(&GateFeatures(ex.features.clone())).unwrap();
        let a = objective(&m, std::slice::from_ref(&ex));
        let b = objective_from_probs(&p, &ex.target);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_at_target_is_entropy() {
        let q = [0.2, 0.7, 0.5, 0.9, 0.4];
        let entropy = -q.iter().map(|q| q * f64::ln(*q) + (1.0 - q) * f64::ln(1.0 - q)).sum::<f64>() / 5.0;
        assert!((objective_from_probs(&q, &q) - entropy).abs() < 1e-15);
        // Moving p away from q increases the loss.
        let p = [0.25, 0.7, 0.5, 0.9, 0.4];
        assert!(objective_from_probs(&p, &q) > entropy);
    }

    #[test]
    fn near_one_hot_loss_is_small() {
        let eps: f64 = 1e-4;
        let q = [1.0, 0.0, 0.0, 0.0, 0.0];
        let p = [1.0 - eps, eps, eps, eps, eps];
        let loss = objective_from_probs(&p, &q);
        // Each term contributes -ln(1-eps) ~ eps.
        assert!((loss - eps).abs() < 1e-7, "{loss}");
    }

    #[test]
    fn training_errors() {
        assert_eq!(gate_train(&[], &TrainConfig::default()), Err(EnsembleError::EmptyDataset));
        let data = vec![GateExample {
            features: vec![1.0; 3],
            target: vec![1.0, 0.0, 0.0],
        }];
        let bad = TrainConfig {
            learning_rate: 1e308,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(gate_train(&data, &bad), Err(EnsembleError::NonFiniteLoss { .. })));
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(gate_train(&data, &zero_epochs), Err(EnsembleError::BadConfig(_))));
    }

    #[test]
    fn null_program_is_skipped() {
        let c = cands([
            Answer::Text("Kris Brown".into()),
            Answer::Null,
            Answer::Null,
            Answer::Null,
            Answer::Null,
        ]);
        let p = [0.4, 0.1, 0.1, 0.1, 0.99];
        assert_eq!(select(&c, &p).unwrap().answer_type, AnswerType::PassageSpan);
    }

    #[test]
    fn dominant_program_selected() {
        let c = cands([
            Answer::Text("53".into()),
            Answer::Text("24".into()),
            Answer::Spans(vec!["53".into()]),
            Answer::Number(9.0),
            Answer::Number(29.0),
        ]);
        let p = [0.3, 0.1, 0.2, 0.1, 0.9];
        let s = select(&c, &p).unwrap();
        assert_eq!(s.answer_type, AnswerType::ProgramExec);
        assert_eq!(s.answer, Answer::Number(29.0));
    }

    #[test]
    fn ties_go_to_type_order() {
        let c = cands([
            Answer::Null,
            Answer::Text("b".into()),
            Answer::Text("c".into()),
            Answer::Number(1.0),
            Answer::Number(2.0),
        ]);
        assert_eq!(select(&c, &[0.7; 5]).unwrap().answer_type, AnswerType::QuestionSpan);
        let all: Vec<_> = AnswerType::ALL
            .into_iter()
            .map(|t| PredictionCandidate::new(t, Answer::Number(1.0), 0.5))
            .collect();
        assert_eq!(select(&all, &[0.5; 5]).unwrap().answer_type, AnswerType::PassageSpan);
    }

    #[test]
    fn nothing_valid() {
        let c = slot_candidates([]);
        assert_eq!(select(&c, &[0.5; 5]), Err(EnsembleError::NoValidCandidate));
        assert!(select(&c, &[0.5; 4]).is_err());
    }

    #[test]
    fn slotting_orders_by_type() {
        let c = slot_candidates([
            PredictionCandidate::new(AnswerType::ProgramExec, Answer::Number(1.0), 1.0),
            PredictionCandidate::new(AnswerType::PassageSpan, Answer::Text("x".into()), 0.3),
        ]);
        assert_eq!(c.len(), 5);
        assert_eq!(c[0].answer_type, AnswerType::PassageSpan);
        assert!(c[0].is_valid());
        assert!(!c[1].is_valid());
        assert_eq!(c[4].answer, Answer::Number(1.0));
    }

    #[test]
    fn nli_selection() {
        let acc = BTreeMap::from([
            (NliAnswerType::Classification, 0.4985),
            (NliAnswerType::ProgramExec, 0.8805),
        ]);
        assert_eq!(nli_select(&acc), NliAnswerType::ProgramExec);
        let tie = BTreeMap::from([
            (NliAnswerType::Classification, 0.7),
            (NliAnswerType::ProgramExec, 0.7),
        ]);
        assert_eq!(nli_select(&tie), NliAnswerType::Classification);
        assert_eq!(
            nli_final_label(NliAnswerType::ProgramExec, NliLabel::Neutral, NliLabel::Invalid),
            NliLabel::Neutral
        );
        assert_eq!(
            nli_final_label(NliAnswerType::ProgramExec, NliLabel::Neutral, NliLabel::Entailment),
            NliLabel::Entailment
        );
        assert_eq!(
            nli_final_label(NliAnswerType::Classification, NliLabel::Neutral, NliLabel::Entailment),
            NliLabel::Neutral
        );
    }

    #[test]
    fn candidate_json_shape() {
        let c: PredictionCandidate =
            serde_json::from_str(r#"{"type":"program_exec","answer":29,"confidence":0.9}"#).unwrap();
        assert_eq!(c.answer, Answer::Number(29.0));
        let c: PredictionCandidate =
            serde_json::from_str(r#"{"type":"sequence_labeling","answer":["a","b"],"confidence":0.2}"#).unwrap();
        assert_eq!(c.answer, Answer::Spans(vec!["a".into(), "b".into()]));
        let c: PredictionCandidate =
            serde_json::from_str(r#"{"type":"passage_span","answer":null,"confidence":0}"#).unwrap();
        assert!(c.answer.is_null());
    }
}
