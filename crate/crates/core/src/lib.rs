//! Symbolic side of a neural-symbolic numerical reasoning system.
//!
//! * [`tagger`] marks numbers in text with `@N1`-style tokens.
//! * [`program`] parses, formats and validates the arithmetic/date DSL.
//! * [`executor`] runs programs with NULL semantics and decides NLI labels.
//! * [`ensemble`] trains and applies the mixture-of-experts gate.
//! * [`datasets`] loads DROP / AWPNLI data, annotation sidecars and folds.
//! * [`metrics`] implements DROP-style EM/F1 and NLI accuracy summaries.

pub mod datasets;
pub mod ensemble;
pub mod executor;
pub mod metrics;
pub mod program;
pub mod tagger;

pub use datasets::{AnswerKind, FoldPlan, GoldAnswer, NliInstance, QaInstance};
pub use ensemble::{Answer, AnswerType, GateFeatures, GateModel, PredictionCandidate, TrainConfig};
pub use executor::{evaluate, nli_decide, Executor, NliLabel, NliProgramPair, NullReason, Value};
pub use program::{parse, FunctionId, Program, ValidationReport};
pub use tagger::{tag, Environment, NumberLexicon, Role, TaggedText, Tagger};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
