//! Batch pipeline around `nsp-core`: tagging corpora, validating and
//! executing annotated programs, fetching neural candidates from a provider,
//! mixture-of-experts selection and evaluation reports.

pub mod commands;
pub mod error;
pub mod output;
pub mod provider;
pub mod run;

pub use commands::{
    cmd_convert_awpnli, cmd_execute, cmd_gate_eval, cmd_gate_train, cmd_report, cmd_tag, cmd_validate,
    ExecuteSummary, GateEvaluation, ProgramSource, ReportOutput, Scored,
};
pub use error::{CliError, Completion, EXIT_FAILURE};
pub use provider::{Corruption, CorruptionRates, MockConfig, Provider, ProviderConfig, ProviderError, ProviderKind};
pub use run::{cmd_run, GateChoice, Mode, RunManifest, RunOptions, RunSummary, Task};
