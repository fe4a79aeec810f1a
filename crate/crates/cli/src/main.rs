use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nsp_cli::{
    cmd_convert_awpnli, cmd_execute, cmd_gate_eval, cmd_gate_train, cmd_report, cmd_run, cmd_tag, cmd_validate,
    CliError, Completion, GateChoice, Mode, ProgramSource, RunManifest, RunOptions, Task, EXIT_FAILURE,
};
use nsp_core::ensemble::TrainConfig;
use nsp_core::tagger::Role;

#[derive(Parser)]
#[command(name = "nsp", version, about = "Neural-symbolic numerical reasoning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attach @N/@Q/@M tokens to the numbers in a corpus
    Tag {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Number-word lexicon (JSON); the built-in English one by default
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// First token index; 0 for questions and 1 otherwise by default
        #[arg(long)]
        index_base: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute annotated programs and report the NULL rate
    Execute {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Statically check annotated programs
    Validate {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from a manifest
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = GateArg::Model)]
        gate: GateArg,
        /// Use only the executed program
        #[arg(long, conflicts_with = "only_neural")]
        only_program: bool,
        /// Use only the neural candidates
        #[arg(long)]
        only_neural: bool,
        /// Override the manifest's worker count
        #[arg(long)]
        workers: Option<usize>,
        /// Override the manifest's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the gating network on {"features", "target"} records
    GateTrain {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        l2: f64,
    },
    /// Selection accuracy and loss of a gate model
    GateEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        examples: PathBuf,
    },
    /// Score a prediction file
    Report {
        #[arg(long, value_enum, default_value_t = TaskArg::Qa)]
        task: TaskArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Annotations, for the breakdown by program type
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, default_value = "Model")]
        method: String,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize raw AWPNLI JSON Lines
    ConvertAwpnli {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Qa)]
    task: TaskArg,
    #[arg(long, requires = "annotations", conflicts_with = "records")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    annotations: Option<PathBuf>,
    /// Records with explicit environments instead of a dataset
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl SourceArgs {
    fn source(&self) -> Result<ProgramSource, CliError> {
        match (&self.records, &self.dataset, &self.annotations) {
            (Some(r), _, _) => Ok(ProgramSource::Records(r.clone())),
            (None, Some(d), Some(a)) => Ok(match self.task {
                TaskArg::Qa => ProgramSource::Qa {
                    dataset: d.clone(),
                    annotations: a.clone(),
                },
                TaskArg::Nli => ProgramSource::Nli {
                    dataset: d.clone(),
                    annotations: a.clone(),
                },
            }),
            _ => Err(CliError::Config("give --records, or --dataset with --annotations".into())),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Passage,
    Question,
    Premise,
    Hypothesis,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Passage => Role::Passage,
            RoleArg::Question => Role::Question,
            RoleArg::Premise => Role::Premise,
            RoleArg::Hypothesis => Role::Hypothesis,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Qa,
    Nli,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Qa => Task::Qa,
            TaskArg::Nli => Task::Nli,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Model,
    Uniform,
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("summaries serialize"));
}

fn execute(command: Command) -> Result<Completion, CliError> {
    match command {
        Command::Tag {
            input,
            role,
            lexicon,
            index_base,
            out,
        } => cmd_tag(&input, role.into(), lexicon.as_deref(), index_base, &out),
        Command::Execute { source, out } => {
            let summary = cmd_execute(&source.source()?, source.lexicon.as_deref(), &out)?;
            print_json(&summary);
            Ok(Completion::OK)
        }
        Command::Validate { source, out } => cmd_validate(&source.source()?, source.lexicon.as_deref(), &out),
        Command::Run {
            manifest,
            gate,
            only_program,
            only_neural,
            workers,
            seed,
        } => {
            let mut m = RunManifest::load(&manifest)?;
            if workers.is_some() {
                m.workers = workers;
            }
            if let Some(s) = seed {
                m.seed = s;
            }
            let options = RunOptions {
                gate: match gate {
                    GateArg::Model => GateChoice::Model,
                    GateArg::Uniform => GateChoice::Uniform,
                },
                mode: if only_program {
                    Mode::OnlyProgram
                } else if only_neural {
                    Mode::OnlyNeural
                } else {
                    Mode::Combined
                },
            };
            let summary = cmd_run(&m, options)?;
            print_json(&summary.report);
            Ok(summary.completion)
        }
        Command::GateTrain {
            examples,
            out,
            lr,
            epochs,
            seed,
            l2,
        } => {
            let config = TrainConfig {
                learning_rate: lr,
                epochs,
                seed,
                l2,
            };
            let model = cmd_gate_train(&examples, &config, &out)?;
            print_json(&serde_json::json!({ "final_loss": model.final_loss, "out": out }));
            Ok(Completion::OK)
        }
        Command::GateEval { model, examples } => {
            print_json(&cmd_gate_eval(&model, &examples)?);
            Ok(Completion::OK)
        }
        Command::Report {
            task,
            dataset,
            predictions,
            annotations,
            method,
            out,
        } => {
            let report = cmd_report(task.into(), &dataset, annotations.as_deref(), &predictions, &method)?;
            print!("{}", report.table);
            if let Some(path) = out {
                nsp_cli::output::write_json(&path, &report.scored)?;
            }
            if report.missing > 0 {
                log::warn!("{} instances have no prediction", report.missing);
            }
            Ok(Completion {
                instance_errors: report.missing,
            })
        }
        Command::ConvertAwpnli { input, out } => cmd_convert_awpnli(&input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NSP_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(done) => ExitCode::from(done.exit_code() as u8),
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(EXIT_FAILURE as u8)
        }
    }
}
