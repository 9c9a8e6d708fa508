//! `clipkd`: generate synthetic data, pretrain a teacher, distill students,
//! evaluate, verify gradients, analyse and sweep from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure (divergence, I/O, corrupt
//! files), 2 on configuration or usage errors, 3 when a gradient check fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clipkd::data::Split;

#[derive(Parser, Debug)]
#[command(name = "clipkd", version, about = "CLIP knowledge-distillation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted `KEY=VALUE` override, e.g. `--set kd.fd=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Options for commands that train and may be interrupted and resumed.
#[derive(Args, Debug, Clone, Default)]
pub struct Resume {
    /// Continue from this checkpoint, which must hold optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many optimizer steps are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    #[default]
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the data spec and print the split sizes.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the teacher on the plain CLIP loss.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        resume: Resume,
    },
    /// Train a student against a frozen teacher with the configured KD terms.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        resume: Resume,
    },
    /// Retrieval recall and zero-shot accuracy of one checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate a teacher checkpoint.
        #[arg(long, conflicts_with = "student", required_unless_present = "student")]
        teacher: Option<PathBuf>,
        /// Evaluate a student checkpoint.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
    },
    /// Retrieval recall of previously exported embedding dumps.
    EvalDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
    /// Compare analytic and backpropagated gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Maximum relative error allowed for the closed-form CLIP gradient.
        #[arg(long, default_value_t = commands::CLIP_TOLERANCE)]
        clip_tolerance: f64,
        /// Maximum relative error allowed for end-to-end backpropagation.
        #[arg(long, default_value_t = commands::BACKPROP_TOLERANCE)]
        backprop_tolerance: f64,
    },
    /// Cosine, CKA and pos-neg similarity of a student to its teacher.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
    },
    /// Distill one student per value of the configured sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Points trained concurrently, capped by `CLIPKD_THREADS`.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export normalised image and text embeddings of a split.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "student", required_unless_present = "student")]
        teacher: Option<PathBuf>,
        /// Student checkpoint; `--teacher` must not be given.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        split: SplitArg,
    },
}

/// Exit status for an error chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<clipkd::Error>() {
            return match e {
                clipkd::Error::Config { .. } | clipkd::Error::TensorShape { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainTeacher { common, resume } => commands::train_teacher(&common, &resume),
        Command::Distill { common, teacher, resume } => commands::distill(&common, &teacher, &resume),
        Command::Eval {
            common,
            teacher,
            student,
            split,
        } => commands::eval(&common, teacher.as_deref(), student.as_deref(), split.into()),
        Command::EvalDump { common, image, text } => commands::eval_dump(&common, &image, &text),
        Command::GradCheck {
            common,
            clip_tolerance,
            backprop_tolerance,
        } => commands::grad_check(&common, clip_tolerance, backprop_tolerance),
        Command::Analyze {
            common,
            teacher,
            student,
            split,
        } => commands::analyze(&common, &teacher, &student, split.into()),
        Command::Sweep { common, teacher, jobs } => commands::sweep(&common, &teacher, jobs),
        Command::Dump {
            common,
            teacher,
            student,
            split,
        } => commands::dump(&common, teacher.as_deref(), student.as_deref(), split.into()),
    };
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::GradCheckFailed) => ExitCode::from(3),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
