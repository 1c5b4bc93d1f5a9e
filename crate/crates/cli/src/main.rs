use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tarenv_core::datagen::DetectionFormat;
use tarenv_core::prompts::Protocol;
use tarenv_core::protocol::ActionFormat;

mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "tarenv",
    version,
    about = "Two-round mark-then-answer VQA environment: data generation, evaluation, rewards and an HTTP service"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// JSON config file (defaults < file < environment < flags)
    #[arg(long, global = true, env = "TARENV_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print errors as JSON on stderr
    #[arg(long, global = true)]
    pub json: bool,
    /// Action output format
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<ActionFormat>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Chat-completions base URL, e.g. http://localhost:8000/v1
    #[arg(long, global = true, env = "TARENV_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, global = true, env = "TARENV_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
}

fn parse_format(s: &str) -> Result<ActionFormat, String> {
    s.parse()
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

fn parse_detection_format(s: &str) -> Result<DetectionFormat, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic detection records and their images
    Synth {
        #[arg(long, default_value_t = 60)]
        records: usize,
        /// Output directory (detections.jsonl and images/)
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate multiple-choice VQA samples from detection annotations
    Datagen {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "jsonl", value_parser = parse_detection_format)]
        input_format: DetectionFormat,
        #[arg(long)]
        out: PathBuf,
        /// Generation report (counts per kind, discards); defaults to <out>.report.json
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the samples as benchmark items for `eval`
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Do not require image files to exist
        #[arg(long)]
        no_check_images: bool,
    },
    /// Check samples against their detection records
    Validate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value = "jsonl", value_parser = parse_detection_format)]
        input_format: DetectionFormat,
        #[arg(long, value_enum, default_value_t = ValidationMode::Geometric)]
        mode: ValidationMode,
        /// Verdicts JSONL
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 when any sample is invalid
        #[arg(long)]
        strict: bool,
    },
    /// Assemble two-round training records and annotated images
    SftGen {
        #[arg(long)]
        samples: PathBuf,
        /// Directory image paths in the samples are relative to
        #[arg(long)]
        image_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ThoughtSource::Placeholder)]
        thoughts: ThoughtSource,
        /// Detection records, required for model-written thoughts
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Run one episode against a backend and print the transcript
    Rollout {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        /// Option texts in order; lettered A, B, ...
        #[arg(long = "option", required = true)]
        options: Vec<String>,
        #[arg(long)]
        ground_truth: Option<String>,
        /// JSON array of replies to play back instead of calling the endpoint
        #[arg(long)]
        script: Option<PathBuf>,
        /// Write the annotated image here
        #[arg(long)]
        save_annotated: Option<PathBuf>,
    },
    /// Evaluate a benchmark and produce a run report
    Eval {
        /// Benchmark JSONL (one item per line)
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Directory with replacement round-1 annotations, matched by file name
        #[arg(long)]
        override_dir: Option<PathBuf>,
        #[arg(long, default_value = "tar", value_parser = parse_protocol)]
        protocol: Protocol,
        #[arg(long, value_enum, default_value_t = BackendKind::Remote)]
        backend: BackendKind,
        /// Per-item scripts for `--backend scripted`: {"item id": ["turn 1", "turn 2"]}
        #[arg(long)]
        script: Option<PathBuf>,
        /// Report JSON
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-item CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare two run reports
    Compare { a: PathBuf, b: PathBuf },
    /// Score a trajectory file
    Reward {
        /// JSON file: a scoring request, a transcript, or an array of assistant texts
        trajectory: PathBuf,
        #[arg(long)]
        ground_truth: Option<String>,
    },
    /// Start the HTTP environment service
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        ttl_s: Option<u64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ValidationMode {
    Geometric,
    Llm,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ThoughtSource {
    Placeholder,
    Llm,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BackendKind {
    Remote,
    Oracle,
    Scripted,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let json = cli.global.json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report(json);
            ExitCode::from(f.code)
        }
    }
}

impl Failure {
    fn report(&self, json: bool) {
        if json {
            let v = serde_json::json!({"error": {"kind": self.kind, "message": format!("{:#}", self.error), "exit_code": self.code}});
            eprintln!("{v}");
        } else {
            eprintln!("error: {:#}", self.error);
        }
    }
}
