use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use snaptriage::analysis::{analyze_case, AnalyzeOptions, CaseAnalysis};
use snaptriage::backend::{Backend, BackendConfig, BackendError, LiveConfig, DEFAULT_ENDPOINT};
use snaptriage::dataset::{
    generate_synthetic_dataset, load_manifest, load_manifest_with, DatasetError, LoadOptions, SnapshotCase,
    SyntheticConfig, SYNTHESIZABLE,
};
use snaptriage::evaluation::{
    evaluate_dataset, render_report, EvalError, EvalMode, EvaluateOptions, EvaluationReport, RenderOptions,
    ReportFormat,
};
use snaptriage::imaging::{self, DiffMode, DiffOptions};
use snaptriage::prompting::{self, PromptConfig};
use snaptriage::taxonomy::{parse_category, CategorySet};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_GATE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, Failure>;

fn usage(message: impl ToString) -> Failure {
    Failure::Usage(message.to_string())
}

fn runtime(message: impl ToString) -> Failure {
    Failure::Runtime(message.to_string())
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Image { .. } | DatasetError::BrokenImagePath { .. } => runtime(e),
            _ => usage(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(inner) => inner.into(),
            EvalError::IfgtDesignationMissing { .. } => usage(e),
            _ => runtime(e),
        }
    }
}

#[derive(Parser)]
#[command(name = "snaptriage", version, about = "Triage snapshot test failures with vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one reference/failure pair.
    Analyze(AnalyzeArgs),
    /// Evaluate a labeled dataset and write reports.
    Evaluate(EvaluateArgs),
    /// Render a diff image and print the pixel difference score.
    Diff(DiffArgs),
    /// Generate a synthetic labeled dataset.
    Generate(GenerateArgs),
    /// Check a dataset manifest.
    Validate(ValidateArgs),
    /// Run a dataset through a backend and store the responses as replay fixtures.
    Record(RecordArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Live,
    Replay,
    Heuristic,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecordSource {
    Live,
    Heuristic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Default,
    Ifa,
    Ifgt,
}

impl From<ModeChoice> for EvalMode {
    fn from(m: ModeChoice) -> Self {
        match m {
            ModeChoice::Default => EvalMode::Default,
            ModeChoice::Ifa => EvalMode::Ifa,
            ModeChoice::Ifgt => EvalMode::Ifgt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DiffModeChoice {
    Absolute,
    Highlight,
}

#[derive(Args)]
struct ModelArgs {
    /// Chat endpoint of an Ollama-compatible server.
    #[arg(long, env = "SNAPTRIAGE_ENDPOINT", default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    #[arg(long, env = "SNAPTRIAGE_MODEL", default_value = "gemma3:4b")]
    model: String,
    #[arg(long, default_value_t = prompting::DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Extra HTTP attempts after transport errors, timeouts, or 5xx replies.
    #[arg(long, default_value_t = prompting::DEFAULT_MAX_RETRIES)]
    max_retries: u32,
    /// Backend calls allowed per case when responses fail to parse.
    #[arg(long, default_value_t = 1 + prompting::DEFAULT_MAX_RETRIES)]
    max_attempts: u32,
    #[arg(long, env = "SNAPTRIAGE_TOKEN", hide_env_values = true)]
    bearer_token: Option<String>,
    /// Concurrent requests allowed against the endpoint.
    #[arg(long, default_value_t = 2)]
    max_in_flight: usize,
    /// Prompt template replacing the built-in one.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Text appended to the core prompt.
    #[arg(long)]
    extra_instructions: Option<String>,
}

impl ModelArgs {
    fn live_config(&self) -> CliResult<BackendConfig> {
        if !(self.temperature >= 0.0) {
            return Err(usage("--temperature must be non-negative"));
        }
        let config = BackendConfig::Live(LiveConfig {
            endpoint_url: self.endpoint.clone(),
            model_name: self.model.clone(),
            timeout: Duration::from_secs(self.timeout),
            max_retries: self.max_retries,
            bearer_token: self.bearer_token.clone(),
            max_in_flight: self.max_in_flight,
            retry_backoff: Duration::from_millis(500),
        });
        config.validate().map_err(usage)?;
        Ok(config)
    }

    fn prompt(&self) -> CliResult<(String, String)> {
        let mut config = match &self.prompt_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read prompt file {}: {e}", path.display())))?;
                let version = format!("file:{}", &prompting::prompt_hash(&text)[..12]);
                PromptConfig::with_template(text, version)
            }
            None => PromptConfig::default(),
        };
        config.extra_instructions = self.extra_instructions.clone();
        Ok((prompting::render_core_prompt(&config), config.version))
    }

    fn analyze_options(&self) -> AnalyzeOptions {
        AnalyzeOptions {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_attempts: self.max_attempts.max(1),
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "live")]
    backend: BackendChoice,
    /// Fixture directory for the replay backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

impl BackendArgs {
    fn build(&self) -> CliResult<Backend> {
        let config = match self.backend {
            BackendChoice::Live => self.model.live_config()?,
            BackendChoice::Heuristic => BackendConfig::Heuristic,
            BackendChoice::Replay => BackendConfig::Replay {
                fixture_dir: self
                    .fixtures
                    .clone()
                    .ok_or_else(|| usage("--backend replay requires --fixtures <dir>"))?,
            },
        };
        Backend::new(config).map_err(backend_failure)
    }
}

fn backend_failure(e: BackendError) -> Failure {
    match e {
        BackendError::InvalidConfig(_) => usage(e),
        _ => runtime(e),
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    failure: PathBuf,
    /// Diff image; rendered from the pair when absent.
    #[arg(long)]
    diff: Option<PathBuf>,
    /// Aspect of the differences the model should disregard.
    #[arg(long)]
    ignore: Option<String>,
    /// Identifier used in messages and fixture keys. Defaults to the failure
    /// file name without extension.
    #[arg(long)]
    case_id: Option<String>,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated categories that make the command exit with code 2.
    #[arg(long, value_delimiter = ',')]
    fail_on: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    mode: ModeChoice,
    /// In ifgt mode, use the first ground-truth label for cases without `ignore`.
    #[arg(long)]
    ignore_default_first: bool,
    #[arg(long, default_value_t = 2)]
    concurrency: usize,
    /// JSON report path. The report goes to stdout when no report path is set.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    report_md: Option<PathBuf>,
    #[arg(long)]
    report_junit: Option<PathBuf>,
    /// Comma-separated categories JUnit cases may report without failing.
    /// Defaults to each case's ground truth.
    #[arg(long, value_delimiter = ',')]
    allow: Vec<String>,
    /// Comma-separated categories that make the command exit with code 2 when
    /// predicted for any case.
    #[arg(long, value_delimiter = ',')]
    fail_on: Vec<String>,
    /// Report timestamp. Defaults to the current UTC time.
    #[arg(long, env = "SNAPTRIAGE_TIMESTAMP")]
    timestamp: Option<String>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    failure: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "absolute")]
    mode: DiffModeChoice,
    /// Highlight threshold on the largest channel difference.
    #[arg(long, default_value_t = imaging::DEFAULT_HIGHLIGHT_THRESHOLD)]
    threshold: u8,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    count: usize,
    /// Comma-separated categories. Defaults to every synthesizable category.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of cases that receive a second label.
    #[arg(long, default_value_t = 0.0)]
    multi_label_fraction: f64,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Skip decoding the referenced images.
    #[arg(long)]
    skip_images: bool,
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory that receives the fixtures.
    #[arg(long)]
    fixtures: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    mode: ModeChoice,
    #[arg(long)]
    ignore_default_first: bool,
    #[arg(long, value_enum, default_value = "live")]
    source: RecordSource,
    #[arg(long, default_value_t = 2)]
    concurrency: usize,
    #[command(flatten)]
    model: ModelArgs,
}

fn parse_categories(raw: &[String]) -> CliResult<CategorySet> {
    raw.iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_category(s.trim()).map_err(usage))
        .collect()
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
            }
            std::fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| runtime(format!("cannot write to stdout: {e}")))
        }
    }
}

fn run_analyze(args: AnalyzeArgs) -> CliResult<u8> {
    let gate = parse_categories(&args.fail_on)?;
    let backend = args.backend.build()?;
    let (core_prompt, _) = args.backend.model.prompt()?;
    let case_id = args.case_id.clone().unwrap_or_else(|| {
        args.failure
            .file_stem()
            .map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let case = SnapshotCase {
        id: case_id,
        reference_path: args.reference.clone(),
        failure_path: args.failure.clone(),
        diff_path: args.diff.clone(),
        ground_truth: CategorySet::new(),
        ignore_designation: None,
        metadata: BTreeMap::new(),
    };
    let analysis = analyze_case(
        &case,
        &core_prompt,
        &backend,
        args.ignore.as_deref(),
        &args.backend.model.analyze_options(),
    );
    let mut text = serde_json::to_string_pretty(&analysis).map_err(runtime)?;
    text.push('\n');
    write_output(args.out.as_deref(), text.as_bytes())?;
    match analysis.result() {
        None => Err(runtime(failure_message(&analysis))),
        Some(result) if result.categories.iter().any(|c| gate.contains(c)) => {
            eprintln!("gate triggered: predicted {}", result.categories);
            Ok(EXIT_GATE)
        }
        Some(_) => Ok(EXIT_OK),
    }
}

fn failure_message(analysis: &CaseAnalysis) -> String {
    match &analysis.outcome {
        snaptriage::analysis::Outcome::Failed(f) => {
            format!("case {}: analysis failed after {} attempt(s): {}", analysis.case_id, analysis.attempts, f.message)
        }
        snaptriage::analysis::Outcome::Analyzed(_) => String::new(),
    }
}

fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn evaluate_options(model: &ModelArgs, mode: ModeChoice, concurrency: usize, ignore_default_first: bool) -> CliResult<EvaluateOptions> {
    let (core_prompt, version) = model.prompt()?;
    let mut options = EvaluateOptions::new(core_prompt, version);
    options.mode = mode.into();
    options.analyze = model.analyze_options();
    options.concurrency = concurrency.max(1);
    options.ignore_default_first = ignore_default_first;
    options.tool_version = env!("CARGO_PKG_VERSION").to_string();
    Ok(options)
}

fn summary_line(report: &EvaluationReport) -> String {
    let s = &report.summary;
    format!(
        "{} cases analyzed, {} failed: hit {:.2}%, recall {:.2}%, precision {:.2}%, F1 {:.2}%",
        s.analyzed_count, s.failed_count, s.hit_rate_pct, s.recall_pct, s.precision_pct, s.f1_pct
    )
}

fn run_evaluate(args: EvaluateArgs) -> CliResult<u8> {
    let gate = parse_categories(&args.fail_on)?;
    let allow = parse_categories(&args.allow)?;
    let manifest = load_manifest(&args.dataset)?;
    let backend = args.backend.build()?;
    let mut options = evaluate_options(&args.backend.model, args.mode, args.concurrency, args.ignore_default_first)?;
    options.timestamp = args.timestamp.clone().unwrap_or_else(now_timestamp);
    let report = evaluate_dataset(&manifest, &backend, &options)?;

    let render = RenderOptions {
        allow: (!allow.is_empty()).then_some(allow),
    };
    write_output(args.report.as_deref(), &render_report(&report, ReportFormat::Json, &render))?;
    if let Some(path) = &args.report_md {
        write_output(Some(path), &render_report(&report, ReportFormat::Markdown, &render))?;
    }
    if let Some(path) = &args.report_junit {
        write_output(Some(path), &render_report(&report, ReportFormat::Junit, &render))?;
    }
    eprintln!("{}", summary_line(&report));

    let flagged: Vec<&str> = report
        .per_case
        .iter()
        .filter(|c| {
            c.analysis
                .result()
                .is_some_and(|r| r.categories.iter().any(|cat| gate.contains(cat)))
        })
        .map(|c| c.case_id.as_str())
        .collect();
    if !flagged.is_empty() {
        eprintln!("gate triggered by: {}", flagged.join(", "));
        return Ok(EXIT_GATE);
    }
    Ok(EXIT_OK)
}

fn run_diff(args: DiffArgs) -> CliResult<u8> {
    let load = |p: &Path| imaging::load_image(p).map_err(runtime);
    let reference = load(&args.reference)?;
    let failure = load(&args.failure)?;
    let score = imaging::pixel_diff_score(&reference, &failure).map_err(runtime)?;
    if let Some(out) = &args.out {
        let mode = match args.mode {
            DiffModeChoice::Absolute => DiffMode::Absolute,
            DiffModeChoice::Highlight => DiffMode::Highlight,
        };
        let options = DiffOptions {
            mode,
            threshold: args.threshold,
        };
        let diff = imaging::render_diff_image(&reference, &failure, options).map_err(runtime)?;
        imaging::save_png(&diff, out).map_err(runtime)?;
    }
    println!("{score:.6}");
    Ok(EXIT_OK)
}

fn run_generate(args: GenerateArgs) -> CliResult<u8> {
    let categories = if args.categories.is_empty() {
        SYNTHESIZABLE.to_vec()
    } else {
        parse_categories(&args.categories)?.iter().cloned().collect()
    };
    let config = SyntheticConfig {
        count: args.count,
        categories,
        seed: args.seed,
        multi_label_fraction: args.multi_label_fraction,
        name: args.name,
    };
    let manifest = generate_synthetic_dataset(&args.out, &config)?;
    eprintln!("wrote {} cases to {}", manifest.cases.len(), args.out.display());
    Ok(EXIT_OK)
}

fn run_validate(args: ValidateArgs) -> CliResult<u8> {
    let options = LoadOptions {
        check_images: !args.skip_images,
    };
    let manifest = load_manifest_with(&args.dataset, options)?;
    println!("ok: {} ({} cases)", manifest.name, manifest.cases.len());
    Ok(EXIT_OK)
}

fn run_record(args: RecordArgs) -> CliResult<u8> {
    let manifest = load_manifest(&args.dataset)?;
    let config = match args.source {
        RecordSource::Live => args.model.live_config()?,
        RecordSource::Heuristic => BackendConfig::Heuristic,
    };
    let backend = Backend::new(config).map_err(backend_failure)?.recording(&args.fixtures);
    let mut options = evaluate_options(&args.model, args.mode, args.concurrency, args.ignore_default_first)?;
    options.timestamp = String::new();
    let report = evaluate_dataset(&manifest, &backend, &options)?;
    let backend_failures: Vec<String> = report
        .per_case
        .iter()
        .filter(|c| {
            matches!(&c.analysis.outcome, snaptriage::analysis::Outcome::Failed(f)
                if f.stage == snaptriage::analysis::FailureStage::Backend)
        })
        .map(|c| failure_message(&c.analysis))
        .collect();
    eprintln!("{}", summary_line(&report));
    eprintln!("fixtures written to {}", args.fixtures.display());
    if backend_failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err(runtime(backend_failures.join("\n")))
    }
}

fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => run_analyze(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Diff(args) => run_diff(args),
        Command::Generate(args) => run_generate(args),
        Command::Validate(args) => run_validate(args),
        Command::Record(args) => run_record(args),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(message)) => {
            eprintln!("error: {message}");
            EXIT_RUNTIME
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}
