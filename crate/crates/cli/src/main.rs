//! `loomline`: run scenarios, replicate the digital-twin results table,
//! score prediction files, manage the run store and serve the HTTP API.
//!
//! Exit codes: 0 ok, 1 I/O failure, 2 invalid input, 3 not found.

mod table4;

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use loomline_core::classification::{resolve_classifier, DEFAULT_PROFILE};
use loomline_core::domain::{validate_scenario, ClassifierProfile, Violation};
use loomline_core::evalmetrics::{
    evaluate_predictions, read_predictions, MetricsError, MetricsReport,
};
use loomline_core::repository::{RepoError, RunFilter, RunRecord, Store, STORE_ENV};
use loomline_core::stations::{simulate, PipelineModel, RunReport, SimError};
use loomline_core::{Classifier, MaterialClass, ScenarioConfig, StochasticClassifier};
use loomline_server::{AppState, DEFAULT_BIND};

#[derive(Debug, Parser)]
#[command(name = "loomline", version, about = "Textile-sorting digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StoreArg {
    /// Run store (JSON lines).
    #[arg(long, env = STORE_ENV, global = true)]
    store: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file and print the results table.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Profile name, or path to a profile JSON file.
        #[arg(long, default_value = DEFAULT_PROFILE)]
        profile: String,
        #[command(flatten)]
        store: StoreArg,
        /// Report JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-garment CSV destination.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Disable error retries at a station (repeatable).
        #[arg(long, value_enum)]
        no_retry: Vec<RetryStation>,
    },
    /// Rerun the three reference experiments and compare against the reference table.
    Table4 {
        #[arg(long, default_value_t = 10)]
        reps: u32,
        #[arg(long, default_value_t = loomline_core::domain::REFERENCE_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions CSV.
    Metrics {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = DEFAULT_BIND)]
        bind: String,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Inspect stored runs.
    Runs {
        #[command(subcommand)]
        action: RunsAction,
        #[command(flatten)]
        store: StoreArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RetryStation {
    Conveyor,
    Camera,
    Arm,
    Laser,
}

#[derive(Debug, Subcommand)]
enum RunsAction {
    /// One line per stored run, oldest first.
    List {
        #[arg(long)]
        garment_count: Option<u32>,
        #[arg(long)]
        profile: Option<String>,
    },
    /// Print a stored run record as JSON.
    Show { run_id: String },
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Invalid(String),
    NotFound(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::NotFound(_) => 3,
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn violations(what: &str, list: &[Violation]) -> Self {
        let lines: Vec<String> = list.iter().map(|v| format!("  {v}")).collect();
        CliError::Invalid(format!("{what}:\n{}", lines.join("\n")))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) | CliError::Invalid(m) | CliError::NotFound(m) => f.write_str(m),
        }
    }
}

impl From<RepoError> for CliError {
    fn from(e: RepoError) -> Self {
        match e {
            RepoError::NotFound(_) => CliError::NotFound(e.to_string()),
            RepoError::Io { .. } => CliError::Io(e.to_string()),
            RepoError::Conflict(_) | RepoError::Corrupt { .. } => CliError::Invalid(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            scenario,
            profile,
            store,
            out,
            csv,
            no_retry,
        } => {
            let mut model = PipelineModel::default();
            for station in no_retry {
                model.errors_enabled[station as usize] = false;
            }
            let outputs = Outputs {
                out: out.as_deref(),
                csv: csv.as_deref(),
            };
            cmd_simulate(&scenario, &profile, store.store.as_deref(), &model, outputs)
        }
        Command::Table4 { reps, seed, out } => table4::run(reps, seed, out.as_deref()),
        Command::Metrics { predictions, out } => cmd_metrics(&predictions, out.as_deref()),
        Command::Serve { bind, store } => cmd_serve(&bind, store.store.as_deref()),
        Command::Runs { action, store } => {
            let path = store.store.ok_or_else(|| {
                CliError::Invalid(format!("no run store: pass --store or set {STORE_ENV}"))
            })?;
            let store = Store::open(&path)?;
            match action {
                RunsAction::List {
                    garment_count,
                    profile,
                } => {
                    let filter = RunFilter {
                        garment_count,
                        profile_name: profile,
                        ..RunFilter::default()
                    };
                    cmd_runs_list(&store, &filter)
                }
                RunsAction::Show { run_id } => {
                    let record = store.load_run(&run_id)?;
                    let text = serde_json::to_string_pretty(record).expect("record serializes");
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = read_file(path)?;
    let cfg = ScenarioConfig::from_json(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    validate_scenario(cfg)
        .map_err(|v| CliError::violations(&format!("{}: invalid scenario", path.display()), &v))
}

/// A profile argument naming an existing file is loaded from it; anything
/// else is looked up by name. File profiles are returned for storing.
fn load_classifier(
    profile: &str,
    store: &Store,
) -> Result<(Box<dyn Classifier>, Option<ClassifierProfile>), CliError> {
    let path = Path::new(profile);
    if path.is_file() {
        let text = read_file(path)?;
        let parsed: ClassifierProfile = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        parsed
            .validate()
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        return Ok((
            Box::new(StochasticClassifier::new(parsed.clone())),
            Some(parsed),
        ));
    }
    resolve_classifier(profile, store.profiles())
        .map(|c| (c, None))
        .ok_or_else(|| CliError::Invalid(format!("unknown profile `{profile}` and no such file")))
}

fn open_store(path: Option<&Path>) -> Result<Store, CliError> {
    Ok(match path {
        Some(p) => Store::open(p)?,
        None => Store::in_memory(),
    })
}

struct Outputs<'a> {
    out: Option<&'a Path>,
    csv: Option<&'a Path>,
}

fn cmd_simulate(
    scenario_path: &Path,
    profile: &str,
    store_path: Option<&Path>,
    model: &PipelineModel,
    Outputs { out, csv }: Outputs<'_>,
) -> Result<(), CliError> {
    let scenario = load_scenario(scenario_path)?;
    let mut store = open_store(store_path)?;
    let (classifier, file_profile) = load_classifier(profile, &store)?;
    let sim = simulate(&scenario, model, classifier.as_ref()).map_err(|e| match e {
        SimError::Invalid(v) => CliError::violations("invalid scenario", &v),
        other => CliError::Invalid(other.to_string()),
    })?;
    let report = sim.report;

    print_summary(&report);
    if let Some(path) = out {
        write_file(path, &report.to_json())?;
    }
    if let Some(path) = csv {
        write_file(path, &report.garments_csv())?;
    }
    if store_path.is_some() {
        // built-in names always resolve to the built-in profile, so keeping
        // a same-named file profile would be misleading
        if let Some(p) = file_profile.filter(|p| resolve_classifier(&p.name, &[]).is_none()) {
            if let Err(e) = store.save_profile(p) {
                log::warn!("profile not stored: {e}");
            }
        }
        let record = RunRecord {
            run_id: store.next_run_id(),
            created_at: Utc::now(),
            scenario,
            profile_name: report.profile_name.clone(),
            report,
        };
        let id = store.save_run(record)?;
        println!("run_id {id}");
    }
    Ok(())
}

fn print_summary(report: &RunReport) {
    let mut out = io::stdout().lock();
    for (label, value) in report.summary_rows() {
        let _ = writeln!(out, "{label:<28} {value}");
    }
    if let Some(acc) = report.summary.classification_accuracy {
        let _ = writeln!(out, "{:<28} {:.1}%", "Classification accuracy", acc * 100.0);
    }
}

fn cmd_metrics(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let located = |e: MetricsError| match e {
        MetricsError::Csv { line, message } => {
            CliError::Invalid(format!("{}:{line}: {message}", path.display()))
        }
        other => CliError::Invalid(format!("{}: {other}", path.display())),
    };
    let rows = read_predictions(io::BufReader::new(file)).map_err(located)?;
    let report = evaluate_predictions(&rows).map_err(located)?;
    print_metrics(&report);
    if let Some(out) = out {
        write_file(out, &report.to_json())?;
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn print_metrics(report: &MetricsReport) {
    let m = &report.metrics;
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "samples   {}", m.samples);
    let _ = writeln!(out, "accuracy  {}", cell(m.accuracy));
    let _ = writeln!(
        out,
        "{:<10} {:>9} {:>9} {:>9} {:>9}",
        "class", "precision", "recall", "f1", "auc"
    );
    for c in 0..m.precision.len() {
        let name =
            MaterialClass::from_label(c).map_or_else(|| c.to_string(), |m| m.name().to_owned());
        let _ = writeln!(
            out,
            "{name:<10} {:>9} {:>9} {:>9} {:>9}",
            cell(m.precision[c]),
            cell(m.recall[c]),
            cell(m.f1[c]),
            cell(m.auc[c])
        );
    }
    let _ = writeln!(
        out,
        "{:<10} {:>9} {:>9} {:>9} {:>9}",
        "macro",
        cell(m.macro_precision),
        cell(m.macro_recall),
        cell(m.macro_f1),
        cell(m.macro_auc)
    );
    let _ = writeln!(out, "confusion matrix (rows true, columns predicted)");
    for row in &report.confusion_matrix.matrix {
        let cells: Vec<String> = row.iter().map(|n| format!("{n:>6}")).collect();
        let _ = writeln!(out, "{}", cells.join(""));
    }
}

fn cmd_serve(bind: &str, store_path: Option<&Path>) -> Result<(), CliError> {
    let store = open_store(store_path)?;
    let runtime =
        tokio::runtime::Runtime::new().map_err(|e| CliError::Io(format!("runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| CliError::Io(format!("bind {bind}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = io::stdout().flush();
        loomline_server::serve(listener, AppState::new(store))
            .await
            .map_err(|e| CliError::Io(format!("serve: {e}")))
    })
}

fn cmd_runs_list(store: &Store, filter: &RunFilter) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    for s in store.list_runs(filter) {
        let _ = writeln!(
            out,
            "{}  {}  n={:<4} total={:.1} s  efficiency={:.1}%",
            s.run_id,
            s.created_at.format("%Y-%m-%dT%H:%M:%SZ"),
            s.garment_count,
            s.total_time,
            s.green_efficiency * 100.0
        );
    }
    Ok(())
}
