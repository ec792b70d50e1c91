use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use hybridflow::config::{load_streamflow_file, StreamflowFile};
use hybridflow::connector::ConnectorRegistry;
use hybridflow::report::RunReport;
use hybridflow::runtime::{execute_workflow, prepare, EngineOptions, RunSetup, RunStatus};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 1;
const EXIT_FAILED: u8 = 2;
const EXIT_TEARDOWN: u8 = 3;

#[derive(Parser)]
#[command(name = "hybridflow", version, about = "Run command-line workflows across deployed multi-container environments")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace, or an env_logger spec).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every workflow of a streamflow-file.
    Run {
        file: PathBuf,
        /// Output directory. With several workflows each gets `<outdir>/<name>`.
        #[arg(long, default_value = "hybridflow-out")]
        outdir: PathBuf,
        /// Report path (default `<outdir>/report.json`). With several
        /// workflows the name is inserted before the extension.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run one job at a time in a fixed order.
        #[arg(long)]
        serial: bool,
        /// Deploy all models up front instead of on first use.
        #[arg(long)]
        eager: bool,
        /// Run only the named workflow.
        #[arg(long)]
        workflow: Option<String>,
    },
    /// Check a streamflow-file, its workflows and bindings without deploying anything.
    Validate { file: PathBuf },
    /// Render a run report.
    Report {
        report: PathBuf,
        #[arg(long, default_value = "summary", value_parser = ["text-gantt", "svg", "summary"])]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_millis()
        .init();
    let code = match cli.command {
        Command::Validate { file } => validate(&file).map(|_| EXIT_OK).unwrap_or(EXIT_INVALID),
        Command::Run {
            file,
            outdir,
            report,
            serial,
            eager,
            workflow,
        } => {
            let options = EngineOptions {
                serial,
                eager,
                ..EngineOptions::default()
            };
            run(&file, &outdir, report.as_deref(), workflow.as_deref(), &options)
        }
        Command::Report { report, format } => render(&report, &format),
    };
    ExitCode::from(code)
}

fn load(file: &Path) -> Option<StreamflowFile> {
    match load_streamflow_file(file) {
        Ok(f) => Some(f),
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            None
        }
    }
}

/// Loads the file and resolves every workflow, reporting all problems.
fn validate(file: &Path) -> Result<StreamflowFile, ()> {
    let parsed = load(file).ok_or(())?;
    let mut ok = true;
    for name in parsed.workflows.keys() {
        match prepare(&parsed, name) {
            Ok((graph, bindings)) => info!(
                "workflow `{name}`: {} steps, {} bound",
                graph.steps.len(),
                bindings.len()
            ),
            Err(e) => {
                eprintln!("error: {}: {e}", file.display());
                ok = false;
            }
        }
    }
    if ok {
        println!("{}: valid", file.display());
        Ok(parsed)
    } else {
        Err(())
    }
}

fn report_path(outdir: &Path, report: Option<&Path>, name: &str, several: bool) -> PathBuf {
    match report {
        None => outdir.join("report.json"),
        Some(p) if !several => p.to_path_buf(),
        Some(p) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let file = match p.extension() {
                Some(ext) => format!("{stem}.{name}.{}", ext.to_string_lossy()),
                None => format!("{stem}.{name}"),
            };
            p.with_file_name(file)
        }
    }
}

fn run(
    file: &Path,
    outdir: &Path,
    report: Option<&Path>,
    only: Option<&str>,
    options: &EngineOptions,
) -> u8 {
    let Ok(parsed) = validate(file) else {
        return EXIT_INVALID;
    };
    let names: Vec<String> = match only {
        Some(n) if parsed.workflows.contains_key(n) => vec![n.to_string()],
        Some(n) => {
            eprintln!("error: {}: unknown workflow `{n}`", file.display());
            return EXIT_INVALID;
        }
        None => parsed.workflows.keys().cloned().collect(),
    };
    let several = names.len() > 1;
    let mut code = EXIT_OK;
    for name in &names {
        let dir = if several { outdir.join(name) } else { outdir.to_path_buf() };
        let setup = match RunSetup::from_file(&parsed, name, ConnectorRegistry::default(), &dir) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INVALID;
            }
        };
        info!("running workflow `{name}` into {}", dir.display());
        let outcome = match execute_workflow(setup, options) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("error: workflow `{name}`: {e}");
                code = code.max(EXIT_FAILED);
                continue;
            }
        };
        let path = report_path(&dir, report, name, several);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            let _ = fs::create_dir_all(parent);
        }
        if let Err(e) = fs::write(&path, outcome.report.to_json()) {
            error!("cannot write report {}: {e}", path.display());
        }
        for err in &outcome.report.errors {
            warn!("{name}: {err}");
        }
        println!("{name}: {} (report: {})", outcome.status.as_str(), path.display());
        code = code.max(match outcome.status {
            RunStatus::Completed => EXIT_OK,
            RunStatus::Failed => EXIT_FAILED,
            RunStatus::TeardownFailed => EXIT_TEARDOWN,
        });
    }
    code
}

fn render(path: &Path, format: &str) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    match RunReport::from_json(&text).and_then(|r| r.render(format)) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            EXIT_INVALID
        }
    }
}
