use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vecof::scenario::{load_scenario, run_scenario, RunOptions, ScenarioError};

#[derive(Parser)]
#[command(
    name = "vecof",
    version,
    about = "Replay vehicle-edge-cloud scenarios deterministically"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its expectations.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full trace output; defaults to `<VECOF_TRACE_DIR>/<name>-<seed>.trace` when that is set.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, env = "VECOF_TRACE_DIR")]
        trace_dir: Option<PathBuf>,
        /// Metrics block only.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Parse a scenario and report errors without running it.
    Check { scenario: PathBuf },
}

const EXIT_ASSERT: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn fail(e: &ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_parse() {
        EXIT_PARSE
    } else {
        EXIT_RUNTIME
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check { scenario } => match load_scenario(&scenario) {
            Ok(sc) => {
                println!(
                    "{}: {} nodes, {} links, {} events, {} expectations",
                    sc.name,
                    sc.nodes.len(),
                    sc.links.len(),
                    sc.timeline.len(),
                    sc.expectations.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            scenario,
            seed,
            trace,
            trace_dir,
            metrics,
        } => {
            let sc = match load_scenario(&scenario) {
                Ok(sc) => sc,
                Err(e) => return fail(&e),
            };
            let trace =
                trace.or_else(|| trace_dir.map(|d| d.join(format!("{}-{seed}.trace", sc.name))));
            let opts = RunOptions {
                seed,
                keep_lines: trace.is_some(),
            };
            let report = match run_scenario(&sc, opts) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            if let Some(path) = trace {
                let written = File::create(&path)
                    .map_err(|e| ScenarioError::SinkUnavailable(format!("{}: {e}", path.display())))
                    .and_then(|f| report.emit_trace(BufWriter::new(f)));
                if let Err(e) = written {
                    return fail(&e);
                }
            }
            if let Some(path) = metrics {
                if let Err(e) = std::fs::write(&path, report.render_metrics()) {
                    return fail(&ScenarioError::SinkUnavailable(format!(
                        "{}: {e}",
                        path.display()
                    )));
                }
            }
            print!("{}", report.render_metrics());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ASSERT)
            }
        }
    }
}
