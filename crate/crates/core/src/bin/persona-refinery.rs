use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use persona_refinery::datasets::{load_dataset, DatasetError, ScenarioSpec};
use persona_refinery::prompts::{Bindings, PromptRegistry, TemplateId, TemplateSet};
use persona_refinery::runner::{self, aggregate, export_report, ExportFormat, RunManifest};
use persona_refinery::types::{MetricKind, Scenario};

#[derive(Parser)]
#[command(
    name = "persona-refinery",
    version,
    about = "Iterative persona refinement runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the refinement loop over a manifest's datasets.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate one or more journals into curve and comparison tables.
    Aggregate {
        #[arg(long, required = true)]
        journal: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tsv)]
        format: Format,
    },
    /// Check a dataset file against a scenario.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scenario: Scenario,
    },
    /// Print a rendered prompt exactly as it would be sent.
    RenderPrompt {
        #[arg(long)]
        template: TemplateId,
        /// JSON object of placeholder bindings.
        #[arg(long)]
        bindings: PathBuf,
        #[arg(long)]
        corrected: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Csv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { manifest, resume } => {
            let manifest = RunManifest::load(&manifest)?;
            let summary = if resume {
                runner::resume_run(&manifest)?
            } else {
                runner::execute_run(&manifest)?
            };
            println!(
                "run {}: {} records, {} completed, {} failed, {} entries written",
                summary.run_id,
                summary.records_total,
                summary.completed,
                summary.failed,
                summary.entries_written
            );
            for (reason, n) in &summary.stop_reasons {
                println!("  {}: {n}", reason.as_str());
            }
        }
        Command::Aggregate {
            journal,
            out,
            format,
        } => {
            let reports = journal
                .iter()
                .map(|j| aggregate(j, &MetricKind::ALL))
                .collect::<Result<Vec<_>, _>>()?;
            let format = match format {
                Format::Tsv => ExportFormat::Tsv,
                Format::Csv => ExportFormat::Csv,
            };
            for path in export_report(&reports, &out, format)? {
                println!("{}", path.display());
            }
        }
        Command::Validate { dataset, scenario } => {
            match load_dataset(&dataset, &ScenarioSpec::for_scenario(scenario)) {
                Ok(file) => {
                    for w in &file.warnings {
                        println!("warning: {w}");
                    }
                    println!(
                        "{}: {} valid records",
                        dataset.display(),
                        file.records.len()
                    );
                }
                Err(DatasetError::ValidationFailed(violations)) => {
                    for v in &violations {
                        println!("{v}");
                    }
                    println!("{}: {} violations", dataset.display(), violations.len());
                    return Ok(ExitCode::from(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::RenderPrompt {
            template,
            bindings,
            corrected,
        } => {
            let text = std::fs::read_to_string(&bindings)?;
            let bindings: Bindings = serde_json::from_str(&text)?;
            let set = if corrected {
                TemplateSet::Corrected
            } else {
                TemplateSet::Verbatim
            };
            let prompt = PromptRegistry::with_set(set).render(template, &bindings)?;
            print!("{prompt}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
