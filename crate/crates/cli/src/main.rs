mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chainmpq_core::bench::{
    evaluate, load_dataset, render_table, sweep, write_sweep_csv, RunnerKind,
    DEFAULT_SWEEP_K_MAXES, DEFAULT_SWEEP_LAMBDAS,
};
use chainmpq_core::chain::run_chain_with_lexicon;
use chainmpq_core::heatmap::{emit_heatmaps, HeatmapError};
use chainmpq_core::{parse_relational_question, run_vanilla, ChainTranscript, Label};
use clap::{Parser, Subcommand, ValueEnum};

use config::{CliConfig, CommonArgs};

/// Relation-hallucination mitigation through multi-perspective question chains.
#[derive(Debug, Parser)]
#[command(name = "chainmpq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Runner {
    Vanilla,
    Chain,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ask the question once, with no chain.
    Ask {
        /// Yes/no relational question.
        question: String,
        /// Image reference (scene id for the mock backend).
        #[arg(long)]
        image: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full chain and write its transcript.
    Chain {
        question: String,
        #[arg(long)]
        image: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a JSONL dataset.
    Bench {
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "chain")]
        runner: Runner,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate the chain over a grid of lambda and k_max values.
    Sweep {
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_LAMBDAS)]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_K_MAXES)]
        k_maxes: Vec<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render per-step attention heat maps from a transcript.
    Heatmap {
        /// Transcript written by `chain --keep-attention`.
        transcript: PathBuf,
        /// Pixels per patch side.
        #[arg(long, value_name = "N")]
        cell_pixels: Option<usize>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "PATH", env = "CHAINMPQ_CONFIG")]
        config: Option<PathBuf>,
    },
}

/// Exit status for a decision: 0 for yes/no, 2 when no decision was found.
fn label_exit(label: Label) -> ExitCode {
    match label {
        Label::Yes | Label::No => ExitCode::SUCCESS,
        Label::Unparseable => ExitCode::from(2),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn image_or_default(image: Option<String>, cfg: &CliConfig) -> Result<String> {
    match image {
        Some(i) => Ok(i),
        None => cfg.default_image(),
    }
}

fn cmd_ask(question: &str, image: Option<String>, common: &CommonArgs) -> Result<ExitCode> {
    let cfg = CliConfig::resolve(common, None)?;
    // The baseline does not need the triple, but a non-relational question
    // is a usage error rather than a model answer.
    parse_relational_question(question, &cfg.lexicon()?)?;
    let image = image_or_default(image, &cfg)?;
    let backend = cfg.backend()?;
    let v = run_vanilla(backend.as_ref(), &image, question)?;
    writeln!(std::io::stdout(), "{}\nlabel: {}", v.answer, v.label)?;
    Ok(label_exit(v.label))
}

fn cmd_chain(question: &str, image: Option<String>, common: &CommonArgs) -> Result<ExitCode> {
    let cfg = CliConfig::resolve(common, None)?;
    let image = image_or_default(image, &cfg)?;
    let backend = cfg.backend()?;
    let t = run_chain_with_lexicon(
        backend.as_ref(),
        &image,
        question,
        &cfg.chain,
        &cfg.lexicon()?,
    )?;
    let path = cfg.output_dir.join("transcript.json");
    write_file(&path, t.to_json().as_bytes())?;
    for w in &t.warnings {
        log::warn!("{w}");
    }
    writeln!(
        std::io::stdout(),
        "{}\nlabel: {}",
        t.final_answer,
        t.final_label
    )?;
    eprintln!("transcript: {}", path.display());
    Ok(label_exit(t.final_label))
}

fn cmd_bench(dataset: &Path, runner: Runner, common: &CommonArgs) -> Result<ExitCode> {
    let cfg = CliConfig::resolve(common, None)?;
    let data = load_dataset(dataset)?;
    let backend = cfg.backend()?;
    let kinds: &[RunnerKind] = match runner {
        Runner::Vanilla => &[RunnerKind::Vanilla],
        Runner::Chain => &[RunnerKind::Chain],
        Runner::Both => &[RunnerKind::Vanilla, RunnerKind::Chain],
    };
    let mut stdout = std::io::stdout().lock();
    for &kind in kinds {
        let report = evaluate(kind, backend.as_ref(), &data, &cfg.chain, cfg.jobs)?;
        let name = match kind {
            RunnerKind::Vanilla => "vanilla",
            RunnerKind::Chain => "chain",
        };
        let path = cfg.output_dir.join(format!("report-{name}.json"));
        write_file(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        write!(stdout, "{}", render_table(&report))?;
        writeln!(stdout)?;
        eprintln!("report: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    dataset: &Path,
    lambdas: &[f64],
    k_maxes: &[usize],
    common: &CommonArgs,
) -> Result<ExitCode> {
    let cfg = CliConfig::resolve(common, None)?;
    let data = load_dataset(dataset)?;
    let backend = cfg.backend()?;
    let rows = sweep(
        lambdas,
        k_maxes,
        backend.as_ref(),
        &data,
        &cfg.chain,
        cfg.jobs,
    )?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    let path = cfg.output_dir.join("sweep.csv");
    write_file(&path, &csv)?;
    std::io::stdout().write_all(&csv)?;
    eprintln!("sweep: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_heatmap(
    transcript: &Path,
    cell_pixels: Option<usize>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<ExitCode> {
    let common = CommonArgs {
        out,
        config,
        // Heat maps never touch a backend; any source satisfies the resolver.
        scene: Some(transcript.to_path_buf()),
        ..CommonArgs::default()
    };
    let cfg = CliConfig::resolve(&common, cell_pixels)?;
    let text = std::fs::read_to_string(transcript)
        .with_context(|| format!("cannot read transcript {}", transcript.display()))?;
    let t: ChainTranscript = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a chain transcript", transcript.display()))?;
    match emit_heatmaps(&t, &cfg.output_dir, cfg.cell_pixels) {
        Ok(files) => {
            let mut stdout = std::io::stdout().lock();
            for f in files {
                writeln!(stdout, "{}", f.display())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ HeatmapError::NoAttention) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ask {
            question,
            image,
            common,
        } => cmd_ask(question, image.clone(), common),
        Command::Chain {
            question,
            image,
            common,
        } => cmd_chain(question, image.clone(), common),
        Command::Bench {
            dataset,
            runner,
            common,
        } => cmd_bench(dataset, *runner, common),
        Command::Sweep {
            dataset,
            lambdas,
            k_maxes,
            common,
        } => cmd_sweep(dataset, lambdas, k_maxes, common),
        Command::Heatmap {
            transcript,
            cell_pixels,
            out,
            config,
        } => cmd_heatmap(transcript, *cell_pixels, out.clone(), config.clone()),
    };
    match result {
        Ok(code) => code,
        // A closed downstream pipe (`| head`) is not a failure.
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
