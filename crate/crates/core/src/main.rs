use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use linksql::config::RunConfig;
use linksql::pipeline::{self, Workspace};
use linksql::prompts::Stage;

#[derive(Parser)]
#[command(name = "linksql", version, about = "Two-stage text-to-SQL pipeline tooling")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    parallelism: Option<usize>,

    /// Only use the first N examples.
    #[arg(long, global = true)]
    limit: Option<usize>,

    /// Backend kind for both stages (`replay_gold_sql`) or one (`sql=fixture`).
    #[arg(long = "backend-override", global = true)]
    backend_override: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Link,
    Sql,
}

#[derive(Subcommand)]
enum Command {
    /// Extract gold schema links from the corpus SQL.
    ExtractLinks,
    /// Dump the chunked link-stage prompts' schema partition.
    Chunk,
    /// Run the configured pipeline and write predictions.
    Run,
    /// Score a predictions file.
    Eval {
        /// Defaults to `<out>/predictions.jsonl`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Row label in the results table; defaults to the variant.
        #[arg(long)]
        label: Option<String>,
    },
    /// Export supervised fine-tuning records.
    ExportSft {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Defaults to `<out>/sft_<stage>.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a results table from saved `eval_report.json` files.
    Report {
        /// `label=path` pairs; a bare path is labelled by its directory.
        inputs: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let Some(path) = &cli.config else { bail!("--config is required for this command") };
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = &cli.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(p) = cli.parallelism {
        cfg.run.parallelism = p;
    }
    if let Some(n) = cli.limit {
        cfg.run.limit = Some(n);
    }
    for spec in &cli.backend_override {
        cfg.apply_backend_override(spec)?;
    }
    Ok(cfg)
}

fn report_input(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(spec);
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (label, path)
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Command::Report { inputs } = &cli.command {
        let inputs: Vec<_> = inputs.iter().map(|s| report_input(s)).collect();
        let table = pipeline::cmd_report(&inputs)?;
        println!("{table}");
        return Ok(());
    }

    let ws = Workspace::open(load_config(&cli)?)?;
    match &cli.command {
        Command::ExtractLinks => {
            let s = pipeline::cmd_extract_links(&ws)?;
            println!("extracted {} links, {} failures ({:.2}%)", s.extracted, s.failed, 100.0 * s.failure_rate);
        }
        Command::Chunk => {
            let n = pipeline::cmd_chunk(&ws)?;
            println!("wrote {n} chunks to {}", ws.out(pipeline::CHUNKS_FILE).display());
        }
        Command::Run => {
            let s = pipeline::cmd_run(&ws)?;
            println!(
                "{} examples, {} link prompts, {} SQL prompts, {} failed; artifacts in {}",
                s.examples,
                s.link_prompts,
                s.sql_prompts,
                s.failed_examples,
                ws.config.run.output_dir.display()
            );
        }
        Command::Eval { predictions, label } => {
            let path = predictions.clone().unwrap_or_else(|| ws.out(pipeline::PREDICTIONS_FILE));
            let label = label.clone().unwrap_or_else(|| ws.config.variant.to_string());
            let report = pipeline::cmd_eval(&ws, &path, &label)?;
            println!("{}", linksql::evalx::render_table(&[(label, report)]));
        }
        Command::ExportSft { stage, output } => {
            let stage = match stage {
                StageArg::Link => Stage::Link,
                StageArg::Sql => Stage::Sql,
            };
            let out = output.clone().unwrap_or_else(|| ws.out(&format!("sft_{stage}.jsonl")));
            let r = pipeline::cmd_export_sft(&ws, stage, &out)?;
            println!(
                "wrote {} records ({} train / {} validation examples, {} skipped) to {}",
                r.emitted,
                r.train_examples,
                r.validation_examples,
                r.skipped.len(),
                out.display()
            );
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}
