use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use kvguide_cli::config::{parse_pairs, ExperimentConfig};
use kvguide_cli::run_experiment;

/// Guided captioning experiments on synthetic worlds.
#[derive(Parser, Debug)]
#[command(name = "kvguide", version)]
struct Args {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated models: sum, product, product_decentralized, unguided.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV; per-caption scores go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace as JSON lines, one per emitted token.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// `style`, `audio`, `conflict`, `emotion`, or a saved world directory.
    #[arg(long)]
    scenario: Option<String>,
    /// Image embeddings replacing the scenario's images.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    audio_embeddings: Option<PathBuf>,
    /// Comma-separated style targets.
    #[arg(long)]
    style: Option<String>,
    /// Any config key, e.g. `--set guidance.alpha_lm=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Args {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = parse_pairs(&self.set.join("\n"))?;
        let path = |p: &PathBuf| p.display().to_string();
        let flags = [
            ("variant", self.variant.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("output.report", self.out.as_ref().map(path)),
            ("output.trace", self.trace_out.as_ref().map(path)),
            ("scenario", self.scenario.clone()),
            ("embeddings", self.embeddings.as_ref().map(path)),
            ("audio_embeddings", self.audio_embeddings.as_ref().map(path)),
            ("style", self.style.clone()),
        ];
        out.extend(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
        );
        Ok(out)
    }
}

fn run(args: Args) -> Result<()> {
    let overrides = args.overrides()?;
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, &overrides)?,
        None => ExperimentConfig::from_pairs(&overrides)?,
    };
    let out = run_experiment(&cfg)?;
    for row in &out.report.rows {
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<22} {:<10} tic={:.3} style_acc={} fluency={:.3} vocab={} tac={}",
            row.model,
            row.style,
            row.tic,
            fmt(row.style_accuracy),
            row.fluency,
            row.vocab,
            fmt(row.tac)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
