use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hicom::config::RunConfig;
use hicom::ingest::Layout;
use hicom::train::parse_modules;

#[derive(Parser)]
#[command(
    name = "hicom",
    version,
    about = "Multi-face forgery detection from contextual cues"
)]
struct Cli {
    /// TOML run configuration; defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and the dataset seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset root for `generate`, the run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root read by `train` and `evaluate`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic multi-face dataset.
    Generate {
        #[arg(long)]
        clips: Option<usize>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train module networks: m1, m2, gaze, agegender or all (comma-separated).
    Train {
        #[arg(long, default_value = "all")]
        modules: String,
    },
    /// Evaluate on the test split and write the report, detections and plots.
    Evaluate {
        #[arg(long, default_value = "all")]
        modules: String,
        /// Also sweep the configured perturbations and severities.
        #[arg(long)]
        perturb: bool,
    },
    /// Explain the stored detections.
    Explain {
        #[arg(long, conflicts_with = "llm")]
        offline: bool,
        /// HTTP endpoint that receives a JSON prompt per face.
        #[arg(long)]
        llm: Option<String>,
    },
    /// Normalize external annotations into a clip manifest.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        layout: Layout,
        /// Manifest to write; rejections go next to it.
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.data_dir = d.clone();
    }
    match cli.cmd {
        Cmd::Generate { clips, force } => {
            if let Some(n) = clips {
                cfg.data.clips = n;
            }
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let out = cli.out.unwrap_or(cfg.data_dir.clone());
            let summary = hicom::generate::generate(&cfg.data, &out, force)?;
            println!(
                "wrote {} clips ({} frames) to {}",
                summary.clips,
                summary.frames,
                out.display()
            );
        }
        Cmd::Train { modules } => {
            if let Some(o) = cli.out {
                cfg.out_dir = o;
            }
            let logs = hicom::train::cmd_train(&cfg, &parse_modules(&modules)?)?;
            for l in logs {
                println!(
                    "{}: selected epoch {} (val loss {:.6})",
                    l.network, l.selected_epoch, l.selected_val_loss
                );
            }
        }
        Cmd::Evaluate { modules, perturb } => {
            if let Some(o) = cli.out {
                cfg.out_dir = o;
            }
            let res = hicom::evaluate::cmd_evaluate(&cfg, &parse_modules(&modules)?, perturb)?;
            for row in &res.report.ablation {
                println!("{:<12} FAC {:.4}  FCAC {:.4}", row.label, row.fac, row.fcac);
            }
            println!("report: {}", res.report_path.display());
        }
        Cmd::Explain { offline, llm } => {
            if let Some(o) = cli.out {
                cfg.out_dir = o;
            }
            let (path, records) = hicom::explain::cmd_explain(&cfg, offline, llm.as_deref())?;
            let degraded = records.iter().filter(|r| r.degraded).count();
            println!(
                "{} explanations ({degraded} degraded) in {}",
                records.len(),
                path.display()
            );
        }
        Cmd::Ingest {
            input,
            layout,
            output,
        } => {
            let res = hicom::ingest::cmd_ingest(&input, layout, &output)?;
            println!(
                "{} clips kept, {} rejected",
                res.clips.len(),
                res.rejected.len()
            );
        }
    }
    Ok(())
}
