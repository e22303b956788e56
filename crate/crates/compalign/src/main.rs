use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use compalign::checkpoint::{load_checkpoint, save_checkpoint};
use compalign::compare::compare_reports;
use compalign::config::{default_blobs_config, default_seg_config, DatasetSpec};
use compalign::experiment::{compress, evaluate, run_experiment, train_reference, Cell};
use compalign::output::{csv_string, read_json, write_csv, write_json, write_pgm, write_report_bundle};
use compalign::ExperimentConfig;
use compalign_core::metrics::{saliency, IouMode, MisalignmentReport, ReportOptions, Target};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "compalign", version, about = "Measure how well compressed networks agree with their reference")]
struct Cli {
    /// Seed for train/compress (defaults to the first config seed); first seed of a sweep.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the grid (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format for results printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Blobs,
    Seg,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference network and write its checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a reference with every loss/scheme cell of the config.
    Compress {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a misalignment report for two checkpoints.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        /// Dataset spec JSON (the `dataset` object of a config).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        attribution_samples: Option<usize>,
        #[arg(long)]
        pixel_mean_iou: bool,
        /// Dump attribution maps of the first N images as PGM.
        #[arg(long, default_value_t = 0)]
        pgm: usize,
    },
    /// Compare two reports (ratios a/b, deltas a-b).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Run the full grid over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds; replaces the config's seed list.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a default configuration.
    ExampleConfig {
        #[arg(value_enum, default_value_t = Preset::Blobs)]
        preset: Preset,
    },
}

fn emit<T: Serialize>(format: Format, rows: &[T]) -> Result<()> {
    let text = match format {
        Format::Json if rows.len() == 1 => serde_json::to_string_pretty(&rows[0])? + "\n",
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
        Format::Csv => csv_string(rows)?,
    };
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct ReportLine {
    accuracy_reference: f64,
    accuracy_compressed: f64,
    sparsity_compressed: f64,
    cie: usize,
    cie_u: usize,
    cip: Option<usize>,
    gap_reference: f64,
    gap_compressed: f64,
    mean_iou: f64,
    dice_compressed: Option<f64>,
}

impl From<&MisalignmentReport> for ReportLine {
    fn from(r: &MisalignmentReport) -> Self {
        ReportLine {
            accuracy_reference: r.accuracy_reference,
            accuracy_compressed: r.accuracy_compressed,
            sparsity_compressed: r.sparsity_compressed,
            cie: r.cie_count,
            cie_u: r.cie_u_count,
            cip: r.cip.as_ref().map(|c| c.count),
            gap_reference: r.fairness.gap_reference,
            gap_compressed: r.fairness.gap_compressed,
            mean_iou: r.mean_iou,
            dice_compressed: r.dice_compressed,
        }
    }
}

fn pick_seed(cli_seed: Option<u64>, cfg: &ExperimentConfig) -> u64 {
    cli_seed.unwrap_or(cfg.seeds[0])
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = pick_seed(cli.seed, &cfg);
            let dataset = cfg.dataset.generate()?;
            let r = train_reference(&cfg, &dataset, seed)?;
            save_checkpoint(&r.network, &out.join("reference.acmp"))?;
            write_csv(&out.join("train_log.csv"), &r.log)?;
            emit(cli.format, &r.log[r.log.len().saturating_sub(1)..])?;
        }
        Command::Compress { config, reference, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = pick_seed(cli.seed, &cfg);
            let dataset = cfg.dataset.generate()?;
            let reference = load_checkpoint(&reference)?;
            let mut lines = Vec::new();
            for cell in compalign::experiment::cells(&cfg) {
                let c = compress(&cfg, &dataset, &reference, &cell, seed)
                    .with_context(|| format!("compressing cell {}", cell.name()))?;
                let dir = out.join(cell.name());
                save_checkpoint(&c.network, &dir.join("compressed.acmp"))?;
                write_csv(&dir.join("steps.csv"), &c.steps)?;
                if let Some(f) = &c.fold {
                    write_json(&dir.join("fold.json"), f)?;
                }
                lines.push(CompressLine::new(&cell, c.network.sparsity()));
            }
            emit(cli.format, &lines)?;
        }
        Command::Evaluate {
            reference,
            compressed,
            dataset,
            out,
            attribution_samples,
            pixel_mean_iou,
            pgm,
        } => {
            let spec = DatasetSpec::load(&dataset)?;
            let data = spec.generate()?;
            let reference = load_checkpoint(&reference)?;
            let compressed = load_checkpoint(&compressed)?;
            let options = ReportOptions {
                attribution_samples,
                iou_mode: if pixel_mean_iou { IouMode::PixelMean } else { IouMode::SumRatio },
            };
            let report = evaluate(&reference, &compressed, &data, &options)?;
            write_report_bundle(&out, &report)?;
            for i in 0..pgm.min(data.eval.len()) {
                let x = data.eval.inputs.example(i);
                for (tag, net) in [("reference", &reference), ("compressed", &compressed)] {
                    let map = saliency(net, &x, Target::Predicted)?;
                    let (h, w) = match map.shape.as_slice() {
                        [h, w] => (*h, *w),
                        [n] => (1, *n),
                        other => bail!("cannot draw attribution of shape {other:?}"),
                    };
                    write_pgm(&out.join(format!("attr_{i}_{tag}.pgm")), &map.values, h, w)?;
                }
            }
            emit(cli.format, &[ReportLine::from(&report)])?;
        }
        Command::Compare { a, b } => {
            let a: MisalignmentReport = read_json(&a).context("reading report a")?;
            let b: MisalignmentReport = read_json(&b).context("reading report b")?;
            emit(cli.format, &[compare_reports(&a, &b)?])?;
        }
        Command::Sweep { config, seeds, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(n) = seeds {
                let first = cli.seed.unwrap_or(0);
                cfg.seeds = (first..first + n).collect();
            } else if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let result = run_experiment(&cfg, Some(&out), cli.threads)?;
            let failed = result.summary.iter().filter(|r| r.status != "ok").count();
            emit(cli.format, &result.aggregate)?;
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see summary.csv");
            }
        }
        Command::ExampleConfig { preset } => {
            let cfg = match preset {
                Preset::Blobs => default_blobs_config(),
                Preset::Seg => default_seg_config(),
            };
            println!("{}", cfg.to_json());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompressLine {
    cell: String,
    sparsity: f64,
}

impl CompressLine {
    fn new(cell: &Cell, sparsity: f64) -> Self {
        CompressLine {
            cell: cell.name(),
            sparsity,
        }
    }
}
