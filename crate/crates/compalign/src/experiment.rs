//! The train -> compress -> evaluate pipeline over a loss x scheme x seed grid.

use std::path::{Path, PathBuf};

use compalign_core::compression::{group_sparsity_compress, rewind_compress, FineTune, FoldSummary, Method};
use compalign_core::data::{Dataset, Split, Task};
use compalign_core::losses::{LossConfig, LossTerm};
use compalign_core::metrics::{build_report, dice, foreground, MisalignmentReport, ReportOptions};
use compalign_core::rng::{SeededRng, Stream};
use compalign_core::train::{fit_with, predict_classes, Objective};
use compalign_core::weighting::{Scheme, Weighting, WeightingParams};
use compalign_core::models::encode_checkpoint;
use compalign_core::Network;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::output::{write_csv, write_json, write_report_bundle, StepRow, TrainRow};

/// One (loss subset, weighting scheme) combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub losses: Vec<LossTerm>,
    pub scheme: Scheme,
}

impl Cell {
    pub fn losses_name(&self) -> String {
        self.losses.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    }

    /// Directory-safe identifier such as `ce+mse-uniform`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.losses_name(), self.scheme.name())
    }
}

/// Subset-major enumeration of the grid.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    cfg.losses
        .subsets
        .iter()
        .flat_map(|s| cfg.schemes.iter().map(|&scheme| Cell { losses: s.clone(), scheme }))
        .collect()
}

/// Accuracy for classification, foreground dice for segmentation.
pub fn quality(net: &Network, split: &Split, task: Task) -> Result<f64> {
    let pred = predict_classes(net, &split.inputs)?;
    Ok(match task {
        Task::Classification => {
            pred.iter().zip(&split.labels).filter(|(p, y)| p == y).count() as f64 / split.labels.len() as f64
        }
        Task::Segmentation => dice(&foreground(&pred), &foreground(&split.labels))?,
    })
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub network: Network,
    pub log: Vec<TrainRow>,
}

/// Trains the uncompressed network with plain cross entropy.
pub fn train_reference(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<Reference> {
    let mut net = cfg.architecture.build(dataset, seed)?;
    let loss = LossConfig::new(&[LossTerm::Ce])?;
    let mut weighting = Weighting::new(Scheme::Uniform, &loss.terms, WeightingParams::default(), seed)?;
    let mut shuffle = SeededRng::new(seed, Stream::Shuffle);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    fit_with(
        &mut net,
        &dataset.train,
        &cfg.train,
        Objective {
            loss: &loss,
            weighting: &mut weighting,
            teacher: None,
            group_lambda: 0.0,
        },
        &mut shuffle,
        |e, n| {
            log.push(TrainRow {
                epoch: e.epoch,
                lr: e.lr,
                loss: e.loss,
                train_metric: quality_core(n, &dataset.train, dataset.task)?,
                eval_metric: quality_core(n, &dataset.eval, dataset.task)?,
            });
            Ok(())
        },
    )?;
    Ok(Reference { network: net, log })
}

fn quality_core(net: &Network, split: &Split, task: Task) -> compalign_core::Result<f64> {
    quality(net, split, task).map_err(|e| match e {
        Error::Core(c) => c,
        other => compalign_core::Error::Domain(other.to_string()),
    })
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub network: Network,
    pub steps: Vec<StepRow>,
    pub fold: Option<FoldSummary>,
}

/// Compresses `reference` with the cell's loss subset and weighting scheme.
pub fn compress(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    reference: &Network,
    cell: &Cell,
    seed: u64,
) -> Result<Compressed> {
    let finetune = FineTune {
        schedule: cfg.finetune_schedule().clone(),
        loss: cfg.losses.loss_config(&cell.losses)?,
        scheme: cell.scheme,
        weighting: cfg.weighting,
    };
    let plan = &cfg.compression;
    let eval = Some(&dataset.eval);
    Ok(match plan.method {
        Method::Magnitude => {
            let (network, logs) = rewind_compress(reference, plan, &finetune, &dataset.train, eval, seed)?;
            Compressed {
                network,
                steps: logs.iter().map(StepRow::from).collect(),
                fold: None,
            }
        }
        Method::GroupSparsity => {
            let r = group_sparsity_compress(reference, plan, &finetune, &dataset.train, eval, seed)?;
            Compressed {
                network: r.network,
                steps: r.logs.iter().map(StepRow::from).collect(),
                fold: Some(r.fold),
            }
        }
    })
}

pub fn report_options(cfg: &ExperimentConfig) -> ReportOptions {
    ReportOptions {
        attribution_samples: cfg.evaluation.attribution_samples,
        iou_mode: cfg.evaluation.iou_mode,
    }
}

pub fn evaluate(
    reference: &Network,
    compressed: &Network,
    dataset: &Dataset,
    options: &ReportOptions,
) -> Result<MisalignmentReport> {
    Ok(build_report(reference, compressed, &dataset.eval, dataset.classes, options)?)
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub seed: u64,
    /// FNV-1a hash of the reference checkpoint this cell compressed.
    pub reference_hash: Option<u64>,
    pub result: std::result::Result<MisalignmentReport, String>,
    pub steps: Vec<StepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub losses: String,
    pub scheme: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub sparsity: Option<f64>,
    pub accuracy_reference: Option<f64>,
    pub accuracy_compressed: Option<f64>,
    pub cie: Option<usize>,
    pub cie_u: Option<usize>,
    pub cip: Option<usize>,
    pub cip_u: Option<usize>,
    pub gap_reference: Option<f64>,
    pub gap_compressed: Option<f64>,
    pub mean_iou: Option<f64>,
    pub dice_reference: Option<f64>,
    pub dice_compressed: Option<f64>,
}

impl SummaryRow {
    pub fn from_outcome(o: &CellOutcome) -> Self {
        let mut row = SummaryRow {
            cell: o.cell.name(),
            losses: o.cell.losses_name(),
            scheme: o.cell.scheme.name().to_string(),
            seed: o.seed,
            status: "ok".into(),
            error: None,
            sparsity: None,
            accuracy_reference: None,
            accuracy_compressed: None,
            cie: None,
            cie_u: None,
            cip: None,
            cip_u: None,
            gap_reference: None,
            gap_compressed: None,
            mean_iou: None,
            dice_reference: None,
            dice_compressed: None,
        };
        match &o.result {
            Ok(r) => {
                row.sparsity = Some(r.sparsity_compressed);
                row.accuracy_reference = Some(r.accuracy_reference);
                row.accuracy_compressed = Some(r.accuracy_compressed);
                row.cie = Some(r.cie_count);
                row.cie_u = Some(r.cie_u_count);
                row.cip = r.cip.as_ref().map(|c| c.count);
                row.cip_u = r.cip.as_ref().map(|c| c.u_count);
                row.gap_reference = Some(r.fairness.gap_reference);
                row.gap_compressed = Some(r.fairness.gap_compressed);
                row.mean_iou = Some(r.mean_iou);
                row.dice_reference = r.dice_reference;
                row.dice_compressed = r.dice_compressed;
            }
            Err(e) => {
                row.status = "error".into();
                row.error = Some(e.clone());
            }
        }
        row
    }

    /// The metrics summarized in the aggregate table.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("sparsity", self.sparsity),
            ("accuracy_compressed", self.accuracy_compressed),
            ("cie", self.cie.map(|v| v as f64)),
            ("cie_u", self.cie_u.map(|v| v as f64)),
            ("cip", self.cip.map(|v| v as f64)),
            ("gap_compressed", self.gap_compressed),
            ("mean_iou", self.mean_iou),
            ("dice_compressed", self.dice_compressed),
        ]
    }
}

/// Seed-wise spread of one metric in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: String,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of nothing");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregates successful rows per cell, in first-appearance order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.cell.as_str()) {
            order.push(&r.cell);
        }
    }
    let mut out = Vec::new();
    for cell in order {
        let mine: Vec<&SummaryRow> = rows.iter().filter(|r| r.cell == cell).collect();
        for (k, (metric, _)) in mine[0].metrics().iter().enumerate() {
            let values: Vec<f64> = mine.iter().filter_map(|r| r.metrics()[k].1).collect();
            if values.is_empty() {
                continue;
            }
            out.push(AggregateRow {
                cell: cell.to_string(),
                metric: metric.to_string(),
                n: values.len(),
                median: median(&values),
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub outcomes: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
    pub aggregate: Vec<AggregateRow>,
    /// `<out>/<experiment>` when files were written.
    pub dir: Option<PathBuf>,
}

impl ExperimentOutput {
    pub fn outcome(&self, cell: &str, seed: u64) -> Option<&CellOutcome> {
        self.outcomes.iter().find(|o| o.cell.name() == cell && o.seed == seed)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn run_in_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Runs every (cell, seed) of the grid. Each seed trains one reference that
/// all cells of that seed compress. Failed cells are recorded and the rest
/// continue. With `out`, writes `<out>/<name>/<cell>/<seed>/report.json`,
/// per-step logs, `summary.csv` and `aggregate.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, threads: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dataset = cfg.dataset.generate()?;
    let dir = out.map(|o| o.join(&cfg.name));
    if let Some(d) = &dir {
        write_json(&d.join("config.json"), cfg)?;
    }
    let grid = cells(cfg);
    let options = report_options(cfg);

    let outcomes = run_in_pool(threads, || {
        let references: Vec<std::result::Result<(Network, u64), String>> = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let r = train_reference(cfg, &dataset, seed).map_err(|e| format!("reference training: {e}"))?;
                if let Some(d) = &dir {
                    let rd = d.join("reference").join(seed.to_string());
                    save_checkpoint(&r.network, &rd.join("reference.acmp")).map_err(|e| e.to_string())?;
                    write_csv(&rd.join("train_log.csv"), &r.log).map_err(|e| e.to_string())?;
                }
                let hash = fnv1a(&encode_checkpoint(&r.network));
                Ok((r.network, hash))
            })
            .collect();

        let jobs: Vec<(usize, &Cell)> = (0..cfg.seeds.len()).flat_map(|s| grid.iter().map(move |c| (s, c))).collect();
        jobs.par_iter()
            .map(|&(s, cell)| {
                let seed = cfg.seeds[s];
                let mut steps = Vec::new();
                let reference_hash = references[s].as_ref().ok().map(|r| r.1);
                let result = (|| -> std::result::Result<MisalignmentReport, String> {
                    let (reference, _) = references[s].as_ref().map_err(Clone::clone)?;
                    let c = compress(cfg, &dataset, reference, cell, seed).map_err(|e| e.to_string())?;
                    steps = c.steps.clone();
                    let report = evaluate(reference, &c.network, &dataset, &options).map_err(|e| e.to_string())?;
                    if let Some(d) = &dir {
                        let cd = d.join(cell.name()).join(seed.to_string());
                        write_report_bundle(&cd, &report).map_err(|e| e.to_string())?;
                        write_csv(&cd.join("steps.csv"), &c.steps).map_err(|e| e.to_string())?;
                        save_checkpoint(&c.network, &cd.join("compressed.acmp")).map_err(|e| e.to_string())?;
                        if let Some(f) = &c.fold {
                            write_json(&cd.join("fold.json"), f).map_err(|e| e.to_string())?;
                        }
                    }
                    Ok(report)
                })();
                CellOutcome {
                    cell: cell.clone(),
                    seed,
                    reference_hash,
                    result,
                    steps,
                }
            })
            .collect::<Vec<_>>()
    })?;

    let summary: Vec<SummaryRow> = outcomes.iter().map(SummaryRow::from_outcome).collect();
    let aggregate = aggregate(&summary);
    if let Some(d) = &dir {
        write_csv(&d.join("summary.csv"), &summary)?;
        write_csv(&d.join("aggregate.csv"), &aggregate)?;
    }
    Ok(ExperimentOutput {
        outcomes,
        summary,
        aggregate,
        dir,
    })
}
