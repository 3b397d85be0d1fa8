//! Experiment runner behind the `unicon` binary: dataset generation, full
//! training runs, the four-arm ablation and long-format reports.
//!
//! Every output file is written to a temporary sibling and renamed into
//! place, so an interrupted run never leaves a truncated file behind.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Switch};
use crate::datasets::{make_blob_split, DatasetError, LabeledDataset};
use crate::metrics::{
    accuracy, class_histogram, pseudo_label_recall, roc_auc, selection_precision_recall,
    write_metrics_csv, EpochMetrics, MetricsError, SelectionMetrics,
};
use crate::model::{ModelError, TwinNetworks};
use crate::rng::{derive_seed, tags};
use crate::selection::{DivergenceReport, SelectionError, SelectionResult};
use crate::ssl::{self, EpochOutcome, Phase, SslError, Trainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read {}: {message}", path.display())]
    Read { path: PathBuf, message: String },
    #[error("worker for arm `{0}` panicked")]
    Worker(String),
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> Result<(), RunError>,
) -> Result<(), RunError> {
    let wrap = |source| RunError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(wrap)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush().map_err(wrap)?;
    }
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

/// Noisy training set and clean test set for a config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset), RunError> {
    let (train, test) = make_blob_split(
        &cfg.dataset.blob_spec(),
        cfg.dataset.test_per_class,
        cfg.seed,
    )?;
    let noisy = cfg.noise_spec().apply(&train)?;
    Ok((noisy, test))
}

/// Written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_acc: f64,
    pub last_acc: f64,
    #[serde(rename = "final_R")]
    pub final_r: Option<f64>,
    pub final_auc: Option<f64>,
}

/// A selection with the divergences it was made from.
#[derive(Clone, Debug)]
pub struct SelectionSnapshot {
    pub selection: SelectionResult,
    pub report: DivergenceReport,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub twins: TwinNetworks,
    pub summary: Summary,
    /// Per SSL epoch (one-based) the selections of both networks. Kept only
    /// when requested.
    pub selections: Vec<(usize, [SelectionSnapshot; 2])>,
    /// Both networks' selections from the last SSL epoch.
    pub final_selections: Option<[SelectionResult; 2]>,
}

fn epoch_metrics(
    cfg: &ExperimentConfig,
    twins: &TwinNetworks,
    outcome: &EpochOutcome,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<EpochMetrics, RunError> {
    let selection = match &outcome.halves {
        None => None,
        Some([first, _]) => {
            let sel = &first.selection;
            let pr = selection_precision_recall(sel, train);
            let auc = match roc_auc(&first.report, train) {
                Ok(v) => Some(v),
                Err(MetricsError::UndefinedAuc { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let pseudo = if sel.noisy_indices.is_empty() {
                None
            } else {
                Some(pseudo_label_recall(
                    twins,
                    train,
                    &sel.noisy_indices,
                    cfg.hyperparams.temperature,
                    &cfg.augmentation,
                    derive_seed(cfg.seed, &[tags::EVAL, outcome.epoch as u64]),
                )?)
            };
            Some(SelectionMetrics {
                filter_rate: sel.filter_rate,
                d_cutoff: sel.d_cutoff.unwrap_or(f64::NAN),
                precision: pr.precision,
                recall: pr.recall,
                roc_auc: auc,
                pseudo_recall: pseudo,
                selected_per_class: class_histogram(sel, train.given_labels(), train.num_classes()),
            })
        }
    };
    let l = outcome.losses;
    Ok(EpochMetrics {
        epoch: outcome.epoch + 1,
        phase: outcome.phase.as_str().to_string(),
        selection,
        test_accuracy: accuracy(twins, test.features(), test.true_labels())?,
        train_accuracy_on_given: accuracy(twins, train.features(), train.given_labels())?,
        loss_lx: l.lx,
        loss_lu: l.lu,
        loss_reg: l.reg,
        loss_lc: l.lc,
    })
}

/// Trains on prepared data and collects one metrics row per epoch.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    keep_selections: bool,
) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let twins = TwinNetworks::init(cfg.architecture(), derive_seed(cfg.seed, &[tags::INIT]))?;
    let mut trainer = Trainer::new(
        twins,
        cfg.effective_hyperparams(),
        cfg.train_options(),
        cfg.seed,
    )?;
    let mut metrics = Vec::with_capacity(cfg.hyperparams.total_epochs);
    let mut selections = Vec::new();
    let mut final_selections = None;
    ssl::run::<RunError, _>(&mut trainer, train, |twins, outcome| {
        let row = epoch_metrics(cfg, twins, outcome, train, test)?;
        log::info!(
            "epoch {:>3} {:<6} test_acc {:.4} train_acc_given {:.4}{}",
            row.epoch,
            row.phase,
            row.test_accuracy,
            row.train_accuracy_on_given,
            row.selection
                .as_ref()
                .map(|s| format!(
                    " R {:.3} auc {:.4}",
                    s.filter_rate,
                    s.roc_auc.unwrap_or(f64::NAN)
                ))
                .unwrap_or_default()
        );
        metrics.push(row);
        if let Some([a, b]) = &outcome.halves {
            if keep_selections {
                let snap = |h: &ssl::HalfEpoch| SelectionSnapshot {
                    selection: h.selection.clone(),
                    report: h.report.clone(),
                };
                selections.push((outcome.epoch + 1, [snap(a), snap(b)]));
            }
            final_selections = Some([a.selection.clone(), b.selection.clone()]);
        }
        Ok(())
    })?;
    debug_assert!(metrics
        .iter()
        .all(|m| m.phase != Phase::Ssl.as_str() || m.selection.is_some()));
    let summary = summarize(&metrics);
    Ok(RunOutput {
        metrics,
        twins: trainer.into_twins(),
        summary,
        selections,
        final_selections,
    })
}

pub fn summarize(metrics: &[EpochMetrics]) -> Summary {
    let best_acc = metrics
        .iter()
        .map(|m| m.test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let last = metrics.last();
    let sel = last.and_then(|m| m.selection.as_ref());
    Summary {
        best_acc: if metrics.is_empty() { 0.0 } else { best_acc },
        last_acc: last.map_or(0.0, |m| m.test_accuracy),
        final_r: sel.map(|s| s.filter_rate),
        final_auc: sel.and_then(|s| s.roc_auc),
    }
}

/// Output options shared by the commands.
#[derive(Clone, Debug, Default)]
pub struct CommandOptions {
    pub export_selection: bool,
}

fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<(), RunError> {
    write_atomic(path, |w| Ok(ds.write_csv(w)?))
}

/// Writes `dataset.csv` (noisy training set) and `test.csv`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let (train, test) = prepare_data(cfg)?;
    write_dataset(&cfg.output_dir.join("dataset.csv"), &train)?;
    write_dataset(&cfg.output_dir.join("test.csv"), &test)?;
    Ok(())
}

fn write_run_outputs(
    dir: &Path,
    out: &RunOutput,
    train: &LabeledDataset,
    export_selection: bool,
) -> Result<(), RunError> {
    write_atomic(&dir.join("metrics.csv"), |w| {
        Ok(write_metrics_csv(&out.metrics, w)?)
    })?;
    write_atomic(&dir.join("checkpoint.bin"), |w| Ok(out.twins.save(w)?))?;
    write_atomic(&dir.join("summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &out.summary).map_err(|e| RunError::Write {
            path: dir.join("summary.json"),
            source: e.into(),
        })?;
        writeln!(w).map_err(|source| RunError::Write {
            path: dir.join("summary.json"),
            source,
        })
    })?;
    if export_selection {
        for (epoch, pair) in &out.selections {
            for (k, snap) in pair.iter().enumerate() {
                let path = dir
                    .join("selection")
                    .join(format!("epoch_{epoch:03}_net{}.csv", k + 1));
                write_atomic(&path, |w| {
                    Ok(snap
                        .selection
                        .write_csv(&snap.report, train.given_labels(), w)?)
                })?;
            }
        }
    }
    Ok(())
}

/// Full training run: `metrics.csv`, `checkpoint.bin`, `summary.json`, and
/// per-epoch selections under `selection/` when exporting.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<RunOutput, RunError> {
    let (train, test) = prepare_data(cfg)?;
    let out = run_experiment(cfg, &train, &test, opts.export_selection)?;
    write_run_outputs(&cfg.output_dir, &out, &train, opts.export_selection)?;
    Ok(out)
}

/// Names of the ablation arms, in output order.
pub const ABLATION_ARMS: [&str; 4] = ["full", "no_balancing", "no_contrastive", "no_ensemble"];

/// The config of one arm: the full pipeline with at most one switch off.
pub fn arm_config(cfg: &ExperimentConfig, arm: &str) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.ablation.balancing = Switch::On;
    c.ablation.contrastive = Switch::On;
    c.ablation.ensemble = Switch::On;
    match arm {
        "no_balancing" => c.ablation.balancing = Switch::Off,
        "no_contrastive" => c.ablation.contrastive = Switch::Off,
        "no_ensemble" => c.ablation.ensemble = Switch::Off,
        _ => {}
    }
    c.output_dir = cfg.output_dir.join(arm);
    c
}

/// `max / min` of a histogram; infinite when a class is empty.
pub fn skew_ratio(histogram: &[usize]) -> f64 {
    let max = histogram.iter().copied().max().unwrap_or(0) as f64;
    let min = histogram.iter().copied().min().unwrap_or(0) as f64;
    if min == 0.0 {
        if max == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        max / min
    }
}

/// Result of one ablation arm.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: &'static str,
    pub output: RunOutput,
    /// Per given class, the selections of both networks at the last epoch
    /// added together.
    pub final_histogram: Vec<usize>,
}

/// Runs the four arms on one shared dataset, each in its own thread and
/// output directory, then writes `ablation.csv`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    opts: &CommandOptions,
) -> Result<Vec<ArmResult>, RunError> {
    let (train, test) = prepare_data(cfg)?;
    let results: Vec<Result<ArmResult, RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ABLATION_ARMS
            .iter()
            .map(|&arm| {
                let arm_cfg = arm_config(cfg, arm);
                let (train, test) = (&train, &test);
                let handle = scope.spawn(move || -> Result<ArmResult, RunError> {
                    let output = run_experiment(&arm_cfg, train, test, opts.export_selection)?;
                    write_run_outputs(&arm_cfg.output_dir, &output, train, opts.export_selection)?;
                    let mut hist = vec![0; train.num_classes()];
                    for sel in output.final_selections.iter().flatten() {
                        let h = class_histogram(sel, train.given_labels(), train.num_classes());
                        hist.iter_mut().zip(h).for_each(|(a, b)| *a += b);
                    }
                    Ok(ArmResult {
                        arm,
                        output,
                        final_histogram: hist,
                    })
                });
                (arm, handle)
            })
            .collect();
        handles
            .into_iter()
            .map(|(arm, h)| {
                h.join()
                    .unwrap_or_else(|_| Err(RunError::Worker(arm.to_string())))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_atomic(&cfg.output_dir.join("ablation.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        let header = [
            "arm",
            "best_acc",
            "last_acc",
            "final_R",
            "final_auc",
            "final_histogram",
            "skew_ratio",
        ];
        let write = |csv: &mut csv::Writer<_>, rec: Vec<String>| {
            csv.write_record(rec).map_err(MetricsError::from)
        };
        write(&mut csv, header.iter().map(|s| s.to_string()).collect())?;
        for r in &results {
            let s = &r.output.summary;
            let hist: Vec<String> = r.final_histogram.iter().map(usize::to_string).collect();
            write(
                &mut csv,
                vec![
                    r.arm.to_string(),
                    s.best_acc.to_string(),
                    s.last_acc.to_string(),
                    s.final_r.map(|v| v.to_string()).unwrap_or_default(),
                    s.final_auc.map(|v| v.to_string()).unwrap_or_default(),
                    hist.join(" "),
                    skew_ratio(&r.final_histogram).to_string(),
                ],
            )?;
        }
        csv.flush().map_err(|e| MetricsError::Csv(e.into()))?;
        Ok(())
    })?;
    Ok(results)
}

fn read_metrics(path: &Path) -> Result<Vec<BTreeMap<String, String>>, RunError> {
    let err = |message: String| RunError::Read {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec.map_err(|e: csv::Error| err(e.to_string()))?);
    }
    Ok(rows)
}

/// Collects `metrics.csv` from `dir` and from each arm subdirectory into a
/// long-format `report.csv` with columns `run,epoch,phase,metric,value`.
/// Empty cells are skipped.
pub fn cmd_report(dir: &Path) -> Result<usize, RunError> {
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    let top = dir.join("metrics.csv");
    if top.is_file() {
        sources.push(("run".to_string(), top));
    }
    for arm in ABLATION_ARMS {
        let p = dir.join(arm).join("metrics.csv");
        if p.is_file() {
            sources.push((arm.to_string(), p));
        }
    }
    if sources.is_empty() {
        return Err(RunError::Read {
            path: dir.to_path_buf(),
            message: "no metrics.csv found".to_string(),
        });
    }
    let mut rows = Vec::new();
    for (run, path) in &sources {
        for row in read_metrics(path)? {
            for column in crate::metrics::CSV_HEADER.iter().skip(2) {
                if let Some(value) = row.get(*column).filter(|v| !v.is_empty()) {
                    rows.push([
                        run.clone(),
                        row["epoch"].clone(),
                        row["phase"].clone(),
                        column.to_string(),
                        value.clone(),
                    ]);
                }
            }
        }
    }
    let count = rows.len();
    write_atomic(&dir.join("report.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| RunError::Metrics(MetricsError::Csv(e));
        csv.write_record(["run", "epoch", "phase", "metric", "value"])
            .map_err(to_err)?;
        for r in &rows {
            csv.write_record(r).map_err(to_err)?;
        }
        csv.flush().map_err(|e| to_err(e.into()))?;
        Ok(())
    })?;
    Ok(count)
}
