use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::nn::train::{DEFAULT_SCHEDULE_PERIOD, TrainConfig};
use crate::nn::OptimizerKind;
use crate::pool::parallel_map;
use crate::xfer::dataset::Dataset;
use crate::xfer::domain::{gen_domain, DomainSpec, MANIFEST_FILE};
use crate::xfer::run::{
    train_baseline, tune, write_history_csv, ModelShape, RunOutput, RunResult, Stage, TuneMode, DEFAULT_LR_GRID,
};

pub const RESULTS_DIR: &str = "results";
pub const HISTORY_DIR: &str = "history";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A dataset given either as an existing manifest or as a domain to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Manifest { manifest: PathBuf },
    Domain { domain: DomainSpec },
}

/// Default tuning setup: Adam-style optimizer with the step-halving schedule.
pub fn default_tuning_config() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adamw,
        schedule_period: Some(DEFAULT_SCHEDULE_PERIOD),
        ..TrainConfig::default()
    }
}

fn default_tuning() -> TrainConfig {
    default_tuning_config()
}

fn default_grid() -> Vec<f64> {
    DEFAULT_LR_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub baseline: TrainConfig,
    #[serde(default = "default_tuning")]
    pub tuning: TrainConfig,
    #[serde(default = "default_grid")]
    pub lr_grid: Vec<f64>,
    /// Seed for generated domains.
    #[serde(default)]
    pub domain_seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    /// Loads manifests and generates domains under `out_dir/domains`.
    pub fn materialize(&self, base_dir: &Path, out_dir: &Path) -> Result<Vec<Dataset>> {
        let mut out = Vec::with_capacity(self.datasets.len());
        for src in &self.datasets {
            let path = match src {
                DatasetSource::Manifest { manifest } => crate::standardize::manifest::resolve_path(
                    base_dir,
                    &manifest.to_string_lossy(),
                ),
                DatasetSource::Domain { domain } => {
                    let dir = out_dir.join("domains").join(&domain.name);
                    let manifest = dir.join(MANIFEST_FILE);
                    if !manifest.exists() {
                        gen_domain(domain, self.domain_seed, &dir)?;
                    }
                    manifest
                }
            };
            out.push(Dataset::load(&path)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub source: String,
    pub target: String,
    pub stage: Stage,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub datasets: Vec<String>,
    /// `cells[source][target]`; the diagonal holds baselines.
    pub cells: Vec<Vec<Cell>>,
}

impl TransferMatrix {
    pub fn diagonal(&self, target: usize) -> &Cell {
        &self.cells[target][target]
    }
}

pub fn result_file_name(source: &str, target: &str, stage: Stage) -> String {
    format!("{source}__{target}__{stage}.json")
}

#[derive(Debug, Clone)]
pub struct MatrixOptions<'a> {
    pub shape: &'a ModelShape,
    pub baseline: &'a TrainConfig,
    pub tuning: &'a TrainConfig,
    pub lr_grid: &'a [f64],
    pub mode: TuneMode,
    pub workers: usize,
    /// Reuse results already on disk.
    pub resume: bool,
}

fn load_previous(out_dir: &Path, file: &str, need_ckpt: bool) -> Option<(RunResult, Option<Checkpoint>)> {
    let result: RunResult = read_json(&out_dir.join(RESULTS_DIR).join(file)).ok()?;
    if !need_ckpt {
        return Some((result, None));
    }
    let ckpt = read_checkpoint(&out_dir.join(result.best_ckpt.as_ref()?)).ok()?;
    Some((result, Some(ckpt)))
}

fn persist(out_dir: &Path, run: &mut RunOutput, save_ckpt: bool) -> Result<()> {
    let r = &run.result;
    let stem = format!("{}__{}__{}", r.source, r.target, r.stage);
    if save_ckpt {
        let rel = format!("{CHECKPOINT_DIR}/{stem}.hktw");
        run.save_best(&out_dir.join(&rel))?;
        run.result.best_ckpt = Some(rel);
    }
    write_history_csv(&out_dir.join(HISTORY_DIR).join(format!("{stem}.csv")), &run.histories)?;
    let r = &run.result;
    write_json_atomic(&out_dir.join(RESULTS_DIR).join(result_file_name(&r.source, &r.target, r.stage)), r)
}

/// Trains a baseline per dataset, then tunes every baseline onto every other
/// dataset. Failed cells are recorded, never fatal. Results, histories and
/// baseline checkpoints are written under `out_dir` as they finish; the
/// recorded checkpoint paths are relative to `out_dir`.
pub fn transfer_matrix(datasets: &[Dataset], opts: &MatrixOptions<'_>, out_dir: &Path) -> Result<TransferMatrix> {
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a transfer matrix needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::InvalidArgument(format!("dataset name '{n}' appears twice")));
        }
    }
    let cell_stage: Stage = opts.mode.into();

    let baselines = parallel_map(datasets.len(), opts.workers, |i| -> Result<(RunResult, Checkpoint)> {
        let d = &datasets[i];
        let file = result_file_name(&d.name, &d.name, Stage::Baseline);
        if opts.resume {
            if let Some((r, Some(c))) = load_previous(out_dir, &file, true) {
                return Ok((r, c));
            }
        }
        let mut run = train_baseline(d, opts.shape, opts.baseline, 1)?;
        persist(out_dir, &mut run, true)?;
        Ok((run.result, run.best))
    });

    let n = datasets.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).collect();
    let transfers = parallel_map(pairs.len(), opts.workers, |j| -> Result<RunResult> {
        let (s, t) = pairs[j];
        let file = result_file_name(&names[s], &names[t], cell_stage);
        if opts.resume {
            if let Some((r, _)) = load_previous(out_dir, &file, false) {
                return Ok(r);
            }
        }
        let source = match &baselines[s] {
            Ok((_, ckpt)) => ckpt,
            Err(e) => return Err(Error::Data(format!("source baseline '{}' failed: {e}", names[s]))),
        };
        let mut run = tune(source, &names[s], &datasets[t], opts.mode, opts.tuning, opts.lr_grid, 1)?;
        persist(out_dir, &mut run, false)?;
        Ok(run.result)
    });

    let cell = |s: usize, t: usize, stage: Stage, r: std::result::Result<RunResult, String>| Cell {
        source: names[s].clone(),
        target: names[t].clone(),
        stage,
        error: r.as_ref().err().cloned(),
        result: r.ok(),
    };
    let mut cells: Vec<Vec<Option<Cell>>> = vec![vec![None; n]; n];
    for (i, b) in baselines.into_iter().enumerate() {
        cells[i][i] = Some(cell(i, i, Stage::Baseline, b.map(|(r, _)| r).map_err(|e| e.to_string())));
    }
    for ((s, t), r) in pairs.into_iter().zip(transfers) {
        cells[s][t] = Some(cell(s, t, cell_stage, r.map_err(|e| e.to_string())));
    }
    Ok(TransferMatrix {
        datasets: names,
        cells: cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.expect("every cell filled")).collect())
            .collect(),
    })
}
