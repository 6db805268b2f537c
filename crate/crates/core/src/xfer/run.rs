use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::distill::{distill_checkpoints, DistillOptions};
use crate::error::{Error, Result};
use crate::nn::spec::parse_stages;
use crate::nn::train::{DEFAULT_SCHEDULE_PERIOD, HistoryRow};
use crate::nn::{build_model, evaluate, fit, freeze_except_head, replace_head, FitOptions, ModelSpec, TrainConfig};
use crate::pool::parallel_map;
use crate::xfer::dataset::Dataset;

/// Tuning learning rates tried when none are given.
pub const DEFAULT_LR_GRID: [f64; 5] = [0.03, 0.01, 0.003, 0.001, 0.0003];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Fine,
    Deep,
    Distill,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Fine => "fine",
            Stage::Deep => "deep",
            Stage::Distill => "distill",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fine-tuning trains only the head; deep-tuning trains everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMode {
    Fine,
    Deep,
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(TuneMode::Fine),
            "deep" => Ok(TuneMode::Deep),
            _ => Err(Error::InvalidArgument(format!("unknown tuning mode '{s}' (fine|deep)"))),
        }
    }
}

impl From<TuneMode> for Stage {
    fn from(m: TuneMode) -> Self {
        match m {
            TuneMode::Fine => Stage::Fine,
            TuneMode::Deep => Stage::Deep,
        }
    }
}

/// Encoder topology; the input size and head come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub stem: usize,
    /// `<channels>x<blocks>s<stride>` per stage, comma separated.
    pub stages: String,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            stem: 16,
            stages: "16x2s1,32x2s2,64x2s2".into(),
        }
    }
}

impl ModelShape {
    pub fn to_spec(&self, input: (usize, usize, usize), class_count: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input,
            stem: self.stem,
            stages: parse_stages(&self.stages)?,
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub lr: f64,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub test_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub source: String,
    pub target: String,
    pub stage: Stage,
    /// Trials at the selected learning rate.
    pub trials: Vec<TrialResult>,
    pub mean: f64,
    pub stdev: f64,
    pub selected_lr: f64,
    /// Every trial of every learning rate, in grid order.
    pub candidates: Vec<TrialResult>,
    /// Index into `candidates` of the selected checkpoint.
    pub best_candidate: usize,
    pub best_ckpt: Option<String>,
    pub accuracy_kind: String,
    pub meta: BTreeMap<String, String>,
}

impl RunResult {
    pub fn recompute_stats(&self) -> (f64, f64) {
        let v: Vec<f64> = self.trials.iter().map(|t| t.test_top1).collect();
        mean_stdev(&v)
    }
}

/// Mean and sample standard deviation (`n - 1`); the deviation of a single
/// value is 0.
pub fn mean_stdev(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone)]
pub struct TrialHistory {
    pub seed: u64,
    pub lr: f64,
    pub rows: Vec<HistoryRow>,
}

/// A finished run: its summary, selected weights and per-trial histories.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub best: Checkpoint,
    pub histories: Vec<TrialHistory>,
}

impl RunOutput {
    /// Writes the selected checkpoint and records its path in the result.
    pub fn save_best(&mut self, path: &Path) -> Result<()> {
        crate::checkpoint::write_checkpoint(&self.best, path)?;
        self.result.best_ckpt = Some(path.display().to_string());
        Ok(())
    }
}

pub fn write_history_csv(path: &Path, histories: &[TrialHistory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "lr", "epoch", "epoch_lr", "train_loss", "val_loss", "val_top1"])?;
    for h in histories {
        for r in &h.rows {
            w.write_record([
                h.seed.to_string(),
                h.lr.to_string(),
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_top1.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

struct Candidate {
    trial: TrialResult,
    best: Checkpoint,
    history: Vec<HistoryRow>,
    accuracy_kind: String,
}

/// Assembles a run from grid-ordered candidates: the candidate with the
/// highest validation accuracy wins (earliest on ties) and the trials that
/// share its learning rate are summarized.
fn select(source: &str, target: &str, stage: Stage, candidates: Vec<Candidate>) -> RunOutput {
    let mut best_i = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.trial.best_val_top1 > candidates[best_i].trial.best_val_top1 {
            best_i = i;
        }
    }
    let lr = candidates[best_i].trial.lr;
    let trials: Vec<TrialResult> = candidates.iter().filter(|c| c.trial.lr == lr).map(|c| c.trial.clone()).collect();
    let (mean, stdev) = mean_stdev(&trials.iter().map(|t| t.test_top1).collect::<Vec<_>>());
    let mut meta = BTreeMap::new();
    meta.insert("selection".into(), "highest validation top-1".into());
    meta.insert("tool_version".into(), crate::TOOL_VERSION.into());
    let result = RunResult {
        source: source.into(),
        target: target.into(),
        stage,
        trials,
        mean,
        stdev,
        selected_lr: lr,
        candidates: candidates.iter().map(|c| c.trial.clone()).collect(),
        best_candidate: best_i,
        best_ckpt: None,
        accuracy_kind: candidates[best_i].accuracy_kind.clone(),
        meta,
    };
    let histories = candidates
        .iter()
        .map(|c| TrialHistory {
            seed: c.trial.seed,
            lr: c.trial.lr,
            rows: c.history.clone(),
        })
        .collect();
    let mut best = candidates.into_iter().nth(best_i).expect("non-empty").best;
    best.meta.insert("source".into(), target.into());
    best.meta.insert("stage".into(), stage.to_string());
    RunOutput { result, best, histories }
}

fn run_candidate(
    init: Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
    freeze: bool,
) -> Result<Candidate> {
    let mask = freeze.then(|| freeze_except_head(&init));
    let out = fit(
        &init,
        &data.train,
        &data.val,
        FitOptions {
            cfg,
            lr0: lr,
            seed,
            mask: mask.as_ref(),
        },
    )?;
    let test = evaluate(&out.best, &data.test)?;
    Ok(Candidate {
        trial: TrialResult {
            seed,
            lr,
            best_epoch: out.best_epoch,
            best_val_top1: out.best_val_top1,
            test_top1: test.top1,
        },
        best: out.best,
        history: out.history,
        accuracy_kind: test.accuracy_kind,
    })
}

/// From-scratch training: `cfg.trials` trials seeded `cfg.seed + t`.
pub fn train_baseline(data: &Dataset, shape: &ModelShape, cfg: &TrainConfig, workers: usize) -> Result<RunOutput> {
    cfg.validate()?;
    data.require_splits()?;
    let spec = shape.to_spec(data.input_dims(), data.class_count())?;
    let results = parallel_map(cfg.trials, workers, |t| {
        let seed = cfg.seed + t as u64;
        let init = build_model(&spec, seed)?;
        run_candidate(init, data, cfg, cfg.lr0, seed, false)
    });
    let candidates = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = select(&data.name, &data.name, Stage::Baseline, candidates);
    out.result.meta.insert("arch_id".into(), spec.arch_id());
    Ok(out)
}

/// Re-heads `source` for the dataset and trains every `(lr, trial)` pair,
/// halving the rate every `cfg.schedule_period` epochs (20 if unset).
pub fn tune(
    source: &Checkpoint,
    source_name: &str,
    data: &Dataset,
    mode: TuneMode,
    cfg: &TrainConfig,
    lr_grid: &[f64],
    workers: usize,
) -> Result<RunOutput> {
    if lr_grid.is_empty() {
        return Err(Error::InvalidArgument("learning-rate grid is empty".into()));
    }
    cfg.validate()?;
    data.require_splits()?;
    if let Some(name) = source.first_non_finite() {
        return Err(Error::NonFiniteParameter(name.to_string()));
    }
    let spec = ModelSpec::from_arch_id(&source.arch_id, data.class_count())?;
    if spec.input != data.input_dims() {
        return Err(Error::Incompatible {
            layer: "input".into(),
            reason: format!("model expects {:?}, dataset '{}' has {:?}", spec.input, data.name, data.input_dims()),
        });
    }
    let cfg = TrainConfig {
        schedule_period: Some(cfg.schedule_period.unwrap_or(DEFAULT_SCHEDULE_PERIOD)),
        ..cfg.clone()
    };
    let jobs: Vec<(f64, u64)> = lr_grid
        .iter()
        .flat_map(|&lr| (0..cfg.trials).map(move |t| (lr, t as u64)))
        .collect();
    let results = parallel_map(jobs.len(), workers, |j| {
        let (lr, t) = jobs[j];
        let seed = cfg.seed + t;
        let init = replace_head(source, data.class_count(), seed)?;
        run_candidate(init, data, &cfg, lr, seed, mode == TuneMode::Fine)
    });
    let candidates = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = select(source_name, &data.name, mode.into(), candidates);
    out.result.meta.insert("lr_grid".into(), format!("{lr_grid:?}"));
    out.result.meta.insert("mode".into(), format!("{mode:?}").to_lowercase());
    Ok(out)
}

/// Baseline on `pre`, deep-tune onto `source`, then deep-tune onto `target`.
#[allow(clippy::too_many_arguments)]
pub fn two_stage(
    pre: &Dataset,
    source: &Dataset,
    target: &Dataset,
    shape: &ModelShape,
    baseline_cfg: &TrainConfig,
    tuning_cfg: &TrainConfig,
    lr_grid: &[f64],
    workers: usize,
) -> Result<RunOutput> {
    for d in [pre, source, target] {
        d.require_splits()?;
    }
    let first = train_baseline(pre, shape, baseline_cfg, workers)?;
    let second = tune(&first.best, &pre.name, source, TuneMode::Deep, tuning_cfg, lr_grid, workers)?;
    let chain = format!("{}>{}>{}", pre.name, source.name, target.name);
    let mut out = tune(&second.best, &chain, target, TuneMode::Deep, tuning_cfg, lr_grid, workers)?;
    out.result.meta.insert("chain".into(), chain);
    out.result.meta.insert("pretrain_mean".into(), first.result.mean.to_string());
    out.result.meta.insert("intermediate_mean".into(), second.result.mean.to_string());
    Ok(out)
}

/// Merges the sources, then deep-tunes the merge onto `target`.
pub fn distill_experiment(
    sources: &[Checkpoint],
    target: &Dataset,
    tuning_cfg: &TrainConfig,
    lr_grid: &[f64],
    workers: usize,
) -> Result<RunOutput> {
    let (merged, report) = distill_checkpoints(sources, DistillOptions { head_seed: tuning_cfg.seed })?;
    let name = report.sources.join("+");
    let mut out = tune(&merged, &name, target, TuneMode::Deep, tuning_cfg, lr_grid, workers)?;
    out.result.stage = Stage::Distill;
    out.best.meta.insert("stage".into(), Stage::Distill.to_string());
    out.result.meta.insert("distill.sources".into(), report.sources.join(","));
    out.result.meta.insert("distill.count".into(), sources.len().to_string());
    Ok(out)
}
