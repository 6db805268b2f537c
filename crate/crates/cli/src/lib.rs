//! Command-line front end for the histokt toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 data or
//! validation error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use histokt::distill::{distill_checkpoints, DistillOptions};
use histokt::io::{sha256_file, write_atomic, write_json_atomic};
use histokt::nn::gradcheck::grad_check_report;
use histokt::nn::train::{
    DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LR0, DEFAULT_MOMENTUM, DEFAULT_SCHEDULE_PERIOD, DEFAULT_TRIALS,
    DEFAULT_WEIGHT_DECAY,
};
use histokt::nn::{Batch, Mode, OptimizerKind, Targets, TrainConfig};
use histokt::pool::resolve_workers;
use histokt::rng::Stream;
use histokt::standardize::contrast::{DEFAULT_HI_PCT, DEFAULT_LO_PCT, DEFAULT_SPAN_FRAC};
use histokt::standardize::pipeline::{DEFAULT_OVERLAP, DEFAULT_PATCH, DEFAULT_TARGET_UM};
use histokt::standardize::{standardize_dataset, DatasetManifest, Split, StandardizeParams};
use histokt::xfer::matrix::{MatrixOptions, CHECKPOINT_DIR};
use histokt::xfer::run::write_history_csv;
use histokt::xfer::{
    emit_report, export_embeddings, gen_domain, train_baseline, transfer_matrix, tune, two_stage, Dataset,
    DomainSpec, ExperimentConfig, ModelShape, RunOutput, TuneMode, DEFAULT_LR_GRID,
};
use histokt::{read_checkpoint, write_checkpoint, Error, Tensor, TOOL_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const PROVENANCE_FILE: &str = "run.json";

const DEFAULT_GRID_STR: &str = "0.03,0.01,0.003,0.001,0.0003";

#[derive(Debug, Parser, Serialize)]
#[command(name = "histokt", version, about = "Histopathology knowledge-transfer toolkit")]
pub struct Cli {
    /// Base seed for initialization, shuffling and generation [default: 0]
    #[arg(long, global = true, env = "HISTOKT_SEED")]
    pub seed: Option<u64>,
    /// Worker threads [default: 1; all cores for `matrix`]
    #[arg(long, global = true, env = "HISTOKT_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Rescale, tile and filter the images of a dataset manifest
    Standardize(StandardizeArgs),
    /// Generate a synthetic patch domain from a JSON spec
    GenDomain(GenDomainArgs),
    /// Train baselines from random initialization
    Train(TrainArgs),
    /// Fine- or deep-tune a checkpoint on a dataset
    Tune(TuneArgs),
    /// Merge two or more checkpoints by SVD weight distillation
    Distill(DistillArgs),
    /// Run a source x target transfer matrix from an experiment config
    Matrix(MatrixArgs),
    /// Pretrain, tune onto a source, then tune onto a target
    TwoStage(TwoStageArgs),
    /// Export post-pooling features of a dataset split as CSV
    Embed(EmbedArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct StandardizeArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Target resolution in microns per pixel
    #[arg(long, default_value_t = DEFAULT_TARGET_UM)]
    pub target_um: f64,
    /// Patch side in pixels
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
    /// Fractional overlap between neighbouring patches
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Lower luma percentile of the contrast filter
    #[arg(long, default_value_t = DEFAULT_LO_PCT)]
    pub lo_pct: f64,
    /// Upper luma percentile of the contrast filter
    #[arg(long, default_value_t = DEFAULT_HI_PCT)]
    pub hi_pct: f64,
    /// Patches whose percentile span covers less than this fraction of 0-255 are dropped
    #[arg(long, default_value_t = DEFAULT_SPAN_FRAC)]
    pub min_span: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDomainArgs {
    /// Domain spec (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Stem width
    #[arg(long, default_value_t = ModelShape::default().stem)]
    pub stem: usize,
    /// Residual stages as <channels>x<blocks>s<stride>, comma separated
    #[arg(long, default_value_t = ModelShape::default().stages)]
    pub stages: String,
}

impl ModelArgs {
    fn shape(&self) -> ModelShape {
        ModelShape {
            stem: self.stem,
            stages: self.stages.clone(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    /// Momentum (sgdm)
    #[arg(long, default_value_t = DEFAULT_MOMENTUM)]
    pub momentum: f64,
    /// Weight decay
    #[arg(long, default_value_t = DEFAULT_WEIGHT_DECAY)]
    pub weight_decay: f64,
    /// Epochs per trial
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Mini-batch size
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Trials, seeded seed, seed+1, ...
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
}

impl HyperArgs {
    fn config(&self, optimizer: OptimizerKind, lr0: f64, seed: u64, schedule_period: Option<usize>) -> TrainConfig {
        TrainConfig {
            optimizer,
            lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            trials: self.trials,
            schedule_period,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Initial learning rate
    #[arg(long, default_value_t = DEFAULT_LR0)]
    pub lr0: f64,
    /// Optimizer: sgdm or adamw
    #[arg(long, default_value_t = OptimizerKind::Sgdm)]
    pub optimizer: OptimizerKind,
    /// Halve the learning rate every N epochs [default: constant rate]
    #[arg(long)]
    pub schedule_period: Option<usize>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuningArgs {
    /// Learning rates to search, comma separated
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_GRID_STR)]
    pub lr_grid: Vec<f64>,
    /// Tuning optimizer: sgdm or adamw
    #[arg(long, default_value_t = OptimizerKind::Adamw)]
    pub tune_optimizer: OptimizerKind,
    /// Halve the tuning learning rate every N epochs
    #[arg(long, default_value_t = DEFAULT_SCHEDULE_PERIOD)]
    pub schedule_period: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneArgs {
    /// Source checkpoint (HKTW)
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Target dataset manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// fine: train the head only; deep: train every layer
    #[arg(long, default_value = "deep")]
    pub mode: TuneMode,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    /// Checkpoints to merge (at least 2)
    #[arg(long, num_args = 1..)]
    pub ckpts: Vec<PathBuf>,
    /// Merged checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer merge report (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MatrixArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Tuning mode of the off-diagonal cells
    #[arg(long, default_value = "deep")]
    pub mode: TuneMode,
    /// Skip cells whose result file already exists
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TwoStageArgs {
    /// Pretraining dataset manifest
    #[arg(long)]
    pub pretrain: PathBuf,
    /// Intermediate source dataset manifest
    #[arg(long)]
    pub source: PathBuf,
    /// Final target dataset manifest
    #[arg(long)]
    pub target: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining learning rate
    #[arg(long, default_value_t = DEFAULT_LR0)]
    pub lr0: f64,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// Checkpoint (HKTW)
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to embed: train, val or test
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Input side in pixels
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Class count
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Samples in the checked batch
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Batch-norm mode: eval or train
    #[arg(long, default_value = "eval", value_parser = parse_mode)]
    pub bn_mode: Mode,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write the report here (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (train|val|test)")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "eval" => Ok(Mode::Eval),
        "train" => Ok(Mode::Train),
        _ => Err(format!("unknown batch-norm mode '{s}' (eval|train)")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) | CliError::Lib(Error::InvalidArgument(_)) => EXIT_USAGE,
        CliError::Lib(Error::Io { .. } | Error::NonFiniteLoss(_)) => EXIT_RUNTIME,
        CliError::Lib(_) => EXIT_DATA,
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("histokt: {e}");
            exit_code(&e)
        }
    }
}

/// Rendered `--help` of a subcommand.
pub fn subcommand_help(name: &str) -> Option<String> {
    let mut cmd = Cli::command();
    cmd.build();
    cmd.find_subcommand_mut(name).map(|c| c.render_long_help().to_string())
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    tool_version: &'static str,
    command: &'a Command,
    seed: u64,
    workers: usize,
    inputs: Vec<InputHash>,
}

fn write_provenance(path: &Path, cli: &Cli, workers: usize, inputs: &[&Path]) -> CliResult {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let record = Provenance {
        tool: "histokt",
        tool_version: TOOL_VERSION,
        command: &cli.command,
        seed: cli.seed.unwrap_or(0),
        workers,
        inputs,
    };
    write_json_atomic(path, &record)?;
    Ok(())
}

/// Provenance path for a command whose output is a single file.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("histokt: {}", msg.as_ref());
}

fn config_json(cli: &Cli) -> String {
    serde_json::to_string(&cli.command).unwrap_or_default()
}

fn save_run(out: &Path, run: &mut RunOutput, cli: &Cli) -> CliResult {
    run.best.meta.insert("run.config".into(), config_json(cli));
    run.save_best(&out.join("best.hktw"))?;
    write_history_csv(&out.join("history.csv"), &run.histories)?;
    write_json_atomic(&out.join("result.json"), &run.result)?;
    log(format!(
        "{} {} -> {}: mean {:.4} stdev {:.4} over {} trials",
        run.result.stage,
        run.result.source,
        run.result.target,
        run.result.mean,
        run.result.stdev,
        run.result.trials.len()
    ));
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    let seed = cli.seed.unwrap_or(0);
    let workers = cli.workers.unwrap_or(1).max(1);
    match &cli.command {
        Command::Standardize(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let params = StandardizeParams {
                target_resolution_um: a.target_um,
                patch: a.patch,
                overlap_frac: a.overlap,
                lo_pct: a.lo_pct,
                hi_pct: a.hi_pct,
                frac: a.min_span,
            };
            let dir = a.manifest.parent().unwrap_or(Path::new("."));
            let (_, summary) = standardize_dataset(&manifest, dir, &a.out, &params, workers)?;
            let t = summary.totals();
            log(format!(
                "{} images, {} patches, {} kept, {} filtered, {} errors",
                t.images_in,
                t.patches_total,
                t.patches_kept,
                t.patches_filtered,
                summary.errors.len()
            ));
            write_provenance(&a.out.join(PROVENANCE_FILE), cli, workers, &[&a.manifest])
        }
        Command::GenDomain(a) => {
            let spec: DomainSpec = histokt::io::read_json(&a.spec)?;
            let m = gen_domain(&spec, seed, &a.out)?;
            log(format!("wrote {} images for domain '{}'", m.images.len(), m.name));
            write_provenance(&a.out.join(PROVENANCE_FILE), cli, workers, &[&a.spec])
        }
        Command::Train(a) => {
            let data = Dataset::load(&a.manifest)?;
            let cfg = a.hyper.config(a.optimizer, a.lr0, seed, a.schedule_period);
            let mut run = train_baseline(&data, &a.model.shape(), &cfg, workers)?;
            save_run(&a.out, &mut run, cli)?;
            write_provenance(&a.out.join(PROVENANCE_FILE), cli, workers, &[&a.manifest])
        }
        Command::Tune(a) => {
            let source = read_checkpoint(&a.ckpt)?;
            let data = Dataset::load(&a.manifest)?;
            let cfg = a.hyper.config(
                a.tuning.tune_optimizer,
                a.tuning.lr_grid.first().copied().unwrap_or(DEFAULT_LR_GRID[0]),
                seed,
                Some(a.tuning.schedule_period),
            );
            let name = source.meta.get("source").cloned().unwrap_or_else(|| stem(&a.ckpt));
            let mut run = tune(&source, &name, &data, a.mode, &cfg, &a.tuning.lr_grid, workers)?;
            save_run(&a.out, &mut run, cli)?;
            write_provenance(&a.out.join(PROVENANCE_FILE), cli, workers, &[&a.ckpt, &a.manifest])
        }
        Command::Distill(a) => {
            if a.ckpts.len() < 2 {
                return Err(CliError::Usage(format!(
                    "--ckpts: need ≥ 2 checkpoints to distill, got {}",
                    a.ckpts.len()
                )));
            }
            let ckpts = a
                .ckpts
                .iter()
                .map(|p| {
                    let mut c = read_checkpoint(p)?;
                    c.meta.entry("source".into()).or_insert_with(|| stem(p));
                    Ok(c)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let (mut merged, report) = distill_checkpoints(&ckpts, DistillOptions { head_seed: seed })?;
            merged.meta.insert("run.config".into(), config_json(cli));
            write_checkpoint(&merged, &a.out)?;
            if let Some(r) = &a.report {
                write_json_atomic(r, &report)?;
            }
            log(format!("merged {} checkpoints into {}", ckpts.len(), a.out.display()));
            let inputs: Vec<&Path> = a.ckpts.iter().map(PathBuf::as_path).collect();
            write_provenance(&sidecar(&a.out), cli, workers, &inputs)
        }
        Command::Matrix(a) => run_matrix(cli, a),
        Command::TwoStage(a) => {
            let pre = Dataset::load(&a.pretrain)?;
            let src = Dataset::load(&a.source)?;
            let tgt = Dataset::load(&a.target)?;
            let base_cfg = a.hyper.config(OptimizerKind::Sgdm, a.lr0, seed, None);
            let tune_cfg = a.hyper.config(
                a.tuning.tune_optimizer,
                a.lr0,
                seed,
                Some(a.tuning.schedule_period),
            );
            let mut run = two_stage(
                &pre,
                &src,
                &tgt,
                &a.model.shape(),
                &base_cfg,
                &tune_cfg,
                &a.tuning.lr_grid,
                workers,
            )?;
            save_run(&a.out, &mut run, cli)?;
            write_provenance(
                &a.out.join(PROVENANCE_FILE),
                cli,
                workers,
                &[&a.pretrain, &a.source, &a.target],
            )
        }
        Command::Embed(a) => {
            let ckpt = read_checkpoint(&a.ckpt)?;
            let data = Dataset::load(&a.manifest)?;
            let csv = export_embeddings(&ckpt, data.split(a.split))?;
            write_atomic(&a.out, &csv)?;
            write_provenance(&sidecar(&a.out), cli, workers, &[&a.ckpt, &a.manifest])
        }
        Command::Gradcheck(a) => {
            let spec = a.model.shape().to_spec((a.size, a.size, 3), a.classes)?;
            if a.batch == 0 {
                return Err(CliError::Usage("--batch must be at least 1".into()));
            }
            let mut rng = Stream::new(seed, &[Stream::tag("gradcheck-data")]);
            let len = a.batch * a.size * a.size * 3;
            let inputs = Tensor::new(
                vec![a.batch, a.size, a.size, 3],
                (0..len).map(|_| rng.uniform()).collect(),
            )?;
            let labels = (0..a.batch).map(|_| rng.below(a.classes as u64) as usize).collect();
            let batch = Batch::new(inputs, Targets::Single { classes: a.classes, labels })?;
            let report = grad_check_report(&spec, seed, &batch, a.bn_mode)?;
            log(format!(
                "max relative error {:.3e} over {} entries (worst: {})",
                report.max_rel_error, report.checked, report.worst
            ));
            if let Some(out) = &a.out {
                write_json_atomic(out, &report)?;
                write_provenance(&sidecar(out), cli, workers, &[])?;
            }
            if report.max_rel_error < a.tolerance {
                Ok(())
            } else {
                Err(CliError::Lib(Error::NonFiniteLoss(format!(
                    "gradient check failed: {:.3e} >= {:.3e}",
                    report.max_rel_error, a.tolerance
                ))))
            }
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run_matrix(cli: &Cli, a: &MatrixArgs) -> CliResult {
    let mut cfg: ExperimentConfig = histokt::io::read_json(&a.config)?;
    if let Some(s) = cli.seed {
        cfg.baseline.seed = s;
        cfg.tuning.seed = s;
        cfg.domain_seed = s;
    }
    let workers = resolve_workers(cli.workers.or(cfg.workers));
    let base_dir = a.config.parent().unwrap_or(Path::new("."));
    let datasets = cfg.materialize(base_dir, &a.out)?;
    log(format!("{} datasets, {} workers", datasets.len(), workers));
    let opts = MatrixOptions {
        shape: &cfg.model,
        baseline: &cfg.baseline,
        tuning: &cfg.tuning,
        lr_grid: &cfg.lr_grid,
        mode: a.mode,
        workers,
        resume: a.resume,
    };
    let matrix = transfer_matrix(&datasets, &opts, &a.out)?;
    for (i, d) in datasets.iter().enumerate() {
        let Some(r) = &matrix.diagonal(i).result else { continue };
        let path = match &r.best_ckpt {
            Some(rel) => a.out.join(rel),
            None => a.out.join(CHECKPOINT_DIR).join(format!("{0}__{0}__baseline.hktw", d.name)),
        };
        let csv = export_embeddings(&read_checkpoint(&path)?, &d.test)?;
        write_atomic(&a.out.join("embeddings").join(format!("{}__baseline.csv", d.name)), &csv)?;
    }
    emit_report(&matrix, &a.out)?;
    let failed = matrix.cells.iter().flatten().filter(|c| c.error.is_some()).count();
    log(format!("matrix written to {} ({failed} failed cells)", a.out.display()));
    write_provenance(&a.out.join(PROVENANCE_FILE), cli, workers, &[&a.config])
}
