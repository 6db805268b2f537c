use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::data::{Batch, LabeledSet, Targets};
use crate::nn::eval::{batch_loss, evaluate_network};
use crate::nn::loss::{loss_ce, loss_weighted_ova, weights_as, LossKind};
use crate::nn::model::{FreezeMask, Mode, Network};
use crate::nn::optim::{lr_schedule, OptState, OptimHyper, OptimizerKind};
use crate::rng::Stream;
use crate::scalar::Scalar;

pub const DEFAULT_LR0: f64 = 0.03;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
pub const DEFAULT_EPOCHS: usize = 250;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_TRIALS: usize = 3;
pub const DEFAULT_SCHEDULE_PERIOD: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub trials: usize,
    /// Halve the learning rate every this many epochs; `None` keeps it constant.
    pub schedule_period: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgdm,
            lr0: DEFAULT_LR0,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            trials: DEFAULT_TRIALS,
            schedule_period: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.trials == 0 {
            return bad("epochs, batch_size and trials must be at least 1".into());
        }
        if self.schedule_period == Some(0) {
            return bad("schedule period must be at least 1".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> OptimHyper {
        OptimHyper {
            kind: self.optimizer,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        match self.schedule_period {
            Some(p) => lr_schedule(lr0, epoch, p),
            None => lr0,
        }
    }
}

/// Per-step settings that are not part of the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub lr: f64,
    pub loss: &'a LossKind,
    pub mask: Option<&'a FreezeMask>,
}

/// Forward, backward and update on one batch; returns the batch loss.
pub fn network_step<T: Scalar>(
    net: &mut Network<T>,
    state: &mut OptState<T>,
    batch: &Batch<T>,
    hyper: OptimHyper,
    ctx: StepContext<'_>,
) -> Result<f64> {
    let tape = net.forward(&batch.act(), Mode::Train, ctx.mask)?;
    let classes = net.spec().class_count;
    let (loss, dlogits) = match (&batch.targets, ctx.loss) {
        (Targets::Single { labels, .. }, _) => loss_ce(&tape.logits, classes, labels)?,
        (Targets::Multi { values, .. }, kind) => {
            let w = match kind {
                LossKind::WeightedOva(w) => weights_as::<T>(w),
                LossKind::CrossEntropy => vec![T::one(); classes],
            };
            let y: Vec<T> = values.iter().map(|&v| T::from_f32(v).unwrap()).collect();
            loss_weighted_ova(&tape.logits, classes, &y, &w)?
        }
    };
    if !loss.is_finite() {
        let layer = net.first_non_finite().unwrap_or("logits").to_string();
        return Err(Error::NonFiniteLoss(layer));
    }
    let grads = net.backward(&tape, &dlogits, ctx.mask);
    if let Some(i) = grads
        .per_param
        .iter()
        .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFiniteLoss(net.names()[i].clone()));
    }
    state.apply(net, &grads, ctx.mask, ctx.lr, hyper);
    net.update_running_stats(&tape);
    Ok(loss.to_f64_lossless())
}

/// One optimization step on a checkpoint.
pub fn train_step(
    ckpt: &Checkpoint,
    batch: &Batch<f32>,
    cfg: &TrainConfig,
    mut state: OptState<f32>,
    ctx: StepContext<'_>,
) -> Result<(Checkpoint, OptState<f32>, f64)> {
    if ctx.lr.is_nan() || ctx.lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {} is negative", ctx.lr)));
    }
    let mut net = Network::<f32>::from_checkpoint(ckpt)?;
    let loss = network_step(&mut net, &mut state, batch, cfg.hyper(), ctx)?;
    Ok((net.to_checkpoint(ckpt), state, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights after the epoch with the highest validation accuracy
    /// (earliest such epoch on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone)]
pub struct FitOptions<'a> {
    pub cfg: &'a TrainConfig,
    pub lr0: f64,
    pub seed: u64,
    pub mask: Option<&'a FreezeMask>,
}

/// Trains for `cfg.epochs` epochs with seeded shuffling, validating after
/// each epoch.
pub fn fit(init: &Checkpoint, train: &LabeledSet, val: &LabeledSet, opts: FitOptions<'_>) -> Result<FitOutcome> {
    opts.cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let loss_kind = train.targets.training_loss();
    let mut net = Network::<f32>::from_checkpoint(init)?;
    let mut state = OptState::new();
    let hyper = opts.cfg.hyper();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut history = Vec::with_capacity(opts.cfg.epochs);

    for epoch in 0..opts.cfg.epochs {
        let lr = opts.cfg.lr_at(opts.lr0, epoch);
        let mut rng = Stream::new(opts.seed, &[Stream::tag("shuffle"), epoch as u64]);
        order.sort_unstable();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.cfg.batch_size) {
            let batch = train.batch::<f32>(chunk);
            let ctx = StepContext {
                lr,
                loss: &loss_kind,
                mask: opts.mask,
            };
            loss_sum += network_step(&mut net, &mut state, &batch, hyper, ctx)? * chunk.len() as f64;
        }
        let val_metrics = evaluate_network(&net, val, &loss_kind)?;
        history.push(HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: val_metrics.loss,
            val_top1: val_metrics.top1,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_metrics.top1 > *v) {
            best = Some((epoch, val_metrics.top1, net.to_checkpoint(init)));
        }
    }
    let (best_epoch, best_val_top1, mut best) = best.expect("at least one epoch");
    best.meta.insert("best_epoch".into(), best_epoch.to_string());
    best.meta.insert("val_top1".into(), format!("{best_val_top1}"));
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val_top1,
        history,
    })
}

/// Loss of a batch under eval-mode forward (used by checks and reports).
pub fn eval_loss<T: Scalar>(net: &Network<T>, batch: &Batch<T>, loss: &LossKind) -> Result<f64> {
    let tape = net.forward(&batch.act(), Mode::Eval, None)?;
    Ok(batch_loss(&tape.logits, &batch.targets, loss)?.to_f64_lossless())
}
