use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::data::{LabeledSet, Targets};
use crate::nn::loss::{loss_ce, loss_weighted_ova, weights_as, LossKind};
use crate::nn::model::{Mode, Network};
use crate::scalar::Scalar;

pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Top-1 accuracy for single-label data; macro-averaged binary accuracy
    /// at threshold 0.5 for multi-label data.
    pub top1: f64,
    /// `top1` or `macro_binary_accuracy`.
    pub accuracy_kind: String,
    /// Per-class accuracy; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub loss: f64,
    pub samples: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy metrics of precomputed logits (`N x classes`, row-major).
pub fn metrics_from_logits(logits: &[f32], targets: &Targets, loss: f64) -> Result<Metrics> {
    let n = targets.len();
    let c = targets.classes();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    if logits.len() != n * c {
        return Err(Error::Shape(format!("{} logits for {n} x {c}", logits.len())));
    }
    match targets {
        Targets::Single { labels, .. } => {
            let mut hits = vec![0usize; c];
            let mut counts = vec![0usize; c];
            for (row, &t) in logits.chunks_exact(c).zip(labels) {
                counts[t] += 1;
                if argmax(row) == t {
                    hits[t] += 1;
                }
            }
            let correct: usize = hits.iter().sum();
            Ok(Metrics {
                top1: correct as f64 / n as f64,
                accuracy_kind: "top1".into(),
                per_class: per_class(&hits, &counts),
                loss,
                samples: n,
            })
        }
        Targets::Multi { values, .. } => {
            let mut hits = vec![0usize; c];
            for (row, truth) in logits.chunks_exact(c).zip(values.chunks_exact(c)) {
                for k in 0..c {
                    if (row[k] >= 0.0) == (truth[k] > 0.5) {
                        hits[k] += 1;
                    }
                }
            }
            let per: Vec<Option<f64>> = hits.iter().map(|&h| Some(h as f64 / n as f64)).collect();
            let macro_avg = hits.iter().map(|&h| h as f64 / n as f64).sum::<f64>() / c as f64;
            Ok(Metrics {
                top1: macro_avg,
                accuracy_kind: "macro_binary_accuracy".into(),
                per_class: per,
                loss,
                samples: n,
            })
        }
    }
}

fn per_class(hits: &[usize], counts: &[usize]) -> Vec<Option<f64>> {
    hits.iter()
        .zip(counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// Eval-mode logits and mean loss over a whole split.
pub fn predict<T: Scalar>(net: &Network<T>, set: &LabeledSet, loss: &LossKind) -> Result<(Vec<f32>, f64)> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut logits = Vec::with_capacity(set.len() * set.targets.classes());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = set.batch::<T>(chunk);
        let tape = net.forward(&batch.act(), Mode::Eval, None)?;
        let l = batch_loss(&tape.logits, &batch.targets, loss)?;
        loss_sum += l.to_f64_lossless() * chunk.len() as f64;
        logits.extend(tape.logits.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
    }
    Ok((logits, loss_sum / set.len() as f64))
}

pub(crate) fn batch_loss<T: Scalar>(logits: &[T], targets: &Targets, loss: &LossKind) -> Result<T> {
    Ok(match (targets, loss) {
        (Targets::Single { classes, labels }, _) => loss_ce(logits, *classes, labels)?.0,
        (Targets::Multi { classes, values }, kind) => {
            let w = match kind {
                LossKind::WeightedOva(w) => weights_as::<T>(w),
                LossKind::CrossEntropy => vec![T::one(); *classes],
            };
            let y: Vec<T> = values.iter().map(|&v| T::from_f32(v).unwrap()).collect();
            loss_weighted_ova(logits, *classes, &y, &w)?.0
        }
    })
}

pub fn evaluate_network<T: Scalar>(net: &Network<T>, set: &LabeledSet, loss: &LossKind) -> Result<Metrics> {
    let (logits, l) = predict(net, set, loss)?;
    metrics_from_logits(&logits, &set.targets, l)
}

/// Evaluates a checkpoint on a labeled split.
pub fn evaluate(ckpt: &Checkpoint, set: &LabeledSet) -> Result<Metrics> {
    let net = Network::<f32>::from_checkpoint(ckpt)?;
    let loss = match &set.targets {
        Targets::Single { .. } => LossKind::CrossEntropy,
        Targets::Multi { classes, .. } => LossKind::WeightedOva(vec![1.0; *classes]),
    };
    evaluate_network(&net, set, &loss)
}
