//! Finite-difference verification of the analytic gradients.

use crate::error::Result;
use crate::nn::data::{Batch, Targets};
use crate::nn::eval::batch_loss;
use crate::nn::init::build_model;
use crate::nn::model::{Mode, Network};
use crate::nn::spec::ModelSpec;
use crate::rng::Stream;

/// Minimum number of sampled parameter entries.
pub const MIN_SAMPLES: usize = 200;
/// Floor on the relative-error denominator, as a fraction of `max(|loss|, 1)`:
/// central differences cannot resolve gradients below it.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation flipped a ReLU and were replaced.
    pub skipped_kinks: usize,
    /// Parameter with the largest error.
    pub worst: String,
}

/// Checks a freshly built model (eval-mode batch norm) against central
/// differences in `f64`; returns the maximum relative error.
pub fn grad_check(spec: &ModelSpec, seed: u64, batch: &Batch<f64>) -> Result<f64> {
    grad_check_report(spec, seed, batch, Mode::Eval).map(|r| r.max_rel_error)
}

/// As [`grad_check`], with a choice of batch-norm mode.
///
/// Batch-norm parameters and running statistics are jittered away from their
/// initial values first so the normalization is not an identity map. Entries
/// whose `±h` perturbation switches any ReLU are replaced by fresh draws.
pub fn grad_check_report(spec: &ModelSpec, seed: u64, batch: &Batch<f64>, mode: Mode) -> Result<GradCheckReport> {
    let ckpt = build_model(spec, seed)?;
    let mut net = Network::<f64>::from_checkpoint(&ckpt)?;
    let mut rng = Stream::new(seed, &[Stream::tag("gradcheck")]);
    let names = net.names().to_vec();
    for (name, t) in names.iter().zip(net.params_mut()) {
        let range = if name.ends_with("running_var") || (name.ends_with(".weight") && t.rank() == 1) {
            Some((0.5, 1.5))
        } else if name.ends_with("running_mean") || (name.ends_with(".bias") && t.rank() == 1 && !name.starts_with("head")) {
            Some((-0.3, 0.3))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(lo, hi));
        }
    }
    let loss_kind = match &batch.targets {
        Targets::Single { .. } => crate::nn::loss::LossKind::CrossEntropy,
        Targets::Multi { .. } => batch.targets.training_loss(),
    };
    let x = batch.act();

    let tape = net.forward(&x, mode, None)?;
    let classes = spec.class_count;
    let dlogits = match &batch.targets {
        Targets::Single { labels, .. } => crate::nn::loss::loss_ce(&tape.logits, classes, labels)?.1,
        Targets::Multi { values, .. } => {
            let crate::nn::loss::LossKind::WeightedOva(w) = &loss_kind else { unreachable!() };
            let y: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            crate::nn::loss::loss_weighted_ova(&tape.logits, classes, &y, w)?.1
        }
    };
    let grads = net.backward(&tape, &dlogits, None);

    let trainable: Vec<usize> = (0..names.len()).filter(|&i| net.is_trainable(i)).collect();
    let budget = sample_budget(&trainable.iter().map(|&i| net.params()[i].len()).collect::<Vec<_>>());

    let base_loss = batch_loss(&tape.logits, &batch.targets, &loss_kind)?;
    let floor = REL_FLOOR * base_loss.abs().max(1.0);
    let base_pattern = tape.relu_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: String::new(),
    };
    for (&i, &take) in trainable.iter().zip(&budget) {
        let len = net.params()[i].len();
        let exhaustive = take >= len;
        let mut queue: Vec<usize> = if exhaustive {
            (0..len).rev().collect()
        } else {
            Vec::new()
        };
        let (mut done, mut attempts) = (0, 0);
        while done < take.min(len) && attempts < 4 * take.max(1) {
            let j = if exhaustive {
                match queue.pop() {
                    Some(j) => j,
                    None => break,
                }
            } else {
                rng.below(len as u64) as usize
            };
            attempts += 1;
            let analytic = grads.per_param[i].as_ref();
            let w0 = net.params()[i].data()[j];
            let h = 1e-5 * w0.abs().max(1.0);
            net.params_mut()[i].data_mut()[j] = w0 + h;
            let (lp, pp) = loss_at(&net, &x, batch, &loss_kind, mode)?;
            net.params_mut()[i].data_mut()[j] = w0 - h;
            let (lm, pm) = loss_at(&net, &x, batch, &loss_kind, mode)?;
            net.params_mut()[i].data_mut()[j] = w0;
            if pp != base_pattern || pm != base_pattern {
                // the loss is not differentiable across a ReLU switch
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.map(|g| g[j]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            done += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = names[i].clone();
            }
        }
    }
    Ok(report)
}

/// Entries to check per tensor: an even share of [`MIN_SAMPLES`] (at least 4
/// each), with whatever small tensors cannot absorb moved to larger ones.
fn sample_budget(lens: &[usize]) -> Vec<usize> {
    if lens.is_empty() {
        return Vec::new();
    }
    let share = MIN_SAMPLES.div_ceil(lens.len()).max(4);
    let mut take: Vec<usize> = lens.iter().map(|&l| l.min(share)).collect();
    let mut deficit = MIN_SAMPLES.saturating_sub(take.iter().sum());
    while deficit > 0 {
        let open: Vec<usize> = (0..lens.len()).filter(|&i| take[i] < lens[i]).collect();
        if open.is_empty() {
            break;
        }
        let extra = deficit.div_ceil(open.len());
        for i in open {
            let add = extra.min(lens[i] - take[i]).min(deficit);
            take[i] += add;
            deficit -= add;
        }
    }
    take
}

fn loss_at(
    net: &Network<f64>,
    x: &crate::nn::layers::Act<f64>,
    batch: &Batch<f64>,
    loss: &crate::nn::loss::LossKind,
    mode: Mode,
) -> Result<(f64, Vec<bool>)> {
    let tape = net.forward(x, mode, None)?;
    Ok((batch_loss(&tape.logits, &batch.targets, loss)?, tape.relu_pattern()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_reaches_minimum_when_possible() {
        let b = sample_budget(&[4, 4, 4, 500, 30]);
        assert_eq!(b.iter().sum::<usize>(), MIN_SAMPLES);
        assert_eq!(&b[..3], &[4, 4, 4]);
        assert_eq!(sample_budget(&[3, 5]), vec![3, 5]);
        assert!(sample_budget(&[1000; 3]).iter().all(|&t| t == 67));
    }
}
