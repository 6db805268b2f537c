mod common;

use common::{random_batch, tiny_spec};
use histokt::nn::gradcheck::grad_check_report;
use histokt::nn::{
    build_model, forward, freeze_except_head, grad_check, replace_head, train_step, Batch, LossKind, Mode,
    ModelSpec, OptState, StepContext, Targets, TrainConfig,
};
use histokt::Tensor;

fn cfg() -> TrainConfig {
    TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn forward_shapes_and_purity() {
    let spec = ModelSpec::mini_resnet((8, 8, 3), 5);
    let ckpt = build_model(&spec, 3).unwrap();
    let batch = random_batch::<f32>(&spec, 1, 1);
    let a = forward(&ckpt, &batch, Mode::Eval).unwrap();
    let b = forward(&ckpt, &batch, Mode::Eval).unwrap();
    assert_eq!(a.dims(), &[1, 5]);
    assert!(a.bit_eq(&b));
    assert!(a.is_finite());
}

#[test]
fn zero_input_gives_equal_logits_at_init() {
    let spec = ModelSpec::mini_resnet((8, 8, 3), 4);
    let ckpt = build_model(&spec, 11).unwrap();
    let batch = Batch::new(
        Tensor::zeros(vec![2, 8, 8, 3]).unwrap(),
        Targets::Single { classes: 4, labels: vec![0, 1] },
    )
    .unwrap();
    let logits = forward(&ckpt, &batch, Mode::Eval).unwrap();
    for v in logits.data() {
        assert_eq!(*v, logits.data()[0]);
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let spec = tiny_spec(3);
    let ckpt = build_model(&spec, 1).unwrap();
    let batch = random_batch::<f32>(&spec, 4, 2);
    let ctx = StepContext { lr: 0.0, loss: &LossKind::CrossEntropy, mask: None };
    let (next, _, loss) = train_step(&ckpt, &batch, &cfg(), OptState::new(), ctx).unwrap();
    assert!(loss.is_finite());
    for (name, t) in &ckpt.params {
        if name.contains("running") {
            continue;
        }
        assert!(t.bit_eq(&next.params[name]), "{name} moved");
    }
}

#[test]
fn single_sample_overfits() {
    let spec = tiny_spec(3);
    let mut ckpt = build_model(&spec, 5).unwrap();
    let batch = random_batch::<f32>(&spec, 1, 9);
    let mut state = OptState::new();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let ctx = StepContext { lr: 0.03, loss: &LossKind::CrossEntropy, mask: None };
        let out = train_step(&ckpt, &batch, &cfg(), state, ctx).unwrap();
        ckpt = out.0;
        state = out.1;
        loss = out.2;
    }
    assert!(loss < 0.01, "final loss {loss}");
}

#[test]
fn trajectories_are_reproducible() {
    let spec = tiny_spec(3);
    let run = || {
        let mut ckpt = build_model(&spec, 7).unwrap();
        let mut state = OptState::new();
        for step in 0..5 {
            let batch = random_batch::<f32>(&spec, 4, step);
            let ctx = StepContext { lr: 0.05, loss: &LossKind::CrossEntropy, mask: None };
            let out = train_step(&ckpt, &batch, &cfg(), state, ctx).unwrap();
            ckpt = out.0;
            state = out.1;
        }
        ckpt.to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn fine_tuning_moves_only_the_head() {
    let spec = tiny_spec(3);
    let start = build_model(&spec, 2).unwrap();
    let mask = freeze_except_head(&start);
    assert_eq!(mask.trainable_count(), 2);
    let mut ckpt = start.clone();
    let mut state = OptState::new();
    for step in 0..10 {
        let batch = random_batch::<f32>(&spec, 4, 100 + step);
        let ctx = StepContext { lr: 0.1, loss: &LossKind::CrossEntropy, mask: Some(&mask) };
        let out = train_step(&ckpt, &batch, &cfg(), state, ctx).unwrap();
        ckpt = out.0;
        state = out.1;
    }
    for (name, t) in &start.params {
        if name.starts_with("head.") {
            assert!(!t.bit_eq(&ckpt.params[name]), "{name} did not train");
        } else {
            assert!(t.bit_eq(&ckpt.params[name]), "{name} changed while frozen");
        }
    }
}

#[test]
fn head_replacement_resizes() {
    let spec = ModelSpec::mini_resnet((8, 8, 3), 4);
    let ckpt = build_model(&spec, 1).unwrap();
    let big = replace_head(&ckpt, 33, 4).unwrap();
    assert_eq!(big.class_count, 33);
    assert_eq!(big.params["head.weight"].dims(), &[33, 64]);
    assert_eq!(big.params["head.bias"].dims(), &[33]);
    assert!(big.params["stem.conv.weight"].bit_eq(&ckpt.params["stem.conv.weight"]));
    assert_eq!(big.to_bytes().unwrap(), replace_head(&ckpt, 33, 4).unwrap().to_bytes().unwrap());
}

#[test]
fn gradcheck_linear_only() {
    let spec = ModelSpec::linear_only((4, 4, 3), 3);
    let err = grad_check(&spec, 1, &random_batch::<f64>(&spec, 3, 1)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_tiny_resnet_both_modes() {
    let spec = tiny_spec(3);
    let batch = random_batch::<f64>(&spec, 3, 4);
    for mode in [Mode::Eval, Mode::Train] {
        let r = grad_check_report(&spec, 2, &batch, mode).unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
        assert!(r.checked >= 200);
    }
}

#[test]
fn gradcheck_zero_input_is_finite() {
    let spec = tiny_spec(2);
    let batch = Batch::new(
        Tensor::<f64>::zeros(vec![2, 6, 6, 3]).unwrap(),
        Targets::Single { classes: 2, labels: vec![0, 0] },
    )
    .unwrap();
    let err = grad_check(&spec, 1, &batch).unwrap();
    assert!(err.is_finite());
}
