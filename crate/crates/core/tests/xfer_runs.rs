use std::path::Path;

use histokt::io::sha256_file;
use histokt::nn::{OptimizerKind, TrainConfig};
use histokt::standardize::Split;
use histokt::xfer::matrix::{result_file_name, RESULTS_DIR};
use histokt::xfer::report::{MATRIX_CSV, MATRIX_MD};
use histokt::xfer::*;

fn spec(name: &str, hue_shift: f64, train: usize) -> DomainSpec {
    DomainSpec::new(
        name,
        standard_classes(),
        Palette::default().shifted(hue_shift),
        SampleCounts { train, val: 2, test: 3 },
        8,
    )
}

fn shape() -> ModelShape {
    ModelShape { stem: 4, stages: "4x1s1,6x1s2".into() }
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, trials: 2, seed, ..TrainConfig::default() }
}

fn tuning(seed: u64) -> TrainConfig {
    TrainConfig { optimizer: OptimizerKind::Adamw, schedule_period: Some(1), ..cfg(seed) }
}

fn domain(root: &Path, s: &DomainSpec) -> Dataset {
    let dir = root.join(&s.name);
    gen_domain(s, 5, &dir).unwrap();
    Dataset::load(&dir.join("manifest.json")).unwrap()
}

#[test]
fn generation_is_deterministic_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = spec("g", 0.0, 100);
    s.sample_counts = SampleCounts { train: 100, val: 20, test: 20 };
    let a = gen_domain(&s, 3, &tmp.path().join("a")).unwrap();
    let b = gen_domain(&s, 3, &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)), (400, 80, 80));
    for e in a.images.iter().step_by(37) {
        let fa = sha256_file(&tmp.path().join("a").join(&e.path)).unwrap();
        let fb = sha256_file(&tmp.path().join("b").join(&e.path)).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn palettes_shift_colours_but_not_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let a = domain(tmp.path(), &spec("pa", 0.0, 10));
    let b = domain(tmp.path(), &spec("pb", 150.0, 10));
    assert_eq!(a.train.targets, b.train.targets);
    let channel_mean = |d: &Dataset, ch: usize| {
        let v: Vec<f32> = d.train.inputs.iter().skip(ch).step_by(3).copied().collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    let diff: f32 = (0..3).map(|c| (channel_mean(&a, c) - channel_mean(&b, c)).abs()).sum();
    assert!(diff > 0.05, "histograms too close: {diff}");
}

#[test]
fn baseline_reports_trials_and_recomputable_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = domain(tmp.path(), &spec("base", 0.0, 6));
    let c = TrainConfig { trials: 3, ..cfg(10) };
    let run = train_baseline(&d, &shape(), &c, 2).unwrap();
    let r = &run.result;
    assert_eq!(r.trials.len(), 3);
    assert_eq!(r.trials.iter().map(|t| t.seed).collect::<Vec<_>>(), vec![10, 11, 12]);
    let (m, s) = r.recompute_stats();
    assert!((m - r.mean).abs() < 1e-9 && (s - r.stdev).abs() < 1e-9);
    let best = &r.candidates[r.best_candidate];
    assert!(r.candidates.iter().all(|c| c.best_val_top1 <= best.best_val_top1));
    for h in &run.histories {
        let peak = h.rows.iter().map(|row| row.val_top1).fold(f64::MIN, f64::max);
        let first = h.rows.iter().position(|row| row.val_top1 == peak).unwrap();
        let trial = r.candidates.iter().find(|c| c.seed == h.seed).unwrap();
        assert_eq!(trial.best_epoch, first);
    }
    let serial = train_baseline(&d, &shape(), &c, 1).unwrap();
    assert_eq!(serial.result, run.result);
}

#[test]
fn fine_tuning_freezes_and_deep_tuning_moves() {
    let tmp = tempfile::tempdir().unwrap();
    let src = domain(tmp.path(), &spec("fsrc", 0.0, 6));
    let tgt = domain(tmp.path(), &spec("ftgt", 40.0, 6));
    let base = train_baseline(&src, &shape(), &cfg(1), 1).unwrap();
    let fine = tune(&base.best, "fsrc", &tgt, TuneMode::Fine, &tuning(1), &[0.01], 1).unwrap();
    let deep = tune(&base.best, "fsrc", &tgt, TuneMode::Deep, &tuning(1), &[0.01], 1).unwrap();
    assert_eq!(fine.result.stage, Stage::Fine);
    let mut deep_moved = false;
    for (name, t) in &base.best.params {
        if name.starts_with("head.") {
            continue;
        }
        assert!(t.bit_eq(&fine.best.params[name]), "{name} changed under fine-tuning");
        deep_moved |= !t.bit_eq(&deep.best.params[name]);
    }
    assert!(deep_moved);
}

#[test]
fn grid_search_runs_every_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let src = domain(tmp.path(), &spec("gsrc", 0.0, 6));
    let base = train_baseline(&src, &shape(), &TrainConfig { trials: 1, ..cfg(1) }, 1).unwrap();
    let c = TrainConfig { trials: 3, epochs: 1, ..tuning(4) };
    let run = tune(&base.best, "gsrc", &src, TuneMode::Deep, &c, &[0.03, 0.003, 0.0003], 3).unwrap();
    let r = &run.result;
    assert_eq!(r.candidates.len(), 9);
    assert_eq!(r.trials.len(), 3);
    assert_eq!(r.selected_lr, r.candidates[r.best_candidate].lr);
    assert!(r.trials.iter().all(|t| t.lr == r.selected_lr));
    assert!(tune(&base.best, "gsrc", &src, TuneMode::Deep, &c, &[], 1).is_err());
}

#[test]
fn matrix_report_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let ds: Vec<Dataset> = ["ma", "mb", "mc"]
        .iter()
        .enumerate()
        .map(|(i, n)| domain(tmp.path(), &spec(n, 60.0 * i as f64, 6)))
        .collect();
    let out = tmp.path().join("out");
    let (b, t) = (TrainConfig { trials: 2, ..cfg(1) }, TrainConfig { trials: 2, ..tuning(1) });
    let opts = MatrixOptions {
        shape: &shape(),
        baseline: &b,
        tuning: &t,
        lr_grid: &[0.01],
        mode: TuneMode::Deep,
        workers: 2,
        resume: false,
    };
    let m = transfer_matrix(&ds, &opts, &out).unwrap();
    assert_eq!(m.cells.iter().flatten().filter(|c| c.result.is_some()).count(), 9);
    for (i, row) in m.cells.iter().enumerate() {
        assert_eq!(row[i].stage, Stage::Baseline);
        assert_eq!(row[i].source, row[i].target);
    }
    assert!(out.join(RESULTS_DIR).join(result_file_name("ma", "mb", Stage::Deep)).exists());
    emit_report(&m, &out).unwrap();
    let md = std::fs::read_to_string(out.join(MATRIX_MD)).unwrap();
    assert!(md.contains("| ma |"));
    let csv = std::fs::read_to_string(out.join(MATRIX_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 10);

    let again = transfer_matrix(&ds, &MatrixOptions { workers: 1, ..opts.clone() }, &tmp.path().join("out2")).unwrap();
    assert_eq!(again, m);
    let resumed = transfer_matrix(&ds, &MatrixOptions { resume: true, ..opts.clone() }, &out).unwrap();
    assert_eq!(resumed, m);

    assert!(transfer_matrix(&ds[..1], &opts, &out).is_err());
}

#[test]
fn two_stage_records_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let a = domain(tmp.path(), &spec("ta", 0.0, 6));
    let c = TrainConfig { trials: 1, ..cfg(2) };
    let t = TrainConfig { trials: 1, ..tuning(2) };
    let run = two_stage(&a, &a, &a, &shape(), &c, &t, &[0.01], 1).unwrap();
    assert_eq!(run.result.meta["chain"], "ta>ta>ta");
    assert_eq!(run.result.stage, Stage::Deep);
}

#[test]
fn distill_experiment_merges_three_and_rejects_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let ds: Vec<Dataset> = ["da", "db", "dc"]
        .iter()
        .enumerate()
        .map(|(i, n)| domain(tmp.path(), &spec(n, 30.0 * i as f64, 6)))
        .collect();
    let c = TrainConfig { trials: 1, ..cfg(3) };
    let ckpts: Vec<_> = ds.iter().map(|d| train_baseline(d, &shape(), &c, 1).unwrap().best).collect();
    let t = TrainConfig { trials: 1, ..tuning(3) };
    let run = distill_experiment(&ckpts, &ds[0], &t, &[0.01], 1).unwrap();
    assert_eq!(run.result.stage, Stage::Distill);
    assert_eq!(run.result.meta["distill.sources"], "da,db,dc");
    assert_eq!(run.result.source, "da+db+dc");

    let other = ModelShape { stem: 4, stages: "4x1s1".into() };
    let odd = train_baseline(&ds[1], &other, &c, 1).unwrap().best;
    assert!(distill_experiment(&[ckpts[0].clone(), odd], &ds[0], &t, &[0.01], 1).is_err());
}

#[test]
fn embeddings_are_pure_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let d = domain(tmp.path(), &spec("emb", 0.0, 3));
    let ckpt = train_baseline(&d, &shape(), &TrainConfig { trials: 1, ..cfg(1) }, 1).unwrap().best;
    let a = export_embeddings(&ckpt, &d.test).unwrap();
    assert_eq!(a, export_embeddings(&ckpt, &d.test).unwrap());
    let text = String::from_utf8(a).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 6);
    assert_eq!(text.lines().count(), 1 + d.test.len());

    let mut twin = d.test.clone();
    let n = twin.sample_len();
    let first: Vec<f32> = twin.inputs[..n].to_vec();
    twin.inputs[n..2 * n].copy_from_slice(&first);
    let (w, f) = embeddings(&ckpt, &twin).unwrap();
    assert_eq!(&f[..w], &f[w..2 * w]);

    let wide = ModelShape::default().to_spec((8, 8, 3), 4).unwrap();
    let ckpt = histokt::nn::build_model(&wide, 1).unwrap();
    assert_eq!(embeddings(&ckpt, &d.test).unwrap().0, 64);
}
