use std::path::Path;

use histokt::standardize::pipeline::{PATCH_MANIFEST_FILE, SUMMARY_FILE};
use histokt::standardize::{
    standardize_dataset, DatasetManifest, ImageEntry, ImageRgb, LabelMode, Split, StandardizeParams,
};

fn texture(w: usize, h: usize) -> ImageRgb {
    ImageRgb::from_fn(w, h, 1.0, |x, y| {
        let v = ((x * 37 + y * 91) % 256) as u8;
        [v, 255 - v, (x % 256) as u8]
    })
    .unwrap()
}

fn write(dir: &Path, name: &str, img: &ImageRgb) {
    std::fs::write(dir.join(name), img.encode_png().unwrap()).unwrap();
}

fn manifest(res: f64, images: &[(&str, Split)]) -> DatasetManifest {
    DatasetManifest {
        name: "t".into(),
        pixel_resolution_um: res,
        label_mode: LabelMode::Single,
        classes: vec!["a".into(), "b".into()],
        images: images
            .iter()
            .enumerate()
            .map(|(i, (p, s))| ImageEntry { path: p.to_string(), labels: vec![i % 2], split: *s })
            .collect(),
    }
}

#[test]
fn identity_path_keeps_one_patch() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write(src.path(), "adp.png", &texture(272, 272));
    let m = manifest(1.0, &[("adp.png", Split::Train)]);
    let (pm, summary) = standardize_dataset(&m, src.path(), out.path(), &StandardizeParams::default(), 1).unwrap();
    let c = summary.splits[&Split::Train];
    assert_eq!((c.images_in, c.patches_total, c.patches_kept, c.patches_filtered), (1, 1, 1, 0));
    assert_eq!(pm.dataset.images[0].path, "train/adp_x0_y0.png");
    let patch = ImageRgb::load_png(&out.path().join("train/adp_x0_y0.png"), 1.0).unwrap();
    assert_eq!(patch, texture(272, 272));
}

#[test]
fn bach_sized_image_gives_24_patches() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let img = ImageRgb::from_fn(2048, 1536, 0.42, |x, y| {
        if (x / 40 + y / 40) % 2 == 0 { [255, 0, 0] } else { [0, 0, 255] }
    })
    .unwrap();
    write(src.path(), "bach.png", &img);
    let m = manifest(0.42, &[("bach.png", Split::Test)]);
    let (pm, summary) = standardize_dataset(&m, src.path(), out.path(), &StandardizeParams::default(), 1).unwrap();
    assert_eq!(summary.splits[&Split::Test].patches_kept, 24);
    assert_eq!(pm.patches.len(), 24);
    assert!(pm.patches.iter().all(|p| p.split == Split::Test && p.labels == vec![0]));
    assert!(out.path().join("test/bach_x588_y373.png").exists());
}

#[test]
fn white_image_is_all_filtered() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write(src.path(), "white.png", &ImageRgb::filled(600, 300, [255; 3], 1.0).unwrap());
    let m = manifest(1.0, &[("white.png", Split::Val)]);
    let (pm, summary) = standardize_dataset(&m, src.path(), out.path(), &StandardizeParams::default(), 1).unwrap();
    let c = summary.splits[&Split::Val];
    assert!(c.patches_total > 0);
    assert_eq!(c.patches_total, c.patches_filtered);
    assert_eq!(c.patches_kept, 0);
    assert!(pm.patches.iter().all(|p| !p.kept && p.filter_reason.is_some()));
    assert!(pm.dataset.images.is_empty());
}

#[test]
fn unreadable_image_is_reported_and_skipped() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write(src.path(), "good.png", &texture(300, 300));
    std::fs::write(src.path().join("bad.png"), b"not a png").unwrap();
    let m = manifest(1.0, &[("good.png", Split::Train), ("bad.png", Split::Train), ("gone.png", Split::Test)]);
    let (_, summary) = standardize_dataset(&m, src.path(), out.path(), &StandardizeParams::default(), 2).unwrap();
    assert_eq!(summary.errors.len(), 2);
    assert_eq!(summary.errors[0].path, "bad.png");
    assert_eq!(summary.splits[&Split::Train].patches_kept, 4);
}

#[test]
fn empty_manifest_succeeds() {
    let out = tempfile::tempdir().unwrap();
    let m = manifest(1.0, &[]);
    let (pm, summary) = standardize_dataset(&m, out.path(), out.path(), &StandardizeParams::default(), 1).unwrap();
    assert!(pm.patches.is_empty());
    assert_eq!(summary.totals().images_in, 0);
    assert!(out.path().join(PATCH_MANIFEST_FILE).exists());
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let src = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..5).map(|i| format!("img{i}.png")).collect();
    for (i, n) in names.iter().enumerate() {
        write(src.path(), n, &texture(200 + 40 * i, 150 + 30 * i));
    }
    let entries: Vec<(&str, Split)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), Split::ALL[i % 3]))
        .collect();
    let m = manifest(0.8, &entries);
    let params = StandardizeParams { patch: 96, ..StandardizeParams::default() };
    let runs: Vec<_> = [1, 3]
        .iter()
        .map(|&w| {
            let out = tempfile::tempdir().unwrap();
            standardize_dataset(&m, src.path(), out.path(), &params, w).unwrap();
            out
        })
        .collect();
    let listing = |d: &Path| {
        let mut files: Vec<_> = walk(d).into_iter().map(|p| p.strip_prefix(d).unwrap().to_path_buf()).collect();
        files.sort();
        files
    };
    let a = listing(runs[0].path());
    assert_eq!(a, listing(runs[1].path()));
    assert!(a.len() > 3);
    for f in &a {
        assert_eq!(
            std::fs::read(runs[0].path().join(f)).unwrap(),
            std::fs::read(runs[1].path().join(f)).unwrap(),
            "{f:?}"
        );
    }
}

fn walk(d: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn patch_manifest_loads_as_dataset_manifest() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write(src.path(), "x.png", &texture(300, 280));
    let m = manifest(1.0, &[("x.png", Split::Train)]);
    standardize_dataset(&m, src.path(), out.path(), &StandardizeParams::default(), 1).unwrap();
    let loaded = DatasetManifest::load(&out.path().join(PATCH_MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.images.len(), 4);
    assert_eq!(loaded.pixel_resolution_um, 1.0);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["splits"]["train"]["patches_kept"], 4);
}
