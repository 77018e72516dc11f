mod common;

use std::fs;

use penh_core::dataset::{load_training_batch, MANIFEST_FILE};
use penh_core::degrade::{SidecarRecord, DEGRADED_DIR, RECORDS_FILE, REFERENCE_DIR};
use penh_core::{
    build_manifest, degrade_corpus, save_image, split_manifest, Category, DegradeConfig, Error, ImageTensor, PairManifest,
    Split, SplitStrategy,
};

fn records(dir: &std::path::Path) -> Vec<SidecarRecord> {
    fs::read_to_string(dir.join(RECORDS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn dark_corpus_is_entirely_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_dark_corpus(&tmp.path().join("src"), 10, 16);
    let summary = degrade_corpus(&tmp.path().join("src"), &tmp.path().join("out"), &DegradeConfig::default()).unwrap();
    assert_eq!((summary.total, summary.accepted, summary.skipped), (10, 0, 10));
    let recs = records(&tmp.path().join("out"));
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| !r.accepted && r.mean_l <= 100.0 && r.r_n.is_none()));
}

#[test]
fn mixed_corpus_conserves_counts_and_records_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    common::write_corpus(&src, &["radiology", "dermatology"], 3, 16);
    common::write_dark_corpus(&src.join("microscopy"), 2, 16);
    let out = tmp.path().join("out");
    let cfg = DegradeConfig::default();
    let summary = degrade_corpus(&src, &out, &cfg).unwrap();
    assert_eq!(summary.total, 8);
    assert_eq!(summary.accepted + summary.skipped, summary.total);
    assert_eq!(summary.accepted, 6);
    for r in records(&out) {
        assert_eq!(r.accepted, r.mean_l > cfg.brightness_threshold);
        if r.accepted {
            let (n, c, b) = (r.r_n.unwrap(), r.r_c.unwrap(), r.r_b.unwrap());
            assert!((0.0..=cfg.sigma_max).contains(&n));
            assert!((0.0..=cfg.r_max).contains(&c) && (0.0..=cfg.r_max).contains(&b));
            assert!(out.join(DEGRADED_DIR).join(&r.file).exists());
        }
    }
}

#[test]
fn synthesis_is_reproducible_and_order_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    common::write_corpus(&src, &["radiology"], 4, 16);
    let cfg = DegradeConfig { seed: 77, ..Default::default() };
    degrade_corpus(&src, &tmp.path().join("a"), &cfg).unwrap();
    degrade_corpus(&src, &tmp.path().join("b"), &cfg).unwrap();
    assert_eq!(common::tree_bytes(&tmp.path().join("a")), common::tree_bytes(&tmp.path().join("b")));

    // adding an image leaves the others untouched
    common::write_corpus(&src, &["dermatology"], 1, 16);
    degrade_corpus(&src, &tmp.path().join("c"), &cfg).unwrap();
    let key = "radiology/img_002.png";
    let a = fs::read(tmp.path().join("a").join(DEGRADED_DIR).join(key)).unwrap();
    let c = fs::read(tmp.path().join("c").join(DEGRADED_DIR).join(key)).unwrap();
    assert_eq!(a, c);

    let other = DegradeConfig { seed: 78, ..cfg };
    degrade_corpus(&src, &tmp.path().join("d"), &other).unwrap();
    let d = fs::read(tmp.path().join("d").join(DEGRADED_DIR).join(key)).unwrap();
    assert_ne!(a, d);
}

#[test]
fn empty_or_missing_source_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let err = degrade_corpus(&tmp.path().join("empty"), &tmp.path().join("out"), &DegradeConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyCorpus(_)));
    assert!(err.to_string().contains("empty corpus"));
    let err = degrade_corpus(&tmp.path().join("nope"), &tmp.path().join("out"), &DegradeConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
}

#[test]
fn orphans_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let (deg, reference) = (tmp.path().join("d"), tmp.path().join("r"));
    common::write_corpus(&deg, &["radiology"], 2, 8);
    common::write_corpus(&reference, &["radiology"], 1, 8);
    match build_manifest(&deg, &reference, None) {
        Err(Error::Pairing(msg)) => assert!(msg.contains("img_001.png"), "{msg}"),
        other => panic!("expected a pairing error, got {other:?}"),
    }
}

#[test]
fn manifest_roundtrip_with_category_mapping() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    common::write_corpus(&src, &["radiology", "misc"], 3, 16);
    let out = tmp.path().join("out");
    degrade_corpus(&src, &out, &DegradeConfig::default()).unwrap();
    let mapping = tmp.path().join("categories.json");
    fs::write(&mapping, r#"{"misc/img_000.png": "microscopy"}"#).unwrap();
    let m = build_manifest(&out.join(DEGRADED_DIR), &out.join(REFERENCE_DIR), Some(&mapping)).unwrap();
    let cat = |key: &str| m.entries.iter().find(|e| e.key == key).unwrap().category;
    assert_eq!(cat("radiology/img_001.png"), Category::Radiology);
    assert_eq!(cat("misc/img_000.png"), Category::Microscopy);
    assert_eq!(cat("misc/img_001.png"), Category::Other);

    let m = split_manifest(&m, 0.5, 0.2, 3, SplitStrategy::Ranked).unwrap();
    let path = out.join(MANIFEST_FILE);
    m.save(&path).unwrap();
    let back = PairManifest::load(&path).unwrap();
    assert_eq!(back.entries.len(), m.entries.len());
    for (a, b) in back.entries.iter().zip(&m.entries) {
        assert_eq!((&a.key, a.category, a.split), (&b.key, b.category, b.split));
        assert_eq!(fs::canonicalize(&a.degraded_path).unwrap(), fs::canonicalize(&b.degraded_path).unwrap());
    }
    assert_eq!(back.count(Split::Train) + back.count(Split::Val) + back.count(Split::Test), 6);
}

#[test]
fn batches_keep_pairs_aligned() {
    let tmp = tempfile::tempdir().unwrap();
    let (deg, reference) = (tmp.path().join("d"), tmp.path().join("r"));
    for dir in [&deg, &reference] {
        fs::create_dir_all(dir).unwrap();
    }
    // the marker value identifies the pair in both trees
    for i in 0..6 {
        let v = 0.1 + 0.12 * i as f32;
        save_image(&ImageTensor::filled(8, 8, [v, 0.5, 0.5]), deg.join(format!("p{i}.png"))).unwrap();
        save_image(&ImageTensor::filled(8, 8, [v, 0.9, 0.9]), reference.join(format!("p{i}.png"))).unwrap();
    }
    let m = build_manifest(&deg, &reference, None).unwrap();
    let order = [4, 0, 5, 2];
    let batch = load_training_batch::<f32>(&m, &order, 4).unwrap();
    for (j, &i) in order.iter().enumerate() {
        let d = batch.degraded.at([j, 0, 1, 1]);
        let r = batch.reference.at([j, 0, 1, 1]);
        assert_eq!(d, r, "sample {j} misaligned");
        assert_eq!(m.entries[i].key, format!("p{i}.png"));
        assert!((d - (0.1 + 0.12 * i as f32)).abs() < 1.0 / 255.0);
    }
}
