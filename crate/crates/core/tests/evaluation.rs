mod common;

use std::fs;
use std::path::Path;

use penh_core::dataset::{load_full_pair, PairEntry};
use penh_core::metrics::{Identity, REPORT_CSV, REPORT_JSON};
use penh_core::{
    build_manifest, evaluate, save_image, Category, DeltaEFormula, Error, ImageTensor, MetricReport, PairManifest,
    Split,
};

fn three_category_manifest(dir: &Path) -> PairManifest {
    let (deg, reference) = (dir.join("degraded"), dir.join("reference"));
    let cats = ["radiology", "dermatology", "microscopy"];
    common::write_corpus(&reference, &cats, 3, 24);
    for (c, cat) in cats.iter().enumerate() {
        fs::create_dir_all(deg.join(cat)).unwrap();
        for i in 0..3 {
            let seed = (c * 10 + i) as u64;
            let img = common::noise_image::<f32>(24, 24, 0.1, 0.9, seed);
            save_image(&img, deg.join(cat).join(format!("img_{i:03}.png"))).unwrap();
        }
    }
    build_manifest(&deg, &reference, None).unwrap()
}

fn perfect(entry: &PairEntry, _: &ImageTensor<f32>) -> penh_core::Result<ImageTensor<f32>> {
    Ok(load_full_pair::<f32>(entry)?.1)
}

#[test]
fn perfect_enhancer_scores_infinite_psnr_and_zero_delta_e() {
    let tmp = tempfile::tempdir().unwrap();
    let m = three_category_manifest(tmp.path());
    let report = evaluate(&m, Split::Train, &perfect, DeltaEFormula::Ciede2000).unwrap();
    assert_eq!(report.images.len(), 9);
    assert!(report.images.iter().all(|i| i.psnr == f64::INFINITY && i.delta_e == 0.0));
    assert_eq!(report.average.delta_e, 0.0);
    assert_eq!(report.average.psnr, f64::INFINITY);
    for stats in report.per_category.values() {
        assert_eq!(stats.psnr_infinite, stats.count);
    }
}

#[test]
fn average_is_the_unweighted_mean_over_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let m = three_category_manifest(tmp.path());
    let report = evaluate::<f32, _>(&m, Split::Train, &Identity, DeltaEFormula::Ciede2000).unwrap();
    assert_eq!(report.per_category.len(), 3);
    for (cat, stats) in &report.per_category {
        let own: Vec<_> = report.images.iter().filter(|i| i.category == *cat).collect();
        assert_eq!(stats.count, own.len());
        let psnr = own.iter().map(|i| i.psnr).sum::<f64>() / own.len() as f64;
        assert!((stats.psnr_mean - psnr).abs() < 1e-9);
        assert!(stats.psnr_mean.is_finite() && stats.delta_e_mean > 0.0);
    }
    let k = report.per_category.len() as f64;
    let psnr = report.per_category.values().map(|s| s.psnr_mean).sum::<f64>() / k;
    let de = report.per_category.values().map(|s| s.delta_e_mean).sum::<f64>() / k;
    assert!((report.average.psnr - psnr).abs() < 1e-9);
    assert!((report.average.delta_e - de).abs() < 1e-9);
    assert!(!report.per_category.contains_key(&Category::Other));
}

#[test]
fn cie76_is_never_below_ciede2000_on_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let m = three_category_manifest(tmp.path());
    let a = evaluate::<f32, _>(&m, Split::Train, &Identity, DeltaEFormula::Ciede2000).unwrap();
    let b = evaluate::<f32, _>(&m, Split::Train, &Identity, DeltaEFormula::Cie76).unwrap();
    assert_eq!(a.average.psnr, b.average.psnr);
    assert!(b.average.delta_e > a.average.delta_e);
}

#[test]
fn empty_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = three_category_manifest(tmp.path());
    let err = evaluate::<f32, _>(&m, Split::Test, &Identity, DeltaEFormula::Ciede2000).unwrap_err();
    assert!(matches!(err, Error::EmptyCorpus(_)));
}

#[test]
fn reports_are_written_as_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let m = three_category_manifest(tmp.path());
    let report = evaluate(&m, Split::Train, &perfect, DeltaEFormula::Ciede2000).unwrap();
    let out = tmp.path().join("eval");
    report.write(&out).unwrap();
    let back: MetricReport = serde_json::from_str(&fs::read_to_string(out.join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(back.images.len(), 9);
    assert_eq!(back.average.psnr, f64::INFINITY);
    let csv = fs::read_to_string(out.join(REPORT_CSV)).unwrap();
    assert!(csv.lines().count() >= 4);
    assert!(report.table().contains("0.00"));
}

#[test]
fn mismatched_pair_sizes_are_a_shape_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (deg, reference) = (tmp.path().join("d"), tmp.path().join("r"));
    common::write_corpus(&reference, &["radiology"], 1, 16);
    fs::create_dir_all(deg.join("radiology")).unwrap();
    save_image(&ImageTensor::<f32>::filled(16, 20, [0.5; 3]), deg.join("radiology/img_000.png")).unwrap();
    let m = build_manifest(&deg, &reference, None).unwrap();
    let err = evaluate::<f32, _>(&m, Split::Train, &Identity, DeltaEFormula::Cie76).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}
