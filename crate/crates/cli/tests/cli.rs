use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn penh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_penh")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(path: &Path, w: u32, h: u32, seed: u32, bright: bool) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let v = (x * 3 + y * 5 + seed * 17) % 64;
        let base = if bright { 170 } else { 5 };
        image::Rgb([(base + v) as u8, (base + v / 2) as u8, (base + 63 - v) as u8])
    });
    img.save(path).unwrap();
}

fn clean_corpus(dir: &Path, per_cat: u32) {
    for (c, cat) in ["radiology", "dermatology"].iter().enumerate() {
        for i in 0..per_cat {
            write_png(&dir.join(cat).join(format!("img_{i:02}.png")), 32, 32, c as u32 * 10 + i, true);
        }
    }
}

const TINY: [&str; 6] = ["--set", "depth_schedule=[8, 8]", "--set", "discriminator.base_channels=4", "--crop-side", "16"];

fn synthesized(dir: &Path) -> PathBuf {
    clean_corpus(&dir.join("clean"), 3);
    let o = penh(&["synth", s(&dir.join("clean")), s(&dir.join("pairs")), "--seed", "4", "--train-frac", "0.67", "--val-frac", "0"]);
    assert!(o.status.success(), "{}", text(&o));
    dir.join("pairs/manifest.jsonl")
}

fn trained(dir: &Path) -> PathBuf {
    let manifest = synthesized(dir);
    let run = dir.join("run");
    let mut args = vec!["train", s(&manifest), "--out", s(&run), "--epochs", "1", "--batch-size", "2"];
    args.extend(TINY);
    let o = penh(&args);
    assert!(o.status.success(), "{}", text(&o));
    run.join("final.penh")
}

#[test]
fn synth_writes_pairs_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesized(tmp.path());
    let lines = fs::read_to_string(&manifest).unwrap();
    assert_eq!(lines.lines().count(), 6);
    assert!(tmp.path().join("pairs/degraded/radiology/img_00.png").exists());
    assert!(tmp.path().join("pairs/reference/dermatology/img_02.png").exists());
    assert!(tmp.path().join("pairs/records.jsonl").exists());
}

#[test]
fn synth_noise_only_mode() {
    let tmp = tempfile::tempdir().unwrap();
    clean_corpus(&tmp.path().join("clean"), 2);
    let o = penh(&["synth", s(&tmp.path().join("clean")), s(&tmp.path().join("pairs")), "--mode", "noise_only", "--sigma-max", "30"]);
    assert!(o.status.success(), "{}", text(&o));
    for line in fs::read_to_string(tmp.path().join("pairs/records.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["r_c"], 0.0);
        assert_eq!(v["r_b"], 0.0);
        assert!(v["r_n"].as_f64().unwrap() <= 30.0);
    }
}

#[test]
fn synth_on_a_dark_or_empty_directory_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&tmp.path().join(format!("dark/img_{i}.png")), 16, 16, i, false);
    }
    let o = penh(&["synth", s(&tmp.path().join("dark")), s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("empty corpus"), "{}", text(&o));

    fs::create_dir_all(tmp.path().join("nothing")).unwrap();
    let o = penh(&["synth", s(&tmp.path().join("nothing")), s(&tmp.path().join("out2"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("empty corpus"), "{}", text(&o));
}

#[test]
fn train_writes_log_plot_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    assert!(ckpt.exists());
    let run = tmp.path().join("run");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_r,l_rfl,l_g,l_p,d_loss,wallclock"));
    assert_eq!(log.lines().count(), 3);
    assert!(fs::read_to_string(run.join("loss_curve.svg")).unwrap().contains("<svg"));
}

#[test]
fn train_base_variant_skips_the_discriminator() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesized(tmp.path());
    let run = tmp.path().join("base");
    let mut args = vec!["train", s(&manifest), "--out", s(&run), "--variant", "base", "--max-steps", "1", "--batch-size", "2"];
    args.extend(TINY);
    let o = penh(&args);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("variant base"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[5], "");
}

#[test]
fn divergence_exits_3_and_names_the_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesized(tmp.path());
    let run = tmp.path().join("div");
    let mut args = vec![
        "train", s(&manifest), "--out", s(&run), "--lr", "1e30", "--epochs", "50", "--batch-size", "2",
        "--checkpoint-every", "1", "--variant", "base",
    ];
    args.extend(TINY);
    let o = penh(&args);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("last good checkpoint: "), "{}", text(&o));
    assert!(run.join("checkpoints/step_00000001.penh").exists());
    assert!(!run.join("final.penh").exists());
}

#[test]
fn enhance_keeps_the_input_size() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let photo = tmp.path().join("in/photo.png");
    write_png(&photo, 500, 375, 1, true);
    let o = penh(&["enhance", s(&ckpt), s(&photo), s(&tmp.path().join("out"))]);
    assert!(o.status.success(), "{}", text(&o));
    let out = image::open(tmp.path().join("out/photo.png")).unwrap();
    assert_eq!((out.width(), out.height()), (500, 375));

    write_png(&tmp.path().join("in/sub/second.png"), 40, 24, 2, true);
    let o = penh(&["enhance", s(&ckpt), s(&tmp.path().join("in")), s(&tmp.path().join("all"))]);
    assert!(o.status.success(), "{}", text(&o));
    let second = image::open(tmp.path().join("all/sub/second.png")).unwrap();
    assert_eq!((second.width(), second.height()), (40, 24));
    assert!(tmp.path().join("all/photo.png").exists());
}

#[test]
fn enhance_without_a_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let photo = tmp.path().join("p.png");
    write_png(&photo, 8, 8, 0, true);
    let o = penh(&["enhance", s(&tmp.path().join("missing.penh")), s(&photo), s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("checkpoint not found"));
}

#[test]
fn evaluate_perfect_reports_zero_delta_e() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesized(tmp.path());
    let report = tmp.path().join("report");
    let o = penh(&["evaluate", s(&manifest), "--perfect", "--out", s(&report)]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    let avg = out.lines().find(|l| l.starts_with("average")).unwrap();
    assert!(avg.contains("inf") && avg.trim_end().ends_with("0.00"), "{avg}");
    assert!(report.join("report.json").exists() && report.join("report.csv").exists());

    let o = penh(&["evaluate", s(&manifest), "--identity", "--split", "train", "--formula", "cie76"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("radiology"));
}

#[test]
fn evaluate_with_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let o = penh(&["evaluate", s(&tmp.path().join("pairs/manifest.jsonl")), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("average"));
}

#[test]
fn bench_prints_one_row_per_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let out = tmp.path().join("bench");
    let o = Command::new(env!("CARGO_BIN_EXE_penh"))
        .args(["bench", "--checkpoint", s(&ckpt), "--resolutions", "32,48,64", "--runs", "3", "--out", s(&out)])
        .env("PENH_DEVICE", "cpu")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    for res in ["32", "48", "64"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{res},cpu,"))), "{csv}");
    }
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(penh(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(penh(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(penh(&["evaluate", "m.jsonl", "--perfect", "--identity"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesized(tmp.path());
    let o = penh(&["train", s(&manifest), "--out", s(&tmp.path().join("r")), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = penh(&["train", s(&manifest), "--out", s(&tmp.path().join("r")), "--crop-side", "20"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(penh(&["--help"]).status.success());
}
