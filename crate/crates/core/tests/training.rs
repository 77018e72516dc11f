mod common;

use std::fs;
use std::path::Path;

use penh_core::checkpoint::checkpoint_meta;
use penh_core::dataset::load_training_batch;
use penh_core::nn::{named_params, Layer};
use penh_core::optim::Adam;
use penh_core::trainer::{
    discriminator_step, generator_step, latest_checkpoint, read_log, CHECKPOINT_DIR, FINAL_CHECKPOINT, TRAIN_LOG_FILE,
};
use penh_core::{
    build_manifest, fit, load_checkpoint, load_generator, save_checkpoint, train_step, Discriminator,
    DiscriminatorConfig, Error, ExtractorSpec, NetVariant, PairManifest, Tensor, TrainConfig, TrainState,
};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        depth_schedule: vec![8, 8],
        crop_side: 16,
        batch_size: 2,
        epochs: 1,
        discriminator: DiscriminatorConfig { base_channels: 4 },
        extractor: ExtractorSpec::random(3),
        deterministic: true,
        checkpoint_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn corpus(dir: &Path, n: usize) -> PairManifest {
    let (deg, reference) = (dir.join("degraded"), dir.join("reference"));
    common::write_corpus(&reference, &["radiology"], n, 16);
    for i in 0..n {
        let name = format!("radiology/img_{i:03}.png");
        let img = common::noise_image::<f32>(16, 16, 0.2, 0.8, i as u64);
        fs::create_dir_all(deg.join("radiology")).unwrap();
        penh_core::save_image(&img, deg.join(&name)).unwrap();
    }
    build_manifest(&deg, &reference, None).unwrap()
}

fn weights<L: Layer<f32> + ?Sized>(layer: &L) -> Vec<(String, Vec<f32>)> {
    named_params(layer).into_iter().map(|(n, p)| (n, p.data.clone())).collect()
}

#[test]
fn one_full_batch_epoch_is_one_step() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 24);
    let cfg = TrainConfig { batch_size: 24, epochs: 1, variant: NetVariant::BASE, ..tiny(1) };
    let out = fit::<f32>(&cfg, &m, None, None).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.state.step, 1);
}

#[test]
fn checkpoints_follow_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 4);
    let cfg = TrainConfig { epochs: 100, max_steps: Some(35), checkpoint_every: 10, variant: NetVariant::BASE, ..tiny(2) };
    let run = tmp.path().join("run");
    let out = fit::<f32>(&cfg, &m, Some(&run), None).unwrap();
    assert_eq!(out.log.len(), 35);
    let names: Vec<String> =
        out.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["step_00000010.penh", "step_00000020.penh", "step_00000030.penh", FINAL_CHECKPOINT]);
    assert_eq!(latest_checkpoint(&run).unwrap(), run.join(CHECKPOINT_DIR).join("step_00000030.penh"));
    assert_eq!(checkpoint_meta(&run.join(FINAL_CHECKPOINT)).unwrap().step, 35);
    assert_eq!(read_log(&run.join(TRAIN_LOG_FILE)).unwrap().len(), 35);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 4);
    let cfg = TrainConfig { epochs: 5, checkpoint_every: 4, ..tiny(3) };

    let whole = fit::<f32>(&cfg, &m, Some(&tmp.path().join("whole")), None).unwrap();
    assert_eq!(whole.log.len(), 10);

    let part_dir = tmp.path().join("part");
    let first = TrainConfig { max_steps: Some(4), ..cfg.clone() };
    fit::<f32>(&first, &m, Some(&part_dir), None).unwrap();
    let state = load_checkpoint::<f32>(&part_dir.join(CHECKPOINT_DIR).join("step_00000004.penh")).unwrap();
    assert_eq!(state.step, 4);
    let rest = fit::<f32>(&cfg, &m, Some(&part_dir), Some(state)).unwrap();

    assert_eq!(weights(&rest.state.generator), weights(&whole.state.generator));
    assert_eq!(
        weights(rest.state.discriminator.as_ref().unwrap()),
        weights(whole.state.discriminator.as_ref().unwrap())
    );
    let resumed: Vec<_> = read_log(&part_dir.join(TRAIN_LOG_FILE)).unwrap().iter().map(|r| r.losses()).collect();
    let reference: Vec<_> = whole.log.iter().map(|r| r.losses()).collect();
    assert_eq!(resumed, reference);
}

#[test]
fn every_logged_objective_is_the_weighted_sum_of_its_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 4);
    let cfg = TrainConfig { epochs: 3, ..tiny(4) };
    let out = fit::<f32>(&cfg, &m, None, None).unwrap();
    for row in &out.log {
        let want = row.l_r + row.l_rfl + cfg.weights.lambda_g * row.l_g;
        assert!((row.l_p - want).abs() <= 1e-12 * want.abs().max(1.0), "step {}", row.step);
        assert!(row.d_loss.is_some());
    }
}

#[test]
fn without_the_adversarial_term_a_discriminator_is_inert() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 2);
    let batch = load_training_batch::<f32>(&m, &[0, 1], 16).unwrap();
    let cfg = TrainConfig { variant: NetVariant::RES_GATE_RFL, ..tiny(5) };

    let mut plain = TrainState::<f32>::new(cfg.clone()).unwrap();
    assert!(plain.discriminator.is_none());
    let mut attached = TrainState::<f32>::new(cfg.clone()).unwrap();
    let d = Discriminator::new(cfg.discriminator.clone(), 99).unwrap();
    attached.opt_d = Some(Adam::new(cfg.adam(), &d));
    attached.discriminator = Some(d);
    let d_before = weights(attached.discriminator.as_ref().unwrap());

    let a = train_step(&mut plain, &batch).unwrap();
    let b = train_step(&mut attached, &batch).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.losses.l_g, 0.0);
    assert_eq!(a.d_loss, None);
    assert_eq!(weights(&plain.generator), weights(&attached.generator));
    assert_eq!(weights(attached.discriminator.as_ref().unwrap()), d_before);
}

#[test]
fn each_half_step_updates_only_its_own_network() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 2);
    let batch = load_training_batch::<f32>(&m, &[0, 1], 16).unwrap();
    let mut state = TrainState::<f32>::new(tiny(6)).unwrap();
    let g0 = weights(&state.generator);
    let d0 = weights(state.discriminator.as_ref().unwrap());

    let d_loss = discriminator_step(&mut state, &batch).unwrap();
    assert!(d_loss.is_some_and(|v| v.is_finite() && v >= 0.0));
    assert_eq!(weights(&state.generator), g0);
    let d1 = weights(state.discriminator.as_ref().unwrap());
    assert_ne!(d1, d0);

    generator_step(&mut state, &batch, d_loss).unwrap();
    assert_ne!(weights(&state.generator), g0);
    assert_eq!(weights(state.discriminator.as_ref().unwrap()), d1);
}

#[test]
fn divergence_stops_training_and_keeps_earlier_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 4);
    let run = tmp.path().join("run");
    let cfg = TrainConfig { lr: 1e30, epochs: 50, checkpoint_every: 1, variant: NetVariant::BASE, ..tiny(7) };
    let Err(err) = fit::<f32>(&cfg, &m, Some(&run), None) else { panic!("training should diverge") };
    let Error::Divergence { step, .. } = err else { panic!("unexpected error: {err}") };
    assert!(step >= 2, "diverged at step {step}");
    assert!(!run.join(FINAL_CHECKPOINT).exists());
    let last = latest_checkpoint(&run).unwrap();
    assert_eq!(checkpoint_meta(&last).unwrap().step, step - 1);
    assert!(load_checkpoint::<f32>(&run.join(CHECKPOINT_DIR).join("step_00000001.penh")).is_ok());
}

#[test]
fn checkpoints_roundtrip_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path(), 2);
    let batch = load_training_batch::<f32>(&m, &[0, 1], 16).unwrap();
    let mut state = TrainState::<f32>::new(tiny(8)).unwrap();
    train_step(&mut state, &batch).unwrap();
    let a = tmp.path().join("a.penh");
    save_checkpoint(&state, &a).unwrap();

    let back = load_checkpoint::<f32>(&a).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.config, state.config);
    assert_eq!(weights(&back.generator), weights(&state.generator));
    let probe = Tensor::<f32>::from_fn([1, 3, 16, 16], |i| ((i[1] * 7 + i[2] * 3 + i[3]) % 11) as f32 / 11.0);
    let g = load_generator::<f32>(&a).unwrap();
    assert_eq!(g.forward(&probe).unwrap(), state.generator.forward(&probe).unwrap());

    let b = tmp.path().join("b.penh");
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // a restored optimiser continues exactly like the original
    let mut cont = back;
    train_step(&mut state, &batch).unwrap();
    train_step(&mut cont, &batch).unwrap();
    assert_eq!(weights(&cont.generator), weights(&state.generator));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let state = TrainState::<f32>::new(TrainConfig { variant: NetVariant::BASE, ..tiny(9) }).unwrap();
    let path = tmp.path().join("c.penh");
    save_checkpoint(&state, &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
    fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_generator::<f32>(&path), Err(Error::Format { .. })));
    assert!(matches!(load_checkpoint::<f32>(&tmp.path().join("missing.penh")), Err(Error::NotFound(_))));
}
