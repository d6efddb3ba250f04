use std::sync::{Arc, OnceLock};

use tempfile::TempDir;
use uniavatar_conditioning::*;
use uniavatar_mcss::{generate_synthetic_dataset, Dataset, DatasetSpec};

fn dataset() -> &'static (TempDir, Arc<Dataset>) {
    static DATA: OnceLock<(TempDir, Arc<Dataset>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            identities: 1,
            lightings: 2,
            clips: 1,
            frames: 4,
            backgrounds: 2,
            ..DatasetSpec::default()
        };
        generate_synthetic_dataset(&spec, 31, dir.path()).unwrap();
        let data = Arc::new(Dataset::open(dir.path()).unwrap());
        (dir, data)
    })
}

fn short(stage: u8, steps: usize) -> TrainConfig {
    TrainConfig {
        stage,
        steps,
        batch: 1,
        workers: 1,
        prefetch: 1,
        ..TrainConfig::desk()
    }
}

#[test]
fn same_seed_same_log() {
    let (_, data) = dataset();
    let cfg = short(1, 3);
    let a = train(data.clone(), &cfg, 5, None, |_| {}).unwrap();
    let b = train(data.clone(), &cfg, 5, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.net, b.net);
    assert_eq!(a.log.len(), 3);
    assert!(a.log.iter().all(|r| r.total.is_finite() && r.total > 0.0));
    let csv = loss_log_csv(&a.log);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,loss_total"));
    let c = train(data.clone(), &cfg, 6, None, |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn worker_count_does_not_change_results() {
    let (_, data) = dataset();
    let cfg = short(1, 2);
    let a = train(data.clone(), &cfg, 8, None, |_| {}).unwrap();
    let b = train(data.clone(), &TrainConfig { workers: 3, prefetch: 2, ..cfg }, 8, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
}

#[test]
fn stage_two_only_moves_temporal_audio_and_adaln() {
    let (_, data) = dataset();
    let init = NetBundle::init(&TrainConfig::desk().net, 9).unwrap();
    let out = train(data.clone(), &short(2, 2), 9, Some(init.clone()), |_| {}).unwrap();
    let mut moved = 0;
    for (name, t) in init.params.iter() {
        let after = out.net.params.get(name).unwrap();
        let trainable = name.starts_with("den.tmp") || name.starts_with("den.aa") || name.starts_with("den.adaln");
        if trainable {
            moved += (!after.bit_eq(t)) as usize;
        } else {
            assert!(after.bit_eq(t), "{name} changed in stage 2");
        }
    }
    assert!(moved > 0);
    assert!(matches!(train(data.clone(), &short(2, 1), 9, None, |_| {}), Err(Error::Usage(_))));
}

#[test]
fn motion_encoder_freezes_after_illumination_mix_in() {
    let (_, data) = dataset();
    let cfg = TrainConfig { illumination_mix_fraction: 0.5, ..short(1, 4) };
    assert_eq!(cfg.illumination_mix_step(), 2);
    // two unmixed steps, the same prefix as the first half of `four`
    let two = TrainConfig { steps: 2, illumination_mix_fraction: 1.0, ..cfg.clone() };
    let two = train(data.clone(), &two, 4, None, |_| {}).unwrap();
    let four = train(data.clone(), &cfg, 4, None, |_| {}).unwrap();
    for (name, t) in two.net.params.iter() {
        if name.starts_with("motion.") {
            assert!(four.net.params.get(name).unwrap().bit_eq(t), "{name}");
        }
    }
    assert!(!four.net.params.get("illum.out.w").unwrap().bit_eq(two.net.params.get("illum.out.w").unwrap()));
}

#[test]
fn nan_weights_abort_with_diagnostics() {
    let (_, data) = dataset();
    let mut net = NetBundle::init(&TrainConfig::desk().net, 2).unwrap();
    net.params.get_mut("den.conv_out.b").unwrap().data_mut()[0] = f64::NAN;
    match train(data.clone(), &short(1, 2), 2, Some(net), |_| {}) {
        Err(Error::NonFinite { step, detail }) => {
            assert_eq!(step, 0);
            assert!(detail.contains("samples"), "{detail}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let (_, data) = dataset();
    let mut cfg = short(1, 1);
    cfg.net.audio_dim = 16;
    assert!(matches!(train(data.clone(), &cfg, 1, None, |_| {}), Err(Error::Config(_))));
}
