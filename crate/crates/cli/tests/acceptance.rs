//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `PASS` / `FAIL` line (visible with `--nocapture`). The tests hold
//! a shared lock so the timed ones never compete for the CPU.

use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use uniavatar_cli::verify::{run_one, Suite, SuiteReport, VerifyOptions};
use uniavatar_cli::threads::worker_threads;
use uniavatar_conditioning::{
    infer, plan_shapes, train, DiffusionSchedule, InferMode, InferOptions, InferRequest, NetConfig,
    TrainConfig, TrainOutcome,
};
use uniavatar_core::utsr;
use uniavatar_mcss::{composite_background, generate_synthetic_dataset, Dataset, DatasetSpec};
use uniavatar_render::{Image, Lighting, Mask};

fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("{tag} [{n:>2}] {title}: {detail}");
    assert!(passed, "criterion {n} ({title}) failed: {detail}");
}

fn opts() -> VerifyOptions {
    VerifyOptions {
        threads: worker_threads(),
        ..VerifyOptions::default()
    }
}

fn suite(s: Suite) -> (SuiteReport, Duration) {
    let t = Instant::now();
    let r = run_one(s, &opts()).unwrap();
    (r, t.elapsed())
}

fn summary(r: &SuiteReport) -> String {
    let failed = r.failures();
    if failed.is_empty() {
        let details: Vec<String> = r
            .checks
            .iter()
            .filter(|c| !c.detail.is_empty())
            .map(|c| format!("{} {}", c.name.split_once('.').map_or(c.name.as_str(), |(_, n)| n), c.detail))
            .collect();
        format!("{} checks, {:.1} s; {}", r.checks.len(), r.seconds, details.join("; "))
    } else {
        format!("failed {failed:?}")
    }
}

#[test]
fn criterion_01_shape_conformance() {
    let _g = exclusive();
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_uniavatar"))
        .args(["shape-check", "--preset", "paper"])
        .output()
        .unwrap();
    let elapsed = t.elapsed();
    let table = String::from_utf8_lossy(&out.stdout);
    let plan = plan_shapes(&NetConfig::paper()).unwrap();
    let tokens: Vec<Vec<usize>> = plan.tap_tokens.clone();
    let want = [[4096, 320], [4096, 320], [1024, 640], [1024, 640], [256, 1280], [256, 1280]];
    let ok = out.status.success()
        && elapsed < Duration::from_secs(1)
        && tokens.iter().zip(want).all(|(a, b)| a.as_slice() == b)
        && tokens.len() == 6
        && plan.input == [3, 512, 512]
        && plan.illumination == [320, 64, 64]
        && table.matches("4096×320").count() == 2
        && table.matches("1024×640").count() == 2
        && table.matches("256×1280").count() == 2
        && table.contains("320×64×64");
    report(1, "shape conformance", ok, &format!("taps {tokens:?}, illumination {:?}, {elapsed:.2?}", plan.illumination));
}

#[test]
fn criterion_02_sh_shading_oracle() {
    let _g = exclusive();
    let (r, _) = suite(Suite::Sh);
    report(2, "SH shading oracle", r.passed, &summary(&r));
}

#[test]
fn criterion_03_disentanglement() {
    let _g = exclusive();
    let (r, t) = suite(Suite::Disentangle);
    report(3, "disentanglement", r.passed && t < Duration::from_secs(30), &summary(&r));
}

#[test]
fn criterion_04_gradient_check() {
    let _g = exclusive();
    let (r, t) = suite(Suite::Grads);
    report(4, "gradient check", r.passed && t < Duration::from_secs(300), &summary(&r));
}

#[test]
fn criterion_05_zero_init() {
    let _g = exclusive();
    let (r, _) = suite(Suite::ZeroInit);
    report(5, "zero-init contract", r.passed, &summary(&r));
}

#[test]
fn criterion_06_gating_algebra() {
    let _g = exclusive();
    let (r, _) = suite(Suite::Gating);
    report(6, "gating algebra", r.passed, &summary(&r));
}

#[test]
fn criterion_07_loss_weighting() {
    let _g = exclusive();
    let (r, _) = suite(Suite::Weighting);
    report(7, "loss weighting", r.passed, &summary(&r));
}

#[test]
fn criterion_08_cross_source_sampling() {
    let _g = exclusive();
    let (r, _) = suite(Suite::Mcss);
    report(8, "cross-source sampling", r.passed, &summary(&r));
}

#[test]
fn criterion_09_blur() {
    let _g = exclusive();
    let (r, _) = suite(Suite::Blur);
    report(9, "blur kernel", r.passed, &summary(&r));
}

fn dataset(spec: &DatasetSpec, seed: u64) -> (tempfile::TempDir, Arc<Dataset>) {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(spec, seed, dir.path()).unwrap();
    let data = Arc::new(Dataset::open(dir.path()).unwrap());
    (dir, data)
}

fn smoothed(log: &[f64], window: usize) -> (f64, f64) {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&log[..window]), mean(&log[log.len() - window..]))
}

#[test]
fn criterion_10_toy_training() {
    let _g = exclusive();
    let (_dir, data) = dataset(&DatasetSpec::default(), 10);
    let cfg = TrainConfig {
        steps: 200,
        workers: worker_threads(),
        ..TrainConfig::desk()
    };
    let t = Instant::now();
    let a = train(data.clone(), &cfg, 10, None, |_| {}).unwrap();
    let elapsed = t.elapsed();
    let b = train(data, &cfg, 10, None, |_| {}).unwrap();
    let totals: Vec<f64> = a.log.iter().map(|r| r.total).collect();
    let (first, last) = smoothed(&totals, 20);
    let drop = 1.0 - last / first;
    let same = a.log == b.log && a.net == b.net;
    report(
        10,
        "toy training",
        drop >= 0.30 && same && elapsed < Duration::from_secs(600),
        &format!("smoothed loss {first:.4} -> {last:.4} ({:.1}% lower), repeat identical {same}, {elapsed:.1?}", 100.0 * drop),
    );
}

fn face_mean(frames: &[Image], masks: &[Arc<Mask>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for (im, m) in frames.iter().zip(masks) {
        let (h, w) = m.dims();
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    sum += im.get(y, x).iter().sum::<f64>();
                    n += 3.0;
                }
            }
        }
    }
    sum / n
}

fn mean_abs_error(frames: &[Image], truth: &[Image]) -> f64 {
    let per: Vec<f64> = frames
        .iter()
        .zip(truth)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// One identity under four lightings, trained long enough to overfit.
fn overfit_toy() -> (tempfile::TempDir, Arc<Dataset>, TrainOutcome, TrainConfig) {
    let spec = DatasetSpec {
        identities: 1,
        lightings: 4,
        clips: 1,
        ..DatasetSpec::default()
    };
    let (dir, data) = dataset(&spec, 1);
    let cfg = TrainConfig {
        steps: 3000,
        workers: worker_threads(),
        ..TrainConfig::desk()
    };
    let out = train(data.clone(), &cfg, 1, None, |_| {}).unwrap();
    (dir, data, out, cfg)
}

#[test]
fn criterion_11_conditioned_inference() {
    let _g = exclusive();
    let (dir, data, out, cfg) = overfit_toy();
    let schedule = DiffusionSchedule::linear(&cfg.schedule).unwrap();
    let id = data.pool.identity_ids()[0].to_string();
    let clips = data.pool.clips(&id).unwrap();
    let (target, source) = (&clips[0], &clips[clips.len() - 1]);
    let bg = data.image(&data.backgrounds.paths[0]).unwrap();
    let composite = |clip: &uniavatar_mcss::ClipRecord, f: usize| {
        let img = data.image(&clip.frames[f]).unwrap();
        let m = data.mask(&clip.masks[f]).unwrap();
        composite_background(&img, &m.to_alpha(), &bg).unwrap()
    };
    let frames = target.frame_count;
    let truth: Vec<Image> = (0..frames).map(|f| composite(target, f)).collect();
    let masks: Vec<Arc<Mask>> = (0..frames).map(|f| data.mask(&target.masks[f]).unwrap()).collect();
    let audio = &utsr::read_file(&Path::new(dir.path()).join(target.audio_path())).unwrap()[0];
    let req = InferRequest {
        reference: composite(source, 0),
        audio: audio.data().chunks(audio.shape()[1]).map(<[f64]>::to_vec).collect(),
        model: Some(data.model(&id).unwrap().clone()),
        params: Some(target.params.clone()),
        lighting: None,
        frames: Some(frames),
    };
    let opts = InferOptions::default();
    let run = |mode, lighting: Option<Lighting>| {
        let r = InferRequest { lighting, ..req.clone() };
        infer(&out.net, &schedule, mode, &r, &opts, 0).unwrap()
    };
    let audio_err = mean_abs_error(&run(InferMode::Audio, None), &truth);
    let motion_err = mean_abs_error(&run(InferMode::Motion, None), &truth);
    let zero = face_mean(&run(InferMode::Illum, Some(Lighting::ZERO)), &masks);
    let ambient = face_mean(&run(InferMode::Illum, Some(Lighting::ambient(2.2))), &masks);
    report(
        11,
        "conditioned inference",
        motion_err < audio_err && zero < ambient,
        &format!("error motion {motion_err:.4} vs audio {audio_err:.4}; face mean zero light {zero:.4} vs ambient {ambient:.4}"),
    );
}
