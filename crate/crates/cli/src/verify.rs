//! Property suites behind `uniavatar verify`.
//!
//! Each suite re-derives its expectations independently of the library
//! code under test (explicit SH polynomials, a from-scratch Gaussian,
//! scalar loops) and reports one entry per named invariant.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use uniavatar_conditioning::{
    adaln_modulate, check_network_gradients, denoise_predict, gate_fuse, illumination_encode,
    loss_total, motion_encode, reference_encode, spatial_weight, Conditions, FrameInput, Fwd,
    NetBundle, NetConfig, GRAD_TOLERANCE,
};
use uniavatar_core::rng::stream;
use uniavatar_core::{Graph, Tensor, LAYER_NORM_EPS};
use uniavatar_mcss::{
    assemble_training_sample, build_identity_pool, generate_synthetic_dataset, Dataset,
    DatasetSpec, SamplerConfig,
};
use uniavatar_render::blur::{blur_with_kernel, kernel_1d, sigma};
use uniavatar_render::model::{synthesize_model, Vec3};
use uniavatar_render::{
    apply_lips_mask, render_face, render_illumination_guidance, render_motion_guidance, sh_basis,
    Camera, FaceModel, FaceParams, GuidanceConfig, Image, Lighting, SyntheticModelSpec,
};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// SH shading against a brute-force per-pixel oracle.
    Sh,
    /// Blur kernel σ, normalization and impulse response.
    Blur,
    /// Motion / illumination guidance disentanglement.
    Disentangle,
    /// Gated-fusion algebra.
    Gating,
    /// Zero-initialized conditions leave the denoiser unchanged.
    ZeroInit,
    /// Spatial-loss weighting and objective additivity.
    Weighting,
    /// Cross-source sampling guarantees on a synthetic dataset.
    Mcss,
    /// Finite differences through the full loss.
    Grads,
    All,
}

impl Suite {
    pub const EACH: [Suite; 8] = [
        Suite::Sh,
        Suite::Blur,
        Suite::Disentangle,
        Suite::Gating,
        Suite::ZeroInit,
        Suite::Weighting,
        Suite::Mcss,
        Suite::Grads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sh => "sh",
            Suite::Blur => "blur",
            Suite::Disentangle => "disentangle",
            Suite::Gating => "gating",
            Suite::ZeroInit => "zero-init",
            Suite::Weighting => "weighting",
            Suite::Mcss => "mcss",
            Suite::Grads => "grads",
            Suite::All => "all",
        }
    }
}

/// Deliberate corruption used to show that a suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Scales the centre tap of the blur kernel by 1.05.
    BlurKernel,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub threads: usize,
    pub fault: Option<Fault>,
    /// Where the mcss suite writes its temporary dataset; the system temp
    /// directory when unset.
    pub scratch: Option<PathBuf>,
    /// Random entries checked per desk-preset tensor by the grads suite.
    pub grad_entries_per_tensor: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            fault: None,
            scratch: None,
            grad_entries_per_tensor: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

struct Checks {
    suite: &'static str,
    out: Vec<Check>,
}

impl Checks {
    fn new(suite: &'static str) -> Self {
        Self { suite, out: Vec::new() }
    }

    fn add(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.out.push(Check {
            name: format!("{}.{name}", self.suite),
            passed,
            detail: detail.into(),
        });
    }

    /// `value <= bound`, reporting both.
    fn within(&mut self, name: &str, value: f64, bound: f64) {
        self.add(name, value <= bound, format!("{value:e} (bound {bound:e})"));
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let list: Vec<Suite> = if suite == Suite::All {
        Suite::EACH.to_vec()
    } else {
        vec![suite]
    };
    let mut suites = Vec::with_capacity(list.len());
    for s in list {
        suites.push(run_one(s, opts)?);
    }
    Ok(VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

pub fn run_one(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut c = Checks::new(suite.name());
    match suite {
        Suite::Sh => sh(&mut c, opts)?,
        Suite::Blur => blur(&mut c, opts)?,
        Suite::Disentangle => disentangle(&mut c, opts)?,
        Suite::Gating => gating(&mut c, opts)?,
        Suite::ZeroInit => zero_init(&mut c, opts)?,
        Suite::Weighting => weighting(&mut c)?,
        Suite::Mcss => mcss(&mut c, opts)?,
        Suite::Grads => grads(&mut c, opts)?,
        Suite::All => return Err(CliError::Usage("`all` is not a single suite".into())),
    }
    Ok(SuiteReport {
        suite: suite.name().into(),
        passed: c.out.iter().all(|k| k.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks: c.out,
    })
}

// ---- shared helpers -------------------------------------------------------

fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn random_model(seed: u64, id: u64) -> Result<FaceModel> {
    let spec = SyntheticModelSpec {
        vertices: 100,
        shape_dims: 3,
        expr_dims: 3,
    };
    Ok(synthesize_model(spec, &mut stream(seed, "verify-model", id))?)
}

fn random_lighting(rng: &mut impl Rng) -> Lighting {
    Lighting(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
}

fn random_params(model: &FaceModel, rng: &mut impl Rng) -> FaceParams {
    FaceParams {
        pose: std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
        shape: (0..model.shape_dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
        expression: (0..model.expr_dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
        camera: Camera {
            scale: rng.random_range(0.8..1.2),
            tx: rng.random_range(-0.1..0.1),
            ty: rng.random_range(-0.1..0.1),
        },
        lighting: random_lighting(rng),
    }
}

// ---- sh -------------------------------------------------------------------

/// Real SH basis up to band 2, written out term by term.
fn oracle_basis(n: Vec3) -> [f64; 9] {
    let (x, y, z) = (n[0], n[1], n[2]);
    [
        0.282095,
        0.488603 * y,
        0.488603 * z,
        0.488603 * x,
        1.092548 * x * y,
        1.092548 * y * z,
        0.315392 * (3.0 * z * z - 1.0),
        1.092548 * x * z,
        0.546274 * (x * x - y * y),
    ]
}

fn sh(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    let z = sh_basis([0.0, 0.0, 1.0])?;
    c.add(
        "closed_form_z",
        z == [0.282095, 0.0, 0.488603, 0.0, 0.0, 0.0, 0.630784, 0.0, 0.0],
        format!("{z:?}"),
    );
    let x = sh_basis([1.0, 0.0, 0.0])?;
    c.add(
        "closed_form_x",
        x == [0.282095, 0.0, 0.0, 0.488603, 0.0, 0.0, -0.315392, 0.0, 0.546274],
        format!("{x:?}"),
    );

    const SCENES: u64 = 20;
    let mut worst = 0.0f64;
    let mut covered = 0usize;
    for scene in 0..SCENES {
        let model = random_model(opts.seed, scene)?;
        let params = random_params(&model, &mut stream(opts.seed, "verify-sh", scene));
        let out = render_face(&model, &params, &params.lighting, 64, 64)?;
        covered += out.coverage.any() as usize;
        let g = &out.gbuffer;
        for k in 0..64 * 64 {
            let (y, x) = (k / 64, k % 64);
            let got = out.radiance.get(y, x);
            for ch in 0..3 {
                let want = if out.coverage.get(y, x) {
                    let h = oracle_basis(g.normal[k]);
                    let mut s = 0.0;
                    for t in 0..9 {
                        s += params.lighting.0[t][ch] * h[t];
                    }
                    g.albedo[k][ch] * s
                } else {
                    0.0
                };
                worst = worst.max((got[ch] - want).abs());
            }
        }
    }
    c.add(
        "scenes_cover_pixels",
        covered == SCENES as usize,
        format!("{covered}/{SCENES} scenes draw a face"),
    );
    c.within("brute_force_64x64", worst, 1e-12);
    Ok(())
}

// ---- blur -----------------------------------------------------------------

const BLUR_RADIUS: usize = 15;

fn blur(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    let r = BLUR_RADIUS;
    let mut taps = kernel_1d(r)?;
    if opts.fault == Some(Fault::BlurKernel) {
        taps[r] *= 1.05;
    }
    c.add("sigma", sigma(r) == 5.0, format!("σ = {}", sigma(r)));

    let total: f64 = taps.iter().sum();
    c.within("sums_to_one", (total - 1.0).abs(), 1e-9);

    let s = 5.0f64;
    let raw: Vec<f64> = (-(r as i64)..=r as i64)
        .map(|i| (-((i * i) as f64) / (2.0 * s * s)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let dev = taps
        .iter()
        .zip(&raw)
        .map(|(a, b)| (a - b / z).abs())
        .fold(0.0, f64::max);
    c.within("matches_gaussian", dev, 1e-12);
    c.add(
        "symmetric_positive",
        (0..=r).all(|i| taps[i] == taps[2 * r - i]) && taps.iter().all(|&v| v > 0.0),
        "",
    );

    let n = 64;
    let mut impulse = Image::new(n, n);
    impulse.set(n / 2, n / 2, [1.0; 3]);
    let out = blur_with_kernel(&impulse, &taps)?;
    let mut dev = 0.0f64;
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as i64 - (n / 2) as i64, x as i64 - (n / 2) as i64);
            let want = if dy.unsigned_abs() as usize <= r && dx.unsigned_abs() as usize <= r {
                taps[(dy + r as i64) as usize] * taps[(dx + r as i64) as usize]
            } else {
                0.0
            };
            for v in out.get(y, x) {
                dev = dev.max((v - want).abs());
            }
        }
    }
    c.within("impulse_response", dev, 1e-15);
    Ok(())
}

// ---- disentangle ----------------------------------------------------------

fn disentangle(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    const PAIRS: u64 = 100;
    let cfg = GuidanceConfig::default();
    let mut motion_same = 0;
    let mut illum_same = 0;
    let mut motion_moves = 0;
    let mut illum_moves = 0;
    for pair in 0..PAIRS {
        let model = random_model(opts.seed, 1000 + pair % 10)?;
        let mut rng = stream(opts.seed, "verify-pairs", pair);
        let a = random_params(&model, &mut rng);
        let b = random_params(&model, &mut rng);

        let relit = FaceParams {
            lighting: b.lighting,
            ..a.clone()
        };
        let ma = render_motion_guidance(&model, &a, &cfg, 64, 64)?;
        let mr = render_motion_guidance(&model, &relit, &cfg, 64, 64)?;
        motion_same += ma.image.bit_eq(&mr.image) as usize;
        let mb = render_motion_guidance(&model, &b, &cfg, 64, 64)?;
        motion_moves += !ma.image.bit_eq(&mb.image) as usize;

        // same lighting and camera, everything else from b
        let moved = FaceParams {
            lighting: a.lighting,
            camera: a.camera,
            ..b.clone()
        };
        let ia = render_illumination_guidance(&model, &a.lighting, &a.camera, &cfg, 64, 64)?;
        let im = render_illumination_guidance(&model, &moved.lighting, &moved.camera, &cfg, 64, 64)?;
        illum_same += ia.image.bit_eq(&im.image) as usize;
        let ib = render_illumination_guidance(&model, &b.lighting, &a.camera, &cfg, 64, 64)?;
        illum_moves += !ia.image.bit_eq(&ib.image) as usize;
    }
    let n = PAIRS as usize;
    c.add(
        "motion_ignores_lighting",
        motion_same == n,
        format!("{motion_same}/{n} bit-identical"),
    );
    c.add(
        "illumination_ignores_motion",
        illum_same == n,
        format!("{illum_same}/{n} bit-identical"),
    );
    c.add(
        "motion_tracks_geometry",
        motion_moves == n,
        format!("{motion_moves}/{n} differ"),
    );
    c.add(
        "illumination_tracks_lighting",
        illum_moves == n,
        format!("{illum_moves}/{n} differ"),
    );
    Ok(())
}

// ---- gating ---------------------------------------------------------------

fn gating(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    const TENSORS: usize = 10_000;
    let mut rng = stream(opts.seed, "verify-gate", 0);
    let half = 0.5f64.atanh();
    let (mut zero_ok, mut bound_ok, mut mono_ok) = (true, true, true);
    let (mut half_err, mut sat_err) = (0.0f64, 0.0f64);
    for i in 0..TENSORS {
        let shape = [1 + i % 5, 1 + (i / 5) % 4];
        let s = randn(&mut rng, &shape, 1.0);
        let p = randn(&mut rng, &shape, 3.0);
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let mut run = |p: Tensor| -> Result<Tensor> {
            let pv = g.constant(p);
            let out = gate_fuse(&mut g, sv, pv)?;
            Ok(g.value(out).clone())
        };
        let zero = run(Tensor::zeros(&shape))?;
        let halved = run(Tensor::full(&shape, half))?;
        let sat = run(Tensor::full(&shape, 50.0))?;
        let neg = run(Tensor::full(&shape, -50.0))?;
        let gen = run(p.clone())?;
        let bumped = run(p.map(|v| v + 0.25))?;
        zero_ok &= zero.data().iter().all(|&v| v == 0.0);
        for k in 0..s.len() {
            let sk = s.data()[k];
            half_err = half_err.max((halved.data()[k] - 0.5 * sk).abs());
            sat_err = sat_err
                .max((sat.data()[k] - sk).abs())
                .max((neg.data()[k] + sk).abs());
            bound_ok &= gen.data()[k].abs() <= sk.abs();
            if sk > 0.0 {
                mono_ok &= bumped.data()[k] >= gen.data()[k];
            }
        }
    }
    c.add("zero_gate", zero_ok, format!("{TENSORS} tensors"));
    c.within("artanh_half_halves", half_err, 1e-12);
    c.within("saturation", sat_err, 1e-12);
    c.add("bounded_by_input", bound_ok, "");
    c.add("monotone_in_gate", mono_ok, "");
    Ok(())
}

// ---- zero-init ------------------------------------------------------------

fn zero_init(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    let cfg = NetConfig::desk();
    let net = NetBundle::init(&cfg, opts.seed)?;
    let mut rng = stream(opts.seed, "verify-zero-init", 0);
    let (r, l) = (cfg.resolution, cfg.latent_size());
    let z = randn(&mut rng, &[3, l, l], 1.0);
    let reference = randn(&mut rng, &[3, l, l], 0.5);
    let motion = randn(&mut rng, &[3, r, r], 0.5);
    let illum = randn(&mut rng, &[3, r, r], 0.5);
    let audio = randn(&mut rng, &[cfg.audio_window, cfg.audio_dim], 1.0);
    let expr = randn(&mut rng, &[1, cfg.expr_dims], 1.0);

    let predict = |with_extra: bool| -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &net.params);
        let rv = f.g.constant(reference.clone());
        let mv = f.g.constant(motion.clone());
        let mut cond = Conditions {
            reference: Some(reference_encode(&mut f, &cfg, rv)?),
            motion: Some(motion_encode(&mut f, &cfg, mv)?),
            ..Conditions::default()
        };
        let mut feature = None;
        if with_extra {
            let iv = f.g.constant(illum.clone());
            let ill = illumination_encode(&mut f, &cfg, iv)?;
            feature = Some(ill);
            cond.illumination = Some(ill);
            cond.audio = Some(f.g.constant(audio.clone()));
            cond.expression = Some(f.g.constant(expr.clone()));
        }
        let zv = f.g.constant(z.clone());
        let out = denoise_predict(&mut f, &cfg, &[FrameInput { z: zv, t: 17, cond }], false)?;
        Ok((g.value(out[0]).clone(), feature.map(|v| g.value(v).clone())))
    };
    let (plain, _) = predict(false)?;
    let (full, feature) = predict(true)?;
    let feature = feature.expect("requested");
    c.add(
        "illumination_feature_is_zero",
        feature.data().iter().all(|&v| v == 0.0),
        format!("{:?}", feature.shape()),
    );
    c.add(
        "conditions_bypass_bitwise",
        plain.bit_eq(&full),
        format!("{} outputs", plain.len()),
    );

    let x = randn(&mut rng, &[9, cfg.channels[0]], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let ones = g.constant(Tensor::ones(&[cfg.channels[0]]));
    let zeros = g.constant(Tensor::zeros(&[cfg.channels[0]]));
    let ln = g.layer_norm(xv, ones, zeros, LAYER_NORM_EPS)?;
    let ada = adaln_modulate(&mut g, xv, zeros, zeros)?;
    c.add("adaln_identity_bitwise", g.value(ln).bit_eq(g.value(ada)), "");
    Ok(())
}

// ---- weighting ------------------------------------------------------------

fn weighting(c: &mut Checks) -> Result<()> {
    for steps in [50usize, 1000] {
        let w0 = spatial_weight(0, steps)?;
        let wh = spatial_weight(steps / 2, steps)?;
        let wt = spatial_weight(steps, steps)?;
        c.add(&format!("t0_is_one_T{steps}"), w0 == 1.0, format!("{w0}"));
        c.within(&format!("half_is_sqrt_half_T{steps}"), (wh - 0.5f64.sqrt()).abs(), 1e-12);
        c.add(&format!("tT_is_zero_T{steps}"), wt == 0.0, format!("{wt}"));
        let decreasing = (0..steps).all(|t| {
            spatial_weight(t + 1, steps).unwrap_or(f64::NAN) < spatial_weight(t, steps).unwrap_or(f64::NAN)
        });
        c.add(&format!("strictly_decreasing_T{steps}"), decreasing, "");
    }

    let mut rng = stream(0, "verify-additivity", 0);
    let mut exact = true;
    for i in 0..1000 {
        let (a, b) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let lambda = if i == 0 { 0.1 } else { rng.random_range(0.0..1.0) };
        let mut g = Graph::new();
        let av = g.constant(Tensor::scalar(a));
        let bv = g.constant(Tensor::scalar(b));
        let t = loss_total(&mut g, av, bv, lambda)?;
        exact &= g.value(t).item() == Some(a + lambda * b);
    }
    let mut g = Graph::new();
    let av = g.constant(Tensor::scalar(0.5));
    let bv = g.constant(Tensor::scalar(0.2));
    let t = loss_total(&mut g, av, bv, 0.1)?;
    c.add(
        "objective_additive",
        exact && g.value(t).item() == Some(0.5 + 0.1 * 0.2),
        format!("0.5 + 0.1·0.2 = {:?}", g.value(t).item()),
    );
    Ok(())
}

// ---- mcss -----------------------------------------------------------------

fn mcss(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    let dir = match &opts.scratch {
        Some(p) => {
            std::fs::create_dir_all(p).map_err(crate::error::io_at(p))?;
            tempfile::tempdir_in(p)
        }
        None => tempfile::tempdir(),
    }
    .map_err(|e| CliError::Runtime(format!("scratch directory: {e}")))?;
    let spec = DatasetSpec {
        identities: 2,
        lightings: 2,
        clips: 2,
        frames: 8,
        resolution: 64,
        ..DatasetSpec::default()
    };
    generate_synthetic_dataset(&spec, opts.seed, dir.path())?;
    let pool = build_identity_pool(dir.path())?;
    let frames: usize = pool.identities.values().flatten().map(|r| r.frame_count).sum();
    c.add(
        "dataset_counts",
        pool.num_clips() == 8 && frames == 64,
        format!("{} clips, {frames} frames", pool.num_clips()),
    );

    let data = Dataset::open(dir.path())?;
    let cfg = SamplerConfig::default();
    const SAMPLES: u64 = 1000;
    let (mut cross, mut stable) = (0, 0);
    for id in 0..SAMPLES {
        let s = assemble_training_sample(&data, &cfg, opts.seed, id)?;
        cross += (s.reference_clip != s.target_clip
            && !s.selection.intra_source
            && s.reference_clip.starts_with(&s.identity_id)
            && s.target_clip.starts_with(&s.identity_id)) as usize;
        let bg = s.background_region()?;
        let (h, w) = bg.dims();
        let same = s.target_frames.iter().all(|t| {
            (0..h).all(|y| (0..w).all(|x| !bg.get(y, x) || t.get(y, x) == s.reference_image.get(y, x)))
        });
        stable += same as usize;
    }
    let n = SAMPLES as usize;
    c.add("cross_source", cross == n, format!("{cross}/{n} samples"));
    c.add("background_stable", stable == n, format!("{stable}/{n} samples"));

    let model = data.model(&pool.identity_ids()[0].to_string())?;
    let params = &pool.identities.values().next().expect("non-empty pool")[0].params[0];
    let base = render_motion_guidance(model, params, &cfg.guidance, 64, 64)?;
    const DRAWS: u64 = 10_000;
    let mut rng = stream(opts.seed, "verify-lips", 0);
    let mut masked = 0;
    for _ in 0..DRAWS {
        masked += apply_lips_mask(base.clone(), &mut rng, cfg.guidance.lips_mask_prob)?.lips_masked as usize;
    }
    let f = masked as f64 / DRAWS as f64;
    c.add(
        "lips_mask_frequency",
        (0.38..=0.42).contains(&f),
        format!("{f:.4} over {DRAWS} draws at p = {}", cfg.guidance.lips_mask_prob),
    );
    Ok(())
}

// ---- grads ----------------------------------------------------------------

fn grads(c: &mut Checks, opts: &VerifyOptions) -> Result<()> {
    let small = check_network_gradients(&NetConfig::preset("gradcheck")?, opts.seed, None, opts.threads)?;
    c.add(
        "reduced_width_every_entry",
        small.report.max_rel_error < GRAD_TOLERANCE,
        format!(
            "max relative error {:e} (threshold {GRAD_TOLERANCE:e}) over {} of {} weights, worst {:?}",
            small.report.max_rel_error, small.checked, small.weights, small.report.worst
        ),
    );
    let desk = check_network_gradients(
        &NetConfig::desk(),
        opts.seed,
        Some(opts.grad_entries_per_tensor),
        opts.threads,
    )?;
    c.add(
        "desk_sampled_entries",
        desk.report.max_rel_error < GRAD_TOLERANCE,
        format!(
            "max relative error {:e} (threshold {GRAD_TOLERANCE:e}) over {} of {} weights, worst {:?}",
            desk.report.max_rel_error, desk.checked, desk.weights, desk.report.worst
        ),
    );
    Ok(())
}
