//! One function per subcommand. Each takes its parsed flags and writes
//! only below its `--out` directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use uniavatar_conditioning::{
    infer, load_checkpoint, loss_log_csv, plan_shapes, save_checkpoint, train, Checkpoint,
    DiffusionSchedule, InferMode, InferOptions, NetConfig, ShapePlan,
};
use uniavatar_core::rng::stream;
use uniavatar_mcss::{generate_synthetic_dataset, Dataset, DatasetInfo, DatasetSpec};
use uniavatar_render::guidance::GuidanceRecord;
use uniavatar_render::model::{load_model, parse_params_jsonl, save_model, synthesize_model};
use uniavatar_render::{
    apply_condition_dropout, apply_lips_mask, render_illumination_guidance,
    render_motion_guidance, GuidanceKind, SyntheticModelSpec,
};

use crate::config::{Preset, RunConfig};
use crate::error::{io_at, CliError, Result};
use crate::inputs::InferInputs;
use crate::threads::worker_threads;
use crate::verify::{self, Fault, Suite, VerifyOptions, VerifyReport};

/// Name of the model file written by `gen-model`.
pub const MODEL_FILE: &str = "face.model";
pub const GUIDANCE_MANIFEST: &str = "manifest.jsonl";
pub const VERIFY_REPORT: &str = "verify.json";

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_at(out))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_at(path))
}

// ---- gen-model ------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct GenModelArgs {
    /// Requested vertex count (at least 8); the grid keeps the largest
    /// full rectangle that fits.
    #[arg(long, default_value_t = 144)]
    pub vertices: usize,
    #[arg(long, default_value_t = 4)]
    pub shape_dims: usize,
    #[arg(long, default_value_t = 4)]
    pub expr_dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `face.model`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_model(a: &GenModelArgs) -> Result<PathBuf> {
    let spec = SyntheticModelSpec {
        vertices: a.vertices,
        shape_dims: a.shape_dims,
        expr_dims: a.expr_dims,
    };
    let model = synthesize_model(spec, &mut stream(a.seed, "model", 0))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    create_out(&a.out)?;
    let path = a.out.join(MODEL_FILE);
    save_model(&model, &path)?;
    Ok(path)
}

// ---- gen-data -------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// JSON dataset spec; omitted fields take their defaults (2 identities,
    /// 2 lightings, 2 clips of 8 frames at 64²).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(a: &GenDataArgs) -> Result<DatasetInfo> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str::<DatasetSpec>(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => DatasetSpec::default(),
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    create_out(&a.out)?;
    Ok(generate_synthetic_dataset(&spec, a.seed, &a.out)?)
}

// ---- render-guidance ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Motion,
    Illum,
}

#[derive(Args, Debug, Clone)]
pub struct RenderGuidanceArgs {
    /// Face model file.
    #[arg(long)]
    pub model: PathBuf,
    /// FaceParams JSON lines; one guidance image per line.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// TOML run config; supplies resolution and the [guidance] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Apply lips masking and dropout with the configured probabilities.
    #[arg(long)]
    pub augment: bool,
    /// Seed for --augment; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn render_guidance(a: &RenderGuidanceArgs) -> Result<Vec<GuidanceRecord>> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let res = run.train_config(1)?.net.resolution;
    let g = run.guidance.clone();
    let model = load_model(&a.model)?;
    let params = parse_params_jsonl(&read_text(&a.params)?)?;
    let seed = a.seed.unwrap_or(run.seed());

    create_out(&a.out)?;
    let params_copy = "params.jsonl";
    fs::copy(&a.params, a.out.join(params_copy)).map_err(io_at(&a.params))?;
    let (kind, tag) = match a.kind {
        KindArg::Motion => (GuidanceKind::Motion, "motion"),
        KindArg::Illum => (GuidanceKind::Illumination, "illum"),
    };
    let mut records = Vec::with_capacity(params.len());
    let mut manifest = String::new();
    for (i, p) in params.iter().enumerate() {
        let mut rng = stream(seed, "render-guidance", i as u64);
        let mut img = match kind {
            GuidanceKind::Motion => render_motion_guidance(&model, p, &g, res, res)?,
            GuidanceKind::Illumination => {
                render_illumination_guidance(&model, &p.lighting, &p.camera, &g, res, res)?
            }
        };
        if a.augment {
            if kind == GuidanceKind::Motion {
                img = apply_lips_mask(img, &mut rng, g.lips_mask_prob)?;
                img = apply_condition_dropout(img, &mut rng, g.motion_dropout_prob);
            } else {
                img = apply_condition_dropout(img, &mut rng, g.global_dropout_prob);
            }
        }
        let image_file = format!("{tag}_{i:05}.png");
        let mask_file = format!("{tag}_{i:05}_mask.png");
        img.image.save_png(&a.out.join(&image_file))?;
        img.coverage.save_png(&a.out.join(&mask_file))?;
        let rec = GuidanceRecord {
            sample_id: i as u64,
            kind,
            params_file: params_copy.into(),
            image_file,
            mask_file,
            dropped: img.dropped,
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
        records.push(rec);
    }
    write(&a.out.join(GUIDANCE_MANIFEST), manifest)?;
    Ok(records)
}

// ---- train ----------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Dataset root; overrides `data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to start from; required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides the stage's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Receives `stage<N>.ckpt` and `loss_stage<N>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
}

pub fn run_train(a: &TrainArgs) -> Result<TrainResult> {
    let mut run = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.steps {
        if a.stage == 1 {
            run.stage1_steps = Some(s);
        } else {
            run.stage2_steps = Some(s);
        }
    }
    let seed = a.seed.unwrap_or(run.seed());
    let mut cfg = run.train_config(a.stage)?;
    cfg.workers = worker_threads();
    let data_dir = a
        .data
        .clone()
        .or(run.data.clone())
        .ok_or_else(|| CliError::Usage("train needs --data or `data` in the config".into()))?;
    let init_path = a.init.clone().or(run.init.clone());
    let init = match &init_path {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.meta.net != cfg.net {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different network configuration",
                    p.display()
                )));
            }
            Some(ck.net)
        }
        None => None,
    };
    let data = Arc::new(Dataset::open(&data_dir)?);
    let outcome = train(data, &cfg, seed, init, |_| {})?;

    create_out(&a.out)?;
    let ckpt = a.out.join(format!("stage{}.ckpt", a.stage));
    let log = a.out.join(format!("loss_stage{}.csv", a.stage));
    let final_loss = outcome.log.last().map_or(f64::NAN, |r| r.total);
    write(&log, loss_log_csv(&outcome.log))?;
    save_checkpoint(&Checkpoint::new(outcome.net, &cfg, cfg.steps, seed)?, &ckpt)?;
    Ok(TrainResult {
        checkpoint: ckpt,
        log,
        final_loss,
    })
}

// ---- infer ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Audio,
    Motion,
    Illum,
}

impl From<ModeArg> for InferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Audio => InferMode::Audio,
            ModeArg::Motion => InferMode::Motion,
            ModeArg::Illum => InferMode::Illum,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON document naming reference, audio, model, params, lighting and
    /// frame count; relative paths resolve against its directory.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames denoised jointly.
    #[arg(long, default_value_t = 4)]
    pub window: usize,
    /// Generated frames carried into the next window.
    #[arg(long, default_value_t = 2)]
    pub context: usize,
    /// TOML run config; only its [guidance] table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Receives `frame_00000.png`, `frame_00001.png`, ...
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_infer(a: &InferArgs) -> Result<Vec<PathBuf>> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (inputs, base) = InferInputs::load(&a.inputs)?;
    let req = inputs.request(&base)?;
    let schedule = DiffusionSchedule::linear(&ck.meta.schedule)?;
    let opts = InferOptions {
        window: a.window,
        context: a.context,
        guidance: run.guidance,
    };
    let frames = infer(&ck.net, &schedule, a.mode.into(), &req, &opts, a.seed)?;
    create_out(&a.out)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let p = a.out.join(format!("frame_{i:05}.png"));
        f.save_png(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

// ---- shape-check ----------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct ShapeCheckArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
}

pub fn shape_check(a: &ShapeCheckArgs) -> Result<ShapePlan> {
    Ok(plan_shapes(&NetConfig::preset(a.preset.name())?)?)
}

// ---- verify ---------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries sampled per desk-network tensor by the grads suite.
    #[arg(long, default_value_t = 2)]
    pub grad_entries: usize,
    /// Optional directory for `verify.json` and scratch data.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

pub fn run_verify(a: &VerifyArgs) -> Result<VerifyReport> {
    let opts = VerifyOptions {
        seed: a.seed,
        threads: worker_threads(),
        fault: a.inject_fault,
        scratch: a.out.clone(),
        grad_entries_per_tensor: a.grad_entries,
    };
    let report = verify::run(a.suite, &opts)?;
    if let Some(out) = &a.out {
        create_out(out)?;
        write(&out.join(VERIFY_REPORT), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
