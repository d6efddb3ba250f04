//! The `--inputs` document of `infer`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniavatar_conditioning::InferRequest;
use uniavatar_core::utsr;
use uniavatar_render::model::{load_model, parse_params_jsonl};
use uniavatar_render::{Image, Lighting};

use crate::error::{io_at, CliError, Result};

/// Relative paths are resolved against the directory of the inputs file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferInputs {
    /// Reference portrait (PNG).
    pub reference: PathBuf,
    /// UTSR file whose first tensor is `frames × d_a`.
    pub audio: PathBuf,
    /// Face model; needed by the motion and illum modes.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// FaceParams JSON lines, one per frame.
    #[serde(default)]
    pub params: Option<PathBuf>,
    /// Target SH lighting, 9 RGB triples; needed by the illum mode.
    #[serde(default)]
    pub lighting: Option<Lighting>,
    /// Frames to generate; defaults to the audio length.
    #[serde(default)]
    pub frames: Option<usize>,
}

pub fn parse_infer_inputs(text: &str) -> Result<InferInputs> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("inputs: {e}")))
}

fn rows(t: &uniavatar_core::Tensor) -> Result<Vec<Vec<f64>>> {
    match t.shape() {
        [_, d] if *d > 0 => Ok(t.data().chunks(*d).map(<[f64]>::to_vec).collect()),
        s => Err(CliError::Usage(format!("audio must be a frames × d tensor, got {s:?}"))),
    }
}

impl InferInputs {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((parse_infer_inputs(&text)?, base))
    }

    /// Reads every referenced file.
    pub fn request(&self, base: &Path) -> Result<InferRequest> {
        let at = |p: &Path| base.join(p);
        let reference = Image::load_png(&at(&self.reference))?;
        let audio_blocks = utsr::read_file(&at(&self.audio))?;
        let audio = rows(
            audio_blocks
                .first()
                .ok_or_else(|| CliError::Usage("audio file holds no tensor".into()))?,
        )?;
        let model = self.model.as_ref().map(|p| load_model(&at(p))).transpose()?;
        let params = match &self.params {
            Some(p) => {
                let path = at(p);
                Some(parse_params_jsonl(&std::fs::read_to_string(&path).map_err(io_at(&path))?)?)
            }
            None => None,
        };
        Ok(InferRequest {
            reference,
            audio,
            model,
            params,
            lighting: self.lighting,
            frames: self.frames,
        })
    }
}
