//! Bodies of the fuzz targets, shared with the corpus replay test. Each
//! takes arbitrary bytes, must never panic, and checks that anything it
//! accepts survives an encode/decode round trip where an encoder exists.

use uniavatar_conditioning::{decode_checkpoint, encode_checkpoint};
use uniavatar_core::utsr;
use uniavatar_mcss::pool::parse_manifest;
use uniavatar_mcss::{ClipMeta, DatasetSpec};
use uniavatar_render::guidance::parse_guidance_manifest;
use uniavatar_render::model::{decode_model, encode_model, parse_params_jsonl};

use crate::config::RunConfig;
use crate::inputs::parse_infer_inputs;

pub type Target = fn(&[u8]);

/// `(name, body)` for every target; names match `fuzz/fuzz_targets/*.rs`
/// and the corpus directories.
pub const TARGETS: [(&str, Target); 10] = [
    ("utsr", utsr_decode),
    ("face_model", face_model),
    ("params_jsonl", params_jsonl),
    ("clip_meta", clip_meta),
    ("dataset_manifest", dataset_manifest),
    ("dataset_spec", dataset_spec),
    ("guidance_manifest", guidance_manifest),
    ("checkpoint", checkpoint),
    ("run_config", run_config),
    ("infer_inputs", infer_inputs),
];

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn utsr_decode(data: &[u8]) {
    if let Ok(ts) = utsr::decode_all(data) {
        let mut again = Vec::new();
        for t in &ts {
            utsr::encode_into(t, &mut again).expect("decoded tensor re-encodes");
        }
        assert_eq!(utsr::decode_all(&again).expect("re-decodes"), ts);
    }
}

pub fn face_model(data: &[u8]) {
    if let Ok(m) = decode_model(data) {
        let bytes = encode_model(&m).expect("decoded model re-encodes");
        assert_eq!(decode_model(&bytes).expect("re-decodes"), m);
    }
}

pub fn params_jsonl(data: &[u8]) {
    if let Some(t) = text(data) {
        if let Ok(ps) = parse_params_jsonl(t) {
            let lines: Vec<String> = ps.iter().map(|p| p.to_json_line().expect("serializes")).collect();
            assert_eq!(parse_params_jsonl(&lines.join("\n")).expect("re-parses"), ps);
        }
    }
}

pub fn clip_meta(data: &[u8]) {
    if let Some(t) = text(data) {
        let _ = ClipMeta::parse(t);
    }
}

pub fn dataset_manifest(data: &[u8]) {
    if let Some(t) = text(data) {
        let _ = parse_manifest(t);
    }
}

pub fn dataset_spec(data: &[u8]) {
    if let Ok(spec) = serde_json::from_slice::<DatasetSpec>(data) {
        let _ = spec.validate();
    }
}

pub fn guidance_manifest(data: &[u8]) {
    if let Some(t) = text(data) {
        let _ = parse_guidance_manifest(t);
    }
}

pub fn checkpoint(data: &[u8]) {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck).expect("decoded checkpoint re-encodes");
        assert_eq!(decode_checkpoint(&bytes).expect("re-decodes"), ck);
    }
}

pub fn run_config(data: &[u8]) {
    if let Some(t) = text(data) {
        if let Ok(c) = RunConfig::parse(t) {
            let _ = c.train_config(1);
            let _ = c.train_config(2);
        }
    }
}

pub fn infer_inputs(data: &[u8]) {
    if let Some(t) = text(data) {
        let _ = parse_infer_inputs(t);
    }
}
