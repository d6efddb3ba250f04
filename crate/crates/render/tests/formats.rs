use proptest::prelude::*;
use uniavatar_core::rng::stream;
use uniavatar_render::model::{decode_model, encode_model, load_model, parse_params_jsonl, save_model, synthesize_model};
use uniavatar_render::*;

#[test]
fn model_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_model(SyntheticModelSpec { vertices: 64, shape_dims: 2, expr_dims: 5 }, &mut stream(7, "model", 0)).unwrap();
    let p = dir.path().join("face.model");
    save_model(&m, &p).unwrap();
    assert_eq!(load_model(&p).unwrap(), m);
    let again = synthesize_model(SyntheticModelSpec { vertices: 64, shape_dims: 2, expr_dims: 5 }, &mut stream(7, "model", 0)).unwrap();
    assert_eq!(encode_model(&again).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn model_without_bases() {
    let m = synthesize_model(SyntheticModelSpec { vertices: 9, shape_dims: 0, expr_dims: 0 }, &mut stream(1, "model", 0)).unwrap();
    assert_eq!(decode_model(&encode_model(&m).unwrap()).unwrap(), m);
}

#[test]
fn corrupted_models_rejected() {
    let m = synthesize_model(SyntheticModelSpec::default(), &mut stream(2, "model", 0)).unwrap();
    let bytes = encode_model(&m).unwrap();
    assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_model(b"{}\n").is_err());
    assert!(decode_model(b"").is_err());
    let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
    let lied = text.replace("\"faces\":", "\"faces\":1");
    let mut forged = lied.into_bytes();
    forged.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap()..]);
    assert!(decode_model(&forged).is_err());
}

#[test]
fn params_jsonl_round_trip() {
    let m = synthesize_model(SyntheticModelSpec::default(), &mut stream(3, "model", 0)).unwrap();
    let mut p = FaceParams::neutral(&m, Lighting::ambient(0.7));
    p.pose = [0.1, -0.2, 0.3];
    p.expression[1] = 0.123456789012345;
    let text = format!("{}\n{}\n", p.to_json_line().unwrap(), p.to_json_line().unwrap());
    assert_eq!(parse_params_jsonl(&text).unwrap(), vec![p.clone(), p]);
    assert!(parse_params_jsonl("{\"pose\": 1}").is_err());
}

proptest! {
    #[test]
    fn model_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_model(&bytes);
    }

    #[test]
    fn model_decode_survives_bit_flips(i in 0usize..4000, bit in 0u8..8) {
        let m = synthesize_model(SyntheticModelSpec { vertices: 16, shape_dims: 1, expr_dims: 1 }, &mut stream(4, "model", 0)).unwrap();
        let mut bytes = encode_model(&m).unwrap();
        let i = i % bytes.len();
        bytes[i] ^= 1 << bit;
        let _ = decode_model(&bytes);
    }

    #[test]
    fn params_parse_never_panics(s in ".{0,200}") {
        let _ = parse_params_jsonl(&s);
    }
}
