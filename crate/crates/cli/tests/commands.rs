use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use uniavatar_mcss::build_identity_pool;
use uniavatar_render::guidance::parse_guidance_manifest;
use uniavatar_render::model::load_model;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uniavatar"));
    c.env("UNIAVATAR_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_SPEC: &str = r#"{"identities":1,"lightings":1,"clips":2,"frames":4,"backgrounds":2}"#;

const TINY_RUN: &str = "seed = 3\nschedule_steps = 6\nstage1_steps = 3\nstage2_steps = 2\nbatch = 1\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn ckpt(&self) -> PathBuf {
        self.dir.path().join("train").join("stage1.ckpt")
    }
    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }
}

/// One tiny dataset and one 3-step stage-1 checkpoint shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        let spec = f.dir.path().join("spec.json");
        std::fs::write(&spec, TINY_SPEC).unwrap();
        std::fs::write(f.config(), TINY_RUN).unwrap();
        let o = run(&["gen-data", "--spec", s(&spec), "--seed", "5", "--out", s(&f.data())]);
        assert_eq!(code(&o), 0, "{o:?}");
        let out = f.dir.path().join("train");
        let o = run(&["train", "--stage", "1", "--data", s(&f.data()), "--config", s(&f.config()), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{o:?}");
        f
    })
}

#[test]
fn help_documents_every_command() {
    for (cmd, flags) in [
        ("gen-model", &["--vertices", "--shape-dims", "--expr-dims", "--seed", "--out"][..]),
        ("gen-data", &["--spec", "--seed", "--out"]),
        ("render-guidance", &["--model", "--params", "--kind", "--config", "--augment", "--out"]),
        ("train", &["--stage", "--data", "--config", "--seed", "--init", "--steps", "--out"]),
        ("infer", &["--mode", "--ckpt", "--inputs", "--seed", "--window", "--context", "--out"]),
        ("shape-check", &["--preset"]),
        ("verify", &["--suite", "--seed", "--out"]),
    ] {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
    assert!(stdout(&run(&["gen-model", "--help"])).contains("[default: 144]"));
    assert!(!stdout(&run(&["verify", "--help"])).contains("inject"));
}

#[test]
fn gen_model_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen-model", "--vertices", "64", "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&o), 0);
    }
    let bytes = std::fs::read(a.join("face.model")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("face.model")).unwrap());
    let m = load_model(&a.join("face.model")).unwrap();
    m.validate().unwrap();
    assert!(m.degenerate_triangles().is_empty());
    assert!(!m.lips_triangles().is_empty());

    let o = run(&["gen-model", "--vertices", "4", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("c").exists());
    assert_eq!(code(&run(&["gen-model", "--vertices", "many", "--out", s(&a)])), 2);
}

#[test]
fn gen_data_writes_the_requested_pool() {
    let f = fixture();
    let pool = build_identity_pool(&f.data()).unwrap();
    assert_eq!(pool.num_clips(), 2);
    assert!(f.data().join("dataset.json").exists());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"identites":1}"#).unwrap();
    let o = run(&["gen-data", "--spec", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    std::fs::write(&bad, r#"{"frames":0}"#).unwrap();
    assert_eq!(code(&run(&["gen-data", "--spec", s(&bad), "--out", s(&dir.path().join("d"))])), 2);
}

#[test]
fn render_guidance_writes_images_and_manifest() {
    let f = fixture();
    let pool = build_identity_pool(&f.data()).unwrap();
    let clip = &pool.identities.values().next().unwrap()[0];
    let model = f.data().join(&clip.identity_id).join("face.model");
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.jsonl");
    let lines: Vec<String> = clip.params[..3].iter().map(|p| p.to_json_line().unwrap()).collect();
    std::fs::write(&params, lines.join("\n")).unwrap();

    for (kind, prefix) in [("motion", "motion"), ("illum", "illum")] {
        let out = dir.path().join(kind);
        let o = run(&["render-guidance", "--model", s(&model), "--params", s(&params), "--kind", kind, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{o:?}");
        let recs = parse_guidance_manifest(&std::fs::read_to_string(out.join("manifest.jsonl")).unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.sample_id, i as u64);
            assert!(!r.dropped);
            assert!(r.image_file.starts_with(prefix));
            assert!(out.join(&r.image_file).exists() && out.join(&r.mask_file).exists());
            assert!(out.join(&r.params_file).exists());
        }
    }

    let aug = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "render-guidance", "--model", s(&model), "--params", s(&params), "--kind", "motion", "--augment", "--seed", "9", "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("manifest.jsonl")).unwrap()
    };
    assert_eq!(aug("x"), aug("y"));

    let o = run(&["render-guidance", "--model", s(&model), "--params", s(&params), "--kind", "depth", "--out", s(&dir.path().join("z"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = fixture();
    let log = std::fs::read_to_string(f.ckpt().with_file_name("loss_stage1.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,loss_total"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again");
    let o = run(&["train", "--data", s(&f.data()), "--config", s(&f.config()), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("stage1.ckpt")).unwrap(), std::fs::read(f.ckpt()).unwrap());
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);

    let o = run(&["train", "--stage", "2", "--data", s(&f.data()), "--config", s(&f.config()), "--out", s(&dir.path().join("s2"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "train", "--stage", "2", "--init", s(&f.ckpt()), "--steps", "1", "--data", s(&f.data()), "--config", s(&f.config()), "--out", s(&dir.path().join("s2")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("s2").join("stage2.ckpt").exists());

    assert_eq!(code(&run(&["train", "--stage", "3", "--data", s(&f.data()), "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--out", s(&out)])), 2);
    let missing = dir.path().join("missing");
    assert_eq!(code(&run(&["train", "--data", s(&missing), "--config", s(&f.config()), "--out", s(&out)])), 1);
}

fn write_inputs(dir: &Path, with_model: bool) -> PathBuf {
    let f = fixture();
    let pool = build_identity_pool(&f.data()).unwrap();
    let clip = &pool.identities.values().next().unwrap()[0];
    let params = dir.join("p.jsonl");
    let lines: Vec<String> = clip.params.iter().map(|p| p.to_json_line().unwrap()).collect();
    std::fs::write(&params, lines.join("\n")).unwrap();
    let model = f.data().join(&clip.identity_id).join("face.model");
    let mut doc = serde_json::json!({
        "reference": f.data().join(&clip.frames[0]),
        "audio": f.data().join(clip.audio_path()),
        "params": "p.jsonl",
        "frames": 2,
        "lighting": [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    });
    if with_model {
        doc["model"] = serde_json::json!(model);
    }
    let path = dir.join(if with_model { "inputs.json" } else { "no_model.json" });
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn infer_writes_deterministic_frames() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path(), true);
    let go = |mode: &str, seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = run(&["infer", "--mode", mode, "--ckpt", s(&f.ckpt()), "--inputs", s(&inputs), "--seed", seed, "--window", "2", "--context", "1", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (0..2).map(|i| std::fs::read(out.join(format!("frame_{i:05}.png"))).unwrap()).collect::<Vec<_>>()
    };
    let a = go("motion", "1", "a");
    assert_eq!(a, go("motion", "1", "b"));
    assert_ne!(a, go("motion", "2", "c"));
    go("illum", "1", "d");
    go("audio", "1", "e");

    let no_model = write_inputs(dir.path(), false);
    let o = run(&["infer", "--mode", "motion", "--ckpt", s(&f.ckpt()), "--inputs", s(&no_model), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["infer", "--mode", "loud", "--ckpt", s(&f.ckpt()), "--inputs", s(&inputs), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["infer", "--mode", "audio", "--ckpt", s(&inputs), "--inputs", s(&inputs), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn shape_check_tables() {
    let o = run(&["shape-check", "--preset", "paper"]);
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    assert_eq!(t.matches("4096×320").count(), 2);
    assert_eq!(t.matches("1024×640").count(), 2);
    assert_eq!(t.matches("256×1280").count(), 2);
    assert!(t.contains("320×64×64") && t.contains("3×512×512"));

    let o = run(&["shape-check", "--preset", "desk"]);
    assert_eq!(code(&o), 0);
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    let col = |name: &str| rows.iter().find(|r| r[0] == name).unwrap()[1..].to_vec();
    assert_eq!(col("motion.p1"), ["16×8×8", "64×16"]);
    assert_eq!(col("motion.p4"), ["32×4×4", "16×32"]);
    assert_eq!(col("motion.p6"), ["64×2×2", "4×64"]);
    assert_eq!(col("illumination"), ["16×8×8", "-"]);
    assert_eq!(code(&run(&["shape-check", "--preset", "huge"])), 2);
}

#[test]
fn verify_reports_and_fails_on_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--suite", "sh", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"][0]["suite"], "sh");
    assert!(dir.path().join("verify.json").exists());

    let o = run(&["verify", "--suite", "blur", "--inject-fault", "blur-kernel"]);
    assert_eq!(code(&o), 1);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = report["suites"][0]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"blur.sums_to_one"), "{failed:?}");
    assert_eq!(code(&run(&["verify", "--suite", "everything"])), 2);
}
