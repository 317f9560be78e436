use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ladapt::commands::{load_adapter, load_base};
use ladapt::manifest::RunManifest;
use latent_adapter::adapter::compose;
use latent_adapter::conditions::Dataset;
use latent_adapter::diffusion::{sample, Guidance, SamplerConfig};
use latent_adapter::evalkit::EvalSet;
use latent_adapter::imageio::load_rgb;

fn ladapt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladapt"))
        .args(args)
        .env("LADAPT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = ladapt(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn images(dir: &Path) -> Vec<Vec<u8>> {
    let mut v = Vec::new();
    for i in 0.. {
        let p = dir.join("images").join(format!("{i:05}.png"));
        if !p.is_file() {
            break;
        }
        v.push(load_rgb(&p).unwrap().0);
    }
    v
}

/// A dataset, a tiny base and two tiny adapters, built once per test that
/// needs them.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        ok(root, &["dataset", "gen", "--scenes", "6", "--seed", "1", "--out", "data"]);
        let train = ["--steps", "2", "--batch-size", "2", "--log-every", "0"];
        let mut base = vec!["train", "base", "--dataset", "data", "--base-channels", "8", "--out", "base"];
        base.extend(train);
        ok(root, &base);
        for kind in ["sketch", "color"] {
            let out = format!("ad-{kind}");
            let mut a = vec!["train", "adapter", "--base", "base/base.ckpt", "--dataset", "data", "--kind", kind, "--out", &out];
            a.extend(train);
            ok(root, &a);
        }
        Self { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root().join(rel)
    }
}

#[test]
fn unknown_flag_fails_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ladapt(dir.path(), &["dataset", "gen", "--no-such-flag"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn validation_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ladapt(dir.path(), &["dataset", "gen", "--style", "sepia"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sepia"));
    let out = ladapt(dir.path(), &["train", "base"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset is required"));
}

#[test]
fn count_params_full_scale_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let n: f64 = ok(dir.path(), &["count-params", "--preset", "full-scale"]).trim().parse().unwrap();
    assert!((65e6..=90e6).contains(&n), "{n}");
    let small: f64 = ok(dir.path(), &["count-params", "--preset", "full-scale", "--variant", "small"]).trim().parse().unwrap();
    assert!(small < n);
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"scenes": 3, "style": "dark", "seed": 5}"#).unwrap();
    ok(dir.path(), &["dataset", "gen", "--config", "c.json", "--scenes", "2", "--out", "d"]);
    let ds = Dataset::load(&dir.path().join("d")).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.config().style, latent_adapter::conditions::Style::Dark);
    let m = RunManifest::load(&dir.path().join("d")).unwrap();
    assert_eq!(m.seed, 5);
    assert!(m.inputs.keys().any(|k| k.ends_with("c.json")));
}

#[test]
fn dataset_run_replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["dataset", "gen", "--scenes", "3", "--out", "d"]);
    let m = RunManifest::load(&dir.path().join("d")).unwrap();
    assert!(m.outputs.contains_key("images/00002.png") && m.outputs.contains_key("conditions/sketch/00000.png"));
    let msg = ok(dir.path(), &["replay", "d", "--into", "again"]);
    assert!(msg.contains("replay ok"), "{msg}");
    // A changed output is reported and fails the replay.
    let mut tampered = m.clone();
    tampered.outputs.insert("scenes.jsonl".into(), "0".repeat(64));
    tampered.save(&dir.path().join("d")).unwrap();
    let out = ladapt(dir.path(), &["replay", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mismatch: scenes.jsonl"));
}

#[test]
fn pipeline_commands() {
    let fx = Fixture::new();
    let root = fx.root();

    // Training left the base untouched and runs replay exactly.
    assert!(ok(root, &["replay", "ad-sketch"]).contains("replay ok"));
    assert!(ok(root, &["replay", "base"]).contains("replay ok"));

    let common = ["sample", "--base", "base/base.ckpt", "--dataset", "data", "--count", "3", "--ddim-steps", "4"];
    let mut plain = common.to_vec();
    plain.extend(["--out", "s-plain"]);
    ok(root, &plain);
    let mut zero = common.to_vec();
    zero.extend(["--adapter", "ad-sketch/adapter.ckpt", "--weights", "0", "--out", "s-zero"]);
    ok(root, &zero);
    assert_eq!(images(&fx.path("s-plain")).len(), 3);
    assert_eq!(images(&fx.path("s-plain")), images(&fx.path("s-zero")));
    assert!(ok(root, &["replay", "s-zero"]).contains("replay ok"));

    // Two adapters through the CLI equal the library-level weighted sum.
    let mut two = common.to_vec();
    two.extend([
        "--adapter", "ad-sketch/adapter.ckpt", "--adapter", "ad-color/adapter.ckpt", "--weights", "0.7,1.3", "--seed", "9",
        "--out", "s-two",
    ]);
    ok(root, &two);
    let (base, codec, schedule) = load_base(&fx.path("base/base.ckpt")).unwrap();
    let (sk, _) = load_adapter(&fx.path("ad-sketch/adapter.ckpt")).unwrap();
    let (co, _) = load_adapter(&fx.path("ad-color/adapter.ckpt")).unwrap();
    let eval = EvalSet::from_dataset(&Dataset::load(&fx.path("data")).unwrap(), 3).unwrap();
    let p1 = sk.guidance(&eval.condition(sk.spec().kind).unwrap()).unwrap();
    let p2 = co.guidance(&eval.condition(co.spec().kind).unwrap()).unwrap();
    let pyr = compose(&[&p1, &p2], &[0.7, 1.3]).unwrap();
    let cfg = SamplerConfig { ddim_steps: 4, ..SamplerConfig::default() };
    let seed = ladapt::derive_seed(9, "sample");
    let z = sample(&base, &schedule, &eval.tokens, Some(Guidance::Pyramid(&pyr)), &cfg, seed).unwrap();
    let img = codec.decode(&z).unwrap();
    let expected: Vec<Vec<u8>> = (0..3).map(|i| img.to_rgb8(i)).collect();
    assert_eq!(images(&fx.path("s-two")), expected);

    // Mismatched weights are a validation error.
    let mut bad = common.to_vec();
    bad.extend(["--adapter", "ad-sketch/adapter.ckpt", "--weights", "1,2", "--out", "s-bad"]);
    assert_eq!(ladapt(root, &bad).status.code(), Some(1));

    // Prompt mode with an explicit condition image.
    ok(
        root,
        &[
            "sample", "--base", "base/base.ckpt", "--prompt", "large red circle center on white", "--adapter",
            "ad-sketch/adapter.ckpt", "--condition", "data/conditions/sketch/00000.png", "--ddim-steps", "3", "--out", "s-prompt",
        ],
    );
    assert_eq!(images(&fx.path("s-prompt")).len(), 1);

    let m = ok(root, &["metrics", "--generated", "data", "--dataset", "data", "--count", "4"]);
    assert!(m.contains("edge F1 1.0000"), "{m}");

    let stages = ok(
        root,
        &[
            "ablate", "stages", "--base", "base/base.ckpt", "--adapter", "ad-sketch/adapter.ckpt", "--eval-scenes", "2",
            "--ddim-steps", "3", "--out", "stages",
        ],
    );
    for gate in ["all", "stage:begin", "stage:middle", "stage:late", "none"] {
        assert!(stages.contains(gate), "{stages}");
    }
    assert!(fx.path("stages/stages.csv").is_file());
    assert!(ok(root, &["replay", "stages"]).contains("replay ok"));
}
