mod common;

use std::path::Path;
use std::process::{Command, Output};

fn txst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_txst"))
        .current_dir(dir)
        .env_remove("TXST_CHECKPOINT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr)
        .lines()
        .last()
        .unwrap()
        .to_string();
    serde_json::from_str(&line).unwrap()
}

#[test]
fn fixtures_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&txst(dir.path(), &["fixtures", "--out", "fx"]));
    assert_eq!(v["contents"], 8);
    assert_eq!(
        v["artists"],
        serde_json::json!(["Claude Monet", "Van Gogh"])
    );
    assert!(dir.path().join("fx/manifest.json").exists());
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = txst(dir.path(), &["train", "--iterations"]);
    assert_eq!(o.status.code(), Some(2));
    let o = txst(dir.path(), &["train", "--seed", "--iterations", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = txst(dir.path(), &["train", "--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");

    let o = txst(
        dir.path(),
        &[
            "stylize",
            "--checkpoint",
            "absent.safetensors",
            "--content",
            "c.png",
            "--text",
            "x",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "missing_checkpoint");

    let o = txst(
        dir.path(),
        &["stylize", "--content", "c.png", "--text", "x"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_resume_with_a_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&txst(dir.path(), &["fixtures", "--out", "fx"]));
    // `--resume` is a flag of `train`, so it goes before the overrides.
    let base = [
        "train",
        "--stage",
        "reconstruction",
        "--scale",
        "desk",
        "--data.manifest",
        "fx/manifest.json",
        "--batch_size",
        "1",
        "--output.dir",
        "run",
    ];
    let mut args = base.to_vec();
    args.extend(["--iterations", "1"]);
    let v = stdout_json(&txst(dir.path(), &args));
    assert_eq!(v["iteration"], 1);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("run/metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );

    let mut args = base.to_vec();
    args.insert(1, "--resume");
    args.extend(["--iterations", "2"]);
    let v = stdout_json(&txst(dir.path(), &args));
    assert_eq!(v["iteration"], 2);

    let mut args = base.to_vec();
    args.insert(1, "--resume");
    args.extend(["--iterations", "3", "--optim.lr", "0.5"]);
    let o = txst(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "config_mismatch");
}

#[test]
fn stylize_writes_images_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::desk_checkpoint(dir.path());
    let ckpt = ckpt.to_str().unwrap();
    let content = "content/scene_01.png";

    let o = txst(
        dir.path(),
        &[
            "stylize",
            "--checkpoint",
            ckpt,
            "--content",
            content,
            "--text",
            "Van Gogh",
            "--strength",
            "0",
            "--out",
            "zero.png",
        ],
    );
    stdout_json(&o);
    let a = image::open(dir.path().join("zero.png")).unwrap().to_rgb8();
    let b = image::open(dir.path().join(content)).unwrap().to_rgb8();
    assert_eq!(a, b);

    let args = [
        "stylize",
        "--checkpoint",
        ckpt,
        "--content",
        content,
        "--text",
        "Van Gogh",
        "--text",
        "Claude Monet",
        "--image",
        "style/Van_Gogh/painting_00.png",
        "--weights",
        "1,1,2",
        "--size",
        "20x16",
        "--out",
        "blend.png",
        "--report",
        "blend.json",
    ];
    let first = stdout_json(&txst(dir.path(), &args));
    let second = stdout_json(&txst(dir.path(), &args));
    assert_eq!(first["sha256"], second["sha256"]);
    let img = image::open(dir.path().join("blend.png")).unwrap();
    assert_eq!((img.width(), img.height()), (20, 16));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("blend.json")).unwrap())
            .unwrap();
    assert_eq!(report["metrics"]["style_kind"], "blend");
    assert_eq!(report["image_sha256"], first["sha256"]);

    let o = txst(
        dir.path(),
        &[
            "stylize",
            "--checkpoint",
            ckpt,
            "--content",
            content,
            "--text",
            "a",
            "--weights",
            "1,2",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_affinity_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    stdout_json(&txst(root, &["fixtures", "--out", "."]));
    for (name, style, target) in [
        ("a", "style.txt", "Van Gogh"),
        ("b", "style.png", "Claude Monet"),
    ] {
        let d = root.join("pairs").join(name);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::copy(root.join("content/scene_00.png"), d.join("content.png")).unwrap();
        std::fs::copy(root.join("content/scene_01.png"), d.join("stylized.png")).unwrap();
        if style == "style.txt" {
            std::fs::write(d.join(style), "Van Gogh").unwrap();
        } else {
            std::fs::copy(
                root.join("style/Claude_Monet/painting_00.png"),
                d.join(style),
            )
            .unwrap();
        }
        std::fs::write(d.join("target.txt"), target).unwrap();
    }

    let p = stdout_json(&txst(
        root,
        &[
            "probe",
            "--manifest",
            "manifest.json",
            "--out",
            "probe.json",
        ],
    ));
    assert_eq!(p["labels"], serde_json::json!(["Claude Monet", "Van Gogh"]));

    let v = stdout_json(&txst(
        root,
        &[
            "evaluate",
            "--pairs",
            "pairs",
            "--classifier",
            "probe.json",
            "--out",
            "report.json",
            "--embeddings",
            "emb.csv",
            "--tsne",
            "tsne.csv",
        ],
    ));
    assert_eq!(v["items"], 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["items"][0]["style_kind"], "text");
    assert!(report["items"][0]["vgg_style"].is_null());
    assert_eq!(report["items"][1]["style_kind"], "image");
    assert!(report["items"][1]["vgg_style"].is_number());
    let rate = report["deception_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    // two contents, two results, one distinct text
    assert_eq!(
        std::fs::read_to_string(root.join("emb.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 5
    );
    assert_eq!(
        std::fs::read_to_string(root.join("tsne.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 5
    );

    let v = stdout_json(&txst(
        root,
        &["affinity", "--paintings", "affinity", "--out", "aff.json"],
    ));
    let rate = v["diagonal_hit_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("aff.json")).unwrap()).unwrap();
    assert_eq!(m["scores"].as_array().unwrap().len(), 13);
    assert!(root.join("aff.csv").exists());
}
