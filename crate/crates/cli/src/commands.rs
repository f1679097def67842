//! Subcommand implementations. Each one is a thin layer over a core
//! operation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use txst_core::checkpoint::Checkpoint;
use txst_core::data::{artist_display_name, build_manifest, Manifest};
use txst_core::evaluator::{
    affinity_matrix, clip_scores, deception_rate, export_embeddings, style_descriptor, tsne,
    vgg_scores, MetricReport, ProbeClassifier, ProbeTraining, RowKind, StyleKind, TsneConfig,
    VggProbe, REPORT_SCHEMA_VERSION,
};
use txst_core::image_io::load_image;
use txst_core::inference::{BlendMode, Stylizer};
use txst_core::model::{Frozen, ModelConfig};
use txst_core::trainer::{merge, parse_document, set_dotted, TrainConfig, Trainer};
use txst_core::Tensor;

use crate::error::CliError;
use crate::pipeline;
use crate::service::{router, AppState, ServiceConfig, DEFAULT_MAX_SIDE, DEFAULT_MAX_UPLOAD};
use crate::wire::{OutputSize, PromptSpec, StylizeRequest};

pub const CHECKPOINT_ENV: &str = "TXST_CHECKPOINT";

#[derive(Parser, Debug)]
#[command(
    name = "txst",
    version,
    about = "Text- and image-driven artistic style transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train either stage from a config file plus `--key value` overrides.
    Train(TrainArgs),
    /// Stylize one content image.
    Stylize(StylizeArgs),
    /// Score stylized results in a pairs directory.
    Evaluate(EvaluateArgs),
    /// Painting-by-artist affinity matrix of the frozen embedder.
    Affinity(AffinityArgs),
    /// Index a content root and an artist-grouped style root.
    Manifest(ManifestArgs),
    /// Fit the artist classifier used for the deception rate.
    Probe(ProbeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write the procedural desk-scale corpus and its manifest.
    Fixtures(FixturesArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML or JSON config; keys missing from it come from the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Config overrides as `--optim.lr 1e-3 --iterations 500`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    pub overrides: Vec<String>,
}

/// Where the frozen components come from when no trained model is needed.
#[derive(Args, Debug, Clone)]
pub struct FrozenArgs {
    /// Take the frozen components from this checkpoint's config.
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: Option<PathBuf>,
    /// Otherwise build them for this scale.
    #[arg(long, value_enum, default_value = "desk")]
    pub scale: ScaleArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ScaleArg {
    Full,
    Desk,
}

impl FrozenArgs {
    fn model_config(&self) -> Result<ModelConfig, CliError> {
        Ok(match &self.checkpoint {
            Some(p) => Checkpoint::load(p)?.meta.config.model,
            None => match self.scale {
                ScaleArg::Full => ModelConfig::default(),
                ScaleArg::Desk => ModelConfig::desk(),
            },
        })
    }
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    /// Style text; repeatable.
    #[arg(long)]
    pub text: Vec<String>,
    /// Style reference image; repeatable.
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Blend weights, one per `--text` then per `--image`.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Join several texts into one sentence instead of averaging embeddings.
    #[arg(long)]
    pub combine: bool,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<OutputSize>,
    #[arg(long, default_value = "stylized.png")]
    pub out: PathBuf,
    /// Also write the response metadata as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<OutputSize, String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok(OutputSize {
        width: w.parse().map_err(|e| format!("width: {e}"))?,
        height: h.parse().map_err(|e| format!("height: {e}"))?,
    })
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `<name>/{content,stylized}.png` plus `style.png` or `style.txt`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub frozen: FrozenArgs,
    /// Artist classifier from `probe`; items need a `target.txt`.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Embedding table of contents, results and style texts.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Two-dimensional t-SNE projection of the embedding table.
    #[arg(long)]
    pub tsne: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AffinityArgs {
    /// One painting per artist, named `<Artist_Name>.png`.
    #[arg(long)]
    pub paintings: PathBuf,
    /// Artist names in column order; the painting stems when omitted.
    #[arg(long, value_delimiter = ',')]
    pub artists: Vec<String>,
    #[command(flatten)]
    pub frozen: FrozenArgs,
    #[arg(long, default_value = "affinity.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value = "manifest.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub frozen: FrozenArgs,
    #[arg(long, default_value = "classifier.json")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD)]
    pub max_upload_bytes: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_SIDE)]
    pub max_side: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

#[derive(Args, Debug)]
pub struct FixturesArgs {
    #[arg(long, default_value = "fixtures/desk")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Stylize(a) => stylize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Affinity(a) => affinity(a),
        Command::Manifest(a) => manifest(a),
        Command::Probe(a) => probe(a),
        Command::Serve(a) => serve(a),
        Command::Fixtures(a) => fixtures(a),
    }
}

/// Parses `--a.b value` pairs. Values are read as TOML literals, falling
/// back to plain strings.
pub fn parse_overrides(args: &[String]) -> Result<serde_json::Value, CliError> {
    let mut doc = serde_json::json!({});
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("expected --key, got {flag:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => (
                key,
                it.next()
                    .filter(|v| !v.starts_with("--"))
                    .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?
                    .clone(),
            ),
        };
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .map(|v| serde_json::to_value(v).expect("toml values are json"))
            .unwrap_or(serde_json::Value::String(raw));
        set_dotted(&mut doc, key, value);
    }
    Ok(doc)
}

/// Config file merged with overrides.
pub fn load_train_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig, CliError> {
    let mut doc = match path {
        Some(p) => parse_document(&std::fs::read_to_string(p)?, p)?,
        None => serde_json::json!({}),
    };
    merge(&mut doc, parse_overrides(overrides)?);
    Ok(TrainConfig::from_value(doc)?)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_train_config(a.config.as_deref(), &a.overrides)?;
    let ckpt = cfg.output.dir.join("checkpoint.safetensors");
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&ckpt)?;
        log::info!("resuming at iteration {}", ck.meta.iteration);
        Trainer::resume(&ck, cfg, None)?
    } else {
        Trainer::new(cfg)?
    };
    let total = trainer.config().iterations;
    let ck = trainer.run(|r| {
        if r.iter % 50 == 0 || r.iter == total {
            log::info!(
                "iter {} total {:.4}{}",
                r.iter,
                r.total,
                r.heldout_psnr
                    .map(|p| format!(" psnr {p:.2}"))
                    .unwrap_or_default()
            );
        }
    })?;
    println!(
        "{}",
        serde_json::json!({"checkpoint": ckpt, "iteration": ck.meta.iteration})
    );
    Ok(())
}

pub fn load_stylizer(path: &Path) -> Result<Stylizer, CliError> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Stylizer::from_checkpoint(&Checkpoint::load(path)?, None)?)
}

fn stylize(a: StylizeArgs) -> Result<(), CliError> {
    let n = a.text.len() + a.image.len();
    if n == 0 {
        return Err(CliError::Usage(
            "give at least one --text or --image".into(),
        ));
    }
    if !a.weights.is_empty() && a.weights.len() != n {
        return Err(CliError::Usage(format!(
            "{} weights for {n} prompts",
            a.weights.len()
        )));
    }
    let weight = |i: usize| a.weights.get(i).copied().unwrap_or(1.0);
    let mut prompts: Vec<PromptSpec> = a
        .text
        .iter()
        .enumerate()
        .map(|(i, t)| PromptSpec::Text {
            text: t.clone(),
            weight: weight(i),
        })
        .collect();
    let mut images = HashMap::new();
    for (k, p) in a.image.iter().enumerate() {
        let key = format!("image{k}");
        images.insert(key.clone(), load_image(p)?);
        prompts.push(PromptSpec::Image {
            image_ref: key,
            weight: weight(a.text.len() + k),
        });
    }
    let req = StylizeRequest {
        prompts,
        strength: a.strength,
        seed: a.seed,
        output_size: a.size,
        blend: if a.combine {
            BlendMode::CombinedText
        } else {
            BlendMode::Embedding
        },
        metrics: a.report.is_some(),
    };
    let stylizer = load_stylizer(&a.checkpoint)?;
    let out = pipeline::stylize(&stylizer, &load_image(&a.content)?, &images, &req, None)?;
    std::fs::write(&a.out, &out.png)?;
    if let Some(r) = a.report {
        let mut meta = out.response.clone();
        meta.image_png.clear();
        std::fs::write(r, serde_json::to_string_pretty(&meta)?)?;
    }
    println!(
        "{}",
        serde_json::json!({"out": a.out, "sha256": out.response.image_sha256})
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct PairReport {
    name: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    schema_version: u32,
    items: Vec<PairReport>,
    mean_s_cont: f64,
    mean_s_style: f64,
    mean_f1: Option<f64>,
    deception_rate: Option<f64>,
}

struct Pair {
    name: String,
    content: Tensor,
    stylized: Tensor,
    style: PairStyle,
    target: Option<String>,
}

enum PairStyle {
    Image(Tensor),
    Text(String),
}

fn read_pairs(dir: &Path) -> Result<Vec<Pair>, CliError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    names.retain(|p| p.is_dir());
    names.sort();
    if names.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no pair directories",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|d| {
            let style = if d.join("style.png").exists() {
                PairStyle::Image(load_image(&d.join("style.png"))?)
            } else {
                PairStyle::Text(
                    std::fs::read_to_string(d.join("style.txt"))?
                        .trim()
                        .to_string(),
                )
            };
            let target = std::fs::read_to_string(d.join("target.txt"))
                .ok()
                .map(|t| t.trim().to_string());
            Ok(Pair {
                name: d
                    .file_name()
                    .expect("dir name")
                    .to_string_lossy()
                    .into_owned(),
                content: load_image(&d.join("content.png"))?,
                stylized: load_image(&d.join("stylized.png"))?,
                style,
                target,
            })
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let frozen = Frozen::new(&a.frozen.model_config()?)?;
    let pairs = read_pairs(&a.pairs)?;
    let mut items = Vec::new();
    for p in &pairs {
        let (anchor, kind, vgg) = match &p.style {
            PairStyle::Image(s) => (
                frozen.clip.encode_image(s)?,
                StyleKind::Image,
                Some(vgg_scores(&frozen.vgg, &p.content, s, &p.stylized)?),
            ),
            PairStyle::Text(t) => (frozen.clip.encode_text(t)?, StyleKind::Text, None),
        };
        let mut report = clip_scores(&frozen.clip, &p.content, &p.stylized, &anchor, kind)?;
        if let Some(v) = vgg {
            report.vgg_content = Some(v.content);
            report.vgg_style = Some(v.style);
        }
        items.push(PairReport {
            name: p.name.clone(),
            report,
        });
    }
    let n = items.len() as f64;
    let f1s: Vec<f64> = items.iter().filter_map(|i| i.report.f1).collect();
    let deception = match &a.classifier {
        Some(path) => {
            let probe: ProbeClassifier = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let labelled: Vec<(Tensor, String)> = pairs
                .iter()
                .map(|p| {
                    p.target
                        .clone()
                        .map(|t| (p.stylized.clone(), t))
                        .ok_or_else(|| CliError::Usage(format!("{} has no target.txt", p.name)))
                })
                .collect::<Result<_, _>>()?;
            Some(deception_rate(
                &labelled,
                &VggProbe {
                    vgg: &frozen.vgg,
                    probe: &probe,
                },
            )?)
        }
        None => None,
    };
    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mean_s_cont: items.iter().map(|i| i.report.s_cont).sum::<f64>() / n,
        mean_s_style: items.iter().map(|i| i.report.s_style).sum::<f64>() / n,
        mean_f1: (f1s.len() == items.len()).then(|| f1s.iter().sum::<f64>() / n),
        items,
        deception_rate: deception,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    if a.embeddings.is_some() || a.tsne.is_some() {
        let mut images = Vec::new();
        let mut texts = Vec::new();
        for p in &pairs {
            images.push((p.name.clone(), RowKind::Content, p.content.clone()));
            images.push((p.name.clone(), RowKind::Stylized, p.stylized.clone()));
            if let PairStyle::Text(t) = &p.style {
                if !texts.contains(t) {
                    texts.push(t.clone());
                }
            }
        }
        let table = export_embeddings(&frozen.clip, &images, &texts)?;
        if let Some(path) = &a.embeddings {
            table.write_csv(path)?;
        }
        if let Some(path) = &a.tsne {
            let pts: Vec<Vec<f64>> = table.rows.iter().map(|r| r.values.clone()).collect();
            let cfg = TsneConfig {
                perplexity: (pts.len() as f64 / 3.0).clamp(2.0, 30.0),
                seed: a.seed,
                ..TsneConfig::default()
            };
            let y = tsne(&pts, &cfg)?;
            let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
            w.write_record(["schema_version", "label", "kind", "x", "y"])
                .map_err(std::io::Error::from)?;
            for (r, p) in table.rows.iter().zip(y) {
                let kind = serde_json::to_value(r.kind)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                w.write_record([
                    REPORT_SCHEMA_VERSION.to_string(),
                    r.label.clone(),
                    kind,
                    p[0].to_string(),
                    p[1].to_string(),
                ])
                .map_err(std::io::Error::from)?;
            }
            w.flush()?;
        }
    }
    println!(
        "{}",
        serde_json::json!({"report": a.out, "items": report.items.len(), "mean_f1": report.mean_f1})
    );
    Ok(())
}

fn affinity(a: AffinityArgs) -> Result<(), CliError> {
    let frozen = Frozen::new(&a.frozen.model_config()?)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.paintings)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    let stem = |p: &Path| artist_display_name(&p.file_stem().expect("file").to_string_lossy());
    let artists = if a.artists.is_empty() {
        files.iter().map(|p| stem(p)).collect()
    } else {
        a.artists.clone()
    };
    // Row i is the painting of artist i when every artist has one.
    let mut paintings = Vec::new();
    for artist in &artists {
        if let Some(p) = files.iter().find(|p| &stem(p) == artist) {
            paintings.push((artist.clone(), load_image(p)?));
        }
    }
    for p in &files {
        if !artists.contains(&stem(p)) {
            paintings.push((stem(p), load_image(p)?));
        }
    }
    let m = affinity_matrix(&frozen.clip, &paintings, &artists)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&m)?)?;
    std::fs::write(a.out.with_extension("csv"), m.to_csv()?)?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "diagonal_hit_rate": m.diagonal_hit_rate(), "argmax": m.row_argmax()})
    );
    Ok(())
}

fn manifest(a: ManifestArgs) -> Result<(), CliError> {
    let m = build_manifest(&a.content, &a.style)?;
    m.write(&a.out)?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "contents": m.content.len(), "artists": m.artists.len(), "excluded": m.excluded.len()})
    );
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let frozen = Frozen::new(&a.frozen.model_config()?)?;
    let m = Manifest::read(&a.manifest)?;
    let mut samples = Vec::new();
    for (k, artist) in m.artists.iter().enumerate() {
        for i in 0..artist.paintings.len() {
            let img = load_image(&artist.painting_path(&m.style_root, i))?;
            samples.push((style_descriptor(&frozen.vgg, &img)?, k));
        }
    }
    let cfg = ProbeTraining {
        seed: a.seed,
        ..ProbeTraining::default()
    };
    let p = ProbeClassifier::fit(m.artist_names(), &samples, &cfg)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&p)?)?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "labels": p.labels, "samples": samples.len()})
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    if !a.checkpoint.exists() {
        return Err(CliError::MissingCheckpoint(a.checkpoint));
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = AppState::new(ServiceConfig {
            max_upload_bytes: a.max_upload_bytes,
            max_side: a.max_side,
            max_in_flight: a.max_in_flight,
        });
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        let loader = Arc::clone(&state);
        let path = a.checkpoint.clone();
        tokio::spawn(async move {
            if let Err(e) = loader.load(path).await {
                log::error!("checkpoint load failed: {e}");
            }
        });
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn fixtures(a: FixturesArgs) -> Result<(), CliError> {
    txst_core::fixtures::write_desk_fixtures(&a.out)?;
    let m = build_manifest(&a.out.join("content"), &a.out.join("style"))?;
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "contents": m.content.len(), "artists": m.artist_names()})
    );
    Ok(())
}
