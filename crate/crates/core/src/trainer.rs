//! Two-stage training: decoder reconstruction, then style training with
//! paired paintings and augmented artist names.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FeatureMap, FeaturePyramid, Layer};
use crate::checkpoint::Checkpoint;
use crate::clip::PromptTemplates;
use crate::data::{
    center_patch, sample_minibatch, training_patch, Manifest, PatchConfig, SkipList, TrainBatch,
};
use crate::error::{Error, Result};
use crate::image_io::psnr;
use crate::model::{Frozen, ModelConfig, TxstNet};
use crate::objectives::{
    clip_feature_loss, content_loss, contrastive_sets, contrastive_similarity_loss,
    directional_clip_loss, identity_loss, style_loss, total_loss, ContrastiveConfig, LossReport,
    LossTerms, LossWeights, Reduction,
};
use crate::optim::{clip_global_norm, collect_grads, Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reconstruction,
    Style,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reference loss weights for artist prompts.
    #[default]
    Artist,
    /// Reduced directional weight for free-form text.
    General,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Full-size model and 256 px patches.
    #[default]
    Full,
    /// Narrow model and 32 px patches for CPU runs.
    Desk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Directory of held-out contents for reconstruction PSNR.
    pub heldout: Option<PathBuf>,
    /// Prompt template file; the bundled set when absent.
    pub templates: Option<PathBuf>,
    pub patch: PatchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Checkpoint cadence in iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Held-out evaluation cadence in iterations; 0 disables it.
    pub eval_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub preset: Preset,
    pub scale: Scale,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub iterations: u64,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub reduce: Reduction,
    /// Source text `t_o` of the directional loss.
    pub source_text: String,
    pub contrastive: ContrastiveConfig,
    /// Weight of the feature term in the reconstruction objective.
    pub reconstruction_content_weight: f64,
    pub data: DataConfig,
    pub output: OutputConfig,
    /// Stage-1 checkpoint whose decoder initializes stage 2.
    pub init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Stage::Style, Preset::Artist, Scale::Full)
    }
}

impl TrainConfig {
    pub fn preset(stage: Stage, preset: Preset, scale: Scale) -> Self {
        let mut weights = LossWeights::default();
        if preset == Preset::General {
            weights.clip = 10.0;
        }
        let mut cfg = TrainConfig {
            stage,
            preset,
            scale,
            seed: 0,
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            batch_size: if stage == Stage::Style { 30 } else { 8 },
            iterations: 100_000,
            grad_clip: 10.0,
            weights,
            reduce: Reduction::Mean,
            source_text: "Photo".into(),
            contrastive: ContrastiveConfig::default(),
            reconstruction_content_weight: 1.0,
            data: DataConfig::default(),
            output: OutputConfig::default(),
            init: None,
        };
        if scale == Scale::Desk {
            cfg.model = ModelConfig::desk();
            cfg.data.patch = PatchConfig {
                load_size: 32,
                patch_size: 32,
                ..PatchConfig::default()
            };
            cfg.batch_size = if stage == Stage::Style { 4 } else { 8 };
            cfg.iterations = 2000;
            // The style stage diverges at the reconstruction rate.
            cfg.optim.lr = if stage == Stage::Style { 1e-4 } else { 1e-3 };
            cfg.output.checkpoint_every = 500;
        }
        cfg.contrastive.batch_size = cfg.batch_size;
        cfg
    }

    /// Preset chosen by the document's `stage`, `preset` and `scale` keys,
    /// with every other key of the document merged over it.
    pub fn from_value(doc: serde_json::Value) -> Result<Self> {
        let invalid = |e: serde_json::Error| Error::Config(e.to_string());
        fn pick<T: serde::de::DeserializeOwned>(
            doc: &serde_json::Value,
            key: &str,
        ) -> Result<Option<T>> {
            doc.get(key)
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| Error::Config(format!("{key}: {e}")))
        }
        let stage = pick(&doc, "stage")?.unwrap_or(Stage::Style);
        let preset = pick(&doc, "preset")?.unwrap_or_default();
        let scale = pick(&doc, "scale")?.unwrap_or_default();
        let mut base = serde_json::to_value(TrainConfig::preset(stage, preset, scale))?;
        merge(&mut base, doc);
        let mut cfg: TrainConfig = serde_json::from_value(base).map_err(invalid)?;
        cfg.contrastive.batch_size = cfg.batch_size;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML or JSON, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc = parse_document(&text, path)?;
        Self::from_value(doc)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.weights.validate()?;
        if self.stage == Stage::Style {
            self.contrastive.validate()?;
        }
        self.data.patch.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.batch_size < 2 && self.stage == Stage::Style {
            return Err(Error::Config("style training needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    /// Digest of everything that shapes the trajectory; iteration budget,
    /// output location and the init path are excluded so a run can be
    /// extended or moved.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        c.output = OutputConfig::default();
        c.init = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parses a TOML (or, for `.json` paths, JSON) document.
pub fn parse_document(text: &str, path: &Path) -> Result<serde_json::Value> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(text)?)
    } else {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted key such as `optim.lr` in a document.
pub fn set_dotted(doc: &mut serde_json::Value, key: &str, value: serde_json::Value) {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = serde_json::Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return;
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub l_clip: f64,
    pub l_clip_f: f64,
    pub l_sim: f64,
    pub l_sty: f64,
    pub l_con: f64,
    pub l_id: f64,
    pub total: f64,
    /// Pixel L1 of the reconstruction stage.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_pix: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_psnr: Option<f64>,
}

impl StepRecord {
    fn from_report(iter: u64, r: &LossReport, grad_norm: f64, clipped: bool) -> Self {
        StepRecord {
            iter,
            l_clip: r.clip,
            l_clip_f: r.clip_f,
            l_sim: r.sim,
            l_sty: r.sty,
            l_con: r.con,
            l_id: r.id,
            total: r.total,
            l_pix: None,
            grad_norm,
            clipped,
            heldout_psnr: None,
        }
    }
}

/// Per-iteration batch seed.
pub fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed
        ^ iteration
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cat_pyramids(parts: &[&FeaturePyramid], layers: &[Layer]) -> Result<FeaturePyramid> {
    let mut out = FeaturePyramid::default();
    for &l in layers {
        let ts = parts
            .iter()
            .map(|p| Ok(p.get(l)?.tensor().clone()))
            .collect::<Result<Vec<_>>>()?;
        out.insert(l, FeatureMap::new(Tensor::cat(&ts, 0)?)?);
    }
    Ok(out)
}

fn narrow_pyramid(p: &FeaturePyramid, start: usize, len: usize) -> Result<FeaturePyramid> {
    let mut out = FeaturePyramid::default();
    for l in p.layers().collect::<Vec<_>>() {
        out.insert(
            l,
            FeatureMap::new(p.get(l)?.tensor().narrow(0, start, len)?)?,
        );
    }
    Ok(out)
}

pub struct Trainer {
    cfg: TrainConfig,
    frozen: Arc<Frozen>,
    net: TxstNet,
    adam: Adam,
    iteration: u64,
    manifest: Manifest,
    templates: PromptTemplates,
    skip: SkipList,
    images: HashMap<PathBuf, image::RgbImage>,
    heldout: Vec<Tensor>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let frozen = Frozen::new(&cfg.model)?;
        Self::with_frozen(cfg, frozen)
    }

    /// Shares already-built frozen components.
    pub fn with_frozen(cfg: TrainConfig, frozen: Arc<Frozen>) -> Result<Self> {
        cfg.validate()?;
        let net = TxstNet::new(&cfg.model)?;
        let mut manifest = Manifest::read(&cfg.data.manifest)?;
        if cfg.stage == Stage::Style && manifest.artists.is_empty() {
            return Err(Error::Dataset(
                "style training needs at least one artist".into(),
            ));
        }
        let templates = match &cfg.data.templates {
            Some(p) => PromptTemplates::load(p)?,
            None => PromptTemplates::default(),
        };
        let skip = SkipList::load(&cfg.output.dir.join("skip.json"))?;
        let root = manifest.content_root.clone();
        manifest
            .content
            .retain(|e| !skip.contains(&root.join(&e.path)));
        let heldout = match &cfg.data.heldout {
            Some(dir) => load_heldout(dir, cfg.data.patch.patch_size)?,
            None => Vec::new(),
        };
        if let (Stage::Style, Some(init)) = (cfg.stage, &cfg.init) {
            let ck = Checkpoint::load(init)?;
            check_frozen(&ck, &frozen, init)?;
            let decoder = ck.namespace("decoder");
            for p in net
                .params()
                .iter()
                .filter(|p| p.name().starts_with("decoder."))
            {
                let v = decoder.get(p.name()).ok_or_else(|| Error::Checkpoint {
                    path: init.clone(),
                    reason: format!("missing {}", p.name()),
                })?;
                p.set(v.clone())?;
            }
        }
        net.params().set_trainable(false);
        Ok(Trainer {
            cfg,
            frozen,
            net,
            adam: Adam::new(),
            iteration: 0,
            manifest,
            templates,
            skip,
            images: HashMap::new(),
            heldout,
        })
    }

    /// Continues from `ckpt`; the config must hash identically.
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: TrainConfig,
        frozen: Option<Arc<Frozen>>,
    ) -> Result<Self> {
        let path = cfg.output.dir.join("checkpoint.safetensors");
        let expected = cfg.hash();
        if ckpt.meta.config_hash != expected {
            return Err(Error::ConfigMismatch {
                expected,
                found: ckpt.meta.config_hash.clone(),
            });
        }
        let cfg = TrainConfig { init: None, ..cfg };
        let frozen = match frozen {
            Some(f) => f,
            None => Frozen::new(&cfg.model)?,
        };
        check_frozen(ckpt, &frozen, &path)?;
        let mut t = Self::with_frozen(cfg, frozen)?;
        t.net.params().load(&ckpt.params)?;
        t.adam = ckpt.adam.clone();
        t.iteration = ckpt.meta.iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn net(&self) -> &TxstNet {
        &self.net
    }

    pub fn frozen(&self) -> &Arc<Frozen> {
        &self.frozen
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn trainable(&self, name: &str) -> bool {
        match self.cfg.stage {
            Stage::Reconstruction => name.starts_with("decoder."),
            Stage::Style => true,
        }
    }

    fn image(&mut self, path: &Path) -> Result<&image::RgbImage> {
        if !self.images.contains_key(path) {
            let img = image::open(path).map_err(|source| Error::ImageFile {
                path: path.to_path_buf(),
                source,
            })?;
            self.images.insert(path.to_path_buf(), img.to_rgb8());
        }
        Ok(&self.images[path])
    }

    fn patch(&mut self, path: &Path, seed: u64) -> Result<Tensor> {
        let cfg = self.cfg.data.patch.clone();
        training_patch(self.image(path)?, &cfg, seed)
    }

    /// Drops an unreadable file from the in-memory manifest and persists it.
    fn skip_file(&mut self, path: &Path, err: &Error) -> Result<()> {
        if !matches!(err, Error::ImageFile { .. }) {
            return Ok(());
        }
        self.skip.record(path, err);
        std::fs::create_dir_all(&self.cfg.output.dir)?;
        self.skip.save(&self.cfg.output.dir.join("skip.json"))?;
        let (croot, sroot) = (
            self.manifest.content_root.clone(),
            self.manifest.style_root.clone(),
        );
        self.manifest
            .content
            .retain(|e| croot.join(&e.path) != path);
        for a in &mut self.manifest.artists {
            let dir = sroot.join(&a.dir);
            a.paintings.retain(|e| dir.join(&e.path) != path);
        }
        self.manifest.artists.retain(|a| a.paintings.len() >= 2);
        if self.manifest.content.is_empty()
            || (self.cfg.stage == Stage::Style && self.manifest.artists.is_empty())
        {
            return Err(Error::Dataset("every usable image was skipped".into()));
        }
        Ok(())
    }

    /// Loads a batch, skipping unreadable files and resampling.
    fn load_batch<T>(
        &mut self,
        mut load: impl FnMut(&mut Self, u64) -> std::result::Result<T, (PathBuf, Error)>,
    ) -> Result<T> {
        let base = iteration_seed(self.cfg.seed, self.iteration);
        for attempt in 0..64u64 {
            match load(self, base.wrapping_add(attempt)) {
                Ok(v) => return Ok(v),
                Err((path, e @ Error::ImageFile { .. })) => self.skip_file(&path, &e)?,
                Err((_, e)) => return Err(e),
            }
        }
        Err(Error::Dataset("too many unreadable images".into()))
    }

    fn reconstruction_batch(&mut self, seed: u64) -> std::result::Result<Tensor, (PathBuf, Error)> {
        let n = self.cfg.batch_size;
        let nc = self.manifest.content.len();
        let idx: Vec<usize> = if n <= nc {
            rand::seq::index::sample(
                &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
                nc,
                n,
            )
            .into_vec()
        } else {
            (0..n).map(|i| i % nc).collect()
        };
        let mut patches = Vec::with_capacity(n);
        for (k, i) in idx.into_iter().enumerate() {
            let path = self.manifest.content_path(i);
            let p = self
                .patch(&path, seed ^ (k as u64 + 1))
                .map_err(|e| (path.clone(), e))?;
            patches.push(p);
        }
        Tensor::cat(&patches, 0).map_err(|e| (PathBuf::new(), e))
    }

    fn style_batch(
        &mut self,
        seed: u64,
    ) -> std::result::Result<(TrainBatch, [Tensor; 3]), (PathBuf, Error)> {
        let batch = sample_minibatch(&self.manifest, &self.templates, self.cfg.batch_size, seed)
            .map_err(|e| (PathBuf::new(), e))?;
        let sroot = self.manifest.style_root.clone();
        let mut c = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..batch.len() {
            let seeds = batch.patch_seeds[i];
            let cp = self.manifest.content_path(batch.content[i]);
            let (ai, pa) = batch.style_a[i];
            let (_, pb) = batch.style_b[i];
            let ap = self.manifest.artists[ai].painting_path(&sroot, pa);
            let bp = self.manifest.artists[ai].painting_path(&sroot, pb);
            c.push(self.patch(&cp, seeds[0]).map_err(|e| (cp.clone(), e))?);
            a.push(self.patch(&ap, seeds[1]).map_err(|e| (ap.clone(), e))?);
            b.push(self.patch(&bp, seeds[2]).map_err(|e| (bp.clone(), e))?);
        }
        let cat = |v: &[Tensor]| Tensor::cat(v, 0).map_err(|e| (PathBuf::new(), e));
        Ok((batch, [cat(&c)?, cat(&a)?, cat(&b)?]))
    }

    /// Loss of the current parameters on the batch of the current
    /// iteration, without updating anything.
    pub fn evaluate_step(&mut self) -> Result<(Tensor, StepRecord)> {
        self.net.params().set_trainable(false);
        for p in self
            .net
            .params()
            .iter()
            .filter(|p| self.trainable(p.name()))
        {
            p.set(p.value().into_var())?;
        }
        match self.cfg.stage {
            Stage::Reconstruction => self.reconstruction_loss(),
            Stage::Style => self.style_loss(),
        }
    }

    fn reconstruction_loss(&mut self) -> Result<(Tensor, StepRecord)> {
        let images = self.load_batch(|t, s| t.reconstruction_batch(s))?;
        let pyr = self.frozen.vgg.encode(&images)?;
        let out = self
            .net
            .decoder()
            .decode(pyr.get(Layer::Relu4_1)?.tensor())?;
        let l_pix = out.sub(&images)?.abs().mean_all()?;
        let pyr_out = self.frozen.vgg.encode(&out)?;
        let l_con = content_loss(&pyr_out, &pyr, self.cfg.reduce)?;
        let total = l_pix.add(&l_con.scale(self.cfg.reconstruction_content_weight))?;
        let (pix, con, tot) = (l_pix.item()?, l_con.item()?, total.item()?);
        for (name, v) in [("pix", pix), ("con", con)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(if name == "pix" {
                    "pix"
                } else {
                    "con"
                }));
            }
        }
        let report = LossReport {
            clip: 0.0,
            clip_f: 0.0,
            sim: 0.0,
            sty: 0.0,
            con,
            id: 0.0,
            total: tot,
        };
        let mut rec = StepRecord::from_report(self.iteration + 1, &report, 0.0, false);
        rec.l_pix = Some(pix);
        Ok((total, rec))
    }

    fn style_loss(&mut self) -> Result<(Tensor, StepRecord)> {
        let (batch, [content, style_a, style_b]) = self.load_batch(|t, s| t.style_batch(s))?;
        let n = batch.len();
        let frozen = Arc::clone(&self.frozen);
        let clip = &frozen.clip;

        let pyr_c = frozen.vgg.encode(&content)?;
        let f_c = pyr_c.get(Layer::Relu4_1)?.clone();
        let styles = Tensor::cat(&[style_a, style_b], 0)?;
        let pyr_s = frozen.vgg.encode(&styles)?;
        let ref_feats = clip.image_features(&styles)?;
        let (nu_s, e_s) = (ref_feats.nu.detach(), ref_feats.embedding.detach());
        let e_c = clip.image_features(&content)?.embedding.detach();
        let text = |prompts: &[String]| -> Result<Tensor> {
            let rows = prompts
                .iter()
                .map(|p| clip.text_embedding(p))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&rows, 0)
        };
        let (e_ta, e_tb) = (text(&batch.prompts_a)?, text(&batch.prompts_b)?);
        let e_src = clip.text_embedding(&self.cfg.source_text)?;

        // Outputs in four groups of n: painting a, painting b, name a, name b.
        let style_vectors = Tensor::cat(&[e_s.clone(), e_ta.clone(), e_tb.clone()], 0)?;
        let f_c4 = FeatureMap::new(Tensor::cat(&vec![f_c.tensor().clone(); 4], 0)?)?;
        let f_cs = self.net.stylize_features(&f_c4, &style_vectors)?;
        let out = self.net.decoder().decode(f_cs.tensor())?;
        let pyr_out = frozen.vgg.encode(&out)?;
        let out_feats = clip.image_features(&out)?;

        let pyr_c4 = cat_pyramids(&[&pyr_c; 4], &Layer::CONTENT)?;
        let l_con = content_loss(&pyr_out, &pyr_c4, self.cfg.reduce)?;
        let l_sty = style_loss(
            &narrow_pyramid(&pyr_out, 0, 2 * n)?,
            &pyr_s,
            self.cfg.reduce,
        )?;
        let l_clip_f = clip_feature_loss(&out_feats.nu.narrow(0, 0, 2 * n)?, &nu_s)?;
        let targets = Tensor::cat(&[e_ta.clone(), e_tb.clone(), e_ta, e_tb], 0)?;
        let delta_t = targets.sub(&e_src)?;
        let e_c4 = Tensor::cat(&[e_c.clone(), e_c.clone(), e_c.clone(), e_c.clone()], 0)?;
        let l_clip = directional_clip_loss(&out_feats.embedding, &e_c4, &delta_t)?;
        let nu = |g: usize| out_feats.nu.narrow(0, g * n, n);
        let (set_i, set_t) = contrastive_sets(
            &nu(0)?,
            &nu(1)?,
            &nu(2)?,
            &nu(3)?,
            self.cfg.contrastive.text_pairing,
        )?;
        let l_sim = contrastive_similarity_loss(&set_i, &set_t, &self.cfg.contrastive)?;
        let f_self = self.net.stylize_features(&f_c, &e_c)?;
        let l_id = identity_loss(&f_self, &f_c, self.cfg.reduce)?;

        let terms = LossTerms {
            clip: l_clip,
            clip_f: l_clip_f,
            sim: l_sim,
            sty: l_sty,
            con: l_con,
            id: l_id,
        };
        let (total, report) = total_loss(&terms, &self.cfg.weights)?;
        Ok((
            total,
            StepRecord::from_report(self.iteration + 1, &report, 0.0, false),
        ))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (total, mut rec) = self.evaluate_step()?;
        let grads = total.backward()?;
        let mut g = collect_grads(self.net.params(), &grads, |n| self.trainable(n));
        let norm = clip_global_norm(&mut g, self.cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss("gradient"));
        }
        rec.grad_norm = norm;
        rec.clipped = norm > self.cfg.grad_clip;
        if rec.clipped {
            log::info!(
                "iteration {}: gradient norm {norm:.3} clipped to {}",
                rec.iter,
                self.cfg.grad_clip
            );
        }
        self.adam.update(self.net.params(), &g, &self.cfg.optim)?;
        self.iteration += 1;
        if self.cfg.output.eval_every > 0
            && self.iteration.is_multiple_of(self.cfg.output.eval_every)
            && !self.heldout.is_empty()
        {
            rec.heldout_psnr = Some(self.heldout_psnr()?);
        }
        Ok(rec)
    }

    /// Mean reconstruction PSNR over the held-out images.
    pub fn heldout_psnr(&self) -> Result<f64> {
        if self.heldout.is_empty() {
            return Err(Error::Dataset("no held-out images configured".into()));
        }
        let mut total = 0.0;
        for img in &self.heldout {
            let f = self.frozen.content_features(img)?;
            let out = self.net.decoder().decode(&f.tensor().detach())?.detach();
            total += psnr(&out, img)?;
        }
        Ok(total / self.heldout.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let artists = match self.cfg.stage {
            Stage::Style => self.manifest.artist_names(),
            Stage::Reconstruction => Vec::new(),
        };
        Checkpoint::capture(
            &self.cfg,
            &self.frozen,
            &self.net,
            &self.adam,
            self.iteration,
            artists,
        )
    }

    /// Runs to `cfg.iterations`, appending to `metrics.jsonl` and writing
    /// `checkpoint.safetensors` at the configured cadence. On a non-finite
    /// loss the last written checkpoint is left in place.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Checkpoint> {
        let dir = self.cfg.output.dir.clone();
        std::fs::create_dir_all(&dir)?;
        let mut metrics = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        let ckpt_path = dir.join("checkpoint.safetensors");
        while self.iteration < self.cfg.iterations {
            let rec = self.step()?;
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            on_step(&rec);
            let every = self.cfg.output.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) {
                self.checkpoint().save(&ckpt_path)?;
            }
        }
        let ck = self.checkpoint();
        ck.save(&ckpt_path)?;
        Ok(ck)
    }
}

fn check_frozen(ck: &Checkpoint, frozen: &Frozen, path: &Path) -> Result<()> {
    let _ = path;
    if ck.meta.frozen.vgg != frozen.vgg_hash() {
        return Err(Error::FrozenWeights {
            component: "perceptual encoder",
            expected: ck.meta.frozen.vgg.clone(),
            found: frozen.vgg_hash(),
        });
    }
    if ck.meta.frozen.clip != frozen.clip_hash() {
        return Err(Error::FrozenWeights {
            component: "joint embedder",
            expected: ck.meta.frozen.clip.clone(),
            found: frozen.clip_hash(),
        });
    }
    Ok(())
}

fn load_heldout(dir: &Path, size: u32) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    paths.sort();
    paths
        .into_iter()
        .filter(|p| p.is_file())
        .map(|p| {
            let img = image::open(&p).map_err(|source| Error::ImageFile {
                path: p.clone(),
                source,
            })?;
            center_patch(&img.to_rgb8(), size)
        })
        .collect()
}
