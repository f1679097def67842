//! Adapter around the frozen joint text-image embedder.

mod model;
pub mod prompt;
pub mod tokenizer;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{center_crop, resize, shorter_side_size, Filter};
use crate::nn::{self, Init, Linear, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub use model::{TextTower, VisionTower};
pub use prompt::{augment_prompt, PromptTemplates, StylePrompt, WeightedPrompt};
pub use tokenizer::{BpeTokenizer, Tokenizer};

/// Width of the joint embedding space.
pub const EMBED_DIM: usize = 512;

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// A 512-dimensional vector in the joint space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClipEmbedding {
    values: Vec<f64>,
}

impl ClipEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBED_DIM {
            return Err(Error::Dimension {
                expected: EMBED_DIM,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss("embedding"));
        }
        Ok(ClipEmbedding { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `(1, 512)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.values.clone(), &[1, EMBED_DIM]).expect("embedding shape")
    }

    /// Weighted sum of embeddings; weights are used as given.
    pub fn weighted_sum(parts: &[(ClipEmbedding, f64)]) -> Result<ClipEmbedding> {
        let mut v = vec![0.0; EMBED_DIM];
        for (e, w) in parts {
            for (a, b) in v.iter_mut().zip(&e.values) {
                *a += w * b;
            }
        }
        ClipEmbedding::new(v)
    }
}

impl TryFrom<Vec<f64>> for ClipEmbedding {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ClipEmbedding::new(v)
    }
}

impl From<ClipEmbedding> for Vec<f64> {
    fn from(e: ClipEmbedding) -> Self {
        e.values
    }
}

/// Pre-projection visual feature of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTokenFeature {
    pub values: Vec<f64>,
    pub source_id: String,
}

/// `a . b / (|a| |b|)`; zero-norm inputs are an error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    /// Hugging Face layout safetensors; seeded weights when absent.
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ClipConfig {
    /// ViT-B/32 geometry.
    fn default() -> Self {
        ClipConfig {
            image_size: 224,
            patch_size: 32,
            vision_width: 768,
            vision_layers: 12,
            vision_heads: 12,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            context_length: 77,
            checkpoint: None,
            vocab: None,
            merges: None,
            seed: 32,
        }
    }
}

impl ClipConfig {
    /// A narrow two-layer model for desk-scale runs.
    pub fn desk() -> Self {
        ClipConfig {
            image_size: 32,
            patch_size: 8,
            vision_width: 64,
            vision_layers: 2,
            vision_heads: 2,
            text_width: 64,
            text_layers: 2,
            text_heads: 2,
            context_length: 48,
            ..ClipConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.image_size.is_multiple_of(self.patch_size)
            && self.vision_heads > 0
            && self.vision_width.is_multiple_of(self.vision_heads)
            && self.text_heads > 0
            && self.text_width.is_multiple_of(self.text_heads)
            && self.context_length >= 2;
        if !ok {
            return Err(Error::Config(format!(
                "inconsistent clip geometry: {self:?}"
            )));
        }
        if self.vocab.is_some() != self.merges.is_some() {
            return Err(Error::Config(
                "clip.vocab and clip.merges must be given together".into(),
            ));
        }
        Ok(())
    }
}

/// Differentiable outputs of the image tower.
pub struct ImageFeatures {
    /// Pre-projection features, `(B, vision_width)`.
    pub nu: Tensor,
    /// Joint-space embeddings, `(B, 512)`.
    pub embedding: Tensor,
}

pub struct JointEmbedder {
    cfg: ClipConfig,
    store: ParamStore,
    vision: VisionTower,
    visual_projection: Linear,
    text: TextTower,
    text_projection: Linear,
    tokenizer: Tokenizer,
    text_cache: Mutex<HashMap<String, Tensor>>,
}

impl JointEmbedder {
    pub fn new(cfg: &ClipConfig) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = match (&cfg.vocab, &cfg.merges) {
            (Some(v), Some(m)) => Tokenizer::Bpe(Box::new(BpeTokenizer::from_files(v, m)?)),
            _ => Tokenizer::Bytes,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let vision = VisionTower::new(
            &mut pb.pp("vision_model"),
            cfg.image_size,
            cfg.patch_size,
            cfg.vision_width,
            cfg.vision_layers,
            cfg.vision_heads,
        );
        let visual_projection = Linear::with_init(
            &mut pb.pp("visual_projection"),
            cfg.vision_width,
            EMBED_DIM,
            false,
            Init::Normal((cfg.vision_width as f64).powf(-0.5)),
        );
        let text = TextTower::new(
            &mut pb.pp("text_model"),
            tokenizer.vocab_size(),
            cfg.context_length,
            cfg.text_width,
            cfg.text_layers,
            cfg.text_heads,
        );
        let text_projection = Linear::with_init(
            &mut pb.pp("text_projection"),
            cfg.text_width,
            EMBED_DIM,
            false,
            Init::Normal((cfg.text_width as f64).powf(-0.5)),
        );
        if let Some(path) = &cfg.checkpoint {
            let weights = nn::load_safetensors(path)?;
            nn::assign_weights(&store, &weights, |n| n.to_string())?;
        }
        Ok(JointEmbedder {
            cfg: cfg.clone(),
            store,
            vision,
            visual_projection,
            text,
            text_projection,
            tokenizer,
            text_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn weights_hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn token_width(&self) -> usize {
        self.vision.width()
    }

    /// `(1, 512)` text embedding, untracked.
    pub fn text_embedding(&self, prompt: &str) -> Result<Tensor> {
        if let Some(t) = self.text_cache.lock().expect("cache lock").get(prompt) {
            return Ok(t.clone());
        }
        let ids = self.tokenizer.encode(prompt, self.cfg.context_length)?;
        let e = self
            .text_projection
            .forward(&self.text.forward(&ids)?)?
            .detach();
        self.text_cache
            .lock()
            .expect("cache lock")
            .insert(prompt.to_string(), e.clone());
        Ok(e)
    }

    pub fn encode_text(&self, prompt: &str) -> Result<ClipEmbedding> {
        ClipEmbedding::new(self.text_embedding(prompt)?.to_vec())
    }

    /// Resize the shorter side, center crop, and standardize.
    pub fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Channels(c));
        }
        let s = self.cfg.image_size;
        let (rh, rw) = shorter_side_size(h, w, s);
        let x = center_crop(&resize(images, rh, rw, Filter::Bicubic)?, s, s)?;
        let mean = Tensor::new(CLIP_MEAN.to_vec(), &[1, 3, 1, 1])?;
        let std = Tensor::new(CLIP_STD.to_vec(), &[1, 3, 1, 1])?;
        x.sub(&mean)?.div(&std)
    }

    /// Gradients flow back to `images` (`(B, 3, H, W)` in `[0, 1]`).
    pub fn image_features(&self, images: &Tensor) -> Result<ImageFeatures> {
        let nu = self.vision.forward(&self.preprocess(images)?)?;
        let embedding = self.visual_projection.forward(&nu)?;
        Ok(ImageFeatures { nu, embedding })
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<ClipEmbedding> {
        let f = self.image_features(&image.detach())?;
        ClipEmbedding::new(f.embedding.narrow(0, 0, 1)?.to_vec())
    }

    pub fn encode_image_tokens(&self, image: &Tensor, source_id: &str) -> Result<ClipTokenFeature> {
        let f = self.image_features(&image.detach())?;
        Ok(ClipTokenFeature {
            values: f.nu.narrow(0, 0, 1)?.to_vec(),
            source_id: source_id.to_string(),
        })
    }
}
