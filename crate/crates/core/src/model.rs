//! The stylization network: frozen perceptual encoder and joint embedder,
//! trainable decoder, positional mapper and polynomial attention.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Decoder, FeatureMap, Layer, VggConfig, VggEncoder};
use crate::clip::{ClipConfig, JointEmbedder, EMBED_DIM};
use crate::conditioner::{MapperConfig, PositionalMapper};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, PolyAttention};
use crate::nn::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vgg: VggConfig,
    pub clip: ClipConfig,
    pub mapper: MapperConfig,
    pub fusion: FusionConfig,
    /// Seed for the trainable parameters.
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Full-width encoder, ViT-B/32 embedder, 16x16 style grid.
    fn default() -> Self {
        ModelConfig {
            vgg: VggConfig::default(),
            clip: ClipConfig::default(),
            mapper: MapperConfig::default(),
            fusion: FusionConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow encoder and embedder for 32x32 CPU runs.
    pub fn desk() -> Self {
        let divisor = 4;
        let channels = 512 / divisor;
        ModelConfig {
            vgg: VggConfig {
                width_divisor: divisor,
                ..VggConfig::default()
            },
            clip: ClipConfig::desk(),
            mapper: MapperConfig {
                grid: 4,
                out_channels: channels,
                ..MapperConfig::default()
            },
            fusion: FusionConfig {
                channels,
                ..FusionConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mapper.validate()?;
        self.fusion.validate()?;
        let c = self.vgg.relu4_1_channels();
        if self.mapper.out_channels != c || self.fusion.channels != c {
            return Err(Error::Config(format!(
                "mapper.out_channels ({}) and fusion.channels ({}) must equal the encoder's relu4_1 width {c}",
                self.mapper.out_channels, self.fusion.channels
            )));
        }
        if self.mapper.embed_dim != EMBED_DIM {
            return Err(Error::Config(format!(
                "mapper.embed_dim must be {EMBED_DIM}, got {}",
                self.mapper.embed_dim
            )));
        }
        Ok(())
    }
}

/// Components that are never trained.
pub struct Frozen {
    pub vgg: VggEncoder,
    pub clip: JointEmbedder,
}

impl Frozen {
    pub fn new(cfg: &ModelConfig) -> Result<Arc<Self>> {
        Ok(Arc::new(Frozen {
            vgg: VggEncoder::new(&cfg.vgg)?,
            clip: JointEmbedder::new(&cfg.clip)?,
        }))
    }

    pub fn vgg_hash(&self) -> String {
        self.vgg.weights_hash()
    }

    pub fn clip_hash(&self) -> String {
        self.clip.weights_hash()
    }

    /// relu4_1 features of `(B, 3, H, W)` images.
    pub fn content_features(&self, images: &Tensor) -> Result<FeatureMap> {
        Ok(self.vgg.encode(images)?.get(Layer::Relu4_1)?.clone())
    }
}

/// Parameter namespaces in checkpoints.
pub const NAMESPACES: [&str; 3] = ["decoder", "mapper", "attention"];

pub struct TxstNet {
    cfg: ModelConfig,
    store: ParamStore,
    decoder: Decoder,
    mapper: PositionalMapper,
    attention: PolyAttention,
}

impl TxstNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let decoder = Decoder::new(&mut pb.pp("decoder"), cfg.vgg.width_divisor);
        let mapper = PositionalMapper::new(&mut pb.pp("mapper"), &cfg.mapper)?;
        let attention = PolyAttention::new(&mut pb.pp("attention"), &cfg.fusion)?;
        Ok(TxstNet {
            cfg: cfg.clone(),
            store,
            decoder,
            mapper,
            attention,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn mapper(&self) -> &PositionalMapper {
        &self.mapper
    }

    pub fn attention(&self) -> &PolyAttention {
        &self.attention
    }

    /// `(B, 512)` joint-space style vectors to fused features.
    pub fn stylize_features(
        &self,
        content: &FeatureMap,
        style_embedding: &Tensor,
    ) -> Result<FeatureMap> {
        let f_s = self.mapper.map_style(style_embedding)?;
        self.attention.fuse(content, &f_s)
    }

    /// Decoded image for content features and style vectors.
    pub fn render(&self, content: &FeatureMap, style_embedding: &Tensor) -> Result<Tensor> {
        self.decoder
            .decode(self.stylize_features(content, style_embedding)?.tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_renders_at_input_size() {
        let cfg = ModelConfig::desk();
        let frozen = Frozen::new(&cfg).unwrap();
        let net = TxstNet::new(&cfg).unwrap();
        let img = Tensor::full(0.4, &[2, 3, 32, 32]);
        let f_c = frozen.content_features(&img).unwrap();
        assert_eq!(f_c.tensor().shape(), &[2, 128, 4, 4]);
        let e = frozen.clip.text_embedding("Van Gogh").unwrap();
        let out = net
            .render(&f_c, &e.broadcast_as(&[2, EMBED_DIM]).unwrap())
            .unwrap();
        assert_eq!(out.shape(), &[2, 3, 32, 32]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn inconsistent_widths_are_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.fusion.channels = 64;
        assert!(matches!(TxstNet::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn parameters_are_namespaced() {
        let net = TxstNet::new(&ModelConfig::desk()).unwrap();
        for name in net.params().names() {
            assert!(
                NAMESPACES
                    .iter()
                    .any(|ns| name.starts_with(&format!("{ns}."))),
                "{name}"
            );
        }
        assert!(net.params().get("attention.order_2.query.weight").is_some());
    }
}
