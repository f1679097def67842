//! Test-time stylization from a checkpoint.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::clip::{ClipEmbedding, StylePrompt};
use crate::error::{Error, Result};
use crate::image_io::{resize, Filter};
use crate::model::{Frozen, TxstNet};
use crate::tensor::Tensor;

/// How a blend of several prompts becomes one style vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Weighted mean of the component embeddings.
    #[default]
    Embedding,
    /// All-text blends become one sentence joined with "and"; other
    /// blends fall back to the embedding mean.
    CombinedText,
}

/// Feature maps are a factor of 8 below the image, so inputs are resized
/// to a multiple of this.
pub const SIZE_MULTIPLE: usize = 8;

pub struct Stylizer {
    frozen: Arc<Frozen>,
    net: TxstNet,
    meta: CheckpointMeta,
    model_id: String,
}

impl Stylizer {
    /// Builds the frozen components from the checkpoint's config unless
    /// `frozen` is given; either way their hashes must match.
    pub fn from_checkpoint(ck: &Checkpoint, frozen: Option<Arc<Frozen>>) -> Result<Self> {
        let model = &ck.meta.config.model;
        let frozen = match frozen {
            Some(f) => f,
            None => Frozen::new(model)?,
        };
        if frozen.vgg_hash() != ck.meta.frozen.vgg || frozen.clip_hash() != ck.meta.frozen.clip {
            return Err(Error::FrozenWeights {
                component: "encoders",
                expected: format!("{}/{}", ck.meta.frozen.vgg, ck.meta.frozen.clip),
                found: format!("{}/{}", frozen.vgg_hash(), frozen.clip_hash()),
            });
        }
        let net = TxstNet::new(model)?;
        net.params().load(&ck.params)?;
        net.params().set_trainable(false);
        Ok(Stylizer {
            frozen,
            net,
            meta: ck.meta.clone(),
            model_id: ck.params_hash(),
        })
    }

    pub fn frozen(&self) -> &Arc<Frozen> {
        &self.frozen
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    /// Digest of the trained parameters.
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn fusion_order(&self) -> usize {
        self.net.config().fusion.order
    }

    /// Style vector of a prompt. Image prompts look up `images` by ref.
    pub fn resolve(
        &self,
        prompt: &StylePrompt,
        images: &HashMap<String, Tensor>,
        mode: BlendMode,
    ) -> Result<ClipEmbedding> {
        if let (BlendMode::CombinedText, StylePrompt::Blend { .. }) = (mode, prompt) {
            prompt.validate()?;
            if let Some(text) = prompt.combined_text() {
                return self.frozen.clip.encode_text(&text);
            }
        }
        let parts = prompt
            .normalized_components()?
            .into_iter()
            .map(|(p, w)| {
                let e = match &p {
                    StylePrompt::Text { text } => self.frozen.clip.encode_text(text)?,
                    StylePrompt::Image { image_ref } => {
                        let img = images.get(image_ref).ok_or_else(|| {
                            Error::Prompt(format!("no image supplied for {image_ref:?}"))
                        })?;
                        self.frozen.clip.encode_image(img)?
                    }
                    StylePrompt::Blend { .. } => unreachable!("components are leaves"),
                };
                Ok((e, w))
            })
            .collect::<Result<Vec<_>>>()?;
        ClipEmbedding::weighted_sum(&parts)
    }

    /// Stylized `(1, 3, H, W)` image at the input size, mixed with the
    /// content as `alpha * stylized + (1 - alpha) * content`.
    pub fn stylize(&self, content: &Tensor, style: &ClipEmbedding, alpha: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Prompt(format!("strength {alpha} outside [0, 1]")));
        }
        let content = content.detach();
        let (n, c, h, w) = content.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape(
                "stylize",
                format!("expected (1, 3, H, W), got {:?}", content.shape()),
            ));
        }
        if alpha == 0.0 {
            return Ok(content);
        }
        let round = |v: usize| {
            (v.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE).max(crate::backbone::MIN_INPUT_SIDE)
        };
        let (rh, rw) = (round(h), round(w));
        let input = if (rh, rw) == (h, w) {
            content.clone()
        } else {
            resize(&content, rh, rw, Filter::Bicubic)?
        };
        let f_c = self.frozen.content_features(&input)?;
        let mut out = self.net.render(&f_c, &style.to_tensor())?.detach();
        if (rh, rw) != (h, w) {
            out = resize(&out, h, w, Filter::Bicubic)?.clamp_detached(0.0, 1.0);
        }
        if alpha == 1.0 {
            return Ok(out);
        }
        out.scale(alpha).add(&content.scale(1.0 - alpha))
    }
}

/// Downscales so the longer side is at most `max_side`.
pub fn cap_longest_side(image: &Tensor, max_side: usize) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    let longest = h.max(w);
    if longest <= max_side {
        return Ok(image.clone());
    }
    let s = max_side as f64 / longest as f64;
    let (nh, nw) = (
        ((h as f64 * s).round() as usize).max(1),
        ((w as f64 * s).round() as usize).max(1),
    );
    Ok(resize(image, nh, nw, Filter::Bicubic)?.clamp_detached(0.0, 1.0))
}
