//! Vision and text transformer towers of the joint embedder. Parameter names
//! follow the Hugging Face CLIP layout so converted checkpoints load as-is.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Param, ParamBuilder};
use crate::tensor::Tensor;

/// Added to masked attention logits.
const MASKED: f64 = -1e9;

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, w) = match x.shape() {
            [b, t, w] => (*b, *t, *w),
            s => return Err(Error::shape("attention", format!("{s:?}"))),
        };
        let dh = w / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            y.reshape(&[b, t, self.heads, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(self.q.forward(x)?.scale(1.0 / (dh as f64).sqrt()))?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut logits = q.matmul(&k.permute(&[0, 1, 3, 2])?)?;
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        let y = logits
            .softmax_last()?
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, w])?;
        self.out.forward(&y)
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(pb: &mut ParamBuilder, width: usize, heads: usize, layers: usize) -> Self {
        let w = width as f64;
        let attn_std = w.powf(-0.5);
        let proj_std = attn_std * (2.0 * layers as f64).powf(-0.5);
        let fc_std = (2.0 * w).powf(-0.5);
        let mut attn = pb.pp("self_attn");
        let attention = Attention {
            q: Linear::with_init(
                &mut attn.pp("q_proj"),
                width,
                width,
                true,
                Init::Normal(attn_std),
            ),
            k: Linear::with_init(
                &mut attn.pp("k_proj"),
                width,
                width,
                true,
                Init::Normal(attn_std),
            ),
            v: Linear::with_init(
                &mut attn.pp("v_proj"),
                width,
                width,
                true,
                Init::Normal(attn_std),
            ),
            out: Linear::with_init(
                &mut attn.pp("out_proj"),
                width,
                width,
                true,
                Init::Normal(proj_std),
            ),
            heads,
        };
        Block {
            ln1: LayerNorm::new(&mut pb.pp("layer_norm1"), width),
            attn: attention,
            ln2: LayerNorm::new(&mut pb.pp("layer_norm2"), width),
            fc1: Linear::with_init(
                &mut pb.pp("mlp").pp("fc1"),
                width,
                4 * width,
                true,
                Init::Normal(fc_std),
            ),
            fc2: Linear::with_init(
                &mut pb.pp("mlp").pp("fc2"),
                4 * width,
                width,
                true,
                Init::Normal(proj_std),
            ),
        }
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.quick_gelu()?;
        x.add(&self.fc2.forward(&h)?)
    }
}

struct Encoder {
    blocks: Vec<Block>,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder, width: usize, heads: usize, layers: usize) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(&mut pb.pp(&format!("layers.{i}")), width, heads, layers))
            .collect();
        Encoder { blocks }
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x, mask)?;
        }
        Ok(x)
    }
}

pub struct VisionTower {
    patch: usize,
    width: usize,
    patch_embedding: Arc<Param>,
    class_embedding: Arc<Param>,
    position_embedding: Arc<Param>,
    pre_ln: LayerNorm,
    encoder: Encoder,
    post_ln: LayerNorm,
}

impl VisionTower {
    pub fn new(
        pb: &mut ParamBuilder,
        image: usize,
        patch: usize,
        width: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let scale = (width as f64).powf(-0.5);
        let grid = image / patch;
        let mut emb = pb.pp("embeddings");
        let fan_in = (3 * patch * patch) as f64;
        VisionTower {
            patch,
            width,
            patch_embedding: emb.param(
                "patch_embedding.weight",
                &[width, 3, patch, patch],
                Init::Uniform(fan_in.powf(-0.5)),
            ),
            class_embedding: emb.param("class_embedding", &[width], Init::Normal(scale)),
            position_embedding: emb.param(
                "position_embedding.weight",
                &[grid * grid + 1, width],
                Init::Normal(scale),
            ),
            pre_ln: LayerNorm::new(&mut pb.pp("pre_layrnorm"), width),
            encoder: Encoder::new(&mut pb.pp("encoder"), width, heads, layers),
            post_ln: LayerNorm::new(&mut pb.pp("post_layernorm"), width),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pooled, normalized class token of preprocessed `(B, 3, S, S)` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dims4()?.0;
        let p = x.conv2d(&self.patch_embedding.value(), self.patch, 0)?;
        let (_, w, gh, gw) = p.dims4()?;
        let tokens = p.reshape(&[b, w, gh * gw])?.permute(&[0, 2, 1])?;
        let cls = self
            .class_embedding
            .value()
            .reshape(&[1, 1, w])?
            .broadcast_as(&[b, 1, w])?;
        let seq = Tensor::cat(&[cls, tokens], 1)?;
        let seq = seq.add(&self.position_embedding.value())?;
        let h = self.encoder.forward(&self.pre_ln.forward(&seq)?, None)?;
        let cls_out = h.narrow(1, 0, 1)?.reshape(&[b, w])?;
        self.post_ln.forward(&cls_out)
    }
}

pub struct TextTower {
    width: usize,
    context: usize,
    token_embedding: Arc<Param>,
    position_embedding: Arc<Param>,
    encoder: Encoder,
    final_ln: LayerNorm,
}

impl TextTower {
    pub fn new(
        pb: &mut ParamBuilder,
        vocab: usize,
        context: usize,
        width: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let mut emb = pb.pp("embeddings");
        TextTower {
            width,
            context,
            token_embedding: emb.param(
                "token_embedding.weight",
                &[vocab, width],
                Init::Normal(0.02),
            ),
            position_embedding: emb.param(
                "position_embedding.weight",
                &[context, width],
                Init::Normal(0.01),
            ),
            encoder: Encoder::new(&mut pb.pp("encoder"), width, heads, layers),
            final_ln: LayerNorm::new(&mut pb.pp("final_layer_norm"), width),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Final-layer feature at the end-of-text token, `(1, width)`.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let t = ids.len();
        if t == 0 || t > self.context {
            return Err(Error::PromptTooLong {
                len: t,
                max: self.context,
            });
        }
        let vocab = self.token_embedding.shape()[0];
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Tokenizer(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let x = self
            .token_embedding
            .value()
            .index_select(0, ids)?
            .add(&self.position_embedding.value().narrow(0, 0, t)?)?
            .reshape(&[1, t, self.width])?;
        let mask: Vec<f64> = (0..t * t)
            .map(|k| if k % t > k / t { MASKED } else { 0.0 })
            .collect();
        let mask = Tensor::new(mask, &[t, t])?;
        let h = self
            .final_ln
            .forward(&self.encoder.forward(&x, Some(&mask))?)?;
        h.narrow(1, t - 1, 1)?.reshape(&[1, self.width])
    }
}
