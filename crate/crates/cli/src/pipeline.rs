//! Request-level stylization shared by the `stylize` command and the service.

use std::collections::HashMap;
use std::time::Instant;

use base64::Engine;
use sha2::{Digest, Sha256};
use txst_core::evaluator::{clip_scores, StyleKind};
use txst_core::image_io::{encode_png, resize, Filter};
use txst_core::inference::{cap_longest_side, Stylizer};
use txst_core::{Result, Tensor};

use crate::wire::{ModelIds, StylizeRequest, StylizeResponse, WIRE_SCHEMA_VERSION};

pub struct Outcome {
    pub png: Vec<u8>,
    pub response: StylizeResponse,
}

/// Runs one request. `max_side` bounds the content's longer side.
pub fn stylize(
    stylizer: &Stylizer,
    content: &Tensor,
    images: &HashMap<String, Tensor>,
    req: &StylizeRequest,
    max_side: Option<usize>,
) -> Result<Outcome> {
    let start = Instant::now();
    req.validate().map_err(txst_core::Error::Prompt)?;
    let content = match max_side {
        Some(m) => cap_longest_side(content, m)?,
        None => content.clone(),
    };
    let prompt = req.style_prompt();
    let style = stylizer.resolve(&prompt, images, req.blend)?;
    let mut out = stylizer.stylize(&content, &style, req.strength)?;
    let metrics = if req.metrics {
        Some(clip_scores(
            &stylizer.frozen().clip,
            &content,
            &out,
            &style,
            StyleKind::of(&prompt),
        )?)
    } else {
        None
    };
    if let Some(size) = req.output_size {
        out = resize(
            &out,
            size.height as usize,
            size.width as usize,
            Filter::Bicubic,
        )?
        .clamp_detached(0.0, 1.0);
    }
    let (_, _, h, w) = out.dims4()?;
    let png = encode_png(&out)?;
    let response = StylizeResponse {
        schema_version: WIRE_SCHEMA_VERSION,
        image_png: base64::engine::general_purpose::STANDARD.encode(&png),
        width: w as u32,
        height: h as u32,
        image_sha256: hex::encode(Sha256::digest(&png)),
        metrics,
        model: ModelIds {
            model_id: stylizer.model_id().to_string(),
            checkpoint_iteration: stylizer.meta().iteration,
            fusion_order: stylizer.fusion_order(),
        },
        seed: req.seed,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Outcome { png, response })
}
