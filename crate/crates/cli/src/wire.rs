//! JSON bodies of the HTTP service.

use serde::{Deserialize, Serialize};
use txst_core::clip::StylePrompt;
use txst_core::evaluator::MetricReport;
use txst_core::inference::BlendMode;

pub const WIRE_SCHEMA_VERSION: u32 = 1;

/// One style clue of a request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptSpec {
    Text {
        text: String,
        #[serde(default = "one")]
        weight: f64,
    },
    /// `image_ref` names another multipart field holding the image.
    Image {
        image_ref: String,
        #[serde(default = "one")]
        weight: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl PromptSpec {
    pub fn weight(&self) -> f64 {
        match self {
            PromptSpec::Text { weight, .. } | PromptSpec::Image { weight, .. } => *weight,
        }
    }

    fn leaf(&self) -> StylePrompt {
        match self {
            PromptSpec::Text { text, .. } => StylePrompt::text(text.clone()),
            PromptSpec::Image { image_ref, .. } => StylePrompt::image(image_ref.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeRequest {
    pub prompts: Vec<PromptSpec>,
    /// Mix of stylized and content pixels, in `[0, 1]`.
    #[serde(default = "one")]
    pub strength: f64,
    /// Echoed back; inference itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_size: Option<OutputSize>,
    #[serde(default)]
    pub blend: BlendMode,
    /// Compute content/style scores for the result.
    #[serde(default = "yes")]
    pub metrics: bool,
}

fn yes() -> bool {
    true
}

impl StylizeRequest {
    pub fn text(text: &str) -> Self {
        StylizeRequest {
            prompts: vec![PromptSpec::Text {
                text: text.into(),
                weight: 1.0,
            }],
            strength: 1.0,
            seed: 0,
            output_size: None,
            blend: BlendMode::Embedding,
            metrics: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.prompts.is_empty() {
            return Err("at least one prompt is required".into());
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(format!("strength {} outside [0, 1]", self.strength));
        }
        if let Some(s) = self.output_size {
            if s.width == 0 || s.height == 0 {
                return Err("output_size must be positive".into());
            }
        }
        self.style_prompt().validate().map_err(|e| e.to_string())
    }

    /// A single prompt as-is, several as a blend with their weights.
    pub fn style_prompt(&self) -> StylePrompt {
        match self.prompts.as_slice() {
            [only] => only.leaf(),
            many => StylePrompt::blend(many.iter().map(|p| (p.leaf(), p.weight())).collect()),
        }
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.prompts.iter().filter_map(|p| match p {
            PromptSpec::Image { image_ref, .. } => Some(image_ref.as_str()),
            PromptSpec::Text { .. } => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelIds {
    /// Digest of the trained parameters.
    pub model_id: String,
    pub checkpoint_iteration: u64,
    pub fusion_order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizeResponse {
    pub schema_version: u32,
    /// Base64 PNG.
    pub image_png: String,
    pub width: u32,
    pub height: u32,
    /// SHA-256 of the PNG bytes.
    pub image_sha256: String,
    pub metrics: Option<MetricReport>,
    pub model: ModelIds,
    pub seed: u64,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtistsResponse {
    pub schema_version: u32,
    pub artists: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub schema_version: u32,
    pub model_id: String,
    pub config_hash: String,
    pub fusion_order: usize,
    pub stage: txst_core::trainer::Stage,
    pub iteration: u64,
    pub frozen: txst_core::checkpoint::FrozenHashes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

/// JSON Schema of the `request` field of `POST /v1/stylize`.
pub fn request_schema() -> serde_json::Value {
    let weight = serde_json::json!({"type": "number", "minimum": 0, "default": 1});
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": "txst/stylize-request/v1",
        "type": "object",
        "additionalProperties": false,
        "required": ["prompts"],
        "properties": {
            "prompts": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "oneOf": [
                        {
                            "type": "object",
                            "additionalProperties": false,
                            "required": ["kind", "text"],
                            "properties": {
                                "kind": {"const": "text"},
                                "text": {"type": "string", "minLength": 1},
                                "weight": weight
                            }
                        },
                        {
                            "type": "object",
                            "additionalProperties": false,
                            "required": ["kind", "image_ref"],
                            "properties": {
                                "kind": {"const": "image"},
                                "image_ref": {"type": "string", "minLength": 1},
                                "weight": weight
                            }
                        }
                    ]
                }
            },
            "strength": {"type": "number", "minimum": 0, "maximum": 1, "default": 1},
            "seed": {"type": "integer", "minimum": 0, "default": 0},
            "output_size": {
                "type": ["object", "null"],
                "additionalProperties": false,
                "required": ["width", "height"],
                "properties": {
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1}
                }
            },
            "blend": {"enum": ["embedding", "combined_text"], "default": "embedding"},
            "metrics": {"type": "boolean", "default": true}
        }
    })
}

/// JSON Schema of the stylize response.
pub fn response_schema() -> serde_json::Value {
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": "txst/stylize-response/v1",
        "type": "object",
        "required": ["schema_version", "image_png", "width", "height", "image_sha256", "metrics", "model", "seed", "timing_ms"],
        "properties": {
            "schema_version": {"const": WIRE_SCHEMA_VERSION},
            "image_png": {"type": "string", "contentEncoding": "base64", "contentMediaType": "image/png"},
            "width": {"type": "integer"},
            "height": {"type": "integer"},
            "image_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
            "metrics": {
                "type": ["object", "null"],
                "required": ["schema_version", "s_cont", "s_style", "style_kind", "f1"],
                "properties": {
                    "s_cont": {"type": "number", "minimum": -1, "maximum": 1},
                    "s_style": {"type": "number", "minimum": -1, "maximum": 1},
                    "style_kind": {"enum": ["image", "text", "blend"]},
                    "f1": {"type": ["number", "null"]}
                }
            },
            "model": {
                "type": "object",
                "required": ["model_id", "checkpoint_iteration", "fusion_order"]
            },
            "seed": {"type": "integer"},
            "timing_ms": {"type": "number"}
        }
    })
}
