//! Style prompts and artist-name augmentation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TEMPLATES: &str = include_str!("../../../../assets/prompt_templates.txt");
const PLACEHOLDER: &str = "{name}";

/// A style clue: text, a reference image, or a weighted mix of clues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StylePrompt {
    Text {
        text: String,
    },
    /// `image_ref` names an image supplied alongside the prompt.
    Image {
        image_ref: String,
    },
    Blend {
        components: Vec<WeightedPrompt>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrompt {
    pub prompt: StylePrompt,
    pub weight: f64,
}

impl StylePrompt {
    pub fn text(t: impl Into<String>) -> Self {
        StylePrompt::Text { text: t.into() }
    }

    pub fn image(r: impl Into<String>) -> Self {
        StylePrompt::Image {
            image_ref: r.into(),
        }
    }

    pub fn blend(parts: Vec<(StylePrompt, f64)>) -> Self {
        StylePrompt::Blend {
            components: parts
                .into_iter()
                .map(|(prompt, weight)| WeightedPrompt { prompt, weight })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StylePrompt::Text { text } if text.trim().is_empty() => Err(Error::EmptyPrompt),
            StylePrompt::Image { image_ref } if image_ref.is_empty() => {
                Err(Error::Prompt("image prompt without a reference".into()))
            }
            StylePrompt::Blend { components } => {
                if components.is_empty() {
                    return Err(Error::Prompt("blend without components".into()));
                }
                let mut total = 0.0;
                for c in components {
                    if !c.weight.is_finite() || c.weight < 0.0 {
                        return Err(Error::Prompt(format!(
                            "blend weight {} is not a finite value >= 0",
                            c.weight
                        )));
                    }
                    total += c.weight;
                    c.prompt.validate()?;
                }
                if total <= 0.0 {
                    return Err(Error::Prompt("blend weights sum to zero".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Leaf prompts with weights that sum to one.
    pub fn normalized_components(&self) -> Result<Vec<(StylePrompt, f64)>> {
        self.validate()?;
        let mut out = Vec::new();
        flatten(self, 1.0, &mut out);
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut out {
            *w /= total;
        }
        Ok(out)
    }

    /// All leaves joined into one sentence when every leaf is text.
    pub fn combined_text(&self) -> Option<String> {
        let mut leaves = Vec::new();
        flatten(self, 1.0, &mut leaves);
        let texts: Option<Vec<String>> = leaves
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(p, _)| match p {
                StylePrompt::Text { text } => Some(text.trim().to_string()),
                _ => None,
            })
            .collect();
        texts.filter(|t| !t.is_empty()).map(|t| t.join(" and "))
    }
}

fn flatten(p: &StylePrompt, scale: f64, out: &mut Vec<(StylePrompt, f64)>) {
    match p {
        StylePrompt::Blend { components } => {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            for c in components {
                flatten(&c.prompt, scale * c.weight / total, out);
            }
        }
        leaf => out.push((leaf.clone(), scale)),
    }
}

/// Fixed template set applied around artist names.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    templates: Vec<String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let templates: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if templates.is_empty() {
            return Err(Error::Config(
                "prompt template file has no templates".into(),
            ));
        }
        if let Some(bad) = templates
            .iter()
            .find(|t| t.matches(PLACEHOLDER).count() != 1)
        {
            return Err(Error::Config(format!(
                "template {bad:?} must contain {PLACEHOLDER} exactly once"
            )));
        }
        Ok(PromptTemplates { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn apply(&self, index: usize, name: &str) -> String {
        self.templates[index % self.templates.len()].replace(PLACEHOLDER, name)
    }

    pub fn augment(&self, name: &str, seed: u64) -> Result<String> {
        if name.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let idx = ChaCha8Rng::seed_from_u64(seed).random_range(0..self.templates.len());
        Ok(self.apply(idx, name))
    }
}

/// Draws a template for `name` from the bundled set.
pub fn augment_prompt(name: &str, seed: u64) -> Result<String> {
    PromptTemplates::default().augment(name, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn bundled_templates() {
        let t = PromptTemplates::default();
        assert_eq!(t.templates().len(), 6);
        assert_eq!(t.apply(0, "Van Gogh"), "Van Gogh");
    }

    #[test]
    fn augmentation_is_seeded_and_keeps_the_name() {
        assert_eq!(
            augment_prompt("Van Gogh", 0).unwrap(),
            augment_prompt("Van Gogh", 0).unwrap()
        );
        let seen: HashSet<String> = (0..100)
            .map(|s| augment_prompt("Van Gogh", s).unwrap())
            .collect();
        assert!(seen.len() >= 2);
        assert!(seen.iter().all(|s| s.contains("Van Gogh")));
        assert!(augment_prompt(" ", 1).is_err());
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplates::parse("# only comments\n\n").is_err());
        assert!(PromptTemplates::parse("no placeholder").is_err());
        assert!(PromptTemplates::parse("{name} and {name}").is_err());
    }

    #[test]
    fn blend_weights_normalize() {
        let p = StylePrompt::blend(vec![
            (StylePrompt::text("Claude Monet"), 1.0),
            (
                StylePrompt::blend(vec![
                    (StylePrompt::text("Van Gogh"), 2.0),
                    (StylePrompt::image("ref0"), 2.0),
                ]),
                3.0,
            ),
        ]);
        let parts = p.normalized_components().unwrap();
        let w: Vec<f64> = parts.iter().map(|(_, w)| *w).collect();
        assert_eq!(w, vec![0.25, 0.375, 0.375]);
        assert_eq!(p.combined_text(), None);
        let texts = StylePrompt::blend(vec![
            (StylePrompt::text("Claude Monet"), 1.0),
            (StylePrompt::text("Van Gogh"), 1.0),
        ]);
        assert_eq!(
            texts.combined_text().as_deref(),
            Some("Claude Monet and Van Gogh")
        );
    }

    #[test]
    fn invalid_prompts() {
        assert!(StylePrompt::text("  ").validate().is_err());
        assert!(StylePrompt::blend(vec![]).validate().is_err());
        assert!(StylePrompt::blend(vec![(StylePrompt::text("a"), -1.0)])
            .validate()
            .is_err());
        assert!(StylePrompt::blend(vec![(StylePrompt::text("a"), 0.0)])
            .validate()
            .is_err());
    }

    #[test]
    fn wire_format() {
        let p: StylePrompt = serde_json::from_str(
            r#"{"kind":"blend","components":[{"prompt":{"kind":"text","text":"Van Gogh"},"weight":1.0}]}"#,
        )
        .unwrap();
        assert_eq!(
            p,
            StylePrompt::blend(vec![(StylePrompt::text("Van Gogh"), 1.0)])
        );
        let s = serde_json::to_string(&StylePrompt::image("style_0")).unwrap();
        assert_eq!(s, r#"{"kind":"image","image_ref":"style_0"}"#);
    }
}
