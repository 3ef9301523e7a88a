//! Fixed prompt templates and placeholder substitution.

use crate::error::{Error, Result};

pub const OBJECT_PLACEHOLDER: &str = "{OBJECT}";

/// Context prompt used during concept learning.
pub const CONTEXT_TEMPLATE: &str = "A {OBJECT} with [v*] style";
/// Concept-only prompt fed to the RoI loss.
pub const ROI_TEMPLATE: &str = "A photo of [v*]";
/// Region-token prompt for target mask matching.
pub const REGION_TEMPLATE: &str = "a [w*] region of an {OBJECT}";
/// Region-token prompt for common concept discovery.
pub const DISCOVERY_TEMPLATE: &str = "An {OBJECT} with [w*] style";
/// First-stage generation prompt (unmodified model).
pub const GENERATION_BASE_TEMPLATE: &str = "a photo of an {OBJECT}";
/// Second-stage generation prompt (fine-tuned model).
pub const GENERATION_CONCEPT_TEMPLATE: &str = "a photo of an {OBJECT}, with [v*] style";

/// Scale change applied by the zoom augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoomTag {
    In,
    Out,
}

impl ZoomTag {
    pub fn suffix(self) -> &'static str {
        match self {
            ZoomTag::In => ", zoomed-in",
            ZoomTag::Out => ", zoomed-out",
        }
    }
}

/// Substitutes `{OBJECT}`, renames the `[v*]` or `[w*]` placeholder to `[token]` and
/// appends the zoom suffix when the zoom augmentation fired.
///
/// The template must contain both `{OBJECT}` and a concept placeholder
/// (`[v*]`, `[w*]` or `[token]`).
pub fn build_prompt(template: &str, object_class: &str, token: &str, zoom: Option<ZoomTag>) -> Result<String> {
    if !template.contains(OBJECT_PLACEHOLDER) {
        return Err(Error::MissingPlaceholder(OBJECT_PLACEHOLDER.into()));
    }
    if object_class.trim().is_empty() {
        return Err(Error::InvalidArgument("object class must be nonempty".into()));
    }
    let mut out = substitute_token(template, token)?.replace(OBJECT_PLACEHOLDER, object_class);
    if let Some(z) = zoom {
        out.push_str(z.suffix());
    }
    Ok(out)
}

/// Prompt without an object slot, e.g. the RoI prompt `A photo of [v*]`.
pub fn build_token_prompt(template: &str, token: &str) -> Result<String> {
    substitute_token(template, token)
}

/// Prompt with an object slot but no concept token.
pub fn build_object_prompt(template: &str, object_class: &str) -> Result<String> {
    if !template.contains(OBJECT_PLACEHOLDER) {
        return Err(Error::MissingPlaceholder(OBJECT_PLACEHOLDER.into()));
    }
    Ok(template.replace(OBJECT_PLACEHOLDER, object_class))
}

fn substitute_token(template: &str, token: &str) -> Result<String> {
    let own = format!("[{token}]");
    if template.contains(&own) {
        Ok(template.to_string())
    } else if let Some(default) = ["[v*]", "[w*]"].into_iter().find(|p| template.contains(p)) {
        Ok(template.replace(default, &own))
    } else {
        Err(Error::MissingPlaceholder(own))
    }
}
