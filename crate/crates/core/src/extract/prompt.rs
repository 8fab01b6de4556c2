use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ExtractionRequest;
use crate::schema::Field;

const SYSTEM_TEMPLATE: &str = r#"Role: Embodied AI subtask target-point predictor with vision-language input.

Task: Given one image and one instruction, output ONE JSON describing the CURRENT subtask target point only. Do not output any extra text.

Output must be a single strictly valid JSON object with exactly this schema:
{
  "subtask": "sentence",
  "action": "word",
  "entity_shape": "word",
  "ee_orientation": "word",
  "target_point": "word"
}

Allowed Definitions:
- subtask: A concise verb-noun phrase describing the current subtask.

Allowed Enum Values:
- action: {action}

- entity_shape: {entity_shape}

- ee_orientation: {ee_orientation}

- target_point: {target_point}

Hard constraints:
1) Output JSON only. No markdown, no comments, no trailing commas.
2) Do not add/remove keys. Keep exactly the keys shown above.
3) Use ONLY one of the allowed enum values."#;

/// The extractor system prompt with the closed vocabularies filled in.
pub fn system_prompt() -> String {
    Field::ALL.iter().fold(SYSTEM_TEMPLATE.to_string(), |text, f| {
        text.replace(
            &format!("{{{}}}", f.name()),
            &format!("[{}]", f.values().join(", ")),
        )
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text {
        text: String,
    },
    /// Inline (`media_type` + base64 `data`) or by reference (`url`).
    Image {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        media_type: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        url: Option<String>,
    },
}

impl ContentPart {
    pub fn text(t: impl Into<String>) -> Self {
        ContentPart::Text { text: t.into() }
    }

    pub fn image_ref(url: impl Into<String>) -> Self {
        ContentPart::Image {
            media_type: None,
            data: None,
            url: Some(url.into()),
        }
    }

    pub fn image_inline(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        ContentPart::Image {
            media_type: Some(media_type.into()),
            data: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user_parts: Vec<ContentPart>,
}

/// History `(image, state)` pairs in step order, then the current image, then
/// the instruction.
pub fn build_prompt(req: &ExtractionRequest) -> Prompt {
    let mut parts = Vec::with_capacity(2 * req.history.len() + 2);
    for entry in &req.history {
        parts.push(ContentPart::image_ref(&entry.observation_ref));
        parts.push(ContentPart::text(entry.state.to_canonical_json()));
    }
    parts.push(ContentPart::image_inline(
        &req.observation.media_type,
        &req.observation.bytes,
    ));
    parts.push(ContentPart::text(&req.instruction));
    Prompt {
        system: system_prompt(),
        user_parts: parts,
    }
}
