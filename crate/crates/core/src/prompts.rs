//! Built-in recognition and pipeline prompts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{LineLayout, PlateFormat};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_format: Option<PlateFormat>,
}

const THREE_FOUR: PlateFormat = PlateFormat::malaysian(LineLayout::SingleLine);

const BUILTINS: &[(&str, &str, Option<PlateFormat>)] = &[
    (
        "canonical",
        "Extract three letters and four numbers from this car's plate; print the result in one word as: letters followed by numbers",
        Some(THREE_FOUR),
    ),
    (
        "prompt1",
        "extract characters in this car's plate, print result in one word as: letters followed by numbers",
        None,
    ),
    (
        "prompt2",
        "extract three letters and four numbers from this car's plate; print the result in one word as: letters followed by numbers",
        Some(THREE_FOUR),
    ),
    (
        "prompt3",
        "use OCR to extract all characters in this car's plate, print result in one word as: letters followed by numbers",
        None,
    ),
    ("prompt4", "extract the text from the image", None),
];

pub const DETECT_CAR: &str = "detect car";
pub const DETECT_PLATE: &str = "detect license plate";
pub const RECOGNIZE: &str = "extract the text from the image";

pub fn builtin_prompts() -> Vec<PromptSpec> {
    BUILTINS
        .iter()
        .map(|(id, text, format)| PromptSpec {
            id: String::from(*id),
            text: String::from(*text),
            expected_format: *format,
        })
        .collect()
}

pub fn builtin_prompt(id: &str) -> Option<PromptSpec> {
    builtin_prompts().into_iter().find(|p| p.id == id)
}

/// Yes/no attribute question, e.g. `Is this car red?`.
pub fn attribute_question(value: &str) -> String {
    format!("Is this car {value}?")
}

/// Inverse of [`attribute_question`].
pub fn parse_attribute_question(prompt: &str) -> Option<&str> {
    prompt
        .trim()
        .strip_prefix("Is this car ")?
        .strip_suffix('?')
        .map(str::trim)
        .filter(|v| !v.is_empty())
}
