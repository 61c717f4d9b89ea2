//! Plate alphabet, labels and layout formats.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Error;

/// Number of admissible plate symbols (A-Z then 0-9).
pub const ALPHABET_LEN: usize = 36;

/// One plate symbol: an uppercase ASCII letter or a digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlateChar(u8);

impl PlateChar {
    /// Folds lowercase to uppercase; anything outside A-Z/0-9 is rejected.
    pub fn new(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        if c.is_ascii_uppercase() || c.is_ascii_digit() {
            Some(Self(c as u8))
        } else {
            None
        }
    }

    /// Class index: letters 0..26, digits 26..36.
    pub fn index(self) -> usize {
        match self.0 {
            b'A'..=b'Z' => (self.0 - b'A') as usize,
            _ => 26 + (self.0 - b'0') as usize,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0..=25 => Some(Self(b'A' + index as u8)),
            26..=35 => Some(Self(b'0' + (index - 26) as u8)),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }

    pub fn is_letter(self) -> bool {
        self.0.is_ascii_uppercase()
    }

    pub fn is_digit(self) -> bool {
        self.0.is_ascii_digit()
    }

    /// All 36 classes in index order.
    pub fn all() -> impl Iterator<Item = PlateChar> {
        (0..ALPHABET_LEN).filter_map(PlateChar::from_index)
    }
}

impl fmt::Display for PlateChar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for PlateChar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let buf = [self.0];
        // always ASCII
        s.serialize_str(core::str::from_utf8(&buf).unwrap_or("?"))
    }
}

impl<'de> Deserialize<'de> for PlateChar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next().and_then(PlateChar::new), chars.next()) {
            (Some(c), None) => Ok(c),
            _ => Err(serde::de::Error::custom("expected a single A-Z/0-9 symbol")),
        }
    }
}

/// A normalized plate string plus the text it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PlateLabel {
    chars: Vec<PlateChar>,
    raw: String,
}

impl PlateLabel {
    pub fn chars(&self) -> &[PlateChar] {
        &self.chars
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// The normalized symbols as a string, e.g. `WVL9335`.
    pub fn text(&self) -> String {
        self.chars.iter().map(|c| c.as_char()).collect()
    }

    /// Builds a label whose raw text is exactly its normalized text.
    pub fn from_chars(chars: Vec<PlateChar>) -> Self {
        let raw = chars.iter().map(|c| c.as_char()).collect();
        Self { chars, raw }
    }

    /// Checks the letters-then-digits counts of `format`.
    pub fn matches_format(&self, format: &PlateFormat) -> bool {
        self.chars.len() == format.letters + format.digits
            && self.chars[..format.letters].iter().all(|c| c.is_letter())
            && self.chars[format.letters..].iter().all(|c| c.is_digit())
    }
}

impl fmt::Display for PlateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.chars {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Serialized as the raw string; normalization is re-applied on load.
impl Serialize for PlateLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for PlateLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(normalize_label(&String::deserialize(d)?))
    }
}

/// Uppercases `raw` and drops every character outside A-Z/0-9.
///
/// No confusable folding happens here (`O` stays `O`, `0` stays `0`), so
/// recognition confusions remain visible to the metrics.
pub fn normalize_label(raw: &str) -> PlateLabel {
    PlateLabel {
        chars: raw.chars().filter_map(PlateChar::new).collect(),
        raw: String::from(raw),
    }
}

/// Parses a ground-truth label, rejecting anything that normalizes to empty.
pub fn parse_truth(raw: &str) -> Result<PlateLabel, Error> {
    let label = normalize_label(raw);
    if label.is_empty() {
        return Err(Error::EmptyLabel);
    }
    Ok(label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineLayout {
    SingleLine,
    TwoLine,
}

/// Plate layout: `letters` letters followed by `digits` digits, on one or two lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlateFormat {
    pub kind: LineLayout,
    pub letters: usize,
    pub digits: usize,
}

impl PlateFormat {
    pub fn new(kind: LineLayout, letters: usize, digits: usize) -> Result<Self, Error> {
        if letters == 0 || digits == 0 {
            return Err(Error::InvalidFormat { letters, digits });
        }
        Ok(Self {
            kind,
            letters,
            digits,
        })
    }

    /// Malaysian layout: three letters then four digits.
    pub const fn malaysian(kind: LineLayout) -> Self {
        Self {
            kind,
            letters: 3,
            digits: 4,
        }
    }

    pub fn len(&self) -> usize {
        self.letters + self.digits
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
