//! Parsing of detection-prompt replies into pixel boxes.
//!
//! Two grammars are accepted. The primary one is the location-token form
//! `<locY1><locX1><locY2><locX2> label`, four zero-padded integers on a
//! 0..=1023 grid, detections separated by `;`. Pixel coordinates are
//! `floor(token * dim / 1024)`. If a reply has no location tokens, records
//! carrying `x1`/`y1`/`x2`/`y2` pixel fields (JSON objects or `key=value`
//! lists inside braces) are used instead.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const GRID: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    LocTokens,
    JsonBox,
}

/// Pixel box with `0 <= x1 < x2 <= width` and `0 <= y1 < y2 <= height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub source: BoxSource,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn fits(&self, image_w: u32, image_h: u32) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= image_w && self.y2 <= image_h
    }

    /// Grows each side by `pad_frac` of the box size, clamped to the image.
    pub fn padded(&self, pad_frac: f64, image_w: u32, image_h: u32) -> BoundingBox {
        let px = libm::round(f64::from(self.width()) * pad_frac.max(0.0)) as u32;
        let py = libm::round(f64::from(self.height()) * pad_frac.max(0.0)) as u32;
        BoundingBox {
            x1: self.x1.saturating_sub(px),
            y1: self.y1.saturating_sub(py),
            x2: self.x2.saturating_add(px).min(image_w),
            y2: self.y2.saturating_add(py).min(image_h),
            source: self.source,
        }
    }

    /// Translates a box found inside `outer` back to full-image coordinates.
    pub fn offset_by(&self, outer: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1 + outer.x1,
            y1: self.y1 + outer.y1,
            x2: self.x2 + outer.x1,
            y2: self.y2 + outer.y1,
            source: self.source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub boxes: Vec<Detection>,
    /// Non-fatal problems: dropped degenerate boxes, unparseable text.
    pub diagnostics: Vec<String>,
}

/// Grid token to pixel coordinate.
pub fn decode_coord(token: u32, dim: u32) -> u32 {
    (u64::from(token.min(GRID - 1)) * u64::from(dim) / u64::from(GRID)) as u32
}

/// Smallest grid token that decodes to `pixel`. Inverts [`decode_coord`]
/// whenever `dim >= 1024`.
pub fn encode_coord(pixel: u32, dim: u32) -> u32 {
    let num = u64::from(pixel) * u64::from(GRID);
    (num.div_ceil(u64::from(dim.max(1))) as u32).min(GRID - 1)
}

/// Renders four grid values as `<locY1><locX1><locY2><locX2>`.
pub fn loc_tokens(y1: u32, x1: u32, y2: u32, x2: u32) -> String {
    format!("<loc{y1:04}><loc{x1:04}><loc{y2:04}><loc{x2:04}>")
}

/// Encodes a pixel box back into the location-token grammar.
pub fn encode_box(b: &BoundingBox, image_w: u32, image_h: u32) -> String {
    loc_tokens(
        encode_coord(b.y1, image_h),
        encode_coord(b.x1, image_w),
        encode_coord(b.y2, image_h),
        encode_coord(b.x2, image_w),
    )
}

/// Parses `<locNNNN>` at the start of `bytes`, returning the value and length consumed.
fn loc_token(bytes: &[u8]) -> Option<(u32, usize)> {
    let rest = bytes.strip_prefix(b"<loc")?;
    let digits = rest.iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 || digits > 4 || rest.get(digits) != Some(&b'>') {
        return None;
    }
    let value = rest[..digits]
        .iter()
        .fold(0u32, |acc, d| acc * 10 + u32::from(d - b'0'));
    (value < GRID).then_some((value, 4 + digits + 1))
}

pub fn parse_detections(reply: &str, image_w: u32, image_h: u32) -> DetectionResult {
    let mut result = DetectionResult::default();
    if reply.trim().is_empty() {
        return result;
    }
    if reply.contains("<loc") {
        parse_loc_tokens(reply, image_w, image_h, &mut result);
    } else {
        parse_structured(reply, image_w, image_h, &mut result);
    }
    if result.boxes.is_empty() && result.diagnostics.is_empty() {
        result
            .diagnostics
            .push(format!("no detections parsed from {} bytes of reply", reply.len()));
    }
    result
}

fn push_box(
    result: &mut DetectionResult,
    bbox: BoundingBox,
    label: &str,
    image_w: u32,
    image_h: u32,
) {
    if bbox.fits(image_w, image_h) {
        result.boxes.push(Detection {
            bbox,
            class_label: label.to_string(),
        });
    } else {
        result.diagnostics.push(format!(
            "dropped degenerate box ({}, {})-({}, {}) labelled {label:?}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        ));
    }
}

fn parse_loc_tokens(reply: &str, image_w: u32, image_h: u32, result: &mut DetectionResult) {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let mut coords = [0u32; 4];
        let mut n = 0;
        let mut j = i;
        while n < 4 {
            match loc_token(&bytes[j..]) {
                Some((v, len)) => {
                    coords[n] = v;
                    n += 1;
                    j += len;
                }
                None => break,
            }
        }
        if n < 4 {
            if n > 0 {
                result
                    .diagnostics
                    .push(format!("incomplete location group at byte {i} ({n} of 4 tokens)"));
                i = j;
            } else {
                i += 1;
            }
            continue;
        }
        // label runs to the next `;` or the next `<loc`
        let mut end = j;
        while end < bytes.len() && bytes[end] != b';' && !bytes[end..].starts_with(b"<loc") {
            end += 1;
        }
        let label = String::from_utf8_lossy(&bytes[j..end]);
        let [y1, x1, y2, x2] = coords;
        let bbox = BoundingBox {
            x1: decode_coord(x1, image_w),
            y1: decode_coord(y1, image_h),
            x2: decode_coord(x2, image_w),
            y2: decode_coord(y2, image_h),
            source: BoxSource::LocTokens,
        };
        push_box(result, bbox, label.trim(), image_w, image_h);
        i = end;
    }
}

fn parse_structured(reply: &str, image_w: u32, image_h: u32, result: &mut DetectionResult) {
    let mut rest = reply;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').unwrap_or(after.len());
        let record = &after[..close];
        let fields = [
            number_field(record, "x1"),
            number_field(record, "y1"),
            number_field(record, "x2"),
            number_field(record, "y2"),
        ];
        if let [Some(x1), Some(y1), Some(x2), Some(y2)] = fields {
            let clamp_x = |v: f64| libm::round(v.clamp(0.0, f64::from(image_w))) as u32;
            let clamp_y = |v: f64| libm::round(v.clamp(0.0, f64::from(image_h))) as u32;
            let label = string_field(record, "label")
                .or_else(|| string_field(record, "class"))
                .unwrap_or_default();
            let bbox = BoundingBox {
                x1: clamp_x(x1),
                y1: clamp_y(y1),
                x2: clamp_x(x2),
                y2: clamp_y(y2),
                source: BoxSource::JsonBox,
            };
            push_box(result, bbox, &label, image_w, image_h);
        } else if fields.iter().any(Option::is_some) {
            result
                .diagnostics
                .push("record with incomplete x1/y1/x2/y2 fields".to_string());
        }
        rest = &after[close.min(after.len())..];
    }
}

/// Finds `key` as a whole word followed by `:` or `=` and returns the text after it.
fn field_value<'a>(record: &'a str, key: &str) -> Option<&'a str> {
    let bytes = record.as_bytes();
    let mut from = 0;
    while let Some(pos) = record[from..].find(key) {
        let start = from + pos;
        let end = start + key.len();
        from = end;
        let before_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let after = record[end..].trim_start_matches(['"', '\'', ' ', '\t']);
        if before_ok {
            if let Some(v) = after.strip_prefix([':', '=']) {
                return Some(v.trim_start());
            }
        }
    }
    None
}

fn number_field(record: &str, key: &str) -> Option<f64> {
    let v = field_value(record, key)?.trim_start_matches(['"', '\'']);
    let len = v
        .bytes()
        .take_while(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
        .count();
    v[..len].parse::<f64>().ok().filter(|x| x.is_finite())
}

fn string_field(record: &str, key: &str) -> Option<String> {
    let v = field_value(record, key)?;
    let v = v.strip_prefix(['"', '\''])?;
    let end = v.find(['"', '\'']).unwrap_or(v.len());
    Some(v[..end].to_string())
}

/// Interprets a yes/no reply. Leading words decide; case and punctuation are ignored.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match word.as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}
