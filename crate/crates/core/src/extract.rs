//! Pulling a plate string out of free-form model replies.
//!
//! A reply is split into alphanumeric words. Words separated only by
//! spaces, tabs, hyphens or newlines form a run; any other character
//! (markdown asterisks, colons, full stops) ends the run. Candidates are
//! tried in this order:
//!
//! 1. With an expected format, the first contiguous group of words inside a
//!    run whose concatenation is exactly `letters` letters then `digits` digits.
//! 2. The longest concatenation (at least 4 symbols) of consecutive words
//!    without lowercase letters, e.g. `PJG 90` inside an English sentence.
//! 3. The longest single word (at least 4 symbols) containing a digit.
//! 4. A reply that is a single word of at least 4 symbols.
//!
//! Ties go to the earliest candidate.

use alloc::string::String;
use alloc::vec::Vec;

use crate::label::{normalize_label, PlateFormat, PlateLabel};
use crate::Error;

const MIN_TOKEN: usize = 4;

fn is_separator(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r' | '-' | '\u{2010}'..='\u{2015}')
}

/// Runs of words, each word a maximal ASCII-alphanumeric slice.
fn runs(reply: &str) -> Vec<Vec<&str>> {
    let mut out: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in reply.char_indices().chain(core::iter::once((reply.len(), '\0'))) {
        if c.is_ascii_alphanumeric() && i < reply.len() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            current.push(&reply[s..i]);
        }
        if !is_separator(c) && !current.is_empty() {
            out.push(core::mem::take(&mut current));
        }
    }
    out
}

fn join(words: &[&str]) -> String {
    words.concat()
}

fn first_format_match(runs: &[Vec<&str>], format: &PlateFormat) -> Option<String> {
    for run in runs {
        for start in 0..run.len() {
            let mut len = 0;
            for end in start..run.len() {
                len += run[end].len();
                if len > format.len() {
                    break;
                }
                let candidate = join(&run[start..=end]);
                if len == format.len() && normalize_label(&candidate).matches_format(format) {
                    return Some(candidate);
                }
            }
        }
    }
    None
}

fn longest<'a>(candidates: impl Iterator<Item = String> + 'a) -> Option<String> {
    let mut best: Option<String> = None;
    for c in candidates {
        if c.len() >= MIN_TOKEN && best.as_ref().is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best
}

fn uppercase_runs<'a>(runs: &'a [Vec<&'a str>]) -> impl Iterator<Item = String> + 'a {
    runs.iter().flat_map(|run| {
        run.split(|w| w.chars().any(|c| c.is_ascii_lowercase()))
            .filter(|group| !group.is_empty())
            .map(join)
    })
}

/// Extracts the most plate-like token from `reply`, normalized.
pub fn extract_plate_token(
    reply: &str,
    expected: Option<&PlateFormat>,
) -> Result<PlateLabel, Error> {
    let runs = runs(reply);
    let found = expected
        .and_then(|f| first_format_match(&runs, f))
        .or_else(|| longest(uppercase_runs(&runs)))
        .or_else(|| {
            longest(
                runs.iter()
                    .flatten()
                    .filter(|w| w.bytes().any(|b| b.is_ascii_digit()))
                    .map(|w| String::from(*w)),
            )
        })
        .or_else(|| match runs.as_slice() {
            [run] if run.len() == 1 && run[0].len() >= MIN_TOKEN => Some(String::from(run[0])),
            _ => None,
        });
    found.map(|s| normalize_label(&s)).ok_or(Error::NotFound)
}
