//! Text wire format for transcripts: a language tag, a fixed marker, then
//! the transcript body. An empty body is written with the literal tag `None`
//! and no body; parsing splits at the first marker so the body itself may
//! contain marker-shaped text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator between the language header and the transcript body.
pub const MARKER: &str = "<asr_text>";
const PREFIX: &str = "language ";
const NONE_TAG: &str = "None";

/// A transcript with its detected language. `language == None` exactly when
/// `text` is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub language: Option<String>,
    pub text: String,
}

impl Transcript {
    pub fn new(language: Option<impl Into<String>>, text: impl Into<String>) -> Self {
        Transcript { language: language.map(Into::into), text: text.into() }
    }

    /// The invariants [`render`] enforces; parsing output always satisfies
    /// them.
    pub fn validate(&self) -> Result<()> {
        match (&self.language, self.text.is_empty()) {
            (None, false) => {
                return Err(Error::invalid("non-empty text requires a language tag"));
            }
            (Some(_), true) => {
                return Err(Error::invalid("empty text must carry no language tag"));
            }
            _ => {}
        }
        if let Some(lang) = &self.language {
            if lang.is_empty() {
                return Err(Error::invalid("language tag must be non-empty"));
            }
            if lang == NONE_TAG {
                return Err(Error::invalid("language tag 'None' is reserved for empty text"));
            }
            if lang.contains(MARKER) {
                return Err(Error::invalid("language tag must not contain the marker"));
            }
            if lang.contains('\n') {
                return Err(Error::invalid("language tag must not contain newlines"));
            }
        }
        Ok(())
    }
}

/// Serialize: `language {tag}<asr_text>{text}`, or `language None<asr_text>`
/// for an empty transcript.
pub fn render(t: &Transcript) -> Result<String> {
    t.validate()?;
    let tag = t.language.as_deref().unwrap_or(NONE_TAG);
    Ok(format!("{}{}{}{}", PREFIX, tag, MARKER, t.text))
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Parse a rendered transcript. Errors carry the byte offset where the
/// input stopped matching.
pub fn parse(s: &str) -> Result<Transcript> {
    if !s.starts_with(PREFIX) {
        return Err(parse_err(0, format!("expected {:?} prefix", PREFIX)));
    }
    let after = &s[PREFIX.len()..];
    let marker_rel = after
        .find(MARKER)
        .ok_or_else(|| parse_err(s.len(), format!("missing {:?} marker", MARKER)))?;
    let tag = &after[..marker_rel];
    let tag_off = PREFIX.len();
    if tag.is_empty() {
        return Err(parse_err(tag_off, "empty language tag"));
    }
    if tag.contains('\n') {
        return Err(parse_err(tag_off, "language tag contains a newline"));
    }
    let body = &after[marker_rel + MARKER.len()..];
    let body_off = tag_off + marker_rel + MARKER.len();
    if tag == NONE_TAG {
        if !body.is_empty() {
            return Err(parse_err(body_off, "tag 'None' must have empty text"));
        }
        return Ok(Transcript { language: None, text: String::new() });
    }
    if body.is_empty() {
        return Err(parse_err(body_off, "named language with empty text"));
    }
    Ok(Transcript { language: Some(tag.to_string()), text: body.to_string() })
}
