//! Byte-level vocabulary plus a closed set of special tokens.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Special {
    Bot,
    Eot,
    Latent,
    Bop,
    Ctrl,
    Eop,
    Image,
    DetectionImage,
    User,
    Assistant,
    Pad,
    Eos,
}

impl Special {
    pub const ALL: [Special; 12] = [
        Special::Bot,
        Special::Eot,
        Special::Latent,
        Special::Bop,
        Special::Ctrl,
        Special::Eop,
        Special::Image,
        Special::DetectionImage,
        Special::User,
        Special::Assistant,
        Special::Pad,
        Special::Eos,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::Bot => "<bot>",
            Special::Eot => "<eot>",
            Special::Latent => "<latent>",
            Special::Bop => "<bop>",
            Special::Ctrl => "<ctrl>",
            Special::Eop => "<eop>",
            Special::Image => "<image>",
            Special::DetectionImage => "<detection_image>",
            Special::User => "<user>",
            Special::Assistant => "<assistant>",
            Special::Pad => "<pad>",
            Special::Eos => "<eos>",
        }
    }

    pub fn id(self) -> usize {
        BYTE_TOKENS + Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        id.checked_sub(BYTE_TOKENS).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn from_text(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.text() == s)
    }

    /// Tokens of the latent and perception frames.
    pub fn is_control(self) -> bool {
        matches!(self, Special::Bot | Special::Eot | Special::Bop | Special::Ctrl | Special::Eop)
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

pub const BYTE_TOKENS: usize = 256;
pub const VOCAB_SIZE: usize = BYTE_TOKENS + Special::ALL.len();

pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Renders ids as text; specials use their angle-bracket spelling.
pub fn decode_ids(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if id < BYTE_TOKENS {
            bytes.push(id as u8);
        } else if let Some(s) = Special::from_id(id) {
            bytes.extend_from_slice(s.text().as_bytes());
        } else {
            return Err(Error::Validation(format!("token id {id} outside the vocabulary")));
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("decoded bytes are not UTF-8: {e}")))
}
