//! Token vocabulary, style labels and sentences.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: u32 = 4;

/// Style class. `A` is class 1 (the majority, "positive" class), `B` is class 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Style {
    A,
    B,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::A, Style::B];

    pub fn flip(self) -> Style {
        match self {
            Style::A => Style::B,
            Style::B => Style::A,
        }
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        match self {
            Style::A => 0,
            Style::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Style {
        if i == 0 {
            Style::A
        } else {
            Style::B
        }
    }

    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }
}

impl TryFrom<u8> for Style {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Style::A),
            2 => Ok(Style::B),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

impl From<Style> for u8 {
    fn from(s: Style) -> u8 {
        s.label()
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Id layout: the four specials, then content ids, then style-A markers, then
/// style-B markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub content: u32,
    pub markers: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            content: 12,
            markers: 4,
        }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        (SPECIALS + self.content + 2 * self.markers) as usize
    }

    pub fn content_id(&self, i: u32) -> u32 {
        debug_assert!(i < self.content);
        SPECIALS + i
    }

    pub fn marker(&self, style: Style, j: u32) -> u32 {
        debug_assert!(j < self.markers);
        match style {
            Style::A => SPECIALS + self.content + j,
            Style::B => SPECIALS + self.content + self.markers + j,
        }
    }

    pub fn is_content(&self, token: u32) -> bool {
        (SPECIALS..SPECIALS + self.content).contains(&token)
    }

    /// Style and marker index of a marker token.
    pub fn marker_of(&self, token: u32) -> Option<(Style, u32)> {
        let a0 = SPECIALS + self.content;
        let b0 = a0 + self.markers;
        if (a0..b0).contains(&token) {
            Some((Style::A, token - a0))
        } else if (b0..b0 + self.markers).contains(&token) {
            Some((Style::B, token - b0))
        } else {
            None
        }
    }

    /// Human-readable name: `<pad>`, `c7`, `A2`, `B2`, ...
    pub fn symbol(&self, token: u32) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            UNK => "<unk>".into(),
            t if self.is_content(t) => format!("c{}", t - SPECIALS),
            t => match self.marker_of(t) {
                Some((Style::A, j)) => format!("A{j}"),
                Some((Style::B, j)) => format!("B{j}"),
                None => format!("?{t}"),
            },
        }
    }
}

/// A tokenized sentence without padding; models pad to their own `max_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub style: Style,
}

impl Sentence {
    pub fn new(tokens: Vec<u32>, style: Style) -> Self {
        Self { tokens, style }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Errors on a token outside the vocabulary or a sentence longer than `max_len`.
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.tokens.len() > max_len {
            return Err(Error::Config(format!(
                "sentence of length {} exceeds max_len {max_len}",
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: vocab_size,
            });
        }
        Ok(())
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        let words: Vec<String> = self.tokens.iter().map(|&t| vocab.symbol(t)).collect();
        words.join(" ")
    }
}
