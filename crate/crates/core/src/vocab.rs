//! Character classes and special tokens.
//!
//! 94 visible classes: digits, upper- and lower-case letters, then the 32
//! printable ASCII punctuation characters. `EOS` is output class 94, `BOS`
//! is an input-only token and `PAD` marks loss-ignored positions.

use crate::error::{Error, Result};

pub const NUM_CHARS: usize = 94;
/// End-of-sequence output class.
pub const EOS: usize = 94;
/// Start-of-sequence decoder input.
pub const BOS: usize = 95;
/// Padding target, ignored by the loss.
pub const PAD: usize = 96;
/// Number of output classes (characters plus EOS).
pub const NUM_CLASSES: usize = NUM_CHARS + 1;
/// Rows of the decoder input embedding (characters, EOS, BOS).
pub const NUM_INPUT_TOKENS: usize = NUM_CHARS + 2;

#[derive(Clone, Debug)]
pub struct CharVocab {
    chars: Vec<char>,
    index: [Option<u8>; 128],
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl CharVocab {
    pub fn new() -> Self {
        let mut chars: Vec<char> = ('0'..='9').chain('A'..='Z').chain('a'..='z').collect();
        chars.extend(
            (33u8..=126)
                .map(char::from)
                .filter(|c| !c.is_ascii_alphanumeric()),
        );
        debug_assert_eq!(chars.len(), NUM_CHARS);
        let mut index = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            index[c as usize] = Some(i as u8);
        }
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(c as usize).copied().flatten().map(usize::from)
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        self.chars.get(class).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index_of(c).is_some()
    }

    /// Encodes a label into class indices (no specials appended).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Invalid(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Decodes class indices, stopping at EOS and skipping other specials.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter_map(|&t| self.char_of(t))
            .collect()
    }
}
