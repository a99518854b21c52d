//! Left-to-right and right-to-left decoding directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::NUM_CHARS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    Normal,
    Reversed,
    Bidirectional,
}

impl DirectionMode {
    pub fn directions(self) -> &'static [Direction] {
        match self {
            DirectionMode::Normal => &[Direction::Normal],
            DirectionMode::Reversed => &[Direction::Reversed],
            DirectionMode::Bidirectional => &[Direction::Normal, Direction::Reversed],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionMode::Normal => "normal",
            DirectionMode::Reversed => "reversed",
            DirectionMode::Bidirectional => "bidirectional",
        }
    }
}

impl std::str::FromStr for DirectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DirectionMode::Normal),
            "reversed" => Ok(DirectionMode::Reversed),
            "bidirectional" => Ok(DirectionMode::Bidirectional),
            _ => Err(Error::Config(format!(
                "unknown direction `{s}` (normal, reversed, bidirectional)"
            ))),
        }
    }
}

/// Reading order of one decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Normal,
    Reversed,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::Normal => "dec.l2r",
            Direction::Reversed => "dec.r2l",
        }
    }

    /// Puts `tokens` into this decoder's order (an involution).
    pub fn orient(self, tokens: &[usize]) -> Vec<usize> {
        match self {
            Direction::Normal => tokens.to_vec(),
            Direction::Reversed => reverse_labels(tokens),
        }
    }
}

/// Reverses the character tokens; special tokens at the end stay in place.
pub fn reverse_labels(tokens: &[usize]) -> Vec<usize> {
    let chars = tokens.iter().rposition(|&t| t < NUM_CHARS).map_or(0, |i| i + 1);
    let mut out: Vec<usize> = tokens[..chars].iter().rev().copied().collect();
    out.extend_from_slice(&tokens[chars..]);
    out
}

/// A decoded string with its length-normalized score.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub text: String,
    pub score: f64,
}

/// Highest-scoring of the two readings; ties go to the normal decoder.
pub fn select(normal: Scored, reversed: Scored) -> (Scored, Direction) {
    if reversed.score > normal.score {
        (reversed, Direction::Reversed)
    } else {
        (normal, Direction::Normal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CharVocab, EOS, PAD};

    #[test]
    fn reverse_keeps_terminal_specials() {
        let v = CharVocab::new();
        let ab = v.encode("AB").unwrap();
        assert_eq!(reverse_labels(&ab), v.encode("BA").unwrap());
        let aba = v.encode("ABA").unwrap();
        assert_eq!(reverse_labels(&aba), aba);
        let mut tail = v.encode("xyz").unwrap();
        tail.extend([EOS, PAD, PAD]);
        assert_eq!(&reverse_labels(&tail)[3..], &[EOS, PAD, PAD]);
        assert_eq!(reverse_labels(&reverse_labels(&tail)), tail);
        assert!(reverse_labels(&[]).is_empty());
    }

    #[test]
    fn select_prefers_higher_score() {
        let s = |t: &str, score| Scored { text: t.into(), score };
        assert_eq!(select(s("a", -1.0), s("b", -2.0)).1, Direction::Normal);
        assert_eq!(select(s("a", -2.0), s("b", -1.0)).0.text, "b");
        assert_eq!(select(s("a", -1.0), s("b", -1.0)).1, Direction::Normal);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("bidirectional".parse::<DirectionMode>().unwrap(), DirectionMode::Bidirectional);
        assert!("both".parse::<DirectionMode>().is_err());
        assert_eq!(DirectionMode::Bidirectional.directions().len(), 2);
    }
}
