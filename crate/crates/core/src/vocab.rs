//! The 31-class character inventory: sos, eos, space, apostrophe, period
//! and the letters a–z.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const SPACE: usize = 2;
pub const VOCAB_SIZE: usize = 31;

/// Character used for sos when a hypothesis has to be written as text.
/// `tokenize` never accepts it.
pub const SOS_CHAR: char = '^';

/// Token ids, normally eos-terminated.
pub type TokenSequence = Vec<usize>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn new() -> Self {
        Self
    }

    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sos(&self) -> usize {
        SOS
    }

    pub fn eos(&self) -> usize {
        EOS
    }

    /// Human-readable symbol name.
    pub fn symbol(&self, id: usize) -> Option<String> {
        match id {
            SOS => Some("<sos>".into()),
            EOS => Some("<eos>".into()),
            _ => self.char_of(id).map(String::from),
        }
    }

    /// Character rendering of a non-eos class.
    pub fn char_of(&self, id: usize) -> Option<char> {
        match id {
            SOS => Some(SOS_CHAR),
            2 => Some(' '),
            3 => Some('\''),
            4 => Some('.'),
            5..=30 => Some((b'a' + (id - 5) as u8) as char),
            _ => None,
        }
    }

    /// Class of a transcript character (sos is not representable).
    pub fn id_of(&self, ch: char) -> Option<usize> {
        match ch {
            ' ' => Some(2),
            '\'' => Some(3),
            '.' => Some(4),
            'a'..='z' => Some(ch as usize - 'a' as usize + 5),
            _ => None,
        }
    }

    /// Lowercases `text` and maps it to ids followed by eos.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut out = Vec::with_capacity(text.len() + 1);
        for (pos, ch) in text.chars().enumerate() {
            let mut lower = ch.to_lowercase();
            let id = match (lower.next(), lower.next()) {
                (Some(c), None) => self.id_of(c),
                _ => None,
            };
            out.push(id.ok_or(Error::UnrepresentableChar { ch, pos })?);
        }
        out.push(EOS);
        Ok(out)
    }

    /// Renders ids as text, stopping at the first eos.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter_map(|&t| self.char_of(t))
            .collect()
    }

    /// Inverse of [`Vocabulary::detokenize`] for rendered hypotheses; unlike
    /// `tokenize` it accepts the sos rendering and does not lowercase.
    pub fn parse_rendered(&self, text: &str) -> Result<TokenSequence> {
        let mut out = Vec::with_capacity(text.len() + 1);
        for (pos, ch) in text.chars().enumerate() {
            let id = if ch == SOS_CHAR {
                Some(SOS)
            } else {
                self.id_of(ch)
            };
            out.push(id.ok_or(Error::UnrepresentableChar { ch, pos })?);
        }
        out.push(EOS);
        Ok(out)
    }
}
