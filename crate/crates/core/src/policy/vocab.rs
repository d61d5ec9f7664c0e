//! Token vocabulary and a lossless tokenizer.
//!
//! A token is a special marker (`<cls>`), a lone space, or a word, digit or
//! punctuation character optionally carrying one leading space (`" sofa"`).
//! Detokenization is plain concatenation, so every text made only of
//! known pieces round-trips exactly.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const HIST: &str = "<hist>";
pub const CAND: &str = "<cand>";
pub const CLS: &str = "<cls>";
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, HIST, CAND, CLS];

const TEMPLATE_WORDS: &[&str] = &[
    // reasoning template
    "I", "should", "go", "to", "an", "observation", "with", "the", "of", "me", "stop", "here",
    // directions
    "in", "front", "left", "right", "behind", "above", "below",
    // instructions
    "toward", "then", "forward", "back", "up", "down",
    // prompt scaffolding
    "History", "Candidates", "Action", "Decision", "Navigational", "Reasoning",
    // reflection prompt
    "Choose", "correct", "one", "from", "given", "two", "navigational", "reasoning", "outputs",
    "Output", "Selection",
    // captions
    "a", "room", "and",
];

const PUNCT: &[char] = &['.', ',', ':', '(', ')', '-'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphabetic()
}

impl Vocabulary {
    /// Fixed scaffolding vocabulary plus the pieces of every landmark name.
    pub fn new(landmarks: &[String]) -> Vocabulary {
        let mut pieces: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        pieces.extend((0..10).map(|d| d.to_string()));
        pieces.extend(PUNCT.iter().map(|c| c.to_string()));
        for name in landmarks {
            let mut rest = name.as_str();
            while !rest.is_empty() {
                let run = rest.bytes().take_while(|&b| is_word_byte(b)).count().max(1);
                pieces.push(rest[..run].to_string());
                rest = &rest[run..];
            }
        }
        let mut vocab = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            vocab.push(s.to_string());
        }
        vocab.push(" ".to_string());
        for p in pieces {
            vocab.push(p.clone());
            vocab.push(format!(" {p}"));
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::VocabMiss(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn bos(&self) -> usize {
        1
    }
    pub fn eos(&self) -> usize {
        2
    }
    pub fn hist(&self) -> usize {
        3
    }
    pub fn cand(&self) -> usize {
        4
    }
    pub fn cls(&self) -> usize {
        5
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Splits `text` into token strings without vocabulary lookup.
    pub fn split(text: &str) -> Vec<&str> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if let Some(s) = SPECIALS.iter().find(|s| text[i..].starts_with(**s)) {
                out.push(&text[i..i + s.len()]);
                i += s.len();
                continue;
            }
            let start = i;
            let spaced = bytes[i] == b' ';
            let j = if spaced { i + 1 } else { i };
            let special_next = SPECIALS.iter().any(|s| text[j..].starts_with(*s));
            if j >= bytes.len() || bytes[j] == b' ' || special_next {
                // A space followed by nothing that can carry it.
                out.push(&text[start..start + 1]);
                i = start + 1;
                continue;
            }
            let end = if is_word_byte(bytes[j]) {
                j + bytes[j..].iter().take_while(|&&b| is_word_byte(b)).count()
            } else {
                j + text[j..].chars().next().map_or(1, char::len_utf8)
            };
            out.push(&text[start..end]);
            i = end;
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        Self::split(text).into_iter().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envworld::landmark_pool;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&landmark_pool(52))
    }

    #[test]
    fn specials_are_unique_and_first() {
        let v = vocab();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s).unwrap(), i);
            assert_eq!(v.tokens.iter().filter(|t| t == s).count(), 1);
        }
        assert!(matches!(v.id(" <cls>"), Err(Error::VocabMiss(_))));
    }

    #[test]
    fn round_trips_system_texts() {
        let v = vocab();
        for text in [
            "I should go to an observation with door, hallway to the left of me.",
            "I should stop here.",
            "go left toward the sofa, then go up toward the landmark50, then stop.",
            " History: <hist> <hist> Candidates: (1) <cand> (12) <cand> (13) stop -Action Decision: <cls>. -Navigational Reasoning: ",
            "Choose the correct one from the given two navigational reasoning outputs. Output 1: I should stop here.. Output 2: I should go behind me.. Selection: ",
            "Output 2.",
        ] {
            let ids = v.tokenize(text).unwrap();
            assert_eq!(v.detokenize(&ids), text);
        }
    }

    #[test]
    fn unknown_words_miss() {
        assert!(matches!(vocab().tokenize("a zebra"), Err(Error::VocabMiss(t)) if t == " zebra"));
    }

    #[test]
    fn split_shapes() {
        assert_eq!(Vocabulary::split("(12) <cand>"), vec!["(", "1", "2", ")", " ", "<cand>"]);
        assert_eq!(Vocabulary::split("me.  x"), vec!["me", ".", " ", " x"]);
    }
}
