//! Word-level tokenizer and closed vocabulary.
//!
//! Words are split on whitespace and punctuation is split off into its own
//! token, so the authenticity words `real` and `fake` are always single
//! tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const REAL_WORD: &str = "real";
pub const FAKE_WORD: &str = "fake";

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];
const VOCAB_VERSION: u32 = 1;

fn is_split_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '"')
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_split_punct(c) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let t = tok.as_ref();
        let attach = matches!(t, "." | "," | ";" | ":" | "!" | "?" | ")");
        if !out.is_empty() && !attach && !out.ends_with('(') {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Position of the first `real`/`fake` token in `text`, if any.
pub fn authenticity_position(text: &str) -> Option<usize> {
    tokenize(text)
        .iter()
        .position(|t| t.eq_ignore_ascii_case(REAL_WORD) || t.eq_ignore_ascii_case(FAKE_WORD))
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: BTreeMap<String, u32>,
}

/// Closed word vocabulary with reserved special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    by_token: BTreeMap<String, u32>,
    by_id: Vec<String>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            version: VOCAB_VERSION,
            tokens: v.by_token,
        }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        if f.version != VOCAB_VERSION {
            return Err(format!("unsupported vocabulary version {}", f.version));
        }
        Vocabulary::from_map(f.tokens).map_err(|e| e.to_string())
    }
}

impl Vocabulary {
    /// Builds a vocabulary over every token of `texts`. Special tokens take
    /// ids 0..4 and the remaining words follow in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = [REAL_WORD, FAKE_WORD]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for t in texts {
            words.extend(tokenize(t));
        }
        for s in SPECIALS {
            words.remove(s);
        }
        let by_id: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let by_token = by_id
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { by_token, by_id }
    }

    fn from_map(tokens: BTreeMap<String, u32>) -> Result<Self> {
        let mut by_id = vec![String::new(); tokens.len()];
        for (t, &id) in &tokens {
            let slot = by_id
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("token id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::Config(format!("duplicate token id {id}")));
            }
            *slot = t.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(*s) != Some(&(i as u32)) {
                return Err(Error::Config(format!("special token {s} must have id {i}")));
            }
        }
        for w in [REAL_WORD, FAKE_WORD] {
            if !tokens.contains_key(w) {
                return Err(Error::Config(format!("vocabulary lacks `{w}`")));
            }
        }
        Ok(Self {
            by_token: tokens,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.by_token.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.by_id.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    pub fn eos_id(&self) -> u32 {
        2
    }

    pub fn unk_id(&self) -> u32 {
        3
    }

    pub fn real_id(&self) -> u32 {
        self.by_token[REAL_WORD]
    }

    pub fn fake_id(&self) -> u32 {
        self.by_token[FAKE_WORD]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.unk_id()))
            .collect()
    }

    /// Joins the words of `ids`, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id > self.unk_id())
            .filter_map(|&id| self.token(id))
            .collect();
        detokenize(&words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_splits_into_tokens() {
        assert_eq!(
            tokenize("It is a real face."),
            vec!["It", "is", "a", "real", "face", "."]
        );
        assert_eq!(
            detokenize(&tokenize("It is a real face.")),
            "It is a real face."
        );
        assert_eq!(
            detokenize(&tokenize("Hello, world (here)!")),
            "Hello, world (here)!"
        );
    }

    #[test]
    fn authenticity_words_are_single_tokens() {
        let v = Vocabulary::build(["This is an example of a fake face", "It is a real face."]);
        assert_eq!(v.encode("fake").len(), 1);
        assert_eq!(v.encode("real").len(), 1);
        assert_ne!(v.real_id(), v.fake_id());
        assert_eq!(
            authenticity_position("This is an example of a fake face"),
            Some(6)
        );
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.encode("a zzz"), vec![v.id("a").unwrap(), v.unk_id()]);
        assert_eq!(v.decode(&[v.bos_id(), v.id("a").unwrap(), v.eos_id()]), "a");
    }

    #[test]
    fn vocabulary_json_round_trips() {
        let v = Vocabulary::build(["Is this image real or fake?"]);
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.contains("\"version\":1"));
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
