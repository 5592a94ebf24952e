//! Word-level vocabulary and tokenizer.
//!
//! Reserved ids come first (`PAD`, `BOS`, `EOS`, `UNK`, `EMPTY`), followed by
//! the generator word lists in a fixed order, so two builds of the default
//! vocabulary are always identical.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::taskgen::WorldConfig;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const EMPTY: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<empty>"];

/// Maximum tokens per encoded line; longer lines are split into chunks.
pub const MAX_LINE_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from the reserved tokens followed by `words`
    /// (duplicates are skipped, first occurrence wins).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r);
        }
        for w in words {
            v.push(&w.as_ref().to_lowercase());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.ids.contains_key(w) {
            self.ids.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    /// Every word the generators and the pretraining corpus can emit.
    pub fn standard() -> Self {
        let w = WorldConfig::default();
        let mut words: Vec<String> = Vec::new();
        let mut add = |s: &str| {
            for t in split_words(s) {
                words.push(t);
            }
        };
        for e in &w.entities {
            add(e);
        }
        for v in &w.verbs {
            add(v);
        }
        for l in &w.locations {
            add(l);
        }
        for (_, l) in crate::taskgen::LOCATION_SWAP {
            add(l);
        }
        for o in &w.objects {
            add(o);
        }
        for s in [
            "to the . ? where is in picked up discarded",
            "var = find all variables that are assigned value answer :",
        ] {
            add(s);
        }
        for c in 'a'..='z' {
            add(&c.to_string().repeat(5));
        }
        for d in 0..10 {
            add(&d.to_string());
        }
        for s in crate::taskgen::FILLER_SENTENCES {
            add(s);
        }
        for s in crate::taskgen::CORPUS_WORDS {
            add(s);
        }
        Vocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`, split into chunks of at most
    /// [`MAX_LINE_TOKENS`]. Blank text gives a single `[EMPTY]` chunk.
    pub fn tokenize(&self, text: &str) -> Vec<Vec<u32>> {
        let ids: Vec<u32> = split_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return vec![vec![EMPTY]];
        }
        ids.chunks(MAX_LINE_TOKENS).map(<[u32]>::to_vec).collect()
    }

    /// Tokenizes without chunking; blank text gives `[EMPTY]`.
    pub fn tokenize_flat(&self, text: &str) -> Vec<u32> {
        let ids: Vec<u32> = split_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![EMPTY]
        } else {
            ids
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            if id == EMPTY || id == PAD || id == BOS || id == EOS {
                continue;
            }
            let t = self.token(id);
            let is_digit = t.len() == 1 && t.chars().all(|c| c.is_ascii_digit());
            let glue = is_punct_token(t) && t != "=" || (is_digit && prev_digit);
            if !out.is_empty() && !glue {
                out.push(' ');
            }
            out.push_str(t);
            prev_digit = is_digit;
        }
        out
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::VocabMismatch(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Ok(Self::from_token_list(tokens))
    }

    pub fn from_token_list(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }
}

fn is_punct_token(t: &str) -> bool {
    t.len() == 1 && t.chars().all(|c| c.is_ascii_punctuation())
}

/// Lowercased word split: whitespace separates words, every ASCII punctuation
/// character is its own token and digit runs are split into single digits.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if ch.is_ascii_punctuation() || ch.is_ascii_digit() {
            flush(&mut cur, &mut out);
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    flush(&mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_first() {
        let v = Vocab::standard();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.token(EMPTY), "<empty>");
    }

    #[test]
    fn sentence_lookup() {
        let v = Vocab::standard();
        let ids = v.tokenize("Mary travelled to the office.");
        let expect: Vec<u32> = ["mary", "travelled", "to", "the", "office", "."]
            .iter()
            .map(|w| v.id(w))
            .collect();
        assert_eq!(ids, vec![expect]);
        assert!(!ids[0].contains(&UNK));
    }

    #[test]
    fn blank_line_is_empty_token() {
        let v = Vocab::standard();
        assert_eq!(v.tokenize(""), vec![vec![EMPTY]]);
        assert_eq!(v.tokenize("   "), vec![vec![EMPTY]]);
    }

    #[test]
    fn long_line_chunks_at_64() {
        let v = Vocab::standard();
        let text = vec!["the"; 130].join(" ");
        let chunks = v.tokenize(&text);
        let lens: Vec<usize> = chunks.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![64, 64, 2]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::standard();
        assert_eq!(v.tokenize("zebra"), vec![vec![UNK]]);
    }

    #[test]
    fn digits_split_and_rejoin() {
        let v = Vocab::standard();
        let ids = v.tokenize_flat("VAR AAAAA = 16438");
        assert_eq!(ids.len(), 8);
        assert_eq!(v.detokenize(&ids), "var aaaaa = 16438");
    }

    #[test]
    fn vocab_is_small_and_deterministic() {
        let a = Vocab::standard();
        let b = Vocab::standard();
        assert_eq!(a, b);
        assert!(a.len() < 160, "vocab has {} tokens", a.len());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::standard();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
