use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["<blank>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Word,
    Char,
}

/// Word- or character-level tokenizer with reserved ids for blank, end of
/// sequence and unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SavedTokenizer", try_from = "SavedTokenizer")]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from the given texts; entries are sorted so the
    /// result does not depend on text order.
    pub fn from_texts<'a>(mode: TokenizerMode, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut units = BTreeSet::new();
        if mode == TokenizerMode::Char {
            units.insert(" ".to_string());
        }
        for text in texts {
            match mode {
                TokenizerMode::Word => units.extend(text.split_whitespace().map(str::to_string)),
                TokenizerMode::Char => units.extend(normalize(text).chars().map(String::from)),
            }
        }
        let vocab: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                units
                    .into_iter()
                    .filter(|u| !SPECIALS.contains(&u.as_str())),
            )
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { mode, vocab, index }
    }

    /// Rebuilds a tokenizer from a saved vocabulary, which must start with
    /// the reserved entries and contain no duplicates.
    pub fn from_vocab(mode: TokenizerMode, vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(
                "tokenizer vocabulary must start with <blank>, </s>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { mode, vocab, index })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let lookup = |u: &str| self.index.get(u).copied().unwrap_or(UNK);
        match self.mode {
            TokenizerMode::Word => text.split_whitespace().map(lookup).collect(),
            TokenizerMode::Char => {
                let mut buf = [0u8; 4];
                normalize(text)
                    .chars()
                    .map(|c| lookup(c.encode_utf8(&mut buf)))
                    .collect()
            }
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let units = ids.iter().filter(|&&i| i != BLANK && i != EOS).map(|&i| {
            self.vocab
                .get(i)
                .map(String::as_str)
                .unwrap_or(SPECIALS[UNK])
        });
        match self.mode {
            TokenizerMode::Word => units.collect::<Vec<_>>().join(" "),
            TokenizerMode::Char => units.collect(),
        }
    }

    /// Groups token positions into words. In char mode, space tokens
    /// separate words and belong to none.
    pub fn word_spans(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        match self.mode {
            TokenizerMode::Word => (0..ids.len()).map(|i| vec![i]).collect(),
            TokenizerMode::Char => {
                let space = self.index.get(" ").copied();
                let mut spans = Vec::new();
                let mut cur = Vec::new();
                for (pos, &id) in ids.iter().enumerate() {
                    if Some(id) == space {
                        if !cur.is_empty() {
                            spans.push(std::mem::take(&mut cur));
                        }
                    } else {
                        cur.push(pos);
                    }
                }
                if !cur.is_empty() {
                    spans.push(cur);
                }
                spans
            }
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

#[derive(Serialize, Deserialize)]
struct SavedTokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
}

impl From<Tokenizer> for SavedTokenizer {
    fn from(t: Tokenizer) -> Self {
        Self {
            mode: t.mode,
            vocab: t.vocab,
        }
    }
}

impl TryFrom<SavedTokenizer> for Tokenizer {
    type Error = Error;

    fn try_from(s: SavedTokenizer) -> Result<Self> {
        Tokenizer::from_vocab(s.mode, s.vocab)
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
