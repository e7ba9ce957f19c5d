use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::corpus::Utterance;
use crate::data::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::metrics::{Slot, SluAnnotation};

pub const TAG_O: usize = 0;
/// Non-initial token of a word split by the NLU tokenizer.
pub const TAG_X: usize = 1;

pub fn tag_begin(slot: usize) -> usize {
    2 + 2 * slot
}

pub fn tag_inside(slot: usize) -> usize {
    3 + 2 * slot
}

/// Label inventories for the NLU heads, sorted for stable indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub intents: Vec<String>,
    pub domains: Vec<String>,
    pub slots: Vec<String>,
}

impl LabelSet {
    pub fn from_utterances(utts: &[Utterance]) -> Self {
        let mut intents = BTreeSet::new();
        let mut domains = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for u in utts {
            intents.insert(u.intent.clone());
            domains.insert(u.domain.clone());
            slots.extend(u.slots.iter().map(|(n, _)| n.clone()));
        }
        Self {
            intents: intents.into_iter().collect(),
            domains: domains.into_iter().collect(),
            slots: slots.into_iter().collect(),
        }
    }

    pub fn num_tags(&self) -> usize {
        2 + 2 * self.slots.len()
    }

    fn find(list: &[String], what: &'static str, label: &str) -> Result<usize> {
        list.iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown {what} label `{label}`")))
    }

    pub fn intent_id(&self, label: &str) -> Result<usize> {
        Self::find(&self.intents, "intent", label)
    }

    pub fn domain_id(&self, label: &str) -> Result<usize> {
        Self::find(&self.domains, "domain", label)
    }

    pub fn slot_id(&self, label: &str) -> Result<usize> {
        Self::find(&self.slots, "slot", label)
    }

    /// One BIO tag per transcript word.
    pub fn word_tags(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let n = utt.words().len();
        let spans = utt.slot_spans().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "utterance {} has a slot outside its transcript",
                utt.id
            ))
        })?;
        let mut tags = vec![TAG_O; n];
        for ((name, _), (s, e)) in utt.slots.iter().zip(spans) {
            let k = self.slot_id(name)?;
            tags[s] = tag_begin(k);
            for t in &mut tags[s + 1..e] {
                *t = tag_inside(k);
            }
        }
        Ok(tags)
    }

    /// Spreads word tags over NLU tokens: first token of a word takes the
    /// word tag, the rest take `TAG_X`, separators take `TAG_O`.
    pub fn token_tags(
        &self,
        tokenizer: &Tokenizer,
        token_ids: &[usize],
        word_tags: &[usize],
    ) -> Result<Vec<usize>> {
        let spans = tokenizer.word_spans(token_ids);
        if spans.len() != word_tags.len() {
            return Err(Error::LengthMismatch {
                what: "words vs word tags",
                left: spans.len(),
                right: word_tags.len(),
            });
        }
        let mut tags = vec![TAG_O; token_ids.len()];
        for (span, &tag) in spans.iter().zip(word_tags) {
            tags[span[0]] = tag;
            for &p in &span[1..] {
                tags[p] = TAG_X;
            }
        }
        Ok(tags)
    }

    /// Reassembles slots from per-word tags. `I-k` without an open `k` span
    /// starts a new one; stray `X` reads as `O`.
    pub fn decode_slots(&self, words: &[String], tags: &[usize]) -> Vec<Slot> {
        let mut slots: Vec<Slot> = Vec::new();
        let mut open: Option<usize> = None;
        for (w, &tag) in words.iter().zip(tags) {
            let k = if tag >= 2 { Some((tag - 2) / 2) } else { None };
            let begin = tag >= 2 && tag % 2 == 0;
            match k {
                Some(k) if k < self.slots.len() => {
                    if !begin && open == Some(k) {
                        slots.last_mut().expect("open span").value.push(w.clone());
                    } else {
                        slots.push(Slot {
                            name: self.slots[k].clone(),
                            value: vec![w.clone()],
                        });
                        open = Some(k);
                    }
                }
                _ => open = None,
            }
        }
        slots
    }

    /// Word-level tags from token-level tags, taking each word's first token.
    pub fn word_tags_from_tokens(
        &self,
        tokenizer: &Tokenizer,
        token_ids: &[usize],
        token_tags: &[usize],
    ) -> Vec<usize> {
        tokenizer
            .word_spans(token_ids)
            .iter()
            .map(|span| match token_tags.get(span[0]) {
                Some(&TAG_X) | None => TAG_O,
                Some(&t) => t,
            })
            .collect()
    }

    pub fn annotation(
        &self,
        words: &[String],
        word_tags: &[usize],
        intent: usize,
        domain: usize,
    ) -> SluAnnotation {
        SluAnnotation {
            transcript: words.to_vec(),
            slots: self.decode_slots(words, word_tags),
            intent: self.intents.get(intent).cloned().unwrap_or_default(),
            domain: self.domains.get(domain).cloned().unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, CorpusSpec};
    use crate::data::tokenizer::TokenizerMode;

    #[test]
    fn tags_round_trip_over_corpus() {
        let utts = generate_corpus(&CorpusSpec::default()).unwrap();
        let labels = LabelSet::from_utterances(&utts);
        for mode in [TokenizerMode::Word, TokenizerMode::Char] {
            let tok = Tokenizer::from_texts(mode, utts.iter().map(|u| u.transcript.as_str()));
            for u in &utts {
                let wt = labels.word_tags(u).unwrap();
                let ids = tok.tokenize(&u.transcript);
                let tt = labels.token_tags(&tok, &ids, &wt).unwrap();
                assert_eq!(tt.len(), ids.len());
                assert_eq!(labels.word_tags_from_tokens(&tok, &ids, &tt), wt);
                let words: Vec<String> = u.words().iter().map(|s| s.to_string()).collect();
                let ann = labels.annotation(
                    &words,
                    &wt,
                    labels.intent_id(&u.intent).unwrap(),
                    labels.domain_id(&u.domain).unwrap(),
                );
                assert_eq!(ann, u.annotation());
            }
        }
    }

    #[test]
    fn stray_inside_opens_span() {
        let labels = LabelSet {
            intents: vec![],
            domains: vec![],
            slots: vec!["a".into(), "b".into()],
        };
        let words: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let slots = labels.decode_slots(&words, &[tag_inside(1), tag_inside(1), TAG_X]);
        assert_eq!(slots, vec![Slot::new("b", "x y")]);
    }
}
