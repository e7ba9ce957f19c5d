//! Synthetic corpora, tokenization, slot tagging and dataset files.

pub mod corpus;
pub mod io;
pub mod labels;
pub mod tokenizer;

pub use corpus::{
    generate_corpus, prototype, split_corpus, synth_audio, CorpusSpec, Grammar, IntentDef,
    SlotLexicon, Splits, TemplateItem, Utterance,
};
pub use io::{read_dataset, write_dataset};
pub use labels::{tag_begin, tag_inside, LabelSet, TAG_O, TAG_X};
pub use tokenizer::{Tokenizer, TokenizerMode, BLANK, EOS, UNK};
