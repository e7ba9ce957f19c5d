//! The ASR-to-NLU interfaces: each maps an ASR exposure and its hypothesis
//! `w` to the pair `(v, h_I)` the NLU consumes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asr::{max_transition_frames, AsrExposure, AsrKind};
use crate::autograd::Var;
use crate::data::Tokenizer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceKind {
    Text,
    TiedEmbedding,
    Posterior,
    Hidden,
    AudioAttention,
}

impl InterfaceKind {
    pub const ALL: [InterfaceKind; 5] = [
        InterfaceKind::Text,
        InterfaceKind::TiedEmbedding,
        InterfaceKind::Posterior,
        InterfaceKind::Hidden,
        InterfaceKind::AudioAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterfaceKind::Text => "text",
            InterfaceKind::TiedEmbedding => "tied_embedding",
            InterfaceKind::Posterior => "posterior",
            InterfaceKind::Hidden => "hidden",
            InterfaceKind::AudioAttention => "audio_attention",
        }
    }

    /// Whether `v` is a token sequence rather than a continuous one.
    pub fn is_discrete(self) -> bool {
        matches!(self, InterfaceKind::Text | InterfaceKind::AudioAttention)
    }
}

impl fmt::Display for InterfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterfaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterfaceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown interface `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub enum InterfaceValue<'a> {
    /// NLU token ids.
    Tokens(Vec<usize>),
    /// `U x d` rows.
    Continuous(Var<'a>),
}

#[derive(Debug, Clone)]
pub struct InterfaceOutput<'a> {
    pub v: InterfaceValue<'a>,
    /// Extra per-frame representations for cross-attention.
    pub h_i: Option<Var<'a>>,
    /// True iff NLU gradients reach ASR parameters.
    pub differentiable: bool,
}

impl InterfaceOutput<'_> {
    pub fn len(&self) -> usize {
        match &self.v {
            InterfaceValue::Tokens(t) => t.len(),
            InterfaceValue::Continuous(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Detokenizes the ASR one-best and retokenizes it for the NLU.
pub fn retokenize(tokens: &[usize], asr: &Tokenizer, nlu: &Tokenizer) -> Vec<usize> {
    nlu.tokenize(&asr.detokenize(tokens))
}

pub fn text_interface<'a>(
    exp: &AsrExposure<'a>,
    asr: &Tokenizer,
    nlu: &Tokenizer,
) -> InterfaceOutput<'a> {
    InterfaceOutput {
        v: InterfaceValue::Tokens(retokenize(&exp.hypothesis.tokens, asr, nlu)),
        h_i: None,
        differentiable: false,
    }
}

/// `v = Emb_asr(w)`, read from the very table the ASR decoder uses.
pub fn tied_embedding_interface<'a>(exp: &AsrExposure<'a>) -> Result<InterfaceOutput<'a>> {
    Ok(InterfaceOutput {
        v: InterfaceValue::Continuous(exp.embedding.index_select(&exp.hypothesis.tokens)?),
        h_i: None,
        differentiable: true,
    })
}

pub fn posterior_interface<'a>(exp: &AsrExposure<'a>) -> Result<InterfaceOutput<'a>> {
    let rows = exp.posteriors.shape()[0];
    if rows != exp.hypothesis.tokens.len() {
        return Err(Error::Interface {
            interface: "posterior",
            reason: format!(
                "{} posterior rows for {} tokens",
                rows,
                exp.hypothesis.tokens.len()
            ),
        });
    }
    Ok(InterfaceOutput {
        v: InterfaceValue::Continuous(exp.posteriors),
        h_i: None,
        differentiable: true,
    })
}

pub fn hidden_interface_las<'a>(exp: &AsrExposure<'a>) -> Result<InterfaceOutput<'a>> {
    if exp.kind != AsrKind::Las {
        return Err(Error::Interface {
            interface: "hidden",
            reason: "decoder states exist only for the attention model".into(),
        });
    }
    let h_d = exp.h_d.ok_or_else(|| Error::Interface {
        interface: "hidden",
        reason: "exposure has no decoder states".into(),
    })?;
    Ok(InterfaceOutput {
        v: InterfaceValue::Continuous(h_d),
        h_i: None,
        differentiable: true,
    })
}

/// Joint-network states at the frame of maximum label transition
/// probability: `v_u = h^J[i_u, u-1]`, indices held constant.
pub fn hidden_interface_rnnt<'a>(exp: &AsrExposure<'a>) -> Result<InterfaceOutput<'a>> {
    let missing = |what: &str| Error::Interface {
        interface: "hidden",
        reason: format!("transducer exposure lacks {what}"),
    };
    if exp.kind != AsrKind::Rnnt {
        return Err(Error::Interface {
            interface: "hidden",
            reason: "joint states exist only for the transducer".into(),
        });
    }
    let h_j = exp.h_j.ok_or_else(|| missing("joint states"))?;
    let transitions = exp
        .hypothesis
        .lattice_transitions
        .as_ref()
        .ok_or_else(|| missing("lattice transitions"))?;
    let shape = h_j.shape();
    let (t_len, u1, j) = (shape[0], shape[1], shape[2]);
    if transitions.len() + 1 != u1 || transitions.iter().any(|r| r.len() != t_len) {
        return Err(missing("transitions matching the joint lattice"));
    }
    let rows: Vec<usize> = max_transition_frames(transitions)
        .iter()
        .enumerate()
        .map(|(u, &t)| t * u1 + u)
        .collect();
    Ok(InterfaceOutput {
        v: InterfaceValue::Continuous(h_j.reshape(&[t_len * u1, j])?.index_select(&rows)?),
        h_i: None,
        differentiable: true,
    })
}

pub fn hidden_interface<'a>(exp: &AsrExposure<'a>) -> Result<InterfaceOutput<'a>> {
    match exp.kind {
        AsrKind::Rnnt => hidden_interface_rnnt(exp),
        AsrKind::Las => hidden_interface_las(exp),
    }
}

/// `v = w` as NLU tokens and `h_I = h^e`.
pub fn audio_attention_interface<'a>(
    exp: &AsrExposure<'a>,
    asr: &Tokenizer,
    nlu: &Tokenizer,
) -> InterfaceOutput<'a> {
    InterfaceOutput {
        v: InterfaceValue::Tokens(retokenize(&exp.hypothesis.tokens, asr, nlu)),
        h_i: Some(exp.h_e),
        differentiable: true,
    }
}

pub fn apply_interface<'a>(
    kind: InterfaceKind,
    exp: &AsrExposure<'a>,
    asr: &Tokenizer,
    nlu: &Tokenizer,
) -> Result<InterfaceOutput<'a>> {
    match kind {
        InterfaceKind::Text => Ok(text_interface(exp, asr, nlu)),
        InterfaceKind::TiedEmbedding => tied_embedding_interface(exp),
        InterfaceKind::Posterior => posterior_interface(exp),
        InterfaceKind::Hidden => hidden_interface(exp),
        InterfaceKind::AudioAttention => Ok(audio_attention_interface(exp, asr, nlu)),
    }
}

/// Width of continuous `v` for an interface, given the ASR model.
pub fn continuous_dim(kind: InterfaceKind, asr: &crate::asr::AsrModel) -> Option<usize> {
    match kind {
        InterfaceKind::Text | InterfaceKind::AudioAttention => None,
        InterfaceKind::TiedEmbedding => Some(asr.embed_dim()),
        InterfaceKind::Posterior => Some(asr.vocab_size()),
        InterfaceKind::Hidden => Some(asr.hidden_dim()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::{AsrModel, LasConfig, LasModel, RnntConfig, RnntModel};
    use crate::autograd::{ParamStore, Tape};
    use crate::data::TokenizerMode;
    use crate::nn::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnnt(seed: u64) -> (ParamStore, AsrModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = RnntConfig {
            feature_dim: 3,
            vocab_size: 5,
            encoder_layers: 1,
            encoder_dim: 4,
            embed_dim: 3,
            pred_layers: 1,
            pred_dim: 4,
            joint_dim: 5,
            max_symbols_per_frame: 2,
        };
        let m = RnntModel::new(&mut store, "rnnt", config, &mut rng).unwrap();
        (store, AsrModel::Rnnt(m))
    }

    fn las(seed: u64) -> (ParamStore, AsrModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = LasConfig {
            feature_dim: 3,
            vocab_size: 5,
            encoder_layers: 1,
            encoder_dim: 3,
            embed_dim: 3,
            decoder_layers: 1,
            decoder_dim: 4,
            attention_dim: 4,
            attention_heads: 2,
            decoder_out_dim: 4,
            max_len: 3,
        };
        let m = LasModel::new(&mut store, "las", config, &mut rng).unwrap();
        (store, AsrModel::Las(m))
    }

    fn audio(t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn shared_tokenizer() -> Tokenizer {
        Tokenizer::from_texts(TokenizerMode::Word, ["turn on lights"])
    }

    #[test]
    fn empty_hypothesis_gives_empty_v() {
        let tok = shared_tokenizer();
        for (store, model) in [rnnt(1), las(1)] {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let exp = model.expose(g, &audio(4, 1), &[], None).unwrap();
            for kind in InterfaceKind::ALL {
                let out = apply_interface(kind, &exp, &tok, &tok).unwrap();
                assert_eq!(out.len(), 0, "{kind}");
                assert_eq!(out.h_i.is_some(), kind == InterfaceKind::AudioAttention);
                if let Some(h) = out.h_i {
                    assert_eq!(h.shape()[0], 4);
                }
            }
        }
    }

    #[test]
    fn lengths_and_definitions() {
        let tok = shared_tokenizer();
        let w = [3usize, 4, 3];
        for (store, model) in [rnnt(2), las(2)] {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let x = audio(4, 2);
            let exp = model.expose(g, &x, &w, None).unwrap();
            for kind in InterfaceKind::ALL {
                let out = apply_interface(kind, &exp, &tok, &tok).unwrap();
                assert_eq!(out.len(), w.len());
                assert_eq!(out.differentiable, kind != InterfaceKind::Text);
            }
            // tied embedding rows are table rows
            if let InterfaceValue::Continuous(v) = tied_embedding_interface(&exp).unwrap().v {
                let table = exp.embedding.value();
                for (i, row) in v.value().rows().iter().enumerate() {
                    assert_eq!(row.as_slice(), table.row(w[i]));
                }
            }
            // posterior rows on the simplex and equal to the hypothesis record
            if let InterfaceValue::Continuous(v) = posterior_interface(&exp).unwrap().v {
                let rows = v.value().rows();
                assert_eq!(rows, exp.hypothesis.token_posteriors);
                for r in rows {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            let h_i = audio_attention_interface(&exp, &tok, &tok).h_i.unwrap();
            assert_eq!(h_i.to_vec(), exp.h_e.to_vec());
        }
    }

    #[test]
    fn hidden_kind_mismatch_is_an_error() {
        let (store, model) = rnnt(3);
        let tape = Tape::new();
        let exp = model
            .expose(Graph::new(&tape, &store), &audio(3, 3), &[3], None)
            .unwrap();
        assert!(matches!(
            hidden_interface_las(&exp),
            Err(Error::Interface { .. })
        ));
        let (store, model) = las(3);
        let tape = Tape::new();
        let exp = model
            .expose(Graph::new(&tape, &store), &audio(3, 3), &[3], None)
            .unwrap();
        assert!(matches!(
            hidden_interface_rnnt(&exp),
            Err(Error::Interface { .. })
        ));
    }

    #[test]
    fn las_hidden_matches_decode_states() {
        let (store, model) = las(4);
        let x = audio(5, 4);
        let nbest = model.decode(&store, &x, 3).unwrap();
        for h in &nbest.hypotheses {
            let tape = Tape::new();
            let exp = model
                .expose(Graph::new(&tape, &store), &x, &h.tokens, None)
                .unwrap();
            let InterfaceValue::Continuous(v) = hidden_interface_las(&exp).unwrap().v else {
                unreachable!()
            };
            assert_eq!(&v.value().rows(), h.decoder_states.as_ref().unwrap());
        }
    }

    #[test]
    fn rnnt_hidden_selection_matches_scan() {
        let (store, model) = rnnt(5);
        let x = audio(5, 5);
        let w = [1usize, 4, 2];
        let tape = Tape::new();
        let exp = model
            .expose(Graph::new(&tape, &store), &x, &w, None)
            .unwrap();
        let InterfaceValue::Continuous(v) = hidden_interface_rnnt(&exp).unwrap().v else {
            unreachable!()
        };
        let trans = exp.hypothesis.lattice_transitions.as_ref().unwrap();
        let h_j = exp.h_j.unwrap().to_vec();
        let j = 5;
        for (u, row) in v.value().rows().iter().enumerate() {
            let mut best = 0;
            for t in 1..trans[u].len() {
                if trans[u][t] > trans[u][best] {
                    best = t;
                }
            }
            let at = (best * 4 + u) * j;
            assert_eq!(row.as_slice(), &h_j[at..at + j]);
        }
    }

    #[test]
    fn text_interface_round_trips_across_tokenizers() {
        let words = ["alpha", "beta", "gamma", "delta"];
        let word_tok = Tokenizer::from_texts(TokenizerMode::Word, words);
        let char_tok = Tokenizer::from_texts(TokenizerMode::Char, words);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(0..6);
            let text: Vec<&str> = (0..n).map(|_| words[rng.gen_range(0..4)]).collect();
            let text = text.join(" ");
            let a = word_tok.tokenize(&text);
            let b = retokenize(&a, &word_tok, &char_tok);
            assert_eq!(word_tok.detokenize(&a), char_tok.detokenize(&b));
            assert_eq!(char_tok.detokenize(&b), text);
        }
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_maps(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 1..6), 1..5)) {
            let t = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(t, 0.5); r }).collect();
            let base = max_transition_frames(&rows);
            let mapped: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| (3.0 * p).exp() + p).collect()).collect();
            prop_assert_eq!(max_transition_frames(&mapped), base);
        }
    }
}
