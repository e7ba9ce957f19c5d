//! End-to-end ASR models: an RNN transducer and a listen-attend-spell
//! encoder-decoder, with beam decoding and the representations the NLU
//! interfaces consume.

pub mod las;
pub mod rnnt;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Graph;

pub use las::{LasConfig, LasForward, LasModel};
pub use rnnt::{
    max_transition_frames, rnnt_loss, rnnt_loss_value, RnntConfig, RnntForward, RnntModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrKind {
    Rnnt,
    Las,
}

/// One decoded token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `U x |V|` output distributions behind each emitted token.
    pub token_posteriors: Vec<Vec<f64>>,
    /// RNNT: for each token `u`, `P(w_u | t, u-1)` over every frame `t`.
    pub lattice_transitions: Option<Vec<Vec<f64>>>,
    /// RNNT: frame at which the search emitted each token.
    pub selected_frames: Option<Vec<usize>>,
    /// LAS: decoder state `h^d` behind each emitted token.
    pub decoder_states: Option<Vec<Vec<f64>>>,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Hypotheses in descending score order, ties broken by token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBest {
    pub hypotheses: Vec<Hypothesis>,
    pub beam_width: usize,
}

impl NBest {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

/// Ranking used by every beam: higher score first, then lexicographically
/// smaller tokens.
pub(crate) fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::OutOfVocabulary { token, vocab }),
        None => Ok(()),
    }
}

pub(crate) fn features_tensor(x: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if let Some(row) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "audio features",
            left: vec![x.len(), row.len()],
            right: vec![x.len(), dim],
        });
    }
    Tensor::from_rows(x, dim)
}

/// Everything one ASR pass exposes for a given hypothesis `w`.
#[derive(Debug, Clone)]
pub struct AsrExposure<'a> {
    pub kind: AsrKind,
    /// `T x |E|` encoder output.
    pub h_e: Var<'a>,
    /// RNNT: `(U+1) x |P|` prediction network output (row 0 is the empty prefix).
    pub h_p: Option<Var<'a>>,
    /// RNNT: `T x (U+1) x |J|` joint hidden layer.
    pub h_j: Option<Var<'a>>,
    /// LAS: `U x |D|` decoder states.
    pub h_d: Option<Var<'a>>,
    /// `U x |V|` differentiable token posteriors.
    pub posteriors: Var<'a>,
    /// Differentiable `ln P(w | x)`.
    pub log_prob: Var<'a>,
    /// Input token embedding table of the ASR decoder.
    pub embedding: Var<'a>,
    pub hypothesis: Hypothesis,
}

/// Either ASR model behind one interface.
#[derive(Debug, Clone)]
pub enum AsrModel {
    Rnnt(RnntModel),
    Las(LasModel),
}

impl AsrModel {
    pub fn kind(&self) -> AsrKind {
        match self {
            AsrModel::Rnnt(_) => AsrKind::Rnnt,
            AsrModel::Las(_) => AsrKind::Las,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            AsrModel::Rnnt(m) => m.config.vocab_size,
            AsrModel::Las(m) => m.config.vocab_size,
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            AsrModel::Rnnt(m) => &m.prefix,
            AsrModel::Las(m) => &m.prefix,
        }
    }

    /// Width of the tied embedding.
    pub fn embed_dim(&self) -> usize {
        match self {
            AsrModel::Rnnt(m) => m.config.embed_dim,
            AsrModel::Las(m) => m.config.embed_dim,
        }
    }

    pub fn encoder_dim(&self) -> usize {
        match self {
            AsrModel::Rnnt(m) => m.config.encoder_dim,
            AsrModel::Las(m) => 2 * m.config.encoder_dim,
        }
    }

    /// Width of the hidden-interface representation.
    pub fn hidden_dim(&self) -> usize {
        match self {
            AsrModel::Rnnt(m) => m.config.joint_dim,
            AsrModel::Las(m) => m.config.decoder_out_dim,
        }
    }

    /// `T x |E|` encoder output `h^e`.
    pub fn encode<'a>(&self, g: Graph<'a>, x: &[Vec<f64>]) -> Result<Var<'a>> {
        if x.is_empty() {
            return Err(Error::EmptyInput("audio frames"));
        }
        match self {
            AsrModel::Rnnt(m) => m.encode(g, x),
            AsrModel::Las(m) => m.encode(g, x),
        }
    }

    /// Maximum-likelihood loss `-ln P(y | x)`. For LAS, `y` is scored
    /// verbatim, so callers append the end-of-sequence token themselves.
    pub fn mle_loss<'a>(&self, g: Graph<'a>, x: &[Vec<f64>], y: &[usize]) -> Result<Var<'a>> {
        self.mle_loss_encoded(g, self.encode(g, x)?, y)
    }

    /// [`mle_loss`](Self::mle_loss) on an already computed `h^e`.
    pub fn mle_loss_encoded<'a>(&self, g: Graph<'a>, h_e: Var<'a>, y: &[usize]) -> Result<Var<'a>> {
        match self {
            AsrModel::Rnnt(m) => rnnt_loss(m.forward_encoded(g, h_e, y)?.logits, y),
            AsrModel::Las(m) => m.loss_encoded(g, h_e, y),
        }
    }

    pub fn decode(&self, params: &ParamStore, x: &[Vec<f64>], beam_width: usize) -> Result<NBest> {
        match self {
            AsrModel::Rnnt(m) => m.beam_decode(params, x, beam_width),
            AsrModel::Las(m) => m.beam_decode(params, x, beam_width, m.config.max_len),
        }
    }

    /// Raw beam search: tokens and scores only, without per-token detail.
    pub fn search(
        &self,
        params: &ParamStore,
        x: &[Vec<f64>],
        beam_width: usize,
    ) -> Result<Vec<(Vec<usize>, f64)>> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, params);
        match self {
            AsrModel::Rnnt(m) => Ok(m
                .beam_search(g, x, beam_width)?
                .into_iter()
                .map(|h| (h.tokens, h.score))
                .collect()),
            AsrModel::Las(m) => Ok(m
                .beam_search(g, x, beam_width, m.config.max_len)?
                .into_iter()
                .map(|h| (h.tokens, h.score))
                .collect()),
        }
    }

    /// Re-runs the model conditioned on `tokens`, exposing its representations
    /// on `g`'s tape.
    /// `score` defaults to the exact model probability of `tokens`.
    pub fn expose<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        tokens: &[usize],
        score: Option<f64>,
    ) -> Result<AsrExposure<'a>> {
        self.expose_encoded(g, self.encode(g, x)?, tokens, score)
    }

    /// [`expose`](Self::expose) on an already computed `h^e`, so that several
    /// hypotheses of one utterance share a single encoder pass.
    pub fn expose_encoded<'a>(
        &self,
        g: Graph<'a>,
        h_e: Var<'a>,
        tokens: &[usize],
        score: Option<f64>,
    ) -> Result<AsrExposure<'a>> {
        match self {
            AsrModel::Rnnt(m) => m.expose_encoded(g, h_e, tokens, score, None),
            AsrModel::Las(m) => m.expose_encoded(g, h_e, tokens, score, None),
        }
    }
}
