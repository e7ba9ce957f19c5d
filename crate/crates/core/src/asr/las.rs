use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_tokens, features_tensor, rank, AsrExposure, AsrKind, Hypothesis, NBest};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::data::{BLANK, EOS};
use crate::error::{Error, Result};
use crate::nn::{Embedding, Graph, Linear, Lstm, LstmState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LasConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub encoder_layers: usize,
    /// Units per direction; the encoder output is twice as wide.
    pub encoder_dim: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    pub attention_heads: usize,
    /// Width of `h^d`.
    pub decoder_out_dim: usize,
    pub max_len: usize,
}

impl Default for LasConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 0,
            encoder_layers: 2,
            encoder_dim: 32,
            embed_dim: 32,
            decoder_layers: 1,
            decoder_dim: 64,
            attention_dim: 32,
            attention_heads: 2,
            decoder_out_dim: 64,
            max_len: 16,
        }
    }
}

/// Listen-attend-spell: bidirectional LSTM encoder and an LSTM decoder with
/// multi-head additive attention.
#[derive(Debug, Clone)]
pub struct LasModel {
    pub config: LasConfig,
    pub prefix: String,
    pub encoder: Vec<(Lstm, Lstm)>,
    pub embedding: Embedding,
    pub decoder: Vec<Lstm>,
    pub query: Linear,
    pub key: Linear,
    pub score: Vec<ParamId>,
    pub combine: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct LasForward<'a> {
    pub h_e: Var<'a>,
    /// `U x |D|`
    pub h_d: Var<'a>,
    /// `U x |V|`
    pub logits: Var<'a>,
    /// Per step, one `T x 1` weight column per head.
    pub attention: Vec<Vec<Var<'a>>>,
}

struct Step<'a> {
    h_d: Var<'a>,
    logits: Var<'a>,
    states: Vec<LstmState<'a>>,
    attention: Vec<Var<'a>>,
}

/// Encoder outputs and attention keys shared by every decoder step.
#[derive(Clone, Copy)]
struct Memory<'a> {
    h_e: Var<'a>,
    keys: Var<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LasSearchHyp {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub decoder_states: Vec<Vec<f64>>,
}

struct Active<'a> {
    tokens: Vec<usize>,
    score: f64,
    states: Vec<LstmState<'a>>,
    rows: Vec<Vec<f64>>,
}

impl LasModel {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: LasConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = &config;
        if c.vocab_size < 3 || c.encoder_layers == 0 || c.decoder_layers == 0 || c.max_len == 0 {
            return Err(Error::Config(
                "las needs blank, end-of-sequence and one more token, at least one layer each side, and max_len >= 1"
                    .into(),
            ));
        }
        if c.attention_heads == 0 || !c.attention_dim.is_multiple_of(c.attention_heads) {
            return Err(Error::Config(format!(
                "attention_dim {} must split evenly over {} heads",
                c.attention_dim, c.attention_heads
            )));
        }
        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for l in 0..c.encoder_layers {
            let input = if l == 0 {
                c.feature_dim
            } else {
                2 * c.encoder_dim
            };
            encoder.push((
                Lstm::new(
                    store,
                    &format!("{prefix}.encoder.layer{l}.forward"),
                    input,
                    c.encoder_dim,
                    rng,
                )?,
                Lstm::new(
                    store,
                    &format!("{prefix}.encoder.layer{l}.backward"),
                    input,
                    c.encoder_dim,
                    rng,
                )?,
            ));
        }
        let embedding = Embedding::new(
            store,
            &format!("{prefix}.decoder.embedding"),
            c.vocab_size,
            c.embed_dim,
            rng,
        )?;
        let mut decoder = Vec::with_capacity(c.decoder_layers);
        for l in 0..c.decoder_layers {
            let input = if l == 0 { c.embed_dim } else { c.decoder_dim };
            decoder.push(Lstm::new(
                store,
                &format!("{prefix}.decoder.layer{l}"),
                input,
                c.decoder_dim,
                rng,
            )?);
        }
        let memory_dim = 2 * c.encoder_dim;
        let query = Linear::new(
            store,
            &format!("{prefix}.attention.query"),
            c.decoder_dim,
            c.attention_dim,
            false,
            rng,
        )?;
        let key = Linear::new(
            store,
            &format!("{prefix}.attention.key"),
            memory_dim,
            c.attention_dim,
            true,
            rng,
        )?;
        let head_dim = c.attention_dim / c.attention_heads;
        let mut score = Vec::with_capacity(c.attention_heads);
        for h in 0..c.attention_heads {
            let bound = 1.0 / (head_dim as f64).sqrt();
            score.push(store.uniform(
                format!("{prefix}.attention.score{h}"),
                &[head_dim, 1],
                bound,
                rng,
            )?);
        }
        let combine = Linear::new(
            store,
            &format!("{prefix}.decoder.combine"),
            c.decoder_dim + c.attention_heads * memory_dim,
            c.decoder_out_dim,
            true,
            rng,
        )?;
        let output = Linear::new(
            store,
            &format!("{prefix}.decoder.output"),
            c.decoder_out_dim,
            c.vocab_size,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            encoder,
            embedding,
            decoder,
            query,
            key,
            score,
            combine,
            output,
        })
    }

    pub fn encode<'a>(&self, g: Graph<'a>, x: &[Vec<f64>]) -> Result<Var<'a>> {
        if x.is_empty() {
            return Err(Error::EmptyInput("audio frames"));
        }
        let mut h = g.constant(features_tensor(x, self.config.feature_dim)?);
        for (fwd, bwd) in &self.encoder {
            let f = fwd.forward(g, h, false)?;
            let b = bwd.forward(g, h, true)?;
            h = g.tape.concat(&[f, b], 1)?;
        }
        Ok(h)
    }

    fn memory<'a>(&self, g: Graph<'a>, h_e: Var<'a>) -> Result<Memory<'a>> {
        Ok(Memory {
            h_e,
            keys: self.key.forward(g, h_e)?,
        })
    }

    fn initial_states<'a>(&self, g: Graph<'a>) -> Vec<LstmState<'a>> {
        self.decoder
            .iter()
            .map(|l| LstmState::zero(g, l.hidden))
            .collect()
    }

    /// One decoder step fed with the previous token.
    fn step<'a>(
        &self,
        g: Graph<'a>,
        mem: Memory<'a>,
        token: usize,
        prev: &[LstmState<'a>],
    ) -> Result<Step<'a>> {
        let mut input = self.embedding.forward(g, &[token])?;
        let mut states = Vec::with_capacity(self.decoder.len());
        for (layer, &state) in self.decoder.iter().zip(prev) {
            let next = layer.step(g, layer.project(g, input)?, state)?;
            input = next.h;
            states.push(next);
        }
        let s = input;
        let energy = mem.keys.add(self.query.forward(g, s)?)?.tanh();
        let head_dim = self.config.attention_dim / self.config.attention_heads;
        let mut parts = vec![s];
        let mut attention = Vec::with_capacity(self.score.len());
        for (h, &v) in self.score.iter().enumerate() {
            let e = energy
                .slice(1, h * head_dim, (h + 1) * head_dim)?
                .matmul(g.param(v))?;
            let w = e.softmax(0)?;
            parts.push(w.transpose()?.matmul(mem.h_e)?);
            attention.push(w);
        }
        let h_d = self.combine.forward(g, g.tape.concat(&parts, 1)?)?.tanh();
        let logits = self.output.forward(g, h_d)?;
        Ok(Step {
            h_d,
            logits,
            states,
            attention,
        })
    }

    /// Teacher-forced pass: step `i` is fed `y[i-1]` (blank at the start) and
    /// predicts `y[i]`.
    pub fn forward<'a>(&self, g: Graph<'a>, x: &[Vec<f64>], y: &[usize]) -> Result<LasForward<'a>> {
        self.forward_encoded(g, self.encode(g, x)?, y)
    }

    /// Like [`forward`](Self::forward), reusing encoder output `h_e`.
    pub fn forward_encoded<'a>(
        &self,
        g: Graph<'a>,
        h_e: Var<'a>,
        y: &[usize],
    ) -> Result<LasForward<'a>> {
        if y.is_empty() {
            return Err(Error::EmptyInput("decoder target"));
        }
        check_tokens(y, self.config.vocab_size)?;
        let mem = self.memory(g, h_e)?;
        let mut states = self.initial_states(g);
        let mut h_d = Vec::with_capacity(y.len());
        let mut logits = Vec::with_capacity(y.len());
        let mut attention = Vec::with_capacity(y.len());
        let mut prev = BLANK;
        for &tok in y {
            let step = self.step(g, mem, prev, &states)?;
            h_d.push(step.h_d);
            logits.push(step.logits);
            attention.push(step.attention);
            states = step.states;
            prev = tok;
        }
        Ok(LasForward {
            h_e: mem.h_e,
            h_d: g.tape.concat(&h_d, 0)?,
            logits: g.tape.concat(&logits, 0)?,
            attention,
        })
    }

    /// `-sum_i ln P(y_i | x, y_<i)`, with `y` scored exactly as given.
    pub fn loss<'a>(&self, g: Graph<'a>, x: &[Vec<f64>], y: &[usize]) -> Result<Var<'a>> {
        self.loss_encoded(g, self.encode(g, x)?, y)
    }

    pub fn loss_encoded<'a>(&self, g: Graph<'a>, h_e: Var<'a>, y: &[usize]) -> Result<Var<'a>> {
        sequence_nll(self.forward_encoded(g, h_e, y)?.logits, y)
    }

    /// Beam search over token sequences ending in end-of-sequence. After
    /// `max_len` tokens only end-of-sequence may follow; blank is never
    /// emitted.
    pub fn beam_search<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        beam_width: usize,
        max_len: usize,
    ) -> Result<Vec<LasSearchHyp>> {
        if beam_width == 0 {
            return Err(Error::InvalidArgument(
                "beam_width must be at least 1".into(),
            ));
        }
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let mem = self.memory(g, self.encode(g, x)?)?;
        let mut finished: Vec<LasSearchHyp> = Vec::new();
        let mut active = vec![Active {
            tokens: Vec::new(),
            score: 0.0,
            states: self.initial_states(g),
            rows: Vec::new(),
        }];
        while !active.is_empty() {
            let mut fresh: Vec<Active<'a>> = Vec::new();
            for a in &active {
                let prev = a.tokens.last().copied().unwrap_or(BLANK);
                let step = self.step(g, mem, prev, &a.states)?;
                let lp = step.logits.log_softmax(1)?.to_vec();
                finished.push(LasSearchHyp {
                    tokens: a.tokens.clone(),
                    score: a.score + lp[EOS],
                    decoder_states: a.rows.clone(),
                });
                if a.tokens.len() == max_len {
                    continue;
                }
                let row = step.h_d.to_vec();
                for (k, &l) in lp.iter().enumerate() {
                    if k == BLANK || k == EOS {
                        continue;
                    }
                    let mut tokens = a.tokens.clone();
                    tokens.push(k);
                    let mut rows = a.rows.clone();
                    rows.push(row.clone());
                    fresh.push(Active {
                        tokens,
                        score: a.score + l,
                        states: step.states.clone(),
                        rows,
                    });
                }
            }
            // finished and open hypotheses share the beam
            let mut pool: Vec<(bool, usize)> = (0..finished.len())
                .map(|i| (false, i))
                .chain((0..fresh.len()).map(|i| (true, i)))
                .collect();
            let key = |&(open, i): &(bool, usize)| {
                if open {
                    (fresh[i].score, &fresh[i].tokens)
                } else {
                    (finished[i].score, &finished[i].tokens)
                }
            };
            pool.sort_by(|a, b| {
                let (sa, ta) = key(a);
                let (sb, tb) = key(b);
                rank(sa, ta, sb, tb).then(a.0.cmp(&b.0))
            });
            pool.truncate(beam_width);
            let mut keep_done = vec![false; finished.len()];
            let mut keep_open = vec![false; fresh.len()];
            for (open, i) in pool {
                if open {
                    keep_open[i] = true;
                } else {
                    keep_done[i] = true;
                }
            }
            let mut i = 0;
            finished.retain(|_| (keep_done[i], i += 1).0);
            active = fresh
                .into_iter()
                .zip(keep_open)
                .filter_map(|(a, k)| k.then_some(a))
                .collect();
        }
        finished.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        Ok(finished)
    }

    pub fn beam_decode(
        &self,
        params: &ParamStore,
        x: &[Vec<f64>],
        beam_width: usize,
        max_len: usize,
    ) -> Result<NBest> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, params);
        let found = self.beam_search(g, x, beam_width, max_len)?;
        let mut hypotheses = Vec::with_capacity(found.len());
        for h in found {
            let tape = Tape::inference();
            let g = Graph::new(&tape, params);
            let exposure = self.expose(g, x, &h.tokens, Some(h.score), Some(h.decoder_states))?;
            hypotheses.push(exposure.hypothesis);
        }
        Ok(NBest {
            hypotheses,
            beam_width,
        })
    }

    /// Teacher-forced pass over `tokens` followed by end-of-sequence.
    /// `score` defaults to the exact `ln P(w, eos | x)`; `states` defaults to
    /// the recomputed decoder states.
    pub fn expose<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        tokens: &[usize],
        score: Option<f64>,
        states: Option<Vec<Vec<f64>>>,
    ) -> Result<AsrExposure<'a>> {
        self.expose_encoded(g, self.encode(g, x)?, tokens, score, states)
    }

    pub fn expose_encoded<'a>(
        &self,
        g: Graph<'a>,
        h_e: Var<'a>,
        tokens: &[usize],
        score: Option<f64>,
        states: Option<Vec<Vec<f64>>>,
    ) -> Result<AsrExposure<'a>> {
        let mut full = tokens.to_vec();
        full.push(EOS);
        let fwd = self.forward_encoded(g, h_e, &full)?;
        let log_prob = sequence_nll(fwd.logits, &full)?.neg();
        let u = tokens.len();
        let h_d = fwd.h_d.slice(0, 0, u)?;
        let posteriors = fwd.logits.slice(0, 0, u)?.softmax(1)?;
        let rows = h_d.value().rows();
        let hypothesis = Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: score.unwrap_or_else(|| log_prob.item()),
            token_posteriors: posteriors.value().rows(),
            lattice_transitions: None,
            selected_frames: None,
            decoder_states: Some(states.unwrap_or(rows)),
        };
        Ok(AsrExposure {
            kind: AsrKind::Las,
            h_e: fwd.h_e,
            h_p: None,
            h_j: None,
            h_d: Some(h_d),
            posteriors,
            log_prob,
            embedding: g.param(self.embedding.table),
            hypothesis,
        })
    }
}

fn sequence_nll<'a>(logits: Var<'a>, y: &[usize]) -> Result<Var<'a>> {
    let vocab = logits.shape()[1];
    let idx: Vec<usize> = y.iter().enumerate().map(|(i, &t)| i * vocab + t).collect();
    Ok(logits.log_softmax(1)?.gather(&idx)?.sum().neg())
}
