//! Transformer NLU over interface outputs: self-attention encoder, optional
//! cross-attention decoder over `h_I`, a per-token slot head and max-pooled
//! intent and domain heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::interfaces::{InterfaceOutput, InterfaceValue};
use crate::nn::{
    sinusoidal_positions, Embedding, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TnluConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub cross_layers: usize,
    pub head_hidden: usize,
    /// NLU token vocabulary.
    pub vocab_size: usize,
    pub num_tags: usize,
    pub num_intents: usize,
    pub num_domains: usize,
    /// Width of continuous `v`; `None` for token input.
    pub continuous_dim: Option<usize>,
    /// Width of `h_I`; `Some` adds the cross-attention decoder.
    pub memory_dim: Option<usize>,
}

impl Default for TnluConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            cross_layers: 2,
            head_hidden: 64,
            vocab_size: 0,
            num_tags: 0,
            num_intents: 0,
            num_domains: 0,
            continuous_dim: None,
            memory_dim: None,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct CrossLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TnluModel {
    pub config: TnluConfig,
    pub prefix: String,
    pub start: ParamId,
    pub embedding: Embedding,
    pub input_proj: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    cross: Vec<CrossLayer>,
    pub slot_head: Linear,
    pub intent_head: FeedForward,
    pub domain_head: FeedForward,
}

#[derive(Debug, Clone)]
pub struct NluPrediction<'a> {
    /// `U x |S|`
    pub slot_logits: Var<'a>,
    /// `|I|`
    pub intent_logits: Var<'a>,
    /// `|D|`
    pub domain_logits: Var<'a>,
    /// Final hidden states, start token first: `(U+1) x d`.
    pub states: Var<'a>,
    pub self_attention: Vec<Var<'a>>,
    pub cross_attention: Vec<Var<'a>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NluLabels {
    pub slots: Vec<usize>,
    pub intent: usize,
    pub domain: usize,
}

impl TnluModel {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: TnluConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = &config;
        if c.heads == 0 || !c.model_dim.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "nlu model_dim {} must split evenly over {} heads",
                c.model_dim, c.heads
            )));
        }
        if c.num_tags == 0 || c.num_intents == 0 || c.num_domains == 0 {
            return Err(Error::Config(
                "nlu needs at least one tag, intent and domain".into(),
            ));
        }
        let d = c.model_dim;
        let start = store.uniform(format!("{prefix}.start"), &[1, d], 0.5, rng)?;
        let embedding = Embedding::new(
            store,
            &format!("{prefix}.input.embedding"),
            c.vocab_size.max(1),
            d,
            rng,
        )?;
        let input_proj = match c.continuous_dim {
            Some(k) => Some(Linear::new(
                store,
                &format!("{prefix}.input.project"),
                k,
                d,
                true,
                rng,
            )?),
            None => None,
        };
        let mut encoder = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let n = format!("{prefix}.encoder.layer{l}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(
                    store,
                    &format!("{n}.attention"),
                    d,
                    d,
                    c.heads,
                    rng,
                )?,
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                ff: FeedForward::new(store, &format!("{n}.ff"), d, c.ff_dim, d, rng)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
            });
        }
        let mut cross = Vec::new();
        if let Some(m) = c.memory_dim {
            for l in 0..c.cross_layers {
                let n = format!("{prefix}.cross.layer{l}");
                cross.push(CrossLayer {
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{n}.attention"),
                        d,
                        d,
                        c.heads,
                        rng,
                    )?,
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                    cross: MultiHeadAttention::new(
                        store,
                        &format!("{n}.cross"),
                        d,
                        m,
                        c.heads,
                        rng,
                    )?,
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, c.ff_dim, d, rng)?,
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d)?,
                });
            }
        }
        let slot_head = Linear::new(
            store,
            &format!("{prefix}.slot_head"),
            d,
            c.num_tags,
            true,
            rng,
        )?;
        let intent_head = FeedForward::new(
            store,
            &format!("{prefix}.intent_head"),
            d,
            c.head_hidden,
            c.num_intents,
            rng,
        )?;
        let domain_head = FeedForward::new(
            store,
            &format!("{prefix}.domain_head"),
            d,
            c.head_hidden,
            c.num_domains,
            rng,
        )?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            start,
            embedding,
            input_proj,
            encoder,
            cross,
            slot_head,
            intent_head,
            domain_head,
        })
    }

    pub fn has_cross_decoder(&self) -> bool {
        self.config.memory_dim.is_some()
    }

    fn embed_input<'a>(&self, g: Graph<'a>, v: &InterfaceValue<'a>) -> Result<Var<'a>> {
        match v {
            InterfaceValue::Tokens(ids) => {
                if let Some(&token) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
                    return Err(Error::OutOfVocabulary {
                        token,
                        vocab: self.config.vocab_size,
                    });
                }
                self.embedding.forward(g, ids)
            }
            InterfaceValue::Continuous(x) => {
                let proj = self.input_proj.as_ref().ok_or_else(|| Error::Interface {
                    interface: "nlu input",
                    reason: "model was built for token input".into(),
                })?;
                let shape = x.shape();
                if shape.len() != 2 || shape[1] != proj.in_dim {
                    return Err(Error::ShapeMismatch {
                        op: "nlu input projection",
                        left: shape,
                        right: vec![0, proj.in_dim],
                    });
                }
                proj.forward(g, *x)
            }
        }
    }

    pub fn forward<'a>(&self, g: Graph<'a>, io: &InterfaceOutput<'a>) -> Result<NluPrediction<'a>> {
        match (&io.h_i, self.has_cross_decoder()) {
            (Some(_), false) => {
                return Err(Error::Interface {
                    interface: "audio_attention",
                    reason: "h_I supplied but the NLU has no cross-attention decoder".into(),
                })
            }
            (None, true) => {
                return Err(Error::Interface {
                    interface: "audio_attention",
                    reason: "the cross-attention decoder needs h_I".into(),
                })
            }
            _ => {}
        }
        let x = self.embed_input(g, &io.v)?;
        let n = x.shape()[0] + 1;
        let seq = g.tape.concat(&[g.param(self.start), x], 0)?;
        let mut h = seq.add(g.constant(sinusoidal_positions(n, self.config.model_dim)))?;
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &self.encoder {
            let (a, w) = layer.attn.forward(g, h, h)?;
            self_attention.extend(w);
            h = layer.norm1.forward(g, h.add(a)?)?;
            h = layer.norm2.forward(g, h.add(layer.ff.forward(g, h)?)?)?;
        }
        if let Some(memory) = io.h_i {
            let m = memory.shape();
            if m.len() != 2 || Some(m[1]) != self.config.memory_dim || m[0] == 0 {
                return Err(Error::ShapeMismatch {
                    op: "cross-attention memory",
                    left: m,
                    right: vec![1, self.config.memory_dim.unwrap_or(0)],
                });
            }
            let memory = memory.add(g.constant(sinusoidal_positions(m[0], m[1])))?;
            for layer in &self.cross {
                let (a, w) = layer.attn.forward(g, h, h)?;
                self_attention.extend(w);
                h = layer.norm1.forward(g, h.add(a)?)?;
                let (c, w) = layer.cross.forward(g, h, memory)?;
                cross_attention.extend(w);
                h = layer.norm2.forward(g, h.add(c)?)?;
                h = layer.norm3.forward(g, h.add(layer.ff.forward(g, h)?)?)?;
            }
        }
        let slot_logits = self.slot_logits(g, h.slice(0, 1, n)?)?;
        let (intent_logits, domain_logits) = self.pooled_logits(g, h)?;
        Ok(NluPrediction {
            slot_logits,
            intent_logits,
            domain_logits,
            states: h,
            self_attention,
            cross_attention,
        })
    }

    /// Row-wise slot head.
    pub fn slot_logits<'a>(&self, g: Graph<'a>, states: Var<'a>) -> Result<Var<'a>> {
        self.slot_head.forward(g, states)
    }

    /// Intent and domain logits from max-pooled states.
    pub fn pooled_logits<'a>(&self, g: Graph<'a>, states: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let d = self.config.model_dim;
        let pooled = states.max_pool_rows()?.reshape(&[1, d])?;
        let intent = self.intent_head.forward(g, pooled)?;
        let domain = self.domain_head.forward(g, pooled)?;
        Ok((
            intent.reshape(&[self.config.num_intents])?,
            domain.reshape(&[self.config.num_domains])?,
        ))
    }
}

/// Argmax with ties to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn nlu_predict(pred: &NluPrediction<'_>) -> NluLabels {
    let tags = pred.slot_logits.shape()[1];
    let slots = pred
        .slot_logits
        .with_data(|d| d.chunks(tags.max(1)).map(argmax).collect());
    NluLabels {
        slots,
        intent: pred.intent_logits.with_data(argmax),
        domain: pred.domain_logits.with_data(argmax),
    }
}

/// The same pooled heads applied to a fixed state matrix; used to probe the
/// pooling path in isolation.
pub fn pooled_from_states(
    model: &TnluModel,
    params: &ParamStore,
    states: Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = crate::autograd::Tape::inference();
    let g = Graph::new(&tape, params);
    let (i, d) = model.pooled_logits(g, g.constant(states))?;
    Ok((i.to_vec(), d.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check_params, Tape};
    use crate::interfaces::InterfaceOutput;
    use rand::{Rng, SeedableRng};

    fn config(continuous: Option<usize>, memory: Option<usize>) -> TnluConfig {
        TnluConfig {
            model_dim: 4,
            layers: 1,
            heads: 2,
            ff_dim: 6,
            cross_layers: 1,
            head_hidden: 5,
            vocab_size: 7,
            num_tags: 4,
            num_intents: 3,
            num_domains: 2,
            continuous_dim: continuous,
            memory_dim: memory,
        }
    }

    fn build(c: TnluConfig, seed: u64) -> (ParamStore, TnluModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TnluModel::new(&mut store, "nlu", c, &mut rng).unwrap();
        (store, m)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tokens(ids: &[usize]) -> InterfaceOutput<'static> {
        InterfaceOutput {
            v: InterfaceValue::Tokens(ids.to_vec()),
            h_i: None,
            differentiable: false,
        }
    }

    #[test]
    fn empty_input_still_predicts_intent() {
        let (store, m) = build(config(None, None), 1);
        let tape = Tape::new();
        let pred = m.forward(Graph::new(&tape, &store), &tokens(&[])).unwrap();
        assert_eq!(pred.slot_logits.shape(), vec![0, 4]);
        assert_eq!(pred.intent_logits.shape(), vec![3]);
        let labels = nlu_predict(&pred);
        assert!(labels.slots.is_empty());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, m) = build(config(None, Some(3)), 2);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let io = InterfaceOutput {
            v: InterfaceValue::Tokens(vec![3, 4, 5]),
            h_i: Some(g.constant(random(5, 3, 1))),
            differentiable: true,
        };
        let pred = m.forward(g, &io).unwrap();
        assert!(!pred.cross_attention.is_empty());
        for w in pred.self_attention.iter().chain(&pred.cross_attention) {
            let cols = w.shape()[1];
            for row in w.to_vec().chunks(cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_mismatch_errors() {
        let (store, m) = build(config(None, None), 3);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let io = InterfaceOutput {
            v: InterfaceValue::Tokens(vec![3]),
            h_i: Some(g.constant(random(2, 3, 1))),
            differentiable: true,
        };
        assert!(matches!(m.forward(g, &io), Err(Error::Interface { .. })));
        let (store, m) = build(config(Some(3), None), 3);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let io = InterfaceOutput {
            v: InterfaceValue::Continuous(g.constant(random(2, 5, 1))),
            h_i: None,
            differentiable: true,
        };
        assert!(matches!(
            m.forward(g, &io),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn permuting_memory_changes_cross_attention() {
        let (store, m) = build(config(None, Some(3)), 4);
        let mem = random(4, 3, 8);
        let mut rows = mem.rows();
        rows.swap(0, 3);
        let permuted = Tensor::from_rows(&rows, 3).unwrap();
        let run = |t: Tensor| {
            let tape = Tape::inference();
            let g = Graph::new(&tape, &store);
            let io = InterfaceOutput {
                v: InterfaceValue::Tokens(vec![3, 4]),
                h_i: Some(g.constant(t)),
                differentiable: true,
            };
            m.forward(g, &io).unwrap().states.to_vec()
        };
        let a = run(mem.clone());
        let b = run(permuted);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        assert_eq!(a, run(mem));
    }

    #[test]
    fn slot_head_commutes_with_permutation() {
        let (store, m) = build(config(None, None), 5);
        let states = random(4, 4, 3);
        let mut rows = states.rows();
        rows.rotate_left(1);
        let tape = Tape::inference();
        let g = Graph::new(&tape, &store);
        let a = m.slot_logits(g, g.constant(states)).unwrap().value().rows();
        let b = m
            .slot_logits(g, g.constant(Tensor::from_rows(&rows, 4).unwrap()))
            .unwrap()
            .value()
            .rows();
        let mut a_rot = a.clone();
        a_rot.rotate_left(1);
        assert_eq!(a_rot, b);
    }

    #[test]
    fn duplicating_the_max_row_keeps_pooled_logits() {
        let (store, m) = build(config(None, None), 6);
        let states = random(3, 4, 4);
        let mut rows = states.rows();
        let base = pooled_from_states(&m, &store, states.clone()).unwrap();
        for r in 0..3 {
            rows.push(rows[r].clone());
        }
        let dup = pooled_from_states(&m, &store, Tensor::from_rows(&rows, 4).unwrap()).unwrap();
        assert_eq!(base, dup);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[2.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let xs: Vec<f64> = (0..5).map(|_| rng.gen_range(0..3) as f64).collect();
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(argmax(&xs), xs.iter().position(|&x| x == m).unwrap());
        }
    }

    fn ce_loss<'a>(
        pred: &NluPrediction<'a>,
        slots: &[usize],
        intent: usize,
        domain: usize,
    ) -> Result<Var<'a>> {
        let tags = pred.slot_logits.shape()[1];
        let idx: Vec<usize> = slots
            .iter()
            .enumerate()
            .map(|(i, &s)| i * tags + s)
            .collect();
        let s = pred.slot_logits.log_softmax(1)?.gather(&idx)?.sum();
        let i = pred.intent_logits.log_softmax(0)?.gather(&[intent])?.sum();
        let d = pred.domain_logits.log_softmax(0)?.gather(&[domain])?.sum();
        Ok(s.add(i)?.add(d)?.neg())
    }

    #[test]
    fn gradients_match_finite_differences_for_both_adapters() {
        let (mut store, m) = build(config(None, Some(3)), 7);
        let mem = random(3, 3, 2);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check_params(
            &mut store,
            &ids,
            |p, tape| {
                let g = Graph::new(tape, p);
                let io = InterfaceOutput {
                    v: InterfaceValue::Tokens(vec![3, 6]),
                    h_i: Some(g.constant(mem.clone())),
                    differentiable: true,
                };
                ce_loss(&m.forward(g, &io)?, &[1, 2], 2, 1)
            },
            1e-5,
            1e-3,
            60,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());

        let (mut store, m) = build(config(Some(3), None), 8);
        let v = random(3, 3, 5);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check_params(
            &mut store,
            &ids,
            |p, tape| {
                let g = Graph::new(tape, p);
                let io = InterfaceOutput {
                    v: InterfaceValue::Continuous(g.constant(v.clone())),
                    h_i: None,
                    differentiable: true,
                };
                ce_loss(&m.forward(g, &io)?, &[0, 3, 1], 0, 1)
            },
            1e-5,
            1e-3,
            60,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }
}
