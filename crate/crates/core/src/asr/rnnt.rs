use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_tokens, features_tensor, log_add, rank, AsrExposure, AsrKind, Hypothesis, NBest,
};
use crate::autograd::{ParamStore, Tape, Var};
use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Graph, Linear, Lstm, LstmState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnntConfig {
    pub feature_dim: usize,
    /// Output vocabulary including blank.
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub embed_dim: usize,
    pub pred_layers: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Label emissions allowed per frame during beam search.
    pub max_symbols_per_frame: usize,
}

impl Default for RnntConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 0,
            encoder_layers: 2,
            encoder_dim: 64,
            embed_dim: 32,
            pred_layers: 1,
            pred_dim: 64,
            joint_dim: 64,
            max_symbols_per_frame: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnntModel {
    pub config: RnntConfig,
    pub prefix: String,
    pub encoder: Vec<Lstm>,
    pub embedding: Embedding,
    pub prediction: Vec<Lstm>,
    pub enc_proj: Linear,
    pub pred_proj: Linear,
    pub output: Linear,
}

/// Tape values of one transducer pass over a fixed label sequence.
#[derive(Debug, Clone, Copy)]
pub struct RnntForward<'a> {
    pub h_e: Var<'a>,
    pub h_p: Var<'a>,
    /// `T x (U+1) x |J|`
    pub h_j: Var<'a>,
    /// `T x (U+1) x |V|`
    pub logits: Var<'a>,
}

/// Partial hypothesis tracked by the beam search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHyp {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub frames: Vec<usize>,
}

#[derive(Clone)]
struct PredState<'a> {
    proj: Var<'a>,
    states: Vec<LstmState<'a>>,
}

impl RnntModel {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: RnntConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.vocab_size < 2 || config.encoder_layers == 0 || config.pred_layers == 0 {
            return Err(Error::Config(
                "rnnt needs a vocabulary beyond blank and at least one encoder and prediction layer".into(),
            ));
        }
        let c = &config;
        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for l in 0..c.encoder_layers {
            let input = if l == 0 { c.feature_dim } else { c.encoder_dim };
            encoder.push(Lstm::new(
                store,
                &format!("{prefix}.encoder.layer{l}"),
                input,
                c.encoder_dim,
                rng,
            )?);
        }
        let embedding = Embedding::new(
            store,
            &format!("{prefix}.prediction.embedding"),
            c.vocab_size,
            c.embed_dim,
            rng,
        )?;
        let mut prediction = Vec::with_capacity(c.pred_layers);
        for l in 0..c.pred_layers {
            let input = if l == 0 { c.embed_dim } else { c.pred_dim };
            prediction.push(Lstm::new(
                store,
                &format!("{prefix}.prediction.layer{l}"),
                input,
                c.pred_dim,
                rng,
            )?);
        }
        let enc_proj = Linear::new(
            store,
            &format!("{prefix}.joint.encoder"),
            c.encoder_dim,
            c.joint_dim,
            true,
            rng,
        )?;
        let pred_proj = Linear::new(
            store,
            &format!("{prefix}.joint.prediction"),
            c.pred_dim,
            c.joint_dim,
            false,
            rng,
        )?;
        let output = Linear::new(
            store,
            &format!("{prefix}.joint.output"),
            c.joint_dim,
            c.vocab_size,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            encoder,
            embedding,
            prediction,
            enc_proj,
            pred_proj,
            output,
        })
    }

    fn check_labels(&self, y: &[usize]) -> Result<()> {
        check_tokens(y, self.config.vocab_size)?;
        if y.contains(&BLANK) {
            return Err(Error::InvalidArgument(
                "blank cannot appear in a label sequence".into(),
            ));
        }
        Ok(())
    }

    pub fn encode<'a>(&self, g: Graph<'a>, x: &[Vec<f64>]) -> Result<Var<'a>> {
        let mut h = g.constant(features_tensor(x, self.config.feature_dim)?);
        for layer in &self.encoder {
            h = layer.forward(g, h, false)?;
        }
        Ok(h)
    }

    /// `(U+1) x |P|` prediction outputs for the prefixes of `y`.
    pub fn predict<'a>(&self, g: Graph<'a>, y: &[usize]) -> Result<Var<'a>> {
        let inputs: Vec<usize> = std::iter::once(BLANK).chain(y.iter().copied()).collect();
        let mut h = self.embedding.forward(g, &inputs)?;
        for layer in &self.prediction {
            h = layer.forward(g, h, false)?;
        }
        Ok(h)
    }

    pub fn forward<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        y: &[usize],
    ) -> Result<RnntForward<'a>> {
        self.check_labels(y)?;
        if x.is_empty() {
            return Err(Error::EmptyInput("audio frames"));
        }
        self.forward_encoded(g, self.encode(g, x)?, y)
    }

    /// Like [`forward`](Self::forward), reusing encoder output `h_e`.
    pub fn forward_encoded<'a>(
        &self,
        g: Graph<'a>,
        h_e: Var<'a>,
        y: &[usize],
    ) -> Result<RnntForward<'a>> {
        self.check_labels(y)?;
        let h_p = self.predict(g, y)?;
        let enc = self.enc_proj.forward(g, h_e)?;
        let pred = self.pred_proj.forward(g, h_p)?;
        let h_j = enc.pair_sum(pred)?.tanh();
        let (t, u1, j) = (h_e.shape()[0], y.len() + 1, self.config.joint_dim);
        let logits = self
            .output
            .forward(g, h_j.reshape(&[t * u1, j])?)?
            .reshape(&[t, u1, self.config.vocab_size])?;
        Ok(RnntForward {
            h_e,
            h_p,
            h_j,
            logits,
        })
    }

    fn pred_step<'a>(
        &self,
        g: Graph<'a>,
        token: usize,
        prev: Option<&PredState<'a>>,
    ) -> Result<PredState<'a>> {
        let mut input = self.embedding.forward(g, &[token])?;
        let mut states = Vec::with_capacity(self.prediction.len());
        for (l, layer) in self.prediction.iter().enumerate() {
            let state = match prev {
                Some(p) => p.states[l],
                None => LstmState::zero(g, layer.hidden),
            };
            let next = layer.step(g, layer.project(g, input)?, state)?;
            input = next.h;
            states.push(next);
        }
        Ok(PredState {
            proj: self.pred_proj.forward(g, input)?,
            states,
        })
    }

    fn joint_log_probs<'a>(&self, g: Graph<'a>, enc_t: Var<'a>, pred: Var<'a>) -> Result<Vec<f64>> {
        let h = enc_t.add(pred)?.tanh();
        Ok(self.output.forward(g, h)?.log_softmax(1)?.to_vec())
    }

    /// Frame-synchronous beam search. At every frame, hypotheses ending in a
    /// blank (moving to the next frame) and hypotheses extended by a label
    /// (staying on the frame) compete for the same `beam_width` slots;
    /// blank-extended hypotheses with equal tokens are merged in log space.
    pub fn beam_search<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        beam_width: usize,
    ) -> Result<Vec<SearchHyp>> {
        if beam_width == 0 {
            return Err(Error::InvalidArgument(
                "beam_width must be at least 1".into(),
            ));
        }
        if x.is_empty() {
            return Err(Error::EmptyInput("audio frames"));
        }
        let enc = self.enc_proj.forward(g, self.encode(g, x)?)?;
        let vocab = self.config.vocab_size;
        let max_sym = self.config.max_symbols_per_frame;
        let mut cache: HashMap<Vec<usize>, PredState<'a>> = HashMap::new();
        cache.insert(Vec::new(), self.pred_step(g, BLANK, None)?);
        let mut beam = vec![SearchHyp {
            tokens: Vec::new(),
            score: 0.0,
            frames: Vec::new(),
        }];
        for t in 0..x.len() {
            let enc_t = enc.slice(0, t, t + 1)?;
            let mut done: Vec<SearchHyp> = Vec::new();
            let mut active = std::mem::take(&mut beam);
            for s in 0..=max_sym {
                let mut fresh = Vec::new();
                for h in &active {
                    let lp = self.joint_log_probs(g, enc_t, cache[&h.tokens].proj)?;
                    let blank_score = h.score + lp[BLANK];
                    match done.iter_mut().find(|d| d.tokens == h.tokens) {
                        Some(d) => {
                            if blank_score > d.score {
                                d.frames = h.frames.clone();
                            }
                            d.score = log_add(d.score, blank_score);
                        }
                        None => done.push(SearchHyp {
                            tokens: h.tokens.clone(),
                            score: blank_score,
                            frames: h.frames.clone(),
                        }),
                    }
                    if s < max_sym {
                        for (k, &l) in lp.iter().enumerate().skip(1) {
                            let mut tokens = h.tokens.clone();
                            tokens.push(k);
                            let mut frames = h.frames.clone();
                            frames.push(t);
                            fresh.push(SearchHyp {
                                tokens,
                                score: h.score + l,
                                frames,
                            });
                        }
                    }
                }
                prune(&mut done, &mut fresh, beam_width);
                for h in &fresh {
                    if !cache.contains_key(&h.tokens) {
                        let (last, parent) = h.tokens.split_last().expect("label-extended");
                        let state = self.pred_step(g, *last, Some(&cache[parent]))?;
                        cache.insert(h.tokens.clone(), state);
                    }
                }
                active = fresh;
                if active.is_empty() {
                    break;
                }
            }
            debug_assert!(vocab > 1);
            beam = done;
        }
        beam.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        Ok(beam)
    }

    pub fn beam_decode(
        &self,
        params: &ParamStore,
        x: &[Vec<f64>],
        beam_width: usize,
    ) -> Result<NBest> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, params);
        let found = self.beam_search(g, x, beam_width)?;
        let mut hypotheses = Vec::with_capacity(found.len());
        for h in found {
            let tape = Tape::inference();
            let g = Graph::new(&tape, params);
            let exposure = self.expose(g, x, &h.tokens, Some(h.score), Some(h.frames))?;
            hypotheses.push(exposure.hypothesis);
        }
        Ok(NBest {
            hypotheses,
            beam_width,
        })
    }

    /// Rescoring pass over a fixed hypothesis. `score` defaults to the exact
    /// `ln P(w | x)` summed over all alignments.
    pub fn expose<'a>(
        &self,
        g: Graph<'a>,
        x: &[Vec<f64>],
        tokens: &[usize],
        score: Option<f64>,
        frames: Option<Vec<usize>>,
    ) -> Result<AsrExposure<'a>> {
        if x.is_empty() {
            return Err(Error::EmptyInput("audio frames"));
        }
        self.expose_encoded(g, self.encode(g, x)?, tokens, score, frames)
    }

    pub fn expose_encoded<'a>(
        &self,
        g: Graph<'a>,
        h_e: Var<'a>,
        tokens: &[usize],
        score: Option<f64>,
        frames: Option<Vec<usize>>,
    ) -> Result<AsrExposure<'a>> {
        let fwd = self.forward_encoded(g, h_e, tokens)?;
        let log_prob = rnnt_loss(fwd.logits, tokens)?.neg();
        let (t_len, u1, vocab) = (h_e.shape()[0], tokens.len() + 1, self.config.vocab_size);
        let probs = fwd.logits.reshape(&[t_len * u1, vocab])?.softmax(1)?;
        let transitions: Vec<Vec<f64>> = probs.with_data(|p| {
            tokens
                .iter()
                .enumerate()
                .map(|(u, &w)| (0..t_len).map(|t| p[(t * u1 + u) * vocab + w]).collect())
                .collect()
        });
        let rows: Vec<usize> = max_transition_frames(&transitions)
            .iter()
            .enumerate()
            .map(|(u, &t)| t * u1 + u)
            .collect();
        let posteriors = probs.index_select(&rows)?;
        let token_posteriors = posteriors.value().rows();
        let hypothesis = Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: score.unwrap_or_else(|| log_prob.item()),
            token_posteriors,
            lattice_transitions: Some(transitions),
            selected_frames: frames,
            decoder_states: None,
        };
        Ok(AsrExposure {
            kind: AsrKind::Rnnt,
            h_e: fwd.h_e,
            h_p: Some(fwd.h_p),
            h_j: Some(fwd.h_j),
            h_d: None,
            posteriors,
            log_prob,
            embedding: g.param(self.embedding.table),
            hypothesis,
        })
    }
}

fn prune(done: &mut Vec<SearchHyp>, fresh: &mut Vec<SearchHyp>, width: usize) {
    if done.len() + fresh.len() <= width {
        return;
    }
    let mut all: Vec<(bool, usize)> = (0..done.len())
        .map(|i| (false, i))
        .chain((0..fresh.len()).map(|i| (true, i)))
        .collect();
    let pick = |&(f, i): &(bool, usize)| if f { &fresh[i] } else { &done[i] };
    all.sort_by(|a, b| {
        let (ha, hb) = (pick(a), pick(b));
        rank(ha.score, &ha.tokens, hb.score, &hb.tokens).then(a.0.cmp(&b.0))
    });
    let mut keep_done = vec![false; done.len()];
    let mut keep_fresh = vec![false; fresh.len()];
    for &(f, i) in all.iter().take(width) {
        if f {
            keep_fresh[i] = true;
        } else {
            keep_done[i] = true;
        }
    }
    let mut i = 0;
    done.retain(|_| (keep_done[i], i += 1).0);
    let mut i = 0;
    fresh.retain(|_| (keep_fresh[i], i += 1).0);
}

/// For each token, the frame with the largest label transition probability;
/// ties go to the earliest frame.
pub fn max_transition_frames(transitions: &[Vec<f64>]) -> Vec<usize> {
    transitions
        .iter()
        .map(|row| {
            let mut best = 0;
            for (t, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// `-ln P(y | x)` and its gradient w.r.t. the `T x (U+1) x |V|` log-probs,
/// by the transducer forward-backward recursion.
pub fn rnnt_loss_value(
    logp: &[f64],
    t_len: usize,
    y: &[usize],
    vocab: usize,
) -> Result<(f64, Vec<f64>)> {
    let u1 = y.len() + 1;
    if t_len == 0 {
        return Err(Error::EmptyInput("transducer loss over zero frames"));
    }
    if logp.len() != t_len * u1 * vocab {
        return Err(Error::ShapeMismatch {
            op: "rnnt_loss",
            left: vec![logp.len()],
            right: vec![t_len, u1, vocab],
        });
    }
    let at = |t: usize, u: usize, k: usize| logp[(t * u1 + u) * vocab + k];
    let blank = |t: usize, u: usize| at(t, u, BLANK);
    let label = |t: usize, u: usize| at(t, u, y[u]);
    let idx = |t: usize, u: usize| t * u1 + u;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    for t in 0..t_len {
        for u in 0..u1 {
            alpha[idx(t, u)] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_left = if t > 0 {
                    alpha[idx(t - 1, u)] + blank(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let from_below = if u > 0 {
                    alpha[idx(t, u - 1)] + label(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                log_add(from_left, from_below)
            };
        }
    }
    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[idx(t, u)] = if t == t_len - 1 && u == u1 - 1 {
                blank(t, u)
            } else {
                let right = if t + 1 < t_len {
                    beta[idx(t + 1, u)] + blank(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                let up = if u + 1 < u1 {
                    beta[idx(t, u + 1)] + label(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                log_add(right, up)
            };
        }
    }
    let total = beta[0];
    let mut grad = vec![0.0; logp.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[idx(t, u)];
            let after_blank = if t + 1 < t_len {
                beta[idx(t + 1, u)]
            } else if u == u1 - 1 {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[(t * u1 + u) * vocab + BLANK] = -(a + blank(t, u) + after_blank - total).exp();
            if u + 1 < u1 {
                grad[(t * u1 + u) * vocab + y[u]] -=
                    (a + label(t, u) + beta[idx(t, u + 1)] - total).exp();
            }
        }
    }
    Ok((-total, grad))
}

/// `-ln P(y | x)` summed over every monotone alignment of the lattice,
/// recorded on the tape. `logits` is `T x (U+1) x |V|`.
pub fn rnnt_loss<'a>(logits: Var<'a>, y: &[usize]) -> Result<Var<'a>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[1] != y.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "rnnt_loss",
            left: shape,
            right: vec![0, y.len() + 1, 0],
        });
    }
    if shape[0] == 0 {
        return Err(Error::EmptyInput("transducer loss over zero frames"));
    }
    check_tokens(y, shape[2])?;
    let logp = logits.log_softmax(2)?;
    let (value, grad) = logp.with_data(|d| rnnt_loss_value(d, shape[0], y, shape[2]))?;
    logp.tape().precomputed_scalar(logp, value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, grad_check_params, Tensor};
    use rand::{Rng, SeedableRng};

    /// Sum over every lattice path, built one move at a time.
    fn brute_force(logp: &[f64], t_len: usize, y: &[usize], vocab: usize) -> f64 {
        let u1 = y.len() + 1;
        fn walk(
            t: usize,
            u: usize,
            acc: f64,
            out: &mut Vec<f64>,
            c: &dyn Fn(usize, usize, usize) -> f64,
            t_len: usize,
            y: &[usize],
        ) {
            if t == t_len - 1 && u == y.len() {
                out.push(acc + c(t, u, BLANK));
                return;
            }
            if t + 1 < t_len {
                walk(t + 1, u, acc + c(t, u, BLANK), out, c, t_len, y);
            }
            if u < y.len() {
                walk(t, u + 1, acc + c(t, u, y[u]), out, c, t_len, y);
            }
        }
        let c = |t: usize, u: usize, k: usize| logp[(t * u1 + u) * vocab + k];
        let mut paths = Vec::new();
        walk(0, 0, 0.0, &mut paths, &c, t_len, y);
        -paths.iter().map(|p| p.exp()).sum::<f64>().ln()
    }

    fn log_softmax_rows(x: &[f64], vocab: usize) -> Vec<f64> {
        x.chunks(vocab)
            .flat_map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                r.iter().map(move |v| v - z).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn single_blank_path() {
        let logp = log_softmax_rows(&[0.3, -1.0, 2.0], 3);
        let (loss, _) = rnnt_loss_value(&logp, 1, &[], 3).unwrap();
        assert!((loss + logp[0]).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_frames_one_label() {
        for k in [2usize, 3, 5] {
            let logp = vec![-(k as f64).ln(); 2 * 2 * k];
            let (loss, _) = rnnt_loss_value(&logp, 2, &[1], k).unwrap();
            // two alignments, each with three emissions
            let expect = -(2.0 / (k as f64).powi(3)).ln();
            assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        }
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t_len = rng.gen_range(1..=4);
            let vocab = rng.gen_range(2..=4);
            let u = rng.gen_range(0..=3);
            let y: Vec<usize> = (0..u).map(|_| rng.gen_range(1..vocab)).collect();
            let raw: Vec<f64> = (0..t_len * (u + 1) * vocab)
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect();
            let logp = log_softmax_rows(&raw, vocab);
            let (loss, _) = rnnt_loss_value(&logp, t_len, &y, vocab).unwrap();
            let oracle = brute_force(&logp, t_len, &y, vocab);
            assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
        }
    }

    #[test]
    fn zero_frames_is_an_error() {
        assert!(rnnt_loss_value(&[], 0, &[1], 3).is_err());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (t_len, y) in [
            (3usize, vec![1usize, 2]),
            (2, vec![2]),
            (1, vec![]),
            (3, vec![1, 1]),
        ] {
            let vocab = 3;
            let u1 = y.len() + 1;
            let data: Vec<f64> = (0..t_len * u1 * vocab)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let point = Tensor::new(vec![t_len, u1, vocab], data).unwrap();
            let report = grad_check(|_, x| rnnt_loss(x, &y), &point, 1e-5, 1e-3).unwrap();
            assert!(report.passed, "{:?}", report.worst());
        }
    }

    fn tiny(vocab: usize, seed: u64) -> (ParamStore, RnntModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = RnntConfig {
            feature_dim: 3,
            vocab_size: vocab,
            encoder_layers: 1,
            encoder_dim: 4,
            embed_dim: 3,
            pred_layers: 1,
            pred_dim: 4,
            joint_dim: 5,
            max_symbols_per_frame: 2,
        };
        let model = RnntModel::new(&mut store, "rnnt", config, &mut rng).unwrap();
        (store, model)
    }

    fn audio(t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let (store, model) = tiny(4, 1);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let fwd = model.forward(g, &audio(1, 2), &[]).unwrap();
        assert_eq!(fwd.h_j.shape(), vec![1, 1, 5]);
        let fwd = model.forward(g, &audio(3, 2), &[1, 3]).unwrap();
        assert_eq!(fwd.logits.shape(), vec![3, 3, 4]);
        for row in fwd.logits.softmax(2).unwrap().to_vec().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            model.forward(g, &audio(2, 2), &[7]),
            Err(Error::OutOfVocabulary { token: 7, .. })
        ));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let (mut store, model) = tiny(4, 3);
        let x = audio(3, 4);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check_params(
            &mut store,
            &ids,
            |p, tape| {
                let g = Graph::new(tape, p);
                let fwd = model.forward(g, &x, &[2, 1])?;
                rnnt_loss(fwd.logits, &[2, 1])
            },
            1e-5,
            1e-3,
            400,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }

    /// Every sequence reachable with at most `cap` labels per frame, with its
    /// total probability.
    fn exhaustive(
        store: &ParamStore,
        model: &RnntModel,
        x: &[Vec<f64>],
        cap: usize,
    ) -> Vec<(Vec<usize>, f64)> {
        let vocab = model.config.vocab_size;
        let mut sums: HashMap<Vec<usize>, f64> = HashMap::new();
        // depth-first over (frame, labels emitted on this frame, prefix)
        let mut stack = vec![(0usize, 0usize, Vec::<usize>::new(), 0.0f64)];
        while let Some((t, emitted, prefix, lp)) = stack.pop() {
            let tape = Tape::inference();
            let g = Graph::new(&tape, store);
            let fwd = model.forward(g, x, &prefix).unwrap();
            let u1 = prefix.len() + 1;
            let logp = fwd.logits.log_softmax(2).unwrap().to_vec();
            let row = &logp[(t * u1 + prefix.len()) * vocab..(t * u1 + u1) * vocab];
            let after_blank = lp + row[BLANK];
            if t + 1 == x.len() {
                let e = sums.entry(prefix.clone()).or_insert(f64::NEG_INFINITY);
                *e = log_add(*e, after_blank);
            } else {
                stack.push((t + 1, 0, prefix.clone(), after_blank));
            }
            if emitted < cap {
                for k in 1..vocab {
                    let mut p = prefix.clone();
                    p.push(k);
                    stack.push((t, emitted + 1, p, lp + row[k]));
                }
            }
        }
        let mut out: Vec<_> = sums.into_iter().collect();
        out.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        out
    }

    #[test]
    fn wide_beam_finds_map_sequence() {
        for seed in 0..4 {
            let (store, model) = tiny(3, 10 + seed);
            let x = audio(3, 20 + seed);
            let oracle = exhaustive(&store, &model, &x, 2);
            let nbest = model.beam_decode(&store, &x, 10_000).unwrap();
            let best = nbest.best().unwrap();
            assert_eq!(best.tokens, oracle[0].0);
            assert!((best.log_prob - oracle[0].1).abs() < 1e-9);
            assert_eq!(nbest.hypotheses.len(), oracle.len());
        }
    }

    #[test]
    fn wide_beam_is_ordered_and_deterministic() {
        let (store, model) = tiny(4, 7);
        let x = audio(4, 8);
        let wide = model.beam_decode(&store, &x, 4).unwrap();
        assert!(wide.hypotheses.len() <= 4);
        assert_eq!(wide, model.beam_decode(&store, &x, 4).unwrap());
        for w in wide.hypotheses.windows(2) {
            assert!(rank(w[0].log_prob, &w[0].tokens, w[1].log_prob, &w[1].tokens).is_lt());
        }
        for h in &wide.hypotheses {
            assert!(h.log_prob <= 0.0);
            assert_eq!(h.token_posteriors.len(), h.tokens.len());
            for row in &h.token_posteriors {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let frames = h.selected_frames.as_ref().unwrap();
            assert_eq!(frames.len(), h.tokens.len());
            assert!(frames.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn greedy_follows_argmax() {
        let (store, model) = tiny(4, 9);
        let x = audio(4, 3);
        let tape = Tape::inference();
        let g = Graph::new(&tape, &store);
        let enc = model
            .enc_proj
            .forward(g, model.encode(g, &x).unwrap())
            .unwrap();
        let mut tokens: Vec<usize> = Vec::new();
        let mut t = 0;
        let mut emitted = 0;
        while t < x.len() {
            let pred = model
                .pred_proj
                .forward(g, model.predict(g, &tokens).unwrap())
                .unwrap();
            let last = pred.slice(0, tokens.len(), tokens.len() + 1).unwrap();
            let lp = model
                .joint_log_probs(g, enc.slice(0, t, t + 1).unwrap(), last)
                .unwrap();
            let mut best = 0;
            if emitted < model.config.max_symbols_per_frame {
                for k in 1..lp.len() {
                    if lp[k] > lp[best] {
                        best = k;
                    }
                }
            }
            if best == BLANK {
                t += 1;
                emitted = 0;
            } else {
                tokens.push(best);
                emitted += 1;
            }
        }
        let nbest = model.beam_decode(&store, &x, 1).unwrap();
        assert_eq!(nbest.hypotheses[0].tokens, tokens);
    }

    #[test]
    fn blank_heavy_model_decodes_empty() {
        let (mut store, model) = tiny(4, 2);
        let bias = model.output.bias.unwrap();
        store.get_mut(bias).data_mut()[BLANK] = 50.0;
        let nbest = model.beam_decode(&store, &audio(3, 1), 4).unwrap();
        assert!(nbest.best().unwrap().tokens.is_empty());
    }

    #[test]
    fn empty_audio_is_rejected() {
        let (store, model) = tiny(4, 2);
        assert!(matches!(
            model.beam_decode(&store, &[], 2),
            Err(Error::EmptyInput(_))
        ));
    }
}
