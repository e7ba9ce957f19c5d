//! Layer building blocks shared by the ASR and NLU models.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// A tape paired with the parameter store it reads from.
#[derive(Clone, Copy)]
pub struct Graph<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Self { tape, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'a> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.tape.constant(t)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'a> {
        self.tape.zeros(shape)
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.uniform(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            xavier(in_dim, out_dim),
            rng,
        )?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x: n x in_dim` to `n x out_dim`.
    pub fn forward<'a>(&self, g: Graph<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let y = x.matmul(g.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = store.uniform(
            format!("{name}.table"),
            &[vocab, dim],
            3f64.sqrt() / (dim as f64).sqrt(),
            rng,
        )?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward<'a>(&self, g: Graph<'a>, ids: &[usize]) -> Result<Var<'a>> {
        g.param(self.table).index_select(ids)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'a> {
    pub h: Var<'a>,
    pub c: Var<'a>,
}

impl<'a> LstmState<'a> {
    pub fn zero(g: Graph<'a>, hidden: usize) -> Self {
        Self {
            h: g.zeros(&[1, hidden]),
            c: g.zeros(&[1, hidden]),
        }
    }
}

/// Single-direction LSTM layer, unrolled on the tape one step at a time.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let input_weight =
            store.uniform(format!("{name}.wx"), &[input_dim, 4 * hidden], bound, rng)?;
        let hidden_weight =
            store.uniform(format!("{name}.wh"), &[hidden, 4 * hidden], bound, rng)?;
        // gate order i, f, g, o; forget gate starts open
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.insert(format!("{name}.b"), Tensor::new(vec![4 * hidden], b)?)?;
        Ok(Self {
            input_weight,
            hidden_weight,
            bias,
            input_dim,
            hidden,
        })
    }

    /// Input projection `x W_x + b` for every row of `x`.
    pub fn project<'a>(&self, g: Graph<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.matmul(g.param(self.input_weight))?
            .add(g.param(self.bias))
    }

    /// One recurrence step given the projected input row (`1 x 4h`).
    pub fn step<'a>(
        &self,
        g: Graph<'a>,
        projected: Var<'a>,
        state: LstmState<'a>,
    ) -> Result<LstmState<'a>> {
        let h = self.hidden;
        let z = projected.add(state.h.matmul(g.param(self.hidden_weight))?)?;
        let i = z.slice(1, 0, h)?.sigmoid();
        let f = z.slice(1, h, 2 * h)?.sigmoid();
        let cand = z.slice(1, 2 * h, 3 * h)?.tanh();
        let o = z.slice(1, 3 * h, 4 * h)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(cand)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { h, c })
    }

    /// Runs over all rows of `x: T x input_dim`, returning `T x hidden`.
    /// With `reverse`, the recurrence runs from the last row to the first and
    /// outputs are returned in the original row order.
    pub fn forward<'a>(&self, g: Graph<'a>, x: Var<'a>, reverse: bool) -> Result<Var<'a>> {
        let steps = x.shape()[0];
        if steps == 0 {
            return Ok(g.zeros(&[0, self.hidden]));
        }
        let proj = self.project(g, x)?;
        let mut state = LstmState::zero(g, self.hidden);
        let mut outs = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            state = self.step(g, proj.slice(0, t, t + 1)?, state)?;
            outs[t] = Some(state.h);
        }
        let outs: Vec<Var<'a>> = outs
            .into_iter()
            .map(|o| o.expect("every step visited"))
            .collect();
        g.tape.concat(&outs, 0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
            dim,
        })
    }

    pub fn forward<'a>(&self, g: Graph<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.layer_norm(g.param(self.gamma), g.param(self.beta), Self::EPS)
    }
}

/// Scaled dot-product multi-head attention with separate query/key/value and
/// output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "model dim must split evenly over heads"
        );
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), memory_dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), memory_dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// Returns the attended output (`n x dim`) and per-head attention weights
    /// (`n x m` each, rows on the simplex).
    pub fn forward<'a>(
        &self,
        g: Graph<'a>,
        query: Var<'a>,
        memory: Var<'a>,
    ) -> Result<(Var<'a>, Vec<Var<'a>>)> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, lo, hi)?;
            let kh = k.slice(1, lo, hi)?;
            let vh = v.slice(1, lo, hi)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            outs.push(attn.matmul(vh)?);
            weights.push(attn);
        }
        let cat = g.tape.concat(&outs, 1)?;
        Ok((self.output.forward(g, cat)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, out, true, rng)?,
        })
    }

    pub fn forward<'a>(&self, g: Graph<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let h = self.inner.forward(g, x)?.relu();
        self.outer.forward(g, h)
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_params;
    use rand::SeedableRng;

    #[test]
    fn lstm_step_matches_full_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 4, &mut rng).unwrap();
        let x = Tensor::new(
            vec![3, 3],
            (0..9).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let tape = Tape::inference();
        let g = Graph::new(&tape, &store);
        let xv = g.constant(x);
        let full = lstm.forward(g, xv, false).unwrap().to_vec();
        let mut state = LstmState::zero(g, 4);
        let mut stepped = Vec::new();
        for t in 0..3 {
            let p = lstm.project(g, xv.slice(0, t, t + 1).unwrap()).unwrap();
            state = lstm.step(g, p, state).unwrap();
            stepped.extend(state.h.to_vec());
        }
        assert_eq!(full, stepped);
    }

    #[test]
    fn attention_rows_on_simplex_and_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 3, 2, &mut rng).unwrap();
        let q = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64).cos()).collect()).unwrap();
        let m = Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        {
            let tape = Tape::inference();
            let g = Graph::new(&tape, &store);
            let (_, w) = mha
                .forward(g, g.constant(q.clone()), g.constant(m.clone()))
                .unwrap();
            for head in w {
                let d = head.to_vec();
                for row in d.chunks(3) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&p| p >= 0.0));
                }
            }
        }
        let ids: Vec<_> = store.ids().collect();
        let rep = grad_check_params(
            &mut store,
            &ids,
            |s, tape| {
                let g = Graph::new(tape, s);
                let (out, _) = mha.forward(g, g.constant(q.clone()), g.constant(m.clone()))?;
                Ok(out.tanh().sum())
            },
            1e-5,
            1e-4,
            6,
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.worst());
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(5, 6);
        assert_eq!(p.shape(), &[5, 6]);
        assert!(p.data().iter().all(|x| x.abs() <= 1.0));
        assert_eq!(p.row(0)[0], 0.0);
        assert_eq!(p.row(0)[1], 1.0);
    }
}
