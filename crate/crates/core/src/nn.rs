//! Layers built on the autodiff tape: dense, embedding, layer norm,
//! recurrent (GRU, LSTM) and multi-head attention blocks.
//!
//! Layers only hold [`ParamId`]s; the values live in a shared
//! [`ParamStore`] and every forward call goes through a [`Graph`].

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Additive bias applied to masked attention logits.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), 1, out_dim));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_uniform(format!("{name}.table"), vocab, dim, 0.1, rng);
        Embedding { table, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_filled(format!("{name}.gamma"), 1, dim, T::one()),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let c = g.shape(x).1;
        let inv_c = T::one() / T::of(c as f64);
        let s = g.sum_rows(x);
        let mean = g.scale(s, -inv_c);
        let xc = g.add_col(x, mean);
        let sq = g.square(xc);
        let var = g.sum_rows(sq);
        let var = g.scale(var, inv_c);
        let var = g.add_scalar(var, T::of(self.eps));
        let sd = g.sqrt(var);
        let inv = g.recip(sd);
        let y = g.mul_col(xc, inv);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(y, gamma);
        g.add_row(y, beta)
    }
}

/// Per-step validity masks for a time-major batch: `masks[t]` is a
/// `batch x 1` constant with 1 for real tokens and 0 for padding.
pub fn step_masks<T: Scalar>(g: &mut Graph<'_, T>, valid: &[Vec<bool>]) -> Vec<Var> {
    let steps = valid.first().map_or(0, |v| v.len());
    (0..steps)
        .map(|t| {
            let col = Array2::from_shape_fn((valid.len(), 1), |(b, _)| {
                if valid[b][t] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            g.constant(col)
        })
        .collect()
}

/// `h + m * (candidate - h)`: keeps the previous state on padded rows.
fn masked_update<T: Scalar>(g: &mut Graph<'_, T>, h: Var, cand: Var, mask: Option<Var>) -> Var {
    match mask {
        None => cand,
        Some(m) => {
            let d = g.sub(cand, h);
            let d = g.mul_col(d, m);
            g.add(h, d)
        }
    }
}

/// Project every step through `w` with a single matrix product.
fn project_steps<T: Scalar>(g: &mut Graph<'_, T>, xs: &[Var], w: ParamId, b: ParamId) -> Vec<Var> {
    let batch = g.shape(xs[0]).0;
    let all = g.concat_rows(xs);
    let w = g.param(w);
    let b = g.param(b);
    let p = g.matmul(all, w);
    let p = g.add_row(p, b);
    (0..xs.len())
        .map(|t| g.slice_rows(p, t * batch, batch))
        .collect()
}

/// Single-direction GRU layer (reset gate applied after the hidden
/// projection).
#[derive(Debug, Clone)]
pub struct Gru {
    wi: ParamId,
    wh: ParamId,
    bi: ParamId,
    bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        Gru {
            wi: store.add_uniform(format!("{name}.wi"), in_dim, 3 * hidden, limit, rng),
            wh: store.add_uniform(format!("{name}.wh"), hidden, 3 * hidden, limit, rng),
            bi: store.add_zeros(format!("{name}.bi"), 1, 3 * hidden),
            bh: store.add_zeros(format!("{name}.bh"), 1, 3 * hidden),
            hidden,
        }
    }

    fn cell<T: Scalar>(&self, g: &mut Graph<'_, T>, gi: Var, h: Var) -> Var {
        let hd = self.hidden;
        let wh = g.param(self.wh);
        let bh = g.param(self.bh);
        let gh = g.matmul(h, wh);
        let gh = g.add_row(gh, bh);
        let i_rz = g.slice_cols(gi, 0, 2 * hd);
        let h_rz = g.slice_cols(gh, 0, 2 * hd);
        let rz = g.add(i_rz, h_rz);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd);
        let z = g.slice_cols(rz, hd, hd);
        let i_n = g.slice_cols(gi, 2 * hd, hd);
        let h_n = g.slice_cols(gh, 2 * hd, hd);
        let rn = g.mul(r, h_n);
        let n = g.add(i_n, rn);
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let hmn = g.sub(h, n);
        let zh = g.mul(z, hmn);
        g.add(n, zh)
    }

    /// Run over time-major inputs. Returns per-step outputs (in input
    /// order) and the final state.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xs: &[Var],
        masks: Option<&[Var]>,
        h0: Option<Var>,
        reverse: bool,
    ) -> (Vec<Var>, Var) {
        let batch = g.shape(xs[0]).0;
        let gis = project_steps(g, xs, self.wi, self.bi);
        let mut h = h0.unwrap_or_else(|| g.constant(Array2::zeros((batch, self.hidden))));
        let mut outs = vec![h; xs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..xs.len()).rev())
        } else {
            Box::new(0..xs.len())
        };
        for t in order {
            let cand = self.cell(g, gis[t], h);
            h = masked_update(g, h, cand, masks.map(|m| m[t]));
            outs[t] = h;
        }
        (outs, h)
    }
}

/// Stacked bidirectional GRU. Layer `l > 0` consumes the concatenated
/// forward/backward outputs of layer `l - 1`.
#[derive(Debug, Clone)]
pub struct BiGru {
    layers: Vec<(Gru, Gru)>,
    pub hidden: usize,
}

pub struct BiRnnOutput {
    /// Per-step `batch x 2H` outputs of the top layer.
    pub steps: Vec<Var>,
    /// `batch x 2H`: top-layer forward final state and backward final state.
    pub last: Var,
}

impl BiGru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden };
                (
                    Gru::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng),
                    Gru::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng),
                )
            })
            .collect();
        BiGru { layers, hidden }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xs: &[Var],
        masks: Option<&[Var]>,
    ) -> BiRnnOutput {
        let mut inputs = xs.to_vec();
        let mut last = None;
        for (fwd, bwd) in &self.layers {
            let (fo, fh) = fwd.run(g, &inputs, masks, None, false);
            let (bo, bh) = bwd.run(g, &inputs, masks, None, true);
            inputs = fo
                .iter()
                .zip(&bo)
                .map(|(&f, &b)| g.concat_cols(&[f, b]))
                .collect();
            last = Some(g.concat_cols(&[fh, bh]));
        }
        BiRnnOutput {
            steps: inputs,
            last: last.expect("at least one layer"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    wi: ParamId,
    wh: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        let wi = store.add_uniform(format!("{name}.wi"), in_dim, 4 * hidden, limit, rng);
        let wh = store.add_uniform(format!("{name}.wh"), hidden, 4 * hidden, limit, rng);
        // forget-gate bias starts at 1
        let mut bias = Array2::zeros((1, 4 * hidden));
        for j in hidden..2 * hidden {
            bias[[0, j]] = T::one();
        }
        let b = store.add(format!("{name}.b"), bias);
        Lstm { wi, wh, b, hidden }
    }

    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xs: &[Var],
        masks: Option<&[Var]>,
        reverse: bool,
    ) -> Vec<Var> {
        let hd = self.hidden;
        let batch = g.shape(xs[0]).0;
        let gis = project_steps(g, xs, self.wi, self.b);
        let zero = g.constant(Array2::zeros((batch, hd)));
        let (mut h, mut c) = (zero, zero);
        let mut outs = vec![zero; xs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..xs.len()).rev())
        } else {
            Box::new(0..xs.len())
        };
        for t in order {
            let wh = g.param(self.wh);
            let gh = g.matmul(h, wh);
            let gates = g.add(gis[t], gh);
            let ifo = g.slice_cols(gates, 0, 3 * hd);
            let ifo = g.sigmoid(ifo);
            let i = g.slice_cols(ifo, 0, hd);
            let f = g.slice_cols(ifo, hd, hd);
            let o = g.slice_cols(ifo, 2 * hd, hd);
            let cand = g.slice_cols(gates, 3 * hd, hd);
            let cand = g.tanh(cand);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            let c_new = g.add(fc, ic);
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc);
            let m = masks.map(|m| m[t]);
            c = masked_update(g, c, c_new, m);
            h = masked_update(g, h, h_new, m);
            outs[t] = h;
        }
        outs
    }
}

/// Single-layer bidirectional LSTM; per-step output is `batch x 2H`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
            hidden,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xs: &[Var],
        masks: Option<&[Var]>,
    ) -> Vec<Var> {
        let f = self.fwd.run(g, xs, masks, false);
        let b = self.bwd.run(g, xs, masks, true);
        f.iter()
            .zip(&b)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect()
    }
}

/// Multi-head scaled dot-product attention with input/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            heads,
            d_model,
        }
    }

    /// `query` is `Lq x d`, `memory` is `Lk x d`; `key_valid[j]` false masks
    /// key `j` out of every head.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        memory: Var,
        key_valid: Option<&[bool]>,
    ) -> Var {
        self.forward_with_weights(g, query, memory, key_valid).0
    }

    /// As [`forward`](Self::forward), also returning each head's
    /// `Lq x Lk` attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        memory: Var,
        key_valid: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let dk = self.d_model / self.heads;
        let q = self.wq.forward(g, query);
        let k = self.wk.forward(g, memory);
        let v = self.wv.forward(g, memory);
        let scale = T::one() / T::of(dk as f64).sqrt();
        let bias = key_valid.map(|valid| {
            let row = Array2::from_shape_fn((1, valid.len()), |(_, j)| {
                if valid[j] {
                    T::zero()
                } else {
                    T::of(MASK_NEG)
                }
            });
            g.constant(row)
        });
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let s = g.matmul_bt(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(b) = bias {
                s = g.add_row(s, b);
            }
            let p = g.softmax_rows(s);
            weights.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        (self.wo.forward(g, cat), weights)
    }
}

/// Post-norm transformer encoder layer. Output projections of both
/// residual branches are zero-initialised.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    dropout: f64,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layer = TransformerLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, ff_dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, d_model, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            dropout,
        };
        // residual branches start at zero so a fresh layer is LN(x)
        store.get_mut(layer.attn.wo.w).fill(T::zero());
        store.get_mut(layer.ff2.w).fill(T::zero());
        layer
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, valid: Option<&[bool]>) -> Var {
        let a = self.attn.forward(g, x, x, valid);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, x);
        let f = self.ff1.forward(g, x);
        let f = g.relu(f);
        let f = self.ff2.forward(g, f);
        let f = g.dropout(f, self.dropout);
        let x = g.add(x, f);
        self.ln2.forward(g, x)
    }
}

/// Mean of the rows of `x` whose flag in `valid` is set, `1 x d`.
pub fn masked_mean_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var, valid: &[bool]) -> Var {
    let n = valid.iter().filter(|&&v| v).count().max(1);
    let w = Array2::from_shape_fn((1, valid.len()), |(_, j)| {
        if valid[j] {
            T::one() / T::of(n as f64)
        } else {
            T::zero()
        }
    });
    let w = g.constant(w);
    g.matmul(w, x)
}
