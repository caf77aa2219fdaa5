//! Pair-classification head over a (fused) query sequence and a candidate
//! question sequence.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::QueryId;
use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::nn::{masked_mean_rows, LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::qbf::{FusedQuery, Seq};
use crate::scalar::Scalar;

pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            layers: 2,
            heads: 8,
            dropout: 0.1,
        }
    }
}

impl MatcherConfig {
    pub fn desk() -> Self {
        MatcherConfig {
            heads: 4,
            ..Self::default()
        }
    }
}

/// Projects encoder states to `d_model`, then encodes
/// `[query + segA ; SEP ; candidate + segB]` with a small transformer,
/// mean-pools and applies a sigmoid head. The joint input is layer-normed
/// first so a fused query and a raw candidate enter at the same scale.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub proj: Linear,
    pub segments: ParamId,
    pub sep: ParamId,
    pub input_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
}

impl Matcher {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state_dim: usize,
        d_model: usize,
        cfg: &MatcherConfig,
        rng: &mut R,
    ) -> Self {
        Matcher {
            proj: Linear::new(store, &format!("{prefix}.proj"), state_dim, d_model, true, rng),
            segments: store.add_uniform(format!("{prefix}.segments"), 2, d_model, 0.1, rng),
            sep: store.add_uniform(format!("{prefix}.sep"), 1, d_model, 0.1, rng),
            input_norm: LayerNorm::new(store, &format!("{prefix}.input_norm"), d_model),
            layers: (0..cfg.layers)
                .map(|l| {
                    TransformerLayer::new(store, &format!("{prefix}.enc{l}"), d_model, cfg.heads, 4 * d_model, cfg.dropout, rng)
                })
                .collect(),
            head: Linear::new(store, &format!("{prefix}.head"), d_model, 1, true, rng),
        }
    }

    /// Encoder states to model width.
    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, states: Var) -> Var {
        self.proj.forward(g, states)
    }

    /// Match logit, `1 x 1`.
    pub fn logit<T: Scalar>(&self, g: &mut Graph<'_, T>, query: &FusedQuery, candidate: Seq<'_>) -> Var {
        let seg = g.param(self.segments);
        let sa = g.slice_rows(seg, 0, 1);
        let sb = g.slice_rows(seg, 1, 1);
        let a = g.add_row(query.sequence, sa);
        let b = g.add_row(candidate.x, sb);
        let sep = g.param(self.sep);
        let x = g.concat_rows(&[a, sep, b]);
        let mut x = self.input_norm.forward(g, x);
        let valid: Vec<bool> = query
            .valid
            .iter()
            .copied()
            .chain(std::iter::once(true))
            .chain(candidate.valid.iter().copied())
            .collect();
        for layer in &self.layers {
            x = layer.forward(g, x, Some(&valid));
        }
        let pooled = masked_mean_rows(g, x, &valid);
        self.head.forward(g, pooled)
    }

    /// `y_hat` in (0, 1), `1 x 1`.
    pub fn match_score<T: Scalar>(&self, g: &mut Graph<'_, T>, query: &FusedQuery, candidate: Seq<'_>) -> Var {
        let l = self.logit(g, query, candidate);
        g.sigmoid(l)
    }
}

/// Mean binary cross-entropy; `y_hat` (`n x 1`) is clamped to
/// `[1e-7, 1 - 1e-7]` first.
pub fn loss_ce<T: Scalar>(g: &mut Graph<'_, T>, y_hat: Var, y: &[u8]) -> Result<Var> {
    let n = g.shape(y_hat).0;
    if y.len() != n || n == 0 {
        return Err(Error::invalid("loss_ce: labels do not align with predictions"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("loss_ce: labels must be 0 or 1"));
    }
    let p = g.clamp(y_hat, T::of(CE_CLAMP), T::of(1.0 - CE_CLAMP));
    let lp = g.log(p);
    let one_minus = g.neg(p);
    let one_minus = g.add_scalar(one_minus, T::one());
    let lq = g.log(one_minus);
    let yv = Array2::from_shape_fn((n, 1), |(i, _)| T::of(f64::from(y[i])));
    let ny = yv.mapv(|v| T::one() - v);
    let yv = g.constant(yv);
    let ny = g.constant(ny);
    let a = g.mul(lp, yv);
    let b = g.mul(lq, ny);
    let s = g.add(a, b);
    let m = g.mean_all(s);
    Ok(g.neg(m))
}

/// Candidates by descending score, ties by ascending id.
pub fn rank_candidates<T: Scalar>(query_id: QueryId, scores: &[(QueryId, T)]) -> RankedList<T> {
    let mut candidates = scores.to_vec();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    RankedList {
        query_id: Some(query_id),
        candidates,
    }
}
