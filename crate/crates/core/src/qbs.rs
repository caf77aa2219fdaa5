//! Query-bag selection: score retrieved candidates, keep the most
//! trustworthy ones, and the two selection losses.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{QueryBag, QueryId};
use crate::error::{Error, Result};
use crate::nn::{step_masks, BiLstm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QbsConfig {
    pub bilstm_hidden: usize,
    pub dropout: f64,
    /// Bag size `B_s`.
    pub bag_size: usize,
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Contrast each anchor only against its own candidates instead of
    /// every candidate in the batch.
    pub intra_bag_negatives: bool,
}

impl Default for QbsConfig {
    fn default() -> Self {
        QbsConfig {
            bilstm_hidden: 128,
            dropout: 0.5,
            bag_size: 5,
            tau: 0.7,
            tau1: 1e-4,
            tau2: 1e-3,
            intra_bag_negatives: false,
        }
    }
}

impl QbsConfig {
    pub fn desk() -> Self {
        QbsConfig {
            bilstm_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("qbs: {m}")));
        if self.bag_size == 0 {
            return bad("bag_size must be >= 1");
        }
        if !(self.tau > 0.0) || !(self.tau2 > 0.0) || !(self.tau1 >= 0.0) {
            return bad("need tau > 0, tau2 > 0 and tau1 >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.bilstm_hidden == 0 {
            return bad("bilstm_hidden must be positive");
        }
        Ok(())
    }
}

/// A token sequence addressed as rows of an encoder-state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqRows {
    pub rows: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Selection probabilities for one query's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutput<T> {
    pub query_id: QueryId,
    pub candidate_ids: Vec<QueryId>,
    pub probs: Vec<T>,
    pub selected: Vec<bool>,
}

impl<T: Scalar> SelectorOutput<T> {
    pub fn new(query_id: QueryId, candidate_ids: Vec<QueryId>, probs: Vec<T>, bag_size: usize) -> Result<Self> {
        if candidate_ids.is_empty() {
            return Err(Error::invalid("selector: empty candidate list"));
        }
        if candidate_ids.len() != probs.len() {
            return Err(Error::invalid("selector: probs do not align with candidates"));
        }
        let mut selected = vec![false; probs.len()];
        for i in top_indices(&candidate_ids, &probs, bag_size) {
            selected[i] = true;
        }
        Ok(SelectorOutput {
            query_id,
            candidate_ids,
            probs,
            selected,
        })
    }

    /// Indices of the selected candidates, best first.
    pub fn selected_indices(&self) -> Vec<usize> {
        let n = self.selected.iter().filter(|&&s| s).count();
        top_indices(&self.candidate_ids, &self.probs, n)
    }
}

/// Indices of the `n` highest probabilities, ties by ascending id.
pub fn top_indices<T: Scalar>(ids: &[QueryId], probs: &[T], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(n.min(ids.len()));
    order
}

/// The selected candidates as a bag, best first.
pub fn select_bag<T: Scalar>(out: &SelectorOutput<T>, bag_size: usize) -> QueryBag {
    let members = top_indices(&out.candidate_ids, &out.probs, bag_size)
        .into_iter()
        .map(|i| out.candidate_ids[i])
        .collect();
    QueryBag {
        anchor_id: out.query_id,
        member_ids: members,
        gold: None,
    }
}

/// BiLSTM with a residual projection over `Q (+) b_i`, masked mean
/// pooling and a two-layer classifier.
#[derive(Debug, Clone)]
pub struct Selector {
    pub lstm: BiLstm,
    pub residual: Linear,
    pub hidden: Linear,
    pub classifier: Linear,
    pub dropout: f64,
}

impl Selector {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state_dim: usize,
        cfg: &QbsConfig,
        rng: &mut R,
    ) -> Self {
        let h = cfg.bilstm_hidden;
        Selector {
            lstm: BiLstm::new(store, &format!("{prefix}.lstm"), state_dim, h, rng),
            residual: Linear::new(store, &format!("{prefix}.residual"), state_dim, 2 * h, true, rng),
            hidden: Linear::new(store, &format!("{prefix}.mlp1"), 2 * h, h, true, rng),
            classifier: Linear::new(store, &format!("{prefix}.mlp2"), h, 2, true, rng),
            dropout: cfg.dropout,
        }
    }

    /// Two-way softmax per pair, `n x 2`; column 1 is "select". Each pair
    /// is (query, candidate); all queries share one length and all
    /// candidates share one length.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, states: Var, pairs: &[(&SeqRows, &SeqRows)]) -> Var {
        assert!(!pairs.is_empty(), "selector needs at least one candidate");
        let lq = pairs[0].0.rows.len();
        let lc = pairs[0].1.rows.len();
        let steps = lq + lc;
        let valid: Vec<Vec<bool>> = pairs
            .iter()
            .map(|(q, c)| {
                assert_eq!((q.rows.len(), c.rows.len()), (lq, lc), "ragged selector input");
                q.valid.iter().chain(&c.valid).copied().collect()
            })
            .collect();
        let xs: Vec<Var> = (0..steps)
            .map(|t| {
                let idx: Vec<usize> = pairs
                    .iter()
                    .map(|(q, c)| if t < lq { q.rows[t] } else { c.rows[t - lq] })
                    .collect();
                g.gather_rows(states, &idx)
            })
            .collect();
        let masks = step_masks(g, &valid);
        let outs = self.lstm.forward(g, &xs, Some(masks.as_slice()));
        let n = pairs.len();
        let all_x = g.concat_rows(&xs);
        let res = self.residual.forward(g, all_x);
        let mut pooled = None;
        for (t, &o) in outs.iter().enumerate() {
            let r = g.slice_rows(res, t * n, n);
            let y = g.add(o, r);
            let y = g.mul_col(y, masks[t]);
            pooled = Some(match pooled {
                None => y,
                Some(p) => g.add(p, y),
            });
        }
        let inv = Array2::from_shape_fn((n, 1), |(i, _)| {
            T::one() / T::of(valid[i].iter().filter(|&&v| v).count().max(1) as f64)
        });
        let inv = g.constant(inv);
        let pooled = g.mul_col(pooled.expect("non-empty"), inv);
        let h = self.hidden.forward(g, pooled);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let logits = self.classifier.forward(g, h);
        g.softmax_rows(logits)
    }

    /// Selection probabilities, `n x 1`.
    pub fn probs<T: Scalar>(&self, g: &mut Graph<'_, T>, states: Var, pairs: &[(&SeqRows, &SeqRows)]) -> Var {
        let p = self.forward(g, states, pairs);
        g.slice_cols(p, 1, 1)
    }
}

/// Score one query's candidates and select its bag.
pub fn score_candidates<T: Scalar>(
    selector: &Selector,
    g: &mut Graph<'_, T>,
    states: Var,
    query: (QueryId, &SeqRows),
    candidates: &[(QueryId, SeqRows)],
    bag_size: usize,
) -> Result<SelectorOutput<T>> {
    if candidates.is_empty() {
        return Err(Error::invalid("score_candidates: empty candidate list"));
    }
    let pairs: Vec<(&SeqRows, &SeqRows)> = candidates.iter().map(|(_, c)| (query.1, c)).collect();
    let p = selector.probs(g, states, &pairs);
    let probs = g.value(p).column(0).to_vec();
    SelectorOutput::new(query.0, candidates.iter().map(|c| c.0).collect(), probs, bag_size)
}

/// Candidates scoring strictly above the median of all scores.
pub fn pseudo_positive_mask<T: Scalar>(scores: &[Vec<T>]) -> Vec<Vec<bool>> {
    let mut all: Vec<f64> = scores.iter().flatten().map(|s| s.as_f64()).collect();
    if all.is_empty() {
        return Vec::new();
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let m = all.len();
    let median = if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    };
    scores
        .iter()
        .map(|r| r.iter().map(|s| s.as_f64() > median).collect())
        .collect()
}

/// Multi-positive InfoNCE over a batch of anchors.
///
/// `queries` is `A x d`; `candidates` is `(A * k) x d` with anchor `a`'s
/// candidates in rows `a*k .. (a+1)*k`; `positive[a][j]` marks pseudo
/// positives. The contrast set of each anchor is every candidate in the
/// batch, or only its own when `intra_bag` is set. The loss averages
/// `-log softmax` over all (anchor, positive) pairs; anchors without a
/// positive are skipped.
pub fn loss_bag_infonce<T: Scalar>(
    g: &mut Graph<'_, T>,
    queries: Var,
    candidates: Var,
    positive: &[Vec<bool>],
    tau: f64,
    intra_bag: bool,
) -> Result<Var> {
    let a_n = g.shape(queries).0;
    let total = g.shape(candidates).0;
    if positive.len() != a_n || a_n == 0 || !total.is_multiple_of(a_n) {
        return Err(Error::invalid("bag InfoNCE: candidate rows do not align with anchors"));
    }
    let k = total / a_n;
    if positive.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("bag InfoNCE: mask width differs from candidate count"));
    }
    let eps = T::of(1e-12);
    let q = g.l2_normalize_rows(queries, eps);
    let c = g.l2_normalize_rows(candidates, eps);
    let s = g.matmul_bt(q, c);
    let s = g.scale(s, T::of(1.0 / tau));
    let s = if intra_bag {
        let mask = Array2::from_shape_fn((a_n, total), |(a, j)| {
            if j / k == a {
                T::zero()
            } else {
                T::of(-1e9)
            }
        });
        let mask = g.constant(mask);
        g.add(s, mask)
    } else {
        s
    };
    let lp = g.log_softmax_rows(s);
    let mut w = Array2::<T>::zeros((a_n, total));
    let mut pairs = 0usize;
    for (a, mask) in positive.iter().enumerate() {
        let pos = mask.iter().filter(|&&m| m).count();
        let negatives = if intra_bag { k - pos } else { total - pos };
        if pos == 0 || negatives == 0 {
            continue;
        }
        for (j, &m) in mask.iter().enumerate() {
            if m {
                w[[a, a * k + j]] = T::one();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::invalid(
            "bag InfoNCE: pseudo-positive mask leaves no anchor with both a positive and a negative",
        ));
    }
    w.mapv_inplace(|x| x / T::of(-(pairs as f64)));
    let w = g.constant(w);
    let weighted = g.mul(lp, w);
    Ok(g.sum_all(weighted))
}

/// `-log((sum_i p_i * sim_i + tau1) / (sum_i p_i + tau2))` with
/// `sim_i = (1 + cos(q, b_i)) / 2`. `query` is `1 x d`, `candidates` is
/// `n x d`, `probs` is `n x 1`.
pub fn loss_reward<T: Scalar>(
    g: &mut Graph<'_, T>,
    query: Var,
    candidates: Var,
    probs: Var,
    tau1: f64,
    tau2: f64,
) -> Var {
    let eps = T::of(1e-12);
    let q = g.l2_normalize_rows(query, eps);
    let c = g.l2_normalize_rows(candidates, eps);
    let cos = g.matmul_bt(c, q);
    let sim = g.add_scalar(cos, T::one());
    let sim = g.scale(sim, T::of(0.5));
    let ps = g.mul(probs, sim);
    let num = g.sum_all(ps);
    let num = g.add_scalar(num, T::of(tau1));
    let den = g.sum_all(probs);
    let den = g.add_scalar(den, T::of(tau2));
    let ln_num = g.log(num);
    let ln_den = g.log(den);
    g.sub(ln_den, ln_num)
}

/// Mean reward loss over anchors: row `a` of `queries` against rows
/// `offsets[a]..offsets[a+1]` of `candidates` and `probs`.
pub fn loss_reward_batch<T: Scalar>(
    g: &mut Graph<'_, T>,
    queries: Var,
    candidates: Var,
    probs: Var,
    offsets: &[usize],
    tau1: f64,
    tau2: f64,
) -> Var {
    let a_n = offsets.len() - 1;
    let mut acc = None;
    for a in 0..a_n {
        let q = g.slice_rows(queries, a, 1);
        let n = offsets[a + 1] - offsets[a];
        let c = g.slice_rows(candidates, offsets[a], n);
        let p = g.slice_rows(probs, offsets[a], n);
        let l = loss_reward(g, q, c, p, tau1, tau2);
        acc = Some(match acc {
            None => l,
            Some(s) => g.add(s, l),
        });
    }
    let s = acc.expect("at least one anchor");
    g.scale(s, T::of(1.0 / a_n as f64))
}
