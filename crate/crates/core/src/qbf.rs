//! Query-bag fusion: cross-attention of the query over each bag member,
//! aggregation, then self-attention over query and fused halves.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{MultiHeadAttention, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QbfConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
}

impl Default for QbfConfig {
    fn default() -> Self {
        QbfConfig {
            d_model: 768,
            heads: 8,
            layers: 2,
            dropout: 0.1,
            aggregation: Aggregation::Mean,
        }
    }
}

impl QbfConfig {
    pub fn desk() -> Self {
        QbfConfig {
            d_model: 64,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "qbf: d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("qbf: dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Where a fused query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Qbf,
    SumAblation,
    None,
}

/// Query representation handed to the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedQuery {
    /// `rows x d_model`.
    pub sequence: Var,
    pub valid: Vec<bool>,
    pub provenance: Provenance,
}

/// A projected token sequence with its padding flags.
#[derive(Debug, Clone, Copy)]
pub struct Seq<'a> {
    pub x: Var,
    pub valid: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub cross: MultiHeadAttention,
    pub segments: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub aggregation: Aggregation,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cfg: &QbfConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Fusion {
            cross: MultiHeadAttention::new(store, &format!("{prefix}.cross"), d, cfg.heads, rng),
            segments: store.add_uniform(format!("{prefix}.segments"), 2, d, 0.1, rng),
            layers: (0..cfg.layers)
                .map(|l| TransformerLayer::new(store, &format!("{prefix}.sa{l}"), d, cfg.heads, 4 * d, cfg.dropout, rng))
                .collect(),
            aggregation: cfg.aggregation,
        }
    }

    /// `CA(q)`: attention from `q` into each member, aggregated.
    pub fn cross_attend<T: Scalar>(&self, g: &mut Graph<'_, T>, q: Var, bag: &[Seq<'_>]) -> Result<Var> {
        if bag.is_empty() {
            return Err(Error::invalid("cross_attend: empty bag"));
        }
        let mut acc = None;
        for m in bag {
            let o = self.cross.forward(g, q, m.x, Some(m.valid));
            acc = Some(match acc {
                None => o,
                Some(a) => g.add(a, o),
            });
        }
        let s = acc.expect("non-empty bag");
        Ok(match self.aggregation {
            Aggregation::Sum => s,
            Aggregation::Mean => g.scale(s, T::of(1.0 / bag.len() as f64)),
        })
    }

    /// `SA(q)` over `[q + seg0 ; CA(q) + seg1]`, `2L x d`.
    pub fn self_attend<T: Scalar>(&self, g: &mut Graph<'_, T>, q: Seq<'_>, ca: Var) -> FusedQuery {
        let seg = g.param(self.segments);
        let s0 = g.slice_rows(seg, 0, 1);
        let s1 = g.slice_rows(seg, 1, 1);
        let a = g.add_row(q.x, s0);
        let b = g.add_row(ca, s1);
        let mut x = g.concat_rows(&[a, b]);
        let valid: Vec<bool> = q.valid.iter().chain(q.valid).copied().collect();
        for layer in &self.layers {
            x = layer.forward(g, x, Some(&valid));
        }
        FusedQuery {
            sequence: x,
            valid,
            provenance: Provenance::Qbf,
        }
    }

    /// Full fusion of `q` with a non-empty bag.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, q: Seq<'_>, bag: &[Seq<'_>]) -> Result<FusedQuery> {
        let ca = self.cross_attend(g, q.x, bag)?;
        Ok(self.self_attend(g, q, ca))
    }
}

/// `q_vec + sum(bag_vecs)` repeated over the query's `L` rows.
pub fn fuse_sum<T: Scalar>(g: &mut Graph<'_, T>, q_vec: Var, bag_vecs: &[Var], valid: &[bool]) -> FusedQuery {
    let mut v = q_vec;
    for &b in bag_vecs {
        v = g.add(v, b);
    }
    let rows = vec![0usize; valid.len()];
    FusedQuery {
        sequence: g.gather_rows(v, &rows),
        valid: valid.to_vec(),
        provenance: Provenance::SumAblation,
    }
}

/// The query sequence unchanged.
pub fn unfused(q: Seq<'_>) -> FusedQuery {
    FusedQuery {
        sequence: q.x,
        valid: q.valid.to_vec(),
        provenance: Provenance::None,
    }
}

/// Constant `rows x d` matrix, handy for fixtures.
pub fn constant_rows<T: Scalar>(rows: usize, v: &[f64]) -> Array2<T> {
    Array2::from_shape_fn((rows, v.len()), |(_, j)| T::of(v[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(agg: Aggregation) -> (ParamStore<f64>, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = QbfConfig {
            d_model: 8,
            heads: 2,
            aggregation: agg,
            ..QbfConfig::default()
        };
        let f = Fusion::new(&mut store, "qbf", &cfg, &mut rng);
        (store, f)
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn constant_values_pass_through() {
        let (store, f) = setup(Aggregation::Mean);
        let mut g = Graph::new(&store);
        let q = g.constant(randn(3, 8, 1));
        // wv * m + bv is constant when every member row is identical
        let m = g.constant(constant_rows(4, &[0.5, -1.0, 0.0, 2.0, 1.0, 1.0, -0.5, 0.25]));
        let valid = [true; 4];
        let ca = f.cross_attend(&mut g, q, &[Seq { x: m, valid: &valid }]).unwrap();
        let v = f.cross.forward(&mut g, m, m, None);
        let want = g.value(v).row(0).to_owned();
        for row in g.value(ca).rows() {
            for (a, b) in row.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.shape(ca), (3, 8));
        assert!(f.cross_attend(&mut g, q, &[]).is_err());
    }

    #[test]
    fn identical_members_under_mean_equal_single() {
        let (store, f) = setup(Aggregation::Mean);
        let mut g = Graph::new(&store);
        let q = g.constant(randn(3, 8, 2));
        let m = g.constant(randn(5, 8, 3));
        let valid = [true, true, true, false, true];
        let one = f.cross_attend(&mut g, q, &[Seq { x: m, valid: &valid }]).unwrap();
        let many = f.cross_attend(&mut g, q, &[Seq { x: m, valid: &valid }; 3]).unwrap();
        let d = (g.value(one) - g.value(many)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < 1e-12);
    }

    #[test]
    fn member_order_does_not_matter() {
        for agg in [Aggregation::Mean, Aggregation::Sum] {
            let (store, f) = setup(agg);
            let mut g = Graph::new(&store);
            let qv = [true, true, false];
            let q = Seq {
                x: g.constant(randn(3, 8, 4)),
                valid: &qv,
            };
            let va = [true, true, true];
            let vb = [true, false, true];
            let a = g.constant(randn(3, 8, 5));
            let b = g.constant(randn(3, 8, 6));
            let ab = f.fuse(&mut g, q, &[Seq { x: a, valid: &va }, Seq { x: b, valid: &vb }]).unwrap();
            let ba = f.fuse(&mut g, q, &[Seq { x: b, valid: &vb }, Seq { x: a, valid: &va }]).unwrap();
            assert_eq!(g.shape(ab.sequence), (6, 8));
            assert_eq!(ab.provenance, Provenance::Qbf);
            let d = (g.value(ab.sequence) - g.value(ba.sequence)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, f) = setup(Aggregation::Mean);
        let run = || {
            let mut g = Graph::new(&store);
            let qv = [true; 2];
            let q = Seq {
                x: g.constant(randn(2, 8, 7)),
                valid: &qv,
            };
            let m = g.constant(randn(2, 8, 8));
            let out = f.fuse(&mut g, q, &[Seq { x: m, valid: &qv }]).unwrap();
            g.value(out.sequence).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sum_fusion_cases() {
        let mut g = Graph::<f64>::detached();
        let q = g.constant(ndarray::array![[1.0, -2.0]]);
        let valid = [true, true, false];
        let alone = fuse_sum(&mut g, q, &[], &valid);
        assert_eq!(g.shape(alone.sequence), (3, 2));
        assert_eq!(g.value(alone.sequence).row(2).to_vec(), vec![1.0, -2.0]);
        assert_eq!(alone.provenance, Provenance::SumAblation);
        let neg = g.neg(q);
        let zero = fuse_sum(&mut g, q, &[neg], &valid);
        assert!(g.value(zero.sequence).iter().all(|&x| x == 0.0));
        let a = g.constant(ndarray::array![[0.5, 0.25]]);
        let b = g.constant(ndarray::array![[2.0, 1.0]]);
        let ab = fuse_sum(&mut g, q, &[a, b], &valid);
        let ba = fuse_sum(&mut g, q, &[b, a], &valid);
        assert_eq!(g.value(ab.sequence), g.value(ba.sequence));
    }
}
