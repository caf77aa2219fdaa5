//! Exact cosine nearest-neighbour index over query embeddings.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, FORMAT_VERSION};
use crate::data::{Query, QueryBag, QueryId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::vae::Stage1Checkpoint;

const UNIT_TOL: f64 = 1e-6;

/// Unit-norm embeddings, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    ids: Vec<QueryId>,
    matrix: Array2<T>,
    pub checkpoint_hash: String,
    pos: HashMap<QueryId, usize>,
}

/// Candidates for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<T> {
    pub query_id: Option<QueryId>,
    pub candidates: Vec<(QueryId, T)>,
}

impl<T> RankedList<T> {
    pub fn ids(&self) -> Vec<QueryId> {
        self.candidates.iter().map(|c| c.0).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The first `k` candidates.
    pub fn truncated(&self, k: usize) -> Self
    where
        T: Copy,
    {
        RankedList {
            query_id: self.query_id,
            candidates: self.candidates[..k.min(self.len())].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDiagnostics {
    /// Mean number of gold bag members among the top-k.
    pub mean_bag_recall_count: f64,
    /// Mean fraction of the top-k that are gold bag members.
    pub candidate_accuracy: f64,
    pub n_anchors: usize,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexSidecar {
    format_version: u32,
    ids: Vec<QueryId>,
    d_z: usize,
    checkpoint_hash: String,
    dtype: String,
}

const MATRIX_NAME: &str = "index.matrix";

/// Descending score, then ascending id.
fn rank_order<T: Scalar>(a: &(QueryId, T), b: &(QueryId, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

impl<T: Scalar> EmbeddingIndex<T> {
    /// Wrap precomputed unit-norm rows.
    pub fn from_parts(ids: Vec<QueryId>, matrix: Array2<T>, checkpoint_hash: String) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::invalid(format!(
                "index: {} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        let pos: HashMap<QueryId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if pos.len() != ids.len() {
            return Err(Error::invalid("index: duplicate ids"));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("index row {} ({}) has norm {n}", i, ids[i])));
            }
        }
        Ok(EmbeddingIndex {
            ids,
            matrix,
            checkpoint_hash,
            pos,
        })
    }

    pub fn ids(&self) -> &[QueryId] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_z(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn contains(&self, id: QueryId) -> bool {
        self.pos.contains_key(&id)
    }

    pub fn vector(&self, id: QueryId) -> Option<ArrayView1<'_, T>> {
        self.pos.get(&id).map(|&i| self.matrix.row(i))
    }

    /// Exact top-`k` by cosine. `exclude` (normally the query's own id) is
    /// never returned; `k` counts the remaining rows.
    pub fn search(&self, query: ArrayView1<'_, T>, k: usize, exclude: Option<QueryId>) -> Result<RankedList<T>> {
        let excluded = exclude.is_some_and(|id| self.contains(id));
        let available = self.len() - usize::from(excluded);
        if k == 0 || k > available {
            return Err(Error::invalid(format!(
                "search: k = {k} outside 1..={available}"
            )));
        }
        if query.len() != self.d_z() {
            return Err(Error::invalid(format!(
                "search: query has dim {}, index has {}",
                query.len(),
                self.d_z()
            )));
        }
        let scores = self.matrix.dot(&query);
        let mut all: Vec<(QueryId, T)> = self
            .ids
            .iter()
            .zip(scores.iter())
            .filter(|(id, _)| Some(**id) != exclude)
            .map(|(&id, &s)| (id, s))
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank_order);
            all.truncate(k);
        }
        all.sort_by(rank_order);
        Ok(RankedList {
            query_id: exclude,
            candidates: all,
        })
    }

    /// Search with an indexed query's own vector, excluding itself.
    pub fn search_id(&self, id: QueryId, k: usize) -> Result<RankedList<T>> {
        let v = self
            .vector(id)
            .ok_or_else(|| Error::invalid(format!("query {id} is not in the index")))?;
        self.search(v, k, Some(id))
    }

    /// Write `<stem>.bin` (matrix) and `<stem>.json` (ids and metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.add(MATRIX_NAME, self.matrix.clone());
        let sidecar = IndexSidecar {
            format_version: FORMAT_VERSION,
            ids: self.ids.clone(),
            d_z: self.d_z(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            dtype: T::DTYPE.into(),
        };
        checkpoint::save(path, &store, &sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, side): (ParamStore<T>, IndexSidecar) = checkpoint::load(path)?;
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let id = store.id(MATRIX_NAME).ok_or_else(|| bad("index blob has no matrix"))?;
        let matrix = store.get(id).clone();
        if matrix.ncols() != side.d_z || matrix.nrows() != side.ids.len() {
            return Err(bad("index matrix shape disagrees with the sidecar"));
        }
        Self::from_parts(side.ids, matrix, side.checkpoint_hash).map_err(|e| bad(&e.to_string()))
    }

    /// Mean gold-member count and precision of each anchor's top-`k`.
    /// Anchors absent from the index are skipped.
    pub fn retrieval_diagnostics(&self, gold_bags: &[QueryBag], k: usize) -> Result<RetrievalDiagnostics> {
        let mut count = 0.0;
        let mut n = 0usize;
        for bag in gold_bags {
            if !self.contains(bag.anchor_id) {
                continue;
            }
            let gold: HashSet<QueryId> = bag.member_ids.iter().copied().collect();
            let list = self.search_id(bag.anchor_id, k)?;
            count += list.candidates.iter().filter(|(id, _)| gold.contains(id)).count() as f64;
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("retrieval diagnostics: no bag anchor is indexed"));
        }
        let mean = count / n as f64;
        Ok(RetrievalDiagnostics {
            mean_bag_recall_count: mean,
            candidate_accuracy: mean / k as f64,
            n_anchors: n,
            k,
        })
    }
}

/// Embed every query with the stage-1 model.
pub fn build_index<T: Scalar>(queries: &[Query], ck: &Stage1Checkpoint<T>) -> Result<EmbeddingIndex<T>> {
    if queries.is_empty() {
        return Err(Error::invalid("build_index: no queries"));
    }
    let tokens: Vec<Vec<u32>> = queries.iter().map(|q| ck.tokenize(&q.text)).collect();
    let refs: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
    let matrix = ck.embed_batch(&refs);
    EmbeddingIndex::from_parts(queries.iter().map(|q| q.id).collect(), matrix, ck.hash())
}

/// Normalise a vector to unit length.
pub fn unit<T: Scalar>(v: ArrayView1<'_, T>) -> Array1<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of(1e-12));
    v.mapv(|x| x / n)
}
