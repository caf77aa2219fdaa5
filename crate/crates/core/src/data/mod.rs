//! Dataset ingestion, query-bag construction, Q-Q pair generation and the
//! synthetic paraphrase-cluster generator.

mod bags;
mod jsonl;
mod pairs;
mod synthetic;
mod tsv;
pub mod vocab;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use bags::{build_query_bags, queries_from_records, split_bags, BagSplit, SplitConfig, UnionFind};
pub use jsonl::{read_jsonl, write_jsonl, CorpusFiles};
pub use pairs::{make_qq_pairs, Split};
pub use synthetic::{gen_synthetic_corpus, SyntheticSpec};
pub use tsv::{load_duplicate_pairs, LoadedPairs, PairRecord};
pub use vocab::{split_words, tokenize, Vocabulary};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u64);

impl std::fmt::Display for QueryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// A question. `tokens` is derived from `text` and not persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

impl Query {
    pub fn new(id: u64, text: impl Into<String>) -> Self {
        Query {
            id: QueryId(id),
            text: text.into(),
            tokens: Vec::new(),
        }
    }
}

/// Synonymous questions anchored to one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBag {
    pub anchor_id: QueryId,
    pub member_ids: Vec<QueryId>,
    pub gold: Option<Vec<bool>>,
}

impl QueryBag {
    pub fn validate(&self) -> Result<()> {
        if self.member_ids.contains(&self.anchor_id) {
            return Err(Error::invalid(format!(
                "bag {}: anchor listed among members",
                self.anchor_id
            )));
        }
        let mut seen = self.member_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.member_ids.len() {
            return Err(Error::invalid(format!(
                "bag {}: duplicate members",
                self.anchor_id
            )));
        }
        if let Some(g) = &self.gold {
            if g.len() != self.member_ids.len() {
                return Err(Error::invalid(format!(
                    "bag {}: gold flags do not align with members",
                    self.anchor_id
                )));
            }
        }
        Ok(())
    }

    /// Anchor followed by members.
    pub fn all_ids(&self) -> impl Iterator<Item = QueryId> + '_ {
        std::iter::once(self.anchor_id).chain(self.member_ids.iter().copied())
    }
}

/// Labeled matching example. `group` ties each positive to the negatives
/// sampled for it, forming one ranking group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QqPair {
    pub query: QueryId,
    pub question: QueryId,
    pub label: u8,
    pub group: u32,
}

/// Query pool plus gold bags with id lookups.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub queries: Vec<Query>,
    pub bags: Vec<QueryBag>,
    by_id: HashMap<QueryId, usize>,
    bag_of: HashMap<QueryId, usize>,
}

impl Corpus {
    pub fn new(queries: Vec<Query>, bags: Vec<QueryBag>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if by_id.insert(q.id, i).is_some() {
                return Err(Error::invalid(format!("duplicate query id {}", q.id)));
            }
        }
        let mut bag_of = HashMap::new();
        for (b, bag) in bags.iter().enumerate() {
            bag.validate()?;
            for id in bag.all_ids() {
                if !by_id.contains_key(&id) {
                    return Err(Error::invalid(format!("bag references unknown query {id}")));
                }
                if bag_of.insert(id, b).is_some() {
                    return Err(Error::invalid(format!("query {id} appears in two bags")));
                }
            }
        }
        Ok(Corpus {
            queries,
            bags,
            by_id,
            bag_of,
        })
    }

    pub fn get(&self, id: QueryId) -> Option<&Query> {
        self.by_id.get(&id).map(|&i| &self.queries[i])
    }

    pub fn index_of(&self, id: QueryId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    /// Index into `bags` of the gold bag containing `id`.
    pub fn bag_of(&self, id: QueryId) -> Option<usize> {
        self.bag_of.get(&id).copied()
    }

    pub fn same_bag(&self, a: QueryId, b: QueryId) -> bool {
        matches!((self.bag_of(a), self.bag_of(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.queries.iter().map(|q| q.text.as_str())
    }

    /// Fill `tokens` of every query.
    pub fn tokenize(&mut self, vocab: &Vocabulary, max_len: usize) {
        for q in &mut self.queries {
            q.tokens = tokenize(&q.text, vocab, max_len);
        }
    }
}

/// Corpus plus Q-Q pairs for every split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train: Vec<QqPair>,
    pub valid: Vec<QqPair>,
    pub test: Vec<QqPair>,
}

impl Dataset {
    /// Split gold bags member-wise and generate pairs for each split.
    pub fn prepare(corpus: Corpus, split: &SplitConfig, seed: u64) -> Result<Self> {
        let parts = split_bags(&corpus.bags, split, seed);
        let train = make_qq_pairs(&parts.train, &corpus, Split::Train, seed.wrapping_add(1))?;
        let valid = if parts.valid.is_empty() {
            Vec::new()
        } else {
            make_qq_pairs(&parts.valid, &corpus, Split::Valid, seed.wrapping_add(2))?
        };
        let test = if parts.test.is_empty() {
            Vec::new()
        } else {
            make_qq_pairs(&parts.test, &corpus, Split::Test, seed.wrapping_add(3))?
        };
        Self::from_parts(corpus, train, valid, test)
    }

    pub fn from_parts(
        corpus: Corpus,
        train: Vec<QqPair>,
        valid: Vec<QqPair>,
        test: Vec<QqPair>,
    ) -> Result<Self> {
        for p in train.iter().chain(&valid).chain(&test) {
            for id in [p.query, p.question] {
                if corpus.get(id).is_none() {
                    return Err(Error::invalid(format!("pair references unknown query {id}")));
                }
            }
        }
        Ok(Dataset {
            corpus,
            train,
            valid,
            test,
        })
    }

    /// Questions held out as validation/test positives.
    pub fn held_out(&self) -> std::collections::HashSet<QueryId> {
        self.valid
            .iter()
            .chain(&self.test)
            .filter(|p| p.label == 1)
            .map(|p| p.question)
            .collect()
    }

    /// The retrievable question pool: every corpus query except held-out
    /// positives, in corpus order.
    pub fn train_pool(&self) -> Vec<QueryId> {
        let held = self.held_out();
        self.corpus
            .queries
            .iter()
            .map(|q| q.id)
            .filter(|id| !held.contains(id))
            .collect()
    }

    /// Distinct training queries (anchors), in first-seen order.
    pub fn train_anchors(&self) -> Vec<QueryId> {
        let mut seen = std::collections::HashSet::new();
        self.train
            .iter()
            .map(|p| p.query)
            .filter(|q| seen.insert(*q))
            .collect()
    }
}

/// Full ingestion path for a duplicate-pair TSV: queries, gold bags and a
/// corpus ready for [`Dataset::prepare`].
pub fn corpus_from_records(records: &[PairRecord]) -> Result<Corpus> {
    Corpus::new(bags::queries_from_records(records), build_query_bags(records))
}
