use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, QqPair, QueryBag, QueryId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Negatives per positive: 1:1 for train/valid, 1:9 for test.
    pub fn negatives_per_positive(self) -> usize {
        match self {
            Split::Train | Split::Valid => 1,
            Split::Test => 9,
        }
    }
}

/// One group per (anchor, member): the positive followed by its negatives,
/// drawn uniformly without replacement (per anchor) from corpus queries
/// outside the anchor's gold bag.
pub fn make_qq_pairs(
    bags: &[QueryBag],
    corpus: &Corpus,
    split: Split,
    seed: u64,
) -> Result<Vec<QqPair>> {
    if bags.is_empty() {
        return Err(Error::invalid("make_qq_pairs: no bags"));
    }
    if split == Split::Test && corpus.bags.len() < 10 {
        return Err(Error::invalid(format!(
            "test split needs at least 10 bags in the corpus, found {}",
            corpus.bags.len()
        )));
    }
    let ratio = split.negatives_per_positive();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut group = 0u32;
    for bag in bags {
        let anchor = bag.anchor_id;
        let excluded = |id: QueryId| {
            id == anchor || bag.member_ids.contains(&id) || corpus.same_bag(anchor, id)
        };
        let pool: Vec<QueryId> = corpus
            .queries
            .iter()
            .map(|q| q.id)
            .filter(|&id| !excluded(id))
            .collect();
        let needed = ratio * bag.member_ids.len();
        if pool.len() < needed {
            return Err(Error::InsufficientNegatives {
                anchor: anchor.0,
                needed,
                available: pool.len(),
            });
        }
        let drawn: Vec<QueryId> = sample(&mut rng, pool.len(), needed)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        for (m, &member) in bag.member_ids.iter().enumerate() {
            out.push(QqPair {
                query: anchor,
                question: member,
                label: 1,
                group,
            });
            for &neg in &drawn[m * ratio..(m + 1) * ratio] {
                out.push(QqPair {
                    query: anchor,
                    question: neg,
                    label: 0,
                    group,
                });
            }
            group += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Query;

    fn corpus(n_bags: u64) -> Corpus {
        let mut queries = Vec::new();
        let mut bags = Vec::new();
        for b in 0..n_bags {
            let base = b * 10;
            for i in 0..3 {
                queries.push(Query::new(base + i, format!("q {b} {i}")));
            }
            bags.push(QueryBag {
                anchor_id: QueryId(base),
                member_ids: vec![QueryId(base + 1), QueryId(base + 2)],
                gold: Some(vec![true, true]),
            });
        }
        Corpus::new(queries, bags).unwrap()
    }

    #[test]
    fn train_is_one_to_one() {
        let c = corpus(12);
        let pairs = make_qq_pairs(&c.bags[..1], &c, Split::Train, 1).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 2);
    }

    #[test]
    fn test_is_one_to_nine() {
        let c = corpus(12);
        let pairs = make_qq_pairs(&c.bags[..1], &c, Split::Test, 1).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 18);
        for g in 0..2 {
            assert_eq!(pairs.iter().filter(|p| p.group == g).count(), 10);
        }
    }

    #[test]
    fn negatives_never_share_a_bag_and_ratio_is_exact() {
        let c = corpus(15);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let pairs = make_qq_pairs(&c.bags, &c, split, 9).unwrap();
            let pos = pairs.iter().filter(|p| p.label == 1).count();
            let neg = pairs.iter().filter(|p| p.label == 0).count();
            assert_eq!(neg, pos * split.negatives_per_positive());
            for p in &pairs {
                assert_eq!(p.label == 1, c.same_bag(p.query, p.question));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let c = corpus(12);
        let a = make_qq_pairs(&c.bags, &c, Split::Test, 4).unwrap();
        let b = make_qq_pairs(&c.bags, &c, Split::Test, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_negatives_is_fatal() {
        let c = corpus(10);
        // bag 0 plus one singleton: a single out-of-bag query for two positives
        let tiny = Corpus::new(c.queries[..4].to_vec(), c.bags[..1].to_vec()).unwrap();
        match make_qq_pairs(&tiny.bags, &tiny, Split::Train, 0) {
            Err(Error::InsufficientNegatives { needed, available, .. }) => {
                assert_eq!((needed, available), (2, 1));
            }
            other => panic!("expected InsufficientNegatives, got {other:?}"),
        }
    }

    #[test]
    fn test_split_needs_ten_bags() {
        let c = corpus(5);
        assert!(make_qq_pairs(&c.bags, &c, Split::Test, 0).is_err());
    }
}
