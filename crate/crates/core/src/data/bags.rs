use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PairRecord, Query, QueryBag, QueryId};

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Distinct questions in `records`, first-seen text wins, sorted by id.
pub fn queries_from_records(records: &[PairRecord]) -> Vec<Query> {
    let mut seen: BTreeMap<u64, &str> = BTreeMap::new();
    for r in records {
        seen.entry(r.id1).or_insert(&r.text1);
        seen.entry(r.id2).or_insert(&r.text2);
    }
    seen.into_iter().map(|(id, t)| Query::new(id, t)).collect()
}

/// Connected components of the duplicate graph with at least two nodes.
/// The lowest id anchors each bag; members are ascending. Bags are ordered
/// by anchor id.
pub fn build_query_bags(records: &[PairRecord]) -> Vec<QueryBag> {
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut ids = Vec::new();
    for r in records.iter().filter(|r| r.is_duplicate) {
        for id in [r.id1, r.id2] {
            index.entry(id).or_insert_with(|| {
                ids.push(id);
                ids.len() - 1
            });
        }
    }
    let mut uf = UnionFind::new(ids.len());
    for r in records.iter().filter(|r| r.is_duplicate) {
        uf.union(index[&r.id1], index[&r.id2]);
    }
    let mut groups: HashMap<usize, Vec<u64>> = HashMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(id);
    }
    let mut bags: Vec<QueryBag> = groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort_unstable();
            let members: Vec<QueryId> = g[1..].iter().map(|&i| QueryId(i)).collect();
            QueryBag {
                anchor_id: QueryId(g[0]),
                gold: Some(vec![true; members.len()]),
                member_ids: members,
            }
        })
        .collect();
    bags.sort_by_key(|b| b.anchor_id);
    bags
}

/// How many members of each gold bag go to the held-out splits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub valid_members_per_bag: usize,
    pub test_members_per_bag: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            valid_members_per_bag: 1,
            test_members_per_bag: 1,
        }
    }
}

/// Per-split sub-bags sharing the gold bag's anchor.
#[derive(Debug, Clone, Default)]
pub struct BagSplit {
    pub train: Vec<QueryBag>,
    pub valid: Vec<QueryBag>,
    pub test: Vec<QueryBag>,
}

impl BagSplit {
    /// Ids held out of training (valid and test members).
    pub fn held_out(&self) -> impl Iterator<Item = QueryId> + '_ {
        self.valid
            .iter()
            .chain(&self.test)
            .flat_map(|b| b.member_ids.iter().copied())
    }
}

/// Partition each bag's members across train / valid / test. Every bag keeps
/// at least one training member; the test share is filled before the
/// validation share.
pub fn split_bags(bags: &[QueryBag], cfg: &SplitConfig, seed: u64) -> BagSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BagSplit::default();
    for bag in bags {
        let mut members = bag.member_ids.clone();
        members.shuffle(&mut rng);
        let spare = members.len().saturating_sub(1);
        let n_test = cfg.test_members_per_bag.min(spare);
        let n_valid = cfg.valid_members_per_bag.min(spare - n_test);
        let mut test: Vec<QueryId> = members.drain(..n_test).collect();
        let mut valid: Vec<QueryId> = members.drain(..n_valid).collect();
        let mut train = members;
        for (dst, ids) in [
            (&mut out.train, &mut train),
            (&mut out.valid, &mut valid),
            (&mut out.test, &mut test),
        ] {
            if ids.is_empty() {
                continue;
            }
            ids.sort_unstable();
            dst.push(QueryBag {
                anchor_id: bag.anchor_id,
                gold: Some(vec![true; ids.len()]),
                member_ids: std::mem::take(ids),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(a: u64, b: u64, dup: bool) -> PairRecord {
        PairRecord {
            id1: a,
            id2: b,
            text1: format!("q{a}"),
            text2: format!("q{b}"),
            is_duplicate: dup,
        }
    }

    #[test]
    fn transitive_closure() {
        let bags = build_query_bags(&[rec(1, 2, true), rec(2, 3, true)]);
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].anchor_id, QueryId(1));
        assert_eq!(bags[0].member_ids, vec![QueryId(2), QueryId(3)]);
        assert_eq!(bags[0].gold, Some(vec![true, true]));
    }

    #[test]
    fn non_duplicates_form_no_bag() {
        assert!(build_query_bags(&[rec(1, 2, false)]).is_empty());
    }

    #[test]
    fn separate_components() {
        let bags = build_query_bags(&[rec(1, 2, true), rec(3, 4, true)]);
        assert_eq!(bags.len(), 2);
    }

    /// Components by repeated relaxation over the edge list.
    fn brute_force_components(edges: &[(u64, u64)]) -> Vec<Vec<u64>> {
        let mut label: BTreeMap<u64, u64> = BTreeMap::new();
        for &(a, b) in edges {
            label.insert(a, a);
            label.insert(b, b);
        }
        loop {
            let mut changed = false;
            for &(a, b) in edges {
                let m = label[&a].min(label[&b]);
                for n in [a, b] {
                    if label[&n] != m {
                        label.insert(n, m);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut comps: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (n, l) in label {
            comps.entry(l).or_default().push(n);
        }
        comps.into_values().collect()
    }

    proptest! {
        #[test]
        fn bags_match_component_enumeration(edges in proptest::collection::vec((0u64..30, 0u64..30), 0..40)) {
            let edges: Vec<(u64, u64)> = edges.into_iter().filter(|(a, b)| a != b).collect();
            let records: Vec<PairRecord> = edges.iter().map(|&(a, b)| rec(a, b, true)).collect();
            let bags = build_query_bags(&records);
            let got: Vec<Vec<u64>> = bags.iter().map(|b| b.all_ids().map(|i| i.0).collect()).collect();
            let want: Vec<Vec<u64>> = brute_force_components(&edges).into_iter().filter(|c| c.len() >= 2).collect();
            prop_assert_eq!(got, want);
            // partition: no id in two bags
            let mut all: Vec<u64> = bags.iter().flat_map(|b| b.all_ids().map(|i| i.0)).collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn split_keeps_a_training_member() {
        let bag = |a: u64, n: u64| QueryBag {
            anchor_id: QueryId(a),
            member_ids: (1..=n).map(|i| QueryId(a + i)).collect(),
            gold: None,
        };
        let s = split_bags(&[bag(0, 1), bag(10, 2), bag(20, 7)], &SplitConfig::default(), 3);
        assert_eq!(s.train.len(), 3);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.valid.len(), 1);
        let big = s.train.iter().find(|b| b.anchor_id == QueryId(20)).unwrap();
        assert_eq!(big.member_ids.len(), 5);
        assert_eq!(s.held_out().count(), 3);
    }
}
