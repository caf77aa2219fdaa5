//! Ranking metrics and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{QqPair, QueryBag, QueryId};
use crate::error::{Error, Result};
use crate::matcher::rank_candidates;

/// Environment variable capping evaluation threads (default 1).
pub const THREADS_ENV: &str = "QBPRF_NUM_THREADS";

pub fn num_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// 1-based rank of the first relevant label.
pub fn first_relevant_rank(labels: &[bool]) -> Option<usize> {
    labels.iter().position(|&r| r).map(|i| i + 1)
}

/// Mean reciprocal rank; each entry lists relevance in ranked order.
pub fn mrr(ranked: &[Vec<bool>]) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::invalid("mrr: no rankings"));
    }
    let mut total = 0.0;
    for (i, labels) in ranked.iter().enumerate() {
        let r = first_relevant_rank(labels)
            .ok_or_else(|| Error::invalid(format!("mrr: ranking {i} has no relevant item")))?;
        total += 1.0 / r as f64;
    }
    Ok(total / ranked.len() as f64)
}

/// `R_n@k`: fraction of `n`-candidate rankings whose single positive is in
/// the top `k`.
pub fn recall_at(ranked: &[Vec<bool>], n: usize, k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::invalid("recall_at: no rankings"));
    }
    let mut hits = 0usize;
    for (i, labels) in ranked.iter().enumerate() {
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "recall_at: ranking {i} has {} candidates, expected {n}",
                labels.len()
            )));
        }
        if labels.iter().filter(|&&r| r).count() != 1 {
            return Err(Error::invalid(format!("recall_at: ranking {i} needs exactly one positive")));
        }
        if labels.iter().take(k).any(|&r| r) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean over anchors of the fraction of selected members that share the
/// anchor's gold bag. Anchors with nothing selected are skipped.
pub fn qbs_accuracy(selected: &[QueryBag], gold: &[QueryBag]) -> f64 {
    let mut bag_of: HashMap<QueryId, usize> = HashMap::new();
    for (i, b) in gold.iter().enumerate() {
        for id in b.all_ids() {
            bag_of.insert(id, i);
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for s in selected.iter().filter(|s| !s.member_ids.is_empty()) {
        let home = bag_of.get(&s.anchor_id);
        let hits = s
            .member_ids
            .iter()
            .filter(|m| home.is_some() && bag_of.get(m) == home)
            .count();
        total += hits as f64 / s.member_ids.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Scores a query against its candidate questions.
pub trait PairScorer: Sync {
    fn score(&self, query: QueryId, candidates: &[QueryId]) -> Result<Vec<f64>>;

    /// Several queries at once; scorers with per-call overhead batch here.
    fn score_many(&self, groups: &[(QueryId, Vec<QueryId>)]) -> Result<Vec<Vec<f64>>> {
        groups.iter().map(|(q, c)| self.score(*q, c)).collect()
    }
}

/// Groups handed to one `score_many` call.
pub const SCORE_CHUNK: usize = 32;

impl<F> PairScorer for F
where
    F: Fn(QueryId, &[QueryId]) -> Result<Vec<f64>> + Sync,
{
    fn score(&self, query: QueryId, candidates: &[QueryId]) -> Result<Vec<f64>> {
        self(query, candidates)
    }
}

/// One ranked evaluation group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRanking {
    pub group: u32,
    pub query: QueryId,
    /// Candidates best first with their scores.
    pub ranked: Vec<(QueryId, f64)>,
    /// Relevance in ranked order.
    pub labels: Vec<bool>,
}

/// Pairs grouped by their `group` field, in ascending group order.
pub fn group_pairs(pairs: &[QqPair], size: usize) -> Result<Vec<(u32, Vec<QqPair>)>> {
    let mut groups: BTreeMap<u32, Vec<QqPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.group).or_default().push(*p);
    }
    for (g, members) in &groups {
        if members.len() != size {
            return Err(Error::invalid(format!(
                "evaluation group {g} has {} pairs, expected {size}",
                members.len()
            )));
        }
        if members.iter().filter(|p| p.label == 1).count() != 1 {
            return Err(Error::invalid(format!("evaluation group {g} needs exactly one positive")));
        }
        if members.iter().any(|p| p.query != members[0].query) {
            return Err(Error::invalid(format!("evaluation group {g} mixes queries")));
        }
    }
    Ok(groups.into_iter().collect())
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(num_threads())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Score and rank every group of `size` pairs.
pub fn rank_groups<S: PairScorer + ?Sized>(scorer: &S, pairs: &[QqPair], size: usize) -> Result<Vec<GroupRanking>> {
    let groups = group_pairs(pairs, size)?;
    let run = || {
        groups
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| {
                let asks: Vec<(QueryId, Vec<QueryId>)> = chunk
                    .iter()
                    .map(|(_, members)| (members[0].query, members.iter().map(|p| p.question).collect()))
                    .collect();
                let scores = scorer.score_many(&asks)?;
                if scores.len() != asks.len() {
                    return Err(Error::invalid("scorer returned the wrong number of groups"));
                }
                chunk
                    .iter()
                    .zip(asks)
                    .zip(scores)
                    .map(|(((g, members), (query, ids)), scores)| {
                        if scores.len() != ids.len() {
                            return Err(Error::invalid("scorer returned the wrong number of scores"));
                        }
                        let positive = members.iter().find(|p| p.label == 1).expect("checked").question;
                        let pairs: Vec<(QueryId, f64)> = ids.into_iter().zip(scores).collect();
                        let ranked = rank_candidates(query, &pairs).candidates;
                        let labels = ranked.iter().map(|(id, _)| *id == positive).collect();
                        Ok(GroupRanking {
                            group: *g,
                            query,
                            ranked,
                            labels,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<Vec<_>>>>()
            .map(|v| v.into_iter().flatten().collect::<Vec<_>>())
    };
    thread_pool()?.install(run)
}

/// Test-set summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub r10_at_1: f64,
    pub r10_at_2: f64,
    pub r10_at_5: f64,
    pub r2_at_1: f64,
    pub n_queries: usize,
    pub config_fingerprint: String,
}

pub const REPORT_COLUMNS: [&str; 5] = ["MRR", "R10@1", "R10@2", "R10@5", "R2@1"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 5] {
        [self.mrr, self.r10_at_1, self.r10_at_2, self.r10_at_5, self.r2_at_1]
    }

    /// Header line plus one data row.
    pub fn to_tsv(&self) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("{}\n{}\n", REPORT_COLUMNS.join("\t"), vals.join("\t"))
    }

    /// Reports as TSV rows under a leading label column.
    pub fn table_tsv(label: &str, rows: &[(String, MetricsReport)]) -> String {
        let mut out = format!("{label}\t{}\n", REPORT_COLUMNS.join("\t"));
        for (name, r) in rows {
            let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{name}\t{}\n", vals.join("\t")));
        }
        out
    }

    /// Aligned plain-text table.
    pub fn pretty_table(label: &str, rows: &[(String, MetricsReport)]) -> String {
        let w = rows.iter().map(|(n, _)| n.len()).chain([label.len()]).max().unwrap_or(0);
        let mut out = format!("{label:<w$}");
        for c in REPORT_COLUMNS {
            out.push_str(&format!("  {c:>7}"));
        }
        out.push('\n');
        for (name, r) in rows {
            out.push_str(&format!("{name:<w$}"));
            for v in r.values() {
                out.push_str(&format!("  {v:>7.4}"));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Self::pretty_table("", &[(String::new(), self.clone())]))
    }
}

/// Metrics over test groups of one positive and nine negatives. `R2@1`
/// pairs each positive with one negative drawn with `seed`.
pub fn build_report<S: PairScorer + ?Sized>(
    scorer: &S,
    test_pairs: &[QqPair],
    seed: u64,
    fingerprint: &str,
) -> Result<MetricsReport> {
    let groups = rank_groups(scorer, test_pairs, 10)?;
    let labels: Vec<Vec<bool>> = groups.iter().map(|g| g.labels.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two: Vec<Vec<bool>> = groups
        .iter()
        .map(|g| {
            let negatives: Vec<&(QueryId, f64)> = g.ranked.iter().zip(&g.labels).filter(|(_, &l)| !l).map(|(c, _)| c).collect();
            let pos = g.ranked.iter().zip(&g.labels).find(|(_, &l)| l).map(|(c, _)| *c).expect("one positive");
            let neg = **negatives.choose(&mut rng).expect("nine negatives");
            let r = rank_candidates(g.query, &[pos, neg]);
            r.candidates.iter().map(|(id, _)| *id == pos.0).collect()
        })
        .collect();
    let report = MetricsReport {
        mrr: mrr(&labels)?,
        r10_at_1: recall_at(&labels, 10, 1)?,
        r10_at_2: recall_at(&labels, 10, 2)?,
        r10_at_5: recall_at(&labels, 10, 5)?,
        r2_at_1: recall_at(&two, 2, 1)?,
        n_queries: groups.len(),
        config_fingerprint: fingerprint.to_string(),
    };
    debug_assert!(report.r10_at_1 <= report.r10_at_2 && report.r10_at_2 <= report.r10_at_5);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(rank: usize, n: usize) -> Vec<bool> {
        (1..=n).map(|i| i == rank).collect()
    }

    #[test]
    fn mrr_fixtures() {
        assert_eq!(mrr(&[at(1, 10)]).unwrap(), 1.0);
        assert_eq!(mrr(&[at(4, 10)]).unwrap(), 0.25);
        assert!((mrr(&[at(1, 10), at(3, 10)]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mrr(&[vec![false; 3]]).is_err());
    }

    #[test]
    fn recall_fixtures() {
        assert_eq!(recall_at(&[at(2, 10)], 10, 2).unwrap(), 1.0);
        assert_eq!(recall_at(&[at(3, 10)], 10, 2).unwrap(), 0.0);
        let four = [at(1, 10), at(2, 10), at(5, 10), at(7, 10)];
        assert_eq!(recall_at(&four, 10, 2).unwrap(), 0.5);
        assert_eq!(recall_at(&four, 10, 5).unwrap(), 0.75);
        assert!(recall_at(&[at(1, 9)], 10, 1).is_err());
    }

    #[test]
    fn qbs_accuracy_fixtures() {
        let ids = |v: &[u64]| v.iter().map(|&i| QueryId(i)).collect::<Vec<_>>();
        let gold = vec![
            QueryBag {
                anchor_id: QueryId(1),
                member_ids: ids(&[2, 3, 4]),
                gold: None,
            },
            QueryBag {
                anchor_id: QueryId(10),
                member_ids: ids(&[11, 12]),
                gold: None,
            },
        ];
        let sel = |m: &[u64]| QueryBag {
            anchor_id: QueryId(1),
            member_ids: ids(m),
            gold: None,
        };
        assert_eq!(qbs_accuracy(&[sel(&[2, 3])], &gold), 1.0);
        assert_eq!(qbs_accuracy(&[sel(&[11, 12])], &gold), 0.0);
        assert!((qbs_accuracy(&[sel(&[2, 3, 4, 11, 12])], &gold) - 0.6).abs() < 1e-15);
    }

    fn groups(n: u32) -> Vec<QqPair> {
        let mut out = Vec::new();
        for g in 0..n {
            for j in 0..10u64 {
                out.push(QqPair {
                    query: QueryId(100_000 + g as u64),
                    question: QueryId(g as u64 * 10 + j),
                    label: u8::from(j == (g as u64 * 7) % 10),
                    group: g,
                });
            }
        }
        out
    }

    #[test]
    fn perfect_scorer_is_perfect() {
        let pairs = groups(20);
        let positives: std::collections::HashSet<QueryId> =
            pairs.iter().filter(|p| p.label == 1).map(|p| p.question).collect();
        let scorer = |_q: QueryId, c: &[QueryId]| -> Result<Vec<f64>> {
            Ok(c.iter().map(|id| f64::from(u8::from(positives.contains(id)))).collect())
        };
        let r = build_report(&scorer, &pairs, 0, "fp").unwrap();
        assert_eq!(r.values(), [1.0; 5]);
        assert_eq!(r.n_queries, 20);
        assert!(r.to_tsv().starts_with("MRR\tR10@1\tR10@2\tR10@5\tR2@1\n"));
    }

    #[test]
    fn wrong_group_size_is_rejected() {
        let mut pairs = groups(2);
        pairs.pop();
        let scorer = |_q: QueryId, c: &[QueryId]| -> Result<Vec<f64>> { Ok(vec![0.0; c.len()]) };
        assert!(build_report(&scorer, &pairs, 0, "").is_err());
    }

    proptest! {
        #[test]
        fn mrr_dominates_r1_and_recall_is_monotone(ranks in prop::collection::vec(1usize..=10, 1..40)) {
            let lists: Vec<Vec<bool>> = ranks.iter().map(|&r| at(r, 10)).collect();
            let m = mrr(&lists).unwrap();
            prop_assert!(m >= recall_at(&lists, 10, 1).unwrap());
            let mut prev = 0.0;
            for k in 1..=10 {
                let r = recall_at(&lists, 10, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn metrics_ignore_candidate_ids(offset in 1u64..1000, seed in 0u64..50) {
            let pairs = groups(8);
            let shifted: Vec<QqPair> = pairs
                .iter()
                .map(|p| QqPair { question: QueryId(p.question.0 * 3 + offset), ..*p })
                .collect();
            // score by the hidden position within the group, not the id
            let score_of = |ps: &[QqPair]| {
                let table: HashMap<QueryId, f64> =
                    ps.iter().enumerate().map(|(i, p)| (p.question, ((i * 37) % 10) as f64)).collect();
                move |_q: QueryId, c: &[QueryId]| -> Result<Vec<f64>> { Ok(c.iter().map(|id| table[id]).collect()) }
            };
            let a = build_report(&score_of(&pairs), &pairs, seed, "").unwrap();
            let b = build_report(&score_of(&shifted), &shifted, seed, "").unwrap();
            prop_assert_eq!(a.values(), b.values());
        }
    }
}
