use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Query, QueryBag, QueryId};
use crate::error::{Error, Result};

/// Shape of a synthetic paraphrase corpus. Each cluster owns a disjoint
/// set of topic words; a paraphrase uses at least 60% of them plus words
/// drawn from a shared noise pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub paraphrases_per_cluster: usize,
    pub vocab_size: usize,
    pub topic_words: usize,
    pub min_noise: usize,
    pub max_noise: usize,
}

/// Queries, gold bags and each cluster's topic words.
pub type TopicCorpus = (Vec<Query>, Vec<QueryBag>, Vec<Vec<String>>);

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clusters: 200,
            paraphrases_per_cluster: 8,
            vocab_size: 1400,
            topic_words: 5,
            min_noise: 3,
            max_noise: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn min_topic_words(&self) -> usize {
        (self.topic_words * 3).div_ceil(5)
    }

    pub fn generate(&self, seed: u64) -> Result<(Vec<Query>, Vec<QueryBag>)> {
        self.generate_with_topics(seed).map(|(q, b, _)| (q, b))
    }

    /// As [`generate`](Self::generate), also returning each cluster's topic
    /// words.
    pub fn generate_with_topics(
        &self,
        seed: u64,
    ) -> Result<TopicCorpus> {
        if self.n_clusters < 2 || self.paraphrases_per_cluster < 2 {
            return Err(Error::invalid(
                "synthetic corpus needs at least 2 clusters of at least 2 paraphrases",
            ));
        }
        if self.topic_words == 0 || self.min_noise > self.max_noise {
            return Err(Error::invalid("synthetic corpus: bad topic/noise sizes"));
        }
        let topic_total = self.n_clusters * self.topic_words;
        if self.vocab_size < topic_total + self.max_noise {
            return Err(Error::invalid(format!(
                "vocab_size {} too small: {} clusters x {} topic words plus a noise pool of {} need {}",
                self.vocab_size,
                self.n_clusters,
                self.topic_words,
                self.max_noise,
                topic_total + self.max_noise
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = (0..self.vocab_size).map(|i| format!("w{i}")).collect();
        words.shuffle(&mut rng);
        let (topic, noise) = words.split_at(topic_total);

        let mut queries = Vec::with_capacity(self.n_clusters * self.paraphrases_per_cluster);
        let mut bags = Vec::with_capacity(self.n_clusters);
        let mut next_id = 1u64;
        let mut topics = Vec::with_capacity(self.n_clusters);
        for c in 0..self.n_clusters {
            let own = &topic[c * self.topic_words..(c + 1) * self.topic_words];
            topics.push(own.to_vec());
            let first = next_id;
            for _ in 0..self.paraphrases_per_cluster {
                let n_topic = rng.random_range(self.min_topic_words()..=self.topic_words);
                let n_noise = rng.random_range(self.min_noise..=self.max_noise);
                let mut sentence: Vec<&str> = sample(&mut rng, own.len(), n_topic)
                    .into_iter()
                    .map(|i| own[i].as_str())
                    .chain(
                        sample(&mut rng, noise.len(), n_noise)
                            .into_iter()
                            .map(|i| noise[i].as_str()),
                    )
                    .collect();
                sentence.shuffle(&mut rng);
                queries.push(Query::new(next_id, format!("{}?", sentence.join(" "))));
                next_id += 1;
            }
            let members: Vec<QueryId> = (first + 1..next_id).map(QueryId).collect();
            bags.push(QueryBag {
                anchor_id: QueryId(first),
                gold: Some(vec![true; members.len()]),
                member_ids: members,
            });
        }
        Ok((queries, bags, topics))
    }
}

/// Paraphrase clusters for desk-scale runs; gold bags equal clusters.
pub fn gen_synthetic_corpus(
    n_clusters: usize,
    paraphrases_per_cluster: usize,
    vocab_size: usize,
    rng_seed: u64,
) -> Result<(Vec<Query>, Vec<QueryBag>)> {
    SyntheticSpec {
        n_clusters,
        paraphrases_per_cluster,
        vocab_size,
        ..SyntheticSpec::default()
    }
    .generate(rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_words;
    use std::collections::HashSet;

    #[test]
    fn counts() {
        let (q, b) = gen_synthetic_corpus(3, 2, 100, 7).unwrap();
        assert_eq!(q.len(), 6);
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|b| b.member_ids.len() == 1));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_synthetic_corpus(5, 4, 200, 11).unwrap(),
            gen_synthetic_corpus(5, 4, 200, 11).unwrap()
        );
        assert_ne!(
            gen_synthetic_corpus(5, 4, 200, 11).unwrap().0,
            gen_synthetic_corpus(5, 4, 200, 12).unwrap().0
        );
    }

    #[test]
    fn vocab_too_small_is_fatal() {
        assert!(gen_synthetic_corpus(50, 4, 100, 0).is_err());
        assert!(gen_synthetic_corpus(1, 4, 100, 0).is_err());
    }

    fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
        a.intersection(b).count() as f64 / a.union(b).count() as f64
    }

    #[test]
    fn intra_cluster_jaccard_exceeds_inter_cluster() {
        let (q, bags) = gen_synthetic_corpus(20, 6, 400, 3).unwrap();
        let sets: Vec<HashSet<String>> = q.iter().map(|q| split_words(&q.text).into_iter().collect()).collect();
        let cluster_of = |i: usize| {
            let id = q[i].id;
            bags.iter().position(|b| b.all_ids().any(|x| x == id)).unwrap()
        };
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..q.len() {
            for j in i + 1..q.len() {
                let s = jaccard(&sets[i], &sets[j]);
                if cluster_of(i) == cluster_of(j) {
                    intra += s;
                    ni += 1;
                } else {
                    inter += s;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra > inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn paraphrases_cover_at_least_sixty_percent_of_topic() {
        let spec = SyntheticSpec { n_clusters: 4, paraphrases_per_cluster: 5, vocab_size: 60, ..Default::default() };
        let (q, bags, topics) = spec.generate_with_topics(1).unwrap();
        let all: HashSet<&String> = topics.iter().flatten().collect();
        assert_eq!(all.len(), 4 * spec.topic_words, "topic sets must be disjoint");
        for (bag, topic) in bags.iter().zip(&topics) {
            for id in bag.all_ids() {
                let words: HashSet<String> = split_words(&q[(id.0 - 1) as usize].text).into_iter().collect();
                let shared = topic.iter().filter(|w| words.contains(*w)).count();
                assert!(shared * 5 >= topic.len() * 3, "only {shared} topic words");
            }
        }
    }
}
