//! Stage-2 joint training of selection, fusion and matching, plus the
//! ablation runs and the top-k sweep.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::data::{
    corpus_from_records, load_duplicate_pairs, Corpus, Dataset, QqPair, Query, QueryBag, QueryId, SplitConfig, SyntheticSpec,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::index::{EmbeddingIndex, RankedList};
use crate::matcher::{loss_ce, Matcher, MatcherConfig};
use crate::metrics::{self, MetricsReport, PairScorer};
use crate::nn::masked_mean_rows;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::qbf::{fuse_sum, unfused, FusedQuery, Fusion, QbfConfig, Seq};
use crate::qbs::{self, loss_bag_infonce, loss_reward_batch, pseudo_positive_mask, QbsConfig, Selector, SelectorOutput, SeqRows};
use crate::scalar::Scalar;
use crate::vae::{Encoded, Sampling, Stage1Checkpoint, Stage1Config, Vae, VAE_PREFIX};

/// Which parts of the pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Selection, fusion and matching.
    None,
    /// Bag is the raw top-k; no selector and no selection losses.
    NoQbs,
    /// Selected bag merged by summing pooled vectors.
    NoQbf,
    /// Plain query-question matcher without any bag.
    Baseline,
}

impl Ablation {
    pub fn uses_selector(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoQbf)
    }

    pub fn uses_bag(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "qb_prf",
            Ablation::NoQbs => "no_qbs",
            Ablation::NoQbf => "no_qbf",
            Ablation::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" | "qb_prf" => Ok(Ablation::None),
            "no_qbs" | "no-qbs" => Ok(Ablation::NoQbs),
            "no_qbf" | "no-qbf" => Ok(Ablation::NoQbf),
            "baseline" => Ok(Ablation::Baseline),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, no_qbs, no_qbf or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    /// Anchors per batch; each brings all of its training pairs.
    pub batch_size: usize,
    /// Retrieved candidates per query.
    pub k: usize,
    /// Fraction of an epoch between validations.
    pub validation_interval: f64,
    pub max_epochs: usize,
    pub ablation: Ablation,
    /// Re-embed the pool with the fine-tuned encoder after every epoch.
    pub rebuild_index: bool,
    pub rng_seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda1: 0.5,
            lambda2: 0.1,
            learning_rate: 1e-5,
            batch_size: 8,
            k: 10,
            validation_interval: 0.1,
            max_epochs: 3,
            ablation: Ablation::None,
            rebuild_index: false,
            rng_seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn desk() -> Self {
        Stage2Config {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage2: {m}")));
        if !(0.0..=1.0).contains(&self.lambda1) {
            return bad("lambda1 must lie in [0, 1]");
        }
        if !(self.lambda2 >= 0.0) {
            return bad("lambda2 must be >= 0");
        }
        if !(self.validation_interval > 0.0 && self.validation_interval <= 1.0) {
            return bad("validation_interval must lie in (0, 1]");
        }
        if self.k == 0 || self.batch_size == 0 {
            return bad("k and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }

    /// `(lambda1, lambda2)` actually applied: without the selector the
    /// selection terms vanish and the matching loss carries weight 1.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        if self.ablation.uses_selector() {
            (self.lambda1, self.lambda2)
        } else {
            (0.0, 1.0)
        }
    }
}

/// Sub-module widths of the stage-2 model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Architecture {
    pub qbs: QbsConfig,
    pub qbf: QbfConfig,
    pub matcher: MatcherConfig,
}


impl Architecture {
    pub fn desk() -> Self {
        Architecture {
            qbs: QbsConfig::desk(),
            qbf: QbfConfig::desk(),
            matcher: MatcherConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.qbs.validate()?;
        self.qbf.validate()?;
        if self.matcher.heads == 0 || !self.qbf.d_model.is_multiple_of(self.matcher.heads) {
            return Err(Error::Config("matcher: d_model is not divisible by heads".into()));
        }
        Ok(())
    }
}

/// Total stage-2 objective from its parts.
pub fn stage2_total(lambda1: f64, lambda2: f64, l_b: f64, l_reward: f64, l_ce: f64) -> f64 {
    lambda1 * l_b + (1.0 - lambda1) * l_reward + lambda2 * l_ce
}

/// Everything stage 2 needs besides parameters: the split, the frozen
/// stage-1 embedder and index, token ids and cached retrievals.
pub struct Stage2Data<'a, T: Scalar> {
    pub dataset: &'a Dataset,
    pub stage1: &'a Stage1Checkpoint<T>,
    pub index: EmbeddingIndex<T>,
    tokens: HashMap<QueryId, Vec<u32>>,
    retrieval: HashMap<QueryId, RankedList<T>>,
    depth: usize,
}

impl<'a, T: Scalar> Stage2Data<'a, T> {
    /// Tokenise the corpus and retrieve `k_max + 1` candidates for every
    /// query that appears in a pair.
    pub fn new(dataset: &'a Dataset, stage1: &'a Stage1Checkpoint<T>, index: EmbeddingIndex<T>, k_max: usize) -> Result<Self> {
        if index.d_z() != stage1.config.d_z {
            return Err(Error::invalid("index dimension differs from the stage-1 model"));
        }
        let tokens = dataset
            .corpus
            .queries
            .iter()
            .map(|q| (q.id, stage1.tokenize(&q.text)))
            .collect();
        let mut data = Stage2Data {
            dataset,
            stage1,
            index,
            tokens,
            retrieval: HashMap::new(),
            depth: k_max + 1,
        };
        data.refresh_retrieval()?;
        Ok(data)
    }

    fn refresh_retrieval(&mut self) -> Result<()> {
        let mut anchors: Vec<QueryId> = self
            .dataset
            .train
            .iter()
            .chain(&self.dataset.valid)
            .chain(&self.dataset.test)
            .map(|p| p.query)
            .collect();
        anchors.sort_unstable();
        anchors.dedup();
        self.retrieval.clear();
        for a in anchors {
            let list = self.retrieve(a, self.depth)?;
            self.retrieval.insert(a, list);
        }
        Ok(())
    }

    fn retrieve(&self, id: QueryId, depth: usize) -> Result<RankedList<T>> {
        let available = self.index.len() - usize::from(self.index.contains(id));
        let depth = depth.min(available);
        match self.index.vector(id) {
            Some(_) => self.index.search_id(id, depth),
            None => {
                let q = self
                    .dataset
                    .corpus
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown query {id}")))?;
                let v = self.stage1.embed_query(q);
                self.index.search(v.view(), depth, None)
            }
        }
    }

    /// Cached retrieval for `id`, at least `k + 1` deep when the pool allows.
    pub fn candidates(&self, id: QueryId, k: usize) -> Result<RankedList<T>> {
        match self.retrieval.get(&id) {
            Some(l) if l.len() >= (k + 1).min(self.index.len() - 1) => Ok(l.truncated(k + 1)),
            _ => self.retrieve(id, k + 1),
        }
    }

    pub fn tokens(&self, id: QueryId) -> Result<&[u32]> {
        self.tokens
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown query {id}")))
    }

    /// Replace the index and recompute cached retrievals.
    pub fn replace_index(&mut self, index: EmbeddingIndex<T>) -> Result<()> {
        self.index = index;
        self.refresh_retrieval()
    }
}

/// Bag used when scoring `candidate`: the retrieved list without the
/// candidate itself, cut to `k`, then the selector's top `bag_size` (or
/// the whole list when no selector runs).
fn bag_for<T: Scalar>(
    list: &[(QueryId, T)],
    probs: Option<&HashMap<QueryId, T>>,
    candidate: QueryId,
    k: usize,
    bag_size: usize,
) -> Vec<QueryId> {
    let ids: Vec<QueryId> = list.iter().map(|c| c.0).filter(|&id| id != candidate).take(k).collect();
    match probs {
        None => ids,
        Some(p) => {
            let pv: Vec<T> = ids.iter().map(|id| p[id]).collect();
            qbs::top_indices(&ids, &pv, bag_size).into_iter().map(|i| ids[i]).collect()
        }
    }
}

/// Graph outputs for a batch of anchors.
pub struct ForwardOutput<T> {
    /// `n x 1` match probabilities, pairs in input order.
    pub y_hat: Option<Var>,
    pub l_b: Option<Var>,
    pub l_reward: Option<Var>,
    pub selections: Vec<Option<SelectorOutput<T>>>,
}

/// The stage-2 model: fine-tuned encoder, selector, fusion and matcher
/// in one parameter store.
#[derive(Debug)]
pub struct Stage2Model<T> {
    pub store: ParamStore<T>,
    pub vae: Vae,
    pub selector: Selector,
    pub fusion: Fusion,
    pub matcher: Matcher,
    pub stage1_config: Stage1Config,
    pub vocab: Vocabulary,
    pub config: Stage2Config,
    pub arch: Architecture,
    selector_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Stage2Model<T> {
    fn clone(&self) -> Self {
        Stage2Model {
            store: self.store.clone(),
            vae: self.vae.clone(),
            selector: self.selector.clone(),
            fusion: self.fusion.clone(),
            matcher: self.matcher.clone(),
            stage1_config: self.stage1_config.clone(),
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            arch: self.arch.clone(),
            selector_calls: AtomicUsize::new(self.selector_calls()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentHashes {
    vae: String,
    qbs: String,
    qbf: String,
    matcher: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage2Manifest {
    format_version: u32,
    kind: String,
    dtype: String,
    components: ComponentHashes,
    config: Stage2Config,
    arch: Architecture,
    stage1_config: Stage1Config,
    vocab: Vocabulary,
}

impl<T: Scalar> Stage2Model<T> {
    /// Encoder copied from stage 1; other components freshly initialised.
    pub fn init(stage1: &Stage1Checkpoint<T>, config: &Stage2Config, arch: &Architecture) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x0051_4253);
        let mut store = stage1.store.clone();
        let state_dim = stage1.config.state_dim();
        let selector = Selector::new(&mut store, "qbs", state_dim, &arch.qbs, &mut rng);
        let fusion = Fusion::new(&mut store, "qbf", &arch.qbf, &mut rng);
        let matcher = Matcher::new(&mut store, "matcher", state_dim, arch.qbf.d_model, &arch.matcher, &mut rng);
        Stage2Model {
            store,
            vae: stage1.model.clone(),
            selector,
            fusion,
            matcher,
            stage1_config: stage1.config.clone(),
            vocab: stage1.vocab.clone(),
            config: config.clone(),
            arch: arch.clone(),
            selector_calls: AtomicUsize::new(0),
        }
    }

    /// Number of selector evaluations so far.
    pub fn selector_calls(&self) -> usize {
        self.selector_calls.load(Ordering::Relaxed)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.store.hash_prefix("").as_bytes());
        h.update(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        h.update(serde_json::to_string(&self.arch).unwrap_or_default().as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Batched forward pass. `items` pairs each anchor with the questions
    /// to score; selection losses are built when `losses` is set.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        data: &Stage2Data<'_, T>,
        items: &[(QueryId, Vec<QueryId>)],
        k: usize,
        losses: bool,
    ) -> Result<ForwardOutput<T>> {
        let mode = self.config.ablation;
        let bag_size = self.arch.qbs.bag_size;
        // retrieval lists (k + 1 deep for leave-one-out bags)
        let lists: Vec<Vec<(QueryId, T)>> = if mode.uses_bag() {
            items
                .iter()
                .map(|(a, _)| data.candidates(*a, k).map(|l| l.candidates))
                .collect::<Result<_>>()?
        } else {
            vec![Vec::new(); items.len()]
        };
        // one encoder pass over every distinct sequence
        let mut ids: Vec<QueryId> = Vec::new();
        let mut pos: HashMap<QueryId, usize> = HashMap::new();
        let mut add = |id: QueryId, ids: &mut Vec<QueryId>| {
            pos.entry(id).or_insert_with(|| {
                ids.push(id);
                ids.len() - 1
            });
        };
        for ((a, qs), list) in items.iter().zip(&lists) {
            add(*a, &mut ids);
            for c in list {
                add(c.0, &mut ids);
            }
            for q in qs {
                add(*q, &mut ids);
            }
        }
        let toks: Vec<&[u32]> = ids.iter().map(|id| data.tokens(*id)).collect::<Result<_>>()?;
        let enc = self.vae.encode(g, &toks, Sampling::Deterministic, 0.0);
        let rows = |id: QueryId, enc: &Encoded| {
            let p = pos[&id];
            SeqRows {
                rows: enc.rows_of(p),
                valid: enc.valid[p].clone(),
            }
        };

        // selection
        let mut selections = vec![None; items.len()];
        let mut prob_maps: Vec<Option<HashMap<QueryId, T>>> = vec![None; items.len()];
        let mut l_b = None;
        let mut l_reward = None;
        if mode.uses_selector() {
            self.selector_calls.fetch_add(1, Ordering::Relaxed);
            let mut seqs: Vec<(SeqRows, SeqRows)> = Vec::new();
            let mut offsets = vec![0usize];
            for ((a, _), list) in items.iter().zip(&lists) {
                for c in list {
                    seqs.push((rows(*a, &enc), rows(c.0, &enc)));
                }
                offsets.push(seqs.len());
            }
            let pairs: Vec<(&SeqRows, &SeqRows)> = seqs.iter().map(|(a, b)| (a, b)).collect();
            let probs = self.selector.probs(g, enc.states, &pairs);
            let pv = g.value(probs).column(0).to_vec();
            let mut reward_rows = Vec::new();
            let mut reward_cands = Vec::new();
            let mut reward_offsets = vec![0usize];
            let mut anchors_mu = Vec::new();
            for (i, ((a, _), list)) in items.iter().zip(&lists).enumerate() {
                let span = offsets[i]..offsets[i + 1];
                let first_k = k.min(list.len());
                let cand_ids: Vec<QueryId> = list[..first_k].iter().map(|c| c.0).collect();
                let p: Vec<T> = pv[span.clone()][..first_k].to_vec();
                let out = SelectorOutput::new(*a, cand_ids, p, bag_size)?;
                for j in out.selected_indices() {
                    reward_rows.push(offsets[i] + j);
                    reward_cands.push(pos[&list[j].0]);
                }
                reward_offsets.push(reward_rows.len());
                anchors_mu.push(pos[a]);
                prob_maps[i] = Some(list.iter().map(|c| c.0).zip(pv[span].iter().copied()).collect());
                selections[i] = Some(out);
            }
            if losses {
                let q_mu = g.gather_rows(enc.mu, &anchors_mu);
                let c_mu = g.gather_rows(enc.mu, &reward_cands);
                let p_sel = g.gather_rows(probs, &reward_rows);
                l_reward = Some(loss_reward_batch(
                    g,
                    q_mu,
                    c_mu,
                    p_sel,
                    &reward_offsets,
                    self.arch.qbs.tau1,
                    self.arch.qbs.tau2,
                ));
                let first_k = lists.iter().map(|l| k.min(l.len())).min().unwrap_or(0);
                if first_k > 0 {
                    let scores: Vec<Vec<T>> = lists.iter().map(|l| l[..first_k].iter().map(|c| c.1).collect()).collect();
                    let mask = pseudo_positive_mask(&scores);
                    let cand_pos: Vec<usize> = lists.iter().flat_map(|l| l[..first_k].iter().map(|c| pos[&c.0])).collect();
                    let c_all = g.gather_rows(enc.mu, &cand_pos);
                    match loss_bag_infonce(g, q_mu, c_all, &mask, self.arch.qbs.tau, self.arch.qbs.intra_bag_negatives) {
                        Ok(l) => l_b = Some(l),
                        Err(e) => log::warn!("skipping bag InfoNCE for this batch: {e}"),
                    }
                }
            }
        }

        // fusion and matching
        let proj = self.matcher.project(g, enc.states);
        let mut seq_cache: HashMap<QueryId, (Var, Vec<bool>)> = HashMap::new();
        let mut seq_of = |g: &mut Graph<'_, T>, id: QueryId| {
            seq_cache
                .entry(id)
                .or_insert_with(|| {
                    let r = rows(id, &enc);
                    (g.gather_rows(proj, &r.rows), r.valid)
                })
                .clone()
        };
        let mut ys = Vec::new();
        for (i, (a, qs)) in items.iter().enumerate() {
            let (qx, qv) = seq_of(g, *a);
            let mut fused_cache: HashMap<Vec<QueryId>, FusedQuery> = HashMap::new();
            for &c in qs {
                let bag = if mode.uses_bag() {
                    bag_for(&lists[i], prob_maps[i].as_ref(), c, k, bag_size)
                } else {
                    Vec::new()
                };
                if !fused_cache.contains_key(&bag) {
                    let members: Vec<(Var, Vec<bool>)> = bag.iter().map(|&m| seq_of(g, m)).collect();
                    let q = Seq { x: qx, valid: &qv };
                    let fused = match mode {
                        _ if bag.is_empty() => unfused(q),
                        Ablation::None | Ablation::NoQbs => {
                            let seqs: Vec<Seq<'_>> = members.iter().map(|(x, v)| Seq { x: *x, valid: v }).collect();
                            self.fusion.fuse(g, q, &seqs)?
                        }
                        Ablation::NoQbf => {
                            let qp = masked_mean_rows(g, qx, &qv);
                            let vecs: Vec<Var> = members.iter().map(|(x, v)| masked_mean_rows(g, *x, v)).collect();
                            fuse_sum(g, qp, &vecs, &qv)
                        }
                        Ablation::Baseline => unfused(q),
                    };
                    fused_cache.insert(bag.clone(), fused);
                }
                let fused = &fused_cache[&bag];
                let (cx, cv) = seq_of(g, c);
                ys.push(self.matcher.match_score(g, fused, Seq { x: cx, valid: &cv }));
            }
        }
        let y_hat = if ys.is_empty() { None } else { Some(g.concat_rows(&ys)) };
        Ok(ForwardOutput {
            y_hat,
            l_b,
            l_reward,
            selections,
        })
    }

    /// Match probabilities for one anchor's questions (evaluation mode).
    pub fn score(&self, data: &Stage2Data<'_, T>, query: QueryId, questions: &[QueryId], k: usize) -> Result<Vec<f64>> {
        let mut out = self.score_many(data, &[(query, questions.to_vec())], k)?;
        Ok(out.pop().expect("one group"))
    }

    /// As [`score`](Self::score) for several anchors in one graph.
    pub fn score_many(&self, data: &Stage2Data<'_, T>, groups: &[(QueryId, Vec<QueryId>)], k: usize) -> Result<Vec<Vec<f64>>> {
        if groups.iter().any(|(_, q)| q.is_empty()) {
            return Err(Error::invalid("no questions to score"));
        }
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, data, groups, k, false)?;
        let y = out.y_hat.ok_or_else(|| Error::invalid("no questions to score"))?;
        let flat: Vec<f64> = g.value(y).iter().map(|v| v.as_f64()).collect();
        let mut rest = flat.as_slice();
        Ok(groups
            .iter()
            .map(|(_, q)| {
                let (head, tail) = rest.split_at(q.len());
                rest = tail;
                head.to_vec()
            })
            .collect())
    }

    /// Selected bags for `anchors` (evaluation mode); empty when the
    /// selector is not part of the model.
    pub fn select_bags(&self, data: &Stage2Data<'_, T>, anchors: &[QueryId], k: usize) -> Result<Vec<QueryBag>> {
        if !self.config.ablation.uses_selector() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(anchors.len());
        for chunk in anchors.chunks(32) {
            let mut g = Graph::new(&self.store);
            let items: Vec<(QueryId, Vec<QueryId>)> = chunk.iter().map(|&a| (a, Vec::new())).collect();
            let f = self.forward(&mut g, data, &items, k, false)?;
            for s in f.selections.into_iter().flatten() {
                out.push(qbs::select_bag(&s, self.arch.qbs.bag_size));
            }
        }
        Ok(out)
    }

    /// Report over `test_pairs` (groups of one positive and nine negatives).
    pub fn evaluate(&self, data: &Stage2Data<'_, T>, test_pairs: &[QqPair], k: usize, seed: u64) -> Result<MetricsReport> {
        let scorer = ModelScorer { model: self, data, k };
        metrics::build_report(&scorer, test_pairs, seed, &self.fingerprint())
    }

    /// Validation MRR, R2@1 and selection accuracy, from one pass over
    /// the validation groups.
    pub fn validate(&self, data: &Stage2Data<'_, T>, k: usize) -> Result<(f64, f64, Option<f64>)> {
        let groups = metrics::group_pairs(&data.dataset.valid, 2)?;
        let mut labels = Vec::with_capacity(groups.len());
        let mut bags = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for chunk in groups.chunks(metrics::SCORE_CHUNK) {
            let items: Vec<(QueryId, Vec<QueryId>)> = chunk
                .iter()
                .map(|(_, m)| (m[0].query, m.iter().map(|p| p.question).collect()))
                .collect();
            let mut g = Graph::new(&self.store);
            let out = self.forward(&mut g, data, &items, k, false)?;
            let y = out.y_hat.ok_or_else(|| Error::invalid("empty validation group"))?;
            let scores = g.value(y).column(0).to_vec();
            for (i, (_, members)) in chunk.iter().enumerate() {
                let pairs: Vec<(QueryId, T)> = members.iter().zip(&scores[2 * i..2 * i + 2]).map(|(p, &s)| (p.question, s)).collect();
                let positive = members.iter().find(|p| p.label == 1).expect("grouped").question;
                let ranked = crate::matcher::rank_candidates(members[0].query, &pairs);
                labels.push(ranked.candidates.iter().map(|c| c.0 == positive).collect::<Vec<bool>>());
            }
            for s in out.selections.into_iter().flatten() {
                if seen.insert(s.query_id) {
                    bags.push(qbs::select_bag(&s, self.arch.qbs.bag_size));
                }
            }
        }
        let mrr = metrics::mrr(&labels)?;
        let r2 = metrics::recall_at(&labels, 2, 1)?;
        let acc = self
            .config
            .ablation
            .uses_selector()
            .then(|| metrics::qbs_accuracy(&bags, &data.dataset.corpus.bags));
        Ok((mrr, r2, acc))
    }

    /// Stage-1 view of the fine-tuned encoder, for re-indexing.
    pub fn encoder_checkpoint(&self) -> Stage1Checkpoint<T> {
        Stage1Checkpoint {
            config: self.stage1_config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            model: self.vae.clone(),
            history: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Stage2Manifest {
            format_version: FORMAT_VERSION,
            kind: "stage2".into(),
            dtype: T::DTYPE.into(),
            components: ComponentHashes {
                vae: self.store.hash_prefix(&format!("{VAE_PREFIX}.")),
                qbs: self.store.hash_prefix("qbs."),
                qbf: self.store.hash_prefix("qbf."),
                matcher: self.store.hash_prefix("matcher."),
            },
            config: self.config.clone(),
            arch: self.arch.clone(),
            stage1_config: self.stage1_config.clone(),
            vocab: self.vocab.clone(),
        };
        checkpoint::save(path, &self.store, &manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, m): (ParamStore<T>, Stage2Manifest) = checkpoint::load(path)?;
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if m.kind != "stage2" {
            return Err(corrupt(format!("expected a stage2 checkpoint, found {}", m.kind)));
        }
        if m.dtype != T::DTYPE {
            return Err(corrupt(format!("dtype {} but loading as {}", m.dtype, T::DTYPE)));
        }
        let hashes = [
            (&m.components.vae, format!("{VAE_PREFIX}.")),
            (&m.components.qbs, "qbs.".to_string()),
            (&m.components.qbf, "qbf.".to_string()),
            (&m.components.matcher, "matcher.".to_string()),
        ];
        for (want, prefix) in hashes {
            if &store.hash_prefix(&prefix) != want {
                return Err(corrupt(format!("hash mismatch for component {prefix}")));
            }
        }
        let shell = Stage1Checkpoint::<T>::init(&m.stage1_config, m.vocab);
        let mut model = Stage2Model::init(&shell, &m.config, &m.arch);
        if model.store.len() != store.len() {
            return Err(corrupt("parameter layout does not match the configuration".into()));
        }
        let names: Vec<(crate::params::ParamId, String)> =
            model.store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in names {
            let src = store
                .id(&name)
                .ok_or_else(|| corrupt(format!("missing parameter {name}")))?;
            if store.get(src).dim() != model.store.get(id).dim() {
                return Err(corrupt(format!("shape mismatch for {name}")));
            }
            model.store.get_mut(id).assign(store.get(src));
        }
        Ok(model)
    }
}

struct ModelScorer<'m, 'd, T: Scalar> {
    model: &'m Stage2Model<T>,
    data: &'m Stage2Data<'d, T>,
    k: usize,
}

impl<T: Scalar> PairScorer for ModelScorer<'_, '_, T> {
    fn score(&self, query: QueryId, candidates: &[QueryId]) -> Result<Vec<f64>> {
        self.model.score(self.data, query, candidates, self.k)
    }

    fn score_many(&self, groups: &[(QueryId, Vec<QueryId>)]) -> Result<Vec<Vec<f64>>> {
        self.model.score_many(self.data, groups, self.k)
    }
}

/// One validation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: f64,
    /// Window means of the training losses since the previous record.
    pub l_b: Option<f64>,
    pub l_reward: Option<f64>,
    pub l_ce: f64,
    pub l_stage2: f64,
    pub valid_mrr: f64,
    pub valid_r2_at_1: f64,
    pub qbs_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<ValidationRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Ok(TrainingLog {
            records: crate::data::read_jsonl(path)?,
        })
    }
}

/// Training pairs grouped by anchor, in first-seen order.
fn anchor_items(pairs: &[QqPair]) -> Vec<(QueryId, Vec<(QueryId, u8)>)> {
    let mut order: Vec<QueryId> = Vec::new();
    let mut by: HashMap<QueryId, Vec<(QueryId, u8)>> = HashMap::new();
    for p in pairs {
        by.entry(p.query)
            .or_insert_with(|| {
                order.push(p.query);
                Vec::new()
            })
            .push((p.question, p.label));
    }
    order.into_iter().map(|a| (a, by.remove(&a).expect("present"))).collect()
}

#[derive(Default)]
struct Window {
    l_b: f64,
    l_reward: f64,
    l_ce: f64,
    total: f64,
    n: usize,
    n_sel: usize,
}

/// Result of stage-2 training: the best model by validation MRR and the
/// full validation log.
pub struct Stage2Outcome<T> {
    pub model: Stage2Model<T>,
    pub log: TrainingLog,
    pub best_step: usize,
}

/// Train the stage-2 model. When `checkpoint_path` is set the best model
/// so far is written there at every improvement.
pub fn train_stage2<T: Scalar>(
    data: &mut Stage2Data<'_, T>,
    config: &Stage2Config,
    arch: &Architecture,
    checkpoint_path: Option<&Path>,
) -> Result<Stage2Outcome<T>> {
    config.validate()?;
    arch.validate()?;
    if data.dataset.train.is_empty() || data.dataset.valid.is_empty() {
        return Err(Error::invalid("stage 2 needs training and validation pairs"));
    }
    let mut model = Stage2Model::init(data.stage1, config, arch);
    let mut opt = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut items = anchor_items(&data.dataset.train);
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let interval = config.validation_interval * steps_per_epoch as f64;
    let (lambda1, lambda2) = config.effective_lambdas();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore<T>, usize)> = None;
    let mut window = Window::default();
    let mut step = 0usize;
    let last_good = |p: Option<&Path>| -> String {
        match p {
            Some(p) => format!("last good checkpoint: {}", p.display()),
            None => "no checkpoint written".into(),
        }
    };

    for epoch in 0..config.max_epochs {
        items.shuffle(&mut rng);
        for chunk in items.chunks(config.batch_size) {
            let batch: Vec<(QueryId, Vec<QueryId>)> =
                chunk.iter().map(|(a, ps)| (*a, ps.iter().map(|p| p.0).collect())).collect();
            let labels: Vec<u8> = chunk.iter().flat_map(|(_, ps)| ps.iter().map(|p| p.1)).collect();
            let mut g = Graph::training(&model.store, rng.random());
            let out = model.forward(&mut g, data, &batch, config.k, true)?;
            let y = out.y_hat.ok_or_else(|| Error::invalid("empty training batch"))?;
            let l_ce = loss_ce(&mut g, y, &labels)?;
            let mut total = g.scale(l_ce, T::of(lambda2));
            let l_b_val = match (lambda1 > 0.0 || config.ablation.uses_selector(), out.l_b) {
                (true, Some(l)) => {
                    let w = g.scale(l, T::of(lambda1));
                    total = g.add(total, w);
                    Some(g.scalar(l).as_f64())
                }
                _ => None,
            };
            let l_r_val = match out.l_reward {
                Some(l) => {
                    let w = g.scale(l, T::of(1.0 - lambda1));
                    total = g.add(total, w);
                    Some(g.scalar(l).as_f64())
                }
                None => None,
            };
            let ce = g.scalar(l_ce).as_f64();
            let lt = g.scalar(total).as_f64();
            if !lt.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("stage-2 loss is {lt}; {}", last_good(checkpoint_path)),
                });
            }
            let mut grads = g.backward(total).into_params();
            drop(g);
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite stage-2 gradient; {}", last_good(checkpoint_path)),
                });
            }
            opt.step(&mut model.store, &mut grads);
            step += 1;

            let (lb, lr) = (l_b_val.unwrap_or(0.0), l_r_val.unwrap_or(0.0));
            window.l_b += lb;
            window.l_reward += lr;
            window.l_ce += ce;
            window.total += stage2_total(lambda1, lambda2, lb, lr, ce);
            window.n += 1;
            window.n_sel += usize::from(l_r_val.is_some());

            let due = ((step as f64) / interval + 1e-9).floor() > (((step - 1) as f64) / interval + 1e-9).floor();
            if due {
                let (mrr, r2, acc) = model.validate(data, config.k)?;
                let n = window.n as f64;
                let sel = config.ablation.uses_selector();
                let rec = ValidationRecord {
                    step,
                    epoch: step as f64 / steps_per_epoch as f64,
                    l_b: sel.then(|| window.l_b / n),
                    l_reward: sel.then(|| window.l_reward / n),
                    l_ce: window.l_ce / n,
                    l_stage2: window.total / n,
                    valid_mrr: mrr,
                    valid_r2_at_1: r2,
                    qbs_accuracy: acc,
                };
                log::info!(
                    "stage2 step {step} epoch {:.2}: loss {:.4} ce {:.4} valid mrr {mrr:.4} qbs acc {}",
                    rec.epoch,
                    rec.l_stage2,
                    rec.l_ce,
                    acc.map_or("-".to_string(), |a| format!("{a:.4}"))
                );
                log.records.push(rec);
                window = Window::default();
                if best.as_ref().is_none_or(|(b, _, _)| mrr >= *b) {
                    best = Some((mrr, model.store.clone(), step));
                    if let Some(p) = checkpoint_path {
                        model.save(p)?;
                    }
                }
            }
        }
        if config.rebuild_index {
            let enc = model.encoder_checkpoint();
            let queries: Vec<Query> = data
                .index
                .ids()
                .iter()
                .filter_map(|id| data.dataset.corpus.get(*id).cloned())
                .collect();
            let idx = crate::index::build_index(&queries, &enc)?;
            data.replace_index(idx)?;
            log::info!("rebuilt index after epoch {epoch}");
        }
    }
    let best_step = match best {
        Some((_, store, s)) => {
            model.store = store;
            s
        }
        None => step,
    };
    Ok(Stage2Outcome {
        model,
        log,
        best_step,
    })
}

/// Train under `mode` and report on the test split.
pub fn run_ablation<T: Scalar>(
    data: &mut Stage2Data<'_, T>,
    config: &Stage2Config,
    arch: &Architecture,
    mode: Ablation,
    checkpoint_path: Option<&Path>,
) -> Result<(Stage2Outcome<T>, MetricsReport)> {
    let cfg = Stage2Config {
        ablation: mode,
        ..config.clone()
    };
    let outcome = train_stage2(data, &cfg, arch, checkpoint_path)?;
    let report = outcome.model.evaluate(data, &data.dataset.test, cfg.k, cfg.rng_seed)?;
    Ok((outcome, report))
}

/// Evaluate a trained model with `k` retrieved candidates per query for
/// each `k` in `ks`.
pub fn sweep_topk<T: Scalar>(
    model: &Stage2Model<T>,
    data: &Stage2Data<'_, T>,
    test_pairs: &[QqPair],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<(usize, MetricsReport)>> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::Config("sweep: k must be positive".into()));
            }
            Ok((k, model.evaluate(data, test_pairs, k, seed)?))
        })
        .collect()
}

/// Synthetic paraphrase corpus split into pairs, all driven by `seed`.
pub fn prepare_synthetic(spec: &SyntheticSpec, split: &SplitConfig, seed: u64) -> Result<Dataset> {
    let (queries, bags) = spec.generate(seed)?;
    Dataset::prepare(Corpus::new(queries, bags)?, split, seed)
}

/// Duplicate-pair TSV to a split dataset. Only the first `max_pairs`
/// parseable records are kept when `max_pairs > 0`.
pub fn prepare_tsv(path: &Path, max_pairs: usize, split: &SplitConfig, seed: u64) -> Result<Dataset> {
    let loaded = load_duplicate_pairs(path)?;
    if loaded.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), loaded.malformed);
    }
    let mut records = loaded.records;
    if max_pairs > 0 {
        records.truncate(max_pairs);
    }
    Dataset::prepare(corpus_from_records(&records)?, split, seed)
}

/// The retrievable pool (every query except held-out positives).
pub fn pool_queries(dataset: &Dataset) -> Vec<Query> {
    dataset
        .train_pool()
        .into_iter()
        .filter_map(|id| dataset.corpus.get(id).cloned())
        .collect()
}

/// Vocabulary from the pool, then stage-1 training on the pool.
pub fn train_stage1_on_pool<T: Scalar>(dataset: &Dataset, config: &Stage1Config, min_count: usize) -> Result<Stage1Checkpoint<T>> {
    let mut pool = pool_queries(dataset);
    let vocab = Vocabulary::build(pool.iter().map(|q| q.text.as_str()), min_count);
    for q in &mut pool {
        q.tokens = crate::data::tokenize(&q.text, &vocab, config.max_len);
    }
    crate::vae::train_stage1(&pool, vocab, config)
}

/// Index over the pool under the stage-1 encoder.
pub fn build_pool_index<T: Scalar>(dataset: &Dataset, stage1: &Stage1Checkpoint<T>) -> Result<EmbeddingIndex<T>> {
    crate::index::build_index(&pool_queries(dataset), stage1)
}

/// Default location of the best stage-2 checkpoint inside a run directory.
pub fn stage2_checkpoint_path(run_dir: &Path, mode: Ablation) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage2_{}", mode.name()))
}
