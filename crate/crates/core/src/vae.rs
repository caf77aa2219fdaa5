//! Stage-1 representation learning: a bi-GRU variational autoencoder with
//! a contrastive (InfoNCE) regulariser, and the deterministic query
//! embedding consumed by retrieval.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::data::vocab::{BOS, MASK, PAD};
use crate::data::{Query, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{step_masks, BiGru, Embedding, Gru, Linear};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub max_len: usize,
    pub d_z: usize,
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    /// KL weight after warm-up.
    pub beta: f64,
    /// Epochs over which the KL weight ramps linearly from 0 to `beta`.
    pub kl_warmup_epochs: f64,
    /// Weight of the InfoNCE term.
    pub alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Fraction of decoder inputs replaced by MASK.
    pub mask_ratio: f64,
    /// Fraction of encoder inputs replaced by MASK in each contrastive view.
    pub view_mask_ratio: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub rng_seed: u64,
}

impl Default for Stage1Config {
    /// Published widths: 512-unit bi-GRU encoder (2 layers), 512-unit
    /// decoder, batch 128, temperature 0.7, full decoder masking.
    fn default() -> Self {
        Stage1Config {
            max_len: 50,
            d_z: 128,
            emb_dim: 768,
            enc_hidden: 512,
            enc_layers: 2,
            dec_hidden: 512,
            beta: 1.0,
            kl_warmup_epochs: 1.0,
            alpha: 1.0,
            tau: 0.7,
            batch_size: 128,
            mask_ratio: 1.0,
            view_mask_ratio: 0.15,
            learning_rate: 1e-3,
            max_epochs: 10,
            rng_seed: 0,
        }
    }
}

impl Stage1Config {
    /// Small widths for laptop-scale runs.
    pub fn desk() -> Self {
        Stage1Config {
            max_len: 16,
            emb_dim: 64,
            enc_hidden: 64,
            dec_hidden: 64,
            learning_rate: 3e-3,
            max_epochs: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage1: {m}")));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.view_mask_ratio) {
            return bad("mask ratios must lie in [0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.d_z == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 || self.emb_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.enc_layers == 0 || self.max_len == 0 {
            return bad("enc_layers and max_len must be positive");
        }
        Ok(())
    }

    /// Width of the per-token encoder states.
    pub fn state_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

/// Posterior parameters and the code drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub mean: Array1<T>,
    pub log_variance: Array1<T>,
    pub sample: Array1<T>,
}

/// How the latent code is drawn during encoding.
#[derive(Debug, Clone)]
pub enum Sampling<T> {
    /// `z = mu`.
    Deterministic,
    /// `z = mu + exp(logvar / 2) * eps`, `eps` from the graph generator.
    Sample,
    /// Reparameterisation with caller-supplied `eps` (`batch x d_z`).
    Noise(Array2<T>),
}

/// Encoder outputs for a batch of `batch` sequences of `steps` tokens.
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Top-layer states, `(steps * batch) x 2H`; row `t * batch + b` holds
    /// token `t` of sequence `b`.
    pub states: Var,
    pub batch: usize,
    pub steps: usize,
    pub valid: Vec<Vec<bool>>,
}

impl Encoded {
    /// Row indices of sequence `b`'s states, in token order.
    pub fn rows_of(&self, b: usize) -> Vec<usize> {
        (0..self.steps).map(|t| t * self.batch + b).collect()
    }
}

/// The bi-GRU VAE. Parameters live in an external store under a name
/// prefix, so the same model can be embedded in the stage-2 store.
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: Stage1Config,
    pub vocab_size: usize,
    emb: Embedding,
    encoder: BiGru,
    mu: Linear,
    logvar: Linear,
    dec_init: Linear,
    decoder: Gru,
    out: Linear,
}

impl Vae {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &Stage1Config,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        let h2 = cfg.state_dim();
        Vae {
            cfg: cfg.clone(),
            vocab_size,
            emb: Embedding::new(store, &p("emb"), vocab_size, cfg.emb_dim, rng),
            encoder: BiGru::new(store, &p("enc"), cfg.emb_dim, cfg.enc_hidden, cfg.enc_layers, rng),
            mu: Linear::new(store, &p("mu"), h2, cfg.d_z, true, rng),
            logvar: Linear::new(store, &p("logvar"), h2, cfg.d_z, true, rng),
            dec_init: Linear::new(store, &p("dec_init"), cfg.d_z, cfg.dec_hidden, true, rng),
            decoder: Gru::new(store, &p("dec"), cfg.emb_dim + cfg.d_z, cfg.dec_hidden, rng),
            out: Linear::new(store, &p("out"), cfg.dec_hidden, vocab_size, true, rng),
        }
    }

    /// Encode a batch of equal-length token sequences. When
    /// `input_mask_ratio > 0` each real token is independently replaced by
    /// MASK with that probability (graph generator).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[&[u32]],
        sampling: Sampling<T>,
        input_mask_ratio: f64,
    ) -> Encoded {
        let batch = tokens.len();
        let steps = tokens[0].len();
        assert!(tokens.iter().all(|t| t.len() == steps), "sequences must be padded");
        let valid: Vec<Vec<bool>> = tokens
            .iter()
            .map(|t| t.iter().map(|&id| id != PAD).collect())
            .collect();
        let mut ids: Vec<usize> = Vec::with_capacity(batch * steps);
        for t in 0..steps {
            for seq in tokens {
                let mut id = seq[t];
                if id != PAD && input_mask_ratio > 0.0 && g.rng().random::<f64>() < input_mask_ratio {
                    id = MASK;
                }
                ids.push(id as usize);
            }
        }
        let e = self.emb.forward(g, &ids);
        let xs: Vec<Var> = (0..steps).map(|t| g.slice_rows(e, t * batch, batch)).collect();
        let masks = step_masks(g, &valid);
        let out = self.encoder.forward(g, &xs, Some(masks.as_slice()));
        let states = g.concat_rows(&out.steps);
        let mu = self.mu.forward(g, out.last);
        let logvar = self.logvar.forward(g, out.last);
        let z = match sampling {
            Sampling::Deterministic => mu,
            Sampling::Sample => {
                let eps = g.normal(batch, self.cfg.d_z);
                reparameterize(g, mu, logvar, eps)
            }
            Sampling::Noise(eps) => {
                let eps = g.constant(eps);
                reparameterize(g, mu, logvar, eps)
            }
        };
        Encoded {
            mu,
            logvar,
            z,
            states,
            batch,
            steps,
            valid,
        }
    }

    /// Per-position vocabulary logits, `(steps * batch) x |V|` with row
    /// `t * batch + b`. The decoder sees `[z ; emb(input_t)]` at every step.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, dec_inputs: &[Vec<u32>]) -> Var {
        let batch = dec_inputs.len();
        let steps = dec_inputs[0].len();
        let mut ids = Vec::with_capacity(batch * steps);
        for t in 0..steps {
            ids.extend(dec_inputs.iter().map(|s| s[t] as usize));
        }
        let e = self.emb.forward(g, &ids);
        let h0 = self.dec_init.forward(g, z);
        let h0 = g.tanh(h0);
        let xs: Vec<Var> = (0..steps)
            .map(|t| {
                let et = g.slice_rows(e, t * batch, batch);
                g.concat_cols(&[et, z])
            })
            .collect();
        let (hs, _) = self.decoder.run(g, &xs, None, Some(h0), false);
        let all = g.concat_rows(&hs);
        self.out.forward(g, all)
    }

    /// Reconstruction + beta * KL, both averaged over the batch. The
    /// reconstruction term is the mean token cross-entropy over each
    /// sequence's non-PAD positions.
    pub fn loss_vae<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &Encoded,
        targets: &[&[u32]],
        dec_inputs: &[Vec<u32>],
        beta: f64,
    ) -> VaeLoss {
        let logits = self.decode(g, enc.z, dec_inputs);
        let recon = reconstruction_loss(g, logits, targets);
        let kl = kl_divergence(g, enc.mu, enc.logvar);
        let bkl = g.scale(kl, T::of(beta));
        let total = g.add(recon, bkl);
        VaeLoss { total, recon, kl }
    }
}

pub struct VaeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `mu + exp(logvar / 2) * eps`
pub fn reparameterize<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = g.scale(logvar, T::of(0.5));
    let sd = g.exp(half);
    let noise = g.mul(sd, eps);
    g.add(mu, noise)
}

/// Decoder inputs: BOS then the sequence shifted right by one, each
/// shifted token replaced by MASK with probability `mask_ratio`.
pub fn decoder_inputs<R: Rng>(tokens: &[u32], mask_ratio: f64, rng: &mut R) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len());
    out.push(BOS);
    for &t in &tokens[..tokens.len().saturating_sub(1)] {
        let masked = mask_ratio >= 1.0 || (mask_ratio > 0.0 && rng.random::<f64>() < mask_ratio);
        out.push(if masked { MASK } else { t });
    }
    out
}

/// Mean over sequences of the mean non-PAD token cross-entropy.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[&[u32]]) -> Var {
    let batch = targets.len();
    let steps = targets[0].len();
    let lp = g.log_softmax_rows(logits);
    let mut idx = Vec::with_capacity(batch * steps);
    let mut w = Array2::<T>::zeros((batch * steps, 1));
    let live = targets.iter().filter(|s| s.iter().any(|&t| t != PAD)).count().max(1);
    for t in 0..steps {
        for (b, seq) in targets.iter().enumerate() {
            idx.push(seq[t] as usize);
            let n = seq.iter().filter(|&&x| x != PAD).count();
            if seq[t] != PAD {
                w[[t * batch + b, 0]] = T::of(-1.0 / (n as f64 * live as f64));
            }
        }
    }
    let picked = g.pick(lp, &idx);
    let w = g.constant(w);
    let weighted = g.mul(picked, w);
    g.sum_all(weighted)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` in closed form, averaged over rows:
/// `-1/2 * sum_j (1 + logvar_j - mu_j^2 - exp(logvar_j))`.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, logvar: Var) -> Var {
    let rows = g.shape(mu).0;
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add_scalar(logvar, T::one());
    let a = g.sub(a, mu2);
    let a = g.sub(a, var);
    let s = g.sum_all(a);
    g.scale(s, T::of(-0.5 / rows as f64))
}

/// InfoNCE with in-batch negatives over L2-normalised rows:
/// mean_i `-log(exp(s_ii / tau) / sum_j exp(s_ij / tau))`.
pub fn loss_infonce<T: Scalar>(g: &mut Graph<'_, T>, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let n = g.shape(anchors).0;
    if n < 2 {
        return Err(Error::invalid("InfoNCE needs at least 2 pairs for in-batch negatives"));
    }
    if g.shape(positives).0 != n {
        return Err(Error::invalid("InfoNCE: anchors and positives must align"));
    }
    let eps = T::of(1e-12);
    let a = g.l2_normalize_rows(anchors, eps);
    let p = g.l2_normalize_rows(positives, eps);
    let s = g.matmul_bt(a, p);
    let s = g.scale(s, T::of(1.0 / tau));
    let lp = g.log_softmax_rows(s);
    let diag: Vec<usize> = (0..n).collect();
    let d = g.pick(lp, &diag);
    let m = g.mean_all(d);
    Ok(g.neg(m))
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub infonce: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage1Manifest {
    format_version: u32,
    kind: String,
    dtype: String,
    d_z: usize,
    vocab_hash: String,
    params_hash: String,
    config: Stage1Config,
    vocab: Vocabulary,
}

/// Trained stage-1 model: parameters, configuration and vocabulary.
#[derive(Debug, Clone)]
pub struct Stage1Checkpoint<T> {
    pub config: Stage1Config,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub model: Vae,
    pub history: Vec<Stage1Epoch>,
}

pub const VAE_PREFIX: &str = "vae";

impl<T: Scalar> Stage1Checkpoint<T> {
    /// Freshly initialised (untrained) model.
    pub fn init(config: &Stage1Config, vocab: Vocabulary) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut store = ParamStore::new();
        let model = Vae::new(&mut store, VAE_PREFIX, config, vocab.len(), &mut rng);
        Stage1Checkpoint {
            config: config.clone(),
            vocab,
            store,
            model,
            history: Vec::new(),
        }
    }

    /// Identifies parameters and vocabulary together.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.store.hash_prefix("").as_bytes());
        h.update(self.vocab.hash().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        crate::data::tokenize(text, &self.vocab, self.config.max_len)
    }

    /// Posterior for one token sequence.
    pub fn encode(&self, tokens: &[u32], sampling: Sampling<T>, seed: u64) -> LatentCode<T> {
        let mut g = Graph::training(&self.store, seed);
        let enc = self.model.encode(&mut g, &[tokens], sampling, 0.0);
        let row = |v: Var| g.value(v).row(0).to_owned();
        LatentCode {
            mean: row(enc.mu),
            log_variance: row(enc.logvar),
            sample: row(enc.z),
        }
    }

    /// L2-normalised posterior means, one row per sequence.
    pub fn embed_batch(&self, tokens: &[&[u32]]) -> Array2<T> {
        let d = self.config.d_z;
        let mut out = Array2::zeros((tokens.len(), d));
        for (c, chunk) in tokens.chunks(256).enumerate() {
            let mut g = Graph::new(&self.store);
            let enc = self.model.encode(&mut g, chunk, Sampling::Deterministic, 0.0);
            let mu = g.value(enc.mu);
            for (i, row) in mu.axis_iter(Axis(0)).enumerate() {
                let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of(1e-12));
                out.row_mut(c * 256 + i).assign(&row.mapv(|x| x / n));
            }
        }
        out
    }

    /// Deterministic unit-norm embedding of one query.
    pub fn embed_query(&self, query: &Query) -> Array1<T> {
        let tokens = if query.tokens.len() == self.config.max_len {
            query.tokens.clone()
        } else {
            self.tokenize(&query.text)
        };
        self.embed_batch(&[&tokens]).row(0).to_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Stage1Manifest {
            format_version: FORMAT_VERSION,
            kind: "stage1".into(),
            dtype: T::DTYPE.into(),
            d_z: self.config.d_z,
            vocab_hash: self.vocab.hash(),
            params_hash: self.store.hash_prefix(""),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        checkpoint::save(path, &self.store, &manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, m): (ParamStore<T>, Stage1Manifest) = checkpoint::load(path)?;
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if m.kind != "stage1" {
            return Err(corrupt(format!("expected a stage1 checkpoint, found {}", m.kind)));
        }
        if m.dtype != T::DTYPE {
            return Err(corrupt(format!("dtype {} but loading as {}", m.dtype, T::DTYPE)));
        }
        if m.vocab.hash() != m.vocab_hash {
            return Err(corrupt("vocabulary hash mismatch".into()));
        }
        if store.hash_prefix("") != m.params_hash {
            return Err(corrupt("parameter hash mismatch".into()));
        }
        let mut ck = Self::init(&m.config, m.vocab);
        if ck.store.len() != store.len() {
            return Err(corrupt("parameter layout does not match the configuration".into()));
        }
        for (id, name, value) in ck.store.clone().iter() {
            let src = store
                .id(name)
                .ok_or_else(|| corrupt(format!("missing parameter {name}")))?;
            if store.get(src).dim() != value.dim() {
                return Err(corrupt(format!("shape mismatch for {name}")));
            }
            ck.store.get_mut(id).assign(store.get(src));
        }
        Ok(ck)
    }
}

/// Minimise `L_VAE + alpha * L_q` over `queries` (already tokenised to
/// `config.max_len`). The contrastive positive of each query is a second
/// stochastic encoding of it (fresh noise and input masking).
pub fn train_stage1<T: Scalar>(
    queries: &[Query],
    vocab: Vocabulary,
    config: &Stage1Config,
) -> Result<Stage1Checkpoint<T>> {
    config.validate()?;
    if queries.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "stage 1 needs at least batch_size = {} queries, got {}",
            config.batch_size,
            queries.len()
        )));
    }
    if let Some(q) = queries.iter().find(|q| q.tokens.len() != config.max_len) {
        return Err(Error::invalid(format!("query {} is not tokenised to max_len", q.id)));
    }
    let mut ck = Stage1Checkpoint::<T>::init(config, vocab);
    let mut opt = Adam::new(&ck.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5157_4731);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let batches_per_epoch = queries.len().div_ceil(config.batch_size);
    let warmup_steps = (config.kl_warmup_epochs * batches_per_epoch as f64).max(0.0);
    let mut step = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let beta = if warmup_steps > 0.0 {
                config.beta * ((step + 1) as f64 / warmup_steps).min(1.0)
            } else {
                config.beta
            };
            let tokens: Vec<&[u32]> = chunk.iter().map(|&i| queries[i].tokens.as_slice()).collect();
            let dec_in: Vec<Vec<u32>> = tokens
                .iter()
                .map(|t| decoder_inputs(t, config.mask_ratio, &mut rng))
                .collect();
            let mut g = Graph::training(&ck.store, rng.random());
            let v1 = ck.model.encode(&mut g, &tokens, Sampling::Sample, config.view_mask_ratio);
            let v2 = ck.model.encode(&mut g, &tokens, Sampling::Sample, config.view_mask_ratio);
            let vae = ck.model.loss_vae(&mut g, &v1, &tokens, &dec_in, beta);
            let lq = loss_infonce(&mut g, v1.z, v2.z, config.tau)?;
            let alq = g.scale(lq, T::of(config.alpha));
            let total = g.add(vae.total, alq);
            let loss = g.scalar(total).as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("stage-1 loss is {loss} in epoch {epoch}"),
                });
            }
            let mut grads = g.backward(total).into_params();
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite stage-1 gradient".into(),
                });
            }
            for (s, v) in sums.iter_mut().zip([total, vae.recon, vae.kl, lq]) {
                *s += g.scalar(v).as_f64();
            }
            drop(g);
            opt.step(&mut ck.store, &mut grads);
            n += 1;
            step += 1;
        }
        let n = n.max(1) as f64;
        let e = Stage1Epoch {
            epoch,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            infonce: sums[3] / n,
        };
        log::info!(
            "stage1 epoch {epoch}: loss {:.4} recon {:.4} kl {:.4} infonce {:.4}",
            e.loss,
            e.recon,
            e.kl,
            e.infonce
        );
        ck.history.push(e);
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_cfg() -> Stage1Config {
        Stage1Config {
            max_len: 6,
            d_z: 4,
            emb_dim: 8,
            enc_hidden: 6,
            enc_layers: 2,
            dec_hidden: 8,
            batch_size: 4,
            ..Stage1Config::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the cat sat on a mat", "dogs run fast"], 1)
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::<f64>::detached();
        let mu = g.constant(array![[0.0]]);
        let lv = g.constant(array![[0.0]]);
        let kl = kl_divergence(&mut g, mu, lv);
        assert_eq!(g.scalar(kl), 0.0);
        let mu = g.constant(array![[1.0]]);
        let kl = kl_divergence(&mut g, mu, lv);
        assert!((g.scalar(kl) - 0.5).abs() < 1e-12);
        let mu = g.constant(array![[0.0]]);
        let lv = g.constant(array![[1.0]]); // sigma^2 = e
        let kl = kl_divergence(&mut g, mu, lv);
        let want = (std::f64::consts::E - 2.0) / 2.0;
        assert!((g.scalar(kl) - want).abs() < 1e-12);
        assert!((want - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn infonce_closed_forms() {
        let mut g = Graph::<f64>::detached();
        let same = g.constant(Array2::from_elem((2, 3), 0.5));
        let l = loss_infonce(&mut g, same, same, 0.7).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
        let a = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let l = loss_infonce(&mut g, a, a, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(l) - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        let one = g.constant(array![[1.0, 0.0]]);
        assert!(loss_infonce(&mut g, one, one, 1.0).is_err());
    }

    #[test]
    fn deterministic_and_zero_noise_encodings_equal_mean() {
        let ck = Stage1Checkpoint::<f64>::init(&tiny_cfg(), vocab());
        let t = ck.tokenize("the cat sat");
        let a = ck.encode(&t, Sampling::Deterministic, 1);
        let b = ck.encode(&t, Sampling::Deterministic, 2);
        assert_eq!(a, b);
        assert_eq!(a.sample, a.mean);
        let z = ck.encode(&t, Sampling::Noise(Array2::zeros((1, 4))), 3);
        assert_eq!(z.sample, z.mean);
        let s = ck.encode(&t, Sampling::Sample, 3);
        assert_ne!(s.sample, s.mean);
    }

    #[test]
    fn sample_mean_converges_to_posterior_mean() {
        let ck = Stage1Checkpoint::<f64>::init(&tiny_cfg(), vocab());
        let t = ck.tokenize("dogs run");
        let n = 10_000;
        let batch: Vec<&[u32]> = vec![t.as_slice(); n];
        let mut g = Graph::training(&ck.store, 17);
        let enc = ck.model.encode(&mut g, &batch, Sampling::Sample, 0.0);
        let z = g.value(enc.z);
        let mu = g.value(enc.mu).row(0).to_owned();
        let sd = g.value(enc.logvar).row(0).mapv(|l| (0.5 * l).exp());
        let mean = z.mean_axis(Axis(0)).unwrap();
        for j in 0..4 {
            let tol = 3.0 * sd[j] / (n as f64).sqrt();
            assert!((mean[j] - mu[j]).abs() < tol, "coord {j}: {} vs {}", mean[j], mu[j]);
        }
    }

    #[test]
    fn decoder_logits_shape_and_full_masking() {
        let ck = Stage1Checkpoint::<f64>::init(&tiny_cfg(), vocab());
        let t = ck.tokenize("a mat");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = decoder_inputs(&t, 1.0, &mut rng);
        assert_eq!(dec[0], BOS);
        assert!(dec[1..].iter().all(|&x| x == MASK));
        let mut g = Graph::new(&ck.store);
        let z = g.constant(Array2::zeros((1, 4)));
        let logits = ck.model.decode(&mut g, z, &[dec]);
        assert_eq!(g.shape(logits), (6, ck.vocab.len()));
    }

    #[test]
    fn overfits_one_sentence() {
        let cfg = Stage1Config { view_mask_ratio: 0.0, ..tiny_cfg() };
        let vocab = vocab();
        let mut ck = Stage1Checkpoint::<f64>::init(&cfg, vocab);
        let t = ck.tokenize("the cat sat on a mat");
        let mut opt = Adam::new(&ck.store, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = vec![decoder_inputs(&t, 1.0, &mut rng)];
        for _ in 0..200 {
            let mut g = Graph::training(&ck.store, 1);
            let enc = ck.model.encode(&mut g, &[&t], Sampling::Deterministic, 0.0);
            let l = ck.model.loss_vae(&mut g, &enc, &[&t], &dec, 0.0);
            let mut grads = g.backward(l.total).into_params();
            opt.step(&mut ck.store, &mut grads);
        }
        let mut g = Graph::new(&ck.store);
        let enc = ck.model.encode(&mut g, &[&t], Sampling::Deterministic, 0.0);
        let logits = ck.model.decode(&mut g, enc.z, &dec);
        let lv = g.value(logits);
        for (pos, &want) in t.iter().enumerate().filter(|(_, &x)| x != PAD) {
            let row = lv.row(pos);
            let arg = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            assert_eq!(arg as u32, want, "position {pos}");
        }
    }

    #[test]
    fn embed_is_unit_norm_and_roundtrips() {
        let ck = Stage1Checkpoint::<f32>::init(&tiny_cfg(), vocab());
        let q = Query::new(1, "the cat");
        let e = ck.embed_query(&q);
        let norm: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(e, ck.embed_query(&q));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stage1");
        ck.save(&p).unwrap();
        let back = Stage1Checkpoint::<f32>::load(&p.with_extension("json")).unwrap();
        assert_eq!(back.embed_query(&q), e);
        assert_eq!(back.hash(), ck.hash());
        assert!(Stage1Checkpoint::<f64>::load(&p).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Stage1Config { tau: 0.0, ..tiny_cfg() }.validate().is_err());
        assert!(Stage1Config { batch_size: 1, ..tiny_cfg() }.validate().is_err());
        assert!(Stage1Config { mask_ratio: 1.5, ..tiny_cfg() }.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
