//! Prefix-conditioned text decoder: inverts numeric sentence embeddings
//! back into gait-parameter sentences, and renders learned class features
//! as sentences via convex combinations of stored numeric embeddings.
//!
//! The decoder is a 4-layer causal transformer over the dense vocabulary
//! (words, [EOS], numeric buckets) with its own trainable embedding table
//! and output head. The conditioning embedding F^num occupies position 0
//! and is additionally added to every token-row input (alongside the
//! positional encoding), so conditioning reaches each position through the
//! residual stream and not only through attention to the prefix row; the
//! row at every position predicts the next token, so the prefix row
//! predicts the first word and the last token row predicts [EOS].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{causal_mask, FrozenTextEncoder, LN_EPS};
use crate::graph::{self, Graph, GraphError, Var};
use crate::losses::{ce_graph, ordinal_ce_graph, HeadKind, LossError, ProjectionHeads};
use crate::numtext::{
    number_to_token_id, NumBasis, NumTextError, NumericTokenSequence, TokenItem, Vocabulary,
};
use crate::optim::{Adam, ParamStore};
use crate::tensor::{matmul_raw, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty embedding bank")]
    EmptyBank,
    #[error("sequence of {len} rows exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prefix has dim {got}, decoder expects {want}")]
    BadPrefix { got: usize, want: usize },
    #[error("dense token id {0} out of range")]
    BadToken(usize),
    #[error("bank entry {0}: projected embedding is not unit-norm")]
    BankNotNormalized(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    NumText(#[from] NumTextError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

// ── Model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Apply the ordinal weighting to every position instead of numeric
    /// positions only (the literal reading; off by default so word
    /// positions keep a dense plain-CE signal).
    pub ordinal_all_tokens: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            d_ff: 128,
            max_len: 96,
            ordinal_all_tokens: false,
        }
    }
}

/// Per-layer key/value rows cached during greedy decoding.
#[derive(Debug, Default, Clone)]
struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    cfg: DecoderConfig,
    vocab: Vocabulary,
    params: ParamStore,
    pe: Tensor,
}

/// Greedy decode output. `sparse_ids` live in the token-id space (words,
/// [EOS] = 49407, numeric block); `hit_max_len` flags a cut-off generation
/// that never produced [EOS].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub dense_ids: Vec<usize>,
    pub sparse_ids: Vec<u32>,
    pub hit_max_len: bool,
}

impl DecoderModel {
    pub fn new(cfg: DecoderConfig, vocab: &Vocabulary, seed: u64) -> Result<DecoderModel> {
        let d = cfg.dim;
        let v = vocab.dense_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        params.insert("dec/embed", Tensor::randn(&[v, d], 0.02, &mut rng), true)?;
        let std = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                let w = Tensor::randn(&[d, d], std, &mut rng);
                params.insert(&format!("dec/l{l}/{name}"), w, true)?;
            }
            params.insert(&format!("dec/l{l}/w1"), Tensor::randn(&[d, cfg.d_ff], std, &mut rng), true)?;
            let w2 = Tensor::randn(&[cfg.d_ff, d], 1.0 / (cfg.d_ff as f64).sqrt(), &mut rng);
            params.insert(&format!("dec/l{l}/w2"), w2, true)?;
        }
        params.insert("dec/head", Tensor::randn(&[d, v], std, &mut rng), true)?;
        let pe = crate::numtext::sinusoidal_pe(cfg.max_len, d)?;
        Ok(DecoderModel { cfg, vocab: vocab.clone(), params, pe })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replace the parameters wholesale (checkpoint restore).
    pub fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    fn check_prefix(&self, prefix: &Tensor) -> Result<()> {
        if prefix.rank() != 1 || prefix.numel() != self.cfg.dim {
            return Err(DecoderError::BadPrefix { got: prefix.numel(), want: self.cfg.dim });
        }
        Ok(())
    }

    /// Teacher-forced logits for a prefix and token sequence: one logits
    /// row per input position (prefix row first), shape (len+1, V).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        prefix: &Tensor,
        dense_ids: &[usize],
    ) -> Result<Var> {
        self.check_prefix(prefix)?;
        let n = dense_ids.len() + 1;
        if n > self.cfg.max_len {
            return Err(DecoderError::SequenceTooLong { len: n, max: self.cfg.max_len });
        }
        let v = self.vocab.dense_size();
        if let Some(&bad) = dense_ids.iter().find(|&&i| i >= v) {
            return Err(DecoderError::BadToken(bad));
        }
        let d = self.cfg.dim;
        let lookup = |name: &str| -> Result<Var> {
            vars.get(name).copied().ok_or(GraphError::UnknownParam(name.to_string()).into())
        };
        let table = lookup("dec/embed")?;
        let prefix_row = g.constant(Tensor::new(vec![1, d], prefix.data().to_vec())?)?;
        let mut rows = vec![prefix_row];
        if !dense_ids.is_empty() {
            rows.push(g.embedding_lookup(table, dense_ids)?);
        }
        let seq = g.concat_rows(&rows)?;
        // Positional bias with the conditioning embedding folded into every
        // token row. Attention alone can learn to gate the prefix row shut —
        // word positions see a varying prefix as noise worth suppressing —
        // which severs the only path from the conditioning embedding to the
        // numeric predictions. An additive channel cannot be gated.
        let mut bias = self.pe.data()[..n * d].to_vec();
        for t in 1..n {
            for (k, &c) in prefix.data().iter().enumerate() {
                bias[t * d + k] += c;
            }
        }
        let bias = g.constant(Tensor::new(vec![n, d], bias)?)?;
        let mut h = g.add(seq, bias)?;
        let mask = causal_mask(n);
        for l in 0..self.cfg.layers {
            let x = g.layer_norm(h, LN_EPS)?;
            let q = g.matmul(x, lookup(&format!("dec/l{l}/wq"))?)?;
            let k = g.matmul(x, lookup(&format!("dec/l{l}/wk"))?)?;
            let vv = g.matmul(x, lookup(&format!("dec/l{l}/wv"))?)?;
            let a = g.multi_head_attention(q, k, vv, self.cfg.heads, Some(&mask))?;
            let ao = g.matmul(a, lookup(&format!("dec/l{l}/wo"))?)?;
            h = g.add(h, ao)?;
            let x2 = g.layer_norm(h, LN_EPS)?;
            let m1 = g.matmul(x2, lookup(&format!("dec/l{l}/w1"))?)?;
            let m1 = g.gelu(m1)?;
            let m2 = g.matmul(m1, lookup(&format!("dec/l{l}/w2"))?)?;
            h = g.add(h, m2)?;
        }
        let h = g.layer_norm(h, LN_EPS)?;
        Ok(g.matmul(h, lookup("dec/head")?)?)
    }

    /// Teacher-forced loss over one sentence: position t's logits are
    /// scored against target t, where targets are the token ids followed
    /// by [EOS]. Numeric targets use the ordinal weighting; word targets
    /// use plain CE unless `ordinal_all_tokens` is set.
    pub fn sentence_loss_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        prefix: &Tensor,
        dense_ids: &[usize],
    ) -> Result<Var> {
        let logits = self.forward_graph(g, vars, prefix, dense_ids)?;
        let v = self.vocab.dense_size();
        let eos = self.vocab.dense_eos();
        let mut targets: Vec<usize> = dense_ids.to_vec();
        targets.push(eos);
        let n_words = self.vocab.n_words();
        let mut terms = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let row = g.slice_rows(logits, t, 1)?;
            let row = g.reshape(row, &[v])?;
            let numeric_target = target > n_words; // beyond the [EOS] row
            let term = if self.cfg.ordinal_all_tokens || numeric_target {
                ordinal_ce_graph(g, row, target, &self.vocab)?
            } else {
                ce_graph(g, row, target)?
            };
            terms.push(term);
        }
        let stacked = g.concat_rows(&terms)?;
        Ok(g.mean_all(stacked)?)
    }

    /// Greedy left-to-right generation from a conditioning prefix, with a
    /// per-layer KV cache. Stops at [EOS] (not included in the output) or
    /// after `max_len` generated tokens.
    pub fn decode(&self, prefix: &Tensor, max_len: usize) -> Result<DecodeResult> {
        self.check_prefix(prefix)?;
        let limit = max_len.min(self.cfg.max_len - 1);
        let table = self.params.get("dec/embed").expect("created in new");
        let mut caches = vec![KvCache::default(); self.cfg.layers];
        let mut dense_ids = Vec::new();
        let mut hit_max_len = false;
        let mut row: Vec<f64> =
            prefix.data().iter().zip(self.pe.row(0)).map(|(a, b)| a + b).collect();
        loop {
            let logits = self.step(&mut caches, &row)?;
            let next = argmax(&logits);
            if next == self.vocab.dense_eos() {
                break;
            }
            dense_ids.push(next);
            if dense_ids.len() >= limit {
                hit_max_len = true;
                break;
            }
            // Token rows carry the conditioning embedding additively, in the
            // same grouping as the batch path: embed + (pe + prefix).
            let t = dense_ids.len();
            row = table
                .row(next)
                .iter()
                .zip(self.pe.row(t).iter().zip(prefix.data()))
                .map(|(&e, (&p, &c))| e + (p + c))
                .collect();
        }
        let sparse_ids = dense_ids
            .iter()
            .map(|&i| self.vocab.token_of_dense(i).expect("argmax index is in range"))
            .collect();
        Ok(DecodeResult { dense_ids, sparse_ids, hit_max_len })
    }

    /// One incremental decode step: push the new input row through every
    /// layer (attending over cached keys/values) and return its logits.
    fn step(&self, caches: &mut [KvCache], input: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let mut h = input.to_vec();
        for l in 0..self.cfg.layers {
            let get = |name: &str| self.params.get(&format!("dec/l{l}/{name}")).expect("init");
            let x = layer_norm_row(&h);
            let q = matmul_raw(&x, get("wq").data(), 1, d, d);
            let k = matmul_raw(&x, get("wk").data(), 1, d, d);
            let v = matmul_raw(&x, get("wv").data(), 1, d, d);
            let cache = &mut caches[l];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            cache.rows += 1;
            let t = cache.rows;
            let mut attn = vec![0.0; d];
            let scale = 1.0 / (hd as f64).sqrt();
            for hh in 0..heads {
                // scores of the new query against every cached key
                let mut scores = Vec::with_capacity(t);
                for r in 0..t {
                    let kr = &cache.k[r * d + hh * hd..r * d + (hh + 1) * hd];
                    let qh = &q[hh * hd..(hh + 1) * hd];
                    scores.push(qh.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                let mut probs = vec![0.0; t];
                graph::softmax_row(&scores, &mut probs);
                for (r, &p) in probs.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vr = &cache.v[r * d + hh * hd..r * d + (hh + 1) * hd];
                    for (o, &vv) in attn[hh * hd..(hh + 1) * hd].iter_mut().zip(vr) {
                        *o += p * vv;
                    }
                }
            }
            let ao = matmul_raw(&attn, get("wo").data(), 1, d, d);
            for (a, b) in h.iter_mut().zip(&ao) {
                *a += b;
            }
            let x2 = layer_norm_row(&h);
            let m1: Vec<f64> = matmul_raw(&x2, get("w1").data(), 1, d, self.cfg.d_ff)
                .into_iter()
                .map(graph::gelu_fwd)
                .collect();
            let m2 = matmul_raw(&m1, get("w2").data(), 1, self.cfg.d_ff, d);
            for (a, b) in h.iter_mut().zip(&m2) {
                *a += b;
            }
        }
        let hn = layer_norm_row(&h);
        let head = self.params.get("dec/head").expect("init");
        Ok(matmul_raw(&hn, head.data(), 1, d, self.vocab.dense_size()))
    }

    /// Decode and rebuild the numeric token sequence (numeric ids become
    /// bucket-center values).
    pub fn decode_to_sequence(&self, prefix: &Tensor, max_len: usize) -> Result<NumericTokenSequence> {
        let out = self.decode(prefix, max_len)?;
        let mut seq = NumericTokenSequence::new();
        for &id in &out.sparse_ids {
            if Vocabulary::is_numeric_id(id) {
                seq.push_num(crate::numtext::token_id_to_value(id)?)?;
            } else {
                seq.push_word(id);
            }
        }
        Ok(seq)
    }

    /// Decode straight to a rendered sentence string.
    pub fn decode_to_sentence(&self, prefix: &Tensor, max_len: usize) -> Result<String> {
        let seq = self.decode_to_sequence(prefix, max_len)?;
        Ok(crate::numtext::detokenize(&seq, &self.vocab))
    }
}

fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

// ── Corpus preparation ───────────────────────────────────────────────

/// Compare a decoded dense-id sequence against a reference: word positions
/// (including the EOS row) must match exactly, numeric positions must land
/// within `bucket_tol` buckets, and the lengths must agree.
pub fn ids_match_within(
    reference: &[usize],
    decoded: &[usize],
    vocab: &Vocabulary,
    bucket_tol: usize,
) -> bool {
    if reference.len() != decoded.len() {
        return false;
    }
    let first_numeric = vocab.n_words() + 1;
    reference.iter().zip(decoded).all(|(&r, &d)| {
        let r_num = r >= first_numeric;
        let d_num = d >= first_numeric;
        if r_num != d_num {
            false
        } else if r_num {
            r.abs_diff(d) <= bucket_tol
        } else {
            r == d
        }
    })
}

/// Dense decoder targets for a numeric token sequence: words keep their
/// ids, the [IS] marker maps to the word "is", numbers map to their bucket
/// row.
pub fn dense_ids_of_sequence(seq: &NumericTokenSequence, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let is_id = vocab.try_id("is")?;
    seq.items()
        .iter()
        .map(|item| {
            let sparse = match item {
                TokenItem::Word(id) => *id,
                TokenItem::Is => is_id,
                TokenItem::Num(omega) => number_to_token_id(*omega)?,
            };
            vocab.dense_of_token(sparse).ok_or(DecoderError::BadToken(sparse as usize))
        })
        .collect()
}

/// One training pair: the frozen numeric embedding and the dense targets.
pub fn corpus_entry(
    seq: &NumericTokenSequence,
    enc: &FrozenTextEncoder,
    basis: &NumBasis,
    vocab: &Vocabulary,
) -> Result<(Tensor, Vec<usize>)> {
    let f_num = crate::numtext::embed_sequence(seq, enc, basis, vocab)?;
    let ids = dense_ids_of_sequence(seq, vocab)?;
    Ok((f_num, ids))
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecoderTrainReport {
    /// Mean teacher-forced loss per epoch, in epoch order.
    pub epoch_mean_loss: Vec<f64>,
}

/// Sentences per optimizer step. Averaging gradients over a mini-batch
/// matters here more than it usually does: the ordinal term contributes
/// no gradient once a bucket's argmax is correct, so per-sentence steps
/// let the optimizer pin each training sentence at a razor-thin correct
/// margin — exact zero loss — without ever building the smooth
/// value-readout that held-out sentences need. Batch-averaged steps keep
/// the shared readout direction and wash out those per-sentence kicks.
const TRAIN_BATCH: usize = 32;


/// Teacher-forced prefix language modeling over (F^num, targets) pairs.
/// Sample order is reshuffled every epoch and gradients are averaged over
/// mini-batches of [`TRAIN_BATCH`] sentences; everything is deterministic
/// given the seed.
pub fn train_decoder(
    model: &mut DecoderModel,
    corpus: &[(Tensor, Vec<usize>)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<DecoderTrainReport> {
    if corpus.is_empty() {
        return Err(DecoderError::EmptyCorpus);
    }
    let batch = TRAIN_BATCH.min(corpus.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_mean_loss = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let vars = model.params.bind_all(&mut g)?;
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (prefix, ids) = &corpus[i];
                terms.push(model.sentence_loss_graph(&mut g, &vars, prefix, ids)?);
            }
            let loss = if terms.len() == 1 {
                terms[0]
            } else {
                let stacked = g.concat_rows(&terms)?;
                g.mean_all(stacked)?
            };
            total += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut model.params, &grads)?;
        }
        epoch_mean_loss.push(total / corpus.len() as f64);
    }
    Ok(DecoderTrainReport { epoch_mean_loss })
}

// ── Embedding bank and class interpretation ──────────────────────────

/// One stored training sentence: its frozen numeric embedding, the
/// projected (unit) embedding, and the rendered source text.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub f_num: Tensor,
    pub p_num: Tensor,
    pub sentence: String,
}

/// Append-only store of numeric sentence embeddings.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingBank {
    entries: Vec<BankEntry>,
}

impl EmbeddingBank {
    pub fn new() -> EmbeddingBank {
        EmbeddingBank::default()
    }

    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if (entry.p_num.norm() - 1.0).abs() > 1e-9 {
            return Err(DecoderError::BankNotNormalized(self.entries.len()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }
}

/// A decoded class description with its convex weights over the bank.
#[derive(Debug, Clone)]
pub struct Interpretation {
    pub sentence: String,
    pub weights: Vec<f64>,
    pub f_hat: Tensor,
}

/// Render a class's text feature as a sentence: project it, softmax its
/// cosine similarities to the bank's projected embeddings at `tau_interp`,
/// take the convex combination of the raw F^num embeddings, and decode.
pub fn interpret_class(
    f_text: &Tensor,
    bank: &EmbeddingBank,
    heads: &ProjectionHeads,
    store: &ParamStore,
    model: &DecoderModel,
    tau_interp: f64,
) -> Result<Interpretation> {
    if bank.is_empty() {
        return Err(DecoderError::EmptyBank);
    }
    let p_text = heads.project_plain(store, HeadKind::Text, f_text)?;
    let scores: Vec<f64> = bank
        .entries()
        .iter()
        .map(|e| p_text.dot(&e.p_num) / (p_text.norm() * e.p_num.norm()) / tau_interp)
        .collect();
    let mut weights = vec![0.0; scores.len()];
    graph::softmax_row(&scores, &mut weights);
    let d = model.config().dim;
    let mut f_hat = vec![0.0; d];
    for (w, e) in weights.iter().zip(bank.entries()) {
        for (o, &x) in f_hat.iter_mut().zip(e.f_num.data()) {
            *o += w * x;
        }
    }
    let f_hat = Tensor::vector(f_hat);
    let sentence = model.decode_to_sentence(&f_hat, model.config().max_len)?;
    Ok(Interpretation { sentence, weights, f_hat })
}
