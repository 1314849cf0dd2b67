//! Frozen dual encoders and the learnable prompts that steer them.
//!
//! Both encoders are small pre-LN transformers (bias-free projections,
//! parameter-free layer norm) whose weights are generated once from a seed
//! and never trained. Adaptation happens exclusively through prompts:
//!
//! * text side — per-class context vectors `C_i^k = Proj_k(e_i) + X_i^k`
//!   built from a frozen description embedding `e_i`, concatenated with
//!   keyword tokens and the class-name tokens, then encoded;
//! * video side — per-layer summary/global/local prompt tokens prepended
//!   to the frame tokens before every frozen layer, plus a trainable
//!   frame tokenizer.
//!
//! Every forward exists twice: a plain-tensor inference path and a graph
//! path where frozen weights enter the tape as non-differentiable leaves,
//! so gradients can reach prompts but never the backbone.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{self, Graph, GraphError, Var};
use crate::numtext::{sinusoidal_pe, NumTextError, Vocabulary};
use crate::optim::ParamStore;
use crate::tensor::{matmul_nt_raw, matmul_raw, Tensor};

/// Epsilon of every layer norm in both encoders.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("description has no in-vocabulary words")]
    EmptyDescription,
    #[error("expected {expected} classes, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("sequence of {len} rows exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad frame tensor: {0}")]
    BadFrames(String),
    #[error("layer {layer} out of range for a {layers}-layer encoder")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("weight `{0}` missing from the parameter store")]
    MissingWeight(String),
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    NumText(#[from] NumTextError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { dim: 64, layers: 4, heads: 4, d_ff: 128, max_len: 96 }
    }
}

/// Additive attention mask blocking j > i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = -1e30;
        }
    }
    Tensor::new(vec![n, n], data).expect("mask shape is valid")
}

// ── Frozen transformer core ──────────────────────────────────────────

/// Frozen transformer weights under a name prefix, with matching plain and
/// graph forward paths (identical operation order, so both agree bitwise).
#[derive(Debug, Clone)]
pub struct TransformerCore {
    cfg: EncoderConfig,
    prefix: &'static str,
    weights: ParamStore,
    pe: Tensor,
}

impl TransformerCore {
    fn init(cfg: EncoderConfig, prefix: &'static str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let mut weights = ParamStore::default();
        for l in 0..cfg.layers {
            let std_d = 1.0 / (d as f64).sqrt();
            let std_ff = 1.0 / (cfg.d_ff as f64).sqrt();
            for name in ["wq", "wk", "wv", "wo"] {
                let w = Tensor::randn(&[d, d], std_d, rng);
                weights.insert(&format!("{prefix}/l{l}/{name}"), w, false)?;
            }
            let w1 = Tensor::randn(&[d, cfg.d_ff], std_d, rng);
            weights.insert(&format!("{prefix}/l{l}/w1"), w1, false)?;
            let w2 = Tensor::randn(&[cfg.d_ff, d], std_ff, rng);
            weights.insert(&format!("{prefix}/l{l}/w2"), w2, false)?;
        }
        let pe = sinusoidal_pe(cfg.max_len, d)?;
        Ok(TransformerCore { cfg, prefix, weights, pe })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    /// Positional-encoding rows `[0, len)`.
    pub fn pe_rows(&self, len: usize) -> Result<Tensor> {
        if len > self.cfg.max_len {
            return Err(EncoderError::SequenceTooLong { len, max: self.cfg.max_len });
        }
        let d = self.cfg.dim;
        let data = self.pe.data()[..len * d].to_vec();
        Ok(Tensor::new(vec![len, d], data)?)
    }

    fn w(&self, layer: usize, name: &str) -> &Tensor {
        self.weights
            .get(&format!("{}/l{layer}/{name}", self.prefix))
            .expect("core weights are created in init")
    }

    /// One pre-LN block: `h + Attn(LN(h))`, then `+ MLP(LN(·))`.
    pub fn layer_rows(&self, h: &Tensor, layer: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        if layer >= self.cfg.layers {
            return Err(EncoderError::LayerOutOfRange { layer, layers: self.cfg.layers });
        }
        let x = layer_norm_plain(h);
        let q = matmul_plain(&x, self.w(layer, "wq"));
        let k = matmul_plain(&x, self.w(layer, "wk"));
        let v = matmul_plain(&x, self.w(layer, "wv"));
        let a = attention_plain(&q, &k, &v, self.cfg.heads, mask)?;
        let ao = matmul_plain(&a, self.w(layer, "wo"));
        let h = add_plain(h, &ao);
        let x2 = layer_norm_plain(&h);
        let m1 = gelu_plain(&matmul_plain(&x2, self.w(layer, "w1")));
        let m2 = matmul_plain(&m1, self.w(layer, "w2"));
        Ok(add_plain(&h, &m2))
    }

    /// Parameter-free final layer norm.
    pub fn final_ln(&self, h: &Tensor) -> Tensor {
        layer_norm_plain(h)
    }

    /// Full stack: all layers then the final layer norm. Returns every row.
    pub fn forward_rows(&self, rows: &Tensor, causal: bool) -> Result<Tensor> {
        let n = rows.shape()[0];
        let mask = if causal { Some(causal_mask(n)) } else { None };
        let mut h = rows.clone();
        for l in 0..self.cfg.layers {
            h = self.layer_rows(&h, l, mask.as_ref())?;
        }
        Ok(self.final_ln(&h))
    }

    /// Bind every frozen weight into the graph.
    pub fn bind_graph(&self, g: &mut Graph) -> Result<BTreeMap<String, Var>> {
        Ok(self.weights.bind_all(g)?)
    }

    /// Graph twin of [`TransformerCore::layer_rows`].
    pub fn layer_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        h: Var,
        layer: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        if layer >= self.cfg.layers {
            return Err(EncoderError::LayerOutOfRange { layer, layers: self.cfg.layers });
        }
        let wv = |name: &str| -> Result<Var> {
            let key = format!("{}/l{layer}/{name}", self.prefix);
            vars.get(&key).copied().ok_or(EncoderError::MissingWeight(key))
        };
        let x = g.layer_norm(h, LN_EPS)?;
        let q = g.matmul(x, wv("wq")?)?;
        let k = g.matmul(x, wv("wk")?)?;
        let v = g.matmul(x, wv("wv")?)?;
        let a = g.multi_head_attention(q, k, v, self.cfg.heads, mask)?;
        let ao = g.matmul(a, wv("wo")?)?;
        let h = g.add(h, ao)?;
        let x2 = g.layer_norm(h, LN_EPS)?;
        let m1 = g.matmul(x2, wv("w1")?)?;
        let m1 = g.gelu(m1)?;
        let m2 = g.matmul(m1, wv("w2")?)?;
        Ok(g.add(h, m2)?)
    }

    /// Graph twin of [`TransformerCore::forward_rows`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        rows: Var,
        causal: bool,
    ) -> Result<Var> {
        let n = g.value(rows).shape()[0];
        let mask = if causal { Some(causal_mask(n)) } else { None };
        let mut h = rows;
        for l in 0..self.cfg.layers {
            h = self.layer_graph(g, vars, h, l, mask.as_ref())?;
        }
        Ok(g.layer_norm(h, LN_EPS)?)
    }
}

// plain-path kernels, mirroring the graph ops operation-for-operation

fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let data = matmul_raw(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], data).expect("matmul shape is valid")
}

fn add_plain(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("add preserves shape")
}

fn layer_norm_plain(t: &Tensor) -> Tensor {
    let (rows, cols) = t.rows_cols();
    let mut data = vec![0.0; t.numel()];
    for r in 0..rows {
        let x = &t.data()[r * cols..(r + 1) * cols];
        let mean = x.iter().sum::<f64>() / cols as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("layer norm preserves shape")
}

fn gelu_plain(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&x| graph::gelu_fwd(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("gelu preserves shape")
}

fn softmax_rows_plain(t: &Tensor) -> Tensor {
    let (rows, cols) = t.rows_cols();
    let mut data = vec![0.0; t.numel()];
    for r in 0..rows {
        graph::softmax_row(&t.data()[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("softmax preserves shape")
}

fn attention_plain(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    if d % heads != 0 {
        return Err(EncoderError::BadFrames(format!("dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let slice_cols = |t: &Tensor, start: usize| -> Vec<f64> {
        let rows = t.shape()[0];
        let mut out = Vec::with_capacity(rows * hd);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + hd]);
        }
        out
    };
    let mut out = vec![0.0; nq * d];
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..heads {
        let qh = slice_cols(q, h * hd);
        let kh = slice_cols(k, h * hd);
        let vh = slice_cols(v, h * hd);
        let mut scores = matmul_nt_raw(&qh, &kh, nq, hd, nk);
        for s in &mut scores {
            *s *= scale;
        }
        if let Some(m) = mask {
            for (s, &mm) in scores.iter_mut().zip(m.data()) {
                *s += mm;
            }
        }
        let probs = softmax_rows_plain(&Tensor::new(vec![nq, nk], scores)?);
        let oh = matmul_raw(probs.data(), &vh, nq, nk, hd);
        for r in 0..nq {
            out[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&oh[r * hd..(r + 1) * hd]);
        }
    }
    Ok(Tensor::new(vec![nq, d], out)?)
}

// ── Frozen text encoder ──────────────────────────────────────────────

/// Frozen text transformer plus its token-embedding table (words + [EOS]).
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    core: TransformerCore,
}

impl FrozenTextEncoder {
    /// Seeded initialization. `embed_rows` is the number of embedding rows
    /// (vocabulary words plus the [EOS] row).
    pub fn new(cfg: EncoderConfig, embed_rows: usize, seed: u64) -> Result<FrozenTextEncoder> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::randn(&[embed_rows, cfg.dim], 1.0, &mut rng);
        let mut core = TransformerCore::init(cfg, "txt", &mut rng)?;
        core.weights.insert("txt/embed", table, false)?;
        Ok(FrozenTextEncoder { core })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.core.cfg
    }

    pub fn core(&self) -> &TransformerCore {
        &self.core
    }

    pub fn weights(&self) -> &ParamStore {
        &self.core.weights
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.core.weights.get("txt/embed").expect("embedding table is created in new")
    }

    /// Full-stack plain forward over pre-embedded rows (all rows returned).
    pub fn forward_rows(&self, rows: &Tensor, causal: bool) -> Result<Tensor> {
        self.core.forward_rows(rows, causal)
    }

    /// Frozen mean-pooled description embedding: in-vocabulary words only
    /// (unknown words are dropped with a warning), no positional encoding,
    /// bidirectional attention, mean over token outputs.
    pub fn embed_description(&self, text: &str, vocab: &Vocabulary) -> Result<Tensor> {
        let d = self.core.cfg.dim;
        let table = self.embedding_table();
        let mut rows = Vec::new();
        for w in Vocabulary::split_words(text) {
            match vocab.id_of(&w) {
                Some(id) => rows.extend_from_slice(table.row(id as usize)),
                None => eprintln!("warning: dropping out-of-vocabulary word `{w}`"),
            }
        }
        let n = rows.len() / d;
        if n == 0 {
            return Err(EncoderError::EmptyDescription);
        }
        let h = self.core.forward_rows(&Tensor::new(vec![n, d], rows)?, false)?;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(h.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(Tensor::vector(mean))
    }

    /// Prompt-free class encoding used by the no-KAPT ablation: the class
    /// name's token rows (plus positional encoding) through the frozen
    /// stack, final-token representation, unit-normalized.
    pub fn encode_class_name(&self, name: &str, vocab: &Vocabulary) -> Result<Tensor> {
        let d = self.core.cfg.dim;
        let table = self.embedding_table();
        let mut rows = Vec::new();
        for w in Vocabulary::split_words(name) {
            let id = vocab.id_of(&w).ok_or(NumTextError::OutOfVocabulary(w))?;
            rows.extend_from_slice(table.row(id as usize));
        }
        let n = rows.len() / d;
        if n == 0 {
            return Err(EncoderError::EmptyDescription);
        }
        let seq = add_plain(&Tensor::new(vec![n, d], rows)?, &self.core.pe_rows(n)?);
        let h = self.core.forward_rows(&seq, true)?;
        let last = h.row(n - 1);
        let norm = last.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(Tensor::vector(last.iter().map(|x| x / norm).collect()))
    }
}

// ── Frozen vision encoder ────────────────────────────────────────────

/// Frozen vision transformer (no embedding table; frames are tokenized by
/// the trainable tokenizer in [`VideoPromptModel`]).
#[derive(Debug, Clone)]
pub struct FrozenVisionEncoder {
    core: TransformerCore,
}

impl FrozenVisionEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<FrozenVisionEncoder> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = TransformerCore::init(cfg, "vid", &mut rng)?;
        Ok(FrozenVisionEncoder { core })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.core.cfg
    }

    pub fn core(&self) -> &TransformerCore {
        &self.core
    }

    pub fn weights(&self) -> &ParamStore {
        &self.core.weights
    }
}

// ── Class knowledge and keywords ─────────────────────────────────────

/// One class's name and free-text description.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKnowledge {
    pub name: String,
    pub text: String,
}

fn parse_knowledge(text: &str) -> Vec<ClassKnowledge> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (name, text) = l.split_once('\t').expect("knowledge rows are name<TAB>text");
            ClassKnowledge { name: name.to_string(), text: text.to_string() }
        })
        .collect()
}

/// Built-in 4-class gait-severity knowledge (normal/slight/mild/moderate).
pub fn gait_class_knowledge() -> Vec<ClassKnowledge> {
    parse_knowledge(include_str!("../data/knowledge_gait_v1.tsv"))
}

/// Built-in 3-class dementia-group knowledge.
pub fn dementia_class_knowledge() -> Vec<ClassKnowledge> {
    parse_knowledge(include_str!("../data/knowledge_dementia_v1.tsv"))
}

/// Load class knowledge from a `name<TAB>text` file with a header row.
pub fn load_class_knowledge(path: &std::path::Path) -> Result<Vec<ClassKnowledge>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EncoderError::BadFrames(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (name, body) = line.split_once('\t').ok_or_else(|| {
            EncoderError::BadFrames(format!("{} line {}: missing tab", path.display(), i + 1))
        })?;
        out.push(ClassKnowledge { name: name.to_string(), text: body.to_string() });
    }
    if out.is_empty() {
        return Err(EncoderError::EmptyDescription);
    }
    Ok(out)
}

/// Top-k keywords per document by TF-IDF over the document corpus; ties
/// break lexicographically. Punctuation tokens are excluded. Documents
/// with fewer than k distinct words yield fewer keywords.
pub fn extract_keywords(docs: &[&str], k: usize) -> Vec<Vec<String>> {
    let tokenized: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            Vocabulary::split_words(d)
                .into_iter()
                .filter(|w| !matches!(w.as_str(), "," | "." | ";" | ":"))
                .collect()
        })
        .collect();
    let n_docs = docs.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &tokenized {
        let uniq: std::collections::BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for w in uniq {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    tokenized
        .iter()
        .map(|doc| {
            let len = doc.len() as f64;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for w in doc {
                *counts.entry(w).or_insert(0) += 1;
            }
            let mut scored: Vec<(f64, &str)> = counts
                .iter()
                .map(|(&w, &c)| {
                    let tf = c as f64 / len;
                    let idf = (n_docs / df[w] as f64).ln();
                    (tf * idf, w)
                })
                .collect();
            // descending score, ascending word on ties
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            scored.into_iter().take(k).map(|(_, w)| w.to_string()).collect()
        })
        .collect()
}

// ── Knowledge-aware text prompts ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct KaptConfig {
    /// Number of learnable context slots per class.
    pub n_ctx: usize,
    /// Keywords per class forming the automatic prompt tokens.
    pub n_keywords: usize,
    /// Use one projection per (slot, class) instead of per slot.
    pub per_class_proj: bool,
}

impl Default for KaptConfig {
    fn default() -> Self {
        KaptConfig { n_ctx: 8, n_keywords: 5, per_class_proj: false }
    }
}

/// Everything fixed about the text prompts: per-class frozen description
/// embeddings, keyword token rows, and class-name token rows. Trainable
/// parts (context vectors, projections) live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub cfg: KaptConfig,
    pub n_classes: usize,
    dim: usize,
    desc_embeds: Vec<Tensor>,
    keyword_rows: Vec<Tensor>,
    cls_rows: Vec<Tensor>,
    pub keywords: Vec<Vec<String>>,
}

impl PromptBundle {
    /// Precompute the frozen ingredients for every class.
    pub fn build(
        knowledge: &[ClassKnowledge],
        enc: &FrozenTextEncoder,
        vocab: &Vocabulary,
        cfg: KaptConfig,
    ) -> Result<PromptBundle> {
        if knowledge.is_empty() {
            return Err(EncoderError::ClassCountMismatch { expected: 1, got: 0 });
        }
        let d = enc.config().dim;
        let table = enc.embedding_table();
        let docs: Vec<&str> = knowledge.iter().map(|k| k.text.as_str()).collect();
        let keywords = extract_keywords(&docs, cfg.n_keywords);
        let mut desc_embeds = Vec::new();
        let mut keyword_rows = Vec::new();
        let mut cls_rows = Vec::new();
        for (cls, k) in knowledge.iter().enumerate() {
            desc_embeds.push(enc.embed_description(&k.text, vocab)?);
            let mut kw = Vec::new();
            for w in &keywords[cls] {
                let id = vocab.try_id(w)?;
                kw.extend_from_slice(table.row(id as usize));
            }
            keyword_rows.push(Tensor::new(vec![kw.len() / d, d], kw)?);
            let mut cr = Vec::new();
            for w in Vocabulary::split_words(&k.name) {
                let id = vocab.try_id(&w)?;
                cr.extend_from_slice(table.row(id as usize));
            }
            if cr.is_empty() {
                return Err(EncoderError::EmptyDescription);
            }
            cls_rows.push(Tensor::new(vec![cr.len() / d, d], cr)?);
        }
        Ok(PromptBundle {
            cfg,
            n_classes: knowledge.len(),
            dim: d,
            desc_embeds,
            keyword_rows,
            cls_rows,
            keywords,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn desc_embed(&self, class: usize) -> Result<&Tensor> {
        self.desc_embeds.get(class).ok_or(EncoderError::BadClass(class))
    }

    /// Prompt sequence length for a class: context + keywords + name rows.
    pub fn seq_len(&self, class: usize) -> Result<usize> {
        if class >= self.n_classes {
            return Err(EncoderError::BadClass(class));
        }
        Ok(self.cfg.n_ctx + self.keyword_rows[class].shape()[0] + self.cls_rows[class].shape()[0])
    }

    fn proj_name(&self, slot: usize, class: usize, which: &str) -> String {
        if self.cfg.per_class_proj {
            format!("kapt/proj{slot}/c{class}/{which}")
        } else {
            format!("kapt/proj{slot}/{which}")
        }
    }

    fn x_name(class: usize, slot: usize) -> String {
        format!("kapt/x/c{class}/k{slot}")
    }

    /// Create the trainable prompt parameters: per-slot projection MLPs
    /// (two bias-free linear layers with a GELU between) and per-class
    /// context vectors X_i^k.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let classes_per_proj = if self.cfg.per_class_proj { self.n_classes } else { 1 };
        for k in 0..self.cfg.n_ctx {
            for c in 0..classes_per_proj {
                let cls = if self.cfg.per_class_proj { c } else { usize::MAX };
                let name = |which: &str| {
                    if self.cfg.per_class_proj {
                        format!("kapt/proj{k}/c{cls}/{which}")
                    } else {
                        format!("kapt/proj{k}/{which}")
                    }
                };
                store.insert(&name("w1"), Tensor::randn(&[d, d], std, &mut rng), true)?;
                store.insert(&name("w2"), Tensor::randn(&[d, d], std, &mut rng), true)?;
            }
        }
        for i in 0..self.n_classes {
            for k in 0..self.cfg.n_ctx {
                let x = Tensor::randn(&[1, d], 0.02, &mut rng);
                store.insert(&Self::x_name(i, k), x, true)?;
            }
        }
        Ok(())
    }

    /// C_i^k for one class on the plain path: `Proj_k(e_i) + X_i^k` rows.
    pub fn class_contexts_plain(&self, store: &ParamStore, class: usize) -> Result<Tensor> {
        if class >= self.n_classes {
            return Err(EncoderError::BadClass(class));
        }
        let d = self.dim;
        let e = Tensor::new(vec![1, d], self.desc_embeds[class].data().to_vec())?;
        let mut rows = Vec::with_capacity(self.cfg.n_ctx * d);
        for k in 0..self.cfg.n_ctx {
            let get = |which: &str| -> Result<&Tensor> {
                let name = self.proj_name(k, class, which);
                store.get(&name).ok_or(EncoderError::MissingWeight(name))
            };
            let h = gelu_plain(&matmul_plain(&e, get("w1")?));
            let p = matmul_plain(&h, get("w2")?);
            let xn = Self::x_name(class, k);
            let x = store.get(&xn).ok_or(EncoderError::MissingWeight(xn))?;
            rows.extend(add_plain(&p, x).data());
        }
        Ok(Tensor::new(vec![self.cfg.n_ctx, d], rows)?)
    }

    /// F_i^T on the plain path: [C_i^1..k, keyword rows, class rows] + PE,
    /// causal frozen encoder, final-token row, unit-normalized.
    pub fn encode_text_plain(
        &self,
        store: &ParamStore,
        enc: &FrozenTextEncoder,
        class: usize,
    ) -> Result<Tensor> {
        let ctx = self.class_contexts_plain(store, class)?;
        let mut rows = ctx.data().to_vec();
        rows.extend(self.keyword_rows[class].data());
        rows.extend(self.cls_rows[class].data());
        let n = rows.len() / self.dim;
        let seq = Tensor::new(vec![n, self.dim], rows)?;
        let seq = add_plain(&seq, &enc.core.pe_rows(n)?);
        let h = enc.core.forward_rows(&seq, true)?;
        let last = h.row(n - 1);
        let norm = last.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(Tensor::vector(last.iter().map(|x| x / norm).collect()))
    }

    /// Graph twin of [`PromptBundle::encode_text_plain`]; gradients reach
    /// the projection weights and X_i^k only. Frozen encoder leaves must
    /// already be bound into `vars` (see [`TransformerCore::bind_graph`]),
    /// as must the trainable prompt parameters.
    pub fn encode_text_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        enc: &FrozenTextEncoder,
        class: usize,
    ) -> Result<Var> {
        if class >= self.n_classes {
            return Err(EncoderError::BadClass(class));
        }
        let d = self.dim;
        let e = g.constant(Tensor::new(vec![1, d], self.desc_embeds[class].data().to_vec())?)?;
        let lookup = |vars: &BTreeMap<String, Var>, name: String| -> Result<Var> {
            vars.get(&name).copied().ok_or(EncoderError::MissingWeight(name))
        };
        let mut parts = Vec::with_capacity(self.cfg.n_ctx + 2);
        for k in 0..self.cfg.n_ctx {
            let w1 = lookup(vars, self.proj_name(k, class, "w1"))?;
            let w2 = lookup(vars, self.proj_name(k, class, "w2"))?;
            let x = lookup(vars, Self::x_name(class, k))?;
            let h = g.matmul(e, w1)?;
            let h = g.gelu(h)?;
            let p = g.matmul(h, w2)?;
            parts.push(g.add(p, x)?);
        }
        parts.push(g.constant(self.keyword_rows[class].clone())?);
        parts.push(g.constant(self.cls_rows[class].clone())?);
        let seq = g.concat_rows(&parts)?;
        let n = g.value(seq).shape()[0];
        let pe = g.constant(enc.core.pe_rows(n)?)?;
        let seq = g.add(seq, pe)?;
        let h = enc.core.forward_graph(g, vars, seq, true)?;
        let last = g.slice_rows(h, n - 1, 1)?;
        let last = g.reshape(last, &[d])?;
        Ok(g.l2_normalize(last)?)
    }
}

// ── Video prompts ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VideoConfig {
    /// Per-frame input feature dimension.
    pub f_in: usize,
    /// Learnable global tokens per layer.
    pub n_global: usize,
    /// Frames per clip.
    pub window: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { f_in: 12, n_global: 2, window: 70 }
    }
}

/// Trainable video prompting: a frame tokenizer plus per-layer summary
/// query, global tokens, and a local per-frame projection.
#[derive(Debug, Clone)]
pub struct VideoPromptModel {
    pub cfg: VideoConfig,
    dim: usize,
    layers: usize,
}

impl VideoPromptModel {
    pub fn new(cfg: VideoConfig, enc: &FrozenVisionEncoder) -> VideoPromptModel {
        VideoPromptModel { cfg, dim: enc.config().dim, layers: enc.config().layers }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Create the trainable parameters: "vid/tok" (frame tokenizer) and per
    /// layer "vid/l{l}/sq" (summary query), "vid/l{l}/g" (global tokens),
    /// "vid/l{l}/local" (per-frame projection).
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = Tensor::randn(&[self.cfg.f_in, d], 1.0 / (self.cfg.f_in as f64).sqrt(), &mut rng);
        store.insert("vid/tok", tok, true)?;
        for l in 0..self.layers {
            store.insert(&format!("vid/l{l}/sq"), Tensor::randn(&[1, d], 1.0, &mut rng), true)?;
            let g = Tensor::randn(&[self.cfg.n_global, d], 0.02, &mut rng);
            store.insert(&format!("vid/l{l}/g"), g, true)?;
            let local = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
            store.insert(&format!("vid/l{l}/local"), local, true)?;
        }
        Ok(())
    }

    fn get<'a>(&self, store: &'a ParamStore, name: String) -> Result<&'a Tensor> {
        store.get(&name).ok_or(EncoderError::MissingWeight(name))
    }

    /// (S, G, L) for one layer on the plain path: S is the learned-query
    /// attention pool of `z_prev`, G the layer's global tokens, L the
    /// per-frame projection of `z_prev`.
    pub fn prompt_step_plain(
        &self,
        store: &ParamStore,
        z_prev: &Tensor,
        layer: usize,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if layer >= self.layers {
            return Err(EncoderError::LayerOutOfRange { layer, layers: self.layers });
        }
        let d = self.dim;
        let sq = self.get(store, format!("vid/l{layer}/sq"))?;
        let gt = self.get(store, format!("vid/l{layer}/g"))?;
        let local = self.get(store, format!("vid/l{layer}/local"))?;
        let t = z_prev.shape()[0];
        let mut scores = matmul_nt_raw(sq.data(), z_prev.data(), 1, d, t);
        let scale = 1.0 / (d as f64).sqrt();
        for s in &mut scores {
            *s *= scale;
        }
        let probs = softmax_rows_plain(&Tensor::new(vec![1, t], scores)?);
        let s = Tensor::new(vec![1, d], matmul_raw(probs.data(), z_prev.data(), 1, t, d))?;
        let l = matmul_plain(z_prev, local);
        Ok((s, gt.clone(), l))
    }

    /// F^V on the plain path: frames are tokenized and positioned once; at
    /// each layer [S; G; L] is prepended and the frozen layer applied; the
    /// frame rows carry forward. The final layer's summary-row output,
    /// layer-normalized and unit-normalized, is F^V.
    pub fn encode_video_plain(
        &self,
        store: &ParamStore,
        enc: &FrozenVisionEncoder,
        frames: &Tensor,
    ) -> Result<Tensor> {
        self.check_frames(frames)?;
        let t = frames.shape()[0];
        let tok = self.get(store, "vid/tok".into())?;
        let mut z = add_plain(&matmul_plain(frames, tok), &enc.core.pe_rows(t)?);
        let mut summary = None;
        for l in 0..self.layers {
            let (s, gt, loc) = self.prompt_step_plain(store, &z, l)?;
            let mut rows = s.data().to_vec();
            rows.extend(gt.data());
            rows.extend(loc.data());
            rows.extend(z.data());
            let n = 1 + self.cfg.n_global + 2 * t;
            let input = Tensor::new(vec![n, self.dim], rows)?;
            let out = enc.core.layer_rows(&input, l, None)?;
            let start = (1 + self.cfg.n_global + t) * self.dim;
            z = Tensor::new(vec![t, self.dim], out.data()[start..].to_vec())?;
            summary = Some(Tensor::new(vec![1, self.dim], out.data()[..self.dim].to_vec())?);
        }
        let s = enc.core.final_ln(&summary.expect("layers >= 1"));
        let row = s.row(0);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(Tensor::vector(row.iter().map(|x| x / norm).collect()))
    }

    /// Graph twin of [`VideoPromptModel::encode_video_plain`]. `vars` must
    /// hold the frozen encoder leaves and this model's trainable leaves.
    pub fn encode_video_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        enc: &FrozenVisionEncoder,
        frames: &Tensor,
    ) -> Result<Var> {
        self.check_frames(frames)?;
        let t = frames.shape()[0];
        let d = self.dim;
        let lookup = |name: String| -> Result<Var> {
            vars.get(&name).copied().ok_or(EncoderError::MissingWeight(name))
        };
        let frames_v = g.constant(frames.clone())?;
        let tok = lookup("vid/tok".into())?;
        let zt = g.matmul(frames_v, tok)?;
        let pe = g.constant(enc.core.pe_rows(t)?)?;
        let mut z = g.add(zt, pe)?;
        let mut summary = None;
        let scale = 1.0 / (d as f64).sqrt();
        for l in 0..self.layers {
            let sq = lookup(format!("vid/l{l}/sq"))?;
            let gt = lookup(format!("vid/l{l}/g"))?;
            let local = lookup(format!("vid/l{l}/local"))?;
            let scores = g.matmul_nt(sq, z)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores)?;
            let s = g.matmul(probs, z)?;
            let loc = g.matmul(z, local)?;
            let input = g.concat_rows(&[s, gt, loc, z])?;
            let out = enc.core.layer_graph(g, vars, input, l, None)?;
            z = g.slice_rows(out, 1 + self.cfg.n_global + t, t)?;
            summary = Some(g.slice_rows(out, 0, 1)?);
        }
        let s = g.layer_norm(summary.expect("layers >= 1"), LN_EPS)?;
        let s = g.reshape(s, &[d])?;
        Ok(g.l2_normalize(s)?)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.rank() != 2
            || frames.shape()[0] != self.cfg.window
            || frames.shape()[1] != self.cfg.f_in
        {
            return Err(EncoderError::BadFrames(format!(
                "expected [{}, {}], got {:?}",
                self.cfg.window,
                self.cfg.f_in,
                frames.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { dim: 16, layers: 2, heads: 2, d_ff: 24, max_len: 32 }
    }

    fn test_enc() -> (FrozenTextEncoder, Vocabulary) {
        let vocab = Vocabulary::standard();
        let enc = FrozenTextEncoder::new(small_cfg(), vocab.n_words() + 1, 42).unwrap();
        (enc, vocab)
    }

    #[test]
    fn plain_and_graph_forwards_agree_bitwise() {
        let (enc, _) = test_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = Tensor::randn(&[7, 16], 1.0, &mut rng);
        for causal in [false, true] {
            let plain = enc.core.forward_rows(&rows, causal).unwrap();
            let mut g = Graph::new();
            let vars = enc.core.bind_graph(&mut g).unwrap();
            let rv = g.constant(rows.clone()).unwrap();
            let hv = enc.core.forward_graph(&mut g, &vars, rv, causal).unwrap();
            assert_eq!(g.value(hv).data(), plain.data(), "causal={causal}");
        }
    }

    #[test]
    fn embed_description_is_deterministic_and_distinguishes_fixtures() {
        let (enc, vocab) = test_enc();
        let know = gait_class_knowledge();
        let a = enc.embed_description(&know[0].text, &vocab).unwrap();
        let b = enc.embed_description(&know[0].text, &vocab).unwrap();
        assert_eq!(a, b);
        let c = enc.embed_description(&know[3].text, &vocab).unwrap();
        let cos = a.dot(&c) / (a.norm() * c.norm());
        assert!(cos < 0.999, "distinct fixtures too similar: {cos}");
    }

    #[test]
    fn embed_description_duplication_invariance() {
        let (enc, vocab) = test_enc();
        let text = "walking speed is high and steady";
        let once = enc.embed_description(text, &vocab).unwrap();
        let twice = enc.embed_description(&format!("{text} {text}"), &vocab).unwrap();
        // no positional encoding + bidirectional attention + mean pooling:
        // exact duplication changes nothing beyond float re-association
        assert!(once.max_abs_diff(&twice) < 1e-12, "diff {}", once.max_abs_diff(&twice));
    }

    #[test]
    fn embed_description_drops_unknown_words_and_rejects_empty() {
        let (enc, vocab) = test_enc();
        let with_junk = enc.embed_description("walking speed zzyzx", &vocab).unwrap();
        let without = enc.embed_description("walking speed", &vocab).unwrap();
        assert_eq!(with_junk, without);
        assert!(matches!(
            enc.embed_description("zzyzx qwfp", &vocab),
            Err(EncoderError::EmptyDescription)
        ));
    }

    #[test]
    fn keywords_prefer_distinctive_words() {
        let know = gait_class_knowledge();
        let docs: Vec<&str> = know.iter().map(|k| k.text.as_str()).collect();
        let kw = extract_keywords(&docs, 5);
        assert_eq!(kw.len(), 4);
        for list in &kw {
            assert_eq!(list.len(), 5);
        }
        // "gait" appears in every description: IDF 0 keeps it out
        assert!(kw.iter().all(|l| !l.contains(&"gait".to_string())));
        // the single-word-document case returns that word
        assert_eq!(extract_keywords(&["speed"], 3), vec![vec!["speed".to_string()]]);
    }

    #[test]
    fn keywords_are_deterministic_with_lexicographic_ties() {
        let docs = ["b a d c", "x y z w"];
        let kw = extract_keywords(&docs, 4);
        // all scores tie within a doc; order must be lexicographic
        assert_eq!(kw[0], vec!["a", "b", "c", "d"]);
        assert_eq!(kw[1], vec!["w", "x", "y", "z"]);
    }

    fn build_bundle() -> (PromptBundle, FrozenTextEncoder, Vocabulary, ParamStore) {
        let (enc, vocab) = test_enc();
        let know = gait_class_knowledge();
        let bundle = PromptBundle::build(&know, &enc, &vocab, KaptConfig {
            n_ctx: 3,
            n_keywords: 2,
            per_class_proj: false,
        })
        .unwrap();
        let mut store = ParamStore::default();
        bundle.init_params(&mut store, 5).unwrap();
        (bundle, enc, vocab, store)
    }

    #[test]
    fn zero_description_embedding_gives_context_equal_to_x() {
        let (mut bundle, _enc, _vocab, store) = build_bundle();
        bundle.desc_embeds[1] = Tensor::zeros(&[16]);
        let ctx = bundle.class_contexts_plain(&store, 1).unwrap();
        for k in 0..3 {
            let x = store.get(&format!("kapt/x/c1/k{k}")).unwrap();
            assert_eq!(ctx.row(k), x.data(), "slot {k}");
        }
    }

    #[test]
    fn contexts_match_explicit_formula() {
        let (bundle, _enc, _vocab, store) = build_bundle();
        let ctx = bundle.class_contexts_plain(&store, 2).unwrap();
        let e = Tensor::new(vec![1, 16], bundle.desc_embeds[2].data().to_vec()).unwrap();
        for k in 0..3 {
            let w1 = store.get(&format!("kapt/proj{k}/w1")).unwrap();
            let w2 = store.get(&format!("kapt/proj{k}/w2")).unwrap();
            let x = store.get(&format!("kapt/x/c2/k{k}")).unwrap();
            let want = add_plain(&matmul_plain(&gelu_plain(&matmul_plain(&e, w1)), w2), x);
            assert_eq!(ctx.row(k), want.data());
        }
    }

    #[test]
    fn encode_text_unit_norm_and_paths_agree() {
        let (bundle, enc, _vocab, store) = build_bundle();
        for class in 0..4 {
            let plain = bundle.encode_text_plain(&store, &enc, class).unwrap();
            assert!((plain.norm() - 1.0).abs() < 1e-12);
            let mut g = Graph::new();
            let mut vars = enc.core.bind_graph(&mut g).unwrap();
            vars.extend(store.bind_all(&mut g).unwrap());
            let fv = bundle.encode_text_graph(&mut g, &vars, &enc, class).unwrap();
            assert!(g.value(fv).max_abs_diff(&plain) < 1e-12, "class {class}");
        }
    }

    #[test]
    fn perturbing_one_class_context_leaves_other_classes_fixed() {
        let (bundle, enc, _vocab, mut store) = build_bundle();
        let f0 = bundle.encode_text_plain(&store, &enc, 0).unwrap();
        let f1 = bundle.encode_text_plain(&store, &enc, 1).unwrap();
        store.get_mut("kapt/x/c0/k1").unwrap().data_mut()[3] += 0.5;
        let f0b = bundle.encode_text_plain(&store, &enc, 0).unwrap();
        let f1b = bundle.encode_text_plain(&store, &enc, 1).unwrap();
        assert!(f0.max_abs_diff(&f0b) > 0.0);
        assert_eq!(f1, f1b);
    }

    #[test]
    fn text_gradients_reach_prompts_but_never_frozen_weights() {
        let (bundle, enc, _vocab, store) = build_bundle();
        let mut g = Graph::new();
        let mut vars = enc.core.bind_graph(&mut g).unwrap();
        vars.extend(store.bind_all(&mut g).unwrap());
        let fv = bundle.encode_text_graph(&mut g, &vars, &enc, 0).unwrap();
        let loss = g.sum_all(fv).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("kapt/x/c0/k0").is_some());
        assert!(grads.get("kapt/proj0/w1").is_some());
        let x_grad = grads.get("kapt/x/c0/k0").unwrap();
        assert!(x_grad.data().iter().any(|&v| v != 0.0));
        for name in grads.names() {
            assert!(!name.starts_with("txt/"), "frozen weight {name} received a gradient");
        }
    }

    fn video_setup() -> (VideoPromptModel, FrozenVisionEncoder, ParamStore) {
        let enc = FrozenVisionEncoder::new(small_cfg(), 77).unwrap();
        let model = VideoPromptModel::new(VideoConfig { f_in: 5, n_global: 2, window: 6 }, &enc);
        let mut store = ParamStore::default();
        model.init_params(&mut store, 3).unwrap();
        (model, enc, store)
    }

    #[test]
    fn prompt_step_zero_input_zeroes_s_and_l_only() {
        let (model, _enc, store) = video_setup();
        let z = Tensor::zeros(&[6, 16]);
        let (s, gt, l) = model.prompt_step_plain(&store, &z, 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert_eq!(&gt, store.get("vid/l1/g").unwrap());
        assert!(matches!(
            model.prompt_step_plain(&store, &z, 2),
            Err(EncoderError::LayerOutOfRange { layer: 2, layers: 2 })
        ));
    }

    #[test]
    fn local_prompt_row_t_depends_only_on_frame_t() {
        let (model, _enc, store) = video_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[6, 16], 1.0, &mut rng);
        let (_, _, l0) = model.prompt_step_plain(&store, &z, 0).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[3 * 16 + 2] += 1.0;
        let (_, _, l1) = model.prompt_step_plain(&store, &z2, 0).unwrap();
        for t in 0..6 {
            let changed = l0.row(t) != l1.row(t);
            assert_eq!(changed, t == 3, "row {t}");
        }
    }

    #[test]
    fn global_tokens_are_input_independent() {
        let (model, _enc, store) = video_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let za = Tensor::randn(&[6, 16], 1.0, &mut rng);
        let zb = Tensor::randn(&[6, 16], 1.0, &mut rng);
        let (_, ga, _) = model.prompt_step_plain(&store, &za, 0).unwrap();
        let (_, gb, _) = model.prompt_step_plain(&store, &zb, 0).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn encode_video_unit_norm_deterministic_and_paths_agree() {
        let (model, enc, store) = video_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let a = model.encode_video_plain(&store, &enc, &frames).unwrap();
        let b = model.encode_video_plain(&store, &enc, &frames).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let mut g = Graph::new();
        let mut vars = enc.core.bind_graph(&mut g).unwrap();
        vars.extend(store.bind_all(&mut g).unwrap());
        let fv = model.encode_video_graph(&mut g, &vars, &enc, &frames).unwrap();
        assert!(g.value(fv).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn encode_video_rejects_wrong_shapes() {
        let (model, enc, store) = video_setup();
        let bad_t = Tensor::zeros(&[5, 5]);
        let bad_f = Tensor::zeros(&[6, 4]);
        assert!(model.encode_video_plain(&store, &enc, &bad_t).is_err());
        assert!(model.encode_video_plain(&store, &enc, &bad_f).is_err());
    }

    #[test]
    fn video_gradients_reach_prompts_and_tokenizer_only() {
        let (model, enc, store) = video_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut vars = enc.core.bind_graph(&mut g).unwrap();
        vars.extend(store.bind_all(&mut g).unwrap());
        let fv = model.encode_video_graph(&mut g, &vars, &enc, &frames).unwrap();
        let loss = g.sum_all(fv).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in ["vid/tok", "vid/l0/sq", "vid/l0/g", "vid/l0/local", "vid/l1/g"] {
            let gr = grads.get(name).unwrap_or_else(|| panic!("{name} missing"));
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name} all-zero");
        }
        for name in grads.names() {
            assert!(!enc.weights().contains(name), "frozen weight {name} received a gradient");
        }
    }

    #[test]
    fn training_step_leaves_frozen_weights_bitwise_unchanged() {
        let (model, enc, mut store) = video_setup();
        let frozen_before: Vec<(String, Tensor)> = enc
            .weights()
            .iter()
            .map(|(n, t, _)| (n.to_string(), t.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut vars = enc.core.bind_graph(&mut g).unwrap();
        vars.extend(store.bind_all(&mut g).unwrap());
        let fv = model.encode_video_graph(&mut g, &vars, &enc, &frames).unwrap();
        let loss = g.sum_all(fv).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut store, &grads).unwrap();
        for (name, before) in &frozen_before {
            assert_eq!(enc.weights().get(name).unwrap(), before, "{name} changed");
        }
    }

    #[test]
    fn class_name_encoding_is_unit_norm() {
        let (enc, vocab) = test_enc();
        let f = enc.encode_class_name("dementia with lewy bodies", &vocab).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-12);
        assert!(enc.encode_class_name("zzyzx", &vocab).is_err());
    }

    #[test]
    fn knowledge_fixtures_are_fully_in_vocabulary() {
        let vocab = Vocabulary::standard();
        for know in [gait_class_knowledge(), dementia_class_knowledge()] {
            for k in &know {
                for w in Vocabulary::split_words(&k.text).iter().chain(
                    Vocabulary::split_words(&k.name).iter(),
                ) {
                    assert!(vocab.id_of(w).is_some(), "fixture word `{w}` not in vocabulary");
                }
            }
        }
    }

    #[test]
    fn builtin_knowledge_has_expected_classes() {
        let g = gait_class_knowledge();
        assert_eq!(
            g.iter().map(|k| k.name.as_str()).collect::<Vec<_>>(),
            ["normal", "slight", "mild", "moderate"]
        );
        let d = dementia_class_knowledge();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|k| !k.text.is_empty()));
    }
}
