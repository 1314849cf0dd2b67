//! Numeracy-enhanced tokenization and embedding.
//!
//! Numbers never become digit tokens. A sentence is lexed into word tokens,
//! an `is` marker, and numeric items carrying a normalized value ω. At the
//! embedding layer a numeric item contributes exactly `ω·[NUM] + PE_t`,
//! where `[NUM]` is a unit vector constructed orthogonal to every row of
//! the positional encoding — so the value moves the embedding continuously
//! along a direction the position cannot leak into.
//!
//! The vocabulary is closed and word-level. `[EOS]` keeps its conventional
//! id 49407, and numeric buckets occupy the contiguous block
//! 49408..=49608 (201 ids for the integer scale 0..=200). The paper-style
//! arithmetic `tok = [EOS] + scale` would collide with `[EOS]` itself at
//! scale 0, so ids are shifted up by one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoders::FrozenTextEncoder;
use crate::gaitparams::{self, GaitParamError, NormalizationStats, ParameterTable, NORM_RANGE};
use crate::graph::GraphError;
use crate::tensor::Tensor;

pub const EOS_ID: u32 = 49407;
pub const N_NUM: u32 = 200;
/// First numeric id (scale 0). One above [EOS] to avoid the collision the
/// literal `[EOS] + scale` arithmetic would produce at scale 0.
pub const NUM_START: u32 = EOS_ID + 1;
/// Last numeric id (scale 200).
pub const NUM_END: u32 = NUM_START + N_NUM;
/// Largest possible id distance, used by the ordinal loss weight.
pub const D_MAX: u32 = NUM_END;

#[derive(Debug, thiserror::Error)]
pub enum NumTextError {
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("normalized value {0} outside [-2.5, 2.5]")]
    ValueOutOfRange(f64),
    #[error("token id {0} is not a numeric id")]
    BadTokenId(u32),
    #[error("sequence of {len} tokens exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("positional encoding spans all {d} dimensions (rank {rank}); increase the embedding dim")]
    NoNullSpace { d: usize, rank: usize },
    #[error("embedding dim must be even and >= 2, got {0}")]
    BadDim(usize),
    #[error("template must contain exactly one [value] slot, found {0}")]
    BadTemplate(usize),
    #[error("grid must be sorted ascending")]
    UnsortedGrid,
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gait(#[from] GaitParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, NumTextError>;

// ── Vocabulary ───────────────────────────────────────────────────────

const UNITS: &[&str] = &["%", "cm", "deg", "leg/sec", "sec"];
const PUNCT: &[&str] = &[",", "."];

/// Closed-vocabulary words beyond the parameter descriptions: conjunctions,
/// class names, and the descriptive words the class-knowledge fixtures use.
const EXTRA_WORDS: &[&str] = &[
    "a", "an", "and", "are", "with", "without", "shows", "appears", "remains", "stays",
    "becomes", "high", "low", "fast", "slow", "short", "long", "small", "large", "wide",
    "narrow", "close", "near", "far", "regular", "irregular", "steady", "unsteady", "stable",
    "unstable", "symmetric", "asymmetric", "balanced", "normal", "slight", "slightly", "mild",
    "mildly", "moderate", "moderately", "severe", "severely", "reduced", "increased",
    "preserved", "impaired", "variable", "consistent", "gait", "pattern", "rhythm", "cadence",
    "stride", "pace", "posture", "balance", "sway", "support", "double", "single", "shuffling",
    "freezing", "hesitation", "festination", "stooped", "tremor", "rigidity", "person",
    "subject", "patient", "healthy", "elderly", "dementia", "lewy", "body", "bodies",
    "alzheimer", "disease", "memory", "cognitive", "attention", "fluctuating", "visual",
    "parkinsonian", "deviation", "deviates", "markedly", "noticeably", "turning", "turns",
    "lifts", "drags", "clearance",
];

/// Word-level closed vocabulary. Word ids are contiguous from 0 in
/// lexicographic order, [EOS] = 49407, numeric ids fill 49408..=49608.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// The standard vocabulary: every word of the 29 parameter descriptions,
    /// units, punctuation, and the fixed extra-word list.
    pub fn standard() -> Vocabulary {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for def in ParameterTable::builtin().iter() {
            for w in def.description.split_whitespace() {
                set.insert(w.to_lowercase());
            }
        }
        for w in UNITS.iter().chain(PUNCT).chain(EXTRA_WORDS) {
            set.insert(w.to_string());
        }
        let words: Vec<String> = set.into_iter().collect();
        assert!(words.len() < EOS_ID as usize, "closed vocabulary must stay below [EOS]");
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words, index }
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn try_id(&self, word: &str) -> Result<u32> {
        self.id_of(word).ok_or_else(|| NumTextError::OutOfVocabulary(word.to_string()))
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn is_numeric_id(id: u32) -> bool {
        (NUM_START..=NUM_END).contains(&id)
    }

    /// Total dense rows: words, [EOS], then the 201 numeric buckets.
    pub fn dense_size(&self) -> usize {
        self.n_words() + 1 + (N_NUM as usize + 1)
    }

    /// Dense row index of [EOS].
    pub fn dense_eos(&self) -> usize {
        self.n_words()
    }

    /// Map a sparse token id (word | [EOS] | numeric) to its dense row.
    pub fn dense_of_token(&self, id: u32) -> Option<usize> {
        if (id as usize) < self.n_words() {
            Some(id as usize)
        } else if id == EOS_ID {
            Some(self.dense_eos())
        } else if Self::is_numeric_id(id) {
            Some(self.n_words() + 1 + (id - NUM_START) as usize)
        } else {
            None
        }
    }

    /// Inverse of [`Vocabulary::dense_of_token`].
    pub fn token_of_dense(&self, row: usize) -> Option<u32> {
        if row < self.n_words() {
            Some(row as u32)
        } else if row == self.dense_eos() {
            Some(EOS_ID)
        } else if row < self.dense_size() {
            Some(NUM_START + (row - self.n_words() - 1) as u32)
        } else {
            None
        }
    }

    /// Lowercase and split free text into word tokens, peeling `,` `.` `;`
    /// `:` off token edges as standalone tokens.
    pub fn split_words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut rest = lower.as_str();
            let mut lead = Vec::new();
            while let Some(c) = rest.chars().next() {
                if matches!(c, ',' | '.' | ';' | ':') {
                    lead.push(c.to_string());
                    rest = &rest[c.len_utf8()..];
                } else {
                    break;
                }
            }
            let mut tail = Vec::new();
            while let Some(c) = rest.chars().last() {
                if matches!(c, ',' | '.' | ';' | ':') {
                    tail.push(c.to_string());
                    rest = &rest[..rest.len() - c.len_utf8()];
                } else {
                    break;
                }
            }
            out.extend(lead);
            if !rest.is_empty() {
                out.push(rest.to_string());
            }
            out.extend(tail.into_iter().rev());
        }
        out
    }

    /// Serialize as `token<TAB>id` lines: words, then [EOS], then the
    /// numeric bucket ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        out.push_str(&format!("[EOS]\t{EOS_ID}\n"));
        for k in 0..=N_NUM {
            out.push_str(&format!("[NUM_{k:03}]\t{}\n", NUM_START + k));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let mut words = Vec::new();
        let mut saw_eos = false;
        let mut numeric_seen = 0u32;
        for (li, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, id_str) = line
                .split_once('\t')
                .ok_or_else(|| NumTextError::Format(format!("line {}: missing tab", li + 1)))?;
            let id: u32 = id_str
                .parse()
                .map_err(|_| NumTextError::Format(format!("line {}: bad id", li + 1)))?;
            if token == "[EOS]" {
                if id != EOS_ID {
                    return Err(NumTextError::Format(format!("[EOS] id {id}, expected {EOS_ID}")));
                }
                saw_eos = true;
            } else if token.starts_with("[NUM_") {
                let expected = NUM_START + numeric_seen;
                if id != expected {
                    return Err(NumTextError::Format(format!(
                        "numeric id {id} out of order, expected {expected}"
                    )));
                }
                numeric_seen += 1;
            } else {
                if id as usize != words.len() {
                    return Err(NumTextError::Format(format!(
                        "word id {id} out of order at line {}",
                        li + 1
                    )));
                }
                words.push(token.to_string());
            }
        }
        if !saw_eos || numeric_seen != N_NUM + 1 {
            return Err(NumTextError::Format(format!(
                "incomplete special tokens: eos={saw_eos}, numeric={numeric_seen}"
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Vocabulary { words, index })
    }
}

// ── Numeric token-id map ─────────────────────────────────────────────

/// Map a normalized value in [−2.5, 2.5] onto the graduated integer scale
/// {0..200} (round half up) and then into the numeric id block.
pub fn number_to_token_id(v_norm: f64) -> Result<u32> {
    if !v_norm.is_finite() || !(-NORM_RANGE..=NORM_RANGE).contains(&v_norm) {
        return Err(NumTextError::ValueOutOfRange(v_norm));
    }
    let x = (v_norm + NORM_RANGE) / (2.0 * NORM_RANGE) * N_NUM as f64;
    let scale = (x + 0.5).floor() as u32;
    Ok(NUM_START + scale.min(N_NUM))
}

/// Bucket-center value of a numeric token id.
pub fn token_id_to_value(tok: u32) -> Result<f64> {
    if !Vocabulary::is_numeric_id(tok) {
        return Err(NumTextError::BadTokenId(tok));
    }
    let scale = (tok - NUM_START) as f64;
    Ok(-NORM_RANGE + scale * (2.0 * NORM_RANGE / N_NUM as f64))
}

// ── [NUM] basis ──────────────────────────────────────────────────────

/// Fixed sinusoidal positional encoding, one row per position.
pub fn sinusoidal_pe(max_len: usize, d: usize) -> Result<Tensor> {
    if d < 2 || d % 2 != 0 {
        return Err(NumTextError::BadDim(d));
    }
    let mut data = vec![0.0; max_len * d];
    for t in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 * freq;
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![max_len, d], data).expect("pe shape is valid"))
}

/// The numeric embedding basis: a unit [NUM] direction orthogonal to every
/// positional-encoding row, plus the [IS] marker embedding (unit, orthogonal
/// to [NUM] by construction) and the PE table itself.
#[derive(Debug, Clone)]
pub struct NumBasis {
    pub num: Tensor,
    pub is: Tensor,
    pub pe: Tensor,
}

impl NumBasis {
    pub fn dim(&self) -> usize {
        self.num.numel()
    }

    pub fn max_len(&self) -> usize {
        self.pe.shape()[0]
    }

    /// max_t |⟨[NUM], PE_t⟩|.
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.dim();
        (0..self.max_len())
            .map(|t| {
                self.pe
                    .row(t)
                    .iter()
                    .zip(self.num.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
            .max(if d == 0 { f64::NAN } else { 0.0 })
    }
}

/// Orthonormal basis of the row span via pivoted modified Gram–Schmidt with
/// double reorthogonalization. Rows with residual norm below `tol` are
/// treated as dependent.
fn row_span_basis(rows: &Tensor) -> Vec<Vec<f64>> {
    let (m, d) = (rows.shape()[0], rows.shape()[1]);
    let mut residual: Vec<Vec<f64>> = (0..m).map(|t| rows.row(t).to_vec()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max0 = residual.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let tol = 1e-11 * max0;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..d.min(m) {
        let (pivot, pnorm) = residual
            .iter()
            .enumerate()
            .map(|(i, r)| (i, norm(r)))
            .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if pnorm <= tol {
            break;
        }
        let mut q = residual[pivot].clone();
        // double reorthogonalization keeps the basis orthonormal to ~1e-15
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = q.iter().zip(b).map(|(a, c)| a * c).sum();
                for (qi, bi) in q.iter_mut().zip(b) {
                    *qi -= dot * bi;
                }
            }
            let n = norm(&q);
            for qi in &mut q {
                *qi /= n;
            }
        }
        for r in &mut residual {
            let dot: f64 = r.iter().zip(&q).map(|(a, c)| a * c).sum();
            for (ri, qi) in r.iter_mut().zip(&q) {
                *ri -= dot * qi;
            }
        }
        basis.push(q);
    }
    basis
}

/// Build the [NUM]/[IS] basis for embedding dim `d` and positions up to
/// `max_len`. Deterministic per seed; errors if the PE rows span the full
/// space (no orthogonal direction exists).
pub fn build_num_basis(d: usize, max_len: usize, seed: u64) -> Result<NumBasis> {
    let pe = sinusoidal_pe(max_len, d)?;
    let basis = row_span_basis(&pe);
    if basis.len() >= d {
        return Err(NumTextError::NoNullSpace { d, rank: basis.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project_out = |v: &mut Vec<f64>, dirs: &[Vec<f64>]| {
        for _ in 0..2 {
            for b in dirs {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut num = Vec::new();
    for _ in 0..16 {
        let mut v = Tensor::randn(&[d], 1.0, &mut rng).data().to_vec();
        project_out(&mut v, &basis);
        let n = norm(&v);
        if n > 1e-8 {
            for vi in &mut v {
                *vi /= n;
            }
            num = v;
            break;
        }
    }
    if num.is_empty() {
        return Err(NumTextError::NoNullSpace { d, rank: basis.len() });
    }

    let mut is = Tensor::randn(&[d], 1.0, &mut rng).data().to_vec();
    let dirs = [num.clone()];
    project_out(&mut is, &dirs);
    let n = norm(&is);
    for vi in &mut is {
        *vi /= n;
    }

    Ok(NumBasis { num: Tensor::vector(num), is: Tensor::vector(is), pe })
}

// ── Token sequences ──────────────────────────────────────────────────

/// One item of a numeracy-aware token sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenItem {
    Word(u32),
    /// The logical conjunction "is", embedded via the dedicated [IS] vector.
    Is,
    /// A number carrying its normalized value ω ∈ [−2.5, 2.5].
    Num(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NumericTokenSequence {
    items: Vec<TokenItem>,
}

impl NumericTokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_word(&mut self, id: u32) {
        self.items.push(TokenItem::Word(id));
    }

    pub fn push_is(&mut self) {
        self.items.push(TokenItem::Is);
    }

    pub fn push_num(&mut self, omega: f64) -> Result<()> {
        if !omega.is_finite() || omega.abs() > NORM_RANGE {
            return Err(NumTextError::ValueOutOfRange(omega));
        }
        self.items.push(TokenItem::Num(omega));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TokenItem] {
        &self.items
    }

    pub fn num_values(&self) -> Vec<f64> {
        self.items
            .iter()
            .filter_map(|i| match i {
                TokenItem::Num(v) => Some(*v),
                _ => None,
            })
            .collect()
    }
}

/// Lex text into a numeracy-aware token sequence.
///
/// Description phrases are recognized by longest match against the 29
/// parameter descriptions; a number following such a phrase (after "is") is
/// normalized through `stats` for that parameter. Every "is" becomes the
/// [IS] marker. Bare numbers outside any recognized clause are taken as
/// already-normalized values and must lie in [−2.5, 2.5]. Unknown words are
/// an error naming the word.
pub fn tokenize(
    text: &str,
    vocab: &Vocabulary,
    stats: &NormalizationStats,
) -> Result<NumericTokenSequence> {
    let table = ParameterTable::builtin();
    // description word lists, lowercased once
    let descs: Vec<(u8, Vec<String>)> = table
        .iter()
        .map(|d| {
            (d.id, d.description.split_whitespace().map(|w| w.to_lowercase()).collect())
        })
        .collect();
    let tokens = Vocabulary::split_words(text);
    let mut seq = NumericTokenSequence::new();
    let mut i = 0;
    let mut current_param: Option<u8> = None;
    while i < tokens.len() {
        // longest description match starting here
        let mut best: Option<(u8, usize)> = None;
        for (id, words) in &descs {
            if words.len() <= tokens.len() - i
                && words.iter().zip(&tokens[i..]).all(|(a, b)| a == b)
                && best.is_none_or(|(_, blen)| words.len() > blen)
            {
                best = Some((*id, words.len()));
            }
        }
        if let Some((id, len)) = best {
            for w in &tokens[i..i + len] {
                if w == "is" {
                    seq.push_is();
                } else {
                    seq.push_word(vocab.try_id(w)?);
                }
            }
            current_param = Some(id);
            i += len;
            continue;
        }
        let t = &tokens[i];
        if t == "is" {
            seq.push_is();
        } else if let Ok(v) = t.parse::<f64>() {
            let omega = match current_param.take() {
                Some(id) => gaitparams::normalize_value(v, stats, id)?,
                None => {
                    if !v.is_finite() || v.abs() > NORM_RANGE {
                        return Err(NumTextError::ValueOutOfRange(v));
                    }
                    v
                }
            };
            seq.push_num(omega)?;
        } else {
            seq.push_word(vocab.try_id(t)?);
        }
        i += 1;
    }
    Ok(seq)
}

/// Render a token sequence back to text. Words are space-joined with
/// punctuation attached; numeric items print their normalized value.
pub fn detokenize(seq: &NumericTokenSequence, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for item in seq.items() {
        let s = match item {
            TokenItem::Word(id) => vocab.word_of(*id).unwrap_or("<?>").to_string(),
            TokenItem::Is => "is".to_string(),
            TokenItem::Num(v) => gaitparams::format_value(*v),
        };
        if s == "," || s == "." || s == ";" || s == ":" {
            out.push_str(&s);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&s);
        }
    }
    out
}

// ── Input embedding and F^num ────────────────────────────────────────

/// Pre-encoder input rows for a sequence, with [EOS] appended:
/// word → table row + PE; is → [IS] + PE; number → ω·[NUM] + PE.
/// `table` must be the dense embedding table (words then [EOS] row).
pub fn input_embeddings(
    seq: &NumericTokenSequence,
    basis: &NumBasis,
    table: &Tensor,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let d = basis.dim();
    let total = seq.len() + 1; // [EOS] appended
    if total > basis.max_len() {
        return Err(NumTextError::SequenceTooLong { len: total, max: basis.max_len() });
    }
    let mut data = vec![0.0; total * d];
    for (t, item) in seq.items().iter().enumerate() {
        let pe = basis.pe.row(t);
        let row = &mut data[t * d..(t + 1) * d];
        match item {
            TokenItem::Word(id) => {
                let dense = vocab
                    .dense_of_token(*id)
                    .filter(|&r| r < vocab.dense_eos())
                    .ok_or(NumTextError::BadTokenId(*id))?;
                for (o, (w, p)) in row.iter_mut().zip(table.row(dense).iter().zip(pe)) {
                    *o = w + p;
                }
            }
            TokenItem::Is => {
                for (o, (w, p)) in row.iter_mut().zip(basis.is.data().iter().zip(pe)) {
                    *o = w + p;
                }
            }
            TokenItem::Num(omega) => {
                for (o, (w, p)) in row.iter_mut().zip(basis.num.data().iter().zip(pe)) {
                    *o = omega * w + p;
                }
            }
        }
    }
    let t = seq.len();
    let pe = basis.pe.row(t);
    let eos = table.row(vocab.dense_eos());
    for (o, (w, p)) in data[t * d..(t + 1) * d].iter_mut().zip(eos.iter().zip(pe)) {
        *o = w + p;
    }
    Tensor::new(vec![total, d], data).map_err(NumTextError::Graph)
}

/// F^num: run the embedded sequence through the frozen text encoder and take
/// the final-token ([EOS]) representation.
pub fn embed_sequence(
    seq: &NumericTokenSequence,
    encoder: &FrozenTextEncoder,
    basis: &NumBasis,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let rows = input_embeddings(seq, basis, encoder.embedding_table(), vocab)?;
    let h = encoder
        .forward_rows(&rows, true)
        .map_err(|e| NumTextError::Format(format!("encoder forward: {e}")))?;
    let last = h.shape()[0] - 1;
    Ok(Tensor::vector(h.row(last).to_vec()))
}

// ── Similarity map ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum TemplateItem {
    Word(u32),
    Is,
    Slot,
}

/// A sentence template with exactly one `[value]` slot, e.g.
/// `"the walking speed is [value]"`.
#[derive(Debug, Clone)]
pub struct SlotTemplate {
    items: Vec<TemplateItem>,
}

impl SlotTemplate {
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<SlotTemplate> {
        let mut items = Vec::new();
        let mut slots = 0;
        for w in Vocabulary::split_words(text) {
            if w == "[value]" {
                items.push(TemplateItem::Slot);
                slots += 1;
            } else if w == "is" {
                items.push(TemplateItem::Is);
            } else {
                items.push(TemplateItem::Word(vocab.try_id(&w)?));
            }
        }
        if slots != 1 {
            return Err(NumTextError::BadTemplate(slots));
        }
        Ok(SlotTemplate { items })
    }

    /// Fill the slot with a normalized value.
    pub fn instantiate(&self, omega: f64) -> Result<NumericTokenSequence> {
        let mut seq = NumericTokenSequence::new();
        for item in &self.items {
            match item {
                TemplateItem::Word(id) => seq.push_word(*id),
                TemplateItem::Is => seq.push_is(),
                TemplateItem::Slot => seq.push_num(omega)?,
            }
        }
        Ok(seq)
    }
}

/// Pairwise cosine similarities of F^num over a sorted value grid.
/// Row/column i corresponds to grid[i]; the matrix is exactly symmetric.
pub fn similarity_map(
    template: &SlotTemplate,
    grid: &[f64],
    encoder: &FrozenTextEncoder,
    basis: &NumBasis,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(NumTextError::UnsortedGrid);
    }
    let embeddings: Vec<Tensor> = grid
        .par_iter()
        .map(|&v| {
            let seq = template.instantiate(v)?;
            embed_sequence(&seq, encoder, basis, vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = grid.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        // cos(x, x) = 1 by definition; computing it numerically can be
        // off by an ulp, so the diagonal is set exactly
        m[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let a = &embeddings[i];
            let b = &embeddings[j];
            let c = a.dot(b) / (a.norm() * b.norm());
            m[i * n + j] = c;
            m[j * n + i] = c;
        }
    }
    Tensor::new(vec![n, n], m).map_err(NumTextError::Graph)
}

/// Write a similarity matrix as CSV with the grid as header row/column.
pub fn write_similarity_csv(matrix: &Tensor, grid: &[f64], path: &Path) -> Result<()> {
    let n = grid.len();
    let mut out = String::new();
    out.push_str("value");
    for v in grid {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{}", grid[i]));
        for j in 0..n {
            out.push_str(&format!(",{}", matrix.data()[i * n + j]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a similarity matrix as a grayscale PNG:
/// gray(i,j) = round(255·(M[i][j]+1)/2).
pub fn write_similarity_png(matrix: &Tensor, path: &Path) -> Result<()> {
    let n = matrix.shape()[0];
    let mut img = image::GrayImage::new(n as u32, n as u32);
    for i in 0..n {
        for j in 0..n {
            let m = matrix.data()[i * n + j];
            let gray = (255.0 * (m + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([gray]));
        }
    }
    img.save(path).map_err(|e| NumTextError::Format(format!("png write failed: {e}")))?;
    Ok(())
}
