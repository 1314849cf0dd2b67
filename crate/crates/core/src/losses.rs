//! Training objectives: the focal contrastive loss, the numeric-alignment
//! cross-entropy with its projection heads, the combined objective, and the
//! ordinal cross-entropy for numeric decoder positions.
//!
//! Everything here builds graph nodes so gradients flow to whatever
//! trainable leaves produced the inputs. The ordinal weight is the one
//! deliberate exception: it is computed from the forward logits as a plain
//! number and enters the tape as a constant factor, so no gradient flows
//! through the argmax.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, Var};
use crate::numtext::{Vocabulary, D_MAX};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("bad focal config: {0}")]
    BadConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("batch is empty or lengths differ: {0}")]
    BadBatch(String),
    #[error("non-finite loss input: {0}")]
    NonFinite(f64),
    #[error("token id {0} is not a valid dense vocabulary index")]
    BadToken(usize),
    #[error("weight `{0}` missing from the parameter store")]
    MissingWeight(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, LossError>;

// ── Configs ──────────────────────────────────────────────────────────

/// Focal-contrastive hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha: 0.25, gamma: 2.0, tau: 0.01 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LossError::BadConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(LossError::BadConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(LossError::BadConfig(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Weight of the numeric-alignment term in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedLossConfig {
    pub omega: f64,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        CombinedLossConfig { omega: 0.05 }
    }
}

// ── Similarities ─────────────────────────────────────────────────────

/// Per-class cosine similarities ⟨F_i^T | F^V⟩ as one vector node.
pub fn class_similarities(g: &mut Graph, f_video: Var, f_texts: &[Var]) -> Result<Var> {
    if f_texts.is_empty() {
        return Err(LossError::BadBatch("no class features".into()));
    }
    let mut sims = Vec::with_capacity(f_texts.len());
    for &ft in f_texts {
        sims.push(g.cosine_similarity(ft, f_video)?);
    }
    Ok(g.concat_rows(&sims)?)
}

// ── Focal contrastive (Eq. 5 shape) ──────────────────────────────────

/// One sample's focal term: p = softmax(sims/τ), loss = −α(1−p_y)^γ ln p_y.
pub fn focal_term(g: &mut Graph, sims: Var, label: usize, cfg: &FocalConfig) -> Result<Var> {
    cfg.validate()?;
    let n = g.value(sims).numel();
    if label >= n {
        return Err(LossError::BadLabel { label, classes: n });
    }
    let scaled = g.scale(sims, 1.0 / cfg.tau)?;
    let p = g.softmax(scaled)?;
    let p_y = g.slice_rows(p, label, 1)?;
    let neg = g.scale(p_y, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let modulator = g.powf(one_minus, cfg.gamma)?;
    let log_p = g.log(p_y)?;
    let term = g.mul(modulator, log_p)?;
    let term = g.scale(term, -cfg.alpha)?;
    Ok(g.sum_all(term)?)
}

/// Batch-mean focal contrastive loss. `sims[b]` is the per-class similarity
/// vector of sample b; `labels[b]` its true class.
pub fn focal_contrastive(
    g: &mut Graph,
    sims: &[Var],
    labels: &[usize],
    cfg: &FocalConfig,
) -> Result<Var> {
    if sims.is_empty() || sims.len() != labels.len() {
        return Err(LossError::BadBatch(format!("{} sims vs {} labels", sims.len(), labels.len())));
    }
    let mut terms = Vec::with_capacity(sims.len());
    for (&s, &y) in sims.iter().zip(labels) {
        terms.push(focal_term(g, s, y, cfg)?);
    }
    let stacked = g.concat_rows(&terms)?;
    Ok(g.mean_all(stacked)?)
}

// ── Projection heads ─────────────────────────────────────────────────

/// Which head projects which feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Text,
    Num,
}

impl HeadKind {
    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Text => "heads/text",
            HeadKind::Num => "heads/num",
        }
    }
}

/// The two trainable projection heads mapping text features and numeric
/// embeddings into a shared space. Each is a bias-free two-layer perceptron
/// with a GELU between; outputs are unit-normalized.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub dim_in: usize,
    pub dim_out: usize,
}

impl ProjectionHeads {
    pub fn new(dim_in: usize, dim_out: usize) -> ProjectionHeads {
        ProjectionHeads { dim_in, dim_out }
    }

    /// Create "heads/text/w1|w2" and "heads/num/w1|w2" in the store.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (self.dim_in as f64).sqrt();
        for kind in [HeadKind::Text, HeadKind::Num] {
            let w1 = Tensor::randn(&[self.dim_in, self.dim_in], std, &mut rng);
            store.insert(&format!("{}/w1", kind.prefix()), w1, true)?;
            let w2 = Tensor::randn(&[self.dim_in, self.dim_out], std, &mut rng);
            store.insert(&format!("{}/w2", kind.prefix()), w2, true)?;
        }
        Ok(())
    }

    /// Project a d-vector feature node to a unit vector in the shared space.
    pub fn project_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        kind: HeadKind,
        f: Var,
    ) -> Result<Var> {
        let lookup = |name: String| -> Result<Var> {
            vars.get(&name).copied().ok_or(LossError::MissingWeight(name))
        };
        let w1 = lookup(format!("{}/w1", kind.prefix()))?;
        let w2 = lookup(format!("{}/w2", kind.prefix()))?;
        let row = g.reshape(f, &[1, self.dim_in])?;
        let h = g.matmul(row, w1)?;
        let h = g.gelu(h)?;
        let p = g.matmul(h, w2)?;
        let p = g.reshape(p, &[self.dim_out])?;
        Ok(g.l2_normalize(p)?)
    }

    /// Plain-path twin of [`ProjectionHeads::project_graph`].
    pub fn project_plain(&self, store: &ParamStore, kind: HeadKind, f: &Tensor) -> Result<Tensor> {
        let get = |name: String| -> Result<&Tensor> {
            store.get(&name).ok_or(LossError::MissingWeight(name))
        };
        let w1 = get(format!("{}/w1", kind.prefix()))?;
        let w2 = get(format!("{}/w2", kind.prefix()))?;
        // same operation order as the graph path
        let mut g = Graph::new();
        let fv = g.constant(f.clone())?;
        let w1v = g.constant(w1.clone())?;
        let w2v = g.constant(w2.clone())?;
        let row = g.reshape(fv, &[1, self.dim_in])?;
        let h = g.matmul(row, w1v)?;
        let h = g.gelu(h)?;
        let p = g.matmul(h, w2v)?;
        let p = g.reshape(p, &[self.dim_out])?;
        let out = g.l2_normalize(p)?;
        Ok(g.value(out).clone())
    }
}

// ── Numeric alignment (L_gp) ─────────────────────────────────────────

/// Cross-entropy of softmax over cos(P_i, P^num)/τ against the class label.
/// `p_texts` are the projected per-class text features, `p_num` the
/// projected numeric embedding.
pub fn numeric_alignment_loss(
    g: &mut Graph,
    p_num: Var,
    p_texts: &[Var],
    label: usize,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(LossError::BadConfig(format!("tau must be > 0, got {tau}")));
    }
    if label >= p_texts.len() {
        return Err(LossError::BadLabel { label, classes: p_texts.len() });
    }
    let sims = class_similarities(g, p_num, p_texts)?;
    let scaled = g.scale(sims, 1.0 / tau)?;
    let p = g.softmax(scaled)?;
    let p_y = g.slice_rows(p, label, 1)?;
    let log_p = g.log(p_y)?;
    let loss = g.scale(log_p, -1.0)?;
    Ok(g.sum_all(loss)?)
}

// ── Combined objective ───────────────────────────────────────────────

/// L = L_k + ω·L_gp. An unpaired batch (no L_gp) returns `l_k` itself, so
/// the combined loss is bitwise-identical to the contrastive term alone.
pub fn total_loss(
    g: &mut Graph,
    l_k: Var,
    l_gp: Option<Var>,
    cfg: &CombinedLossConfig,
) -> Result<Var> {
    match l_gp {
        None => Ok(l_k),
        Some(_) if cfg.omega == 0.0 => Ok(l_k),
        Some(gp) => {
            let scaled = g.scale(gp, cfg.omega)?;
            Ok(g.add(l_k, scaled)?)
        }
    }
}

/// Value-level combined objective for reporting.
pub fn total_loss_value(l_k: f64, l_gp: Option<f64>, cfg: &CombinedLossConfig) -> Result<f64> {
    if !l_k.is_finite() {
        return Err(LossError::NonFinite(l_k));
    }
    match l_gp {
        None => Ok(l_k),
        Some(gp) if !gp.is_finite() => Err(LossError::NonFinite(gp)),
        Some(gp) => Ok(l_k + cfg.omega * gp),
    }
}

// ── Ordinal cross-entropy (Eq. 7 shape) ──────────────────────────────

/// The detached ordinal weight |tôk − tok| / D_max, measured in the sparse
/// token-id space (words, [EOS], numeric block) that `vocab` maps dense
/// logit indices onto.
pub fn ordinal_weight(pred_dense: usize, target_dense: usize, vocab: &Vocabulary) -> Result<f64> {
    let pred = vocab.token_of_dense(pred_dense).ok_or(LossError::BadToken(pred_dense))?;
    let target = vocab.token_of_dense(target_dense).ok_or(LossError::BadToken(target_dense))?;
    let dist = (i64::from(pred) - i64::from(target)).unsigned_abs() as f64;
    Ok(dist / f64::from(D_MAX))
}

/// Plain cross-entropy −ln softmax(logits)[target] as a graph node.
pub fn ce_graph(g: &mut Graph, logits: Var, target_dense: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if target_dense >= n {
        return Err(LossError::BadToken(target_dense));
    }
    let p = g.softmax(logits)?;
    let p_y = g.slice_rows(p, target_dense, 1)?;
    let log_p = g.log(p_y)?;
    let loss = g.scale(log_p, -1.0)?;
    Ok(g.sum_all(loss)?)
}

/// Ordinal cross-entropy: (|tôk − tok|/D_max)·CE(logits, tok). The argmax
/// tôk comes from the forward logits and the weight enters as a constant,
/// so only the CE factor carries gradient. Returns exactly zero (a constant
/// node) when the argmax is correct.
pub fn ordinal_ce_graph(
    g: &mut Graph,
    logits: Var,
    target_dense: usize,
    vocab: &Vocabulary,
) -> Result<Var> {
    let values = g.value(logits);
    if target_dense >= values.numel() {
        return Err(LossError::BadToken(target_dense));
    }
    let pred_dense = values.argmax();
    let w = ordinal_weight(pred_dense, target_dense, vocab)?;
    if w == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let ce = ce_graph(g, logits, target_dense)?;
    Ok(g.scale(ce, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numtext::{EOS_ID, NUM_START};
    use rand::Rng;

    /// Unit vectors in R^4 whose cosines against e1 equal `cos`.
    fn features_with_cosines(cos: &[f64]) -> (Tensor, Vec<Tensor>) {
        let video = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        let texts = cos
            .iter()
            .map(|&c| Tensor::vector(vec![c, (1.0 - c * c).sqrt(), 0.0, 0.0]))
            .collect();
        (video, texts)
    }

    fn build_sims(g: &mut Graph, video: &Tensor, texts: &[Tensor]) -> Var {
        let fv = g.constant(video.clone()).unwrap();
        let fts: Vec<Var> = texts.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        class_similarities(g, fv, &fts).unwrap()
    }

    #[test]
    fn hand_derived_three_class_example() {
        // softmax(s/τ) = (0.2, 0.5, 0.3) when s = τ·ln p + const
        let cfg = FocalConfig::default();
        let p: [f64; 3] = [0.2, 0.5, 0.3];
        let cos: Vec<f64> = p.iter().map(|v| cfg.tau * v.ln() + 0.9).collect();
        let (video, texts) = features_with_cosines(&cos);
        let mut g = Graph::new();
        let sims = build_sims(&mut g, &video, &texts);
        let loss = focal_term(&mut g, sims, 1, &cfg).unwrap();
        let expected = -0.25 * 0.25 * 0.5f64.ln(); // 0.04332169878499658
        assert!(
            (g.value(loss).item() - expected).abs() < 1e-6,
            "got {}, want {expected}",
            g.value(loss).item()
        );
    }

    #[test]
    fn focal_reduces_to_cross_entropy_when_unfocused() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = FocalConfig { alpha: 1.0, gamma: 0.0, tau: 0.01 };
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let cos: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let label = rng.gen_range(0..n);
            let (video, texts) = features_with_cosines(&cos);
            let mut g = Graph::new();
            let sims = build_sims(&mut g, &video, &texts);
            let loss = focal_term(&mut g, sims, label, &cfg).unwrap();
            // independent cross-entropy from the raw cosines
            let scaled: Vec<f64> = cos.iter().map(|c| c / cfg.tau).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
            let ce = -((scaled[label] - max).exp() / z).ln();
            assert!((g.value(loss).item() - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let cfg = FocalConfig::default();
        // true-class cosine 1, others -1: softmax at τ=0.01 saturates
        let (video, texts) = features_with_cosines(&[1.0, -1.0, -1.0]);
        let mut g = Graph::new();
        let sims = build_sims(&mut g, &video, &texts);
        let loss = focal_term(&mut g, sims, 0, &cfg).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn batch_mean_and_label_validation() {
        let cfg = FocalConfig::default();
        let (video, texts) = features_with_cosines(&[0.3, -0.2]);
        let mut g = Graph::new();
        let s1 = build_sims(&mut g, &video, &texts);
        let s2 = build_sims(&mut g, &video, &texts);
        let l1 = focal_term(&mut g, s1, 0, &cfg).unwrap();
        let l2 = focal_term(&mut g, s2, 1, &cfg).unwrap();
        let batch = focal_contrastive(&mut g, &[s1, s2], &[0, 1], &cfg).unwrap();
        let mean = (g.value(l1).item() + g.value(l2).item()) / 2.0;
        assert!((g.value(batch).item() - mean).abs() < 1e-15);
        assert!(matches!(
            focal_term(&mut g, s1, 2, &cfg),
            Err(LossError::BadLabel { label: 2, classes: 2 })
        ));
        assert!(focal_contrastive(&mut g, &[s1], &[0, 1], &cfg).is_err());
    }

    #[test]
    fn focal_is_scale_invariant_in_the_features() {
        let cfg = FocalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let video = Tensor::randn(&[6], 1.0, &mut rng);
        let texts: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[6], 1.0, &mut rng)).collect();
        let eval = |scale: f64| {
            let mut g = Graph::new();
            let fv = g
                .constant(Tensor::vector(video.data().iter().map(|x| x * scale).collect()))
                .unwrap();
            let fts: Vec<Var> = texts
                .iter()
                .map(|t| {
                    g.constant(Tensor::vector(t.data().iter().map(|x| x * scale).collect()))
                        .unwrap()
                })
                .collect();
            let sims = class_similarities(&mut g, fv, &fts).unwrap();
            let loss = focal_term(&mut g, sims, 1, &cfg).unwrap();
            g.value(loss).item()
        };
        assert!((eval(1.0) - eval(37.5)).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_passes_finite_difference_check() {
        use crate::gradcheck::{grad_check, GradCheckConfig};
        let cfg = FocalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let fv = g.param("video", Tensor::randn(&[5], 1.0, &mut rng)).unwrap();
        let fts: Vec<Var> = (0..3)
            .map(|i| g.param(&format!("text{i}"), Tensor::randn(&[5], 1.0, &mut rng)).unwrap())
            .collect();
        let sims = class_similarities(&mut g, fv, &fts).unwrap();
        let loss = focal_term(&mut g, sims, 2, &cfg).unwrap();
        let report = grad_check(&g, loss, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    fn head_setup() -> (ProjectionHeads, ParamStore) {
        let heads = ProjectionHeads::new(8, 6);
        let mut store = ParamStore::default();
        heads.init_params(&mut store, 17).unwrap();
        (heads, store)
    }

    #[test]
    fn projection_heads_unit_norm_and_paths_agree() {
        let (heads, store) = head_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[8], 1.0, &mut rng);
        let plain = heads.project_plain(&store, HeadKind::Text, &f).unwrap();
        assert!((plain.norm() - 1.0).abs() < 1e-12);
        let mut g = Graph::new();
        let vars = store.bind_all(&mut g).unwrap();
        let fv = g.constant(f.clone()).unwrap();
        let pv = heads.project_graph(&mut g, &vars, HeadKind::Text, fv).unwrap();
        assert_eq!(g.value(pv).data(), plain.data());
        // the two heads are distinct parameterizations
        let num = heads.project_plain(&store, HeadKind::Num, &f).unwrap();
        assert!(plain.max_abs_diff(&num) > 1e-6);
    }

    #[test]
    fn alignment_loss_matches_softmax_ce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = 3 + (trial % 3);
            let p_num = Tensor::randn(&[6], 1.0, &mut rng);
            let p_texts: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[6], 1.0, &mut rng)).collect();
            let label = trial % n;
            let tau = 0.01;
            let mut g = Graph::new();
            let pn = g.constant(p_num.clone()).unwrap();
            let pts: Vec<Var> = p_texts.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
            let loss = numeric_alignment_loss(&mut g, pn, &pts, label, tau).unwrap();
            // independent oracle straight from the definition
            let sims: Vec<f64> = p_texts
                .iter()
                .map(|t| p_num.dot(t) / (p_num.norm() * t.norm()) / tau)
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
            let want = -((sims[label] - max).exp() / z).ln();
            assert!((g.value(loss).item() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn alignment_loss_saturates_and_hits_uniform_bound() {
        // P^num equals the true class projection, orthogonal to the rest
        let mut g = Graph::new();
        let pn = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        let pts = [
            g.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap(),
            g.constant(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap(),
            g.constant(Tensor::vector(vec![0.0, 0.0, 1.0])).unwrap(),
        ];
        let loss = numeric_alignment_loss(&mut g, pn, &pts, 0, 0.01).unwrap();
        assert!(g.value(loss).item() < 1e-10);
        // identical projections ⇒ uniform softmax ⇒ ln N
        let same = [pts[0], pts[0], pts[0], pts[0]];
        let loss = numeric_alignment_loss(&mut g, pn, &same, 2, 0.01).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_arithmetic_and_unpaired_bitwise() {
        let cfg = CombinedLossConfig::default();
        assert_eq!(total_loss_value(1.0, Some(2.0), &cfg).unwrap(), 1.1);
        assert_eq!(total_loss_value(1.0, None, &cfg).unwrap(), 1.0);
        assert_eq!(
            total_loss_value(0.7, Some(5.0), &CombinedLossConfig { omega: 0.0 }).unwrap(),
            0.7
        );
        assert!(total_loss_value(f64::NAN, None, &cfg).is_err());
        assert!(total_loss_value(1.0, Some(f64::INFINITY), &cfg).is_err());
        // unpaired graph batch: the combined loss IS the contrastive node
        let mut g = Graph::new();
        let lk = g.constant(Tensor::scalar(0.375)).unwrap();
        let combined = total_loss(&mut g, lk, None, &cfg).unwrap();
        assert_eq!(combined.index(), lk.index());
    }

    #[test]
    fn ordinal_weight_uses_sparse_token_distance() {
        let vocab = Vocabulary::standard();
        let n = vocab.n_words();
        // two adjacent numeric buckets: distance 1
        let w = ordinal_weight(n + 1, n + 2, &vocab).unwrap();
        assert_eq!(w, 1.0 / f64::from(D_MAX));
        // word 0 vs last numeric bucket: the full sparse distance
        let w = ordinal_weight(0, vocab.dense_size() - 1, &vocab).unwrap();
        assert_eq!(w, f64::from(NUM_START + 200) / f64::from(D_MAX));
        // [EOS] sits at its sparse id, far from the contiguous words
        let w = ordinal_weight(n, 0, &vocab).unwrap();
        assert_eq!(w, f64::from(EOS_ID) / f64::from(D_MAX));
        assert!(ordinal_weight(vocab.dense_size(), 0, &vocab).is_err());
    }

    #[test]
    fn ordinal_ce_zero_on_correct_argmax_and_weighted_otherwise() {
        let vocab = Vocabulary::standard();
        let v = vocab.dense_size();
        let mut logits = vec![0.0; v];
        logits[7] = 3.0;
        let mut g = Graph::new();
        let lv = g.constant(Tensor::vector(logits.clone())).unwrap();
        // argmax == target ⇒ exactly zero
        let loss = ordinal_ce_graph(&mut g, lv, 7, &vocab).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        // argmax != target ⇒ weight × CE, matching a hand evaluation
        let target = 12;
        let loss = ordinal_ce_graph(&mut g, lv, target, &vocab).unwrap();
        let ce = ce_graph(&mut g, lv, target).unwrap();
        let w = ordinal_weight(7, target, &vocab).unwrap();
        let want = w * g.value(ce).item();
        assert!((g.value(loss).item() - want).abs() < 1e-15);
        assert!(ordinal_ce_graph(&mut g, lv, v, &vocab).is_err());
    }

    #[test]
    fn ordinal_ce_matches_hand_formula_on_seeded_logits() {
        let vocab = Vocabulary::standard();
        let v = vocab.dense_size();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..10 {
            let logits = Tensor::randn(&[v], 1.0, &mut rng);
            let target = (trial * 37) % v;
            let mut g = Graph::new();
            let lv = g.constant(logits.clone()).unwrap();
            let loss = ordinal_ce_graph(&mut g, lv, target, &vocab).unwrap();
            // independent evaluation of the weighted-CE formula
            let pred = logits.argmax();
            let p_sparse = vocab.token_of_dense(pred).unwrap();
            let t_sparse = vocab.token_of_dense(target).unwrap();
            let w = (f64::from(p_sparse) - f64::from(t_sparse)).abs() / f64::from(D_MAX);
            let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.data().iter().map(|s| (s - max).exp()).sum();
            let ce = -((logits.data()[target] - max).exp() / z).ln();
            assert!((g.value(loss).item() - w * ce).abs() < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn ordinal_weight_monotone_in_distance() {
        let vocab = Vocabulary::standard();
        let n = vocab.n_words();
        let mut last = -1.0;
        for k in 0..=200 {
            let w = ordinal_weight(n + 1, n + 1 + k, &vocab).unwrap();
            assert!(w > last || (k == 0 && w == 0.0));
            last = w;
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(FocalConfig { alpha: 0.25, gamma: 2.0, tau: 0.0 }.validate().is_err());
        assert!(FocalConfig { alpha: 0.0, gamma: 2.0, tau: 0.01 }.validate().is_err());
        assert!(FocalConfig { alpha: 1.5, gamma: 2.0, tau: 0.01 }.validate().is_err());
        assert!(FocalConfig { alpha: 0.25, gamma: -1.0, tau: 0.01 }.validate().is_err());
        assert!(FocalConfig::default().validate().is_ok());
    }
}
