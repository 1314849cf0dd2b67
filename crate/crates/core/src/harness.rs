//! Experiment harness: configuration, the end-to-end training loop,
//! evaluation metrics, cross-validation, ablations, and plot emission.
//!
//! A run is fully described by one flat [`ExperimentConfig`]; everything
//! downstream (dataset, fold plan, weights, shuffling) derives
//! deterministically from its seed, so a rerun with the same config file
//! produces byte-identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::datasim::{
    generate_dataset, make_folds, make_video_folds, window_clips, DatasetConfig, DatasimError,
    Fold, FoldPlan, SyntheticSubject,
};
use crate::decoder::DecoderError;
use crate::encoders::{
    dementia_class_knowledge, gait_class_knowledge, EncoderConfig, EncoderError,
    FrozenTextEncoder, FrozenVisionEncoder, KaptConfig, PromptBundle, VideoConfig,
    VideoPromptModel,
};
use crate::gaitparams::{
    render_sentence, select_combinations, GaitParamError, GaitParameterSet,
    NormalizationStats, ParameterCombination,
};
use crate::graph::{Graph, GraphError, Var};
use crate::losses::{
    class_similarities, focal_contrastive, numeric_alignment_loss, total_loss, CombinedLossConfig,
    FocalConfig, HeadKind, LossError, ProjectionHeads,
};
use crate::numtext::{
    build_num_basis, embed_sequence, similarity_map, tokenize, write_similarity_csv,
    write_similarity_png, NumBasis, NumTextError, SlotTemplate, Vocabulary,
};
use crate::optim::{Adam, ParamStore};
use crate::tensor::Tensor;

/// Report file format version.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Environment variable naming the default run-directory root.
pub const RUN_ROOT_ENV: &str = "GAITVLM_RUN_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("evaluation input: {0}")]
    BadEval(String),
    #[error("fold {fold} failed: {source}")]
    FoldFailed { fold: usize, source: Box<HarnessError> },
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("report: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    NumText(#[from] NumTextError),
    #[error(transparent)]
    Gait(#[from] GaitParamError),
    #[error(transparent)]
    Datasim(#[from] DatasimError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ── Tasks ────────────────────────────────────────────────────────────

/// The two classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// 4-class gait scoring: normal (0), slight (1), mild (2), moderate (3).
    GaitScoring,
    /// 3-class dementia grouping: normal, Lewy body, Alzheimer.
    DementiaGroup,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::GaitScoring => 4,
            Task::DementiaGroup => 3,
        }
    }

    pub fn knowledge(self) -> Vec<crate::encoders::ClassKnowledge> {
        match self {
            Task::GaitScoring => gait_class_knowledge(),
            Task::DementiaGroup => dementia_class_knowledge(),
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "gait" | "gait-scoring" => Ok(Task::GaitScoring),
            "dementia" | "dementia-group" => Ok(Task::DementiaGroup),
            other => Err(HarnessError::BadConfig(format!(
                "unknown task {other:?} (expected gait or dementia)"
            ))),
        }
    }
}

// ── Configuration ────────────────────────────────────────────────────

/// One flat, fully serializable experiment description. Keys marked
/// "repo default" have no counterpart in the source method and were
/// chosen for desk-scale runs; the rest carry the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,

    // dataset (repo defaults; the cohort is synthetic)
    pub subjects_per_class: usize,
    pub videos_per_subject: usize,
    pub frames_per_video: usize,
    pub f_in: usize,
    pub separability: f64,
    pub pairing_rate: f64,
    pub noise_std: f64,

    // windowing
    pub window: usize,
    pub train_stride: usize,

    // cross-validation
    pub folds: usize,
    /// Split at the video level instead of grouping by subject.
    pub clip_level_folds: bool,

    // encoder backbone (repo defaults; stands in for the pretrained model)
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_global: usize,

    // knowledge prompts
    pub n_ctx: usize,
    pub n_keywords: usize,
    pub per_class_proj: bool,

    // losses
    pub alpha_focal: f64,
    pub gamma_focal: f64,
    pub tau: f64,
    pub omega: f64,
    pub proj_dim: usize,

    // optimization (repo defaults)
    pub epochs: usize,
    pub lr: f64,

    // sentence generation
    pub corr_threshold: f64,

    // decoder
    pub decoder_layers: usize,
    pub decoder_epochs: usize,
    pub decoder_lr: f64,
    pub tau_interp: f64,

    // ablations
    pub use_kapt: bool,
    pub use_nte: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::GaitScoring,
            seed: 0,
            subjects_per_class: 20,
            videos_per_subject: 1,
            frames_per_video: 70,
            f_in: 12,
            separability: 1.0,
            pairing_rate: 1.0,
            noise_std: 0.05,
            window: 70,
            train_stride: 25,
            folds: 10,
            clip_level_folds: false,
            dim: 64,
            layers: 4,
            heads: 4,
            d_ff: 128,
            max_len: 96,
            n_global: 2,
            n_ctx: 8,
            n_keywords: 5,
            per_class_proj: false,
            alpha_focal: 0.25,
            gamma_focal: 2.0,
            tau: 0.01,
            omega: 0.05,
            proj_dim: 32,
            epochs: 3,
            lr: 0.01,
            corr_threshold: 0.8,
            decoder_layers: 4,
            decoder_epochs: 4,
            decoder_lr: 0.002,
            tau_interp: 0.1,
            use_kapt: true,
            use_nte: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::BadConfig(msg));
        if self.dim == 0 || self.dim % 2 != 0 {
            return bad(format!("dim must be even and positive, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers and d_ff must be positive".into());
        }
        if self.window == 0 || self.frames_per_video < self.window {
            return bad(format!(
                "videos of {} frames cannot fill a {}-frame window",
                self.frames_per_video, self.window
            ));
        }
        if self.train_stride == 0 {
            return bad("train_stride must be positive".into());
        }
        if self.window + 1 > self.max_len {
            return bad(format!("max_len {} too small for window {}", self.max_len, self.window));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.subjects_per_class == 0 || self.videos_per_subject == 0 {
            return bad("empty dataset".into());
        }
        if self.proj_dim == 0 {
            return bad("proj_dim must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.decoder_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.tau_interp > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.corr_threshold) {
            return bad(format!("corr_threshold {} outside [0, 1]", self.corr_threshold));
        }
        FocalConfig {
            alpha: self.alpha_focal,
            gamma: self.gamma_focal,
            tau: self.tau,
        }
        .validate()?;
        self.dataset_config().validate()?;
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            subjects_per_class: vec![self.subjects_per_class; self.task.n_classes()],
            videos_per_subject: self.videos_per_subject,
            frames_per_video: self.frames_per_video,
            f_in: self.f_in,
            separability: self.separability,
            pairing_rate: self.pairing_rate,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Deterministic sub-seeds so each component draws from its own stream.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

const TAG_TEXT_ENC: u64 = 1;
const TAG_VISION_ENC: u64 = 2;
const TAG_PROMPTS: u64 = 3;
const TAG_HEADS: u64 = 4;
const TAG_BASIS: u64 = 5;
const TAG_SHUFFLE: u64 = 6;
const TAG_FOLDS: u64 = 7;

// ── Pipeline assembly ────────────────────────────────────────────────

/// The frozen backbone plus model shapes for one config; trainable
/// parameters live in a separate [`ParamStore`] so freezing is auditable.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub text_enc: FrozenTextEncoder,
    pub vision_enc: FrozenVisionEncoder,
    pub bundle: PromptBundle,
    pub video_model: VideoPromptModel,
    pub heads: ProjectionHeads,
    pub basis: NumBasis,
}

impl Pipeline {
    pub fn new(cfg: &ExperimentConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let vocab = Vocabulary::standard();
        let enc_cfg = cfg.encoder_config();
        let text_enc =
            FrozenTextEncoder::new(enc_cfg.clone(), vocab.n_words() + 1, sub_seed(cfg.seed, TAG_TEXT_ENC))?;
        let vision_enc = FrozenVisionEncoder::new(enc_cfg, sub_seed(cfg.seed, TAG_VISION_ENC))?;
        let bundle = PromptBundle::build(
            &cfg.task.knowledge(),
            &text_enc,
            &vocab,
            KaptConfig {
                n_ctx: cfg.n_ctx,
                n_keywords: cfg.n_keywords,
                per_class_proj: cfg.per_class_proj,
            },
        )?;
        let video_model = VideoPromptModel::new(
            VideoConfig { f_in: cfg.f_in, n_global: cfg.n_global, window: cfg.window },
            &vision_enc,
        );
        let heads = ProjectionHeads::new(cfg.dim, cfg.proj_dim);
        let basis = build_num_basis(cfg.dim, cfg.max_len, sub_seed(cfg.seed, TAG_BASIS))?;
        Ok(Pipeline { cfg: cfg.clone(), vocab, text_enc, vision_enc, bundle, video_model, heads, basis })
    }

    /// Fresh trainable parameters: knowledge prompts (when enabled), video
    /// prompts + tokenizer, and both projection heads.
    pub fn init_trainable(&self) -> Result<ParamStore> {
        let mut store = ParamStore::default();
        let seed = sub_seed(self.cfg.seed, TAG_PROMPTS);
        if self.cfg.use_kapt {
            self.bundle.init_params(&mut store, seed)?;
        }
        self.video_model.init_params(&mut store, sub_seed(seed, 1))?;
        self.heads.init_params(&mut store, sub_seed(self.cfg.seed, TAG_HEADS))?;
        Ok(store)
    }

    /// Class text features on the inference path: the tuned prompts when
    /// KAPT is on, the frozen class-name encoding otherwise.
    pub fn class_text_features(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let knowledge = self.cfg.task.knowledge();
        let mut feats = Vec::with_capacity(knowledge.len());
        for (i, k) in knowledge.iter().enumerate() {
            let f = if self.cfg.use_kapt {
                self.bundle.encode_text_plain(store, &self.text_enc, i)?
            } else {
                self.text_enc.encode_class_name(&k.name, &self.vocab)?
            };
            feats.push(f);
        }
        Ok(feats)
    }

    /// Video feature for one clip on the inference path.
    pub fn encode_clip(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        Ok(self.video_model.encode_video_plain(store, &self.vision_enc, frames)?)
    }

    /// Frozen numeric sentence embedding F^num.
    pub fn sentence_embedding(&self, text: &str, stats: &NormalizationStats) -> Result<Tensor> {
        let seq = tokenize(text, &self.vocab, stats)?;
        Ok(embed_sequence(&seq, &self.text_enc, &self.basis, &self.vocab)?)
    }

    /// Snapshot of every frozen weight, for freeze auditing.
    pub fn frozen_fingerprint(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, value, _) in self.text_enc.weights().iter() {
            out.push((name.to_string(), value.clone()));
        }
        for (name, value, _) in self.vision_enc.weights().iter() {
            out.push((name.to_string(), value.clone()));
        }
        out
    }
}

/// Pick the sentence combination for a training split: the first (id-
/// lexicographic) 4-subset passing the correlation filter, relaxing the
/// threshold in 0.05 steps when the filter rejects everything (synthetic
/// class structure can correlate every pair strongly).
pub fn pick_combination(
    rows: &[GaitParameterSet],
    threshold: f64,
) -> Result<ParameterCombination> {
    let mut t = threshold;
    loop {
        let combos = select_combinations(rows, 4, t)?;
        if let Some(first) = combos.into_iter().next() {
            return Ok(first);
        }
        if t >= 1.0 {
            return Err(HarnessError::BadConfig(
                "no usable 4-parameter combination even at threshold 1.0".into(),
            ));
        }
        t = (t + 0.05).min(1.0);
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

/// Validation metrics for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[t][p]` counts videos of true class `t` predicted `p`.
    pub confusion: Vec<Vec<usize>>,
    pub n_videos: usize,
}

/// Top-1 accuracy, macro-averaged F1 (absent classes contribute 0), and
/// the confusion matrix.
pub fn evaluate(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<FoldMetrics> {
    if predictions.len() != labels.len() {
        return Err(HarnessError::BadEval(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(HarnessError::BadEval("empty prediction set".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(HarnessError::BadEval(format!(
                "class {} outside 0..{n_classes}",
                p.max(y)
            )));
        }
        confusion[y][p] += 1;
    }
    let total = predictions.len();
    let trace: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let row: usize = confusion[c].iter().sum();
        let col: usize = (0..n_classes).map(|t| confusion[t][c]).sum();
        let precision = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
        let recall = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(FoldMetrics {
        accuracy,
        macro_f1: f1_sum / n_classes as f64,
        confusion,
        n_videos: total,
    })
}

/// Majority vote over clip predictions; ties go to the lower class id.
pub fn majority_vote(clip_predictions: &[usize], n_classes: usize) -> Result<usize> {
    if clip_predictions.is_empty() {
        return Err(HarnessError::BadEval("no clip predictions to vote over".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &p in clip_predictions {
        if p >= n_classes {
            return Err(HarnessError::BadEval(format!("class {p} outside 0..{n_classes}")));
        }
        counts[p] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

// ── Fold training ────────────────────────────────────────────────────

/// Everything a trained fold leaves behind.
#[derive(Debug)]
pub struct FoldOutcome {
    pub params: ParamStore,
    pub metrics: FoldMetrics,
    /// Mean combined loss per epoch.
    pub loss_curve: Vec<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

struct TrainClip {
    frames: Tensor,
    label: usize,
    /// Frozen F^num of the owning subject's sentence, for paired videos
    /// when the numeric alignment term is on.
    f_num: Option<Tensor>,
}

/// Build the full single-clip training graph: frozen encoder weights and
/// trainable prompts/heads bound as leaves, the video tower, one text tower
/// per class (or frozen features, when given), the focal contrastive term,
/// and — when `f_num` is present — the numeric alignment term.
///
/// Returns the graph together with the combined-loss output node, ready for
/// `backward` or a gradient check.
pub fn clip_loss_graph(
    pipe: &Pipeline,
    store: &ParamStore,
    frames: &Tensor,
    label: usize,
    f_num: Option<&Tensor>,
    frozen_class_feats: Option<&[Tensor]>,
) -> Result<(Graph, Var)> {
    let cfg = &pipe.cfg;
    let n_classes = cfg.task.n_classes();
    let focal = FocalConfig { alpha: cfg.alpha_focal, gamma: cfg.gamma_focal, tau: cfg.tau };
    let combined = CombinedLossConfig { omega: cfg.omega };

    let mut g = Graph::new();
    let mut vars = pipe.text_enc.weights().bind_all(&mut g)?;
    vars.extend(pipe.vision_enc.weights().bind_all(&mut g)?);
    vars.extend(store.bind_all(&mut g)?);

    let f_v = pipe.video_model.encode_video_graph(&mut g, &vars, &pipe.vision_enc, frames)?;
    let mut f_texts: Vec<Var> = Vec::with_capacity(n_classes);
    for i in 0..n_classes {
        let ft = match frozen_class_feats {
            Some(feats) => g.constant(feats[i].clone())?,
            None => pipe.bundle.encode_text_graph(&mut g, &vars, &pipe.text_enc, i)?,
        };
        f_texts.push(ft);
    }
    let sims = class_similarities(&mut g, f_v, &f_texts)?;
    let l_k = focal_contrastive(&mut g, &[sims], &[label], &focal)?;

    let l_gp = match f_num {
        Some(f_num) => {
            let f_num_v = g.constant(f_num.clone())?;
            let p_num = pipe.heads.project_graph(&mut g, &vars, HeadKind::Num, f_num_v)?;
            let mut p_texts = Vec::with_capacity(n_classes);
            for &ft in &f_texts {
                p_texts.push(pipe.heads.project_graph(&mut g, &vars, HeadKind::Text, ft)?);
            }
            Some(numeric_alignment_loss(&mut g, p_num, &p_texts, label, cfg.tau)?)
        }
        None => None,
    };
    let loss = total_loss(&mut g, l_k, l_gp, &combined)?;
    Ok((g, loss))
}

/// Train the prompt/head parameters on one fold and evaluate on its
/// validation videos (clip argmax-cosine, then per-video majority vote).
pub fn train_fold(
    pipe: &Pipeline,
    subjects: &[SyntheticSubject],
    fold: &Fold,
    fold_index: usize,
) -> Result<FoldOutcome> {
    let cfg = &pipe.cfg;
    let n_classes = cfg.task.n_classes();
    if fold.train.is_empty() || fold.validation.is_empty() {
        return Err(HarnessError::BadEval("fold has an empty train or validation side".into()));
    }

    // normalization + sentence construction from the training split only
    let train_subject_ids: Vec<usize> = {
        let mut ids: Vec<usize> = fold.train.iter().map(|v| v.subject).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let train_rows: Vec<GaitParameterSet> =
        train_subject_ids.iter().map(|&i| subjects[i].params.clone()).collect();
    let stats = NormalizationStats::fit(&train_rows, 0)?;
    let (combo, f_nums) = if cfg.use_nte {
        let combo = pick_combination(&train_rows, cfg.corr_threshold)?;
        let mut f_nums: BTreeMap<usize, Tensor> = BTreeMap::new();
        for &si in &train_subject_ids {
            let s = &subjects[si];
            if s.videos.iter().any(|v| v.paired) {
                let sentence = render_sentence(&combo, &s.params)?;
                f_nums.insert(si, pipe.sentence_embedding(&sentence, &stats)?);
            }
        }
        (Some(combo), f_nums)
    } else {
        (None, BTreeMap::new())
    };
    let _ = combo;

    // training clips
    let mut clips = Vec::new();
    for vr in &fold.train {
        let s = &subjects[vr.subject];
        let video = &s.videos[vr.video];
        for clip in window_clips(video, cfg.window, cfg.train_stride, false)? {
            let f_num = if video.paired { f_nums.get(&vr.subject).cloned() } else { None };
            clips.push(TrainClip { frames: clip.frames, label: s.class, f_num });
        }
    }
    if clips.is_empty() {
        return Err(HarnessError::BadEval("fold has no training clips".into()));
    }

    // frozen class-name features for the no-KAPT path
    let frozen_class_feats: Option<Vec<Tensor>> = if cfg.use_kapt {
        None
    } else {
        Some(pipe.class_text_features(&ParamStore::default())?)
    };

    let mut store = pipe.init_trainable()?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_SHUFFLE).wrapping_add(fold_index as u64));
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for &ci in &order {
            let clip = &clips[ci];
            let f_num = if cfg.use_nte { clip.f_num.as_ref() } else { None };
            let (g, loss) = clip_loss_graph(
                pipe,
                &store,
                &clip.frames,
                clip.label,
                f_num,
                frozen_class_feats.as_deref(),
            )?;
            epoch_total += g.value(loss).item();
            let grads = g.backward(loss)?;
            adam.step(&mut store, &grads)?;
        }
        loss_curve.push(epoch_total / clips.len() as f64);
    }

    let (predictions, labels) = classify_fold(pipe, subjects, fold, &store)?;
    let metrics = evaluate(&predictions, &labels, n_classes)?;
    Ok(FoldOutcome { params: store, metrics, loss_curve, predictions, labels })
}

/// Classify every validation video of a fold with the given parameters.
pub fn classify_fold(
    pipe: &Pipeline,
    subjects: &[SyntheticSubject],
    fold: &Fold,
    store: &ParamStore,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let cfg = &pipe.cfg;
    let n_classes = cfg.task.n_classes();
    let class_feats = pipe.class_text_features(store)?;
    let mut predictions = Vec::with_capacity(fold.validation.len());
    let mut labels = Vec::with_capacity(fold.validation.len());
    for vr in &fold.validation {
        let s = &subjects[vr.subject];
        let video = &s.videos[vr.video];
        let clips = window_clips(video, cfg.window, cfg.train_stride, true)?;
        let mut clip_preds = Vec::with_capacity(clips.len());
        for clip in &clips {
            let f_v = pipe.encode_clip(store, &clip.frames)?;
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, ft) in class_feats.iter().enumerate() {
                let sim = ft.dot(&f_v) / (ft.norm() * f_v.norm());
                if sim > best_sim {
                    best_sim = sim;
                    best = i;
                }
            }
            clip_preds.push(best);
        }
        predictions.push(majority_vote(&clip_preds, n_classes)?);
        labels.push(s.class);
    }
    Ok((predictions, labels))
}

// ── Cross-validation driver ──────────────────────────────────────────

/// Machine-readable cross-validation report; everything needed to audit
/// or reproduce a run, including the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub fold_metrics: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    /// Element-wise sum of the per-fold confusion matrices.
    pub total_confusion: Vec<Vec<usize>>,
    /// Per-fold mean loss per epoch.
    pub loss_curves: Vec<Vec<f64>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Build the fold plan for a config and dataset.
pub fn plan_folds(cfg: &ExperimentConfig, subjects: &[SyntheticSubject]) -> Result<FoldPlan> {
    let seed = sub_seed(cfg.seed, TAG_FOLDS);
    let plan = if cfg.clip_level_folds {
        make_video_folds(subjects, cfg.folds, seed)?
    } else {
        make_folds(subjects, cfg.folds, seed)?
    };
    Ok(plan)
}

/// Run every fold, aggregate, and (when `run_dir` is given) persist the
/// report, loss curves, and per-fold checkpoints.
pub fn run_cv(cfg: &ExperimentConfig, run_dir: Option<&Path>) -> Result<CvReport> {
    cfg.validate()?;
    let pipe = Pipeline::new(cfg)?;
    let subjects = generate_dataset(&cfg.dataset_config())?;
    let plan = plan_folds(cfg, &subjects)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }
    let mut fold_metrics = Vec::with_capacity(plan.folds.len());
    let mut loss_curves = Vec::with_capacity(plan.folds.len());
    let n_classes = cfg.task.n_classes();
    let mut total_confusion = vec![vec![0usize; n_classes]; n_classes];
    for (i, fold) in plan.folds.iter().enumerate() {
        let outcome = train_fold(&pipe, &subjects, fold, i)
            .map_err(|e| HarnessError::FoldFailed { fold: i, source: Box::new(e) })?;
        if let Some(dir) = run_dir {
            checkpoint::save(&outcome.params, &dir.join(format!("fold{i:02}.ckpt")))?;
        }
        for (t, row) in outcome.metrics.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                total_confusion[t][p] += count;
            }
        }
        fold_metrics.push(outcome.metrics);
        loss_curves.push(outcome.loss_curve);
    }
    let accs: Vec<f64> = fold_metrics.iter().map(|m| m.accuracy).collect();
    let f1s: Vec<f64> = fold_metrics.iter().map(|m| m.macro_f1).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_macro_f1, std_macro_f1) = mean_std(&f1s);
    let report = CvReport {
        format: "gaitvlm-report".to_string(),
        version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        fold_metrics,
        mean_accuracy,
        std_accuracy,
        mean_macro_f1,
        std_macro_f1,
        total_confusion,
        loss_curves,
    };
    if let Some(dir) = run_dir {
        write_report(&report, &dir.join("report.json"))?;
        write_loss_curves_csv(&report.loss_curves, &dir.join("loss_curves.csv"))?;
        cfg.save(&dir.join("config.toml"))?;
    }
    Ok(report)
}

pub fn write_report(report: &CvReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| HarnessError::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<CvReport> {
    let json = fs::read_to_string(path)?;
    let report: CvReport =
        serde_json::from_str(&json).map_err(|e| HarnessError::Format(e.to_string()))?;
    if report.format != "gaitvlm-report" || report.version != REPORT_FORMAT_VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported report {}/{}",
            report.format, report.version
        )));
    }
    Ok(report)
}

fn write_loss_curves_csv(curves: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut out = String::from("fold,epoch,loss\n");
    for (fold, curve) in curves.iter().enumerate() {
        for (epoch, loss) in curve.iter().enumerate() {
            out.push_str(&format!("{fold},{epoch},{loss}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Ablations ────────────────────────────────────────────────────────

/// The four model configurations: frozen baseline, knowledge prompts
/// only, numeric alignment only, and the full model.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let mut baseline = cfg.clone();
    baseline.use_kapt = false;
    baseline.use_nte = false;
    let mut kapt = cfg.clone();
    kapt.use_kapt = true;
    kapt.use_nte = false;
    let mut nte = cfg.clone();
    nte.use_kapt = false;
    nte.use_nte = true;
    let mut ours = cfg.clone();
    ours.use_kapt = true;
    ours.use_nte = true;
    vec![("baseline", baseline), ("kapt", kapt), ("nte", nte), ("ours", ours)]
}

/// Run all four ablation variants under `run_dir/<variant>/` and write a
/// combined summary.
pub fn run_ablations(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Vec<(String, CvReport)>> {
    fs::create_dir_all(run_dir)?;
    let mut results = Vec::with_capacity(4);
    for (name, variant) in ablation_variants(cfg) {
        let report = run_cv(&variant, Some(&run_dir.join(name)))?;
        results.push((name.to_string(), report));
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        variant: &'a str,
        use_kapt: bool,
        use_nte: bool,
        mean_accuracy: f64,
        mean_macro_f1: f64,
    }
    let summary: Vec<Summary> = results
        .iter()
        .map(|(name, r)| Summary {
            variant: name,
            use_kapt: r.config.use_kapt,
            use_nte: r.config.use_nte,
            mean_accuracy: r.mean_accuracy,
            mean_macro_f1: r.mean_macro_f1,
        })
        .collect();
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| HarnessError::Format(e.to_string()))?;
    fs::write(run_dir.join("ablations.json"), json)?;
    Ok(results)
}

// ── Plots ────────────────────────────────────────────────────────────

/// Project rows onto their top two principal components (power iteration
/// on the covariance; deterministic).
pub fn pca_two_components(rows: &[Tensor]) -> Result<Vec<(f64, f64)>> {
    if rows.is_empty() {
        return Err(HarnessError::BadEval("no rows to project".into()));
    }
    let d = rows[0].numel();
    if d < 2 {
        return Err(HarnessError::BadEval("need at least 2 dimensions".into()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        if r.numel() != d {
            return Err(HarnessError::BadEval("ragged embedding rows".into()));
        }
        for (m, &v) in mean.iter_mut().zip(r.data()) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // covariance-vector product without materializing the d×d matrix
    let cov_mul = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centered {
            let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, &r) in out.iter_mut().zip(row) {
                *o += dot * r / n as f64;
            }
        }
        out
    };
    let normalize = |v: &mut Vec<f64>| -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        norm
    };
    let orthogonalize = |v: &mut Vec<f64>, against: &[Vec<f64>]| {
        for prev in against {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, &p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
    };
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for c in 0..2 {
        // start orthogonal to the components already found, so a
        // degenerate (rank-deficient) covariance still yields an
        // orthogonal direction
        let mut v = vec![0.0; d];
        v[c] = 1.0;
        orthogonalize(&mut v, &components);
        if normalize(&mut v) <= 1e-12 {
            v = vec![0.0; d];
            v[(c + 1) % d] = 1.0;
            orthogonalize(&mut v, &components);
            normalize(&mut v);
        }
        for _ in 0..300 {
            let mut w = cov_mul(&v);
            orthogonalize(&mut w, &components);
            if normalize(&mut w) <= 1e-12 {
                break; // no variance left along this direction
            }
            v = w;
        }
        components.push(v);
    }
    Ok(centered
        .iter()
        .map(|row| {
            let p1: f64 = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let p2: f64 = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            (p1, p2)
        })
        .collect())
}

/// Default sentence template for similarity maps.
pub const SIMILARITY_TEMPLATE: &str = "walking speed is [value] leg/sec.";

/// The 201-point normalized-value grid used for similarity maps.
pub fn value_grid() -> Vec<f64> {
    (0..=200).map(|i| -2.5 + 0.025 * i as f64).collect()
}

/// Write the numeric similarity map (CSV + grayscale PNG) for a config.
pub fn emit_similarity_map(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let pipe = Pipeline::new(cfg)?;
    let template = SlotTemplate::parse(SIMILARITY_TEMPLATE, &pipe.vocab)?;
    let grid = value_grid();
    let map = similarity_map(&template, &grid, &pipe.text_enc, &pipe.basis, &pipe.vocab)?;
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("similarity_map.csv");
    let png_path = dir.join("similarity_map.png");
    write_similarity_csv(&map, &grid, &csv_path)?;
    write_similarity_png(&map, &png_path)?;
    Ok(vec![csv_path, png_path])
}

/// Write the 2-component PCA of every subject's sentence embedding.
pub fn emit_pca(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let pipe = Pipeline::new(cfg)?;
    let subjects = generate_dataset(&cfg.dataset_config())?;
    let rows: Vec<GaitParameterSet> = subjects.iter().map(|s| s.params.clone()).collect();
    let stats = NormalizationStats::fit(&rows, 0)?;
    let combo = pick_combination(&rows, cfg.corr_threshold)?;
    let mut embeds = Vec::with_capacity(subjects.len());
    let mut classes = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let sentence = render_sentence(&combo, &s.params)?;
        embeds.push(pipe.sentence_embedding(&sentence, &stats)?);
        classes.push(s.class);
    }
    let projected = pca_two_components(&embeds)?;
    fs::create_dir_all(dir)?;
    let path = dir.join("embedding_pca.csv");
    let mut out = String::from("pc1,pc2,class\n");
    for ((p1, p2), class) in projected.iter().zip(&classes) {
        out.push_str(&format!("{p1},{p2},{class}\n"));
    }
    fs::write(&path, out)?;
    Ok(path)
}

/// Re-emit every plot for a finished run directory: similarity map CSV +
/// PNG, embedding PCA, and the loss-curve CSV, all derived from the
/// report's embedded config.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let report_path = run_dir.join("report.json");
    if !report_path.exists() {
        return Err(HarnessError::MissingArtifacts(vec![report_path.display().to_string()]));
    }
    let report = read_report(&report_path)?;
    let mut written = emit_similarity_map(&report.config, run_dir)?;
    written.push(emit_pca(&report.config, run_dir)?);
    let loss_path = run_dir.join("loss_curves.csv");
    write_loss_curves_csv(&report.loss_curves, &loss_path)?;
    written.push(loss_path);
    Ok(written)
}
