//! Synthetic gait dataset: class-conditional parameter draws, sinusoid
//! video features that encode those parameters, sliding-window clip
//! extraction, subject-grouped fold construction, and a versioned
//! on-disk dataset format.
//!
//! # Generative model
//!
//! Every class carries a per-parameter mean shifted away from the
//! healthy profile in proportion to a severity index (the class id) and
//! the `separability` knob; subjects draw parameter values around their
//! class mean. Video frames are a bank of phase-shifted sinusoids whose
//! frequency tracks cadence (parameter 2), whose amplitude tracks mean
//! step distance (parameters 8 and 9), plus a half-frequency asymmetry
//! component driven by the step-duration difference (parameter 3) and
//! i.i.d. Gaussian noise. Class identity is therefore only reachable
//! through the gait parameters, the same way the clinical footage
//! encodes them.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaitparams::{
    read_parameter_table, write_parameter_table, GaitParamError, GaitParameterSet,
};
use crate::graph::GraphError;
use crate::tensor::Tensor;

/// Frame rate the synthetic "camera" runs at; cadence converts through it.
pub const FRAME_RATE_HZ: f64 = 25.0;

/// On-disk dataset format version written to the manifest.
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasimError {
    #[error("bad dataset config: {0}")]
    BadConfig(String),
    #[error("video of {frames} frames is shorter than the {window}-frame window")]
    VideoTooShort { frames: usize, window: usize },
    #[error("window and stride must be positive")]
    BadWindow,
    #[error("{units} {unit}s cannot fill {k} folds")]
    TooFewUnits { units: usize, unit: &'static str, k: usize },
    #[error("dataset dir: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gait(#[from] GaitParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, DatasimError>;

// ── Configuration ────────────────────────────────────────────────────

/// Everything `generate_dataset` needs; serialized into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Subjects per class; the length sets the number of classes and the
    /// entries set the class balance.
    pub subjects_per_class: Vec<usize>,
    pub videos_per_subject: usize,
    /// Frames per generated video (T_total).
    pub frames_per_video: usize,
    /// Frame feature count (F_in).
    pub f_in: usize,
    /// 0 collapses every class onto the healthy parameter profile; 1 is
    /// the calibrated default spacing.
    pub separability: f64,
    /// Probability that a video carries its gait-parameter pairing.
    pub pairing_rate: f64,
    /// Standard deviation of the per-frame Gaussian noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            subjects_per_class: vec![20; 4],
            videos_per_subject: 1,
            frames_per_video: 70,
            f_in: 12,
            separability: 1.0,
            pairing_rate: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Balanced layout: `per_class` subjects in each of `n_classes`.
    pub fn balanced(n_classes: usize, per_class: usize) -> DatasetConfig {
        DatasetConfig { subjects_per_class: vec![per_class; n_classes], ..Default::default() }
    }

    pub fn n_classes(&self) -> usize {
        self.subjects_per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_class.is_empty() {
            return Err(DatasimError::BadConfig("zero classes".into()));
        }
        if let Some(c) = self.subjects_per_class.iter().position(|&n| n == 0) {
            return Err(DatasimError::BadConfig(format!("class {c} has zero subjects")));
        }
        if self.videos_per_subject == 0 {
            return Err(DatasimError::BadConfig("zero videos per subject".into()));
        }
        if self.frames_per_video == 0 || self.f_in == 0 {
            return Err(DatasimError::BadConfig("empty video shape".into()));
        }
        if !(0.0..=1.0).contains(&self.pairing_rate) {
            return Err(DatasimError::BadConfig(format!(
                "pairing rate {} outside [0, 1]",
                self.pairing_rate
            )));
        }
        if !self.separability.is_finite() || self.separability < 0.0 {
            return Err(DatasimError::BadConfig(format!("separability {}", self.separability)));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(DatasimError::BadConfig(format!("noise std {}", self.noise_std)));
        }
        Ok(())
    }
}

// ── Domain types ─────────────────────────────────────────────────────

/// Generative mean/spread for one parameter at one class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ParamProfile {
    pub id: u8,
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    /// (T_total × F_in) frame features.
    pub frames: Tensor,
    /// Whether a gait-parameter record accompanies this video.
    pub paired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub class: usize,
    /// The class-conditional means/spreads this subject was drawn from.
    pub profile: Vec<ParamProfile>,
    /// The drawn parameter values, in native units.
    pub params: GaitParameterSet,
    pub videos: Vec<SyntheticVideo>,
}

/// Healthy mean, per-severity-unit shift, and within-class spread for
/// each of the 29 parameters, in native units. Impaired classes slow
/// down, shorten and widen their steps, spend longer in double support,
/// and grow a left/right asymmetry.
const BASE_PROFILE: [(u8, f64, f64, f64); 29] = [
    (1, 0.90, -0.15, 0.035),
    (2, 110.0, -10.0, 2.1),
    (3, 0.02, 0.04, 0.007),
    (4, 1.5, 2.5, 0.35),
    (5, 0.02, 0.035, 0.007),
    (6, 0.55, 0.06, 0.014),
    (7, 0.55, 0.07, 0.014),
    (8, 65.0, -8.0, 1.4),
    (9, 65.0, -9.0, 1.4),
    (10, 1.10, 0.13, 0.028),
    (11, 1.10, 0.12, 0.028),
    (12, 130.0, -17.0, 2.8),
    (13, 130.0, -16.0, 2.8),
    (14, 15.0, -2.0, 0.56),
    (15, 15.0, -1.8, 0.56),
    (16, 38.0, -3.0, 0.7),
    (17, 38.0, -2.8, 0.7),
    (18, 0.42, -0.03, 0.0105),
    (19, 0.42, -0.028, 0.0105),
    (20, 38.0, -3.0, 0.7),
    (21, 38.0, -2.9, 0.7),
    (22, 0.42, -0.03, 0.0105),
    (23, 0.42, -0.029, 0.0105),
    (24, 24.0, 6.0, 1.05),
    (25, 24.0, 5.5, 1.05),
    (26, 0.26, 0.07, 0.014),
    (27, 0.26, 0.065, 0.014),
    (28, 7.0, 3.0, 0.7),
    (29, 7.0, 2.5, 0.7),
];

/// The class-conditional generative profile: healthy mean plus
/// `separability × class × shift`.
pub fn class_profile(class: usize, separability: f64) -> Vec<ParamProfile> {
    BASE_PROFILE
        .iter()
        .map(|&(id, healthy, shift, sigma)| ParamProfile {
            id,
            mean: healthy + separability * class as f64 * shift,
            sigma,
        })
        .collect()
}

// ── Generation ───────────────────────────────────────────────────────

/// Draw the full synthetic cohort. Deterministic given `cfg.seed`:
/// classes, subjects, parameters (in id order), and frames are generated
/// in a fixed order from one seeded stream.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SyntheticSubject>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subjects = Vec::new();
    let mut serial = 0usize;
    for (class, &count) in cfg.subjects_per_class.iter().enumerate() {
        let profile = class_profile(class, cfg.separability);
        for _ in 0..count {
            let id = format!("s{serial:03}");
            serial += 1;
            let mut params = GaitParameterSet::new(&id, class);
            for p in &profile {
                let z: f64 = rng.sample(StandardNormal);
                params.set(p.id, p.mean + p.sigma * z)?;
            }
            let mut videos = Vec::with_capacity(cfg.videos_per_subject);
            for _ in 0..cfg.videos_per_subject {
                let frames = render_video(&params, cfg, &mut rng)?;
                let paired = rng.gen::<f64>() < cfg.pairing_rate;
                videos.push(SyntheticVideo { frames, paired });
            }
            subjects.push(SyntheticSubject { id, class, profile: profile.clone(), params, videos });
        }
    }
    Ok(subjects)
}

/// Frame features for one video: `f_in` phase-shifted sinusoids at the
/// subject's step frequency, amplitude-scaled by relative step distance,
/// plus a half-frequency asymmetry component and Gaussian noise.
fn render_video(params: &GaitParameterSet, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let cadence = params.get(2).ok_or(GaitParamError::MissingValue(2))?;
    let step_r = params.get(8).ok_or(GaitParamError::MissingValue(8))?;
    let step_l = params.get(9).ok_or(GaitParamError::MissingValue(9))?;
    let dur_diff = params.get(3).ok_or(GaitParamError::MissingValue(3))?;
    let omega = 2.0 * std::f64::consts::PI * (cadence / 60.0) / FRAME_RATE_HZ;
    let amp = (step_r + step_l) / 2.0 / 65.0;
    let asym = dur_diff.abs() / 0.1;
    let t_total = cfg.frames_per_video;
    let f_in = cfg.f_in;
    let mut data = Vec::with_capacity(t_total * f_in);
    for t in 0..t_total {
        for j in 0..f_in {
            let phase = 2.0 * std::f64::consts::PI * j as f64 / f_in as f64;
            let gain = 0.75 + 0.5 * (j as f64 + 0.5) / f_in as f64;
            let step_wave = amp * gain * (omega * t as f64 + phase).sin();
            let cycle_wave = asym * (omega * t as f64 / 2.0 + phase / 2.0).sin();
            let noise: f64 = rng.sample(StandardNormal);
            data.push(step_wave + cycle_wave + cfg.noise_std * noise);
        }
    }
    Ok(Tensor::new(vec![t_total, f_in], data)?)
}

// ── Sliding-window clips ─────────────────────────────────────────────

/// One fixed-length window cut from a video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub start: usize,
    pub frames: Tensor,
}

/// Cut a video into clips. Training mode starts windows at
/// 0, stride, 2·stride, … while `start + window ≤ T_total`; validation
/// mode uses non-overlapping windows (stride = window).
pub fn window_clips(
    video: &SyntheticVideo,
    window: usize,
    train_stride: usize,
    validation: bool,
) -> Result<Vec<Clip>> {
    let (t_total, f_in) = video.frames.rows_cols();
    let stride = if validation { window } else { train_stride };
    if window == 0 || stride == 0 {
        return Err(DatasimError::BadWindow);
    }
    if t_total < window {
        return Err(DatasimError::VideoTooShort { frames: t_total, window });
    }
    let mut clips = Vec::with_capacity((t_total - window) / stride + 1);
    let mut start = 0;
    while start + window <= t_total {
        let data = video.frames.data()[start * f_in..(start + window) * f_in].to_vec();
        clips.push(Clip { start, frames: Tensor::new(vec![window, f_in], data)? });
        start += stride;
    }
    Ok(clips)
}

/// Closed-form clip count for training mode: ⌊(T − window)/stride⌋ + 1.
pub fn clip_count(t_total: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(DatasimError::BadWindow);
    }
    if t_total < window {
        return Err(DatasimError::VideoTooShort { frames: t_total, window });
    }
    Ok((t_total - window) / stride + 1)
}

// ── Folds ────────────────────────────────────────────────────────────

/// Index of one video within a subject list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub subject: usize,
    pub video: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldUnit {
    /// Subjects are partitioned; all of a subject's videos share a fold.
    Subject,
    /// Videos are partitioned independently (identity may leak).
    Video,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<VideoRef>,
    pub validation: Vec<VideoRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub unit: FoldUnit,
    pub folds: Vec<Fold>,
}

/// Deal class-stratified unit indices into `k` buckets. The round-robin
/// pointer carries across classes so overall bucket sizes differ by ≤ 1.
fn deal_stratified(
    by_class: Vec<Vec<usize>>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); k];
    let mut next = 0usize;
    for mut members in by_class {
        use rand::seq::SliceRandom;
        members.shuffle(rng);
        for m in members {
            buckets[next % k].push(m);
            next += 1;
        }
    }
    buckets
}

/// Subject-grouped, class-stratified k-fold plan: no subject appears in
/// both sides of a fold, and every video validates exactly once.
pub fn make_folds(subjects: &[SyntheticSubject], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || subjects.len() < k {
        return Err(DatasimError::TooFewUnits { units: subjects.len(), unit: "subject", k });
    }
    let n_classes = subjects.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, s) in subjects.iter().enumerate() {
        by_class[s.class].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buckets = deal_stratified(by_class, k, &mut rng);
    let folds = buckets
        .iter()
        .map(|val_subjects| {
            let mut train = Vec::new();
            let mut validation = Vec::new();
            for (i, s) in subjects.iter().enumerate() {
                let side =
                    if val_subjects.contains(&i) { &mut validation } else { &mut train };
                for v in 0..s.videos.len() {
                    side.push(VideoRef { subject: i, video: v });
                }
            }
            Fold { train, validation }
        })
        .collect();
    Ok(FoldPlan { k, unit: FoldUnit::Subject, folds })
}

/// Video-level (ungrouped) k-fold plan: videos are stratified by class
/// with no subject grouping. Exists for comparison runs; subject-grouped
/// folds are the default because they prevent identity leakage.
pub fn make_video_folds(subjects: &[SyntheticSubject], k: usize, seed: u64) -> Result<FoldPlan> {
    let all: Vec<VideoRef> = subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.videos.len()).map(move |v| VideoRef { subject: i, video: v }))
        .collect();
    if k == 0 || all.len() < k {
        return Err(DatasimError::TooFewUnits { units: all.len(), unit: "video", k });
    }
    let n_classes = subjects.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, vr) in all.iter().enumerate() {
        by_class[subjects[vr.subject].class].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buckets = deal_stratified(by_class, k, &mut rng);
    let folds = buckets
        .iter()
        .map(|val_idx| {
            let mut train = Vec::new();
            let mut validation = Vec::new();
            for (i, vr) in all.iter().enumerate() {
                if val_idx.contains(&i) {
                    validation.push(*vr);
                } else {
                    train.push(*vr);
                }
            }
            Fold { train, validation }
        })
        .collect();
    Ok(FoldPlan { k, unit: FoldUnit::Video, folds })
}

// ── Dataset directory format ─────────────────────────────────────────
//
// dataset/
//   manifest.json     format tag, version, config, subject records
//   parameters.tsv    subject, class, p01..p29 (native units)
//   videos/
//     s000_v00.tsv    one tensor file per video: "rows cols" header
//                     line, then one whitespace-separated row per frame
//
// Floats are written with shortest round-trip formatting, so a load
// reproduces the generated dataset bitwise.

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVideo {
    file: String,
    paired: bool,
    frames: usize,
    f_in: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    class: usize,
    profile: Vec<ParamProfile>,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: DatasetConfig,
    subjects: Vec<ManifestSubject>,
}

fn write_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = t.rows_cols();
    let mut out = String::new();
    out.push_str(&format!("{rows} {cols}\n"));
    for r in 0..rows {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DatasimError::Format("empty tensor file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| DatasimError::Format(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(DatasimError::Format(format!("bad header {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for cell in line.split_whitespace() {
            let v: f64 =
                cell.parse().map_err(|_| DatasimError::Format(format!("bad float {cell:?}")))?;
            data.push(v);
        }
    }
    if data.len() != rows * cols {
        return Err(DatasimError::Format(format!(
            "expected {} values, found {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Serialize a generated dataset into `dir` (created if missing).
pub fn save_dataset(subjects: &[SyntheticSubject], cfg: &DatasetConfig, dir: &Path) -> Result<()> {
    let videos_dir = dir.join("videos");
    fs::create_dir_all(&videos_dir)?;
    let rows: Vec<GaitParameterSet> = subjects.iter().map(|s| s.params.clone()).collect();
    write_parameter_table(&rows, &dir.join("parameters.tsv"))?;
    let mut manifest_subjects = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut videos = Vec::with_capacity(s.videos.len());
        for (v, video) in s.videos.iter().enumerate() {
            let file = format!("{}_v{v:02}.tsv", s.id);
            write_tensor_file(&video.frames, &videos_dir.join(&file))?;
            let (frames, f_in) = video.frames.rows_cols();
            videos.push(ManifestVideo { file, paired: video.paired, frames, f_in });
        }
        manifest_subjects.push(ManifestSubject {
            id: s.id.clone(),
            class: s.class,
            profile: s.profile.clone(),
            videos,
        });
    }
    let manifest = Manifest {
        format: "gaitvlm-dataset".to_string(),
        version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        subjects: manifest_subjects,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatasimError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<SyntheticSubject>, DatasetConfig)> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| DatasimError::Format(e.to_string()))?;
    if manifest.format != "gaitvlm-dataset" {
        return Err(DatasimError::Format(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(DatasimError::Format(format!(
            "unsupported dataset version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.version
        )));
    }
    let rows = read_parameter_table(&dir.join("parameters.tsv"))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for (i, ms) in manifest.subjects.into_iter().enumerate() {
        let params = rows
            .iter()
            .find(|r| r.subject == ms.id)
            .cloned()
            .ok_or_else(|| DatasimError::Format(format!("subject {} missing from table", ms.id)))?;
        if params.class != ms.class {
            return Err(DatasimError::Format(format!("subject {} class mismatch", ms.id)));
        }
        let mut videos = Vec::with_capacity(ms.videos.len());
        for mv in &ms.videos {
            let frames = read_tensor_file(&dir.join("videos").join(&mv.file))?;
            let (rows_got, cols_got) = frames.rows_cols();
            if rows_got != mv.frames || cols_got != mv.f_in {
                return Err(DatasimError::Format(format!("video {} shape mismatch", mv.file)));
            }
            videos.push(SyntheticVideo { frames, paired: mv.paired });
        }
        let _ = i;
        subjects.push(SyntheticSubject {
            id: ms.id,
            class: ms.class,
            profile: ms.profile,
            params,
            videos,
        });
    }
    Ok((subjects, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaitparams::{normalize_value, NormalizationStats, NORM_RANGE};
    use std::collections::BTreeSet;

    fn tiny_cfg() -> DatasetConfig {
        DatasetConfig {
            subjects_per_class: vec![3; 4],
            videos_per_subject: 2,
            frames_per_video: 80,
            f_in: 6,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let cfg = tiny_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b, "same seed must give a bitwise-identical dataset");
        assert_eq!(a.len(), 12);
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.id, format!("s{i:03}"));
            assert_eq!(s.videos.len(), 2);
            assert_eq!(s.params.values.len(), 29);
            for v in &s.videos {
                assert_eq!(v.frames.shape(), &[80, 6]);
                assert!(v.frames.is_finite());
            }
        }
        let c = generate_dataset(&DatasetConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn class_means_separate_and_collapse_with_the_knob() {
        let sep = class_profile(2, 1.0);
        let healthy = class_profile(0, 1.0);
        // walking speed drops with severity
        assert!(sep[0].mean < healthy[0].mean);
        // double-support share rises
        assert!(sep[23].mean > healthy[23].mean);
        for (a, b) in class_profile(3, 0.0).iter().zip(&healthy) {
            assert_eq!(a.mean, b.mean, "separability 0 must collapse the means");
        }
    }

    #[test]
    fn config_validation_rejects_impossible_setups() {
        let bad = |f: fn(&mut DatasetConfig)| {
            let mut cfg = tiny_cfg();
            f(&mut cfg);
            generate_dataset(&cfg).is_err()
        };
        assert!(bad(|c| c.subjects_per_class.clear()));
        assert!(bad(|c| c.subjects_per_class[1] = 0));
        assert!(bad(|c| c.videos_per_subject = 0));
        assert!(bad(|c| c.pairing_rate = 1.5));
        assert!(bad(|c| c.separability = -0.1));
        assert!(bad(|c| c.noise_std = f64::NAN));
    }

    #[test]
    fn pairing_rate_bounds_hold() {
        let all = generate_dataset(&DatasetConfig { pairing_rate: 1.0, ..tiny_cfg() }).unwrap();
        assert!(all.iter().flat_map(|s| &s.videos).all(|v| v.paired));
        let none = generate_dataset(&DatasetConfig { pairing_rate: 0.0, ..tiny_cfg() }).unwrap();
        assert!(none.iter().flat_map(|s| &s.videos).all(|v| !v.paired));
    }

    #[test]
    fn generated_values_normalize_into_range() {
        let subjects = generate_dataset(&tiny_cfg()).unwrap();
        let rows: Vec<GaitParameterSet> = subjects.iter().map(|s| s.params.clone()).collect();
        let stats = NormalizationStats::fit(&rows, 0).unwrap();
        for row in &rows {
            for (&id, &v) in &row.values {
                let z = normalize_value(v, &stats, id).unwrap();
                assert!((-NORM_RANGE..=NORM_RANGE).contains(&z), "p{id} -> {z}");
            }
        }
    }

    #[test]
    fn video_frequency_tracks_cadence_and_amplitude_tracks_step_length() {
        // two hand-built parameter sets: fast long steps vs slow short ones
        let mut fast = GaitParameterSet::new("fast", 0);
        fast.set(2, 120.0).unwrap();
        fast.set(8, 70.0).unwrap();
        fast.set(9, 70.0).unwrap();
        fast.set(3, 0.0).unwrap();
        let mut slow = GaitParameterSet::new("slow", 1);
        slow.set(2, 60.0).unwrap();
        slow.set(8, 35.0).unwrap();
        slow.set(9, 35.0).unwrap();
        slow.set(3, 0.0).unwrap();
        let cfg = DatasetConfig {
            frames_per_video: 200,
            f_in: 4,
            noise_std: 0.0,
            ..DatasetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vf = render_video(&fast, &cfg, &mut rng).unwrap();
        let vs = render_video(&slow, &cfg, &mut rng).unwrap();
        // zero crossings of feature 0 count cycles: double cadence ⇒ about
        // double the crossings
        let crossings = |t: &Tensor| {
            let col: Vec<f64> = (0..200).map(|r| t.row(r)[0]).collect();
            col.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count() as f64
        };
        let ratio = crossings(&vf) / crossings(&vs);
        assert!((1.6..=2.4).contains(&ratio), "crossing ratio {ratio}");
        // amplitude scales with mean step distance
        let peak = |t: &Tensor| t.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(peak(&vf) > 1.5 * peak(&vs));
    }

    #[test]
    fn asymmetry_adds_a_subharmonic() {
        let mut sym = GaitParameterSet::new("sym", 0);
        sym.set(2, 110.0).unwrap();
        sym.set(8, 65.0).unwrap();
        sym.set(9, 65.0).unwrap();
        sym.set(3, 0.0).unwrap();
        let mut asym = sym.clone();
        asym.set(3, 0.15).unwrap();
        let cfg = DatasetConfig {
            frames_per_video: 200,
            f_in: 4,
            noise_std: 0.0,
            ..DatasetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vs = render_video(&sym, &cfg, &mut rng).unwrap();
        let va = render_video(&asym, &cfg, &mut rng).unwrap();
        let diff: f64 = vs
            .data()
            .iter()
            .zip(va.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.5, "asymmetry term should alter the waveform, diff {diff}");
    }

    #[test]
    fn clip_extraction_matches_the_closed_form() {
        let video = SyntheticVideo { frames: Tensor::zeros(&[120, 3]), paired: true };
        let clips = window_clips(&video, 70, 25, false).unwrap();
        assert_eq!(clips.iter().map(|c| c.start).collect::<Vec<_>>(), vec![0, 25, 50]);
        assert_eq!(clips.len(), clip_count(120, 70, 25).unwrap());
        for c in &clips {
            assert_eq!(c.frames.shape(), &[70, 3]);
        }
        // exactly one clip at T == window, both modes
        let exact = SyntheticVideo { frames: Tensor::zeros(&[70, 3]), paired: true };
        assert_eq!(window_clips(&exact, 70, 25, false).unwrap().len(), 1);
        assert_eq!(window_clips(&exact, 70, 25, true).unwrap().len(), 1);
        // validation stride = window: T=140 → 2 non-overlapping clips
        let v140 = SyntheticVideo { frames: Tensor::zeros(&[140, 3]), paired: true };
        let val = window_clips(&v140, 70, 25, true).unwrap();
        assert_eq!(val.iter().map(|c| c.start).collect::<Vec<_>>(), vec![0, 70]);
        // too short errors
        let short = SyntheticVideo { frames: Tensor::zeros(&[69, 3]), paired: true };
        assert!(matches!(
            window_clips(&short, 70, 25, false),
            Err(DatasimError::VideoTooShort { .. })
        ));
    }

    #[test]
    fn clip_slices_are_views_of_the_source() {
        let cfg = tiny_cfg();
        let subjects = generate_dataset(&cfg).unwrap();
        let video = &subjects[0].videos[0];
        let clips = window_clips(video, 70, 5, false).unwrap();
        for c in &clips {
            for r in 0..70 {
                assert_eq!(c.frames.row(r), video.frames.row(c.start + r));
            }
        }
    }

    #[test]
    fn folds_partition_videos_with_no_subject_leakage() {
        let cfg = DatasetConfig {
            subjects_per_class: vec![11, 11, 11, 10],
            videos_per_subject: 2,
            ..tiny_cfg()
        };
        let subjects = generate_dataset(&cfg).unwrap();
        let plan = make_folds(&subjects, 10, 7).unwrap();
        assert_eq!(plan.folds.len(), 10);
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            let val_subj: BTreeSet<usize> = fold.validation.iter().map(|v| v.subject).collect();
            let train_subj: BTreeSet<usize> = fold.train.iter().map(|v| v.subject).collect();
            assert!(val_subj.is_disjoint(&train_subj), "subject leaked across the split");
            for v in &fold.validation {
                assert!(seen.insert((v.subject, v.video)), "video validated twice");
            }
            assert_eq!(
                fold.train.len() + fold.validation.len(),
                subjects.len() * 2,
                "every fold sees every video exactly once"
            );
        }
        assert_eq!(seen.len(), subjects.len() * 2, "every video validated");
        // 43 subjects into 10 folds: sizes differ by ≤ 1
        let sizes: Vec<usize> = plan
            .folds
            .iter()
            .map(|f| f.validation.iter().map(|v| v.subject).collect::<BTreeSet<_>>().len())
            .collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "fold sizes {sizes:?}");
    }

    #[test]
    fn ten_subjects_ten_folds_is_one_each() {
        let cfg = DatasetConfig {
            subjects_per_class: vec![5, 5],
            videos_per_subject: 1,
            ..tiny_cfg()
        };
        let subjects = generate_dataset(&cfg).unwrap();
        let plan = make_folds(&subjects, 10, 3).unwrap();
        for fold in &plan.folds {
            let val_subj: BTreeSet<usize> = fold.validation.iter().map(|v| v.subject).collect();
            assert_eq!(val_subj.len(), 1);
        }
        assert!(make_folds(&subjects[..9], 10, 3).is_err());
    }

    #[test]
    fn video_folds_partition_without_grouping() {
        let cfg = tiny_cfg();
        let subjects = generate_dataset(&cfg).unwrap();
        let plan = make_video_folds(&subjects, 6, 5).unwrap();
        assert_eq!(plan.unit, FoldUnit::Video);
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            for v in &fold.validation {
                assert!(seen.insert((v.subject, v.video)));
            }
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn folds_are_deterministic_per_seed() {
        let subjects = generate_dataset(&tiny_cfg()).unwrap();
        let a = make_folds(&subjects, 4, 11).unwrap();
        let b = make_folds(&subjects, 4, 11).unwrap();
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.validation, fb.validation);
        }
    }

    #[test]
    fn dataset_directory_round_trips_bitwise() {
        let cfg = DatasetConfig { pairing_rate: 0.5, ..tiny_cfg() };
        let subjects = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&subjects, &cfg, dir.path()).unwrap();
        let (loaded, loaded_cfg) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.len(), subjects.len());
        for (a, b) in subjects.iter().zip(&loaded) {
            assert_eq!(a, b, "subject {} must round-trip bitwise", a.id);
        }
    }

    #[test]
    fn loading_rejects_foreign_and_future_formats() {
        let cfg = tiny_cfg();
        let subjects = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&subjects, &cfg, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let json = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, json.replace("\"version\": 1", "\"version\": 99")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasimError::Format(_))));
    }
}
