//! The 29-parameter gait vocabulary: definitions, value normalization,
//! correlation-filtered combination selection, and sentence templating.
//!
//! Sentences follow a fixed grammar (exactly four clauses):
//!
//! ```text
//! sentence = clause , { ", " , clause } , "." ;
//! clause   = description , " is " , number , [ " " , unit ] ;
//! number   = [ "-" ] , digits , [ "." , digits ] ;
//! ```
//!
//! The first clause keeps the description's leading capital; later clauses
//! lower-case it. Numbers carry at most three fractional digits with
//! trailing zeros trimmed, so parse ∘ render recovers values to within
//! 5e-4 in rendered units.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

#[derive(Debug, thiserror::Error)]
pub enum GaitParamError {
    #[error("unknown gait parameter id {0}")]
    UnknownId(u8),
    #[error("missing value for gait parameter id {0}")]
    MissingValue(u8),
    #[error("non-finite value {value} for gait parameter id {id}")]
    NonFiniteValue { id: u8, value: f64 },
    #[error("zero variance in parameter {0}; correlation undefined")]
    ZeroVariance(u8),
    #[error("sequences must have equal length >= 2, got {0} and {1}")]
    BadSequenceLength(usize, usize),
    #[error("combination needs {expected} distinct ids sorted ascending, got {got:?}")]
    BadCombination { expected: usize, got: Vec<u8> },
    #[error("clause {clause}: unknown parameter description in `{text}`")]
    UnknownDescription { clause: usize, text: String },
    #[error("clause {clause}: malformed number `{text}`")]
    MalformedNumber { clause: usize, text: String },
    #[error("clause {clause}: unit `{got}` does not match `{expected}`")]
    WrongUnit { clause: usize, got: String, expected: String },
    #[error("expected {expected} clauses, found {got}")]
    WrongClauseCount { expected: usize, got: usize },
    #[error("clause {clause}: parameter id {id} appears more than once")]
    DuplicateParameter { clause: usize, id: u8 },
    #[error("normalization stats: sigma for parameter {id} is {sigma} (must be > 0)")]
    BadSigma { id: u8, sigma: f64 },
    #[error("normalization stats need at least one healthy and two total rows with parameter {0}")]
    NotEnoughData(u8),
    #[error("combination size must be >= 2, got {0}")]
    BadSize(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("table format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GaitParamError>;

// ── Definitions ──────────────────────────────────────────────────────

/// One row of the shipped parameter table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaitParameterDef {
    pub id: u8,
    pub description: String,
    /// Empty string for unitless parameters.
    pub unit: String,
}

/// The fixed 29-parameter vocabulary, loaded from the versioned data file
/// compiled into the binary.
#[derive(Debug, Clone)]
pub struct ParameterTable {
    defs: Vec<GaitParameterDef>,
}

const TABLE_V1: &str = include_str!("../data/gait_parameters_v1.tsv");

impl ParameterTable {
    /// The built-in v1 table (29 definitions).
    pub fn builtin() -> &'static ParameterTable {
        static TABLE: OnceLock<ParameterTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            ParameterTable::parse_tsv(TABLE_V1).expect("embedded parameter table is valid")
        })
    }

    fn parse_tsv(text: &str) -> Result<ParameterTable> {
        let mut defs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "id\tdescription\tunit" {
                    return Err(GaitParamError::Format(format!("unexpected header `{line}`")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let id: u8 = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| GaitParamError::Format(format!("line {}: bad id", i + 1)))?;
            let description = fields
                .next()
                .ok_or_else(|| GaitParamError::Format(format!("line {}: missing description", i + 1)))?
                .to_string();
            let unit = fields.next().unwrap_or("").to_string();
            defs.push(GaitParameterDef { id, description, unit });
        }
        if defs.len() != 29 {
            return Err(GaitParamError::Format(format!("expected 29 rows, got {}", defs.len())));
        }
        for (i, d) in defs.iter().enumerate() {
            if d.id as usize != i + 1 {
                return Err(GaitParamError::Format(format!("ids must be 1..29 in order, got {}", d.id)));
            }
        }
        Ok(ParameterTable { defs })
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn get(&self, id: u8) -> Result<&GaitParameterDef> {
        self.defs
            .get(id.checked_sub(1).ok_or(GaitParamError::UnknownId(id))? as usize)
            .ok_or(GaitParamError::UnknownId(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &GaitParameterDef> {
        self.defs.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.defs.iter().map(|d| d.id)
    }
}

// ── Measurements ─────────────────────────────────────────────────────

/// One subject-level measurement: raw parameter values in native units.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitParameterSet {
    pub subject: String,
    pub class: usize,
    pub values: BTreeMap<u8, f64>,
}

impl GaitParameterSet {
    pub fn new(subject: &str, class: usize) -> Self {
        Self { subject: subject.to_string(), class, values: BTreeMap::new() }
    }

    pub fn set(&mut self, id: u8, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(GaitParamError::NonFiniteValue { id, value });
        }
        self.values.insert(id, value);
        Ok(())
    }

    pub fn get(&self, id: u8) -> Option<f64> {
        self.values.get(&id).copied()
    }
}

// ── Normalization ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
struct ParamStats {
    mean_healthy: f64,
    sigma: f64,
    alpha_scale: f64,
}

/// Per-parameter normalization constants fitted on a training split.
///
/// The zero reference is the healthy-control mean; `sigma` is the standard
/// deviation over all training rows; `alpha_scale` maps the training-split
/// extreme onto ±2.5 so normalized values fill the target range.
#[derive(Debug, Clone, Default)]
pub struct NormalizationStats {
    per_param: BTreeMap<u8, ParamStats>,
}

pub const NORM_RANGE: f64 = 2.5;

impl NormalizationStats {
    /// Fit from training rows; rows with `class == healthy_class` define the
    /// zero reference. Parameters missing from any row or with zero spread
    /// are skipped.
    pub fn fit(rows: &[GaitParameterSet], healthy_class: usize) -> Result<NormalizationStats> {
        let mut per_param = BTreeMap::new();
        let ids: Vec<u8> = ParameterTable::builtin().ids().collect();
        for id in ids {
            let all: Vec<f64> = rows.iter().filter_map(|r| r.get(id)).collect();
            let healthy: Vec<f64> = rows
                .iter()
                .filter(|r| r.class == healthy_class)
                .filter_map(|r| r.get(id))
                .collect();
            if all.len() < 2 || healthy.is_empty() {
                continue;
            }
            let mean_all = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean_all) * (v - mean_all)).sum::<f64>()
                / all.len() as f64;
            let sigma = var.sqrt();
            if sigma <= 0.0 {
                continue;
            }
            let mean_healthy = healthy.iter().sum::<f64>() / healthy.len() as f64;
            let max_z = all
                .iter()
                .map(|v| ((v - mean_healthy) / sigma).abs())
                .fold(0.0_f64, f64::max);
            // sigma > 0 guarantees some value differs from mean_healthy
            let alpha_scale = NORM_RANGE / max_z;
            per_param.insert(id, ParamStats { mean_healthy, sigma, alpha_scale });
        }
        Ok(NormalizationStats { per_param })
    }

    /// Construct directly (mainly for tests); sigma must be positive.
    pub fn from_parts(id: u8, mean_healthy: f64, sigma: f64, alpha_scale: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(GaitParamError::BadSigma { id, sigma });
        }
        let mut per_param = BTreeMap::new();
        per_param.insert(id, ParamStats { mean_healthy, sigma, alpha_scale });
        Ok(NormalizationStats { per_param })
    }

    pub fn contains(&self, id: u8) -> bool {
        self.per_param.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.per_param.keys().copied()
    }

    /// Merge stats for ids not already present.
    pub fn extend(&mut self, other: &NormalizationStats) {
        for (&id, &st) in &other.per_param {
            self.per_param.entry(id).or_insert(st);
        }
    }
}

/// Normalize a raw value into [−2.5, 2.5] around the healthy-control mean.
pub fn normalize_value(v: f64, stats: &NormalizationStats, id: u8) -> Result<f64> {
    let st = stats.per_param.get(&id).ok_or(GaitParamError::UnknownId(id))?;
    let z = st.alpha_scale * (v - st.mean_healthy) / st.sigma;
    Ok(z.clamp(-NORM_RANGE, NORM_RANGE))
}

// ── Correlation and combination selection ────────────────────────────

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(GaitParamError::BadSequenceLength(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GaitParamError::ZeroVariance(0));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A selected set of parameter ids, distinct and sorted ascending. The
/// classification pipeline always uses four (one sentence = four clauses).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParameterCombination {
    ids: Vec<u8>,
}

impl ParameterCombination {
    pub fn new(ids: Vec<u8>) -> Result<Self> {
        if ids.len() < 2 || ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GaitParamError::BadCombination { expected: ids.len().max(2), got: ids });
        }
        Ok(Self { ids })
    }

    pub fn four(a: u8, b: u8, c: u8, d: u8) -> Result<Self> {
        Self::new(vec![a, b, c, d])
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pairwise Pearson correlations over the parameters present in every row.
/// Returns (ids, matrix) where `matrix[i][j]` pairs `ids[i]` with `ids[j]`.
/// Parameters with zero variance are dropped.
pub fn correlation_matrix(rows: &[GaitParameterSet]) -> Result<(Vec<u8>, Vec<Vec<f64>>)> {
    if rows.len() < 2 {
        return Err(GaitParamError::BadSequenceLength(rows.len(), rows.len()));
    }
    let mut ids: Vec<u8> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for id in ParameterTable::builtin().ids() {
        let col: Vec<f64> = rows.iter().filter_map(|r| r.get(id)).collect();
        if col.len() != rows.len() {
            continue;
        }
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        if col.iter().all(|v| *v == mean) {
            continue;
        }
        ids.push(id);
        columns.push(col);
    }
    let k = ids.len();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        matrix[i][i] = 1.0;
        for j in (i + 1)..k {
            let r = pearson(&columns[i], &columns[j])?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok((ids, matrix))
}

/// All `size`-subsets of usable parameters whose pairwise |r| ≤ `threshold`,
/// ordered lexicographically by id. Equivalent to brute-force enumeration;
/// the search just skips branches that already violate the threshold.
pub fn select_combinations(
    rows: &[GaitParameterSet],
    size: usize,
    threshold: f64,
) -> Result<Vec<ParameterCombination>> {
    if size < 2 {
        return Err(GaitParamError::BadSize(size));
    }
    let (ids, matrix) = correlation_matrix(rows)?;
    if ids.len() < size {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(size);
    fn dfs(
        start: usize,
        size: usize,
        ids: &[u8],
        matrix: &[Vec<f64>],
        threshold: f64,
        current: &mut Vec<usize>,
        out: &mut Vec<ParameterCombination>,
    ) {
        if current.len() == size {
            let combo = current.iter().map(|&i| ids[i]).collect();
            out.push(ParameterCombination { ids: combo });
            return;
        }
        for next in start..ids.len() {
            if current.iter().any(|&i| matrix[i][next].abs() > threshold) {
                continue;
            }
            current.push(next);
            dfs(next + 1, size, ids, matrix, threshold, current, out);
            current.pop();
        }
    }
    dfs(0, size, &ids, &matrix, threshold, &mut current, &mut out);
    Ok(out)
}

// ── Sentence templating ──────────────────────────────────────────────

/// Render a value with up to three fractional digits, trailing zeros trimmed.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Render the four-clause sentence for a combination.
pub fn render_sentence(combo: &ParameterCombination, values: &GaitParameterSet) -> Result<String> {
    if combo.len() != 4 {
        return Err(GaitParamError::BadCombination { expected: 4, got: combo.ids.clone() });
    }
    let table = ParameterTable::builtin();
    let mut clauses = Vec::with_capacity(4);
    for (i, &id) in combo.ids().iter().enumerate() {
        let def = table.get(id)?;
        let v = values.get(id).ok_or(GaitParamError::MissingValue(id))?;
        let desc = if i == 0 { def.description.clone() } else { lower_first(&def.description) };
        let mut clause = format!("{desc} is {}", format_value(v));
        if !def.unit.is_empty() {
            clause.push(' ');
            clause.push_str(&def.unit);
        }
        clauses.push(clause);
    }
    Ok(format!("{}.", clauses.join(", ")))
}

/// Parse a sentence into clause-ordered (parameter id, value) pairs.
pub fn parse_clauses(text: &str) -> Result<Vec<(u8, f64)>> {
    let table = ParameterTable::builtin();
    let body = text
        .strip_suffix('.')
        .ok_or(GaitParamError::WrongClauseCount { expected: 4, got: 0 })?;
    let clauses: Vec<&str> = body.split(", ").collect();
    if clauses.len() != 4 {
        return Err(GaitParamError::WrongClauseCount { expected: 4, got: clauses.len() });
    }
    let mut out = Vec::with_capacity(4);
    for (ci, clause) in clauses.iter().enumerate() {
        let lower = clause.to_lowercase();
        // Longest case-insensitive description prefix wins; descriptions can
        // themselves contain " is ", so splitting on it would misparse.
        let mut best: Option<&GaitParameterDef> = None;
        for def in table.iter() {
            let dl = def.description.to_lowercase();
            if lower.starts_with(&dl)
                && best.is_none_or(|b| dl.len() > b.description.len())
            {
                best = Some(def);
            }
        }
        let def = best.ok_or_else(|| GaitParamError::UnknownDescription {
            clause: ci,
            text: clause.to_string(),
        })?;
        let rest = &clause[def.description.len()..];
        let rest = rest.strip_prefix(" is ").ok_or_else(|| GaitParamError::UnknownDescription {
            clause: ci,
            text: clause.to_string(),
        })?;
        let (num_str, unit_str) = match rest.split_once(' ') {
            Some((n, u)) => (n, u),
            None => (rest, ""),
        };
        let value: f64 = num_str.parse().map_err(|_| GaitParamError::MalformedNumber {
            clause: ci,
            text: num_str.to_string(),
        })?;
        if !value.is_finite() {
            return Err(GaitParamError::MalformedNumber { clause: ci, text: num_str.to_string() });
        }
        if unit_str != def.unit {
            return Err(GaitParamError::WrongUnit {
                clause: ci,
                got: unit_str.to_string(),
                expected: def.unit.clone(),
            });
        }
        if out.iter().any(|&(id, _)| id == def.id) {
            return Err(GaitParamError::DuplicateParameter { clause: ci, id: def.id });
        }
        out.push((def.id, value));
    }
    Ok(out)
}

/// Parse a sentence back into its combination and values.
/// Clauses may appear in any order; ids are returned sorted.
pub fn parse_sentence(text: &str) -> Result<(ParameterCombination, GaitParameterSet)> {
    let pairs = parse_clauses(text)?;
    let mut set = GaitParameterSet::new("", 0);
    let mut ids = Vec::with_capacity(4);
    for (id, value) in pairs {
        ids.push(id);
        set.set(id, value)?;
    }
    ids.sort_unstable();
    Ok((ParameterCombination::new(ids)?, set))
}

// ── Tabular I/O ──────────────────────────────────────────────────────

/// Write measurement rows as TSV: `subject  class  p01 .. p29`, blank cell
/// for a missing parameter. Floats use Rust's shortest round-trip formatting,
/// so reading the file back is bit-exact.
pub fn write_parameter_table(rows: &[GaitParameterSet], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(io_err)?;
    let mut header = vec!["subject".to_string(), "class".to_string()];
    header.extend(ParameterTable::builtin().ids().map(|id| format!("p{id:02}")));
    w.write_record(&header).map_err(io_err)?;
    for row in rows {
        let mut record = vec![row.subject.clone(), row.class.to_string()];
        for id in ParameterTable::builtin().ids() {
            record.push(match row.get(id) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_parameter_table(path: &Path) -> Result<Vec<GaitParameterSet>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(io_err)?;
    let headers = r.headers().map_err(io_err)?.clone();
    let expected: Vec<String> = {
        let mut h = vec!["subject".to_string(), "class".to_string()];
        h.extend(ParameterTable::builtin().ids().map(|id| format!("p{id:02}")));
        h
    };
    let got: Vec<String> = headers.iter().map(str::to_string).collect();
    if got != expected {
        return Err(GaitParamError::Format(format!("unexpected header {got:?}")));
    }
    let mut rows = Vec::new();
    for (li, record) in r.records().enumerate() {
        let record = record.map_err(io_err)?;
        let subject = record.get(0).unwrap_or("").to_string();
        let class: usize = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GaitParamError::Format(format!("row {li}: bad class")))?;
        let mut set = GaitParameterSet::new(&subject, class);
        for (k, id) in ParameterTable::builtin().ids().enumerate() {
            let cell = record.get(2 + k).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| GaitParamError::Format(format!("row {li}: bad value `{cell}`")))?;
            set.set(id, v)?;
        }
        rows.push(set);
    }
    Ok(rows)
}

fn io_err(e: csv::Error) -> GaitParamError {
    GaitParamError::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_table_has_29_unique_rows() {
        let t = ParameterTable::builtin();
        assert_eq!(t.len(), 29);
        assert_eq!(t.get(1).unwrap().description, "Walking speed");
        assert_eq!(t.get(1).unwrap().unit, "leg/sec");
        assert_eq!(t.get(2).unwrap().unit, "");
        assert!(t.get(0).is_err());
        assert!(t.get(30).is_err());
    }

    #[test]
    fn pearson_trivial_cases() {
        let x = [1.0, 2.0, 3.0];
        let y_neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &y_neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_example() {
        // x=[1,2,3,4], y=[1,2,3,5]: r = 6.5/sqrt(5*8.75)
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.9827076298239908).abs() < 1e-15, "r = {r}");
    }

    #[test]
    fn pearson_rejects_constant_input() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    fn synthetic_rows(seed: u64, n_params: u8, n_rows: usize) -> Vec<GaitParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_rows)
            .map(|s| {
                let mut set = GaitParameterSet::new(&format!("s{s}"), 0);
                for id in 1..=n_params {
                    set.set(id, rng.gen_range(-1.0..1.0)).unwrap();
                }
                set
            })
            .collect()
    }

    #[test]
    fn correlation_matrix_is_symmetric_unit_diagonal() {
        let rows = synthetic_rows(5, 8, 40);
        let (ids, m) = correlation_matrix(&rows).unwrap();
        assert_eq!(ids.len(), 8);
        for i in 0..8 {
            assert!((m[i][i] - 1.0).abs() < 1e-12);
            for j in 0..8 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-12);
            }
        }
    }

    /// Plain brute force over every size-subset, no pruning.
    fn brute_force(rows: &[GaitParameterSet], size: usize, threshold: f64) -> Vec<Vec<u8>> {
        let (ids, m) = correlation_matrix(rows).unwrap();
        let n = ids.len();
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..size).collect();
        if size > n {
            return out;
        }
        loop {
            let ok = (0..size).all(|a| {
                ((a + 1)..size).all(|b| m[idx[a]][idx[b]].abs() <= threshold)
            });
            if ok {
                out.push(idx.iter().map(|&i| ids[i]).collect());
            }
            // advance the combination odometer
            let mut pos = size;
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                if idx[pos] != pos + n - size {
                    break;
                }
            }
            idx[pos] += 1;
            for p in (pos + 1)..size {
                idx[p] = idx[p - 1] + 1;
            }
        }
    }

    #[test]
    fn selection_matches_brute_force() {
        for seed in 0..6 {
            let rows = synthetic_rows(seed, 8, 12);
            let got: Vec<Vec<u8>> = select_combinations(&rows, 4, 0.4)
                .unwrap()
                .into_iter()
                .map(|c| c.ids().to_vec())
                .collect();
            let want = brute_force(&rows, 4, 0.4);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn perfectly_correlated_pair_never_coselected() {
        let mut rows = synthetic_rows(9, 6, 30);
        for row in &mut rows {
            let v = row.get(1).unwrap();
            row.set(7, 2.0 * v + 1.0).unwrap(); // p7 == affine(p1)
        }
        let combos = select_combinations(&rows, 4, 0.4).unwrap();
        assert!(!combos.is_empty());
        for c in &combos {
            assert!(
                !(c.ids().contains(&1) && c.ids().contains(&7)),
                "correlated pair selected together: {:?}",
                c.ids()
            );
        }
    }

    #[test]
    fn too_few_parameters_gives_empty_list() {
        let rows = synthetic_rows(11, 3, 10);
        assert!(select_combinations(&rows, 4, 0.4).unwrap().is_empty());
    }

    #[test]
    fn normalization_zero_reference_and_range() {
        let mut rows = Vec::new();
        for (i, v) in [1.0, 2.0, 3.0, 4.0, 5.0].iter().enumerate() {
            let mut s = GaitParameterSet::new(&format!("s{i}"), usize::from(i >= 2));
            s.set(1, *v).unwrap();
            rows.push(s);
        }
        // healthy = class 0 = values {1, 2}, mean 1.5
        let stats = NormalizationStats::fit(&rows, 0).unwrap();
        assert!((normalize_value(1.5, &stats, 1).unwrap()).abs() < 1e-12);
        // training max (5.0) is the farthest point -> maps to +2.5
        assert!((normalize_value(5.0, &stats, 1).unwrap() - 2.5).abs() < 1e-12);
        // beyond the training range -> clamped
        assert_eq!(normalize_value(100.0, &stats, 1).unwrap(), 2.5);
        assert_eq!(normalize_value(-100.0, &stats, 1).unwrap(), -2.5);
        assert!(normalize_value(1.0, &stats, 2).is_err());
    }

    #[test]
    fn normalization_is_monotone() {
        let rows = synthetic_rows(13, 4, 25);
        let stats = NormalizationStats::fit(&rows, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let a = rng.gen_range(-3.0..3.0);
            let b = rng.gen_range(-3.0..3.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let na = normalize_value(lo, &stats, 1).unwrap();
            let nb = normalize_value(hi, &stats, 1).unwrap();
            assert!(na <= nb, "normalize not monotone: {lo}->{na}, {hi}->{nb}");
        }
    }

    #[test]
    fn renders_reference_sentence() {
        let combo = ParameterCombination::four(1, 2, 6, 27).unwrap();
        let mut values = GaitParameterSet::new("s", 0);
        values.set(1, 0.84).unwrap();
        values.set(2, 92.9).unwrap();
        values.set(6, 0.655).unwrap();
        values.set(27, 0.444).unwrap();
        let got = render_sentence(&combo, &values).unwrap();
        assert_eq!(
            got,
            "Walking speed is 0.84 leg/sec, number of steps per minute is 92.9, \
             time taken by the right step is 0.655 sec, duration when both feet contact \
             the ground within one right walk cycle is 0.444 sec."
        );
    }

    #[test]
    fn parses_reference_sentence() {
        let text = "Walking speed is 0.84 leg/sec, number of steps per minute is 92.9, \
                    time taken by the right step is 0.655 sec, duration when both feet contact \
                    the ground within one right walk cycle is 0.444 sec.";
        let (combo, values) = parse_sentence(text).unwrap();
        assert_eq!(combo.ids(), &[1, 2, 6, 27]);
        assert_eq!(values.get(1), Some(0.84));
        assert_eq!(values.get(2), Some(92.9));
        assert_eq!(values.get(6), Some(0.655));
        assert_eq!(values.get(27), Some(0.444));
    }

    #[test]
    fn all_zero_values_render_cleanly() {
        let combo = ParameterCombination::four(1, 2, 3, 4).unwrap();
        let mut values = GaitParameterSet::new("s", 0);
        for id in [1, 2, 3, 4] {
            values.set(id, 0.0).unwrap();
        }
        let text = render_sentence(&combo, &values).unwrap();
        assert!(text.contains("is 0 leg/sec"));
        assert!(text.contains("number of steps per minute is 0,"));
        let (c2, v2) = parse_sentence(&text).unwrap();
        assert_eq!(c2.ids(), &[1, 2, 3, 4]);
        assert_eq!(v2.get(3), Some(0.0));
    }

    #[test]
    fn descriptions_containing_is_parse_correctly() {
        // id 16's description itself contains " is ".
        let combo = ParameterCombination::four(5, 16, 18, 22).unwrap();
        let mut values = GaitParameterSet::new("s", 0);
        values.set(5, 0.02).unwrap();
        values.set(16, 38.4).unwrap();
        values.set(18, 0.41).unwrap();
        values.set(22, 0.62).unwrap();
        let text = render_sentence(&combo, &values).unwrap();
        let (c2, v2) = parse_sentence(&text).unwrap();
        assert_eq!(c2.ids(), &[5, 16, 18, 22]);
        assert_eq!(v2.get(16), Some(38.4));
    }

    #[test]
    fn permuted_clauses_recover_same_set() {
        let text = "Walking speed is 0.84 leg/sec, number of steps per minute is 92.9, \
                    time taken by the right step is 0.655 sec, duration when both feet contact \
                    the ground within one right walk cycle is 0.444 sec.";
        let body = text.strip_suffix('.').unwrap();
        let mut clauses: Vec<&str> = body.split(", ").collect();
        clauses.reverse();
        let permuted = format!("{}.", clauses.join(", "));
        let (combo, values) = parse_sentence(&permuted).unwrap();
        assert_eq!(combo.ids(), &[1, 2, 6, 27]);
        assert_eq!(values.get(1), Some(0.84));
    }

    #[test]
    fn parse_error_cases() {
        assert!(matches!(parse_sentence(""), Err(GaitParamError::WrongClauseCount { .. })));
        assert!(matches!(
            parse_sentence("Walking speed is 0.84 leg/sec."),
            Err(GaitParamError::WrongClauseCount { got: 1, .. })
        ));
        let bad_desc = "Sprinting speed is 1 leg/sec, number of steps per minute is 2, \
                        time taken by the right step is 3 sec, time taken by the left step is 4 sec.";
        assert!(matches!(
            parse_sentence(bad_desc),
            Err(GaitParamError::UnknownDescription { clause: 0, .. })
        ));
        let bad_num = "Walking speed is fast leg/sec, number of steps per minute is 2, \
                       time taken by the right step is 3 sec, time taken by the left step is 4 sec.";
        assert!(matches!(
            parse_sentence(bad_num),
            Err(GaitParamError::MalformedNumber { clause: 0, .. })
        ));
        let bad_unit = "Walking speed is 1 m/s, number of steps per minute is 2, \
                        time taken by the right step is 3 sec, time taken by the left step is 4 sec.";
        assert!(matches!(
            parse_sentence(bad_unit),
            Err(GaitParamError::WrongUnit { clause: 0, .. })
        ));
    }

    #[test]
    fn render_parse_round_trip_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let table = ParameterTable::builtin();
        let all_ids: Vec<u8> = table.ids().collect();
        for _ in 0..250 {
            // four distinct random ids
            let mut ids = all_ids.clone();
            for i in 0..4 {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            let mut four: Vec<u8> = ids[..4].to_vec();
            four.sort_unstable();
            let combo = ParameterCombination::new(four.clone()).unwrap();
            let mut values = GaitParameterSet::new("s", 0);
            for &id in &four {
                values.set(id, rng.gen_range(-500.0..500.0)).unwrap();
            }
            let text = render_sentence(&combo, &values).unwrap();
            let (c2, v2) = parse_sentence(&text).unwrap();
            assert_eq!(c2.ids(), combo.ids());
            for &id in &four {
                let delta = (v2.get(id).unwrap() - values.get(id).unwrap()).abs();
                assert!(delta <= 5e-4, "id {id}: delta {delta}");
            }
            // fixed point: parse -> render reproduces the text exactly
            let text2 = render_sentence(&c2, &v2).unwrap();
            assert_eq!(text, text2);
        }
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.84), "0.84");
        assert_eq!(format_value(92.9), "92.9");
        assert_eq!(format_value(0.655), "0.655");
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-0.0001), "0");
        assert_eq!(format_value(12.0), "12");
        assert_eq!(format_value(-3.5), "-3.5");
    }

    #[test]
    fn parameter_table_io_round_trip() {
        let rows = synthetic_rows(41, 29, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.tsv");
        write_parameter_table(&rows, &path).unwrap();
        let back = read_parameter_table(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn partial_rows_survive_io() {
        let mut row = GaitParameterSet::new("solo", 2);
        row.set(1, 0.9).unwrap();
        row.set(17, 33.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.tsv");
        write_parameter_table(std::slice::from_ref(&row), &path).unwrap();
        let back = read_parameter_table(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], row);
        assert_eq!(back[0].get(2), None);
    }
}
