// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus discovery and the parallel, resumable study run.
//!
//! A corpus is any directory tree whose leaves are activation directories.
//! Each `(model, concept)` pair is analyzed end to end by one worker and
//! written to `pairs/<model>__<concept>.json`; the study summary is folded
//! from the per-pair reports in sorted order, so the output bytes do not
//! depend on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::ablation::{
    compare_adaptive_width, compare_handoff_vs_peak, depth_matched_control, random_direction_control, AblationError,
    ComparisonRecord, DepthMatchedControl, MeasuredAt, RandomControl, WidthComparison,
};
use crate::detector::{detect_handoff, peak_layer, DetectError, Gem, WidthRule, DEFAULT_EPSILON};
use crate::geometry::{compute_trajectory, Trajectory};
use crate::registry::{Cohort, ModelMeta};
use crate::stats::{aggregate_study, StatsError, StudySummary};
use crate::store::{load_activation_set, read_manifest, write_atomic, ActivationSet, StoreError, MANIFEST_NAME};

pub const PAIRS_DIR: &str = "pairs";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("corpus index is empty")]
    EmptyIndex,
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("walking {path}: {reason}")]
    Walk { path: PathBuf, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("malformed study output {path}: {reason}")]
    BadOutput { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub model_id: String,
    pub concept: String,
    pub path: PathBuf,
    pub n_layers: usize,
    pub n_pairs: usize,
    pub hidden_dim: usize,
}

/// A directory that looked like an activation directory but was not used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub registry: Vec<ModelMeta>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Finds every directory under `root` holding a manifest. Invalid
/// manifests, unregistered models and duplicate pairs become diagnostics.
pub fn discover_corpus(root: &Path, registry: &[ModelMeta]) -> Result<CorpusIndex, PipelineError> {
    if !root.is_dir() {
        return Err(PipelineError::MissingRoot(root.to_path_buf()));
    }
    let known: BTreeMap<&str, &ModelMeta> = registry.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let mut found: BTreeMap<(String, String), CorpusEntry> = BTreeMap::new();
    let mut diagnostics = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| PipelineError::Walk {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            reason: e.to_string(),
        })?;
        if !item.file_type().is_file() || item.file_name() != MANIFEST_NAME {
            continue;
        }
        let dir = item.path().parent().expect("manifest has a parent").to_path_buf();
        let manifest = match read_manifest(&dir) {
            Ok(m) => m,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    path: dir,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if !known.contains_key(manifest.model_id.as_str()) {
            diagnostics.push(Diagnostic {
                path: dir,
                reason: format!("model {} is not in the registry", manifest.model_id),
            });
            continue;
        }
        let key = (manifest.model_id.clone(), manifest.concept.clone());
        if let Some(first) = found.get(&key) {
            diagnostics.push(Diagnostic {
                path: dir,
                reason: format!(
                    "duplicate pair {}/{}; already found at {}",
                    key.0,
                    key.1,
                    first.path.display()
                ),
            });
            continue;
        }
        found.insert(
            key,
            CorpusEntry {
                model_id: manifest.model_id,
                concept: manifest.concept,
                path: dir,
                n_layers: manifest.n_layers,
                n_pairs: manifest.n_pairs,
                hidden_dim: manifest.hidden_dim,
            },
        );
    }
    Ok(CorpusIndex {
        entries: found.into_values().collect(),
        registry: registry.to_vec(),
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Controls {
    pub random: bool,
    pub depth_matched: bool,
    pub adaptive_width: bool,
}

impl Default for Controls {
    fn default() -> Self {
        Controls {
            random: true,
            depth_matched: true,
            adaptive_width: true,
        }
    }
}

/// Analysis settings. Only the fields that change results enter the
/// fingerprint; `output_dir`, `workers` and `force` do not.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epsilon: f64,
    pub width_rule: WidthRule,
    pub n_random_seeds: usize,
    pub rng_seed: u64,
    pub controls: Controls,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    /// Recompute pairs even when a matching output exists.
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon: DEFAULT_EPSILON,
            width_rule: WidthRule::default(),
            n_random_seeds: 10,
            rng_seed: 0,
            controls: Controls::default(),
            output_dir: PathBuf::from("gem-study"),
            workers: 0,
            force: false,
        }
    }
}

/// The result-relevant part of a [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub epsilon: f64,
    pub width_rule: WidthRule,
    pub n_random_seeds: usize,
    pub rng_seed: u64,
    pub controls: Controls,
}

impl RunConfig {
    pub fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            epsilon: self.epsilon,
            width_rule: self.width_rule,
            n_random_seeds: self.n_random_seeds,
            rng_seed: self.rng_seed,
            controls: self.controls,
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.analysis()).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-pair RNG seed, independent of scheduling.
pub fn pair_seed(rng_seed: u64, model_id: &str, concept: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(concept.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Content hash of the manifest and both blobs.
pub fn input_digest(set: &ActivationSet) -> String {
    let mut h = Sha256::new();
    h.update(set.manifest().to_json().as_bytes());
    h.update(set.pos().to_le_bytes());
    h.update(set.neg().to_le_bytes());
    hex(&h.finalize())
}

/// Per-layer geometry for reports; directions are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub separation: Vec<Option<f64>>,
    pub angular_velocity: Vec<Option<f64>>,
    pub stability: Vec<Option<f64>>,
    pub cosine_to_final: Vec<Option<f64>>,
    pub max_angular_velocity: Option<f64>,
}

impl From<&Trajectory> for TrajectoryReport {
    fn from(t: &Trajectory) -> Self {
        TrajectoryReport {
            separation: t.separation().to_vec(),
            angular_velocity: t.angular_velocity().to_vec(),
            stability: t.stability().to_vec(),
            cosine_to_final: t.cosine_to_final(),
            max_angular_velocity: t.max_angular_velocity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemReport {
    #[serde(flatten)]
    pub gem: Gem,
    pub peak_layer: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlsReport {
    pub random: Option<RandomControl>,
    pub random_error: Option<String>,
    pub depth_matched: Option<DepthMatchedControl>,
    pub depth_matched_error: Option<String>,
    pub adaptive_width: Option<WidthComparison>,
    pub adaptive_width_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    Ok,
    /// Handoff ablation increased separation; excluded from aggregates.
    Degenerate,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatus {
    pub state: PairState,
    pub stage: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub model_id: String,
    pub concept: String,
    pub params: u64,
    pub cohort: Cohort,
    pub n_layers: usize,
    pub n_pairs: usize,
    pub hidden_dim: usize,
    pub pair_seed: u64,
    pub config_fingerprint: String,
    pub input_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairReport {
    pub meta: PairMeta,
    pub trajectory: Option<TrajectoryReport>,
    pub gem: Option<GemReport>,
    pub comparison: Option<ComparisonRecord>,
    pub controls: ControlsReport,
    pub status: PairStatus,
}

impl PairReport {
    pub fn file_name(model_id: &str, concept: &str) -> String {
        format!("{model_id}__{concept}.json")
    }
}

fn failed(stage: &str, e: impl std::fmt::Display) -> PairStatus {
    PairStatus {
        state: PairState::Failed,
        stage: Some(stage.to_owned()),
        error: Some(e.to_string()),
    }
}

/// Everything computed for one loaded pair: trajectory, handoff, probe
/// comparison and the enabled controls.
pub fn analyze_set(set: &ActivationSet, config: &AnalysisConfig, seed: u64, meta: PairMeta) -> PairReport {
    let traj = compute_trajectory(set);
    let mut report = PairReport {
        meta,
        trajectory: Some(TrajectoryReport::from(&traj)),
        gem: None,
        comparison: None,
        controls: ControlsReport::default(),
        status: PairStatus {
            state: PairState::Ok,
            stage: None,
            error: None,
        },
    };
    let gem = match detect_handoff(&traj, config.epsilon).and_then(|g| Ok((peak_layer(&traj)?, g))) {
        Ok((peak, gem)) => {
            report.gem = Some(GemReport {
                gem: gem.clone(),
                peak_layer: peak,
            });
            gem
        }
        Err(e) => {
            report.status = failed("detect", e);
            return report;
        }
    };
    match compare_handoff_vs_peak(set, &traj, &gem, &config.width_rule) {
        Ok(c) => {
            if c.is_degenerate() {
                report.status.state = PairState::Degenerate;
            }
            report.comparison = Some(c);
        }
        Err(e) => {
            report.status = failed("compare", e);
            return report;
        }
    }
    let c = &mut report.controls;
    let note = |e: AblationError| Some(e.to_string());
    if config.controls.random {
        match random_direction_control(set, &traj, &gem, &config.width_rule, config.n_random_seeds, seed) {
            Ok(r) => c.random = Some(r),
            Err(e) => c.random_error = note(e),
        }
    }
    if config.controls.depth_matched {
        match depth_matched_control(set, &traj, &gem, &config.width_rule, None) {
            Ok(r) => c.depth_matched = Some(r),
            Err(e) => c.depth_matched_error = note(e),
        }
    }
    if config.controls.adaptive_width {
        match compare_adaptive_width(set, &traj, &gem, &config.width_rule) {
            Ok(r) => c.adaptive_width = Some(r),
            Err(e) => c.adaptive_width_error = note(e),
        }
    }
    report
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

fn process_entry(
    entry: &CorpusEntry,
    meta: &ModelMeta,
    config: &RunConfig,
    fingerprint: &str,
    pairs_dir: &Path,
) -> Result<PairReport, PipelineError> {
    let seed = pair_seed(config.rng_seed, &entry.model_id, &entry.concept);
    let mut pair_meta = PairMeta {
        model_id: entry.model_id.clone(),
        concept: entry.concept.clone(),
        params: meta.params,
        cohort: meta.cohort,
        n_layers: entry.n_layers,
        n_pairs: entry.n_pairs,
        hidden_dim: entry.hidden_dim,
        pair_seed: seed,
        config_fingerprint: fingerprint.to_owned(),
        input_digest: None,
    };
    let out_path = pairs_dir.join(PairReport::file_name(&entry.model_id, &entry.concept));
    let report = match load_activation_set(&entry.path) {
        Err(e) => PairReport {
            meta: pair_meta,
            trajectory: None,
            gem: None,
            comparison: None,
            controls: ControlsReport::default(),
            status: failed("load", e),
        },
        Ok(set) => {
            let digest = input_digest(&set);
            if !config.force {
                if let Some(previous) = reusable(&out_path, fingerprint, &digest) {
                    return Ok(previous);
                }
            }
            pair_meta.input_digest = Some(digest);
            analyze_set(&set, &config.analysis(), seed, pair_meta)
        }
    };
    write_atomic(&out_path, &to_json_bytes(&report))?;
    Ok(report)
}

/// A previous report for the same input and configuration, if intact.
fn reusable(path: &Path, fingerprint: &str, digest: &str) -> Option<PairReport> {
    let text = fs::read_to_string(path).ok()?;
    let report: PairReport = serde_json::from_str(&text).ok()?;
    (report.meta.config_fingerprint == fingerprint && report.meta.input_digest.as_deref() == Some(digest))
        .then_some(report)
}

/// Near-final rule vs fixed width 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthTable {
    pub n_pairs: usize,
    pub triggered: usize,
    pub triggered_improved: usize,
    /// Mean delta over triggered pairs that improved.
    pub improved_mean_delta_pp: Option<f64>,
    pub triggered_mean_delta_pp: Option<f64>,
    pub untriggered: usize,
    pub untriggered_mean_delta_pp: Option<f64>,
    pub overall_mean_delta_pp: Option<f64>,
    /// Past the threshold but too shallow for the depth-corrected rule.
    pub depth_suppressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EecStats {
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub mean_abs: Option<f64>,
    pub frac_below_0_5: Option<f64>,
    pub frac_below_0_1: Option<f64>,
    /// Mean over pairs of the largest per-layer angular velocity.
    pub mean_max_angular_velocity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEec {
    pub model_id: String,
    pub n: usize,
    pub mean_eec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDepth {
    pub concept: String,
    pub n: usize,
    pub mean_relative_depth: Option<f64>,
    pub median_relative_depth: Option<f64>,
    pub mean_eec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffCosineStats {
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControlRow {
    pub cohort: Option<Cohort>,
    pub n_pairs: usize,
    pub mean_concept_reduction_pct: Option<f64>,
    pub mean_random_reduction_pct: Option<f64>,
    pub median_specificity_ratio: Option<f64>,
    pub median_z: Option<f64>,
    pub frac_beats_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControlSummary {
    pub overall: RandomControlRow,
    pub by_cohort: Vec<RandomControlRow>,
    /// Pairs without a positive concept reduction.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthControlSummary {
    pub n_pairs: usize,
    pub n_degenerate: usize,
    pub n_without_candidate: usize,
    pub gem_wins: usize,
    pub win_rate: Option<f64>,
    pub mean_advantage_pp: Option<f64>,
    pub measured_at: MeasuredAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub model_id: String,
    pub concept: String,
    pub stage: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: AnalysisConfig,
    pub config_fingerprint: String,
    pub n_entries: usize,
    pub n_ok: usize,
    pub n_degenerate: usize,
    pub n_failed: usize,
    pub failures: Vec<PairFailure>,
    pub discovery: Vec<Diagnostic>,
    pub comparison: StudySummary,
    pub adaptive_width: Option<WidthTable>,
    pub eec: EecStats,
    pub per_model_eec: Vec<ModelEec>,
    pub per_concept: Vec<ConceptDepth>,
    pub handoff_cosine: HandoffCosineStats,
    /// Pairs whose handoff layer precedes the separation peak.
    pub handoff_before_peak: usize,
    pub random_control: Option<RandomControlSummary>,
    pub depth_control: Option<DepthControlSummary>,
}

pub(crate) fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub(crate) fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn fraction(n: usize, of: usize) -> Option<f64> {
    (of > 0).then(|| n as f64 / of as f64)
}

fn random_row(cohort: Option<Cohort>, rows: &[&RandomControl]) -> RandomControlRow {
    let collect = |f: fn(&RandomControl) -> Option<f64>| rows.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
    RandomControlRow {
        cohort,
        n_pairs: rows.len(),
        mean_concept_reduction_pct: mean(&collect(|r| Some(r.concept_reduction_pct))),
        mean_random_reduction_pct: mean(&collect(|r| Some(r.mean_random_reduction_pct))),
        median_specificity_ratio: median(&collect(|r| r.specificity_ratio)),
        median_z: median(&collect(|r| r.z_score)),
        frac_beats_all: fraction(rows.iter().filter(|r| r.beats_all).count(), rows.len()),
    }
}

/// Folds sorted per-pair reports into the study tables.
pub fn summarize(
    reports: &[PairReport],
    registry: &[ModelMeta],
    config: &RunConfig,
    discovery: &[Diagnostic],
) -> Result<StudyReport, PipelineError> {
    let count = |s: PairState| reports.iter().filter(|r| r.status.state == s).count();
    let failures = reports
        .iter()
        .filter(|r| r.status.state == PairState::Failed)
        .map(|r| PairFailure {
            model_id: r.meta.model_id.clone(),
            concept: r.meta.concept.clone(),
            stage: r.status.stage.clone(),
            error: r.status.error.clone(),
        })
        .collect();
    let records: Vec<ComparisonRecord> = reports.iter().filter_map(|r| r.comparison.clone()).collect();
    let comparison = aggregate_study(&records, registry)?;
    let gems: Vec<(&PairReport, &GemReport)> = reports.iter().filter_map(|r| r.gem.as_ref().map(|g| (r, g))).collect();

    let widths: Vec<&WidthComparison> = reports
        .iter()
        .filter(|r| r.status.state == PairState::Ok)
        .filter_map(|r| r.controls.adaptive_width.as_ref())
        .collect();
    let adaptive_width = config.controls.adaptive_width.then(|| {
        let trig: Vec<f64> = widths.iter().filter(|w| w.triggered).map(|w| w.delta_pp).collect();
        let untrig: Vec<f64> = widths.iter().filter(|w| !w.triggered).map(|w| w.delta_pp).collect();
        let improved: Vec<f64> = trig.iter().copied().filter(|&d| d > 0.0).collect();
        let all: Vec<f64> = widths.iter().map(|w| w.delta_pp).collect();
        let suppressed = gems
            .iter()
            .filter(|(r, _)| r.status.state == PairState::Ok)
            .filter_map(|(r, _)| r.comparison.as_ref())
            .filter(|c| c.handoff_window.decision.depth_suppressed)
            .count();
        WidthTable {
            n_pairs: widths.len(),
            triggered: trig.len(),
            triggered_improved: improved.len(),
            improved_mean_delta_pp: mean(&improved),
            triggered_mean_delta_pp: mean(&trig),
            untriggered: untrig.len(),
            untriggered_mean_delta_pp: mean(&untrig),
            overall_mean_delta_pp: mean(&all),
            depth_suppressed: suppressed,
        }
    });

    let eecs: Vec<f64> = gems.iter().filter_map(|(_, g)| g.gem.eec).collect();
    let max_w: Vec<f64> = gems
        .iter()
        .filter_map(|(r, _)| r.trajectory.as_ref().and_then(|t| t.max_angular_velocity))
        .collect();
    let eec = EecStats {
        n: eecs.len(),
        mean: mean(&eecs),
        median: median(&eecs),
        mean_abs: mean(&eecs.iter().map(|e| e.abs()).collect::<Vec<_>>()),
        frac_below_0_5: fraction(eecs.iter().filter(|&&e| e < 0.5).count(), eecs.len()),
        frac_below_0_1: fraction(eecs.iter().filter(|&&e| e < 0.1).count(), eecs.len()),
        mean_max_angular_velocity: mean(&max_w),
    };

    let mut by_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_concept: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, g) in &gems {
        let e = by_model.entry(r.meta.model_id.as_str()).or_default();
        let c = by_concept.entry(r.meta.concept.as_str()).or_default();
        c.0.push(g.gem.relative_depth);
        if let Some(x) = g.gem.eec {
            e.push(x);
            c.1.push(x);
        }
    }
    let per_model_eec = by_model
        .into_iter()
        .map(|(m, v)| ModelEec {
            model_id: m.to_owned(),
            n: v.len(),
            mean_eec: mean(&v),
        })
        .collect();
    let per_concept = by_concept
        .into_iter()
        .map(|(c, (depths, e))| ConceptDepth {
            concept: c.to_owned(),
            n: depths.len(),
            mean_relative_depth: mean(&depths),
            median_relative_depth: median(&depths),
            mean_eec: mean(&e),
        })
        .collect();

    let cosines: Vec<f64> = gems.iter().filter_map(|(_, g)| g.gem.handoff_cos).collect();
    let handoff_cosine = HandoffCosineStats {
        n: cosines.len(),
        mean: mean(&cosines),
        median: median(&cosines),
        min: cosines.iter().copied().reduce(f64::min),
    };
    let handoff_before_peak = gems.iter().filter(|(_, g)| g.gem.handoff_layer < g.peak_layer).count();

    let cohort_of: BTreeMap<&str, Cohort> = registry.iter().map(|m| (m.model_id.as_str(), m.cohort)).collect();
    let random_control = config.controls.random.then(|| {
        let rows: Vec<(&PairReport, &RandomControl)> = reports
            .iter()
            .filter(|r| r.status.state == PairState::Ok)
            .filter_map(|r| r.controls.random.as_ref().map(|c| (r, c)))
            .collect();
        let excluded = reports
            .iter()
            .filter(|r| r.status.state == PairState::Ok && r.controls.random.is_none())
            .count();
        let all: Vec<&RandomControl> = rows.iter().map(|(_, c)| *c).collect();
        let mut by_cohort: BTreeMap<Cohort, Vec<&RandomControl>> = BTreeMap::new();
        for (r, c) in &rows {
            let cohort = cohort_of.get(r.meta.model_id.as_str()).copied().unwrap_or(r.meta.cohort);
            by_cohort.entry(cohort).or_default().push(c);
        }
        RandomControlSummary {
            overall: random_row(None, &all),
            by_cohort: by_cohort.into_iter().map(|(k, v)| random_row(Some(k), &v)).collect(),
            n_excluded: excluded,
        }
    });

    let depth_control = config.controls.depth_matched.then(|| {
        let ok: Vec<&PairReport> = reports.iter().filter(|r| r.comparison.is_some()).collect();
        let ctl: Vec<&DepthMatchedControl> = ok.iter().filter_map(|r| r.controls.depth_matched.as_ref()).collect();
        let used: Vec<&&DepthMatchedControl> = ctl.iter().filter(|c| !c.degenerate).collect();
        let wins = used.iter().filter(|c| c.gem_wins).count();
        DepthControlSummary {
            n_pairs: used.len(),
            n_degenerate: ctl.len() - used.len(),
            n_without_candidate: ok.iter().filter(|r| r.controls.depth_matched.is_none()).count(),
            gem_wins: wins,
            win_rate: fraction(wins, used.len()),
            mean_advantage_pp: mean(&used.iter().map(|c| c.advantage_pp).collect::<Vec<_>>()),
            measured_at: MeasuredAt::ProbeLayer,
        }
    });

    Ok(StudyReport {
        config: config.analysis(),
        config_fingerprint: config.fingerprint(),
        n_entries: reports.len(),
        n_ok: count(PairState::Ok),
        n_degenerate: count(PairState::Degenerate),
        n_failed: count(PairState::Failed),
        failures,
        discovery: discovery.to_vec(),
        comparison,
        adaptive_width,
        eec,
        per_model_eec,
        per_concept,
        handoff_cosine,
        handoff_before_peak,
        random_control,
        depth_control,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_CSV_COLUMNS: [&str; 25] = [
    "model_id",
    "concept",
    "status",
    "n_layers",
    "caz_start",
    "caz_end",
    "handoff_layer",
    "relative_depth",
    "peak_layer",
    "eec",
    "handoff_cos",
    "handoff_width",
    "peak_width",
    "handoff_retained_pct",
    "peak_retained_pct",
    "delta_pp",
    "outcome",
    "adaptive_triggered",
    "adaptive_delta_pp",
    "random_concept_reduction_pct",
    "random_mean_reduction_pct",
    "random_beats_all",
    "random_empirical_p",
    "control_layer",
    "control_advantage_pp",
];

/// One row per pair, in the report order.
pub fn summary_csv(reports: &[PairReport]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(SUMMARY_CSV_COLUMNS).expect("in-memory write");
    for r in reports {
        let g = r.gem.as_ref();
        let c = r.comparison.as_ref();
        let w = r.controls.adaptive_width.as_ref();
        let rc = r.controls.random.as_ref();
        let dc = r.controls.depth_matched.as_ref();
        let outcome = c.map(|c| serde_json::to_value(c.outcome).expect("enum serializes"));
        let state = serde_json::to_value(r.status.state).expect("enum serializes");
        let fields = [
            r.meta.model_id.clone(),
            r.meta.concept.clone(),
            state.as_str().unwrap_or_default().to_owned(),
            r.meta.n_layers.to_string(),
            opt(g.map(|g| g.gem.caz_start)),
            opt(g.map(|g| g.gem.caz_end)),
            opt(g.map(|g| g.gem.handoff_layer)),
            opt(g.map(|g| g.gem.relative_depth)),
            opt(g.map(|g| g.peak_layer)),
            opt(g.and_then(|g| g.gem.eec)),
            opt(g.and_then(|g| g.gem.handoff_cos)),
            opt(c.map(|c| c.handoff_window.width)),
            opt(c.map(|c| c.peak_window.width)),
            opt(c.map(|c| c.handoff_record.retained_pct)),
            opt(c.map(|c| c.peak_record.retained_pct)),
            opt(c.map(|c| c.delta_pp)),
            outcome.as_ref().and_then(|o| o.as_str()).unwrap_or_default().to_owned(),
            opt(w.map(|w| w.triggered)),
            opt(w.map(|w| w.delta_pp)),
            opt(rc.map(|x| x.concept_reduction_pct)),
            opt(rc.map(|x| x.mean_random_reduction_pct)),
            opt(rc.map(|x| x.beats_all)),
            opt(rc.map(|x| x.empirical_p)),
            opt(dc.map(|x| x.control_layer)),
            opt(dc.map(|x| x.advantage_pp)),
        ];
        out.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

/// Runs every entry, writes per-pair reports, `summary.json` and
/// `summary.csv`, and returns the summary. Per-pair failures are recorded,
/// never fatal.
pub fn run_study(index: &CorpusIndex, config: &RunConfig) -> Result<StudyReport, PipelineError> {
    if index.entries.is_empty() {
        return Err(PipelineError::EmptyIndex);
    }
    config.width_rule.validate()?;
    let pairs_dir = config.output_dir.join(PAIRS_DIR);
    fs::create_dir_all(&pairs_dir).map_err(io_err(&pairs_dir))?;
    let meta: BTreeMap<&str, &ModelMeta> = index.registry.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let fingerprint = config.fingerprint();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    let reports = pool.install(|| {
        index
            .entries
            .par_iter()
            .map(|entry| {
                let m = meta.get(entry.model_id.as_str()).ok_or_else(|| {
                    PipelineError::Stats(StatsError::UnknownModel(entry.model_id.clone()))
                })?;
                process_entry(entry, m, config, &fingerprint, &pairs_dir)
            })
            .collect::<Result<Vec<PairReport>, PipelineError>>()
    })?;
    let summary = summarize(&reports, &index.registry, config, &index.diagnostics)?;
    let json_path = config.output_dir.join(SUMMARY_JSON);
    write_atomic(&json_path, &to_json_bytes(&summary))?;
    write_atomic(&config.output_dir.join(SUMMARY_CSV), summary_csv(&reports).as_bytes())?;
    Ok(summary)
}

/// Reads a finished study: its summary and every per-pair report, sorted.
pub fn load_study(dir: &Path) -> Result<(StudyReport, Vec<PairReport>), PipelineError> {
    let bad = |path: &Path, reason: String| PipelineError::BadOutput {
        path: path.to_path_buf(),
        reason,
    };
    let summary_path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
    let summary: StudyReport = serde_json::from_str(&text).map_err(|e| bad(&summary_path, e.to_string()))?;
    let pairs_dir = dir.join(PAIRS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&pairs_dir)
        .map_err(io_err(&pairs_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<PairReport>(&text).map_err(|e| bad(p, e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    reports.sort_by(|a, b| (&a.meta.model_id, &a.meta.concept).cmp(&(&b.meta.model_id, &b.meta.concept)));
    Ok((summary, reports))
}
