// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directional projection ablation and the probe comparisons built on it.
//!
//! Ablating a direction `u` replaces every activation `h` at a layer by
//! `h - (h·u) u` and re-measures separation there. A width-`w` ablation uses
//! the sign-aligned average of the directions at `w` consecutive layers and
//! projects it out at each of those layers; the retained percentage is the
//! mean of the per-layer `ablated / baseline` separation ratios. Windows that
//! would run past the final layer are truncated.

mod controls;
mod propagator;
mod relay;

pub use controls::{
    depth_control_patches, depth_matched_control, random_direction_control, DepthMatchedControl, RandomControl,
};
pub use propagator::{
    write_patch_plan, write_patched_dump, DumpPropagator, Patch, PlannedDump, PlannedPatch, Propagator,
    PropagatorError, RelaySpec, RelayStage, SyntheticRelay, PATCHES_ANNOTATION, PATCH_PLAN_NAME,
};
pub use relay::{subset_permutation, LayerReduction, RelayReport, SubsetOutcome, MAX_RELAY_NODES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{ablation_width, peak_layer, DetectError, Gem, WidthDecision, WidthRule, DEFAULT_WIDTH};
use crate::geometry::{class_moments, l2_norm, separation_from_moments, GeometryError, Trajectory, UnitVector};
use crate::store::ActivationSet;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("dimension mismatch: vector has {vector}, direction has {direction}")]
    DimensionMismatch { vector: usize, direction: usize },
    #[error("window [{start}, {start}+{width}) exceeds {n_layers} layers")]
    WindowOutOfRange { start: usize, width: usize, n_layers: usize },
    #[error("direction undefined at layer {layer} inside the ablation window")]
    UndefinedDirectionInWindow { layer: usize },
    #[error("window-averaged direction at layer {start} cancels out")]
    DegenerateAverage { start: usize },
    #[error("baseline separation at layer {layer} is zero or undefined")]
    ZeroBaseline { layer: usize },
    #[error("concept-direction reduction {reduction_pct}% is not positive; pair excluded")]
    ExcludedZeroReduction { reduction_pct: f64 },
    #[error("no post-zone candidate layer distinct from the handoff layer")]
    NoCandidate,
    #[error("relay analysis needs between 1 and {max} nodes, got {got}")]
    TooManyNodes { got: usize, max: usize },
    #[error("propagator failure: {0}")]
    PropagatorFailure(#[from] PropagatorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Where an ablation direction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    Handoff,
    Peak,
    ControlLayer,
    RandomSeed(u32),
}

/// Layer at which separation was re-measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasuredAt {
    ProbeLayer,
    FinalLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub baseline: f64,
    pub ablated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub probe_layer: usize,
    pub width: usize,
    pub direction_source: DirectionSource,
    /// Mean baseline separation over the measured layers.
    pub baseline_separation: f64,
    /// Mean ablated separation over the measured layers.
    pub ablated_separation: f64,
    pub retained_pct: f64,
    pub measured_at: MeasuredAt,
    pub per_layer: Vec<LayerScore>,
}

impl AblationRecord {
    /// Ablation increased separation (retained above 100%).
    pub fn is_degenerate(&self) -> bool {
        self.retained_pct > 100.0
    }

    pub fn reduction_pct(&self) -> f64 {
        100.0 - self.retained_pct
    }

    pub(crate) fn from_scores(
        probe_layer: usize,
        width: usize,
        direction_source: DirectionSource,
        measured_at: MeasuredAt,
        per_layer: Vec<LayerScore>,
    ) -> Self {
        let n = per_layer.len() as f64;
        let mean = |f: fn(&LayerScore) -> f64| per_layer.iter().map(f).sum::<f64>() / n;
        let retained = per_layer.iter().map(|s| s.ablated / s.baseline).sum::<f64>() / n;
        AblationRecord {
            probe_layer,
            width,
            direction_source,
            baseline_separation: mean(|s| s.baseline),
            ablated_separation: mean(|s| s.ablated),
            retained_pct: 100.0 * retained,
            measured_at,
            per_layer,
        }
    }
}

/// `h - (h·u) u`.
pub fn project_out(h: &[f64], u: &UnitVector) -> Result<Vec<f64>, AblationError> {
    if h.len() != u.dim() {
        return Err(AblationError::DimensionMismatch {
            vector: h.len(),
            direction: u.dim(),
        });
    }
    let u = u.as_slice();
    let c: f64 = h.iter().zip(u).map(|(a, b)| a * b).sum();
    Ok(h.iter().zip(u).map(|(a, b)| a - c * b).collect())
}

/// Projects `u` out of every row of a flattened `[pairs][dim]` block.
pub(crate) fn project_rows<T: Copy + Into<f64>>(rows: &[T], u: &[f64]) -> Vec<f64> {
    let dim = u.len();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.chunks_exact(dim) {
        let c: f64 = row.iter().zip(u).map(|(&a, b)| a.into() * b).sum();
        out.extend(row.iter().zip(u).map(|(&a, b)| a.into() - c * b));
    }
    out
}

/// Window length after truncation at the final layer.
pub fn effective_width(start: usize, width: usize, n_layers: usize) -> usize {
    width.min(n_layers.saturating_sub(start)).max(1)
}

/// Sign-aligned mean of the directions in `[start, start + width)`,
/// renormalized. Width 1 returns the start direction unchanged.
pub fn window_direction(traj: &Trajectory, start: usize, width: usize) -> Result<UnitVector, AblationError> {
    if width == 0 || start + width > traj.n_layers() {
        return Err(AblationError::WindowOutOfRange {
            start,
            width,
            n_layers: traj.n_layers(),
        });
    }
    let anchor = traj
        .direction(start)
        .ok_or(AblationError::UndefinedDirectionInWindow { layer: start })?;
    if width == 1 {
        return Ok(anchor.clone());
    }
    let mut sum = vec![0.0; anchor.dim()];
    for layer in start..start + width {
        let u = traj
            .direction(layer)
            .ok_or(AblationError::UndefinedDirectionInWindow { layer })?;
        let sign = if u.dot(anchor) < 0.0 { -1.0 } else { 1.0 };
        sum.iter_mut().zip(u.as_slice()).for_each(|(s, x)| *s += sign * x);
    }
    if l2_norm(&sum) <= 1e-12 {
        return Err(AblationError::DegenerateAverage { start });
    }
    UnitVector::new(sum).ok_or(AblationError::DegenerateAverage { start })
}

/// Separation after projecting `u` out of both classes at one layer.
///
/// If all within-class variance lay along `u`, the ablated classes are
/// points; separation is then 0 when their centroids coincide too.
pub(crate) fn ablated_separation<T: Copy + Into<f64>>(
    pos: &[T],
    neg: &[T],
    u: &UnitVector,
    layer: usize,
) -> Result<f64, AblationError> {
    let dim = u.dim();
    if !pos.len().is_multiple_of(dim) || !neg.len().is_multiple_of(dim) {
        return Err(AblationError::DimensionMismatch {
            vector: pos.len(),
            direction: dim,
        });
    }
    let p = class_moments(&project_rows(pos, u.as_slice()), dim);
    let n = class_moments(&project_rows(neg, u.as_slice()), dim);
    match separation_from_moments(&p, &n, layer) {
        Ok(s) => Ok(s),
        Err(GeometryError::ZeroVariance { .. }) => {
            let gap: f64 = p.mean.iter().zip(&n.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if gap <= 1e-12 * (dim as f64).sqrt() {
                Ok(0.0)
            } else {
                Err(GeometryError::ZeroVariance { layer }.into())
            }
        }
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn baseline_separation(set: &ActivationSet, layer: usize) -> Result<f64, AblationError> {
    let d = set.hidden_dim();
    let p = class_moments(set.pos().layer(layer), d);
    let n = class_moments(set.neg().layer(layer), d);
    match separation_from_moments(&p, &n, layer) {
        Ok(s) if s > 0.0 => Ok(s),
        _ => Err(AblationError::ZeroBaseline { layer }),
    }
}

/// Projects `u` out at each layer of the window and scores the retained
/// separation, measured within each window layer.
pub fn ablate_and_score(
    set: &ActivationSet,
    probe_layer: usize,
    width: usize,
    u: &UnitVector,
    source: DirectionSource,
) -> Result<AblationRecord, AblationError> {
    let n_layers = set.n_layers();
    if width == 0 || probe_layer + width > n_layers {
        return Err(AblationError::WindowOutOfRange {
            start: probe_layer,
            width,
            n_layers,
        });
    }
    if u.dim() != set.hidden_dim() {
        return Err(AblationError::DimensionMismatch {
            vector: set.hidden_dim(),
            direction: u.dim(),
        });
    }
    let per_layer = (probe_layer..probe_layer + width)
        .map(|layer| {
            let baseline = baseline_separation(set, layer)?;
            let ablated = ablated_separation(set.pos().layer(layer), set.neg().layer(layer), u, layer)?;
            Ok(LayerScore {
                layer,
                baseline,
                ablated,
            })
        })
        .collect::<Result<Vec<_>, AblationError>>()?;
    Ok(AblationRecord::from_scores(
        probe_layer,
        width,
        source,
        MeasuredAt::ProbeLayer,
        per_layer,
    ))
}

/// Width decision plus the window actually used at `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub layer: usize,
    pub decision: WidthDecision,
    pub width: usize,
}

pub fn plan_window(layer: usize, n_layers: usize, rule: &WidthRule) -> WindowPlan {
    let decision = ablation_width(layer as f64 / n_layers as f64, n_layers, rule);
    WindowPlan {
        layer,
        decision,
        width: effective_width(layer, decision.width, n_layers),
    }
}

/// Probe extracted over a planned window and scored there.
pub(crate) fn probe_at(
    set: &ActivationSet,
    traj: &Trajectory,
    plan: &WindowPlan,
    source: DirectionSource,
) -> Result<(UnitVector, AblationRecord), AblationError> {
    let u = window_direction(traj, plan.layer, plan.width)?;
    let record = ablate_and_score(set, plan.layer, plan.width, &u, source)?;
    Ok((u, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    HandoffBetter,
    PeakBetter,
    Tie,
}

impl Outcome {
    pub fn from_delta(delta_pp: f64) -> Self {
        if delta_pp > 0.0 {
            Outcome::HandoffBetter
        } else if delta_pp < 0.0 {
            Outcome::PeakBetter
        } else {
            Outcome::Tie
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub model_id: String,
    pub concept: String,
    pub handoff_record: AblationRecord,
    pub peak_record: AblationRecord,
    pub handoff_window: WindowPlan,
    pub peak_window: WindowPlan,
    pub outcome: Outcome,
    /// Peak retained minus handoff retained, in percentage points.
    pub delta_pp: f64,
}

impl ComparisonRecord {
    pub fn is_degenerate(&self) -> bool {
        self.handoff_record.is_degenerate()
    }
}

/// Handoff probe vs peak-layer probe, each scored at its own layer with the
/// width rule evaluated at its own relative depth. Lower retained wins; only
/// exactly equal retained percentages tie.
pub fn compare_handoff_vs_peak(
    set: &ActivationSet,
    traj: &Trajectory,
    gem: &Gem,
    rule: &WidthRule,
) -> Result<ComparisonRecord, AblationError> {
    rule.validate()?;
    let n = set.n_layers();
    let handoff_window = plan_window(gem.handoff_layer, n, rule);
    let peak_window = plan_window(peak_layer(traj)?, n, rule);
    let (_, handoff_record) = probe_at(set, traj, &handoff_window, DirectionSource::Handoff)?;
    let (_, peak_record) = probe_at(set, traj, &peak_window, DirectionSource::Peak)?;
    let delta_pp = peak_record.retained_pct - handoff_record.retained_pct;
    Ok(ComparisonRecord {
        model_id: set.model_id().to_owned(),
        concept: set.concept().to_owned(),
        handoff_record,
        peak_record,
        handoff_window,
        peak_window,
        outcome: Outcome::from_delta(delta_pp),
        delta_pp,
    })
}

/// Near-final rule vs the fixed default width at the handoff layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthComparison {
    pub triggered: bool,
    pub adaptive_width: usize,
    pub fixed_width: usize,
    pub adaptive_retained_pct: f64,
    pub fixed_retained_pct: f64,
    /// Fixed retained minus adaptive retained; positive means the rule helped.
    pub delta_pp: f64,
}

pub fn compare_adaptive_width(
    set: &ActivationSet,
    traj: &Trajectory,
    gem: &Gem,
    rule: &WidthRule,
) -> Result<WidthComparison, AblationError> {
    rule.validate()?;
    let n = set.n_layers();
    let adaptive = plan_window(gem.handoff_layer, n, rule);
    let (_, adaptive_record) = probe_at(set, traj, &adaptive, DirectionSource::Handoff)?;
    let fixed_width = effective_width(gem.handoff_layer, DEFAULT_WIDTH, n);
    let fixed_retained = if fixed_width == adaptive.width {
        adaptive_record.retained_pct
    } else {
        let u = window_direction(traj, gem.handoff_layer, fixed_width)?;
        ablate_and_score(set, gem.handoff_layer, fixed_width, &u, DirectionSource::Handoff)?.retained_pct
    };
    Ok(WidthComparison {
        triggered: adaptive.decision.triggered,
        adaptive_width: adaptive.width,
        fixed_width,
        adaptive_retained_pct: adaptive_record.retained_pct,
        fixed_retained_pct: fixed_retained,
        delta_pp: fixed_retained - adaptive_record.retained_pct,
    })
}
