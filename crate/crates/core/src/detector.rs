// SPDX-License-Identifier: MIT OR Apache-2.0

//! Handoff detection on a concept trajectory.
//!
//! The assembly zone ends at the last layer of the final run of consecutive
//! layers whose angular velocity exceeds `epsilon`; the handoff layer is the
//! next layer, clamped to the final layer. A trajectory that never rotates
//! above `epsilon` gets `caz_end = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{entry_exit_cosine, handoff_cosine, Trajectory, UnitVector};

/// Angular-velocity threshold for the zone end. Treated as a fixed
/// implementation detail; exposed for sensitivity sweeps only.
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Minimum peak prominence, as a fraction of the maximum separation.
pub const DEFAULT_PROMINENCE_FRACTION: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("trajectory has no two consecutive defined directions")]
    NoDefinedDirections,
    #[error("settled direction undefined at handoff layer {layer}")]
    UndefinedSettledDirection { layer: usize },
    #[error("no layer has a defined separation score")]
    NoDefinedSeparation,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Detected geometric evolution map for one (model, concept) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gem {
    /// Entry layer of the final rotation run: the layer preceding its first
    /// above-threshold step. Informational.
    pub caz_start: usize,
    pub caz_end: usize,
    pub handoff_layer: usize,
    pub n_layers: usize,
    pub relative_depth: f64,
    /// Signed entry-exit cosine; `None` when a boundary direction is undefined.
    pub eec: Option<f64>,
    /// Cosine of the settled direction with the final-layer direction.
    pub handoff_cos: Option<f64>,
    pub settled_direction: UnitVector,
}

/// Boundaries of the final above-threshold rotation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationRun {
    /// First layer whose angular velocity exceeds epsilon.
    pub first_step: usize,
    pub last_step: usize,
}

fn check_epsilon(epsilon: f64) -> Result<(), DetectError> {
    if !(epsilon.is_finite() && (0.0..1.0).contains(&epsilon)) {
        return Err(DetectError::InvalidParameter(format!("epsilon must be in [0, 1), got {epsilon}")));
    }
    Ok(())
}

/// Final maximal run of layers with `ω > epsilon`; undefined ω breaks runs.
pub fn final_rotation_run(traj: &Trajectory, epsilon: f64) -> Result<Option<RotationRun>, DetectError> {
    check_epsilon(epsilon)?;
    let omega = traj.angular_velocity();
    if omega.iter().all(Option::is_none) {
        return Err(DetectError::NoDefinedDirections);
    }
    let last_step = match (1..omega.len()).rev().find(|&l| matches!(omega[l], Some(w) if w > epsilon)) {
        Some(l) => l,
        None => return Ok(None),
    };
    let mut first_step = last_step;
    while first_step > 1 && matches!(omega[first_step - 1], Some(w) if w > epsilon) {
        first_step -= 1;
    }
    Ok(Some(RotationRun { first_step, last_step }))
}

pub fn detect_caz_end(traj: &Trajectory, epsilon: f64) -> Result<usize, DetectError> {
    Ok(final_rotation_run(traj, epsilon)?.map_or(0, |r| r.last_step))
}

pub fn handoff_layer_for(caz_end: usize, n_layers: usize) -> usize {
    (caz_end + 1).min(n_layers - 1)
}

pub fn detect_handoff(traj: &Trajectory, epsilon: f64) -> Result<Gem, DetectError> {
    let run = final_rotation_run(traj, epsilon)?;
    let (caz_start, caz_end) = run.map_or((0, 0), |r| (r.first_step - 1, r.last_step));
    let n_layers = traj.n_layers();
    let handoff_layer = handoff_layer_for(caz_end, n_layers);
    let settled_direction = traj
        .direction(handoff_layer)
        .cloned()
        .ok_or(DetectError::UndefinedSettledDirection { layer: handoff_layer })?;
    Ok(Gem {
        caz_start,
        caz_end,
        handoff_layer,
        n_layers,
        relative_depth: handoff_layer as f64 / n_layers as f64,
        eec: entry_exit_cosine(traj, caz_start, caz_end).ok(),
        handoff_cos: handoff_cosine(traj, handoff_layer).ok(),
        settled_direction,
    })
}

/// Near-final width rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthRule {
    pub threshold: f64,
    pub depth_corrected: bool,
    pub min_layers: usize,
}

impl Default for WidthRule {
    fn default() -> Self {
        WidthRule {
            threshold: 0.85,
            depth_corrected: false,
            min_layers: 20,
        }
    }
}

impl WidthRule {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DetectError::InvalidParameter(format!(
                "near-final threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.min_layers == 0 {
            return Err(DetectError::InvalidParameter("min_layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthDecision {
    pub width: usize,
    /// The near-final rule fired (width 1).
    pub triggered: bool,
    /// Depth was past the threshold but the model is too shallow for the
    /// depth-corrected rule.
    pub depth_suppressed: bool,
}

pub const DEFAULT_WIDTH: usize = 3;

pub fn ablation_width(relative_depth: f64, n_layers: usize, rule: &WidthRule) -> WidthDecision {
    let near_final = relative_depth > rule.threshold;
    let deep_enough = !rule.depth_corrected || n_layers >= rule.min_layers;
    let triggered = near_final && deep_enough;
    WidthDecision {
        width: if triggered { 1 } else { DEFAULT_WIDTH },
        triggered,
        depth_suppressed: near_final && !deep_enough,
    }
}

/// One handoff event of a multi-node relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemNode {
    pub peak_layer: usize,
    pub node_handoff: usize,
    pub node_direction: UnitVector,
}

/// Layer of maximum separation; ties go to the lower layer.
pub fn peak_layer(traj: &Trajectory) -> Result<usize, DetectError> {
    let mut best: Option<(usize, f64)> = None;
    for (l, s) in traj.separation().iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((l, s));
            }
        }
    }
    best.map(|(l, _)| l).ok_or(DetectError::NoDefinedSeparation)
}

/// Topographic prominence of `values[i]` in a sequence of defined values.
/// A side with no layers does not constrain the reference level.
fn prominence(values: &[f64], i: usize) -> f64 {
    let h = values[i];
    let side_min = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut lowest: Option<f64> = None;
        for j in range {
            if values[j] > h {
                break;
            }
            lowest = Some(lowest.map_or(values[j], |m: f64| m.min(values[j])));
        }
        lowest
    };
    let left = side_min(&mut (0..i).rev());
    let right = side_min(&mut (i + 1..values.len()));
    let reference = match (left, right) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => h,
    };
    h - reference
}

/// Inventory of handoff nodes: one per prominent separation peak, keyed by
/// the first subsequent layer that settles (`ω ≤ epsilon`).
pub fn detect_nodes(traj: &Trajectory, epsilon: f64, prominence_fraction: f64) -> Result<Vec<GemNode>, DetectError> {
    check_epsilon(epsilon)?;
    if !(0.0..=1.0).contains(&prominence_fraction) {
        return Err(DetectError::InvalidParameter(format!(
            "prominence fraction must be in [0, 1], got {prominence_fraction}"
        )));
    }
    let defined: Vec<(usize, f64)> = traj
        .separation()
        .iter()
        .enumerate()
        .filter_map(|(l, s)| s.map(|s| (l, s)))
        .collect();
    if defined.len() < 2 {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = defined.iter().map(|&(_, s)| s).collect();
    let max_s = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = traj.n_layers() - 1;
    let omega = traj.angular_velocity();

    // (node_handoff, peak_layer, peak separation)
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..values.len() {
        let above_left = i == 0 || values[i] > values[i - 1];
        let above_right = i + 1 == values.len() || values[i] > values[i + 1];
        if !(above_left && above_right) {
            continue;
        }
        if prominence(&values, i) <= 0.0 || prominence(&values, i) < prominence_fraction * max_s {
            continue;
        }
        let peak = defined[i].0;
        let handoff = (peak + 1..=last)
            .find(|&l| matches!(omega[l], Some(w) if w <= epsilon))
            .unwrap_or(last);
        candidates.push((handoff, peak, values[i]));
    }
    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(b.2.total_cmp(&a.2)).then(a.1.cmp(&b.1)));
    candidates.dedup_by_key(|c| c.0);

    Ok(candidates
        .into_iter()
        .filter(|&(handoff, peak, _)| handoff > peak)
        .filter_map(|(handoff, peak, _)| {
            traj.direction(handoff).map(|u| GemNode {
                peak_layer: peak,
                node_handoff: handoff,
                node_direction: u.clone(),
            })
        })
        .collect())
}
