// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subset-permutation ablation over a concept's relay nodes.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::propagator::{Patch, Propagator};
use super::{baseline_separation, AblationError};
use crate::detector::GemNode;
use crate::geometry::separation_score;

/// Largest node inventory accepted (4095 subsets).
pub const MAX_RELAY_NODES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReduction {
    pub layer: usize,
    /// `1 - S_after / S_before`.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetOutcome {
    /// Indices into [`RelayReport::nodes`], ascending.
    pub nodes: Vec<usize>,
    pub reductions: Vec<LayerReduction>,
}

impl SubsetOutcome {
    pub fn reduction_at(&self, layer: usize) -> Option<f64> {
        self.reductions.iter().find(|r| r.layer == layer).map(|r| r.reduction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayReport {
    pub concept: String,
    pub nodes: Vec<GemNode>,
    pub measure_layers: Vec<usize>,
    pub dominant_node: usize,
    pub synergy: f64,
    /// Largest reduction at the deepest node's handoff among subsets that
    /// leave the deepest node intact. Absent for a single node.
    pub cross_disruption: Option<f64>,
    /// One entry per non-empty subset, ordered by bitmask.
    pub per_subset: Vec<SubsetOutcome>,
}

impl RelayReport {
    pub fn subset(&self, nodes: &[usize]) -> Option<&SubsetOutcome> {
        self.per_subset.iter().find(|s| s.nodes == nodes)
    }
}

/// Ablates every non-empty subset of `nodes` at once through `propagator`
/// and records separation reductions at the requested layers, at every node
/// handoff and at the final layer.
pub fn subset_permutation(
    nodes: &[GemNode],
    propagator: &dyn Propagator,
    measure_layers: &[usize],
) -> Result<RelayReport, AblationError> {
    if nodes.is_empty() || nodes.len() > MAX_RELAY_NODES {
        return Err(AblationError::TooManyNodes {
            got: nodes.len(),
            max: MAX_RELAY_NODES,
        });
    }
    let base = propagator.baseline();
    let n_layers = base.n_layers();
    let last = n_layers - 1;
    if let Some(&bad) = measure_layers
        .iter()
        .chain(nodes.iter().map(|n| &n.node_handoff))
        .find(|&&l| l >= n_layers)
    {
        return Err(AblationError::WindowOutOfRange { start: bad, width: 1, n_layers });
    }
    let layers: Vec<usize> = measure_layers
        .iter()
        .copied()
        .chain(nodes.iter().map(|n| n.node_handoff))
        .chain([last])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let before: Vec<f64> = layers
        .iter()
        .map(|&l| baseline_separation(base, l))
        .collect::<Result<_, _>>()?;

    let n = nodes.len();
    let per_subset = (1u32..(1u32 << n))
        .into_par_iter()
        .map(|mask| {
            let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let patches: Vec<Patch> = members
                .iter()
                .map(|&i| Patch {
                    layer: nodes[i].node_handoff,
                    direction: nodes[i].node_direction.clone(),
                })
                .collect();
            let after = propagator.propagate(&patches)?;
            let reductions = layers
                .iter()
                .zip(&before)
                .map(|(&layer, &b)| {
                    // a fully collapsed class gap leaves S undefined; that is total removal
                    let a = separation_score(&after, layer).unwrap_or(0.0);
                    LayerReduction {
                        layer,
                        reduction: 1.0 - a / b,
                    }
                })
                .collect();
            Ok(SubsetOutcome {
                nodes: members,
                reductions,
            })
        })
        .collect::<Result<Vec<_>, AblationError>>()?;

    let solo = |i: usize| per_subset[(1usize << i) - 1].reduction_at(last).expect("final layer measured");
    let dominant_node = (0..n).fold(0, |best, i| if solo(i) > solo(best) { i } else { best });
    let best_solo = solo(dominant_node);
    let synergy = if n == 1 {
        0.0
    } else {
        per_subset.last().expect("full subset").reduction_at(last).expect("final layer measured") - best_solo
    };
    let deepest = (0..n).fold(0, |d, i| if nodes[i].node_handoff > nodes[d].node_handoff { i } else { d });
    let deep_layer = nodes[deepest].node_handoff;
    let cross_disruption = per_subset
        .iter()
        .filter(|s| !s.nodes.contains(&deepest) && s.nodes.iter().all(|&i| nodes[i].node_handoff < deep_layer))
        .filter_map(|s| s.reduction_at(deep_layer))
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));

    Ok(RelayReport {
        concept: base.concept().to_owned(),
        nodes: nodes.to_vec(),
        measure_layers: layers,
        dominant_node,
        synergy,
        cross_disruption,
        per_subset,
    })
}
