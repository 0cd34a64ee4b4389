// SPDX-License-Identifier: MIT OR Apache-2.0

//! Propagation of directional patches through the residual stream.
//!
//! Cached activations cannot show how a patch at one layer changes later
//! layers, so the relay analysis goes through a [`Propagator`]. Two are
//! provided: [`SyntheticRelay`], a linear residual stack with a known feed
//! structure, and [`DumpPropagator`], which serves activations that an
//! external extractor dumped with the patches already applied.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::GemNode;
use crate::geometry::{compute_direction, dot, UnitVector};
use crate::store::{
    load_activation_set, write_activation_set, write_atomic, ActivationSet, Manifest, StoreError, Tensor3,
};
use crate::synthetic::random_orthonormal;

/// Manifest annotation key listing the patches applied to a dump.
pub const PATCHES_ANNOTATION: &str = "patches";

#[derive(Debug, Error)]
pub enum PropagatorError {
    #[error("bad relay spec: {0}")]
    BadSpec(String),
    #[error("patch at layer {layer} outside {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("patch direction has {got} dims, activations have {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("no patched dump for patch set {0}")]
    MissingDump(String),
    #[error("patched dump {path} does not match the baseline: {reason}")]
    IncompatibleDump { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Project `direction` out of every activation at `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub direction: UnitVector,
}

/// Produces post-patch activations at every layer.
///
/// Contract: `propagate(&[])` equals `baseline()` exactly, and layers below
/// the shallowest patch are unchanged.
pub trait Propagator: Sync {
    fn baseline(&self) -> &ActivationSet;
    fn propagate(&self, patches: &[Patch]) -> Result<ActivationSet, PropagatorError>;
}

fn check_patches(baseline: &ActivationSet, patches: &[Patch]) -> Result<(), PropagatorError> {
    for p in patches {
        if p.layer >= baseline.n_layers() {
            return Err(PropagatorError::LayerOutOfRange {
                layer: p.layer,
                n_layers: baseline.n_layers(),
            });
        }
        if p.direction.dim() != baseline.hidden_dim() {
            return Err(PropagatorError::DimensionMismatch {
                got: p.direction.dim(),
                want: baseline.hidden_dim(),
            });
        }
    }
    Ok(())
}

/// One relay stage: at `layer` the concept moves onto a fresh direction.
/// A fraction `feed` of the new signal is read from the previous stage's
/// direction; the rest is written directly. The first stage has no upstream
/// and writes its full signal regardless of `feed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayStage {
    pub layer: usize,
    pub feed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaySpec {
    pub model_id: String,
    pub concept: String,
    pub n_layers: usize,
    pub n_pairs: usize,
    pub hidden_dim: usize,
    /// Centroid distance carried along each stage direction.
    pub separation: f64,
    /// Isotropic input noise, restricted to the complement of the stage directions.
    pub noise_scale: f64,
    pub rng_seed: u64,
    pub stages: Vec<RelayStage>,
}

impl RelaySpec {
    /// Two-stage relay: shallow stage at `shallow`, deep stage at `deep`.
    pub fn two_stage(n_layers: usize, shallow: usize, deep: usize, feed: f64, seed: u64) -> Self {
        RelaySpec {
            model_id: "synthetic-relay".to_owned(),
            concept: "relay".to_owned(),
            n_layers,
            n_pairs: 48,
            hidden_dim: 16,
            separation: 4.0,
            noise_scale: 0.2,
            rng_seed: seed,
            stages: vec![RelayStage { layer: shallow, feed: 0.0 }, RelayStage { layer: deep, feed }],
        }
    }

    fn check(&self) -> Result<(), PropagatorError> {
        let bad = |m: &str| Err(PropagatorError::BadSpec(m.to_owned()));
        if self.n_layers < 2 || self.n_pairs < 2 {
            return bad("need n_layers >= 2 and n_pairs >= 2");
        }
        if self.stages.is_empty() {
            return bad("need at least one stage");
        }
        if self.hidden_dim <= self.stages.len() {
            return bad("hidden_dim must exceed the number of stages");
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return bad("separation must be positive");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("noise_scale must be >= 0");
        }
        if self.stages.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return bad("stage layers must be strictly increasing");
        }
        if self.stages.iter().any(|s| s.layer >= self.n_layers) {
            return bad("stage layer out of range");
        }
        if self.stages.iter().any(|s| !(0.0..=1.0).contains(&s.feed)) {
            return bad("feed must be in [0, 1]");
        }
        Ok(())
    }
}

/// `h += coef * e_out * (e_inp · h)`, evaluated on the pre-update state.
#[derive(Debug, Clone, Copy)]
struct RankOne {
    coef: f64,
    out: usize,
    inp: usize,
}

/// Linear residual stack realizing a [`RelaySpec`].
#[derive(Debug, Clone)]
pub struct SyntheticRelay {
    spec: RelaySpec,
    frame: Vec<Vec<f64>>,
    input_pos: Vec<f64>,
    input_neg: Vec<f64>,
    updates: Vec<Vec<RankOne>>,
    /// Per layer: (frame index, half-separation written ± per class).
    writes: Vec<Option<(usize, f64)>>,
    baseline: ActivationSet,
}

impl SyntheticRelay {
    pub fn new(spec: RelaySpec) -> Result<Self, PropagatorError> {
        spec.check()?;
        let d = spec.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let frame = random_orthonormal(&mut rng, d, spec.stages.len());
        let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut out = Vec::with_capacity(spec.n_pairs * d);
            for _ in 0..spec.n_pairs {
                let mut v: Vec<f64> = (0..d)
                    .map(|_| spec.noise_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                for e in &frame {
                    let p = dot(&v, e);
                    v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
                }
                out.extend(v);
            }
            // centered per class so the stage axes carry the whole centroid gap
            for j in 0..d {
                let mean = out.iter().skip(j).step_by(d).sum::<f64>() / spec.n_pairs as f64;
                out.iter_mut().skip(j).step_by(d).for_each(|x| *x -= mean);
            }
            out
        };
        let input_pos = noise(&mut rng);
        let input_neg = noise(&mut rng);

        let mut updates = vec![Vec::new(); spec.n_layers];
        let mut writes = vec![None; spec.n_layers];
        let half = 0.5 * spec.separation;
        for (k, stage) in spec.stages.iter().enumerate() {
            if k == 0 {
                writes[stage.layer] = Some((0, half));
            } else {
                updates[stage.layer] = vec![
                    RankOne { coef: -1.0, out: k - 1, inp: k - 1 },
                    RankOne { coef: stage.feed, out: k, inp: k - 1 },
                ];
                writes[stage.layer] = Some((k, (1.0 - stage.feed) * half));
            }
        }
        let mut relay = SyntheticRelay {
            baseline: ActivationSet::new(
                Manifest::new(&spec.model_id, &spec.concept, spec.n_layers, spec.n_pairs, d),
                Tensor3::zeros(spec.n_layers, spec.n_pairs, d),
                Tensor3::zeros(spec.n_layers, spec.n_pairs, d),
            )?,
            spec,
            frame,
            input_pos,
            input_neg,
            updates,
            writes,
        };
        relay.baseline = relay.forward(&[])?;
        Ok(relay)
    }

    pub fn spec(&self) -> &RelaySpec {
        &self.spec
    }

    /// Direction carrying the concept after stage `k`.
    pub fn stage_direction(&self, k: usize) -> UnitVector {
        UnitVector::new(self.frame[k].clone()).expect("frame vectors are unit")
    }

    /// One node per stage: peak at the stage layer, handoff on the next layer,
    /// direction measured from the unpatched activations.
    pub fn nodes(&self) -> Result<Vec<GemNode>, PropagatorError> {
        let last = self.spec.n_layers - 1;
        self.spec
            .stages
            .iter()
            .map(|s| {
                let handoff = (s.layer + 1).min(last);
                let u = compute_direction(&self.baseline, handoff)
                    .map_err(|e| PropagatorError::BadSpec(e.to_string()))?;
                Ok(GemNode {
                    peak_layer: s.layer,
                    node_handoff: handoff,
                    node_direction: u,
                })
            })
            .collect()
    }

    fn forward(&self, patches: &[Patch]) -> Result<ActivationSet, PropagatorError> {
        let (n, k, d) = (self.spec.n_layers, self.spec.n_pairs, self.spec.hidden_dim);
        let mut by_layer: BTreeMap<usize, Vec<&UnitVector>> = BTreeMap::new();
        for p in patches {
            by_layer.entry(p.layer).or_default().push(&p.direction);
        }
        let mut pos = Tensor3::zeros(n, k, d);
        let mut neg = Tensor3::zeros(n, k, d);
        let mut h = [self.input_pos.clone(), self.input_neg.clone()];
        for layer in 0..n {
            for (class, state) in h.iter_mut().enumerate() {
                let sign = if class == 0 { 1.0 } else { -1.0 };
                for row in state.chunks_exact_mut(d) {
                    let reads: Vec<f64> = self.updates[layer].iter().map(|t| dot(row, &self.frame[t.inp])).collect();
                    for (t, r) in self.updates[layer].iter().zip(reads) {
                        row.iter_mut().zip(&self.frame[t.out]).for_each(|(x, e)| *x += t.coef * r * e);
                    }
                    if let Some((idx, amp)) = self.writes[layer] {
                        row.iter_mut().zip(&self.frame[idx]).for_each(|(x, e)| *x += sign * amp * e);
                    }
                    for u in by_layer.get(&layer).into_iter().flatten() {
                        let c = dot(row, u.as_slice());
                        row.iter_mut().zip(u.as_slice()).for_each(|(x, e)| *x -= c * e);
                    }
                }
                let target = if class == 0 { &mut pos } else { &mut neg };
                target
                    .layer_mut(layer)
                    .iter_mut()
                    .zip(state.iter())
                    .for_each(|(t, v)| *t = *v as f32);
            }
        }
        Ok(ActivationSet::new(self.baseline.manifest().clone(), pos, neg)?)
    }

    /// Writes the baseline and one patched dump per patch set, in the format
    /// [`DumpPropagator::from_dirs`] reads. Returns the dump directories.
    pub fn export_dumps(&self, root: &Path, patch_sets: &[Vec<Patch>]) -> Result<(PathBuf, Vec<PathBuf>), PropagatorError> {
        let base_dir = root.join("baseline");
        write_activation_set(&self.baseline, &base_dir)?;
        let mut dirs = Vec::with_capacity(patch_sets.len());
        for (i, patches) in patch_sets.iter().enumerate() {
            let dir = root.join(format!("patched-{i:03}"));
            write_patched_dump(&self.propagate(patches)?, patches, &dir)?;
            dirs.push(dir);
        }
        Ok((base_dir, dirs))
    }
}

impl Propagator for SyntheticRelay {
    fn baseline(&self) -> &ActivationSet {
        &self.baseline
    }

    fn propagate(&self, patches: &[Patch]) -> Result<ActivationSet, PropagatorError> {
        check_patches(&self.baseline, patches)?;
        if patches.is_empty() {
            return Ok(self.baseline.clone());
        }
        self.forward(patches)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchEntry {
    layer: usize,
    direction_file: String,
}

/// Writes `set` annotated with `patches`; each direction goes to its own
/// raw little-endian `f32` file next to the blobs.
pub fn write_patched_dump(set: &ActivationSet, patches: &[Patch], dir: &Path) -> Result<(), PropagatorError> {
    check_patches(set, patches)?;
    std::fs::create_dir_all(dir).map_err(|e| StoreError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let file = format!("patch-{i:02}.bin");
        let bytes: Vec<u8> = p.direction.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        write_atomic(&dir.join(&file), &bytes)?;
        entries.push(PatchEntry {
            layer: p.layer,
            direction_file: file,
        });
    }
    let mut manifest = set.manifest().clone();
    manifest.annotations.insert(
        PATCHES_ANNOTATION.to_owned(),
        serde_json::to_value(&entries).expect("patch list serializes"),
    );
    write_activation_set(&set.with_manifest(manifest)?, dir)?;
    Ok(())
}

/// File listing the patch sets a dump-backed analysis needs.
pub const PATCH_PLAN_NAME: &str = "patch-plan.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedDump {
    /// Output directory name the dump should be written to.
    pub name: String,
    pub patches: Vec<PlannedPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedPatch {
    pub layer: usize,
    pub direction_file: String,
}

/// Writes each distinct patch direction as a raw little-endian `f32` file
/// plus `patch-plan.json` naming one dump per patch set.
pub fn write_patch_plan(dir: &Path, sets: &[Vec<Patch>]) -> Result<Vec<PlannedDump>, PropagatorError> {
    std::fs::create_dir_all(dir).map_err(|e| StoreError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<(usize, UnitVector, String)> = Vec::new();
    let mut plan = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let mut patches = Vec::with_capacity(set.len());
        for p in set {
            let existing = files
                .iter()
                .find(|(_, u, _)| u.as_slice() == p.direction.as_slice())
                .map(|(_, _, f)| f.clone());
            let file = match existing {
                Some(f) => f,
                None => {
                    let f = format!("direction-{:02}.bin", files.len());
                    let bytes: Vec<u8> = p.direction.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                    write_atomic(&dir.join(&f), &bytes)?;
                    files.push((p.layer, p.direction.clone(), f.clone()));
                    f
                }
            };
            patches.push(PlannedPatch {
                layer: p.layer,
                direction_file: file,
            });
        }
        plan.push(PlannedDump {
            name: format!("patched-{i:03}"),
            patches,
        });
    }
    let mut json = serde_json::to_vec_pretty(&plan).expect("plan serializes");
    json.push(b'\n');
    write_atomic(&dir.join(PATCH_PLAN_NAME), &json)?;
    Ok(plan)
}

fn read_patches(dir: &Path, manifest: &Manifest) -> Result<Vec<Patch>, PropagatorError> {
    let incompatible = |reason: String| PropagatorError::IncompatibleDump {
        path: dir.display().to_string(),
        reason,
    };
    let value = manifest
        .annotations
        .get(PATCHES_ANNOTATION)
        .ok_or_else(|| incompatible("manifest has no patch annotation".into()))?;
    let entries: Vec<PatchEntry> =
        serde_json::from_value(value.clone()).map_err(|e| incompatible(format!("bad patch annotation: {e}")))?;
    entries
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.direction_file);
            let bytes = std::fs::read(&path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
            if bytes.len() != manifest.hidden_dim * 4 {
                return Err(incompatible(format!("{} is not {} f32 values", e.direction_file, manifest.hidden_dim)));
            }
            let v: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let direction = UnitVector::new(v).ok_or_else(|| incompatible("zero patch direction".into()))?;
            Ok(Patch {
                layer: e.layer,
                direction,
            })
        })
        .collect()
}

/// Propagator backed by externally dumped patched activations.
#[derive(Debug, Clone)]
pub struct DumpPropagator {
    baseline: ActivationSet,
    dumps: Vec<(Vec<Patch>, ActivationSet)>,
}

/// Two patch sets match when they patch the same layers along the same axes.
fn same_patches(a: &[Patch], b: &[Patch]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut b_used = vec![false; b.len()];
    a.iter().all(|pa| {
        let hit = b.iter().enumerate().position(|(j, pb)| {
            !b_used[j] && pa.layer == pb.layer && pa.direction.dot(&pb.direction).abs() >= 1.0 - 1e-6
        });
        if let Some(j) = hit {
            b_used[j] = true;
        }
        hit.is_some()
    })
}

impl DumpPropagator {
    pub fn new(baseline: ActivationSet, dumps: Vec<(Vec<Patch>, ActivationSet)>) -> Result<Self, PropagatorError> {
        for (patches, set) in &dumps {
            check_patches(&baseline, patches)?;
            let (a, b) = (baseline.manifest(), set.manifest());
            if (a.n_layers, a.n_pairs, a.hidden_dim) != (b.n_layers, b.n_pairs, b.hidden_dim)
                || a.model_id != b.model_id
                || a.concept != b.concept
            {
                return Err(PropagatorError::IncompatibleDump {
                    path: format!("{}/{}", b.model_id, b.concept),
                    reason: "model, concept or shape differs from the baseline".into(),
                });
            }
        }
        Ok(DumpPropagator { baseline, dumps })
    }

    pub fn from_dirs(baseline_dir: &Path, patched_dirs: &[PathBuf]) -> Result<Self, PropagatorError> {
        let baseline = load_activation_set(baseline_dir)?;
        let dumps = patched_dirs
            .iter()
            .map(|dir| {
                let set = load_activation_set(dir)?;
                let patches = read_patches(dir, set.manifest())?;
                Ok((patches, set))
            })
            .collect::<Result<Vec<_>, PropagatorError>>()?;
        DumpPropagator::new(baseline, dumps)
    }
}

impl Propagator for DumpPropagator {
    fn baseline(&self) -> &ActivationSet {
        &self.baseline
    }

    fn propagate(&self, patches: &[Patch]) -> Result<ActivationSet, PropagatorError> {
        check_patches(&self.baseline, patches)?;
        if patches.is_empty() {
            return Ok(self.baseline.clone());
        }
        self.dumps
            .iter()
            .find(|(p, _)| same_patches(p, patches))
            .map(|(_, set)| set.clone())
            .ok_or_else(|| {
                let layers: Vec<usize> = patches.iter().map(|p| p.layer).collect();
                PropagatorError::MissingDump(format!("layers {layers:?}"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::separation_score;

    fn relay(feed: f64) -> SyntheticRelay {
        SyntheticRelay::new(RelaySpec::two_stage(12, 2, 6, feed, 21)).unwrap()
    }

    #[test]
    fn empty_patch_set_reproduces_baseline_exactly() {
        let r = relay(0.7);
        assert_eq!(&r.propagate(&[]).unwrap(), r.baseline());
        // the forward pass is deterministic and matches the stored baseline
        assert_eq!(&r.forward(&[]).unwrap(), r.baseline());
    }

    #[test]
    fn final_layer_patch_leaves_earlier_layers() {
        let r = relay(0.7);
        let patch = Patch {
            layer: 11,
            direction: r.stage_direction(1),
        };
        let out = r.propagate(&[patch]).unwrap();
        for l in 0..11 {
            assert_eq!(out.pos().layer(l), r.baseline().pos().layer(l));
            assert_eq!(out.neg().layer(l), r.baseline().neg().layer(l));
        }
        assert_ne!(out.pos().layer(11), r.baseline().pos().layer(11));
    }

    #[test]
    fn shallow_patch_reduces_deep_separation_by_feed() {
        let feed = 0.7;
        let r = relay(feed);
        let nodes = r.nodes().unwrap();
        let out = r
            .propagate(&[Patch {
                layer: nodes[0].node_handoff,
                direction: nodes[0].node_direction.clone(),
            }])
            .unwrap();
        let deep = nodes[1].node_handoff;
        let before = separation_score(r.baseline(), deep).unwrap();
        let after = separation_score(&out, deep).unwrap();
        let reduction = 1.0 - after / before;
        assert!((reduction - feed).abs() < 1e-6, "{reduction}");
    }

    #[test]
    fn rejects_bad_specs_and_patches() {
        let mut spec = RelaySpec::two_stage(12, 6, 2, 0.5, 1);
        assert!(matches!(SyntheticRelay::new(spec.clone()), Err(PropagatorError::BadSpec(_))));
        spec.stages = vec![RelayStage { layer: 2, feed: 1.5 }];
        assert!(matches!(SyntheticRelay::new(spec), Err(PropagatorError::BadSpec(_))));
        let r = relay(0.5);
        let bad = Patch {
            layer: 12,
            direction: r.stage_direction(0),
        };
        assert!(matches!(r.propagate(&[bad]), Err(PropagatorError::LayerOutOfRange { .. })));
    }

    #[test]
    fn dumps_round_trip_through_directories() {
        let r = relay(0.7);
        let dir = tempfile::tempdir().unwrap();
        let p = vec![Patch {
            layer: 3,
            direction: r.stage_direction(0),
        }];
        let (base, dumps) = r.export_dumps(dir.path(), std::slice::from_ref(&p)).unwrap();
        let dp = DumpPropagator::from_dirs(&base, &dumps).unwrap();
        assert_eq!(dp.propagate(&[]).unwrap(), *r.baseline());
        let served = dp.propagate(&[Patch { layer: 3, direction: r.stage_direction(0).negated() }]).unwrap();
        assert_eq!(served.pos(), r.propagate(&p).unwrap().pos());
        let missing = dp.propagate(&[Patch { layer: 4, direction: r.stage_direction(0) }]);
        assert!(matches!(missing, Err(PropagatorError::MissingDump(_))));
    }

    #[test]
    fn patch_plan_shares_direction_files() {
        let r = relay(0.7);
        let nodes = r.nodes().unwrap();
        let p = |i: usize| Patch {
            layer: nodes[i].node_handoff,
            direction: nodes[i].node_direction.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let plan = write_patch_plan(dir.path(), &[vec![p(0)], vec![p(1)], vec![p(0), p(1)]]).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan[2].patches[0].direction_file, plan[0].patches[0].direction_file);
        assert!(dir.path().join("direction-01.bin").is_file());
        assert!(!dir.path().join("direction-02.bin").exists());
        let text = std::fs::read_to_string(dir.path().join(PATCH_PLAN_NAME)).unwrap();
        let back: Vec<PlannedDump> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
    }
}
