// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded fixture generator with planted concept geometry.
//!
//! A planted direction is fixed before the assembly zone, rotates in a
//! random plane by a constant angle per layer inside it, and is frozen at
//! its exit orientation afterwards. Class centroids sit at plus/minus half
//! the planted separation along that direction; every pair adds isotropic
//! Gaussian noise.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, l2_norm, UnitVector};
use crate::registry::{Cohort, ModelMeta};
use crate::store::{write_activation_set, ActivationSet, Manifest, StoreError, Tensor3};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn bad(msg: impl Into<String>) -> SyntheticError {
    SyntheticError::BadSpec(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_layers: usize,
    pub n_pairs: usize,
    pub hidden_dim: usize,
    pub caz_start: usize,
    pub caz_end: usize,
    pub rotation_degrees_per_layer: f64,
    pub separation_profile: Vec<f64>,
    pub noise_scale: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    /// Constant separation profile helper.
    pub fn simple(n_layers: usize, caz_start: usize, caz_end: usize, rotation: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_layers,
            n_pairs: 16,
            hidden_dim: 8,
            caz_start,
            caz_end,
            rotation_degrees_per_layer: rotation,
            separation_profile: vec![4.0; n_layers],
            noise_scale: 0.0,
            rng_seed: seed,
        }
    }

    fn check(&self) -> Result<(), SyntheticError> {
        if self.n_layers < 2 || self.n_pairs < 2 || self.hidden_dim < 1 {
            return Err(bad("need n_layers >= 2, n_pairs >= 2, hidden_dim >= 1"));
        }
        if !(self.caz_start <= self.caz_end && self.caz_end < self.n_layers) {
            return Err(bad(format!(
                "need 0 <= caz_start ({}) <= caz_end ({}) < n_layers ({})",
                self.caz_start, self.caz_end, self.n_layers
            )));
        }
        if self.separation_profile.len() != self.n_layers {
            return Err(bad("separation_profile length must equal n_layers"));
        }
        if self.separation_profile.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(bad("separation_profile entries must be finite and >= 0"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(bad("noise_scale must be finite and >= 0"));
        }
        if !self.rotation_degrees_per_layer.is_finite() {
            return Err(bad("rotation must be finite"));
        }
        if self.hidden_dim < 2 && self.rotation_degrees_per_layer != 0.0 {
            return Err(bad("rotation needs hidden_dim >= 2"));
        }
        Ok(())
    }

    /// Planted rotation angle (degrees, relative to the entry direction) at `layer`.
    pub fn planted_angle(&self, layer: usize) -> f64 {
        let steps = layer.clamp(self.caz_start, self.caz_end) - self.caz_start;
        steps as f64 * self.rotation_degrees_per_layer
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub directions: Vec<UnitVector>,
    pub caz_start: usize,
    pub caz_end: usize,
    pub handoff_layer: usize,
}

/// `count` orthonormal vectors in `dim` dimensions drawn from `rng`.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot draw {count} orthonormal vectors in {dim} dimensions");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = l2_norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Fully explicit planted geometry: one direction and separation per layer.
#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub model_id: String,
    pub concept: String,
    pub directions: Vec<UnitVector>,
    pub separation: Vec<f64>,
    pub n_pairs: usize,
    pub noise_scale: f64,
    pub rng_seed: u64,
}

/// Materializes pairs around `±separation/2 · direction` with Gaussian noise.
pub fn generate_planted(spec: &PlantedSpec) -> Result<ActivationSet, SyntheticError> {
    let n_layers = spec.directions.len();
    if n_layers != spec.separation.len() {
        return Err(bad("directions and separation must have one entry per layer"));
    }
    let dim = spec.directions.first().map(UnitVector::dim).unwrap_or(0);
    if spec.directions.iter().any(|u| u.dim() != dim) {
        return Err(bad("all planted directions must share a dimension"));
    }
    if !(spec.noise_scale.is_finite() && spec.noise_scale >= 0.0) {
        return Err(bad("noise_scale must be finite and >= 0"));
    }
    let manifest = Manifest::new(&spec.model_id, &spec.concept, n_layers, spec.n_pairs, dim);
    manifest.check_fields().map_err(|e| bad(e.to_string()))?;

    // noise stream is independent of the direction draw
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pos = Tensor3::zeros(n_layers, spec.n_pairs, dim);
    let mut neg = Tensor3::zeros(n_layers, spec.n_pairs, dim);
    for (l, (u, &sep)) in spec.directions.iter().zip(&spec.separation).enumerate() {
        let half: Vec<f64> = u.as_slice().iter().map(|x| 0.5 * sep * x).collect();
        for i in 0..spec.n_pairs {
            for (j, h) in half.iter().enumerate() {
                let (np, nn) = if spec.noise_scale > 0.0 {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    (a * spec.noise_scale, b * spec.noise_scale)
                } else {
                    (0.0, 0.0)
                };
                pos.set(l, i, j, (h + np) as f32);
                neg.set(l, i, j, (-h + nn) as f32);
            }
        }
    }
    Ok(ActivationSet::new(manifest, pos, neg)?)
}

/// Generates a single-zone fixture and the geometry it planted.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ActivationSet, GroundTruth), SyntheticError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let frame = random_orthonormal(&mut rng, spec.hidden_dim, spec.hidden_dim.min(2));
    let directions: Vec<UnitVector> = (0..spec.n_layers)
        .map(|l| {
            let theta = spec.planted_angle(l).to_radians();
            let v = match frame.as_slice() {
                [e1, e2] => e1.iter().zip(e2).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect(),
                [e1] => e1.clone(),
                _ => unreachable!(),
            };
            UnitVector::new(v).expect("rotation of a unit vector")
        })
        .collect();
    let planted = PlantedSpec {
        model_id: "synthetic".to_owned(),
        concept: "planted".to_owned(),
        directions: directions.clone(),
        separation: spec.separation_profile.clone(),
        n_pairs: spec.n_pairs,
        noise_scale: spec.noise_scale,
        rng_seed: spec.rng_seed,
    };
    let set = generate_planted(&planted)?;
    let truth = GroundTruth {
        directions,
        caz_start: spec.caz_start,
        caz_end: spec.caz_end,
        handoff_layer: (spec.caz_end + 1).min(spec.n_layers - 1),
    };
    Ok((set, truth))
}

/// One model of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub meta: ModelMeta,
    pub n_pairs: usize,
}

/// A small multi-model corpus with a matching registry.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub models: Vec<SyntheticModel>,
    pub concepts: Vec<String>,
    pub noise_scale: f64,
    pub rng_seed: u64,
}

impl CorpusSpec {
    /// The corpus shipped for smoke tests and determinism checks:
    /// three models across scale buckets and cohorts, three concepts each.
    pub fn bundled() -> Self {
        let model = |id: &str, family: &str, params: u64, n_layers: usize, cohort: Cohort| SyntheticModel {
            meta: ModelMeta {
                model_id: id.to_owned(),
                family: family.to_owned(),
                params,
                n_layers,
                hidden_dim: 24,
                cohort,
                source: "synthetic".to_owned(),
            },
            n_pairs: 24,
        };
        CorpusSpec {
            models: vec![
                model("synth-mha-small", "Synth", 120_000_000, 12, Cohort::Mha),
                model("synth-gqa-mid", "Synth", 1_500_000_000, 20, Cohort::Gqa),
                model("synth-mha-large", "Synth", 7_000_000_000, 24, Cohort::Mha),
            ],
            concepts: vec!["negation".into(), "sentiment".into(), "urgency".into()],
            noise_scale: 0.15,
            rng_seed: 2026,
        }
    }
}

/// Deterministic per-(model, concept) layout of the planted zone.
fn corpus_entry_spec(model: &SyntheticModel, concept_index: usize, noise: f64, seed: u64) -> SyntheticSpec {
    let n = model.meta.n_layers;
    // zone placement varies by concept: early, middle, near-final
    let (start_frac, end_frac) = match concept_index % 3 {
        0 => (0.2, 0.45),
        1 => (0.35, 0.65),
        _ => (0.55, 0.9),
    };
    let caz_start = ((n as f64 * start_frac) as usize).max(1);
    let caz_end = ((n as f64 * end_frac) as usize).clamp(caz_start + 2, n - 1);
    let peak = (caz_start + caz_end) / 2;
    let separation_profile = (0..n)
        .map(|l| {
            let x = (l as f64 - peak as f64) / (0.35 * n as f64);
            1.0 + 3.0 * (-x * x).exp()
        })
        .collect();
    SyntheticSpec {
        n_layers: n,
        n_pairs: model.n_pairs,
        hidden_dim: model.meta.hidden_dim,
        caz_start,
        caz_end,
        rotation_degrees_per_layer: 28.0 + 7.0 * concept_index as f64,
        separation_profile,
        noise_scale: noise,
        rng_seed: seed,
    }
}

/// Writes the corpus as `root/<model>/<concept>/` plus `root/registry.json`.
pub fn generate_corpus(root: &Path, spec: &CorpusSpec) -> Result<Vec<ModelMeta>, SyntheticError> {
    std::fs::create_dir_all(root)?;
    for (mi, model) in spec.models.iter().enumerate() {
        for (ci, concept) in spec.concepts.iter().enumerate() {
            let seed = spec
                .rng_seed
                .wrapping_mul(1_000_003)
                .wrapping_add((mi * 1_000 + ci) as u64);
            let entry = corpus_entry_spec(model, ci, spec.noise_scale, seed);
            let (set, _) = generate_synthetic(&entry)?;
            let mut manifest = set.manifest().clone();
            manifest.model_id = model.meta.model_id.clone();
            manifest.concept = concept.clone();
            let set = set.with_manifest(manifest)?;
            write_activation_set(&set, &root.join(&model.meta.model_id).join(concept))?;
        }
    }
    let registry: Vec<ModelMeta> = spec.models.iter().map(|m| m.meta.clone()).collect();
    let mut json = serde_json::to_string_pretty(&registry).expect("registry serializes");
    json.push('\n');
    crate::store::write_atomic(&root.join("registry.json"), json.as_bytes())?;
    Ok(registry)
}
