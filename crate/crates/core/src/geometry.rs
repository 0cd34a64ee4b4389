// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer concept geometry.
//!
//! Directions are difference-of-means vectors oriented from the negative
//! class centroid toward the positive one. Separation is the centroid gap
//! divided by the pooled within-class spread, where spread is the root of the
//! mean of the two covariance traces. Variances are Bessel-corrected
//! (divide by `K - 1`) and traces are summed per dimension, so no `d x d`
//! matrix is ever formed. All accumulation happens in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::ActivationSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("centroid difference at layer {layer} is degenerate (norm {norm:e})")]
    DegenerateDirection { layer: usize, norm: f64 },
    #[error("both class covariance traces are zero at layer {layer}")]
    ZeroVariance { layer: usize },
    #[error("direction undefined at boundary layer {layer}")]
    UndefinedBoundary { layer: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Relative scale below which a centroid difference counts as zero.
pub const DEGENERACY_SCALE: f64 = 1e-12;

/// An L2-normalized direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `v`; `None` if its norm is zero or not finite.
    pub fn new(v: Vec<f64>) -> Option<Self> {
        let norm = l2_norm(&v);
        if !(norm > 0.0 && norm.is_finite()) {
            return None;
        }
        Some(UnitVector(v.into_iter().map(|x| x / norm).collect()))
    }

    /// Standard basis vector `e_axis` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        UnitVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn negated(&self) -> UnitVector {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Mean and covariance trace of one class of rows.
#[derive(Debug, Clone)]
pub(crate) struct ClassMoments {
    pub mean: Vec<f64>,
    pub trace: f64,
}

/// Two-pass mean and Bessel-corrected variance sum over `rows` (flattened,
/// `dim` values per row). Requires at least two rows.
pub(crate) fn class_moments<T: Copy + Into<f64>>(rows: &[T], dim: usize) -> ClassMoments {
    let n = rows.len() / dim;
    debug_assert!(n >= 2 && rows.len() == n * dim);
    let mut mean = vec![0.0f64; dim];
    for row in rows.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x.into();
        }
    }
    let inv_n = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut ss = 0.0f64;
    for row in rows.chunks_exact(dim) {
        for (m, &x) in mean.iter().zip(row) {
            let d = x.into() - m;
            ss += d * d;
        }
    }
    ClassMoments {
        mean,
        trace: ss / (n - 1) as f64,
    }
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Separation score from class moments; `layer` only labels errors.
pub(crate) fn separation_from_moments(
    pos: &ClassMoments,
    neg: &ClassMoments,
    layer: usize,
) -> Result<f64, GeometryError> {
    if pos.trace == 0.0 && neg.trace == 0.0 {
        return Err(GeometryError::ZeroVariance { layer });
    }
    let gap = l2_norm(&difference(&pos.mean, &neg.mean));
    Ok(gap / (0.5 * (pos.trace + neg.trace)).sqrt())
}

/// Separation score of arbitrary row sets (used on ablated copies too).
pub fn separation_of_rows<T: Copy + Into<f64>>(
    pos: &[T],
    neg: &[T],
    dim: usize,
    layer: usize,
) -> Result<f64, GeometryError> {
    separation_from_moments(&class_moments(pos, dim), &class_moments(neg, dim), layer)
}

fn check_layer(set: &ActivationSet, layer: usize) -> Result<(), GeometryError> {
    if layer >= set.n_layers() {
        return Err(GeometryError::LayerOutOfRange {
            layer,
            n_layers: set.n_layers(),
        });
    }
    Ok(())
}

fn direction_from_means(pos: &[f64], neg: &[f64], layer: usize) -> Result<UnitVector, GeometryError> {
    let diff = difference(pos, neg);
    let norm = l2_norm(&diff);
    if norm <= DEGENERACY_SCALE * (diff.len() as f64).sqrt() {
        return Err(GeometryError::DegenerateDirection { layer, norm });
    }
    Ok(UnitVector(diff.into_iter().map(|x| x / norm).collect()))
}

/// Unit difference-of-means direction at `layer`.
pub fn compute_direction(set: &ActivationSet, layer: usize) -> Result<UnitVector, GeometryError> {
    check_layer(set, layer)?;
    let d = set.hidden_dim();
    let pos = class_moments(set.pos().layer(layer), d);
    let neg = class_moments(set.neg().layer(layer), d);
    direction_from_means(&pos.mean, &neg.mean, layer)
}

/// Fisher-normalized centroid distance at `layer`.
pub fn separation_score(set: &ActivationSet, layer: usize) -> Result<f64, GeometryError> {
    check_layer(set, layer)?;
    separation_of_rows(set.pos().layer(layer), set.neg().layer(layer), set.hidden_dim(), layer)
}

/// Per-layer directions and scalars for one (model, concept) pair.
///
/// `None` marks an undefined value: a degenerate direction, a zero-variance
/// separation, or an angular velocity next to an undefined direction.
/// Layer 0 never has an angular velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    directions: Vec<Option<UnitVector>>,
    separation: Vec<Option<f64>>,
    angular_velocity: Vec<Option<f64>>,
    stability: Vec<Option<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from per-layer directions and separations,
    /// deriving angular velocity and stability.
    pub fn from_parts(directions: Vec<Option<UnitVector>>, separation: Vec<Option<f64>>) -> Self {
        assert_eq!(directions.len(), separation.len(), "per-layer vectors must align");
        let n = directions.len();
        let mut angular_velocity = vec![None; n];
        let mut stability = vec![None; n];
        for l in 1..n {
            if let (Some(cur), Some(prev)) = (&directions[l], &directions[l - 1]) {
                let omega = (1.0 - cur.dot(prev).abs()).clamp(0.0, 1.0);
                angular_velocity[l] = Some(omega);
                stability[l] = Some(1.0 - omega);
            }
        }
        Trajectory {
            directions,
            separation,
            angular_velocity,
            stability,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.directions.len()
    }

    pub fn direction(&self, layer: usize) -> Option<&UnitVector> {
        self.directions.get(layer).and_then(Option::as_ref)
    }

    pub fn directions(&self) -> &[Option<UnitVector>] {
        &self.directions
    }

    pub fn separation(&self) -> &[Option<f64>] {
        &self.separation
    }

    pub fn angular_velocity(&self) -> &[Option<f64>] {
        &self.angular_velocity
    }

    pub fn stability(&self) -> &[Option<f64>] {
        &self.stability
    }

    /// Cosine of every layer's direction with the final layer's direction.
    pub fn cosine_to_final(&self) -> Vec<Option<f64>> {
        let last = self.direction(self.n_layers() - 1);
        self.directions
            .iter()
            .map(|u| match (u, last) {
                (Some(u), Some(f)) => Some(u.dot(f)),
                _ => None,
            })
            .collect()
    }

    /// Largest angular velocity over the trajectory.
    pub fn max_angular_velocity(&self) -> Option<f64> {
        self.angular_velocity.iter().flatten().copied().reduce(f64::max)
    }
}

/// Directions and separation scores at every layer.
pub fn compute_trajectory(set: &ActivationSet) -> Trajectory {
    let d = set.hidden_dim();
    let (directions, separation) = (0..set.n_layers())
        .map(|l| {
            let pos = class_moments(set.pos().layer(l), d);
            let neg = class_moments(set.neg().layer(l), d);
            let u = direction_from_means(&pos.mean, &neg.mean, l).ok();
            let s = separation_from_moments(&pos, &neg, l).ok();
            (u, s)
        })
        .unzip();
    Trajectory::from_parts(directions, separation)
}

fn boundary(traj: &Trajectory, layer: usize) -> Result<&UnitVector, GeometryError> {
    traj.direction(layer)
        .ok_or(GeometryError::UndefinedBoundary { layer })
}

/// Signed cosine between the directions at CAZ entry and exit.
pub fn entry_exit_cosine(traj: &Trajectory, caz_start: usize, caz_end: usize) -> Result<f64, GeometryError> {
    Ok(boundary(traj, caz_start)?.dot(boundary(traj, caz_end)?))
}

/// Cosine between the settled direction and the final-layer direction.
pub fn handoff_cosine(traj: &Trajectory, handoff_layer: usize) -> Result<f64, GeometryError> {
    let last = traj.n_layers() - 1;
    Ok(boundary(traj, handoff_layer)?.dot(boundary(traj, last)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Manifest, Tensor3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from(pos: Vec<Vec<f32>>, neg: Vec<Vec<f32>>, n_layers: usize) -> ActivationSet {
        // same rows at every layer
        let k = pos.len();
        let d = pos[0].len();
        let tile = |rows: &Vec<Vec<f32>>| {
            let mut v = Vec::new();
            for _ in 0..n_layers {
                for r in rows {
                    v.extend_from_slice(r);
                }
            }
            Tensor3::from_vec(n_layers, k, d, v).unwrap()
        };
        ActivationSet::new(Manifest::new("m", "c", n_layers, k, d), tile(&pos), tile(&neg)).unwrap()
    }

    /// Independent brute-force centroid oracle: one mean per coordinate,
    /// computed column by column.
    fn centroid_oracle(set: &ActivationSet, layer: usize) -> Vec<f64> {
        let (k, d) = (set.n_pairs(), set.hidden_dim());
        let mut diff = Vec::with_capacity(d);
        for j in 0..d {
            let p: f64 = (0..k).map(|i| set.pos().get(layer, i, j) as f64).sum::<f64>() / k as f64;
            let n: f64 = (0..k).map(|i| set.neg().get(layer, i, j) as f64).sum::<f64>() / k as f64;
            diff.push(p - n);
        }
        let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff.into_iter().map(|x| x / norm).collect()
    }

    fn random_set(rng: &mut ChaCha8Rng, n_layers: usize, k: usize, d: usize) -> ActivationSet {
        let mut gen = |shift: f32| {
            let v: Vec<f32> = (0..n_layers * k * d).map(|_| rng.random_range(-1.0f32..1.0) + shift).collect();
            Tensor3::from_vec(n_layers, k, d, v).unwrap()
        };
        let pos = gen(0.3);
        let neg = gen(-0.3);
        ActivationSet::new(Manifest::new("m", "c", n_layers, k, d), pos, neg).unwrap()
    }

    #[test]
    fn axis_aligned_centroids() {
        let set = set_from(vec![vec![2.0, 0.0], vec![2.0, 0.0]], vec![vec![0.0, 0.0], vec![0.0, 0.0]], 2);
        let u = compute_direction(&set, 0).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn identical_classes_are_degenerate() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let set = set_from(rows.clone(), rows, 2);
        assert!(matches!(
            compute_direction(&set, 1),
            Err(GeometryError::DegenerateDirection { layer: 1, .. })
        ));
        assert_eq!(separation_score(&set, 0).unwrap(), 0.0);
    }

    #[test]
    fn direction_matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 2, 5, 4);
        let u = compute_direction(&set, 1).unwrap();
        let oracle = centroid_oracle(&set, 1);
        assert!(dot(u.as_slice(), &oracle) >= 1.0 - 1e-9);
    }

    #[test]
    fn one_dimensional_hand_case() {
        // pos {1,3}: mean 2, var 2; neg {-1,-3}: mean -2, var 2; S = 4 / sqrt(2)
        let set = set_from(vec![vec![1.0], vec![3.0]], vec![vec![-1.0], vec![-3.0]], 2);
        let s = separation_score(&set, 0).unwrap();
        assert!((s - 4.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_an_error() {
        let set = set_from(vec![vec![1.0], vec![1.0]], vec![vec![-1.0], vec![-1.0]], 2);
        assert!(matches!(separation_score(&set, 0), Err(GeometryError::ZeroVariance { layer: 0 })));
    }

    #[test]
    fn out_of_range_layer() {
        let set = set_from(vec![vec![1.0], vec![3.0]], vec![vec![-1.0], vec![-3.0]], 2);
        assert!(matches!(compute_direction(&set, 2), Err(GeometryError::LayerOutOfRange { .. })));
    }

    #[test]
    fn sign_flip_gives_zero_velocity() {
        let u = UnitVector::new(vec![0.6, 0.8]).unwrap();
        let traj = Trajectory::from_parts(vec![Some(u.clone()), Some(u.negated())], vec![Some(1.0); 2]);
        assert_eq!(traj.angular_velocity()[1], Some(0.0));
        assert_eq!(traj.stability()[1], Some(1.0));
    }

    #[test]
    fn orthogonal_step_gives_unit_velocity() {
        let traj = Trajectory::from_parts(
            vec![Some(UnitVector::axis(3, 0)), Some(UnitVector::axis(3, 2)), None],
            vec![Some(1.0); 3],
        );
        assert!((traj.angular_velocity()[1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(traj.angular_velocity()[0], None);
        assert_eq!(traj.angular_velocity()[2], None);
    }

    #[test]
    fn boundary_cosines() {
        let a = UnitVector::axis(2, 0);
        let b = UnitVector::new(vec![1.0, 1.0]).unwrap();
        let traj = Trajectory::from_parts(vec![Some(a), None, Some(b)], vec![None; 3]);
        assert!((entry_exit_cosine(&traj, 0, 2).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((handoff_cosine(&traj, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(entry_exit_cosine(&traj, 1, 2), Err(GeometryError::UndefinedBoundary { layer: 1 })));
    }

    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
        // Gram-Schmidt on a random square matrix
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = l2_norm(&v);
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        basis
    }

    fn transform_layer(set: &ActivationSet, f: impl Fn(&[f32]) -> Vec<f32>) -> ActivationSet {
        let (n, k, d) = set.pos().shape();
        let map = |t: &Tensor3| {
            let mut out = Vec::with_capacity(n * k * d);
            for l in 0..n {
                for i in 0..k {
                    out.extend(f(t.row(l, i)));
                }
            }
            Tensor3::from_vec(n, k, d, out).unwrap()
        };
        ActivationSet::new(set.manifest().clone(), map(set.pos()), map(set.neg())).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn direction_equals_bruteforce(seed in any::<u64>(), k in 2usize..=32, d in 1usize..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 2, k, d);
            if let Ok(u) = compute_direction(&set, 0) {
                prop_assert!((l2_norm(u.as_slice()) - 1.0).abs() < 1e-6);
                prop_assert!(dot(u.as_slice(), &centroid_oracle(&set, 0)) >= 1.0 - 1e-9);
            }
        }

        #[test]
        fn separation_rotation_and_scale_invariant(
            seed in any::<u64>(),
            k in 2usize..=12,
            d in 1usize..=8,
            scale in 0.01f32..50.0,
            exp in -8i32..=8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 2, k, d);
            let base = separation_score(&set, 1).unwrap();
            // powers of two scale the stored values exactly
            let exact = transform_layer(&set, |r| r.iter().map(|x| x * 2f32.powi(exp)).collect());
            prop_assert!((separation_score(&exact, 1).unwrap() - base).abs() <= 1e-9 * base);
            let scaled = transform_layer(&set, |r| r.iter().map(|x| x * scale).collect());
            let s_scaled = separation_score(&scaled, 1).unwrap();
            prop_assert!((s_scaled - base).abs() <= 1e-6 * base.max(1.0));
            let q = random_rotation(&mut rng, d);
            let rotated = transform_layer(&set, |r| {
                q.iter().map(|row| row.iter().zip(r).map(|(a, &b)| a * b as f64).sum::<f64>() as f32).collect()
            });
            let s_rot = separation_score(&rotated, 1).unwrap();
            prop_assert!((s_rot - base).abs() <= 1e-6 * base.max(1.0));
        }

        #[test]
        fn velocity_bounds_and_sign_invariance(seed in any::<u64>(), flips in proptest::collection::vec(any::<bool>(), 6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs: Vec<UnitVector> = (0..6)
                .map(|_| UnitVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let a = Trajectory::from_parts(dirs.iter().cloned().map(Some).collect(), vec![None; 6]);
            let flipped = dirs.iter().zip(&flips).map(|(u, &f)| Some(if f { u.negated() } else { u.clone() })).collect();
            let b = Trajectory::from_parts(flipped, vec![None; 6]);
            for l in 1..6 {
                let w = a.angular_velocity()[l].unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert!((w - b.angular_velocity()[l].unwrap()).abs() < 1e-12);
                prop_assert_eq!(a.stability()[l].unwrap() + w, 1.0);
                let expected = 1.0 - dirs[l].dot(&dirs[l - 1]).abs();
                prop_assert!((w - expected).abs() < 1e-6);
            }
        }
    }
}
