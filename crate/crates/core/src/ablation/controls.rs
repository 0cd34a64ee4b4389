// SPDX-License-Identifier: MIT OR Apache-2.0

//! Specificity controls for the handoff probe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    ablate_and_score, ablated_separation, baseline_separation, plan_window, probe_at, AblationError,
    AblationRecord, DirectionSource, LayerScore, MeasuredAt, Patch, Propagator, WindowPlan,
};
use crate::detector::{Gem, WidthRule};
use crate::geometry::{compute_direction, separation_score, Trajectory, UnitVector};
use crate::stats::empirical_z;
use crate::store::ActivationSet;

/// Concept direction vs random unit directions at the handoff window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControl {
    pub probe_layer: usize,
    pub width: usize,
    pub n_seeds: usize,
    pub concept_reduction_pct: f64,
    pub random_reductions_pct: Vec<f64>,
    pub mean_random_reduction_pct: f64,
    /// Concept reduction over mean random reduction; `None` when the random
    /// mean is not positive.
    pub specificity_ratio: Option<f64>,
    /// `None` when the random reductions have zero spread.
    pub z_score: Option<f64>,
    pub beats_all: bool,
    /// `(r + 1) / (n_seeds + 1)`, `r` = seeds reducing at least as much.
    pub empirical_p: f64,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = UnitVector::new(v) {
            return u;
        }
    }
}

/// Ablates `n_seeds` uniformly random unit directions at the handoff window
/// and compares their separation reduction with the concept direction's.
/// Pairs whose concept reduction is not positive are excluded.
pub fn random_direction_control(
    set: &ActivationSet,
    traj: &Trajectory,
    gem: &Gem,
    rule: &WidthRule,
    n_seeds: usize,
    rng_seed: u64,
) -> Result<RandomControl, AblationError> {
    rule.validate()?;
    let plan = plan_window(gem.handoff_layer, set.n_layers(), rule);
    let (_, concept) = probe_at(set, traj, &plan, DirectionSource::Handoff)?;
    let concept_reduction = concept.reduction_pct();
    if concept_reduction.is_nan() || concept_reduction <= 0.0 {
        return Err(AblationError::ExcludedZeroReduction {
            reduction_pct: concept_reduction,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let random_reductions = (0..n_seeds)
        .map(|k| {
            let u = random_unit(&mut rng, set.hidden_dim());
            let rec = ablate_and_score(set, plan.layer, plan.width, &u, DirectionSource::RandomSeed(k as u32))?;
            Ok(rec.reduction_pct())
        })
        .collect::<Result<Vec<f64>, AblationError>>()?;

    let mean_random = if n_seeds > 0 {
        random_reductions.iter().sum::<f64>() / n_seeds as f64
    } else {
        0.0
    };
    let at_least_as_strong = random_reductions.iter().filter(|&&r| r >= concept_reduction).count();
    Ok(RandomControl {
        probe_layer: plan.layer,
        width: plan.width,
        n_seeds,
        concept_reduction_pct: concept_reduction,
        mean_random_reduction_pct: mean_random,
        specificity_ratio: (mean_random > 0.0).then(|| concept_reduction / mean_random),
        z_score: empirical_z(concept_reduction, &random_reductions).ok(),
        beats_all: at_least_as_strong == 0,
        empirical_p: (at_least_as_strong + 1) as f64 / (n_seeds + 1) as f64,
        random_reductions_pct: random_reductions,
    })
}

/// Handoff probe vs a non-settling probe at the closest post-zone depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMatchedControl {
    pub control_layer: usize,
    pub gem_record: AblationRecord,
    pub control_record: AblationRecord,
    /// Control retained minus GEM retained, percentage points.
    pub advantage_pp: f64,
    pub gem_wins: bool,
    /// GEM ablation amplified separation; excluded from primary aggregates.
    pub degenerate: bool,
}

/// Candidate closest in relative depth to the handoff; ties to the lower layer.
fn control_layer(gem: &Gem) -> Option<usize> {
    let last = gem.n_layers - 1;
    (gem.caz_end + 1..=last)
        .filter(|&l| l != gem.handoff_layer)
        .min_by_key(|&l| (l.abs_diff(gem.handoff_layer), l))
}

fn window_patches(plan: &WindowPlan, u: &UnitVector) -> Vec<Patch> {
    (plan.layer..plan.layer + plan.width)
        .map(|layer| Patch {
            layer,
            direction: u.clone(),
        })
        .collect()
}

/// The two patch sets a propagated depth-matched control applies: the GEM
/// window first, then the control window.
pub fn depth_control_patches(
    set: &ActivationSet,
    traj: &Trajectory,
    gem: &Gem,
    rule: &WidthRule,
) -> Result<[Vec<Patch>; 2], AblationError> {
    rule.validate()?;
    let control = control_layer(gem).ok_or(AblationError::NoCandidate)?;
    let n = set.n_layers();
    let gem_plan = plan_window(gem.handoff_layer, n, rule);
    let control_plan = plan_window(control, n, rule);
    let gem_u = super::window_direction(traj, gem_plan.layer, gem_plan.width)?;
    let control_u = compute_direction(set, control)?;
    Ok([window_patches(&gem_plan, &gem_u), window_patches(&control_plan, &control_u)])
}

/// Retained separation at the final layer after propagating the patches.
fn propagated_record(
    propagator: &dyn Propagator,
    plan: &WindowPlan,
    u: &UnitVector,
    source: DirectionSource,
) -> Result<AblationRecord, AblationError> {
    let baseline = propagator.baseline();
    let last = baseline.n_layers() - 1;
    let patched = propagator.propagate(&window_patches(plan, u))?;
    let before = baseline_separation(baseline, last)?;
    let after = match separation_score(&patched, last) {
        Ok(s) => s,
        Err(_) => ablated_separation(patched.pos().layer(last), patched.neg().layer(last), u, last)?,
    };
    Ok(AblationRecord::from_scores(
        plan.layer,
        plan.width,
        source,
        MeasuredAt::FinalLayer,
        vec![LayerScore {
            layer: last,
            baseline: before,
            ablated: after,
        }],
    ))
}

/// Without a propagator both probes are scored at their own layers
/// (`measured_at = probe_layer`); with one, at the final layer.
pub fn depth_matched_control(
    set: &ActivationSet,
    traj: &Trajectory,
    gem: &Gem,
    rule: &WidthRule,
    propagator: Option<&dyn Propagator>,
) -> Result<DepthMatchedControl, AblationError> {
    rule.validate()?;
    let control = control_layer(gem).ok_or(AblationError::NoCandidate)?;
    let n = set.n_layers();
    let gem_plan = plan_window(gem.handoff_layer, n, rule);
    let control_plan = plan_window(control, n, rule);
    let control_u = compute_direction(set, control)?;

    let (gem_record, control_record) = match propagator {
        None => {
            let (_, g) = probe_at(set, traj, &gem_plan, DirectionSource::Handoff)?;
            let c = ablate_and_score(set, control, control_plan.width, &control_u, DirectionSource::ControlLayer)?;
            (g, c)
        }
        Some(p) => {
            let gem_u = super::window_direction(traj, gem_plan.layer, gem_plan.width)?;
            let g = propagated_record(p, &gem_plan, &gem_u, DirectionSource::Handoff)?;
            let c = propagated_record(p, &control_plan, &control_u, DirectionSource::ControlLayer)?;
            (g, c)
        }
    };
    let advantage_pp = control_record.retained_pct - gem_record.retained_pct;
    Ok(DepthMatchedControl {
        control_layer: control,
        degenerate: gem_record.is_degenerate(),
        gem_wins: advantage_pp > 0.0,
        advantage_pp,
        gem_record,
        control_record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detect_handoff, DEFAULT_EPSILON};
    use crate::geometry::compute_trajectory;
    use crate::synthetic::{generate_planted, generate_synthetic, PlantedSpec, SyntheticSpec};

    fn gem_with(caz_end: usize, handoff: usize, n: usize) -> Gem {
        Gem {
            caz_start: 0,
            caz_end,
            handoff_layer: handoff,
            n_layers: n,
            relative_depth: handoff as f64 / n as f64,
            eec: None,
            handoff_cos: None,
            settled_direction: UnitVector::axis(2, 0),
        }
    }

    #[test]
    fn control_layer_selection() {
        assert_eq!(control_layer(&gem_with(10, 11, 12)), None);
        assert_eq!(control_layer(&gem_from_end(5, 12)), Some(7));
        // handoff clamped to the last layer: nearest earlier candidate
        let g = Gem {
            caz_end: 8,
            ..gem_with(8, 11, 12)
        };
        assert_eq!(control_layer(&g), Some(10));
    }

    fn gem_from_end(caz_end: usize, n: usize) -> Gem {
        gem_with(caz_end, caz_end + 1, n)
    }

    #[test]
    fn no_candidate_is_skipped() {
        let spec = SyntheticSpec {
            noise_scale: 0.2,
            ..SyntheticSpec::simple(8, 3, 6, 30.0, 5)
        };
        let (set, _) = generate_synthetic(&spec).unwrap();
        let traj = compute_trajectory(&set);
        let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
        assert_eq!(gem.handoff_layer, 7);
        assert!(matches!(
            depth_matched_control(&set, &traj, &gem, &WidthRule::default(), None),
            Err(AblationError::NoCandidate)
        ));
    }

    #[test]
    fn empirical_p_floor_with_ten_seeds() {
        let spec = SyntheticSpec {
            noise_scale: 0.3,
            hidden_dim: 64,
            n_pairs: 32,
            ..SyntheticSpec::simple(10, 2, 5, 30.0, 8)
        };
        let (set, _) = generate_synthetic(&spec).unwrap();
        let traj = compute_trajectory(&set);
        let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
        let ctl = random_direction_control(&set, &traj, &gem, &WidthRule::default(), 10, 1).unwrap();
        assert!(ctl.beats_all);
        assert!((ctl.empirical_p - 1.0 / 11.0).abs() < 1e-12);
        assert_eq!(ctl.random_reductions_pct.len(), 10);
        // same seed, same draws
        let again = random_direction_control(&set, &traj, &gem, &WidthRule::default(), 10, 1).unwrap();
        assert_eq!(ctl, again);
    }

    #[test]
    fn zero_reduction_is_excluded() {
        // classes separated on axis 0 at every layer; the settled direction is
        // replaced by a probe that is orthogonal to all structure
        let n = 6;
        let mut dirs = vec![UnitVector::axis(4, 0); n];
        dirs[1] = UnitVector::axis(4, 1);
        let set = generate_planted(&PlantedSpec {
            model_id: "m".into(),
            concept: "c".into(),
            directions: dirs,
            separation: vec![3.0; n],
            n_pairs: 8,
            noise_scale: 0.0,
            rng_seed: 0,
        })
        .unwrap();
        // zero noise leaves zero variance, so add spread on axis 2 only
        let (m, mut pos, mut neg) = set.into_parts();
        for l in 0..n {
            for i in 0..8 {
                pos.set(l, i, 2, i as f32);
                neg.set(l, i, 2, i as f32);
            }
        }
        let set = ActivationSet::new(m, pos, neg).unwrap();
        let traj = compute_trajectory(&set);
        let mut gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
        gem.handoff_layer = 4;
        // replace the trajectory direction at the window with axis 3
        let mut dirs = traj.directions().to_vec();
        for d in dirs.iter_mut().skip(4) {
            *d = Some(UnitVector::axis(4, 3));
        }
        let traj = Trajectory::from_parts(dirs, traj.separation().to_vec());
        assert!(matches!(
            random_direction_control(&set, &traj, &gem, &WidthRule::default(), 10, 0),
            Err(AblationError::ExcludedZeroReduction { .. })
        ));
    }

    #[test]
    fn settled_probe_beats_pre_settling_control() {
        // fast rotation through layer 6, then a sub-threshold drift of
        // 15 deg/layer from layer 9 on: the control window keeps rotating
        let n = 14;
        let dirs: Vec<UnitVector> = (0..n)
            .map(|l| {
                let a: f64 = match l {
                    0..=2 => 0.0,
                    3..=6 => 35.0 * (l - 2) as f64,
                    7 | 8 => 140.0,
                    _ => 140.0 + 15.0 * (l - 8) as f64,
                };
                let mut v = vec![0.0; 8];
                v[0] = a.to_radians().cos();
                v[1] = a.to_radians().sin();
                UnitVector::new(v).unwrap()
            })
            .collect();
        let set = generate_planted(&PlantedSpec {
            model_id: "m".into(),
            concept: "c".into(),
            directions: dirs,
            separation: vec![4.0; n],
            n_pairs: 80,
            noise_scale: 0.1,
            rng_seed: 4,
        })
        .unwrap();
        let traj = compute_trajectory(&set);
        let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
        assert_eq!(gem.handoff_layer, 7);
        let ctl = depth_matched_control(&set, &traj, &gem, &WidthRule::default(), None).unwrap();
        assert_eq!(ctl.control_layer, 8);
        assert!(ctl.advantage_pp > 5.0, "{ctl:?}");
        assert!(ctl.gem_wins && !ctl.degenerate);
        assert_eq!(ctl.gem_record.measured_at, MeasuredAt::ProbeLayer);
    }

    #[test]
    fn propagated_control_measures_at_final_layer() {
        use crate::ablation::propagator::{DumpPropagator, RelaySpec, SyntheticRelay};
        let relay = SyntheticRelay::new(RelaySpec::two_stage(12, 2, 6, 0.7, 8)).unwrap();
        let set = relay.baseline().clone();
        let traj = compute_trajectory(&set);
        let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
        assert_eq!(gem.handoff_layer, 7);
        let rule = WidthRule::default();
        let live = depth_matched_control(&set, &traj, &gem, &rule, Some(&relay)).unwrap();
        assert_eq!(live.control_layer, 8);
        assert_eq!(live.gem_record.measured_at, MeasuredAt::FinalLayer);
        assert_eq!(live.gem_record.per_layer[0].layer, 11);
        // the stage direction carries the whole class gap downstream
        assert!(live.gem_record.retained_pct < 1.0, "{live:?}");

        let dir = tempfile::tempdir().unwrap();
        let sets = depth_control_patches(&set, &traj, &gem, &rule).unwrap();
        assert_eq!(sets[0].iter().map(|p| p.layer).collect::<Vec<_>>(), vec![7, 8, 9]);
        let (base, dumps) = relay.export_dumps(dir.path(), &sets).unwrap();
        let dumped = DumpPropagator::from_dirs(&base, &dumps).unwrap();
        let replay = depth_matched_control(&set, &traj, &gem, &rule, Some(&dumped)).unwrap();
        assert!((replay.advantage_pp - live.advantage_pp).abs() < 1e-4);
        assert!((replay.gem_record.retained_pct - live.gem_record.retained_pct).abs() < 1e-4);
    }
}
