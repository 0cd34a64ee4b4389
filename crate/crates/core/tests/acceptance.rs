// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Set `GEM_ACTIVATION_DATASET` to a directory of activation directories
//! (for example `<root>/gpt2/<concept>/`) to run the public-dataset check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gem_core::ablation::{
    ablate_and_score, compare_handoff_vs_peak, project_out, random_direction_control, subset_permutation,
    DirectionSource, RelaySpec, RelayStage, SyntheticRelay,
};
use gem_core::detector::{detect_handoff, WidthRule, DEFAULT_EPSILON};
use gem_core::geometry::{compute_direction, compute_trajectory, separation_score, UnitVector};
use gem_core::pipeline::{discover_corpus, run_study, RunConfig};
use gem_core::registry::builtin_registry;
use gem_core::stats::{fisher_exact_one_sided, net_expected_improvement, wilcoxon_signed_rank};
use gem_core::store::{ActivationSet, Manifest, Tensor3};
use gem_core::synthetic::{generate_corpus, generate_synthetic, random_orthonormal, CorpusSpec, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATASET_ENV: &str = "GEM_ACTIVATION_DATASET";

#[derive(Default)]
struct Gate {
    passed: usize,
    failed: Vec<String>,
}

impl Gate {
    fn record(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(name.to_owned());
        }
    }

    fn skip(&self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

fn random_set(rng: &mut ChaCha8Rng, n_layers: usize, n_pairs: usize, dim: usize) -> ActivationSet {
    let mut draw = |shift: f32| {
        let data = (0..n_layers * n_pairs * dim)
            .map(|_| rng.random_range(-2.0f32..2.0) + shift)
            .collect();
        Tensor3::from_vec(n_layers, n_pairs, dim, data).unwrap()
    };
    let pos = draw(0.5);
    let neg = draw(-0.5);
    ActivationSet::new(Manifest::new("oracle", "random", n_layers, n_pairs, dim), pos, neg).unwrap()
}

fn rows(t: &Tensor3, layer: usize) -> Vec<Vec<f64>> {
    let (_, k, _) = t.shape();
    (0..k).map(|i| t.row(layer, i).iter().map(|&x| x as f64).collect()).collect()
}

fn centroid(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies `f` to every stored row of both classes.
fn map_rows(set: &ActivationSet, f: impl Fn(&[f64]) -> Vec<f64>) -> ActivationSet {
    let out_dim = f(&vec![0.0; set.hidden_dim()]).len();
    let map = |t: &Tensor3| {
        let (l, k, _) = t.shape();
        let mut data = Vec::with_capacity(l * k * out_dim);
        for layer in 0..l {
            for row in rows(t, layer) {
                data.extend(f(&row).into_iter().map(|x| x as f32));
            }
        }
        Tensor3::from_vec(l, k, out_dim, data).unwrap()
    };
    let m = set.manifest();
    let manifest = Manifest::new(&m.model_id, &m.concept, m.n_layers, m.n_pairs, out_dim);
    ActivationSet::new(manifest, map(set.pos()), map(set.neg())).unwrap()
}

fn formula_oracles(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 1.0f64;
    for _ in 0..200 {
        let (l, k, d) = (rng.random_range(2..=4), rng.random_range(2..=32), rng.random_range(1..=16));
        let set = random_set(&mut rng, l, k, d);
        for layer in 0..l {
            let diff: Vec<f64> = centroid(&rows(set.pos(), layer))
                .iter()
                .zip(centroid(&rows(set.neg(), layer)))
                .map(|(p, n)| p - n)
                .collect();
            let u = compute_direction(&set, layer).unwrap();
            worst = worst.min(dot(u.as_slice(), &diff) / norm(&diff));
        }
    }
    gate.record(
        "direction matches centroid oracle (200 instances)",
        worst >= 1.0 - 1e-9,
        format!("min cosine {worst:.15}"),
    );

    // the same one-dimensional layer twice; manifests need two layers
    let pos = Tensor3::from_vec(2, 2, 1, vec![1.0, 3.0, 1.0, 3.0]).unwrap();
    let neg = Tensor3::from_vec(2, 2, 1, vec![-1.0, -3.0, -1.0, -3.0]).unwrap();
    let hand = ActivationSet::new(Manifest::new("hand", "case", 2, 2, 1), pos, neg).unwrap();
    let s = separation_score(&hand, 0).unwrap();
    let want = 4.0 / 2f64.sqrt();
    gate.record(
        "separation hand case equals 4/sqrt(2)",
        (s - want).abs() <= 1e-9,
        format!("S = {s:.15}, expected {want:.15}"),
    );

    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let (k, d) = (rng.random_range(2..=24), rng.random_range(2..=16));
        let set = random_set(&mut rng, 2, k, d);
        let base = separation_score(&set, 0).unwrap();
        let c = rng.random_range(0.1..10.0);
        let q = random_orthonormal(&mut rng, d, d);
        let scaled = map_rows(&set, |h| h.iter().map(|x| c * x).collect());
        let rotated = map_rows(&set, |h| q.iter().map(|row| dot(row, h)).collect());
        for s in [separation_score(&scaled, 0).unwrap(), separation_score(&rotated, 0).unwrap()] {
            worst_rel = worst_rel.max((s - base).abs() / base);
        }
    }
    gate.record(
        "separation scale and rotation invariance (100 instances)",
        worst_rel <= 1e-6,
        format!("max relative change {worst_rel:.3e}"),
    );

    let (mut worst_dot, mut worst_idem) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.random_range(1..=64);
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let u = loop {
            if let Some(u) = UnitVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()) {
                break u;
            }
        };
        let once = project_out(&h, &u).unwrap();
        let twice = project_out(&once, &u).unwrap();
        worst_dot = worst_dot.max(dot(&once, u.as_slice()).abs());
        worst_idem = worst_idem.max(once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    gate.record(
        "projection orthogonal and idempotent (1000 vectors)",
        worst_dot <= 1e-7 && worst_idem <= 1e-7,
        format!("max |residual . u| {worst_dot:.3e}, max idempotence gap {worst_idem:.3e}"),
    );
}

fn detection_spec(seed: u64, noise_fraction: f64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.random_range(12..=32);
    let caz_start = rng.random_range(1..n_layers / 3);
    let caz_end = rng.random_range(caz_start + 2..=n_layers - 3);
    let separation = rng.random_range(2.0..6.0);
    SyntheticSpec {
        n_layers,
        n_pairs: 32,
        hidden_dim: 16,
        caz_start,
        caz_end,
        rotation_degrees_per_layer: rng.random_range(25.0..80.0),
        separation_profile: vec![separation; n_layers],
        noise_scale: noise_fraction * separation,
        rng_seed: seed,
    }
}

fn detection_recovery(gate: &mut Gate) {
    let start = Instant::now();
    let mut exact = 0;
    let mut within_one = 0;
    for seed in 0..100u64 {
        let detect = |noise_fraction| {
            let (set, truth) = generate_synthetic(&detection_spec(seed, noise_fraction)).unwrap();
            let found = detect_handoff(&compute_trajectory(&set), DEFAULT_EPSILON).ok()?;
            Some(found.handoff_layer.abs_diff(truth.handoff_layer))
        };
        if detect(0.0) == Some(0) {
            exact += 1;
        }
        if detect(0.1).is_some_and(|off| off <= 1) {
            within_one += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.record(
        "detection exact without noise (100 specs)",
        exact == 100,
        format!("{exact}/100 exact"),
    );
    gate.record(
        "detection within one layer at noise 0.1x separation",
        within_one >= 95,
        format!("{within_one}/100 within one layer"),
    );
    gate.record("detection runtime under 10 s", secs < 10.0, format!("{secs:.2} s for 200 fixtures"));
}

/// Independent mid-rank signed-rank p-value by enumerating every sign flip.
fn sign_flip_p(values: &[f64], one_sided: bool) -> f64 {
    let kept: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    let n = kept.len();
    let ranks: Vec<f64> = kept
        .iter()
        .map(|v| {
            let below = kept.iter().filter(|w| w.abs() < v.abs()).count() as f64;
            let tied = kept.iter().filter(|w| w.abs() == v.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = kept.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        ge += (w >= observed - 1e-9) as u64;
        le += (w <= observed + 1e-9) as u64;
    }
    let total = (1u64 << n) as f64;
    if one_sided {
        ge as f64 / total
    } else {
        (2.0 * ge.min(le) as f64 / total).min(1.0)
    }
}

fn statistics(gate: &mut Gate) {
    let p = fisher_exact_one_sided(11, 2, 2, 5);
    gate.record("Fisher (11, 2, 2, 5) = 0.022", (p - 0.022).abs() <= 0.001, format!("p = {p:.5}"));
    let p = fisher_exact_one_sided(11, 1, 2, 5);
    gate.record("Fisher (11, 1, 2, 5) = 0.010", (p - 0.010).abs() <= 0.001, format!("p = {p:.5}"));
    let net = net_expected_improvement(20.4, 0.662, 16.9);
    gate.record(
        "net expected improvement = +7.8 pp",
        (net - 7.8).abs() <= 0.05,
        format!("{net:+.4} pp"),
    );

    // a concept that beats every seed sits at r = 0 of n = 10
    let (set, _) = generate_synthetic(&SyntheticSpec {
        noise_scale: 0.2,
        hidden_dim: 64,
        n_pairs: 32,
        ..SyntheticSpec::simple(12, 3, 6, 40.0, 7)
    })
    .unwrap();
    let traj = compute_trajectory(&set);
    let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
    let control = random_direction_control(&set, &traj, &gem, &WidthRule::default(), 10, 3).unwrap();
    gate.record(
        "empirical p floor with 10 seeds = 1/11",
        control.beats_all && (control.empirical_p - 1.0 / 11.0).abs() <= 1e-12,
        format!("empirical p {:.15}", control.empirical_p),
    );

    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=12usize {
        for trial in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64 * 100 + trial);
            // integer magnitudes force ties; an occasional zero is dropped
            let values: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-4i32..=5) as f64 * if trial % 2 == 0 { 1.0 } else { 0.37 })
                .collect();
            if values.iter().all(|&v| v == 0.0) {
                continue;
            }
            for one_sided in [true, false] {
                let got = wilcoxon_signed_rank(&values, one_sided).unwrap();
                worst = worst.max((got.p - sign_flip_p(&values, one_sided)).abs());
                cases += 1;
            }
        }
    }
    gate.record(
        "Wilcoxon exact path equals sign-flip enumeration (n <= 12)",
        worst <= 1e-12,
        format!("{cases} cases, max |p - oracle| {worst:.3e}"),
    );
    let r = wilcoxon_signed_rank(&[0.4, 1.2, 0.7, 2.0, 0.1], true).unwrap();
    gate.record(
        "Wilcoxon all-positive n = 5 gives p = 1/32",
        r.p == 0.03125 && r.w == 15.0,
        format!("W = {}, p = {}", r.w, r.p),
    );
}

/// Moves each class centroid onto `±separation/2 · u` per layer, keeping the
/// within-class spread, so the class difference lies entirely along `u`.
fn recenter(set: &ActivationSet, directions: &[UnitVector], separation: &[f64]) -> ActivationSet {
    let shift = |t: &Tensor3, sign: f64| {
        let (l, k, d) = t.shape();
        let mut data = Vec::with_capacity(l * k * d);
        for layer in 0..l {
            let r = rows(t, layer);
            let c = centroid(&r);
            let target: Vec<f64> = directions[layer]
                .as_slice()
                .iter()
                .map(|x| sign * 0.5 * separation[layer] * x)
                .collect();
            for row in r {
                data.extend((0..d).map(|j| (row[j] - c[j] + target[j]) as f32));
            }
        }
        Tensor3::from_vec(l, k, d, data).unwrap()
    };
    ActivationSet::new(set.manifest().clone(), shift(set.pos(), 1.0), shift(set.neg(), -1.0)).unwrap()
}

fn ablation(gate: &mut Gate) {
    let spec = SyntheticSpec {
        noise_scale: 0.2,
        hidden_dim: 32,
        n_pairs: 32,
        ..SyntheticSpec::simple(16, 4, 9, 35.0, 23)
    };
    let (noisy, truth) = generate_synthetic(&spec).unwrap();
    let set = recenter(&noisy, &truth.directions, &spec.separation_profile);
    let traj = compute_trajectory(&set);
    let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
    let cmp = compare_handoff_vs_peak(&set, &traj, &gem, &WidthRule::default()).unwrap();
    let h = truth.handoff_layer;
    let single = ablate_and_score(&set, h, 1, &truth.directions[h], DirectionSource::Handoff).unwrap();
    gate.record(
        "ablating the planted direction leaves at most 1%",
        cmp.handoff_record.retained_pct <= 1.0 && single.retained_pct <= 1.0,
        format!(
            "detected handoff window {:.2e}%, planted direction at the handoff {:.2e}%",
            cmp.handoff_record.retained_pct, single.retained_pct
        ),
    );

    // one extra coordinate that carries neither signal nor noise
    let d = set.hidden_dim();
    let padded = map_rows(&set, |h| h.iter().copied().chain([0.0]).collect());
    let probe = UnitVector::axis(d + 1, d);
    let orth = ablate_and_score(&padded, h, 3, &probe, DirectionSource::ControlLayer).unwrap();
    gate.record(
        "orthogonal probe retains 100 +/- 0.1%",
        (orth.retained_pct - 100.0).abs() <= 0.1,
        format!("{:.6}%", orth.retained_pct),
    );

    let (iso, _) = generate_synthetic(&SyntheticSpec {
        noise_scale: 0.3,
        hidden_dim: 512,
        n_pairs: 32,
        ..SyntheticSpec::simple(12, 3, 7, 40.0, 99)
    })
    .unwrap();
    let traj = compute_trajectory(&iso);
    let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
    let rc = random_direction_control(&iso, &traj, &gem, &WidthRule::default(), 10, 5).unwrap();
    gate.record(
        "random directions at d = 512 stay under 1% and the concept beats all 10",
        rc.mean_random_reduction_pct < 1.0 && rc.beats_all && rc.n_seeds == 10,
        format!(
            "mean random {:.4}%, concept {:.2}%",
            rc.mean_random_reduction_pct, rc.concept_reduction_pct
        ),
    );
}

fn relay(gate: &mut Gate) {
    let feed = 0.7;
    let r = SyntheticRelay::new(RelaySpec::two_stage(12, 2, 6, feed, 41)).unwrap();
    let report = subset_permutation(&r.nodes().unwrap(), &r, &[]).unwrap();
    let cd = report.cross_disruption.unwrap_or(f64::NAN);
    gate.record(
        "relay dominant node is the deep node",
        report.dominant_node == 1,
        format!("dominant {}", report.dominant_node),
    );
    gate.record(
        "relay cross-disruption within 5% of the feed",
        (cd - feed).abs() <= 0.05 * feed,
        format!("{cd:.9} vs {feed}"),
    );

    let mut counts = Vec::new();
    for n in 1..=4usize {
        let mut spec = RelaySpec::two_stage(4 * n + 4, 1, 5, feed, n as u64);
        spec.stages = (0..n).map(|i| RelayStage { layer: 1 + 4 * i, feed: if i == 0 { 0.0 } else { feed } }).collect();
        let r = SyntheticRelay::new(spec).unwrap();
        let report = subset_permutation(&r.nodes().unwrap(), &r, &[]).unwrap();
        counts.push((n, report.per_subset.len()));
    }
    gate.record(
        "relay subset count is 2^n - 1",
        counts.iter().all(|&(n, c)| c == (1 << n) - 1),
        format!("{counts:?}"),
    );
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(gate: &mut Gate) {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let registry = generate_corpus(&corpus, &CorpusSpec::bundled()).unwrap();
    let index = discover_corpus(&corpus, &registry).unwrap();
    let run = |workers: usize, name: &str| {
        let config = RunConfig {
            output_dir: tmp.path().join(name),
            workers,
            ..RunConfig::default()
        };
        run_study(&index, &config).unwrap();
        files_under(&config.output_dir)
    };
    let one = run(1, "w1");
    let four = run(4, "w4");
    let again = run(4, "w4-again");
    let identical = one == four && four == again;
    gate.record(
        "study output is byte-identical across worker counts",
        identical && one.len() == index.entries.len() + 2,
        format!("{} files, 1 vs 4 vs 4 workers identical: {identical}", one.len()),
    );
}

fn public_dataset(gate: &mut Gate) {
    let name = "public dataset mean EEC (gpt2 0.083, pythia-70m 0.250, +/- 0.05)";
    let Some(root) = std::env::var_os(DATASET_ENV) else {
        gate.skip(name, &format!("{DATASET_ENV} not set"));
        return;
    };
    let index = match discover_corpus(Path::new(&root), &builtin_registry()) {
        Ok(index) => index,
        Err(e) => return gate.record(name, false, e.to_string()),
    };
    let mut eecs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in &index.entries {
        let set = gem_core::store::load_activation_set(&entry.path).unwrap();
        if let Some(e) = detect_handoff(&compute_trajectory(&set), DEFAULT_EPSILON).ok().and_then(|g| g.eec) {
            eecs.entry(entry.model_id.clone()).or_default().push(e);
        }
    }
    let mut checked = Vec::new();
    let mut pass = true;
    for (model, want) in [("gpt2", 0.083), ("pythia-70m", 0.250)] {
        if let Some(v) = eecs.get(model) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            pass &= (mean - want).abs() <= 0.05;
            checked.push(format!("{model} {mean:.3} over {} concepts (expected {want})", v.len()));
        }
    }
    if checked.is_empty() {
        gate.skip(name, "no gpt2 or pythia-70m directories found");
    } else {
        gate.record(name, pass, checked.join("; "));
    }
}

fn main() {
    let mut gate = Gate::default();
    formula_oracles(&mut gate);
    detection_recovery(&mut gate);
    statistics(&mut gate);
    ablation(&mut gate);
    relay(&mut gate);
    determinism(&mut gate);
    public_dataset(&mut gate);
    println!(
        "acceptance: {} passed, {} failed",
        gate.passed,
        gate.failed.len()
    );
    if !gate.failed.is_empty() {
        std::process::exit(1);
    }
}
