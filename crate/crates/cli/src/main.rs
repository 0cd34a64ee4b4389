// SPDX-License-Identifier: MIT OR Apache-2.0

//! `gem`: command-line front end for gem-core.
//!
//! Exit codes: 0 success, 2 input error, 3 degenerate result, 4 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gem_core::ablation::{
    ablate_and_score, AblationError, compare_adaptive_width, compare_handoff_vs_peak, depth_control_patches, depth_matched_control,
    plan_window, random_direction_control, subset_permutation, window_direction, DirectionSource, DumpPropagator,
    Patch, Propagator, RelaySpec, RelayStage, SyntheticRelay, write_patch_plan,
};
use gem_core::detector::{
    detect_handoff, detect_nodes, peak_layer, DetectError, WidthRule, DEFAULT_EPSILON, DEFAULT_PROMINENCE_FRACTION,
};
use gem_core::geometry::compute_trajectory;
use gem_core::pipeline::{
    discover_corpus, run_study, Controls, GemReport, RunConfig, TrajectoryReport, SUMMARY_CSV, SUMMARY_JSON,
};
use gem_core::registry::{builtin_registry, load_registry, ModelMeta};
use gem_core::report::write_figures;
use gem_core::store::{load_activation_set, write_activation_set, ActivationSet};
use gem_core::synthetic::{generate_corpus, generate_synthetic, CorpusSpec, SyntheticSpec};
use gem_core::Error;
use serde_json::{json, Value};

const EXIT_INPUT: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "gem", version, about = "Concept-direction geometry, handoff detection and ablation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct Global {
    /// Angular-velocity threshold for the rotation zone.
    #[arg(long, global = true, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Relative handoff depth above which the ablation width drops to 1.
    #[arg(long, global = true, default_value_t = 0.85)]
    near_final_threshold: f64,
    /// Only apply the near-final rule to models with at least 20 layers.
    #[arg(long, global = true)]
    depth_corrected: bool,
    /// Fixed ablation width for `ablate --layer`, overriding the width rule.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    width: Option<u32>,
    /// Random directions per pair in the specificity control.
    #[arg(long, global = true, default_value_t = 10)]
    seeds: usize,
    #[arg(long, global = true, default_value_t = 0)]
    rng_seed: u64,
    /// Output file, or output directory for synth, study and report.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Model registry JSON; defaults to the corpus registry.json or the built-in table.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
}

impl Global {
    fn width_rule(&self) -> WidthRule {
        WidthRule {
            threshold: self.near_final_threshold,
            depth_corrected: self.depth_corrected,
            ..WidthRule::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted activation directory, or the bundled demo corpus.
    Synth(SynthArgs),
    /// Check an activation directory against its manifest.
    Validate { dir: PathBuf },
    /// Per-layer trajectory and handoff detection.
    Analyze {
        dir: PathBuf,
        /// Also report the zone end for each of these thresholds.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Handoff-vs-peak comparison, or a single ablation with --layer.
    Ablate {
        dir: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Random-direction and depth-matched controls.
    Control {
        dir: PathBuf,
        /// Patched dumps of DIR to measure the depth-matched control at the final layer.
        #[arg(long, num_args = 1..)]
        patched: Vec<PathBuf>,
        /// Write the patch plan the depth-matched control needs and exit.
        #[arg(long)]
        emit_patches: Option<PathBuf>,
    },
    /// Subset-permutation relay analysis.
    Relay(RelayArgs),
    /// Run the whole analysis over a corpus directory.
    Study {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Recompute pairs that already have matching outputs.
        #[arg(long)]
        force: bool,
        /// Skip the random, depth-matched and width controls.
        #[arg(long)]
        no_controls: bool,
    },
    /// Figure data from a finished study.
    Report { study_dir: PathBuf },
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Write the bundled three-model corpus instead of a single directory.
    #[arg(long)]
    corpus: bool,
    #[arg(long, default_value_t = 24)]
    layers: usize,
    #[arg(long, default_value_t = 6)]
    caz_start: usize,
    #[arg(long, default_value_t = 14)]
    caz_end: usize,
    /// Degrees per layer inside the zone.
    #[arg(long, default_value_t = 30.0)]
    rotation: f64,
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Debug, Args)]
struct RelayArgs {
    /// Baseline activation directory; omit with --synthetic.
    dir: Option<PathBuf>,
    /// Use the built-in synthetic relay.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic relay: share of each stage's signal read from the previous stage.
    #[arg(long, default_value_t = 0.7)]
    feed: f64,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    /// Synthetic relay: stage layers, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 6])]
    stages: Vec<usize>,
    /// Extra layers to measure besides the node handoffs and the final layer.
    #[arg(long, value_delimiter = ',')]
    measure: Vec<usize>,
    /// Patched dumps of DIR, one per node subset.
    #[arg(long, num_args = 1..)]
    patched: Vec<PathBuf>,
    /// Write the patch plan for every node subset and exit.
    #[arg(long)]
    emit_patches: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_input_error() { EXIT_INPUT } else { EXIT_INTERNAL },
            message: e.to_string(),
        }
    }
}

macro_rules! impl_from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from_core!(
    gem_core::store::StoreError,
    gem_core::geometry::GeometryError,
    gem_core::detector::DetectError,
    gem_core::ablation::AblationError,
    gem_core::ablation::PropagatorError,
    gem_core::registry::RegistryError,
    gem_core::synthetic::SyntheticError,
    gem_core::pipeline::PipelineError,
    gem_core::report::ReportError
);

fn input(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

/// Normal completion; `degenerate` maps to exit code 3.
struct Done {
    degenerate: bool,
}

const OK: Result<Done, Failure> = Ok(Done { degenerate: false });

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Done { degenerate: false }) => ExitCode::SUCCESS,
        Ok(Done { degenerate: true }) => ExitCode::from(EXIT_DEGENERATE),
        Err(f) => {
            eprintln!("gem: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<Done, Failure> {
    let g = &cli.global;
    g.width_rule().validate()?;
    if !(g.epsilon > 0.0 && g.epsilon < 1.0) {
        return Err(input(format!("--epsilon must be in (0, 1), got {}", g.epsilon)));
    }
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Validate { dir } => validate(g, dir),
        Command::Analyze { dir, sweep } => analyze(g, dir, sweep),
        Command::Ablate { dir, layer } => ablate(g, dir, *layer),
        Command::Control {
            dir,
            patched,
            emit_patches,
        } => control(g, dir, patched, emit_patches.as_deref()),
        Command::Relay(a) => relay(g, a),
        Command::Study {
            corpus,
            workers,
            force,
            no_controls,
        } => study(g, corpus, *workers, *force, *no_controls),
        Command::Report { study_dir } => report(g, study_dir),
    }
}

/// Writes `json` or `csv` to `--out` or standard output.
fn emit(g: &Global, json: &Value, csv: impl FnOnce() -> String) -> Result<(), Failure> {
    let body = match g.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(json).expect("value serializes");
            s.push('\n');
            s
        }
        Format::Csv => csv(),
    };
    match &g.out {
        Some(path) => std::fs::write(path, body).map_err(|e| input(format!("writing {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Failure {
                code: EXIT_INTERNAL,
                message: e.to_string(),
            }),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// CSV text with a header row; fields are quoted where needed.
fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(header).expect("in-memory write");
    for row in rows {
        out.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn out_dir(g: &Global, what: &str) -> Result<PathBuf, Failure> {
    g.out.clone().ok_or_else(|| input(format!("{what} needs --out DIR")))
}

fn synth(g: &Global, a: &SynthArgs) -> Result<Done, Failure> {
    let out = out_dir(g, "synth")?;
    if a.corpus {
        let registry = generate_corpus(&out, &CorpusSpec::bundled())?;
        eprintln!("wrote {} models to {}", registry.len(), out.display());
        return OK;
    }
    let spec = SyntheticSpec {
        n_layers: a.layers,
        n_pairs: a.pairs,
        hidden_dim: a.dim,
        caz_start: a.caz_start,
        caz_end: a.caz_end,
        rotation_degrees_per_layer: a.rotation,
        separation_profile: vec![a.separation; a.layers],
        noise_scale: a.noise,
        rng_seed: g.rng_seed,
    };
    let (set, truth) = generate_synthetic(&spec)?;
    write_activation_set(&set, &out)?;
    let truth = json!({
        "caz_start": truth.caz_start,
        "caz_end": truth.caz_end,
        "handoff_layer": truth.handoff_layer,
    });
    let mut s = serde_json::to_string_pretty(&truth).expect("value serializes");
    s.push('\n');
    print!("{s}");
    OK
}

fn validate(g: &Global, dir: &Path) -> Result<Done, Failure> {
    let set = load_activation_set(dir)?;
    let m = set.manifest();
    let v = json!({
        "valid": true,
        "model_id": m.model_id,
        "concept": m.concept,
        "n_layers": m.n_layers,
        "n_pairs": m.n_pairs,
        "hidden_dim": m.hidden_dim,
    });
    emit(g, &v, || {
        csv_text(
            &["model_id", "concept", "n_layers", "n_pairs", "hidden_dim", "valid"],
            [vec![
                m.model_id.clone(),
                m.concept.clone(),
                m.n_layers.to_string(),
                m.n_pairs.to_string(),
                m.hidden_dim.to_string(),
                "true".to_owned(),
            ]],
        )
    })?;
    OK
}

fn analyze(g: &Global, dir: &Path, sweep: &[f64]) -> Result<Done, Failure> {
    let set = load_activation_set(dir)?;
    let traj = compute_trajectory(&set);
    let report = TrajectoryReport::from(&traj);
    let detected = detect_handoff(&traj, g.epsilon).and_then(|gem| Ok(GemReport { peak_layer: peak_layer(&traj)?, gem }));
    let (gem, degenerate) = match detected {
        Ok(r) => (Some(r), false),
        Err(e @ DetectError::InvalidParameter(_)) => return Err(e.into()),
        Err(e) => {
            eprintln!("gem: detection failed: {e}");
            (None, true)
        }
    };
    let sweep_rows = sweep
        .iter()
        .map(|&eps| {
            let gem = detect_handoff(&traj, eps)?;
            Ok(json!({"epsilon": eps, "caz_end": gem.caz_end, "handoff_layer": gem.handoff_layer}))
        })
        .collect::<Result<Vec<Value>, DetectError>>()?;
    let v = json!({
        "model_id": set.model_id(),
        "concept": set.concept(),
        "n_layers": set.n_layers(),
        "epsilon": g.epsilon,
        "trajectory": to_value(&report),
        "gem": gem.as_ref().map(to_value),
        "sweep": sweep_rows,
    });
    emit(g, &v, || {
        let rows = (0..traj.n_layers()).map(|l| {
            vec![
                l.to_string(),
                cell(report.separation[l]),
                cell(report.angular_velocity[l]),
                cell(report.stability[l]),
                cell(report.cosine_to_final[l]),
            ]
        });
        csv_text(&["layer", "separation", "angular_velocity", "stability", "cosine_to_final"], rows)
    })?;
    Ok(Done { degenerate })
}

fn ablate(g: &Global, dir: &Path, layer: Option<usize>) -> Result<Done, Failure> {
    let set = load_activation_set(dir)?;
    let traj = compute_trajectory(&set);
    let rule = g.width_rule();
    if let Some(layer) = layer {
        if layer >= set.n_layers() {
            return Err(input(format!("--layer {layer} outside {} layers", set.n_layers())));
        }
        let width = match g.width {
            Some(w) => gem_core::ablation::effective_width(layer, w as usize, set.n_layers()),
            None => plan_window(layer, set.n_layers(), &rule).width,
        };
        let u = window_direction(&traj, layer, width)?;
        let rec = ablate_and_score(&set, layer, width, &u, DirectionSource::ControlLayer)?;
        emit(g, &to_value(&rec), || {
            let rows = rec
                .per_layer
                .iter()
                .map(|p| vec![p.layer.to_string(), p.baseline.to_string(), p.ablated.to_string()]);
            csv_text(&["layer", "baseline", "ablated"], rows)
        })?;
        return Ok(Done {
            degenerate: rec.is_degenerate(),
        });
    }
    let gem = detect_handoff(&traj, g.epsilon)?;
    let cmp = compare_handoff_vs_peak(&set, &traj, &gem, &rule)?;
    let width = compare_adaptive_width(&set, &traj, &gem, &rule)?;
    let v = json!({"comparison": to_value(&cmp), "adaptive_width": to_value(&width)});
    emit(g, &v, || {
        let outcome = to_value(&cmp.outcome);
        csv_text(
            &[
                "model_id",
                "concept",
                "handoff_layer",
                "handoff_width",
                "handoff_retained_pct",
                "peak_layer",
                "peak_width",
                "peak_retained_pct",
                "delta_pp",
                "outcome",
                "adaptive_triggered",
                "adaptive_delta_pp",
            ],
            [vec![
                cmp.model_id.clone(),
                cmp.concept.clone(),
                cmp.handoff_window.layer.to_string(),
                cmp.handoff_window.width.to_string(),
                cmp.handoff_record.retained_pct.to_string(),
                cmp.peak_window.layer.to_string(),
                cmp.peak_window.width.to_string(),
                cmp.peak_record.retained_pct.to_string(),
                cmp.delta_pp.to_string(),
                outcome.as_str().unwrap_or_default().to_owned(),
                width.triggered.to_string(),
                width.delta_pp.to_string(),
            ]],
        )
    })?;
    Ok(Done {
        degenerate: cmp.is_degenerate(),
    })
}

fn control(g: &Global, dir: &Path, patched: &[PathBuf], emit_patches: Option<&Path>) -> Result<Done, Failure> {
    let set = load_activation_set(dir)?;
    let traj = compute_trajectory(&set);
    let rule = g.width_rule();
    let gem = detect_handoff(&traj, g.epsilon)?;
    if let Some(plan_dir) = emit_patches {
        let sets = depth_control_patches(&set, &traj, &gem, &rule)?;
        let plan = write_patch_plan(plan_dir, &sets)?;
        eprintln!("wrote a plan for {} patched dumps to {}", plan.len(), plan_dir.display());
        return OK;
    }
    let propagator = if patched.is_empty() {
        None
    } else {
        Some(DumpPropagator::from_dirs(dir, patched)?)
    };
    let random = random_direction_control(&set, &traj, &gem, &rule, g.seeds, g.rng_seed);
    let depth = depth_matched_control(&set, &traj, &gem, &rule, propagator.as_ref().map(|p| p as &dyn Propagator));
    if let Err(e @ AblationError::PropagatorFailure(_)) = depth {
        return Err(e.into());
    }
    let degenerate = matches!(&depth, Ok(d) if d.degenerate);
    let v = json!({
        "random": random.as_ref().ok().map(to_value),
        "random_error": random.as_ref().err().map(ToString::to_string),
        "depth_matched": depth.as_ref().ok().map(to_value),
        "depth_matched_error": depth.as_ref().err().map(ToString::to_string),
    });
    emit(g, &v, || {
        let row = |control: &str, source: String, v: f64| vec![control.to_owned(), source, v.to_string()];
        let mut rows = Vec::new();
        if let Ok(r) = &random {
            rows.push(row("random", "concept_reduction".to_owned(), r.concept_reduction_pct));
            for (i, &x) in r.random_reductions_pct.iter().enumerate() {
                rows.push(row("random", format!("seed_{i}_reduction"), x));
            }
        }
        if let Ok(d) = &depth {
            rows.push(row("depth_matched", "gem_retained".to_owned(), d.gem_record.retained_pct));
            rows.push(row("depth_matched", "control_retained".to_owned(), d.control_record.retained_pct));
        }
        csv_text(&["control", "source", "retained_or_reduction_pct"], rows)
    })?;
    Ok(Done { degenerate })
}

const RELAY_COLUMNS: [&str; 3] = ["subset", "layer", "reduction"];

fn subsets(n: usize) -> Vec<Vec<usize>> {
    (1u32..(1u32 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

fn relay(g: &Global, a: &RelayArgs) -> Result<Done, Failure> {
    let (report, degenerate) = if a.synthetic {
        if a.dir.is_some() {
            return Err(input("relay takes either DIR or --synthetic"));
        }
        let spec = RelaySpec {
            model_id: "synthetic-relay".to_owned(),
            concept: "relay".to_owned(),
            n_layers: a.layers,
            stages: a.stages.iter().map(|&layer| RelayStage { layer, feed: a.feed }).collect(),
            rng_seed: g.rng_seed,
            ..RelaySpec::two_stage(a.layers, 0, 1, a.feed, g.rng_seed)
        };
        let relay = SyntheticRelay::new(spec)?;
        let nodes = relay.nodes()?;
        (subset_permutation(&nodes, &relay, &a.measure)?, false)
    } else {
        let dir = a.dir.as_deref().ok_or_else(|| input("relay needs DIR or --synthetic"))?;
        let set: ActivationSet = load_activation_set(dir)?;
        let traj = compute_trajectory(&set);
        let nodes = detect_nodes(&traj, g.epsilon, DEFAULT_PROMINENCE_FRACTION)?;
        if nodes.is_empty() {
            eprintln!("gem: no relay nodes detected");
            emit(g, &json!({"nodes": []}), || csv_text(&RELAY_COLUMNS, []))?;
            return Ok(Done { degenerate: true });
        }
        if let Some(plan_dir) = &a.emit_patches {
            let sets: Vec<Vec<Patch>> = subsets(nodes.len())
                .into_iter()
                .map(|s| {
                    s.into_iter()
                        .map(|i| Patch {
                            layer: nodes[i].node_handoff,
                            direction: nodes[i].node_direction.clone(),
                        })
                        .collect()
                })
                .collect();
            let plan = write_patch_plan(plan_dir, &sets)?;
            eprintln!("wrote a plan for {} patched dumps to {}", plan.len(), plan_dir.display());
            return OK;
        }
        if a.patched.is_empty() {
            return Err(input("relay on DIR needs --patched dumps (see --emit-patches)"));
        }
        let propagator = DumpPropagator::from_dirs(dir, &a.patched)?;
        (subset_permutation(&nodes, &propagator, &a.measure)?, false)
    };
    emit(g, &to_value(&report), || {
        let rows = report.per_subset.iter().flat_map(|sub| {
            let name = sub.nodes.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
            sub.reductions
                .iter()
                .map(move |r| vec![name.clone(), r.layer.to_string(), r.reduction.to_string()])
        });
        csv_text(&RELAY_COLUMNS, rows)
    })?;
    Ok(Done { degenerate })
}

fn registry_for(g: &Global, corpus: &Path) -> Result<Vec<ModelMeta>, Failure> {
    if let Some(path) = &g.registry {
        return Ok(load_registry(path)?);
    }
    let local = corpus.join("registry.json");
    if local.is_file() {
        return Ok(load_registry(&local)?);
    }
    Ok(builtin_registry())
}

fn study(g: &Global, corpus: &Path, workers: usize, force: bool, no_controls: bool) -> Result<Done, Failure> {
    let registry = registry_for(g, corpus)?;
    let index = discover_corpus(corpus, &registry)?;
    for d in &index.diagnostics {
        eprintln!("gem: skipped {}: {}", d.path.display(), d.reason);
    }
    let enabled = !no_controls;
    let config = RunConfig {
        epsilon: g.epsilon,
        width_rule: g.width_rule(),
        n_random_seeds: g.seeds,
        rng_seed: g.rng_seed,
        controls: Controls {
            random: enabled,
            depth_matched: enabled,
            adaptive_width: enabled,
        },
        output_dir: g.out.clone().unwrap_or_else(|| PathBuf::from("gem-study")),
        workers,
        force,
    };
    let summary = run_study(&index, &config)?;
    eprintln!(
        "{} pairs: {} ok, {} degenerate, {} failed; wrote {} and {} in {}",
        summary.n_entries,
        summary.n_ok,
        summary.n_degenerate,
        summary.n_failed,
        SUMMARY_JSON,
        SUMMARY_CSV,
        config.output_dir.display()
    );
    OK
}

fn report(g: &Global, study_dir: &Path) -> Result<Done, Failure> {
    let out = g.out.clone().unwrap_or_else(|| study_dir.join("figures"));
    let files = write_figures(study_dir, &out)?;
    for n in &files.notices {
        eprintln!("gem: {n}");
    }
    for p in &files.written {
        println!("{}", p.display());
    }
    OK
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults_match_run_config() {
        let cli = Cli::try_parse_from(["gem", "validate", "x"]).unwrap();
        let config = RunConfig::default();
        assert_eq!(cli.global.width_rule(), config.width_rule);
        assert_eq!(cli.global.epsilon, config.epsilon);
        assert_eq!(cli.global.seeds, config.n_random_seeds);
        assert_eq!(cli.global.rng_seed, config.rng_seed);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["gem", "validate", "x", "--bogus"]).is_err());
    }

    #[test]
    fn subset_enumeration() {
        assert_eq!(subsets(2), vec![vec![0], vec![1], vec![0, 1]]);
        assert_eq!(subsets(3).len(), 7);
    }
}
