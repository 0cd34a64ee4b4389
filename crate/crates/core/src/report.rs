// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plot-ready CSV data derived from a finished study.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pipeline::{load_study, PairReport, PairState, PipelineError, SUMMARY_JSON};
use crate::store::write_atomic;

pub const EEC_HISTOGRAM_CSV: &str = "fig1_eec_histogram.csv";
pub const CONCEPT_EEC_CSV: &str = "fig1_concept_eec.csv";
pub const RANDOM_REDUCTIONS_CSV: &str = "fig2_random_reductions.csv";
pub const EEC_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no finished study in {0}")]
    MissingStudy(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureFiles {
    pub written: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// Counts over `EEC_BINS` equal bins on [-1, 1]; 1 falls in the last bin.
pub fn eec_histogram(values: &[f64]) -> Vec<(f64, f64, usize)> {
    let width = 2.0 / EEC_BINS as f64;
    let mut counts = vec![0usize; EEC_BINS];
    for &v in values {
        let idx = (((v + 1.0) / width).floor() as isize).clamp(0, EEC_BINS as isize - 1) as usize;
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-1.0 + i as f64 * width, -1.0 + (i + 1) as f64 * width, c))
        .collect()
}

/// Mean and standard error (Bessel) of `values`; the error needs two values.
pub fn mean_sem(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some((mean, sem))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(header).expect("in-memory write");
    for row in rows {
        out.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

fn concept_rows(reports: &[PairReport]) -> String {
    let mut by_concept: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for r in reports {
        if let Some(e) = r.gem.as_ref().and_then(|g| g.gem.eec) {
            by_concept.entry(r.meta.concept.as_str()).or_default().push(e);
        }
    }
    let rows = by_concept.into_iter().map(|(concept, values)| {
        let (m, sem) = mean_sem(&values).expect("non-empty group");
        let sem = sem.map(|s| s.to_string()).unwrap_or_default();
        vec![concept.to_owned(), values.len().to_string(), m.to_string(), sem]
    });
    csv_text(&["concept", "n", "mean_eec", "sem"], rows)
}

fn random_rows(reports: &[PairReport]) -> Option<String> {
    let mut rows = Vec::new();
    for r in reports.iter().filter(|r| r.status.state == PairState::Ok) {
        let Some(c) = r.controls.random.as_ref() else { continue };
        let id = [r.meta.cohort.label().to_string(), r.meta.model_id.clone(), r.meta.concept.clone()];
        let row = |kind: &str, seed: String, v: f64| {
            let mut row = id.to_vec();
            row.extend([kind.to_owned(), seed, v.to_string()]);
            row
        };
        rows.push(row("concept", String::new(), c.concept_reduction_pct));
        for (seed, &v) in c.random_reductions_pct.iter().enumerate() {
            rows.push(row("random", seed.to_string(), v));
        }
    }
    (!rows.is_empty())
        .then(|| csv_text(&["cohort", "model_id", "concept", "kind", "seed", "reduction_pct"], rows))
}

/// Writes the figure CSVs for the study in `study_dir` into `out_dir`.
pub fn write_figures(study_dir: &Path, out_dir: &Path) -> Result<FigureFiles, ReportError> {
    if !study_dir.join(SUMMARY_JSON).is_file() {
        return Err(ReportError::MissingStudy(study_dir.to_path_buf()));
    }
    let (_, reports) = load_study(study_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut written = Vec::new();
    let mut notices = Vec::new();

    let eecs: Vec<f64> = reports.iter().filter_map(|r| r.gem.as_ref().and_then(|g| g.gem.eec)).collect();
    let hist = csv_text(
        &["bin_lo", "bin_hi", "count"],
        eec_histogram(&eecs)
            .into_iter()
            .map(|(lo, hi, c)| vec![lo.to_string(), hi.to_string(), c.to_string()]),
    );
    for (name, body) in [(EEC_HISTOGRAM_CSV, hist), (CONCEPT_EEC_CSV, concept_rows(&reports))] {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    match random_rows(&reports) {
        Some(body) => {
            let path = out_dir.join(RANDOM_REDUCTIONS_CSV);
            write_atomic(&path, body.as_bytes())?;
            written.push(path);
        }
        None => notices.push(format!(
            "{RANDOM_REDUCTIONS_CSV} not written: the study has no random-direction control results"
        )),
    }
    Ok(FigureFiles { written, notices })
}
