// SPDX-License-Identifier: MIT OR Apache-2.0

//! Signed-rank and exact tests plus the corpus-level aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ablation::{ComparisonRecord, Outcome};
use crate::registry::{Cohort, ModelMeta, ScaleBucket};

/// Largest `n_used` for which the signed-rank null is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("all values are zero")]
    AllZero,
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("need at least {need} values, got {got}")]
    TooFewValues { need: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("model {0} is not in the registry")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive values.
    pub w: f64,
    pub p: f64,
    pub n_used: usize,
    pub exact: bool,
}

/// Mid-ranks (1-based) of `abs` sorted ascending, plus tie group sizes.
fn mid_ranks(abs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Wilcoxon signed-rank test against a zero median. Exact zeros are dropped.
/// One-sided tests the alternative that values tend to be positive.
pub fn wilcoxon_signed_rank(values: &[f64], one_sided: bool) -> Result<WilcoxonResult, StatsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let kept: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if kept.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = kept.len();
    let abs: Vec<f64> = kept.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = mid_ranks(&abs);
    let w: f64 = kept.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        let p = exact_p(&ranks, w, one_sided);
        return Ok(WilcoxonResult { w, p, n_used: n, exact: true });
    }
    let p = normal_p(&ties, n, w, one_sided);
    Ok(WilcoxonResult { w, p, n_used: n, exact: false })
}

/// Null distribution of the positive rank sum by dynamic programming.
fn exact_p(ranks: &[f64], w: f64, one_sided: bool) -> f64 {
    // mid-ranks are multiples of 1/2, so doubled ranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w).round() as usize;
    let upper = counts[w2..].iter().sum::<f64>() / all;
    if one_sided {
        upper
    } else {
        let lower = counts[..=w2].iter().sum::<f64>() / all;
        (2.0 * upper.min(lower)).min(1.0)
    }
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(ties: &[usize], n: usize, w: f64, one_sided: bool) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let normal = Normal::standard();
    if sd == 0.0 {
        1.0
    } else if one_sided {
        normal.sf((w - mean - 0.5) / sd)
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
        (2.0 * normal.sf(z)).min(1.0)
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// One-sided Fisher exact test on the 2×2 table `[[a, b], [c, d]]`:
/// the probability of a top-left count of at least `a` with all margins fixed.
pub fn fisher_exact_one_sided(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let row = a + b;
    let col = a + c;
    let n = a + b + c + d;
    let hi = row.min(col);
    let denom = ln_choose(n, col);
    let p: f64 = (a..=hi)
        .filter(|&x| col - x <= c + d)
        .map(|x| (ln_choose(row, x) + ln_choose(c + d, col - x) - denom).exp())
        .sum();
    p.min(1.0)
}

/// Standard score of `concept` against `sample`, with Bessel-corrected spread.
pub fn empirical_z(concept: f64, sample: &[f64]) -> Result<f64, StatsError> {
    if sample.len() < 2 {
        return Err(StatsError::TooFewValues { need: 2, got: sample.len() });
    }
    if !concept.is_finite() || sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((concept - mean) / var.sqrt())
}

/// Expected gain from switching probes: `improvement * rate - degradation * (1 - rate)`.
pub fn net_expected_improvement(mean_improvement: f64, improvement_rate: f64, mean_degradation: f64) -> f64 {
    mean_improvement * improvement_rate - mean_degradation * (1.0 - improvement_rate)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub handoff_better: usize,
    pub peak_better: usize,
    pub tie: usize,
}

impl OutcomeCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::HandoffBetter => self.handoff_better += 1,
            Outcome::PeakBetter => self.peak_better += 1,
            Outcome::Tie => self.tie += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.handoff_better + self.peak_better + self.tie
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProportion {
    pub model_id: String,
    pub cohort: Cohort,
    pub params: u64,
    pub n_degenerate: usize,
    pub outcomes: OutcomeCounts,
    /// Handoff-better share of the non-degenerate concepts.
    pub proportion: Option<f64>,
    /// Strictly more handoff wins than peak wins.
    pub prefers_handoff: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub bucket: ScaleBucket,
    pub n_models: usize,
    pub n_pairs: usize,
    pub n_degenerate: usize,
    pub outcomes: OutcomeCounts,
    /// Handoff-better share of the non-degenerate pairs.
    pub rate: Option<f64>,
}

/// Models preferring the handoff probe, MHA vs GQA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub mha_prefer: u64,
    pub mha_other: u64,
    pub gqa_prefer: u64,
    pub gqa_other: u64,
    pub fisher_p: f64,
    /// Models left out of the table (alternating or other attention).
    pub excluded_models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_records: usize,
    pub n_degenerate: usize,
    pub degenerate_pairs: Vec<String>,
    pub outcomes: OutcomeCounts,
    /// Handoff-better share of the non-degenerate pairs, ties included in the denominator.
    pub handoff_rate: Option<f64>,
    pub per_model: Vec<ModelProportion>,
    pub buckets: Vec<BucketRate>,
    pub cohort_table: CohortTable,
    /// One-sided, on per-model proportion minus one half.
    pub wilcoxon_models: Option<WilcoxonResult>,
    /// One-sided, on the per-pair retained-percentage deltas.
    pub wilcoxon_trials: Option<WilcoxonResult>,
    pub mean_improvement_pp: Option<f64>,
    pub mean_degradation_pp: Option<f64>,
    /// Handoff wins over decided (non-tie) pairs.
    pub improvement_rate: Option<f64>,
    pub net_expected_improvement_pp: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Aggregates handoff-vs-peak comparisons over a corpus. Records whose
/// handoff probe is degenerate (retained above 100%) are counted but left
/// out of every rate and test. The result does not depend on record order.
pub fn aggregate_study(records: &[ComparisonRecord], registry: &[ModelMeta]) -> Result<StudySummary, StatsError> {
    let meta: BTreeMap<&str, &ModelMeta> = registry.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let mut sorted: Vec<&ComparisonRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.model_id, &a.concept).cmp(&(&b.model_id, &b.concept)));
    if let Some(r) = sorted.iter().find(|r| !meta.contains_key(r.model_id.as_str())) {
        return Err(StatsError::UnknownModel(r.model_id.clone()));
    }

    let mut outcomes = OutcomeCounts::default();
    let mut degenerate_pairs = Vec::new();
    let mut models: BTreeMap<&str, ModelProportion> = BTreeMap::new();
    let mut buckets: BTreeMap<ScaleBucket, (BucketRate, Vec<&str>)> = ScaleBucket::ALL
        .iter()
        .map(|&b| {
            let empty = BucketRate {
                bucket: b,
                n_models: 0,
                n_pairs: 0,
                n_degenerate: 0,
                outcomes: OutcomeCounts::default(),
                rate: None,
            };
            (b, (empty, Vec::new()))
        })
        .collect();
    let mut improvements = Vec::new();
    let mut degradations = Vec::new();
    let mut deltas = Vec::new();

    for r in &sorted {
        let m = meta[r.model_id.as_str()];
        let entry = models.entry(m.model_id.as_str()).or_insert_with(|| ModelProportion {
            model_id: m.model_id.clone(),
            cohort: m.cohort,
            params: m.params,
            n_degenerate: 0,
            outcomes: OutcomeCounts::default(),
            proportion: None,
            prefers_handoff: false,
        });
        let (bucket, ids) = buckets.get_mut(&ScaleBucket::of(m.params)).expect("all buckets present");
        bucket.n_pairs += 1;
        if !ids.contains(&m.model_id.as_str()) {
            ids.push(m.model_id.as_str());
        }
        if r.is_degenerate() {
            entry.n_degenerate += 1;
            bucket.n_degenerate += 1;
            degenerate_pairs.push(format!("{}/{}", r.model_id, r.concept));
            continue;
        }
        entry.outcomes.add(r.outcome);
        bucket.outcomes.add(r.outcome);
        outcomes.add(r.outcome);
        deltas.push(r.delta_pp);
        match r.outcome {
            Outcome::HandoffBetter => improvements.push(r.delta_pp),
            Outcome::PeakBetter => degradations.push(-r.delta_pp),
            Outcome::Tie => {}
        }
    }

    let mut per_model: Vec<ModelProportion> = models.into_values().collect();
    for m in &mut per_model {
        m.proportion = ratio(m.outcomes.handoff_better, m.outcomes.total());
        m.prefers_handoff = m.outcomes.handoff_better > m.outcomes.peak_better;
    }

    let mut table = CohortTable {
        mha_prefer: 0,
        mha_other: 0,
        gqa_prefer: 0,
        gqa_other: 0,
        fisher_p: 1.0,
        excluded_models: Vec::new(),
    };
    for m in &per_model {
        match (m.cohort, m.prefers_handoff) {
            (Cohort::Mha, true) => table.mha_prefer += 1,
            (Cohort::Mha, false) => table.mha_other += 1,
            (Cohort::Gqa, true) => table.gqa_prefer += 1,
            (Cohort::Gqa, false) => table.gqa_other += 1,
            _ => table.excluded_models.push(m.model_id.clone()),
        }
    }
    table.fisher_p = fisher_exact_one_sided(table.mha_prefer, table.mha_other, table.gqa_prefer, table.gqa_other);

    let buckets = buckets
        .into_values()
        .map(|(mut b, ids)| {
            b.n_models = ids.len();
            b.rate = ratio(b.outcomes.handoff_better, b.outcomes.total());
            b
        })
        .collect();

    let model_values: Vec<f64> = per_model.iter().filter_map(|m| m.proportion.map(|p| p - 0.5)).collect();
    let mean_improvement = mean(&improvements);
    let mean_degradation = mean(&degradations);
    let improvement_rate = ratio(outcomes.handoff_better, outcomes.handoff_better + outcomes.peak_better);
    let net = match (improvement_rate, mean_improvement, mean_degradation) {
        (Some(rate), imp, deg) => Some(net_expected_improvement(imp.unwrap_or(0.0), rate, deg.unwrap_or(0.0))),
        _ => None,
    };

    Ok(StudySummary {
        n_records: sorted.len(),
        n_degenerate: degenerate_pairs.len(),
        degenerate_pairs,
        handoff_rate: ratio(outcomes.handoff_better, outcomes.total()),
        outcomes,
        per_model,
        buckets,
        cohort_table: table,
        wilcoxon_models: wilcoxon_signed_rank(&model_values, true).ok(),
        wilcoxon_trials: wilcoxon_signed_rank(&deltas, true).ok(),
        mean_improvement_pp: mean_improvement,
        mean_degradation_pp: mean_degradation,
        improvement_rate,
        net_expected_improvement_pp: net,
    })
}
