//! Classification metrics, cross-seed aggregation, and the paired t-test.
//!
//! The t distribution's CDF is computed from the regularized incomplete beta
//! function (Lanczos log-gamma plus a Lentz continued fraction), accurate to
//! better than 1e-10 absolute, so no statistical tables or external math
//! libraries are involved.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    Empty,
    #[error("need both classes present")]
    SingleClass,
    #[error("need at least {need} runs, got {got}")]
    TooFewRuns { need: usize, got: usize },
}

/// Confusion-matrix metrics with AD (label 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions were made: precision's denominator was zero
    /// and the reported 0 is a convention, not an observation.
    pub precision_degenerate: bool,
    /// No positive labels existed: recall's denominator was zero.
    pub recall_degenerate: bool,
}

pub fn confusion_metrics(preds: &[u8], labels: &[u8]) -> Result<ConfusionMetrics, StatsError> {
    if preds.len() != labels.len() {
        return Err(StatsError::LengthMismatch { a: preds.len(), b: labels.len() });
    }
    if preds.is_empty() {
        return Err(StatsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / preds.len() as f64;
    let precision_degenerate = tp + fp == 0;
    let recall_degenerate = tp + fnn == 0;
    let precision = if precision_degenerate { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if recall_degenerate { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ConfusionMetrics { accuracy, precision, recall, f1, precision_degenerate, recall_degenerate })
}

/// Probability that a random positive's score exceeds a random negative's,
/// ties counting one half — computed from average ranks rather than the
/// quadratic pair sweep.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch { a: scores.len(), b: labels.len() });
    }
    if scores.is_empty() {
        return Err(StatsError::Empty);
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based).
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l != 0)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One training run's held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "auc"];

impl SeedMetrics {
    pub fn get(&self, metric: &str) -> f64 {
        match metric {
            "accuracy" => self.accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "f1" => self.f1,
            "auc" => self.auc,
            other => panic!("unknown metric `{other}`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricAggregate {
    pub mean: f64,
    /// Sample (n-1) standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateMetrics {
    pub accuracy: MetricAggregate,
    pub precision: MetricAggregate,
    pub recall: MetricAggregate,
    pub f1: MetricAggregate,
    pub auc: MetricAggregate,
}

impl AggregateMetrics {
    pub fn get(&self, metric: &str) -> MetricAggregate {
        match metric {
            "accuracy" => self.accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "f1" => self.f1,
            "auc" => self.auc,
            other => panic!("unknown metric `{other}`"),
        }
    }
}

/// Metrics across a seed family: raw per-seed values, mean ± sample std per
/// metric, and (when compared against a baseline) per-metric paired t-tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub per_seed: Vec<SeedMetrics>,
    pub aggregate: AggregateMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired_vs_base: Option<Vec<PairedComparison>>,
}

pub fn seed_aggregate(runs: &[SeedMetrics]) -> Result<EvalSummary, StatsError> {
    if runs.len() < 2 {
        return Err(StatsError::TooFewRuns { need: 2, got: runs.len() });
    }
    let agg = |metric: &str| {
        let values: Vec<f64> = runs.iter().map(|r| r.get(metric)).collect();
        MetricAggregate { mean: mean(&values), std: sample_std(&values) }
    };
    Ok(EvalSummary {
        per_seed: runs.to_vec(),
        aggregate: AggregateMetrics {
            accuracy: agg("accuracy"),
            precision: agg("precision"),
            recall: agg("recall"),
            f1: agg("f1"),
            auc: agg("auc"),
        },
        paired_vs_base: None,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Paired t-test outcome. `degenerate` marks a zero-variance difference
/// vector, where the p-value is a limit statement rather than a computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a` against `b` (positive t means a > b).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(StatsError::TooFewRuns { need: 2, got: a.len() });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let df = d.len() - 1;
    let m = mean(&d);
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Ok(if m == 0.0 {
            TestResult { t: 0.0, df, p: 1.0, significant: false, degenerate: true }
        } else {
            let t = if m > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
            TestResult { t, df, p: 0.0, significant: true, degenerate: true }
        });
    }
    let t = m / (sd / n.sqrt());
    let p = students_t_two_sided_p(t, df as f64);
    Ok(TestResult { t, df, p, significant: p < 0.05, degenerate: false })
}

/// Per-metric paired comparison of matched seed families.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub metric: String,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Runs the paired test for every metric, `ours` against `base`, pairing
/// runs by position (the seed family must match).
pub fn paired_comparisons(
    ours: &[SeedMetrics],
    base: &[SeedMetrics],
) -> Result<Vec<PairedComparison>, StatsError> {
    METRIC_NAMES
        .iter()
        .map(|&metric| {
            let a: Vec<f64> = ours.iter().map(|r| r.get(metric)).collect();
            let b: Vec<f64> = base.iter().map(|r| r.get(metric)).collect();
            let r = paired_t_test(&a, &b)?;
            Ok(PairedComparison {
                metric: metric.to_string(),
                t: r.t,
                df: r.df,
                p: r.p,
                significant: r.significant,
                degenerate: r.degenerate,
            })
        })
        .collect()
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom:
/// the regularized incomplete beta at x = df / (df + t²).
pub fn students_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x)
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection for the left half-plane.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction,
/// switched at the symmetry point for convergence.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x out of [0,1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Table-style comparison: one row per (label, summary), metrics as
/// percentage mean ± std, significant improvements starred from the row's
/// own paired results.
pub fn render_table(rows: &[(&str, &EvalSummary)]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    cells.push(header);
    let mut any_star = false;
    for (label, summary) in rows {
        let mut row = vec![label.to_string()];
        for metric in METRIC_NAMES {
            let agg = summary.aggregate.get(metric);
            let star = summary
                .paired_vs_base
                .as_ref()
                .map(|cmps| {
                    cmps.iter()
                        .any(|c| c.metric == metric && c.significant && c.t > 0.0)
                })
                .unwrap_or(false);
            any_star |= star;
            row.push(format!(
                "{:.2} ± {:.2}{}",
                agg.mean * 100.0,
                agg.std * 100.0,
                if star { " *" } else { "" }
            ));
        }
        cells.push(row);
    }
    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{:width$}", cell, width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    if any_star {
        out.push_str("* significant at p < 0.05 (paired t-test vs base)\n");
    }
    out
}
