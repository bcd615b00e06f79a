//! Shape benchmarking and the step-time cost model.
//!
//! Synchronized step times are modelled as `t ≈ a + b · B · S^p`. For a fixed
//! exponent the model is linear in `(a, b)`, so the fitter runs closed-form
//! least squares at every point of an exponent grid and keeps the exponent
//! with the highest coefficient of determination.

use alloc::vec::Vec;

use crate::shapes::Bucket;
use crate::sim::StepRecord;
use crate::stats::{mean, pearson};
use crate::{Error, Result};

/// One benchmark measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub batch: u64,
    pub seq_len: u64,
    pub step_time_sync: f64,
    /// Source worker, when the trial comes from a per-worker trace.
    pub worker: Option<u32>,
}

impl Trial {
    pub fn new(batch: u64, seq_len: u64, step_time_sync: f64) -> Self {
        Self {
            batch,
            seq_len,
            step_time_sync,
            worker: None,
        }
    }

    pub fn load(&self, p: f64) -> f64 {
        self.batch as f64 * libm::pow(self.seq_len as f64, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub a: f64,
    pub b: f64,
    pub p: f64,
    pub r2: f64,
}

impl CostModel {
    /// Noise-free ground truth, as used by the simulator.
    pub fn exact(a: f64, b: f64, p: f64) -> Self {
        Self { a, b, p, r2: 1.0 }
    }

    pub fn predict(&self, batch: u64, seq_len: u64) -> f64 {
        self.a + self.b * batch as f64 * libm::pow(seq_len as f64, self.p)
    }
}

/// Exponent search grid, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for PGrid {
    fn default() -> Self {
        Self {
            min: 1.6,
            max: 2.4,
            step: 0.05,
        }
    }
}

impl PGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        let valid = self.min.is_finite()
            && self.max.is_finite()
            && self.step.is_finite()
            && self.min > 0.0
            && self.step > 0.0
            && self.max >= self.min;
        if !valid {
            return Err(Error::InvalidConstraint("exponent grid"));
        }
        let count = libm::round((self.max - self.min) / self.step) as usize;
        // grid points are snapped to 1e-9 so that 1.6 + 8·0.05 is exactly 2.0
        Ok((0..=count)
            .map(|i| libm::round((self.min + i as f64 * self.step) * 1e9) / 1e9)
            .collect())
    }
}

/// Least-squares result at one grid exponent. `r2` is `None` when the
/// regressor is degenerate at this exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFit {
    pub p: f64,
    pub a: f64,
    pub b: f64,
    pub r2: Option<f64>,
}

pub fn r_squared(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: observed.len(),
        });
    }
    if observed.is_empty() {
        return Err(Error::Empty);
    }
    let m = mean(observed);
    let ss_tot: f64 = observed.iter().map(|y| (y - m) * (y - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance("observed"));
    }
    let ss_res: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn ols(xs: &[f64], ys: &[f64], y_mean: f64, ss_tot: f64) -> Option<(f64, f64, f64)> {
    let x_mean = mean(xs);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    // relative spread below 1e-12 is treated as a single x value
    if !(sxx > 1e-24 * x_mean * x_mean * xs.len() as f64) || !sxx.is_finite() {
        return None;
    }
    let b = sxy / sxx;
    let a = y_mean - b * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (a + b * x);
            r * r
        })
        .sum();
    Some((a, b, 1.0 - ss_res / ss_tot))
}

fn validate_trials(trials: &[Trial]) -> Result<()> {
    if trials.len() < 3 {
        return Err(Error::InsufficientData("at least 3 trials are required"));
    }
    if trials.iter().any(|t| {
        t.batch == 0 || t.seq_len == 0 || !(t.step_time_sync > 0.0) || !t.step_time_sync.is_finite()
    }) {
        return Err(Error::InvalidValue("trial"));
    }
    Ok(())
}

/// Per-exponent fits over the whole grid, in ascending `p`.
pub fn grid_profile(trials: &[Trial], grid: &PGrid) -> Result<Vec<GridFit>> {
    validate_trials(trials)?;
    let ys: Vec<f64> = trials.iter().map(|t| t.step_time_sync).collect();
    let y_mean = mean(&ys);
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateFit);
    }
    let mut xs = Vec::with_capacity(trials.len());
    grid.points()?
        .into_iter()
        .map(|p| {
            xs.clear();
            xs.extend(trials.iter().map(|t| t.load(p)));
            Ok(match ols(&xs, &ys, y_mean, ss_tot) {
                Some((a, b, r2)) => GridFit {
                    p,
                    a,
                    b,
                    r2: Some(r2),
                },
                None => GridFit {
                    p,
                    a: f64::NAN,
                    b: f64::NAN,
                    r2: None,
                },
            })
        })
        .collect()
}

/// Grid-searched fit maximizing R²; ties go to the smaller exponent.
pub fn fit_cost_model(trials: &[Trial], grid: &PGrid) -> Result<CostModel> {
    let mut best: Option<CostModel> = None;
    for g in grid_profile(trials, grid)? {
        let Some(r2) = g.r2 else { continue };
        if best.is_none_or(|m| r2 > m.r2) {
            best = Some(CostModel {
                a: g.a,
                b: g.b,
                p: g.p,
                r2,
            });
        }
    }
    best.ok_or(Error::InsufficientData("loads B·S^p take a single value"))
}

/// Compute-load bound `M_comp = (target_sync − a) / b`.
pub fn derive_m_comp(model: &CostModel, target_sync: f64) -> Result<f64> {
    if !(model.b > 0.0) {
        return Err(Error::ZeroSlope(model.b));
    }
    if !(target_sync > model.a) {
        return Err(Error::TargetBelowOverhead {
            target: target_sync,
            overhead: model.a,
        });
    }
    Ok((target_sync - model.a) / model.b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    /// Correlation of step time with the token count `B·S`.
    pub corr_tokens: f64,
    /// Correlation of step time with the load `B·S^p`.
    pub corr_load: f64,
}

pub fn correlation_report(trials: &[Trial], p: f64) -> Result<CorrelationReport> {
    validate_trials(trials)?;
    let ys: Vec<f64> = trials.iter().map(|t| t.step_time_sync).collect();
    let tokens: Vec<f64> = trials.iter().map(|t| t.load(1.0)).collect();
    let loads: Vec<f64> = trials.iter().map(|t| t.load(p)).collect();
    Ok(CorrelationReport {
        corr_tokens: pearson(&tokens, &ys)?,
        corr_load: pearson(&loads, &ys)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRequest {
    pub bucket: Bucket,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPlan {
    pub trials: Vec<SweepRequest>,
    pub long_seq_threshold: u64,
}

pub const DEFAULT_LONG_SEQ_THRESHOLD: u64 = 20_000;

/// Throughput sweep: batch sizes `1..=levels` per bucket, with more levels for
/// buckets at or above `threshold` tokens. Ordered by sequence length, then batch.
pub fn generate_sweep(
    catalog: &[Bucket],
    levels_short: u64,
    levels_long: u64,
    threshold: u64,
) -> Result<SweepPlan> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if levels_short == 0 {
        return Err(Error::InvalidSweep("short-bucket levels must be >= 1"));
    }
    if levels_long < levels_short {
        return Err(Error::InvalidSweep(
            "long-bucket levels must be >= short-bucket levels",
        ));
    }
    let mut buckets: Vec<Bucket> = catalog.to_vec();
    buckets.sort_by_key(|b| (b.seq_len, b.shape));
    let trials = buckets
        .iter()
        .flat_map(|&bucket| {
            let levels = if bucket.seq_len >= threshold {
                levels_long
            } else {
                levels_short
            };
            (1..=levels).map(move |batch| SweepRequest { bucket, batch })
        })
        .collect();
    Ok(SweepPlan {
        trials,
        long_seq_threshold: threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckReport {
    pub steps: usize,
    pub mean_wait: Vec<f64>,
    /// Fraction of steps in which each worker finished last (`wait_sync == 0`).
    pub straggler_fraction: Vec<f64>,
    /// Fraction of steps whose straggler held that step's longest sequence.
    pub straggler_holds_longest: f64,
    /// Recalibrated compute bound for the caller's target step time.
    pub suggested_m_comp: f64,
}

pub fn analyze_bottleneck(
    records: &[StepRecord],
    model: &CostModel,
    target_sync: f64,
) -> Result<BottleneckReport> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    let workers = first.workers.len();
    if workers == 0 {
        return Err(Error::EmptyRecords);
    }
    let mut wait = alloc::vec![0.0; workers];
    let mut stragglers = alloc::vec![0usize; workers];
    let mut longest_hits = 0usize;
    for r in records {
        if r.workers.len() != workers {
            return Err(Error::ShapeMismatch("records have differing worker counts"));
        }
        let longest = r
            .workers
            .iter()
            .map(|w| w.bucket.seq_len)
            .max()
            .unwrap_or(0);
        let mut hit = false;
        for (i, w) in r.workers.iter().enumerate() {
            wait[i] += w.wait_sync;
            if w.wait_sync == 0.0 {
                stragglers[i] += 1;
                hit |= w.bucket.seq_len == longest;
            }
        }
        longest_hits += usize::from(hit);
    }
    let n = records.len() as f64;
    Ok(BottleneckReport {
        steps: records.len(),
        mean_wait: wait.into_iter().map(|w| w / n).collect(),
        straggler_fraction: stragglers.into_iter().map(|s| s as f64 / n).collect(),
        straggler_holds_longest: longest_hits as f64 / n,
        suggested_m_comp: derive_m_comp(model, target_sync)?,
    })
}
