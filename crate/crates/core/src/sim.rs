//! Data-parallel step simulator.
//!
//! Every step each of `N` workers draws a bucket from the workload mix, takes
//! the plan's batch size for it and runs for `(a + b·B·S^p) · noise`. The
//! synchronization barrier makes the step last as long as the slowest worker;
//! everyone else idles for `wait_sync = T_sync − T_i`.

use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::costfit::{derive_m_comp, fit_cost_model, CostModel, PGrid, Trial};
use crate::scheduler::{
    emit_plan, physical_load, BatchPolicy, BucketPlan, DualConstraint, TokenBudget,
};
use crate::shapes::{build_catalog, visual_tokens, Bucket, LatentGeometry, MediaShape};
use crate::stats::mean;
use crate::{Error, Result};

/// Lower clip of the multiplicative noise factor.
pub const NOISE_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub num_workers: usize,
    /// Ground-truth cost; `r2` is ignored.
    pub cost: CostModel,
    /// Relative standard deviation of the per-worker time noise.
    pub noise_sigma: f64,
    pub seed: u64,
    pub steps: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_workers: 16,
            cost: default_ground_truth(),
            noise_sigma: 0.03,
            seed: 42,
            steps: 500,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_workers == 0 {
            return Err(Error::InvalidCluster("num_workers must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::InvalidCluster("steps must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidCluster("noise_sigma must be finite and >= 0"));
        }
        let c = &self.cost;
        if !(c.a.is_finite() && c.b.is_finite() && c.p.is_finite())
            || c.a < 0.0
            || c.b < 0.0
            || c.p <= 0.0
        {
            return Err(Error::InvalidCluster(
                "cost must have a >= 0, b >= 0, p > 0",
            ));
        }
        Ok(())
    }
}

/// `a = 2 s`, `p = 2`, and `b` chosen so that a batch of 3 at 48 000 tokens
/// takes 62 s.
pub fn default_ground_truth() -> CostModel {
    CostModel::exact(2.0, 60.0 / 6.912e9, 2.0)
}

/// Long-tail mix from single 640×640 images up to 257-frame clips, as
/// `(shape, sample_count)` with counts proportional to the sampling weights.
pub fn default_long_tail_shapes() -> Vec<(MediaShape, u64)> {
    [(1, 30), (17, 25), (41, 20), (113, 15), (233, 7), (257, 3)]
        .into_iter()
        .map(|(frames, count)| {
            (
                MediaShape {
                    frames,
                    height: 640,
                    width: 640,
                },
                count,
            )
        })
        .collect()
}

/// Equal-token budget of the default baseline; also `M_mem` of the default
/// adaptive plan so both policies respect the same memory bound.
pub const DEFAULT_TOKEN_BUDGET: u64 = 240_000;
/// Target synchronized step time of the default adaptive plan, seconds.
pub const DEFAULT_TARGET_SYNC: f64 = 20.0;

/// A catalog together with its sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub catalog: Vec<Bucket>,
    pub weights: Vec<f64>,
    pub geometry: LatentGeometry,
}

impl Workload {
    /// Weights proportional to each bucket's sample count.
    pub fn from_catalog(catalog: Vec<Bucket>, geometry: LatentGeometry) -> Result<Self> {
        let total: u64 = catalog.iter().map(|b| b.sample_count).sum();
        if total == 0 {
            return Err(Error::InvalidWeights("sample counts sum to zero"));
        }
        let weights = catalog
            .iter()
            .map(|b| b.sample_count as f64 / total as f64)
            .collect();
        Ok(Self {
            catalog,
            weights,
            geometry,
        })
    }

    pub fn default_long_tail() -> Self {
        let geometry = LatentGeometry::default();
        let catalog = build_catalog(&default_long_tail_shapes(), &geometry)
            .expect("default catalog is valid");
        let weights = [0.30, 0.25, 0.20, 0.15, 0.07, 0.03].to_vec();
        Self {
            catalog,
            weights,
            geometry,
        }
    }

    /// Equal-token baseline and dual-constraint plan derived from `model`.
    pub fn default_plans(&self, model: &CostModel) -> Result<(BucketPlan, BucketPlan)> {
        let baseline = emit_plan(
            &self.catalog,
            &BatchPolicy::EqualToken(TokenBudget::new(DEFAULT_TOKEN_BUDGET)?),
        )?;
        let m_comp = derive_m_comp(model, DEFAULT_TARGET_SYNC)?;
        let adaptive = emit_plan(
            &self.catalog,
            &BatchPolicy::Dual(DualConstraint::new(
                DEFAULT_TOKEN_BUDGET as f64,
                m_comp,
                model.p,
            )?),
        )?;
        Ok((baseline, adaptive))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub bucket: Bucket,
    pub batch: u64,
}

/// Draws per-worker assignments for one plan.
#[derive(Debug, Clone)]
pub struct AssignmentSampler {
    index: WeightedIndex<f64>,
    choices: Vec<Assignment>,
}

impl AssignmentSampler {
    pub fn new(catalog: &[Bucket], weights: &[f64], plan: &BucketPlan) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        if weights.len() != catalog.len() {
            return Err(Error::LengthMismatch {
                left: catalog.len(),
                right: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights("weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights("weights must sum to 1"));
        }
        let choices = catalog
            .iter()
            .map(|bucket| {
                let entry = plan
                    .entries
                    .iter()
                    .find(|e| e.bucket.shape == bucket.shape)
                    .ok_or(Error::PlanMismatch("catalog bucket missing from plan"))?;
                if entry.bucket.seq_len != bucket.seq_len {
                    return Err(Error::PlanMismatch("sequence length differs from catalog"));
                }
                if entry.batch_size == 0 {
                    return Err(Error::PlanMismatch("batch size must be >= 1"));
                }
                Ok(Assignment {
                    bucket: *bucket,
                    batch: entry.batch_size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index =
            WeightedIndex::new(weights).map_err(|_| Error::InvalidWeights("no positive weight"))?;
        Ok(Self { index, choices })
    }

    pub fn sample<R: Rng + ?Sized>(&self, workers: usize, rng: &mut R) -> Vec<Assignment> {
        (0..workers)
            .map(|_| self.choices[self.index.sample(rng)])
            .collect()
    }

    /// Swap in a new plan while keeping the weight table and draw sequence.
    fn replan(&mut self, plan: &BucketPlan) -> Result<()> {
        for c in &mut self.choices {
            c.batch = plan
                .batch_for(&c.bucket)
                .ok_or(Error::PlanMismatch("catalog bucket missing from plan"))?;
        }
        Ok(())
    }
}

pub fn sample_assignments<R: Rng + ?Sized>(
    catalog: &[Bucket],
    weights: &[f64],
    plan: &BucketPlan,
    workers: usize,
    rng: &mut R,
) -> Result<Vec<Assignment>> {
    Ok(AssignmentSampler::new(catalog, weights, plan)?.sample(workers, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerStep {
    pub bucket: Bucket,
    pub batch: u64,
    /// Execution time `T_i`, seconds.
    pub time: f64,
    /// Physical load `B·S²`.
    pub load: u128,
    /// Tokens processed, `B·S`.
    pub tokens: u64,
    pub wait_sync: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub workers: Vec<WorkerStep>,
    pub t_sync: f64,
}

pub fn simulate_step<R: Rng + ?Sized>(
    step: usize,
    assignments: &[Assignment],
    cfg: &ClusterConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    if assignments.is_empty() {
        return Err(Error::Empty);
    }
    let mut workers = assignments
        .iter()
        .map(|a| {
            let z: f64 = rng.sample(StandardNormal);
            let noise = (1.0 + cfg.noise_sigma * z).max(NOISE_FLOOR);
            Ok(WorkerStep {
                bucket: a.bucket,
                batch: a.batch,
                time: cfg.cost.predict(a.batch, a.bucket.seq_len) * noise,
                load: physical_load(a.batch, a.bucket.seq_len)?,
                tokens: a
                    .batch
                    .checked_mul(a.bucket.seq_len)
                    .ok_or(Error::Overflow("tokens"))?,
                wait_sync: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t_sync = workers
        .iter()
        .map(|w| w.time)
        .fold(f64::NEG_INFINITY, f64::max);
    for w in &mut workers {
        w.wait_sync = t_sync - w.time;
    }
    Ok(StepRecord {
        step,
        workers,
        t_sync,
    })
}

/// Range ratio `(max − min) / max`.
pub fn cv_step(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidValue("cv_step input"));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        return Err(Error::AllZero);
    }
    Ok((max - min) / max)
}

/// Coefficient of variation `100 · std / mean` with population std.
pub fn compute_cv(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_cv input"));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::ZeroMean);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Ok(100.0 * libm::sqrt(var) / m)
}

/// Latent units per second, `B · [(F−1)/λ + 1] · (W/γ) · (H/η) / T`.
pub fn throughput(
    batch: u64,
    shape: MediaShape,
    geom: &LatentGeometry,
    seconds: f64,
) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::InvalidValue("step time"));
    }
    let units = visual_tokens(shape, geom)?;
    Ok(batch as f64 * units as f64 / seconds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub t_sync: f64,
    /// Range ratio of worker times.
    pub cv_step: f64,
    /// std/mean of worker loads, percent.
    pub compute_cv: f64,
    /// Range ratio of worker loads.
    pub load_cv_step: f64,
    /// std/mean of worker times, percent.
    pub time_cv: f64,
    pub tokens: u64,
    pub latent_units: u64,
    pub tokens_per_sec: f64,
    pub theta: f64,
}

pub fn step_metrics(record: &StepRecord, geom: &LatentGeometry) -> Result<StepMetrics> {
    let times: Vec<f64> = record.workers.iter().map(|w| w.time).collect();
    let loads: Vec<f64> = record.workers.iter().map(|w| w.load as f64).collect();
    let mut tokens = 0u64;
    let mut latent_units = 0u64;
    for w in &record.workers {
        tokens = tokens
            .checked_add(w.tokens)
            .ok_or(Error::Overflow("tokens"))?;
        let units = w
            .batch
            .checked_mul(visual_tokens(w.bucket.shape, geom)?)
            .ok_or(Error::Overflow("latent units"))?;
        latent_units = latent_units
            .checked_add(units)
            .ok_or(Error::Overflow("latent units"))?;
    }
    Ok(StepMetrics {
        step: record.step,
        t_sync: record.t_sync,
        cv_step: cv_step(&times)?,
        compute_cv: compute_cv(&loads)?,
        load_cv_step: cv_step(&loads)?,
        time_cv: compute_cv(&times)?,
        tokens,
        latent_units,
        tokens_per_sec: tokens as f64 / record.t_sync,
        theta: latent_units as f64 / record.t_sync,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySummary {
    pub steps: usize,
    pub total_tokens: u64,
    pub total_latent_units: u64,
    pub total_time: f64,
    /// Σ tokens / Σ T_sync over the run.
    pub tokens_per_sec: f64,
    /// Σ latent units / Σ T_sync over the run.
    pub theta: f64,
    pub mean_t_sync: f64,
    pub mean_cv_step: f64,
    pub mean_compute_cv: f64,
    pub mean_load_cv_step: f64,
    pub mean_time_cv: f64,
}

pub fn summarize(metrics: &[StepMetrics]) -> Result<PolicySummary> {
    if metrics.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let avg =
        |f: fn(&StepMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / metrics.len() as f64;
    let total_tokens = metrics.iter().map(|m| m.tokens).sum();
    let total_latent_units = metrics.iter().map(|m| m.latent_units).sum();
    let total_time: f64 = metrics.iter().map(|m| m.t_sync).sum();
    Ok(PolicySummary {
        steps: metrics.len(),
        total_tokens,
        total_latent_units,
        total_time,
        tokens_per_sec: total_tokens as f64 / total_time,
        theta: total_latent_units as f64 / total_time,
        mean_t_sync: avg(|m| m.t_sync),
        mean_cv_step: avg(|m| m.cv_step),
        mean_compute_cv: avg(|m| m.compute_cv),
        mean_load_cv_step: avg(|m| m.load_cv_step),
        mean_time_cv: avg(|m| m.time_cv),
    })
}

/// Closed-loop recalibration of the second policy: every `every` steps the
/// cost model is refitted from that policy's per-worker trace and the plan is
/// re-emitted with `M_comp` derived from `target_sync`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefitConfig {
    pub every: usize,
    pub target_sync: f64,
    pub m_mem: f64,
    pub grid: PGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refit {
    pub after_step: usize,
    /// `None` when the accumulated trace could not be fitted; the plan is kept.
    pub model: Option<CostModel>,
    pub m_comp: Option<f64>,
    pub plan: Option<BucketPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub records: Vec<StepRecord>,
    pub metrics: Vec<StepMetrics>,
    pub summary: PolicySummary,
    pub refits: Vec<Refit>,
}

impl PolicyRun {
    /// Per-worker trials `(B, S, T_i)` in step order.
    pub fn trace(&self) -> Vec<Trial> {
        trace_of(&self.records)
    }
}

pub fn trace_of(records: &[StepRecord]) -> Vec<Trial> {
    records
        .iter()
        .flat_map(|r| {
            r.workers.iter().enumerate().map(|(i, w)| Trial {
                batch: w.batch,
                seq_len: w.bucket.seq_len,
                step_time_sync: w.time,
                worker: Some(i as u32),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentSummary {
    pub a: PolicySummary,
    pub b: PolicySummary,
    /// Relative change `(b − a) / a` of run-level tokens/sec.
    pub delta_tokens_per_sec: f64,
    pub delta_theta: f64,
    pub delta_cv_step: f64,
    pub delta_compute_cv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub a: PolicyRun,
    pub b: PolicyRun,
    pub summary: ExperimentSummary,
}

fn rel_delta(base: f64, other: f64) -> f64 {
    if base == other {
        0.0
    } else {
        (other - base) / base
    }
}

const DRAW_STREAM: u64 = 0;
const NOISE_STREAM_A: u64 = 1;
const NOISE_STREAM_B: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn run_policy(
    workload: &Workload,
    plan: &BucketPlan,
    cfg: &ClusterConfig,
    noise_stream: u64,
    refit: Option<&RefitConfig>,
) -> Result<PolicyRun> {
    let mut sampler = AssignmentSampler::new(&workload.catalog, &workload.weights, plan)?;
    let mut draws = stream(cfg.seed, DRAW_STREAM);
    let mut noise = stream(cfg.seed, noise_stream);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut refits = Vec::new();
    for step in 0..cfg.steps {
        let assignments = sampler.sample(cfg.num_workers, &mut draws);
        let record = simulate_step(step, &assignments, cfg, &mut noise)?;
        metrics.push(step_metrics(&record, &workload.geometry)?);
        records.push(record);
        if let Some(rc) = refit {
            if rc.every > 0 && (step + 1) % rc.every == 0 && step + 1 < cfg.steps {
                let r = recalibrate(workload, &records, rc, step)?;
                if let Some(p) = &r.plan {
                    sampler.replan(p)?;
                }
                refits.push(r);
            }
        }
    }
    let summary = summarize(&metrics)?;
    Ok(PolicyRun {
        records,
        metrics,
        summary,
        refits,
    })
}

fn recalibrate(
    workload: &Workload,
    records: &[StepRecord],
    rc: &RefitConfig,
    step: usize,
) -> Result<Refit> {
    let model = fit_cost_model(&trace_of(records), &rc.grid).ok();
    let m_comp = model.and_then(|m| derive_m_comp(&m, rc.target_sync).ok());
    let plan = match (model, m_comp) {
        (Some(m), Some(mc)) => Some(emit_plan(
            &workload.catalog,
            &BatchPolicy::Dual(DualConstraint::new(rc.m_mem, mc, m.p)?),
        )?),
        _ => None,
    };
    Ok(Refit {
        after_step: step + 1,
        model,
        m_comp,
        plan,
    })
}

/// Runs both plans for `cfg.steps` steps.
///
/// Bucket draws come from one shared seed-derived stream, so both policies
/// see the same sequence of workload samples; the timing noise of each policy
/// comes from its own independent stream.
pub fn run_experiment(
    workload: &Workload,
    plan_a: &BucketPlan,
    plan_b: &BucketPlan,
    cfg: &ClusterConfig,
    refit_b: Option<&RefitConfig>,
) -> Result<Experiment> {
    cfg.validate()?;
    let a = run_policy(workload, plan_a, cfg, NOISE_STREAM_A, None)?;
    let b = run_policy(workload, plan_b, cfg, NOISE_STREAM_B, refit_b)?;
    let summary = ExperimentSummary {
        a: a.summary,
        b: b.summary,
        delta_tokens_per_sec: rel_delta(a.summary.tokens_per_sec, b.summary.tokens_per_sec),
        delta_theta: rel_delta(a.summary.theta, b.summary.theta),
        delta_cv_step: rel_delta(a.summary.mean_cv_step, b.summary.mean_cv_step),
        delta_compute_cv: rel_delta(a.summary.mean_compute_cv, b.summary.mean_compute_cv),
    };
    Ok(Experiment { a, b, summary })
}

/// Benchmark sweep against the ground-truth model: every worker runs the same
/// `(B, S)` and the trial records the barrier time.
pub fn benchmark_trials(
    sweep: &crate::costfit::SweepPlan,
    cfg: &ClusterConfig,
) -> Result<Vec<Trial>> {
    cfg.validate()?;
    let mut noise = stream(cfg.seed, NOISE_STREAM_A);
    sweep
        .trials
        .iter()
        .enumerate()
        .map(|(i, req)| {
            let assignments =
                alloc::vec![Assignment { bucket: req.bucket, batch: req.batch }; cfg.num_workers];
            let r = simulate_step(i, &assignments, cfg, &mut noise)?;
            Ok(Trial::new(req.batch, req.bucket.seq_len, r.t_sync))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Binding;
    use alloc::vec;
    use proptest::prelude::*;

    fn cfg(sigma: f64) -> ClusterConfig {
        ClusterConfig {
            noise_sigma: sigma,
            ..Default::default()
        }
    }

    fn single_bucket() -> (Vec<Bucket>, BucketPlan) {
        let g = LatentGeometry::default();
        let cat = build_catalog(&[(MediaShape::new(1, 640, 640).unwrap(), 1)], &g).unwrap();
        let plan = emit_plan(
            &cat,
            &BatchPolicy::EqualToken(TokenBudget::new(48_000).unwrap()),
        )
        .unwrap();
        (cat, plan)
    }

    #[test]
    fn single_bucket_assignments_identical() {
        let (cat, plan) = single_bucket();
        let mut rng = stream(1, 0);
        let a = sample_assignments(&cat, &[1.0], &plan, 8, &mut rng).unwrap();
        assert!(a.iter().all(|x| *x == a[0]));
        assert_eq!(a[0].batch, 30);
    }

    #[test]
    fn zero_weight_never_drawn() {
        let w = Workload::default_long_tail();
        let (plan, _) = w.default_plans(&default_ground_truth()).unwrap();
        let mut weights = vec![0.0; w.catalog.len()];
        weights[0] = 1.0;
        let mut rng = stream(3, 0);
        let a = sample_assignments(&w.catalog, &weights, &plan, 1000, &mut rng).unwrap();
        assert!(a.iter().all(|x| x.bucket == w.catalog[0]));
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        let (cat, plan) = single_bucket();
        assert!(matches!(
            sample_assignments(&cat, &[0.5], &plan, 1, &mut stream(0, 0)),
            Err(Error::InvalidWeights(_))
        ));
        let w = Workload::default_long_tail();
        assert!(matches!(
            AssignmentSampler::new(&w.catalog, &w.weights, &plan),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn zero_noise_equal_work_has_no_wait() {
        let (cat, plan) = single_bucket();
        let a = vec![
            Assignment {
                bucket: cat[0],
                batch: plan.entries[0].batch_size
            };
            4
        ];
        let r = simulate_step(0, &a, &cfg(0.0), &mut stream(0, 1)).unwrap();
        assert!(r
            .workers
            .iter()
            .all(|w| w.wait_sync == 0.0 && w.time == r.t_sync));
    }

    #[test]
    fn zero_noise_wait_is_load_difference() {
        let (cat, _) = single_bucket();
        let c = ClusterConfig {
            cost: CostModel::exact(0.0, 1e-6, 2.0),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let a = vec![
            Assignment {
                bucket: cat[0],
                batch: 1,
            },
            Assignment {
                bucket: cat[0],
                batch: 2,
            },
        ];
        let r = simulate_step(0, &a, &c, &mut stream(0, 1)).unwrap();
        let l = 1600.0f64 * 1600.0;
        assert!((r.workers[0].wait_sync - 1e-6 * l).abs() < 1e-12);
        assert_eq!(r.workers[1].wait_sync, 0.0);
    }

    #[test]
    fn seeded_step_is_reproducible() {
        let w = Workload::default_long_tail();
        let (plan, _) = w.default_plans(&default_ground_truth()).unwrap();
        let run = |seed| {
            let mut rng = stream(seed, 0);
            let a = sample_assignments(&w.catalog, &w.weights, &plan, 16, &mut rng).unwrap();
            simulate_step(0, &a, &cfg(0.03), &mut rng).unwrap()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn cv_step_examples() {
        assert!((cv_step(&[100.0, 80.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(cv_step(&[7.0, 7.0, 7.0]), Ok(0.0));
        assert_eq!(cv_step(&[50.0, 75.0, 100.0]), Ok(0.5));
        assert_eq!(cv_step(&[0.0, 0.0]), Err(Error::AllZero));
        assert_eq!(cv_step(&[]), Err(Error::Empty));
    }

    #[test]
    fn compute_cv_examples() {
        assert_eq!(compute_cv(&[5.0, 5.0]), Ok(0.0));
        assert_eq!(compute_cv(&[1.0, 3.0]), Ok(50.0));
        assert_eq!(compute_cv(&[0.0, 0.0]), Err(Error::ZeroMean));
    }

    #[test]
    fn throughput_examples() {
        let g = LatentGeometry::default();
        let s233 = MediaShape::new(233, 640, 640).unwrap();
        let s257 = MediaShape::new(257, 640, 640).unwrap();
        assert!((throughput(3, s233, &g, 62.0).unwrap() - 2322.6).abs() <= 1.0);
        assert!((throughput(3, s233, &g, 56.0).unwrap() - 2571.4).abs() <= 1.0);
        assert!((throughput(3, s257, &g, 68.0).unwrap() - 2329.4).abs() <= 2.0);
        assert!(throughput(3, s233, &g, 0.0).is_err());
        assert!(matches!(
            throughput(1, MediaShape::new(2, 640, 640).unwrap(), &g, 1.0),
            Err(Error::NonDivisibleFrames { .. })
        ));
    }

    #[test]
    fn default_plans_shape() {
        let w = Workload::default_long_tail();
        let seqs: Vec<u64> = w.catalog.iter().map(|b| b.seq_len).collect();
        assert_eq!(seqs, vec![1600, 4800, 9600, 24_000, 48_000, 52_800]);
        let (base, adaptive) = w.default_plans(&default_ground_truth()).unwrap();
        let bb: Vec<u64> = base.entries.iter().map(|e| e.batch_size).collect();
        assert_eq!(bb, vec![150, 50, 25, 10, 5, 4]);
        for (x, y) in base.entries.iter().zip(&adaptive.entries) {
            assert!(y.batch_size <= x.batch_size);
        }
        assert_eq!(adaptive.entries[0].binding, Some(Binding::Memory));
        assert_eq!(adaptive.entries[5].binding, Some(Binding::Floor));
    }

    #[test]
    fn identical_policies_have_zero_delta() {
        let w = Workload::default_long_tail();
        let (plan, _) = w.default_plans(&default_ground_truth()).unwrap();
        let c = ClusterConfig {
            steps: 50,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let e = run_experiment(&w, &plan, &plan, &c, None).unwrap();
        assert_eq!(e.summary.delta_tokens_per_sec, 0.0);
        assert_eq!(e.summary.delta_compute_cv, 0.0);
        assert_eq!(e.summary.delta_cv_step, 0.0);
        assert_eq!(e.a.metrics, e.b.metrics);
    }

    #[test]
    fn barrier_and_conservation() {
        let w = Workload::default_long_tail();
        let (base, adaptive) = w.default_plans(&default_ground_truth()).unwrap();
        let c = ClusterConfig {
            steps: 40,
            ..Default::default()
        };
        let e = run_experiment(&w, &base, &adaptive, &c, None).unwrap();
        for run in [&e.a, &e.b] {
            for r in &run.records {
                let max = r.workers.iter().map(|w| w.time).fold(0.0, f64::max);
                assert_eq!(r.t_sync, max);
                let min_wait = r
                    .workers
                    .iter()
                    .map(|w| w.wait_sync)
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(min_wait, 0.0);
                assert!(r.workers.iter().all(|w| w.wait_sync >= 0.0));
            }
            let tokens: u64 = run
                .records
                .iter()
                .flat_map(|r| &r.workers)
                .map(|w| w.tokens)
                .sum();
            let time: f64 = run.records.iter().map(|r| r.t_sync).sum();
            assert!(
                (run.summary.tokens_per_sec - tokens as f64 / time).abs()
                    <= 1e-9 * run.summary.tokens_per_sec
            );
            for m in &run.metrics {
                assert!((0.0..1.0).contains(&m.cv_step));
                assert!(m.compute_cv >= 0.0);
            }
        }
    }

    #[test]
    fn refit_recovers_truth_and_keeps_plan_stable() {
        let w = Workload::default_long_tail();
        let truth = default_ground_truth();
        let (base, adaptive) = w.default_plans(&truth).unwrap();
        let c = ClusterConfig {
            steps: 60,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let rc = RefitConfig {
            every: 20,
            target_sync: DEFAULT_TARGET_SYNC,
            m_mem: DEFAULT_TOKEN_BUDGET as f64,
            grid: PGrid::default(),
        };
        let e = run_experiment(&w, &base, &adaptive, &c, Some(&rc)).unwrap();
        assert_eq!(e.b.refits.len(), 2);
        for r in &e.b.refits {
            let m = r.model.unwrap();
            assert_eq!(m.p, 2.0);
            assert!((m.b - truth.b).abs() < 1e-6 * truth.b);
            assert_eq!(r.plan.as_ref().unwrap(), &adaptive);
        }
    }

    proptest! {
        #[test]
        fn range_and_cv_scale_invariant(values in proptest::collection::vec(0.1f64..1e6, 1..20), k in 1e-3f64..1e3) {
            let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
            prop_assert!((cv_step(&values).unwrap() - cv_step(&scaled).unwrap()).abs() < 1e-9);
            prop_assert!((compute_cv(&values).unwrap() - compute_cv(&scaled).unwrap()).abs() < 1e-7);
        }

        #[test]
        fn dual_plan_max_load_not_worse(seed in 0u64..1000) {
            // noise-free, p = 2: per-step max load of the adaptive plan never
            // exceeds the baseline's except where the adaptive plan sits at the floor
            let w = Workload::default_long_tail();
            let (base, adaptive) = w.default_plans(&default_ground_truth()).unwrap();
            let c = ClusterConfig { steps: 5, noise_sigma: 0.0, seed, ..Default::default() };
            let e = run_experiment(&w, &base, &adaptive, &c, None).unwrap();
            for (ra, rb) in e.a.records.iter().zip(&e.b.records) {
                let max_a = ra.workers.iter().map(|w| w.load).max().unwrap();
                let max_b = rb.workers.iter().filter(|w| w.batch > 1).map(|w| w.load).max().unwrap_or(0);
                prop_assert!(max_b <= max_a);
            }
        }
    }
}
