//! JSON, JSON-lines and CSV documents read and written by the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use seqload_core::costfit::{CostModel, Trial};
use seqload_core::scheduler::{
    BatchPolicy, Binding, BucketPlan, DualConstraint, PlanEntry, TokenBudget,
};
use seqload_core::shapes::{build_catalog, Bucket, LatentGeometry, MediaShape};
use seqload_core::sim::{ClusterConfig, PolicySummary, StepMetrics};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub count: u64,
}

pub fn catalog_buckets(entries: &[CatalogEntry], geom: &LatentGeometry) -> Result<Vec<Bucket>> {
    let shapes = entries
        .iter()
        .map(|e| Ok((MediaShape::new(e.frames, e.height, e.width)?, e.count)))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_catalog(&shapes, geom)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDoc {
    pub temporal_factor: u32,
    pub width_factor: u32,
    pub height_factor: u32,
    pub text_tokens: u64,
}

impl Default for GeometryDoc {
    fn default() -> Self {
        LatentGeometry::default().into()
    }
}

impl From<LatentGeometry> for GeometryDoc {
    fn from(g: LatentGeometry) -> Self {
        Self {
            temporal_factor: g.temporal_factor,
            width_factor: g.width_factor,
            height_factor: g.height_factor,
            text_tokens: g.text_tokens,
        }
    }
}

impl From<GeometryDoc> for LatentGeometry {
    fn from(g: GeometryDoc) -> Self {
        Self {
            temporal_factor: g.temporal_factor,
            width_factor: g.width_factor,
            height_factor: g.height_factor,
            text_tokens: g.text_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingDoc {
    Memory,
    Compute,
    Floor,
}

impl From<Binding> for BindingDoc {
    fn from(b: Binding) -> Self {
        match b {
            Binding::Memory => BindingDoc::Memory,
            Binding::Compute => BindingDoc::Compute,
            Binding::Floor => BindingDoc::Floor,
        }
    }
}

impl From<BindingDoc> for Binding {
    fn from(b: BindingDoc) -> Self {
        match b {
            BindingDoc::Memory => Binding::Memory,
            BindingDoc::Compute => Binding::Compute,
            BindingDoc::Floor => Binding::Floor,
        }
    }
}

/// One row of a serialized plan. `binding` is `null` for equal-token plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRow {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub seq_len: u64,
    pub batch_size: u64,
    pub binding: Option<BindingDoc>,
}

pub fn plan_rows(plan: &BucketPlan) -> Vec<PlanRow> {
    plan.entries
        .iter()
        .map(|e| PlanRow {
            frames: e.bucket.shape.frames,
            height: e.bucket.shape.height,
            width: e.bucket.shape.width,
            seq_len: e.bucket.seq_len,
            batch_size: e.batch_size,
            binding: e.binding.map(Into::into),
        })
        .collect()
}

/// Rebuilds a plan; sample counts are taken from `catalog` where the shape is
/// known and are zero otherwise.
pub fn plan_from_rows(rows: &[PlanRow], catalog: &[Bucket]) -> Result<BucketPlan> {
    let entries = rows
        .iter()
        .map(|r| {
            let shape = MediaShape::new(r.frames, r.height, r.width)?;
            let sample_count = catalog
                .iter()
                .find(|b| b.shape == shape)
                .map_or(0, |b| b.sample_count);
            Ok(PlanEntry {
                bucket: Bucket {
                    shape,
                    seq_len: r.seq_len,
                    sample_count,
                },
                batch_size: r.batch_size,
                binding: r.binding.map(Into::into),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BucketPlan { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyConfig {
    Dual { m_mem: f64, m_comp: f64, p: f64 },
    TokenBudget { token_budget: u64 },
}

impl PolicyConfig {
    pub fn to_policy(self) -> Result<BatchPolicy> {
        Ok(match self {
            PolicyConfig::Dual { m_mem, m_comp, p } => {
                BatchPolicy::Dual(DualConstraint::new(m_mem, m_comp, p)?)
            }
            PolicyConfig::TokenBudget { token_budget } => {
                BatchPolicy::EqualToken(TokenBudget::new(token_budget)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub a: f64,
    pub b: f64,
    pub p: f64,
    pub r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

impl ModelDoc {
    pub fn model(&self) -> CostModel {
        CostModel {
            a: self.a,
            b: self.b,
            p: self.p,
            r2: self.r2,
        }
    }
}

impl From<CostModel> for ModelDoc {
    fn from(m: CostModel) -> Self {
        Self {
            a: m.a,
            b: m.b,
            p: m.p,
            r2: m.r2,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub batch: u64,
    pub seq_len: u64,
    pub step_time_sync: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<u32>,
}

impl From<Trial> for TraceLine {
    fn from(t: Trial) -> Self {
        Self {
            batch: t.batch,
            seq_len: t.seq_len,
            step_time_sync: t.step_time_sync,
            worker: t.worker,
        }
    }
}

impl From<TraceLine> for Trial {
    fn from(t: TraceLine) -> Self {
        Trial {
            batch: t.batch,
            seq_len: t.seq_len,
            step_time_sync: t.step_time_sync,
            worker: t.worker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDoc {
    pub a: f64,
    pub b: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub num_workers: usize,
    pub cost: CostDoc,
    pub noise_sigma: f64,
    pub seed: u64,
    pub steps: usize,
}

impl From<ClusterConfig> for ClusterDoc {
    fn from(c: ClusterConfig) -> Self {
        Self {
            num_workers: c.num_workers,
            cost: CostDoc {
                a: c.cost.a,
                b: c.cost.b,
                p: c.cost.p,
            },
            noise_sigma: c.noise_sigma,
            seed: c.seed,
            steps: c.steps,
        }
    }
}

impl From<ClusterDoc> for ClusterConfig {
    fn from(c: ClusterDoc) -> Self {
        Self {
            num_workers: c.num_workers,
            cost: CostModel::exact(c.cost.a, c.cost.b, c.cost.p),
            noise_sigma: c.noise_sigma,
            seed: c.seed,
            steps: c.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefitDoc {
    pub every: usize,
    pub target_sync: f64,
    pub m_mem: f64,
}

/// Everything `simulate` needs besides the two plans; all fields optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDoc {
    #[serde(default)]
    pub catalog: Option<Vec<CatalogEntry>>,
    #[serde(default)]
    pub geometry: Option<GeometryDoc>,
    /// Sampling weights in catalog order; defaults to normalized counts.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub cluster: Option<ClusterDoc>,
    #[serde(default)]
    pub refit: Option<RefitDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub policy: String,
    pub t_sync: f64,
    pub cv_step: f64,
    pub compute_cv: f64,
    pub tokens_per_sec: f64,
    pub theta: f64,
    pub load_cv_step: f64,
    pub time_cv: f64,
}

impl MetricsRow {
    pub fn new(policy: &str, m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            policy: policy.to_string(),
            t_sync: m.t_sync,
            cv_step: m.cv_step,
            compute_cv: m.compute_cv,
            tokens_per_sec: m.tokens_per_sec,
            theta: m.theta,
            load_cv_step: m.load_cv_step,
            time_cv: m.time_cv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySummaryDoc {
    pub steps: usize,
    pub total_tokens: u64,
    pub total_latent_units: u64,
    pub total_time: f64,
    pub tokens_per_sec: f64,
    pub theta: f64,
    pub mean_t_sync: f64,
    pub mean_cv_step: f64,
    pub mean_compute_cv: f64,
    pub mean_load_cv_step: f64,
    pub mean_time_cv: f64,
}

impl From<PolicySummary> for PolicySummaryDoc {
    fn from(s: PolicySummary) -> Self {
        Self {
            steps: s.steps,
            total_tokens: s.total_tokens,
            total_latent_units: s.total_latent_units,
            total_time: s.total_time,
            tokens_per_sec: s.tokens_per_sec,
            theta: s.theta,
            mean_t_sync: s.mean_t_sync,
            mean_cv_step: s.mean_cv_step,
            mean_compute_cv: s.mean_compute_cv,
            mean_load_cv_step: s.mean_load_cv_step,
            mean_time_cv: s.mean_time_cv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitEntryDoc {
    pub after_step: usize,
    pub model: Option<ModelDoc>,
    pub m_comp: Option<f64>,
    pub plan: Option<Vec<PlanRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub a: PolicySummaryDoc,
    pub b: PolicySummaryDoc,
    /// Relative change from policy `a` to policy `b`.
    pub delta_tokens_per_sec: f64,
    pub delta_theta: f64,
    pub delta_cv_step: f64,
    pub delta_compute_cv: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refits: Vec<RefitEntryDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    /// `"NxD"`.
    pub size: String,
    pub variant: String,
    pub tensor: String,
    /// `null` when the error is not finite.
    pub max_rel_err: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCheckRow {
    pub size: String,
    pub d_tile: usize,
    pub n_tile: usize,
    pub accumulation: String,
    pub tensor: String,
    pub max_rel_err: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub mode: String,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "D")]
    pub d: u64,
    pub bytes: u128,
    /// Bytes relative to the naive graph at the same size.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub checks: Vec<GradCheckRow>,
    pub tile_checks: Vec<TileCheckRow>,
    pub memory: Vec<MemoryRow>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::parse(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_bytes(path)?, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::parse(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_bytes(path)?, path)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::parse(path, format!("{other:?}")),
    })?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::parse(path, e)))
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("document serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json(value))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::parse(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::parse(path, e))?;
    write_bytes(path, &bytes)
}

/// `<out>.manifest.json`, next to an output that cannot embed a manifest.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_sidecar(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&sidecar_path(out), manifest)
}

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    std::io::stdout()
        .write_all(&to_json(value))
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}
