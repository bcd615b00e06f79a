//! The five verbs: benchmark, fit, plan, simulate, kernel-check.

use std::path::{Path, PathBuf};

use seqload_core::adaln::{
    activation_bytes, gradcheck, random_problem, tile_check, Accumulation, GradcheckConfig,
    GraphMode, TileConfig,
};
use seqload_core::costfit::{
    derive_m_comp, fit_cost_model, generate_sweep, grid_profile, PGrid, Trial,
    DEFAULT_LONG_SEQ_THRESHOLD,
};
use seqload_core::scheduler::{emit_plan, BatchPolicy, DualConstraint, TokenBudget};
use seqload_core::shapes::{Bucket, LatentGeometry};
use seqload_core::sim::{
    benchmark_trials, run_experiment, ClusterConfig, RefitConfig, Workload, DEFAULT_TARGET_SYNC,
    DEFAULT_TOKEN_BUDGET,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, Result};
use crate::formats::{
    catalog_buckets, finite, parse_json, parse_jsonl, plan_from_rows, plan_rows, print_json,
    read_bytes, write_csv, write_json, write_jsonl, write_sidecar, CatalogEntry, ClusterDoc,
    ExperimentDoc, GeometryDoc, GradCheckRow, KernelReport, MemoryRow, MetricsRow, ModelDoc,
    PlanRow, PolicyConfig, PolicySummaryDoc, RefitEntryDoc, SummaryDoc, TileCheckRow, TraceLine,
};
use crate::manifest::{Command, ManifestBuilder};

pub const DEFAULT_CATALOG: &str = include_str!("../data/default_catalog.json");
pub const DEFAULT_CLUSTER: &str = include_str!("../data/default_cluster.json");

#[derive(Debug, Parser)]
#[command(
    name = "seqload",
    version,
    about = "Sequence-length aware batch planning for video diffusion training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Sweep batch sizes per bucket against the simulated cluster and write a trace.
    Benchmark(BenchmarkArgs),
    /// Fit `t = a + b·B·S^p` to a trace.
    Fit(FitArgs),
    /// Emit a per-bucket batch plan.
    Plan(PlanArgs),
    /// Run two plans on the simulated cluster and compare them.
    Simulate(SimulateArgs),
    /// Check the AdaLN reference operator and report activation memory.
    KernelCheck(KernelCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CatalogArgs {
    /// Catalog JSON; the built-in long-tail catalog when omitted.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Latent geometry JSON; 8/16/16 compression and no text tokens when omitted.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Cluster config JSON; the built-in 16-worker cluster when omitted.
    #[arg(long, alias = "config")]
    pub cluster: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub levels_short: u64,
    #[arg(long, default_value_t = 4)]
    pub levels_long: u64,
    #[arg(long, default_value_t = DEFAULT_LONG_SEQ_THRESHOLD)]
    pub threshold: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 1.6)]
    pub p_min: f64,
    #[arg(long, default_value_t = 2.4)]
    pub p_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub p_step: f64,
}

impl GridArgs {
    fn grid(&self) -> PGrid {
        PGrid {
            min: self.p_min,
            max: self.p_max,
            step: self.p_step,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Print the R² of every grid point.
    #[arg(long, short)]
    pub verbose: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("policy").required(true).args(["model", "token_budget", "config"])))]
pub struct PlanArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Fitted model JSON; needs --target-sync and --m-mem.
    #[arg(long, requires_all = ["target_sync", "m_mem"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub target_sync: Option<f64>,
    #[arg(long)]
    pub m_mem: Option<f64>,
    /// Emit the equal-token baseline instead.
    #[arg(long)]
    pub token_budget: Option<u64>,
    /// Policy JSON, `{"m_mem","m_comp","p"}` or `{"token_budget"}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyLabel {
    A,
    B,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Experiment JSON with optional catalog, geometry, weights, cluster and refit.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Plan of policy `a`; the equal-token baseline when omitted.
    #[arg(long)]
    pub plan_a: Option<PathBuf>,
    /// Plan of policy `b`; the dual-constraint plan for the cluster's cost when omitted.
    #[arg(long)]
    pub plan_b: Option<PathBuf>,
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-step metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON; `<out stem>.summary.json` when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Per-worker trace JSONL of one policy.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "a")]
    pub trace_policy: PolicyLabel,
    /// Refit and re-plan policy `b` every K steps.
    #[arg(long)]
    pub refit_every: Option<usize>,
    #[arg(long)]
    pub target_sync: Option<f64>,
    #[arg(long)]
    pub m_mem: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccumulationArg {
    Double,
    Single,
}

impl From<AccumulationArg> for Accumulation {
    fn from(a: AccumulationArg) -> Self {
        match a {
            AccumulationArg::Double => Accumulation::Double,
            AccumulationArg::Single => Accumulation::Single,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct KernelCheckArgs {
    /// Comma-separated `NxD` sizes; 8x16,64x128,512x256,4096x64 when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pub sizes: Option<Vec<(usize, usize)>>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Tile as `D_TILExN_TILE`.
    #[arg(long, value_parser = parse_pair, default_value = "32x256")]
    pub tile: (usize, usize),
    #[arg(long, value_enum, default_value = "double")]
    pub accumulation: AccumulationArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Hidden width of the activation-memory table.
    #[arg(long, default_value_t = 5120)]
    pub mem_features: u64,
    #[arg(long, default_value_t = 2)]
    pub elem_bytes: u64,
    #[arg(long, default_value_t = 4)]
    pub stat_bytes: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (l, r) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let l = l.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let r = r.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((l, r))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_geometry(path: Option<&Path>, mb: &mut ManifestBuilder) -> Result<LatentGeometry> {
    let doc = match path {
        Some(p) => {
            let bytes = read_bytes(p)?;
            mb.input(display(p), &bytes);
            parse_json::<GeometryDoc>(&bytes, p)?
        }
        None => {
            let doc = GeometryDoc::default();
            mb.param("geometry", &doc);
            doc
        }
    };
    let g: LatentGeometry = doc.into();
    g.validate()?;
    Ok(g)
}

fn load_catalog_entries(
    path: Option<&Path>,
    mb: &mut ManifestBuilder,
) -> Result<Vec<CatalogEntry>> {
    match path {
        Some(p) => {
            let bytes = read_bytes(p)?;
            mb.input(display(p), &bytes);
            parse_json(&bytes, p)
        }
        None => {
            mb.input("builtin:default_catalog.json", DEFAULT_CATALOG.as_bytes());
            parse_json(
                DEFAULT_CATALOG.as_bytes(),
                Path::new("builtin:default_catalog.json"),
            )
        }
    }
}

fn load_cluster(path: Option<&Path>, mb: &mut ManifestBuilder) -> Result<ClusterConfig> {
    let doc: ClusterDoc = match path {
        Some(p) => {
            let bytes = read_bytes(p)?;
            mb.input(display(p), &bytes);
            parse_json(&bytes, p)?
        }
        None => {
            mb.input("builtin:default_cluster.json", DEFAULT_CLUSTER.as_bytes());
            parse_json(
                DEFAULT_CLUSTER.as_bytes(),
                Path::new("builtin:default_cluster.json"),
            )?
        }
    };
    Ok(doc.into())
}

pub fn builtin_cluster() -> ClusterConfig {
    serde_json::from_str::<ClusterDoc>(DEFAULT_CLUSTER)
        .expect("built-in cluster parses")
        .into()
}

pub fn builtin_catalog() -> Vec<CatalogEntry> {
    serde_json::from_str(DEFAULT_CATALOG).expect("built-in catalog parses")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Verb::Benchmark(a) => benchmark(&a),
        Verb::Fit(a) => fit(&a),
        Verb::Plan(a) => plan(&a),
        Verb::Simulate(a) => simulate(&a),
        Verb::KernelCheck(a) => kernel_check(&a),
    }
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new(Command::Benchmark);
    let geom = load_geometry(args.catalog.geometry.as_deref(), &mut mb)?;
    let entries = load_catalog_entries(args.catalog.catalog.as_deref(), &mut mb)?;
    let catalog = catalog_buckets(&entries, &geom)?;
    let mut cluster = load_cluster(args.cluster.as_deref(), &mut mb)?;
    if let Some(seed) = args.seed {
        cluster.seed = seed;
    }
    mb.param("seed", &cluster.seed)
        .param("levels_short", &args.levels_short)
        .param("levels_long", &args.levels_long)
        .param("threshold", &args.threshold);

    let sweep = generate_sweep(
        &catalog,
        args.levels_short,
        args.levels_long,
        args.threshold,
    )?;
    let trials = benchmark_trials(&sweep, &cluster)?;
    let lines: Vec<TraceLine> = trials.into_iter().map(Into::into).collect();
    write_jsonl(&args.out, &lines)?;
    write_sidecar(
        &args.out,
        &mb.finish(vec![display(&args.out)], Some(cluster.seed)),
    )
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new(Command::Fit);
    let bytes = read_bytes(&args.trace)?;
    mb.input(display(&args.trace), &bytes);
    let grid = args.grid.grid();
    mb.param("grid", &[grid.min, grid.max, grid.step]);
    let trials: Vec<Trial> = parse_jsonl::<TraceLine>(&bytes, &args.trace)?
        .into_iter()
        .map(Into::into)
        .collect();
    let model = fit_cost_model(&trials, &grid)?;
    if args.verbose {
        for g in grid_profile(&trials, &grid)? {
            match g.r2 {
                Some(r2) => println!("p={:.2} a={:.6e} b={:.6e} r2={r2:.9}", g.p, g.a, g.b),
                None => println!("p={:.2} degenerate", g.p),
            }
        }
    }
    let mut doc = ModelDoc::from(model);
    doc.manifest = Some(mb.finish(vec![display(&args.out)], None));
    write_json(&args.out, &doc)
}

pub fn plan(args: &PlanArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new(Command::Plan);
    let geom = load_geometry(args.catalog.geometry.as_deref(), &mut mb)?;
    let entries = load_catalog_entries(args.catalog.catalog.as_deref(), &mut mb)?;
    let catalog = catalog_buckets(&entries, &geom)?;

    let policy = if let Some(budget) = args.token_budget {
        mb.param("token_budget", &budget);
        BatchPolicy::EqualToken(TokenBudget::new(budget)?)
    } else if let Some(path) = &args.config {
        let bytes = read_bytes(path)?;
        mb.input(display(path), &bytes);
        parse_json::<PolicyConfig>(&bytes, path)?.to_policy()?
    } else {
        let path = args.model.as_ref().ok_or_else(|| {
            CliError::Usage("one of --model, --token-budget, --config is required".into())
        })?;
        let (Some(target), Some(m_mem)) = (args.target_sync, args.m_mem) else {
            return Err(CliError::Usage(
                "--model needs --target-sync and --m-mem".into(),
            ));
        };
        let bytes = read_bytes(path)?;
        mb.input(display(path), &bytes);
        mb.param("target_sync", &target).param("m_mem", &m_mem);
        let model = parse_json::<ModelDoc>(&bytes, path)?.model();
        let m_comp = derive_m_comp(&model, target)?;
        BatchPolicy::Dual(DualConstraint::new(m_mem, m_comp, model.p)?)
    };

    let plan = emit_plan(&catalog, &policy)?;
    write_json(&args.out, &plan_rows(&plan))?;
    write_sidecar(&args.out, &mb.finish(vec![display(&args.out)], None))
}

fn load_plan(
    path: &Path,
    catalog: &[Bucket],
    mb: &mut ManifestBuilder,
) -> Result<seqload_core::scheduler::BucketPlan> {
    let bytes = read_bytes(path)?;
    mb.input(display(path), &bytes);
    let rows: Vec<PlanRow> = parse_json(&bytes, path)?;
    plan_from_rows(&rows, catalog)
}

fn summary_path(args: &SimulateArgs) -> PathBuf {
    args.summary
        .clone()
        .unwrap_or_else(|| args.out.with_extension("summary.json"))
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new(Command::Simulate);
    let exp: ExperimentDoc = match &args.config {
        Some(p) => {
            let bytes = read_bytes(p)?;
            mb.input(display(p), &bytes);
            parse_json(&bytes, p)?
        }
        None => ExperimentDoc::default(),
    };

    let geom = match (&args.catalog.geometry, exp.geometry) {
        (None, Some(g)) => {
            let g: LatentGeometry = g.into();
            g.validate()?;
            g
        }
        (path, _) => load_geometry(path.as_deref(), &mut mb)?,
    };
    let entries = match (&args.catalog.catalog, &exp.catalog) {
        (None, Some(c)) => c.clone(),
        (path, _) => load_catalog_entries(path.as_deref(), &mut mb)?,
    };
    let catalog = catalog_buckets(&entries, &geom)?;
    let mut workload = Workload::from_catalog(catalog, geom)?;
    if let Some(w) = &exp.weights {
        workload.weights = w.clone();
    }

    let mut cluster = match (&args.cluster, exp.cluster) {
        (None, Some(c)) => c.into(),
        (path, _) => load_cluster(path.as_deref(), &mut mb)?,
    };
    if let Some(seed) = args.seed {
        cluster.seed = seed;
    }
    if let Some(steps) = args.steps {
        cluster.steps = steps;
    }
    cluster.validate()?;
    mb.param("cluster", &ClusterDoc::from(cluster));

    let (default_a, default_b) = workload.default_plans(&cluster.cost)?;
    let plan_a = match &args.plan_a {
        Some(p) => load_plan(p, &workload.catalog, &mut mb)?,
        None => default_a,
    };
    let plan_b = match &args.plan_b {
        Some(p) => load_plan(p, &workload.catalog, &mut mb)?,
        None => default_b,
    };

    let every = args.refit_every.or(exp.refit.map(|r| r.every));
    let refit = every.filter(|&k| k > 0).map(|every| RefitConfig {
        every,
        target_sync: args
            .target_sync
            .or(exp.refit.map(|r| r.target_sync))
            .unwrap_or(DEFAULT_TARGET_SYNC),
        m_mem: args
            .m_mem
            .or(exp.refit.map(|r| r.m_mem))
            .unwrap_or(DEFAULT_TOKEN_BUDGET as f64),
        grid: PGrid::default(),
    });
    if let Some(r) = &refit {
        mb.param("refit", &[r.every as f64, r.target_sync, r.m_mem]);
    }
    mb.param("weights", &workload.weights);

    let e = run_experiment(&workload, &plan_a, &plan_b, &cluster, refit.as_ref())?;

    let rows: Vec<MetricsRow> =
        e.a.metrics
            .iter()
            .map(|m| MetricsRow::new("a", m))
            .chain(e.b.metrics.iter().map(|m| MetricsRow::new("b", m)))
            .collect();
    let summary_out = summary_path(args);
    let mut outputs = vec![display(&args.out), display(&summary_out)];
    if let Some(t) = &args.trace_out {
        outputs.push(display(t));
    }
    let manifest = mb.finish(outputs, Some(cluster.seed));

    write_csv(&args.out, &rows)?;
    write_sidecar(&args.out, &manifest)?;

    let s = e.summary;
    let doc = SummaryDoc {
        a: PolicySummaryDoc::from(s.a),
        b: PolicySummaryDoc::from(s.b),
        delta_tokens_per_sec: s.delta_tokens_per_sec,
        delta_theta: s.delta_theta,
        delta_cv_step: s.delta_cv_step,
        delta_compute_cv: s.delta_compute_cv,
        refits: e
            .b
            .refits
            .iter()
            .map(|r| RefitEntryDoc {
                after_step: r.after_step,
                model: r.model.map(Into::into),
                m_comp: r.m_comp,
                plan: r.plan.as_ref().map(plan_rows),
            })
            .collect(),
        manifest: Some(manifest.clone()),
    };
    write_json(&summary_out, &doc)?;

    if let Some(t) = &args.trace_out {
        let run = match args.trace_policy {
            PolicyLabel::A => &e.a,
            PolicyLabel::B => &e.b,
        };
        let lines: Vec<TraceLine> = run.trace().into_iter().map(Into::into).collect();
        write_jsonl(t, &lines)?;
        write_sidecar(t, &manifest)?;
    }
    Ok(())
}

/// `N ∈ {8k, 16k, …, 64k}` rows of the activation-memory table.
pub fn memory_table(features: u64, elem_bytes: u64, stat_bytes: u64) -> Vec<MemoryRow> {
    let mut rows = Vec::new();
    for k in 1..=8u64 {
        let n = 8192 * k;
        let naive = activation_bytes(n, features, elem_bytes, stat_bytes, GraphMode::Naive);
        for mode in [GraphMode::Naive, GraphMode::Fused] {
            let bytes = activation_bytes(n, features, elem_bytes, stat_bytes, mode);
            rows.push(MemoryRow {
                mode: mode.as_str().to_string(),
                n,
                d: features,
                bytes,
                ratio: bytes as f64 / naive as f64,
            });
        }
    }
    rows
}

pub fn kernel_report(args: &KernelCheckArgs) -> Result<KernelReport> {
    let mut cfg = GradcheckConfig {
        tolerance: args.tolerance,
        tiles: TileConfig::new(args.tile.0, args.tile.1),
        accumulation: args.accumulation.into(),
        seed: args.seed,
        ..Default::default()
    };
    if let Some(sizes) = &args.sizes {
        cfg.sizes = sizes.clone();
    }
    if cfg.tolerance.is_nan() || cfg.tolerance < 0.0 {
        return Err(CliError::Usage("--tolerance must be >= 0".into()));
    }
    let report = gradcheck(&cfg)?;
    let checks = report
        .entries
        .iter()
        .map(|e| GradCheckRow {
            size: format!("{}x{}", e.tokens, e.features),
            variant: e.variant.as_str().to_string(),
            tensor: e.tensor.as_str().to_string(),
            max_rel_err: finite(e.max_rel_err),
            pass: e.pass,
        })
        .collect::<Vec<_>>();

    let mut tile_checks = Vec::new();
    for (i, &(n, d)) in cfg.sizes.iter().enumerate() {
        let (input, dy) = random_problem(n, d, cfg.epsilon, cfg.seed.wrapping_add(i as u64))?;
        for c in tile_check(&input, &dy, cfg.accumulation)? {
            tile_checks.push(TileCheckRow {
                size: format!("{n}x{d}"),
                d_tile: c.tiles.d_tile,
                n_tile: c.tiles.n_tile,
                accumulation: match c.accumulation {
                    Accumulation::Double => "double",
                    Accumulation::Single => "single",
                }
                .to_string(),
                tensor: c.tensor.as_str().to_string(),
                max_rel_err: finite(c.max_rel_err),
                pass: c.pass,
            });
        }
    }
    let pass = report.pass && tile_checks.iter().all(|c| c.pass);
    Ok(KernelReport {
        checks,
        tile_checks,
        memory: memory_table(args.mem_features, args.elem_bytes, args.stat_bytes),
        pass,
        manifest: None,
    })
}

pub fn kernel_check(args: &KernelCheckArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new(Command::KernelCheck);
    mb.param("sizes", &args.sizes)
        .param("tolerance", &args.tolerance)
        .param("tile", &args.tile)
        .param("accumulation", &format!("{:?}", args.accumulation))
        .param(
            "memory",
            &[args.mem_features, args.elem_bytes, args.stat_bytes],
        );
    let mut report = kernel_report(args)?;
    let outputs = args.out.iter().map(|p| display(p)).collect();
    report.manifest = Some(mb.finish(outputs, Some(args.seed)));
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    if report.pass {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.pass).count()
            + report.tile_checks.iter().filter(|c| !c.pass).count();
        Err(CliError::CheckFailed(format!(
            "{failed} kernel checks exceeded tolerance"
        )))
    }
}
