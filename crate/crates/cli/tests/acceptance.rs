//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use seqload_cli::formats::{
    parse_jsonl, read_csv, read_json, to_json, write_csv, write_jsonl, MetricsRow, ModelDoc,
    PlanRow, SummaryDoc, TraceLine,
};
use seqload_cli::manifest::RunManifest;
use seqload_core::adaln::{
    activation_bytes, default_size_grid, gradcheck, random_problem, tile_check, tile_sweep,
    Accumulation, GradcheckConfig, GraphMode,
};
use seqload_core::costfit::{
    correlation_report, derive_m_comp, fit_cost_model, CostModel, PGrid, Trial,
};
use seqload_core::scheduler::{dual_constraint_batch, DualConstraint};
use seqload_core::shapes::{sequence_length, LatentGeometry, MediaShape};
use seqload_core::sim::{
    default_ground_truth, run_experiment, throughput, ClusterConfig, Workload,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table_arithmetic() -> Outcome {
    let g = LatentGeometry::default();
    let short = MediaShape::new(233, 640, 640).unwrap();
    let long = MediaShape::new(257, 640, 640).unwrap();
    let s_short = sequence_length(short, &g).map_err(|e| e.to_string())?;
    let s_long = sequence_length(long, &g).map_err(|e| e.to_string())?;
    check(s_short == 48_000, || format!("S(233) = {s_short}"))?;
    check(s_long == 52_800, || format!("S(257) = {s_long}"))?;
    let mut got = Vec::new();
    for (shape, t, want) in [
        (short, 62.0, 2322.0),
        (short, 56.0, 2571.0),
        (long, 68.0, 2328.0),
    ] {
        let v = throughput(3, shape, &g, t).map_err(|e| e.to_string())?;
        check((v - want).abs() <= 2.0, || {
            format!("throughput {v:.1} vs {want}")
        })?;
        got.push(format!("{v:.1}"));
    }
    Ok(format!("S = 48000/52800, throughput = {}", got.join("/")))
}

fn brute_force_batch(s: u64, m_mem: f64, m_comp: f64, p: f64) -> u64 {
    let sf = s as f64;
    let sp = sf.powf(p);
    let mut b = 0u64;
    while ((b + 1) as f64) * sf <= m_mem && ((b + 1) as f64) * sp <= m_comp {
        b += 1;
    }
    b.max(1)
}

fn batch_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    for _ in 0..n {
        let s = rng.random_range(1u64..200_000);
        let m_mem = rng.random_range(1.0..4.0e6);
        let m_comp = rng.random_range(1.0..1.0e12);
        let p = rng.random_range(1.0..2.6);
        let c = DualConstraint::new(m_mem, m_comp, p).map_err(|e| e.to_string())?;
        let (b, _) = dual_constraint_batch(s, &c).map_err(|e| e.to_string())?;
        let want = brute_force_batch(s, m_mem, m_comp, p);
        check(b == want, || {
            format!("S={s} M_mem={m_mem} M_comp={m_comp} p={p}: {b} vs {want}")
        })?;
    }
    Ok(format!("{n} random tuples agree with brute force"))
}

fn synthetic_trials(model: &CostModel, noise: Option<&mut ChaCha8Rng>) -> Vec<Trial> {
    let mut rng = noise;
    let mut out = Vec::new();
    let pairs: Vec<(u64, u64)> = (1..=3u64)
        .flat_map(|b| [8000u64, 24_000, 48_000].map(|s| (b, s)))
        .collect();
    let count = if rng.is_some() { 100 } else { pairs.len() };
    for i in 0..count {
        let (b, s) = pairs[i % pairs.len()];
        let mut t = model.predict(b, s);
        if let Some(r) = rng.as_deref_mut() {
            let z: f64 = r.sample(StandardNormal);
            t *= 1.0 + 0.05 * z;
        }
        out.push(Trial::new(b, s, t));
    }
    out
}

fn fitter_recovery() -> Outcome {
    let grid = PGrid::default();
    let points = grid.points().map_err(|e| e.to_string())?;
    for &p in &points {
        let b = 20.0 / 48_000f64.powf(p);
        let truth = CostModel::exact(2.0, b, p);
        let m =
            fit_cost_model(&synthetic_trials(&truth, None), &grid).map_err(|e| e.to_string())?;
        check(m.p == p, || format!("p_hat {} vs {p}", m.p))?;
        check((m.r2 - 1.0).abs() <= 1e-9, || {
            format!("R2 {} at p={p}", m.r2)
        })?;
        for target in [5.0, 20.0, 62.0] {
            let mc = derive_m_comp(&m, target).map_err(|e| e.to_string())?;
            let back = m.a + m.b * mc;
            check(((back - target) / target).abs() <= 1e-9, || {
                format!("M_comp round trip {back} vs {target}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let truth = CostModel::exact(2.0, 1e-9, 2.0);
    let trials = synthetic_trials(&truth, Some(&mut rng));
    let m = fit_cost_model(&trials, &grid).map_err(|e| e.to_string())?;
    check((m.p - 2.0).abs() <= 0.1 + 1e-9, || {
        format!("noisy p_hat {}", m.p)
    })?;
    check(m.r2 >= 0.95, || format!("noisy R2 {}", m.r2))?;
    Ok(format!(
        "{} grid points exact; 5% noise: p_hat = {}, R2 = {:.4}",
        points.len(),
        m.p,
        m.r2
    ))
}

fn default_experiment() -> Result<seqload_core::sim::Experiment, String> {
    let w = Workload::default_long_tail();
    let (base, adaptive) = w
        .default_plans(&default_ground_truth())
        .map_err(|e| e.to_string())?;
    run_experiment(&w, &base, &adaptive, &ClusterConfig::default(), None).map_err(|e| e.to_string())
}

fn correlation_direction() -> Outcome {
    let e = default_experiment()?;
    let r = correlation_report(&e.a.trace(), 2.0).map_err(|e| e.to_string())?;
    check(r.corr_load >= 0.9, || {
        format!("corr(load) = {}", r.corr_load)
    })?;
    check(r.corr_load - r.corr_tokens >= 0.3, || {
        format!(
            "corr(load) {} vs corr(tokens) {}",
            r.corr_load, r.corr_tokens
        )
    })?;
    Ok(format!(
        "corr(t, B*S^2) = {:.3}, corr(t, B*S) = {:.3}",
        r.corr_load, r.corr_tokens
    ))
}

fn ab_simulation() -> Outcome {
    let cfg = ClusterConfig::default();
    check(
        cfg.num_workers == 16 && cfg.steps == 500 && cfg.seed == 42,
        || format!("{cfg:?}"),
    )?;
    let s = default_experiment()?.summary;
    let cv_cut = -s.delta_compute_cv;
    check(cv_cut >= 0.40, || {
        format!("compute_cv reduced by {:.1}%", 100.0 * cv_cut)
    })?;
    check(s.delta_tokens_per_sec >= 0.15, || {
        format!("tokens/sec up {:.1}%", 100.0 * s.delta_tokens_per_sec)
    })?;
    Ok(format!(
        "compute_cv {:.1}% -> {:.1}% ({:.1}% lower), tokens/sec +{:.1}%",
        s.a.mean_compute_cv,
        s.b.mean_compute_cv,
        100.0 * cv_cut,
        100.0 * s.delta_tokens_per_sec
    ))
}

fn operator_fidelity() -> Outcome {
    let cfg = GradcheckConfig::default();
    check(cfg.tolerance == 1e-4, || {
        format!("tolerance {}", cfg.tolerance)
    })?;
    let report = gradcheck(&cfg).map_err(|e| e.to_string())?;
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0, f64::max);
    check(report.pass, || format!("gradcheck failed, worst {worst:e}"))?;
    let mut tiles = usize::MAX;
    for (i, (n, d)) in default_size_grid().into_iter().enumerate() {
        let (input, dy) =
            random_problem(n, d, cfg.epsilon, 1000 + i as u64).map_err(|e| e.to_string())?;
        tiles = tiles.min(tile_sweep(n, d).len());
        for (acc, tol) in [(Accumulation::Double, 1e-12), (Accumulation::Single, 1e-5)] {
            for c in tile_check(&input, &dy, acc).map_err(|e| e.to_string())? {
                check(c.max_rel_err <= tol, || {
                    format!("{n}x{d} {:?} {:?}: {:e}", c.tiles, acc, c.max_rel_err)
                })?;
            }
        }
    }
    check(tiles >= 5, || format!("only {tiles} tile configs"))?;
    Ok(format!(
        "gradcheck worst {worst:.2e} over {} checks; >= {tiles} tiles per size",
        report.entries.len()
    ))
}

fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - icept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn memory_band() -> Outcome {
    let ns: Vec<u64> = (1..=8).map(|k| 8192 * k).collect();
    let bytes = |mode| -> Vec<f64> {
        ns.iter()
            .map(|&n| activation_bytes(n, 5120, 2, 4, mode) as f64)
            .collect()
    };
    let naive = bytes(GraphMode::Naive);
    let fused = bytes(GraphMode::Fused);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for (f, n) in fused.iter().zip(&naive) {
        let r = f / n;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    check(lo >= 0.30 && hi <= 0.44, || {
        format!("ratio range [{lo}, {hi}]")
    })?;
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    for (name, ys) in [("naive", &naive), ("fused", &fused)] {
        let r2 = linear_r2(&xs, ys);
        check(r2 >= 0.999, || format!("{name} linear R2 {r2}"))?;
    }
    Ok(format!(
        "fused/naive ratio in [{lo:.4}, {hi:.4}], linear in N"
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqload"))
}

fn run_chain(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 6] = [
        &["benchmark", "--seed", "42", "--out", "trace.jsonl"],
        &["fit", "--trace", "trace.jsonl", "--out", "model.json"],
        &[
            "plan",
            "--model",
            "model.json",
            "--target-sync",
            "20",
            "--m-mem",
            "240000",
            "--out",
            "adaptive.json",
        ],
        &["plan", "--token-budget", "240000", "--out", "baseline.json"],
        &[
            "simulate",
            "--plan-a",
            "baseline.json",
            "--plan-b",
            "adaptive.json",
            "--steps",
            "120",
            "--out",
            "metrics.csv",
            "--trace-out",
            "workers.jsonl",
            "--refit-every",
            "40",
        ],
        &[
            "kernel-check",
            "--sizes",
            "8x16,33x20",
            "--out",
            "kernel.json",
        ],
    ];
    for args in steps {
        let out = bin()
            .args(args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(())
}

fn same_after_reemit(
    path: &Path,
    reemit: impl Fn(&Path) -> Result<Vec<u8>, String>,
) -> Result<(), String> {
    let original = std::fs::read(path).map_err(|e| e.to_string())?;
    let again = reemit(path)?;
    check(original == again, || {
        format!("{} does not round-trip", path.display())
    })
}

fn determinism_and_round_trip() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_chain(a.path())?;
    run_chain(b.path())?;
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.path().join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| e.to_string())?;
        check(x == y, || format!("{name:?} differs between runs"))?;
    }

    let err = |e: seqload_cli::CliError| e.to_string();
    let d = a.path();
    same_after_reemit(&d.join("model.json"), |p| {
        Ok(to_json(&read_json::<ModelDoc>(p).map_err(err)?))
    })?;
    for plan in ["adaptive.json", "baseline.json"] {
        same_after_reemit(&d.join(plan), |p| {
            Ok(to_json(&read_json::<Vec<PlanRow>>(p).map_err(err)?))
        })?;
    }
    same_after_reemit(&d.join("metrics.csv.manifest.json"), |p| {
        Ok(to_json(&read_json::<RunManifest>(p).map_err(err)?))
    })?;
    same_after_reemit(&d.join("metrics.summary.json"), |p| {
        Ok(to_json(&read_json::<SummaryDoc>(p).map_err(err)?))
    })?;
    let scratch = d.join("scratch");
    for trace in ["trace.jsonl", "workers.jsonl"] {
        same_after_reemit(&d.join(trace), |p| {
            let bytes = std::fs::read(p).map_err(|e| e.to_string())?;
            let rows: Vec<TraceLine> = parse_jsonl(&bytes, p).map_err(err)?;
            write_jsonl(&scratch, &rows).map_err(err)?;
            std::fs::read(&scratch).map_err(|e| e.to_string())
        })?;
    }
    same_after_reemit(&d.join("metrics.csv"), |p| {
        let rows: Vec<MetricsRow> = read_csv(p).map_err(err)?;
        write_csv(&scratch, &rows).map_err(err)?;
        std::fs::read(&scratch).map_err(|e| e.to_string())
    })?;
    Ok(format!(
        "{} artifacts byte-identical across reruns; all formats round-trip",
        names.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (
            "sequence length and throughput arithmetic",
            table_arithmetic,
            Duration::from_secs(1),
        ),
        (
            "dual-constraint batch vs brute force",
            batch_oracle,
            Duration::from_secs(5),
        ),
        (
            "cost-model fitter recovery",
            fitter_recovery,
            Duration::from_secs(10),
        ),
        (
            "step time tracks B*S^2 rather than B*S",
            correlation_direction,
            Duration::from_secs(10),
        ),
        (
            "A/B simulation, 16 workers x 500 steps",
            ab_simulation,
            Duration::from_secs(30),
        ),
        (
            "AdaLN gradients and tiled reduction",
            operator_fidelity,
            Duration::from_secs(60),
        ),
        (
            "activation memory ratio band",
            memory_band,
            Duration::from_secs(1),
        ),
        (
            "CLI determinism and format round-trip",
            determinism_and_round_trip,
            Duration::from_secs(30),
        ),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => {
                let slow = if elapsed > budget {
                    " [over time budget]"
                } else {
                    ""
                };
                println!(
                    "PASS criterion {}: {name}: {detail} ({:.2}s){slow}",
                    i + 1,
                    elapsed.as_secs_f64()
                );
            }
            Err(why) => {
                failed += 1;
                println!(
                    "FAIL criterion {}: {name}: {why} ({:.2}s)",
                    i + 1,
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
