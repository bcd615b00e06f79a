//! Fused LayerNorm-Modulate reference operator.
//!
//! Forward computes, per token row `n`,
//!
//! ```text
//! x̂[n,d] = (x[n,d] − μ_n) · rstd_n,   rstd_n = 1 / sqrt(σ²_n + ε)
//! y[n,d] = x̂[n,d] · (1 + scale[d]) + shift[d]
//! ```
//!
//! with population variance, and caches `(μ, rstd)` for the backward pass.
//! The only tensor the fused node needs to keep alive besides the statistics
//! is its input `x`; `x̂` is rebuilt from the cache.
//!
//! Two backward variants are provided. [`adaln_backward_naive`] reduces the
//! modulation gradients row by row along the sequence dimension.
//! [`adaln_backward_dtile`] fixes a feature index in the outer loop (feature
//! tiles) and accumulates sequence tiles per feature, the loop order of a
//! coalesced GPU reduction. Both are sequential loop nests; no speed claim is
//! attached to either.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch("matrix data length"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdalnInput {
    pub x: Matrix,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub epsilon: f64,
}

impl AdalnInput {
    pub fn new(x: Matrix, scale: Vec<f64>, shift: Vec<f64>, epsilon: f64) -> Result<Self> {
        let input = Self {
            x,
            scale,
            shift,
            epsilon,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn tokens(&self) -> usize {
        self.x.rows
    }

    pub fn features(&self) -> usize {
        self.x.cols
    }

    fn validate(&self) -> Result<()> {
        if self.x.rows == 0 || self.x.cols == 0 {
            return Err(Error::ShapeMismatch("input must have N >= 1 and D >= 1"));
        }
        if self.scale.len() != self.x.cols || self.shift.len() != self.x.cols {
            return Err(Error::ShapeMismatch("scale/shift length must equal D"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidValue("epsilon"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.x.data) {
            return Err(Error::NonFinite("x"));
        }
        if !finite(&self.scale) {
            return Err(Error::NonFinite("scale"));
        }
        if !finite(&self.shift) {
            return Err(Error::NonFinite("shift"));
        }
        Ok(())
    }
}

/// Per-token statistics cached by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub mu: Vec<f64>,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdalnOutput {
    pub y: Matrix,
    pub stats: RowStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdalnGrads {
    pub dx: Matrix,
    pub dscale: Vec<f64>,
    pub dshift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileConfig {
    pub d_tile: usize,
    pub n_tile: usize,
}

impl TileConfig {
    pub fn new(d_tile: usize, n_tile: usize) -> Self {
        Self { d_tile, n_tile }
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.d_tile == 0 || self.d_tile > d || self.n_tile == 0 || self.n_tile > n {
            return Err(Error::InvalidTile {
                d_tile: self.d_tile,
                n_tile: self.n_tile,
                n,
                d,
            });
        }
        Ok(())
    }

    /// Clamp both extents into `[1, D]` and `[1, N]`.
    pub fn clamped(&self, n: usize, d: usize) -> Self {
        Self {
            d_tile: self.d_tile.clamp(1, d.max(1)),
            n_tile: self.n_tile.clamp(1, n.max(1)),
        }
    }
}

/// Accumulator precision of the tiled modulation-gradient reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Accumulation {
    #[default]
    Double,
    /// `f32` accumulators, promoted to `f64` once the reduction is complete.
    Single,
}

fn row_stats(row: &[f64], epsilon: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / libm::sqrt(var + epsilon))
}

pub fn adaln_forward(input: &AdalnInput) -> Result<AdalnOutput> {
    input.validate()?;
    let (n, d) = (input.tokens(), input.features());
    let mut y = Matrix::zeros(n, d);
    let mut mu = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = input.x.row(r);
        let (m, rs) = row_stats(row, input.epsilon);
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            let xhat = (row[c] - m) * rs;
            *out = xhat * (1.0 + input.scale[c]) + input.shift[c];
        }
        mu.push(m);
        rstd.push(rs);
    }
    Ok(AdalnOutput {
        y,
        stats: RowStats { mu, rstd },
    })
}

fn check_backward(dy: &Matrix, input: &AdalnInput, stats: &RowStats) -> Result<()> {
    input.validate()?;
    if dy.rows != input.tokens() || dy.cols != input.features() {
        return Err(Error::ShapeMismatch("dy must match x"));
    }
    if stats.mu.len() != input.tokens() || stats.rstd.len() != input.tokens() {
        return Err(Error::StaleStats);
    }
    if dy.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dy"));
    }
    Ok(())
}

#[inline]
fn xhat(input: &AdalnInput, stats: &RowStats, n: usize, d: usize) -> f64 {
    (input.x.get(n, d) - stats.mu[n]) * stats.rstd[n]
}

fn input_grad(dy: &Matrix, input: &AdalnInput, stats: &RowStats) -> Matrix {
    let (n, d) = (input.tokens(), input.features());
    let mut dx = Matrix::zeros(n, d);
    let mut g = vec![0.0; d];
    let mut xh = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        for c in 0..d {
            g[c] = dyr[c] * (1.0 + input.scale[c]);
            xh[c] = xhat(input, stats, r, c);
        }
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = stats.rstd[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rs * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

/// Backward pass with the modulation gradients reduced row by row.
pub fn adaln_backward_naive(
    dy: &Matrix,
    input: &AdalnInput,
    stats: &RowStats,
) -> Result<AdalnGrads> {
    check_backward(dy, input, stats)?;
    let (n, d) = (input.tokens(), input.features());
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        for c in 0..d {
            dshift[c] += dyr[c];
            dscale[c] += dyr[c] * xhat(input, stats, r, c);
        }
    }
    Ok(AdalnGrads {
        dx: input_grad(dy, input, stats),
        dscale,
        dshift,
    })
}

trait Acc: Copy {
    const ZERO: Self;
    fn add(self, v: f64) -> Self;
    fn merge(self, other: Self) -> Self;
    fn promote(self) -> f64;
}

impl Acc for f64 {
    const ZERO: Self = 0.0;
    fn add(self, v: f64) -> Self {
        self + v
    }
    fn merge(self, other: Self) -> Self {
        self + other
    }
    fn promote(self) -> f64 {
        self
    }
}

impl Acc for f32 {
    const ZERO: Self = 0.0;
    fn add(self, v: f64) -> Self {
        self + v as f32
    }
    fn merge(self, other: Self) -> Self {
        self + other
    }
    fn promote(self) -> f64 {
        f64::from(self)
    }
}

fn dtile_reduce<A: Acc>(
    dy: &Matrix,
    input: &AdalnInput,
    stats: &RowStats,
    tiles: TileConfig,
    dscale: &mut [f64],
    dshift: &mut [f64],
) {
    let (n, d) = (input.tokens(), input.features());
    for d0 in (0..d).step_by(tiles.d_tile) {
        for c in d0..(d0 + tiles.d_tile).min(d) {
            let (mut total_scale, mut total_shift) = (A::ZERO, A::ZERO);
            // fixed n-tile traversal order per feature keeps results reproducible
            for n0 in (0..n).step_by(tiles.n_tile) {
                let (mut ps, mut pb) = (A::ZERO, A::ZERO);
                for r in n0..(n0 + tiles.n_tile).min(n) {
                    let g = dy.get(r, c);
                    pb = pb.add(g);
                    ps = ps.add(g * xhat(input, stats, r, c));
                }
                total_scale = total_scale.merge(ps);
                total_shift = total_shift.merge(pb);
            }
            dscale[c] = total_scale.promote();
            dshift[c] = total_shift.promote();
        }
    }
}

/// Backward pass with the modulation gradients reduced feature-tile first.
pub fn adaln_backward_dtile(
    dy: &Matrix,
    input: &AdalnInput,
    stats: &RowStats,
    tiles: TileConfig,
    accumulation: Accumulation,
) -> Result<AdalnGrads> {
    check_backward(dy, input, stats)?;
    tiles.validate(input.tokens(), input.features())?;
    let d = input.features();
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    match accumulation {
        Accumulation::Double => {
            dtile_reduce::<f64>(dy, input, stats, tiles, &mut dscale, &mut dshift)
        }
        Accumulation::Single => {
            dtile_reduce::<f32>(dy, input, stats, tiles, &mut dscale, &mut dshift)
        }
    }
    Ok(AdalnGrads {
        dx: input_grad(dy, input, stats),
        dscale,
        dshift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphMode {
    /// Discrete node chain retaining `x`, `x̂` and the modulated intermediate.
    Naive,
    /// Single fused node retaining `x` only.
    Fused,
}

impl GraphMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphMode::Naive => "naive",
            GraphMode::Fused => "fused",
        }
    }
}

/// Activation bytes saved for backward by one AdaLN call.
///
/// Both modes keep per-token `(μ, σ)`-style statistics; the naive chain also
/// keeps two extra full-size intermediates.
pub fn activation_bytes(
    tokens: u64,
    features: u64,
    element_bytes: u64,
    stat_bytes: u64,
    mode: GraphMode,
) -> u128 {
    let full = u128::from(tokens) * u128::from(features) * u128::from(element_bytes);
    let stats = 2 * u128::from(tokens) * u128::from(stat_bytes);
    let saved = match mode {
        GraphMode::Naive => 3,
        GraphMode::Fused => 1,
    };
    saved * full + stats
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Naive,
    DTile,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::DTile => "dtile",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    Dx,
    Dscale,
    Dshift,
}

impl Tensor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tensor::Dx => "dx",
            Tensor::Dscale => "dscale",
            Tensor::Dshift => "dshift",
        }
    }
}

/// Norm-wise relative error `max|a − b| / max|b|`; `0` when both are zero.
pub fn max_rel_err(actual: &[f64], reference: &[f64]) -> f64 {
    let diff = actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Central finite differences of the loss `⟨dy, y⟩`.
///
/// Perturbing `x[n, :]` only changes row `n` of `y`, and perturbing
/// `scale[d]` or `shift[d]` only changes column `d`, so each difference
/// re-evaluates the forward pass on the affected slice alone.
pub fn finite_difference_grads(dy: &Matrix, input: &AdalnInput, step: f64) -> Result<AdalnGrads> {
    input.validate()?;
    let (n, d) = (input.tokens(), input.features());
    if dy.rows != n || dy.cols != d {
        return Err(Error::ShapeMismatch("dy must match x"));
    }
    let row_loss = |row: &[f64], r: usize| -> Result<f64> {
        let one = AdalnInput {
            x: Matrix::from_vec(1, d, row.to_vec())?,
            scale: input.scale.clone(),
            shift: input.shift.clone(),
            epsilon: input.epsilon,
        };
        let out = adaln_forward(&one)?;
        Ok(out.y.row(0).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum())
    };
    let mut dx = Matrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for r in 0..n {
        row.copy_from_slice(input.x.row(r));
        for c in 0..d {
            let orig = row[c];
            row[c] = orig + step;
            let plus = row_loss(&row, r)?;
            row[c] = orig - step;
            let minus = row_loss(&row, r)?;
            row[c] = orig;
            dx.set(r, c, (plus - minus) / (2.0 * step));
        }
    }

    let stats: Vec<(f64, f64)> = (0..n)
        .map(|r| row_stats(input.x.row(r), input.epsilon))
        .collect();
    let column_loss = |c: usize, scale: f64, shift: f64| -> f64 {
        (0..n)
            .map(|r| {
                let (m, rs) = stats[r];
                let y = (input.x.get(r, c) - m) * rs * (1.0 + scale) + shift;
                y * dy.get(r, c)
            })
            .sum()
    };
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    for c in 0..d {
        let (s, b) = (input.scale[c], input.shift[c]);
        dscale[c] = (column_loss(c, s + step, b) - column_loss(c, s - step, b)) / (2.0 * step);
        dshift[c] = (column_loss(c, s, b + step) - column_loss(c, s, b - step)) / (2.0 * step);
    }
    Ok(AdalnGrads { dx, dscale, dshift })
}

pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckEntry {
    pub tokens: usize,
    pub features: usize,
    pub variant: Variant,
    pub tensor: Tensor,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub sizes: Vec<(usize, usize)>,
    pub tolerance: f64,
    /// Tile used by the D-tile variant, clamped to each size.
    pub tiles: TileConfig,
    pub accumulation: Accumulation,
    pub seed: u64,
    pub fd_step: f64,
    pub epsilon: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            sizes: default_size_grid(),
            tolerance: 1e-4,
            tiles: TileConfig::new(32, 256),
            accumulation: Accumulation::Double,
            seed: 42,
            fd_step: DEFAULT_FD_STEP,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

pub fn default_size_grid() -> Vec<(usize, usize)> {
    vec![(8, 16), (64, 128), (512, 256), (4096, 64)]
}

/// Random operator input and upstream gradient of shape `N × D`.
pub fn random_problem(
    tokens: usize,
    features: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(AdalnInput, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<f64> = (0..tokens).map(|_| rng.random_range(-3.0..3.0)).collect();
    let spreads: Vec<f64> = (0..tokens).map(|_| rng.random_range(0.5..2.0)).collect();
    let x = Matrix::from_fn(tokens, features, |r, _| {
        offsets[r] + spreads[r] * rng.random_range(-1.0..1.0)
    });
    let scale = (0..features).map(|_| rng.random_range(-0.5..0.5)).collect();
    let shift = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dy = Matrix::from_fn(tokens, features, |_, _| rng.random_range(-1.0..1.0));
    Ok((AdalnInput::new(x, scale, shift, epsilon)?, dy))
}

/// Checks both backward variants of one problem against finite differences.
pub fn gradcheck_problem(
    input: &AdalnInput,
    dy: &Matrix,
    tiles: TileConfig,
    accumulation: Accumulation,
    tolerance: f64,
    fd_step: f64,
) -> Result<Vec<GradcheckEntry>> {
    let (n, d) = (input.tokens(), input.features());
    let out = adaln_forward(input)?;
    let fd = finite_difference_grads(dy, input, fd_step)?;
    let naive = adaln_backward_naive(dy, input, &out.stats)?;
    let dtile = adaln_backward_dtile(dy, input, &out.stats, tiles.clamped(n, d), accumulation)?;
    let mut entries = Vec::with_capacity(6);
    for (variant, g) in [(Variant::Naive, &naive), (Variant::DTile, &dtile)] {
        for (tensor, got, want) in [
            (Tensor::Dx, g.dx.as_slice(), fd.dx.as_slice()),
            (Tensor::Dscale, &g.dscale[..], &fd.dscale[..]),
            (Tensor::Dshift, &g.dshift[..], &fd.dshift[..]),
        ] {
            let err = max_rel_err(got, want);
            entries.push(GradcheckEntry {
                tokens: n,
                features: d,
                variant,
                tensor,
                max_rel_err: err,
                pass: err <= tolerance,
            });
        }
    }
    Ok(entries)
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.sizes.is_empty() {
        return Err(Error::Empty);
    }
    let mut entries = Vec::new();
    for (i, &(n, d)) in cfg.sizes.iter().enumerate() {
        let (input, dy) = random_problem(n, d, cfg.epsilon, cfg.seed.wrapping_add(i as u64))?;
        entries.extend(gradcheck_problem(
            &input,
            &dy,
            cfg.tiles,
            cfg.accumulation,
            cfg.tolerance,
            cfg.fd_step,
        )?);
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(GradcheckReport { entries, pass })
}

/// A spread of tile shapes for an `N × D` problem, including the degenerate
/// single-tile and one-by-one layouts. Always at least five distinct entries
/// when `N·D >= 6`.
pub fn tile_sweep(tokens: usize, features: usize) -> Vec<TileConfig> {
    let candidates = [
        (features, tokens),
        (1, 1),
        (32, 256),
        (8, 7),
        (features.div_ceil(2), tokens.div_ceil(3)),
        (features, 1),
        (1, tokens),
        (3, 64),
    ];
    let mut out: Vec<TileConfig> = Vec::new();
    for (dt, nt) in candidates {
        let t = TileConfig::new(dt, nt).clamped(tokens, features);
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Maximum tiled-vs-naive deviation accepted in double accumulation.
pub const DTILE_DOUBLE_TOLERANCE: f64 = 1e-12;
/// Maximum tiled-vs-naive deviation accepted with `f32` accumulators.
pub const DTILE_SINGLE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileCheck {
    pub tokens: usize,
    pub features: usize,
    pub tiles: TileConfig,
    pub accumulation: Accumulation,
    pub tensor: Tensor,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compares the tiled modulation gradients with the naive reduction for every
/// tile of [`tile_sweep`].
pub fn tile_check(
    input: &AdalnInput,
    dy: &Matrix,
    accumulation: Accumulation,
) -> Result<Vec<TileCheck>> {
    let (n, d) = (input.tokens(), input.features());
    let out = adaln_forward(input)?;
    let naive = adaln_backward_naive(dy, input, &out.stats)?;
    let tol = match accumulation {
        Accumulation::Double => DTILE_DOUBLE_TOLERANCE,
        Accumulation::Single => DTILE_SINGLE_TOLERANCE,
    };
    let mut checks = Vec::new();
    for tiles in tile_sweep(n, d) {
        let g = adaln_backward_dtile(dy, input, &out.stats, tiles, accumulation)?;
        for (tensor, got, want) in [
            (Tensor::Dscale, &g.dscale, &naive.dscale),
            (Tensor::Dshift, &g.dshift, &naive.dshift),
        ] {
            let err = max_rel_err(got, want);
            checks.push(TileCheck {
                tokens: n,
                features: d,
                tiles,
                accumulation,
                tensor,
                max_rel_err: err,
                pass: err <= tol,
            });
        }
    }
    Ok(checks)
}
