//! Paired function datasets with exact or high-accuracy reference solutions.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::basis::{uniform_grid, uniform_grid_1d};
use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::rng;

/// Zero-mean Gaussian random field on `[0, 1]` with kernel
/// `σ² exp(-|x - x'|² / ℓ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grf1dConfig {
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    pub grid: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    /// Draw on this many points and interpolate linearly onto `grid`, so
    /// the same seed gives the same functions at every resolution.
    #[serde(default)]
    pub reference_grid: Option<usize>,
}

fn default_length_scale() -> f64 {
    0.04
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    1e-10
}

impl Grf1dConfig {
    pub fn new(grid: usize, seed: u64) -> Self {
        Self {
            length_scale: default_length_scale(),
            amplitude: default_amplitude(),
            grid,
            jitter: default_jitter(),
            seed,
            reference_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::config("grf.length_scale", "must be positive"));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config("grf.amplitude", "must be positive"));
        }
        if self.grid < 2 {
            return Err(Error::config("grf.grid", "need at least 2 grid points"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("grf.jitter", "must be non-negative"));
        }
        if self.reference_grid.is_some_and(|n| n < 2) {
            return Err(Error::config("grf.reference_grid", "need at least 2 grid points"));
        }
        Ok(())
    }

    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        let r = (x - y) / self.length_scale;
        self.amplitude * self.amplitude * (-r * r).exp()
    }

    pub fn covariance(&self, points: &[f64]) -> DMatrix<f64> {
        let n = points.len();
        DMatrix::from_fn(n, n, |i, j| self.kernel(points[i], points[j]))
    }
}

/// Lower Cholesky factor of `cov + jitter I`, raising the jitter tenfold
/// until the factorization succeeds or the jitter exceeds 1e-6.
fn jittered_cholesky(cov: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let scale = cov.diagonal().max().max(f64::MIN_POSITIVE);
    let mut j = jitter;
    loop {
        let mut k = cov.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += j * scale;
        }
        if let Some(c) = Cholesky::new(k) {
            return Ok(c.l());
        }
        j = if j == 0.0 { 1e-10 } else { j * 10.0 };
        if j > 1e-6 * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "covariance factorization failed with jitter up to 1e-6 (started at {jitter:e})"
            )));
        }
    }
}

/// `count` draws of the field on the configured grid, one per row.
pub fn sample_grf(config: &Grf1dConfig, count: usize) -> Result<DMatrix<f64>> {
    config.validate()?;
    let n = config.reference_grid.unwrap_or(config.grid);
    let points: Vec<f64> = uniform_grid_1d(0.0, 1.0, n).iter().copied().collect();
    let l = jittered_cholesky(&config.covariance(&points), config.jitter)?;
    let mut rng = rng::stream(config.seed, 0);
    let z = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let draws = (l * z).transpose();
    if config.reference_grid.is_none() || n == config.grid {
        return Ok(draws);
    }
    let target = uniform_grid_1d(0.0, 1.0, config.grid);
    Ok(interpolate_rows(&draws, target.as_slice()))
}

/// Linear interpolation of rows sampled on a uniform grid over `[0, 1]`.
pub fn interpolate_rows(values: &DMatrix<f64>, at: &[f64]) -> DMatrix<f64> {
    let n = values.ncols();
    let h = 1.0 / (n - 1) as f64;
    DMatrix::from_fn(values.nrows(), at.len(), |r, c| {
        let x = at[c].clamp(0.0, 1.0);
        let i = ((x / h).floor() as usize).min(n - 2);
        let t = (x - i as f64 * h) / h;
        (1.0 - t) * values[(r, i)] + t * values[(r, i + 1)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_iterations() -> usize {
    100
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: default_tol(), max_iterations: default_iterations() }
    }
}

fn permeability(u: f64) -> f64 {
    0.2 + u * u
}

/// Discrete residual `(a u')' - f` at interior nodes; boundary entries are zero.
fn darcy_residual(u: &[f64], f: &[f64], h2: f64) -> Vec<f64> {
    let n = u.len();
    let mut r = vec![0.0; n];
    for i in 1..n - 1 {
        let ap = 0.5 * (permeability(u[i]) + permeability(u[i + 1]));
        let am = 0.5 * (permeability(u[i - 1]) + permeability(u[i]));
        r[i] = (ap * (u[i + 1] - u[i]) - am * (u[i] - u[i - 1])) / h2 - f[i];
    }
    r
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `(a(u) u')' = f` on a uniform grid over `[0, 1]` with
/// `u(0) = u(1) = 0` and `a(u) = 0.2 + u²`.
///
/// Newton's method from `u = 0` on the conservative three-point scheme.
/// Steps are halved (up to 30 times) while the residual grows. Iteration
/// stops when the residual ∞-norm drops below `tol`, or when the Newton
/// update is at rounding level relative to `u`, which is where the residual
/// of a fine grid bottoms out.
pub fn solve_darcy_1d(f: &[f64], config: NewtonConfig) -> Result<Vec<f64>> {
    let n = f.len();
    if n < 3 {
        return Err(Error::Domain("the Darcy grid needs at least 3 points".into()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("forcing has non-finite values".into()));
    }
    let h = 1.0 / (n - 1) as f64;
    let h2 = h * h;
    let mut u = vec![0.0; n];
    let mut r = darcy_residual(&u, f, h2);
    let mut norm = max_abs(&r);
    let mut history = vec![norm];
    if norm < config.tol {
        return Ok(u);
    }
    let m = n - 2;
    let (mut lower, mut diag, mut upper, mut rhs) = (vec![0.0; m - 1], vec![0.0; m], vec![0.0; m - 1], vec![0.0; m]);
    for _ in 0..config.max_iterations {
        for k in 0..m {
            let i = k + 1;
            let ap = 0.5 * (permeability(u[i]) + permeability(u[i + 1]));
            let am = 0.5 * (permeability(u[i - 1]) + permeability(u[i]));
            let dp = u[i + 1] - u[i];
            let dm = u[i] - u[i - 1];
            // a'(u)/2 = u
            if k > 0 {
                lower[k - 1] = (am - u[i - 1] * dm) / h2;
            }
            if k + 1 < m {
                upper[k] = (ap + u[i + 1] * dp) / h2;
            }
            diag[k] = (u[i] * dp - ap - u[i] * dm - am) / h2;
            rhs[k] = -r[i];
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs)?;
        let step = max_abs(&rhs);
        let mut t = 1.0;
        let mut trial = u.clone();
        let mut trial_r;
        let mut halvings = 0;
        loop {
            for k in 0..m {
                trial[k + 1] = u[k + 1] + t * rhs[k];
            }
            trial_r = darcy_residual(&trial, f, h2);
            if max_abs(&trial_r) <= norm || halvings == 30 {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        u = trial;
        r = trial_r;
        norm = max_abs(&r);
        history.push(norm);
        if !norm.is_finite() {
            break;
        }
        if norm < config.tol || t * step <= 16.0 * f64::EPSILON * max_abs(&u) {
            return Ok(u);
        }
    }
    Err(Error::NoConvergence { iterations: history.len() - 1, residuals: history })
}

/// Solution of `Δu = f` on `[0, 1]²` with zero boundary values for
/// `f = Σ α_ij sin(iπx) sin(jπy)`, `i, j = 0..modes`. Exact at every point.
/// `alpha` is row-major `modes × modes`; `points` is `n × 2`.
pub fn solve_poisson_2d_square(alpha: &DMatrix<f64>, points: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; points.nrows()];
    for (p, value) in out.iter_mut().enumerate() {
        let (x, y) = (points[(p, 0)], points[(p, 1)]);
        let mut acc = 0.0;
        for i in 1..alpha.nrows() {
            for j in 1..alpha.ncols() {
                let a = alpha[(i, j)];
                if a != 0.0 {
                    let k2 = ((i * i + j * j) as f64) * PI * PI;
                    acc -= a * (i as f64 * PI * x).sin() * (j as f64 * PI * y).sin() / k2;
                }
            }
        }
        *value = acc;
    }
    out
}

/// The sine-expansion forcing matching [`solve_poisson_2d_square`].
pub fn poisson_2d_forcing(alpha: &DMatrix<f64>, points: &DMatrix<f64>) -> Vec<f64> {
    (0..points.nrows())
        .map(|p| {
            let (x, y) = (points[(p, 0)], points[(p, 1)]);
            let mut acc = 0.0;
            for i in 0..alpha.nrows() {
                for j in 0..alpha.ncols() {
                    acc += alpha[(i, j)] * (i as f64 * PI * x).sin() * (j as f64 * PI * y).sin();
                }
            }
            acc
        })
        .collect()
}

/// `u = α Σ sin(π x_i / 2)` and `f = α (π²/4) Σ sin(π x_i / 2)` at each row
/// of `points`.
pub fn highd_poisson(alpha: f64, points: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let base: Vec<f64> = points.row_iter().map(|r| r.iter().map(|x| (0.5 * PI * x).sin()).sum()).collect();
    let u = base.iter().map(|s| alpha * s).collect();
    let f = base.iter().map(|s| alpha * 0.25 * PI * PI * s).collect();
    (f, u)
}

/// Solves `u'' = f` with `u(0) = u(1) = 0` on a uniform grid and returns
/// `(u, u')`; the derivative uses central differences inside and
/// second-order one-sided differences at the ends.
pub fn solve_linear_poisson_1d(f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = f.len();
    if n < 3 {
        return Err(Error::Domain("the Poisson grid needs at least 3 points".into()));
    }
    let h = 1.0 / (n - 1) as f64;
    let h2 = h * h;
    let m = n - 2;
    let mut rhs: Vec<f64> = f[1..n - 1].iter().map(|v| v * h2).collect();
    solve_tridiagonal(&vec![1.0; m - 1], &vec![-2.0; m], &vec![1.0; m - 1], &mut rhs)?;
    let mut u = vec![0.0; n];
    u[1..n - 1].copy_from_slice(&rhs);
    let mut du = vec![0.0; n];
    for i in 1..n - 1 {
        du[i] = (u[i + 1] - u[i - 1]) / (2.0 * h);
    }
    du[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
    du[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
    Ok((u, du))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleTag {
    Train,
    Test,
    Extrapolation,
}

impl SampleTag {
    pub fn code(self) -> f64 {
        match self {
            Self::Train => 0.0,
            Self::Test => 1.0,
            Self::Extrapolation => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code {
            c if c == 0.0 => Ok(Self::Train),
            c if c == 1.0 => Ok(Self::Test),
            c if c == 2.0 => Ok(Self::Extrapolation),
            c => Err(Error::Format(format!("unknown sample tag code {c}"))),
        }
    }
}

/// Sampled input and output functions for `M` samples.
///
/// Each row of `inputs` holds the `C_in` input components back to back,
/// each sampled at all `input_points`; likewise for `outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDataset {
    pub input_points: DMatrix<f64>,
    pub output_points: DMatrix<f64>,
    pub input_components: usize,
    pub output_components: usize,
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub tags: Vec<SampleTag>,
    pub provenance: serde_json::Value,
}

impl FunctionDataset {
    pub fn validate(&self) -> Result<()> {
        let m = self.tags.len();
        let d = self.input_points.ncols();
        if self.output_points.ncols() != d {
            return Err(Error::Data("input and output points differ in dimension".into()));
        }
        if self.input_components == 0 || self.output_components == 0 {
            return Err(Error::Data("component counts must be at least 1".into()));
        }
        if self.inputs.shape() != (m, self.input_components * self.input_points.nrows()) {
            return Err(Error::Data(format!("inputs have shape {:?}", self.inputs.shape())));
        }
        if self.outputs.shape() != (m, self.output_components * self.output_points.nrows()) {
            return Err(Error::Data(format!("outputs have shape {:?}", self.outputs.shape())));
        }
        let all = [&self.input_points, &self.output_points, &self.inputs, &self.outputs];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.tags.len()
    }

    pub fn dim(&self) -> usize {
        self.input_points.ncols()
    }

    pub fn indices(&self, tag: SampleTag) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, t)| **t == tag).map(|(i, _)| i).collect()
    }

    /// Input and output rows of the samples carrying `tag`.
    pub fn split(&self, tag: SampleTag) -> (DMatrix<f64>, DMatrix<f64>) {
        let idx = self.indices(tag);
        (self.inputs.select_rows(&idx), self.outputs.select_rows(&idx))
    }
}

/// Generator settings for each supported problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// GRF forcing on `grid` points, nonlinear Darcy solution on the same grid.
    Darcy1d {
        grid: usize,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_length_scale")]
        length_scale: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default)]
        reference_grid: Option<usize>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Sine-expansion forcing and exact solution on a `grid × grid` lattice.
    Poisson2d {
        grid: usize,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_modes")]
        modes: usize,
    },
    /// Analytic family on uniform random points of `[-1, 1]^dim`.
    Highdpoisson {
        dim: usize,
        points: usize,
        #[serde(default = "default_highd_train")]
        train: usize,
        #[serde(default = "default_highd_gen1")]
        gen1: usize,
        #[serde(default = "default_highd_gen2")]
        gen2: usize,
        #[serde(default)]
        seed: u64,
    },
    /// GRF forcing, outputs `[u, u']` of the linear problem `u'' = f`.
    Multioutput1d {
        grid: usize,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_length_scale")]
        length_scale: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

fn default_modes() -> usize {
    5
}
fn default_highd_train() -> usize {
    8
}
fn default_highd_gen1() -> usize {
    2
}
fn default_highd_gen2() -> usize {
    10
}

fn split_tags(train: usize, test: usize) -> Vec<SampleTag> {
    let mut tags = vec![SampleTag::Train; train];
    tags.extend(std::iter::repeat_n(SampleTag::Test, test));
    tags
}

fn rows_from(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = samples.first().map_or(0, Vec::len);
    DMatrix::from_fn(samples.len(), cols, |i, j| samples[i][j])
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Darcy1d { .. } => "darcy1d",
            Self::Poisson2d { .. } => "poisson2d",
            Self::Highdpoisson { .. } => "highdpoisson",
            Self::Multioutput1d { .. } => "multioutput1d",
        }
    }

    /// Copy with the sampling grid replaced; other settings unchanged.
    pub fn with_grid(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::Darcy1d { grid, .. } | Self::Poisson2d { grid, .. } | Self::Multioutput1d { grid, .. } => *grid = n,
            Self::Highdpoisson { points, .. } => *points = n,
        }
        out
    }

    /// Replaces the split sizes. For the high-d family `test` sets the
    /// in-range (Gen1) count and the extrapolation count is kept.
    pub fn with_counts(&self, n_train: usize, n_test: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::Darcy1d { train, test, .. } | Self::Poisson2d { train, test, .. } | Self::Multioutput1d { train, test, .. } => {
                *train = n_train;
                *test = n_test;
            }
            Self::Highdpoisson { train, gen1, .. } => {
                *train = n_train;
                *gen1 = n_test;
            }
        }
        out
    }

    /// (train, test) split sizes; `test` is the Gen1 count for the high-d
    /// family.
    pub fn counts(&self) -> (usize, usize) {
        match self {
            Self::Darcy1d { train, test, .. } | Self::Poisson2d { train, test, .. } | Self::Multioutput1d { train, test, .. } => {
                (*train, *test)
            }
            Self::Highdpoisson { train, gen1, .. } => (*train, *gen1),
        }
    }

    pub fn with_seed(&self, s: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::Darcy1d { seed, .. }
            | Self::Poisson2d { seed, .. }
            | Self::Highdpoisson { seed, .. }
            | Self::Multioutput1d { seed, .. } => *seed = s,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(format!("dataset.{field}"), msg)) };
        match self {
            Self::Darcy1d { grid, train, test, tol, length_scale, amplitude, reference_grid, .. } => {
                check(*grid >= 3, "grid", "need at least 3 points")?;
                check(train + test > 0, "train", "need at least one sample")?;
                check(*tol > 0.0, "tol", "must be positive")?;
                check(reference_grid.is_none_or(|n| n >= 2), "reference_grid", "need at least 2 points")?;
                check(*length_scale > 0.0 && *amplitude > 0.0, "length_scale", "kernel parameters must be positive")
            }
            Self::Poisson2d { grid, train, test, modes, .. } => {
                check(*grid >= 2, "grid", "need at least 2 points per side")?;
                check(*modes >= 1, "modes", "need at least one mode")?;
                check(train + test > 0, "train", "need at least one sample")
            }
            Self::Highdpoisson { dim, points, train, gen1, gen2, .. } => {
                check(*dim >= 1, "dim", "must be at least 1")?;
                check(*points >= 1, "points", "must be at least 1")?;
                check(train + gen1 + gen2 > 0, "train", "need at least one sample")
            }
            Self::Multioutput1d { grid, train, test, length_scale, amplitude, .. } => {
                check(*grid >= 3, "grid", "need at least 3 points")?;
                check(train + test > 0, "train", "need at least one sample")?;
                check(*length_scale > 0.0 && *amplitude > 0.0, "length_scale", "kernel parameters must be positive")
            }
        }
    }

    pub fn generate(&self) -> Result<FunctionDataset> {
        self.validate()?;
        let provenance = json!({
            "generator": self.name(),
            "spec": self,
            "crate_version": env!("CARGO_PKG_VERSION"),
        });
        let ds = match self {
            &Self::Darcy1d { grid, train, test, seed, length_scale, amplitude, reference_grid, tol } => {
                // With a reference grid both f and u live there and are
                // interpolated to `grid`, so every resolution samples the
                // same pair.
                let solve_grid = reference_grid.unwrap_or(grid);
                let grf = Grf1dConfig { length_scale, amplitude, grid: solve_grid, jitter: default_jitter(), seed, reference_grid: None };
                let mut inputs = sample_grf(&grf, train + test)?;
                let newton = NewtonConfig { tol, ..NewtonConfig::default() };
                let mut outputs = DMatrix::zeros(train + test, solve_grid);
                for (k, row) in inputs.row_iter().enumerate() {
                    let f: Vec<f64> = row.iter().copied().collect();
                    let u = solve_darcy_1d(&f, newton)?;
                    outputs.row_mut(k).copy_from_slice(&u);
                }
                let points = uniform_grid_1d(0.0, 1.0, grid);
                if solve_grid != grid {
                    inputs = interpolate_rows(&inputs, points.as_slice());
                    outputs = interpolate_rows(&outputs, points.as_slice());
                }
                FunctionDataset {
                    input_points: points.clone(),
                    output_points: points,
                    input_components: 1,
                    output_components: 1,
                    inputs,
                    outputs,
                    tags: split_tags(train, test),
                    provenance,
                }
            }
            &Self::Poisson2d { grid, train, test, seed, modes } => {
                let points = uniform_grid(0.0, 1.0, grid, 2);
                let mut rng = rng::stream(seed, 0);
                let mut fs = Vec::with_capacity(train + test);
                let mut us = Vec::with_capacity(train + test);
                for _ in 0..train + test {
                    let alpha = DMatrix::from_fn(modes, modes, |_, _| rng.random_range(-1.0..=1.0));
                    fs.push(poisson_2d_forcing(&alpha, &points));
                    us.push(solve_poisson_2d_square(&alpha, &points));
                }
                let mut provenance = provenance;
                provenance["forcing"] = json!("separable sin(i pi x) sin(j pi y), i, j = 0..modes-1");
                FunctionDataset {
                    input_points: points.clone(),
                    output_points: points,
                    input_components: 1,
                    output_components: 1,
                    inputs: rows_from(&fs),
                    outputs: rows_from(&us),
                    tags: split_tags(train, test),
                    provenance,
                }
            }
            &Self::Highdpoisson { dim, points, train, gen1, gen2, seed } => {
                let mut point_rng = rng::stream(seed, 0);
                let xs = DMatrix::from_fn(points, dim, |_, _| point_rng.random_range(-1.0..=1.0));
                let mut alpha_rng = rng::stream(seed, 1);
                let mut alphas = Vec::new();
                let mut tags = Vec::new();
                for _ in 0..train + gen1 {
                    alphas.push(alpha_rng.random_range(-1.0..=1.0));
                }
                tags.extend(std::iter::repeat_n(SampleTag::Train, train));
                tags.extend(std::iter::repeat_n(SampleTag::Test, gen1));
                for _ in 0..gen2 {
                    alphas.push(alpha_rng.random_range(1.0..=2.0));
                }
                tags.extend(std::iter::repeat_n(SampleTag::Extrapolation, gen2));
                let (fs, us): (Vec<_>, Vec<_>) = alphas.iter().map(|&a| highd_poisson(a, &xs)).unzip();
                let mut provenance = provenance;
                provenance["alphas"] = json!(alphas);
                FunctionDataset {
                    input_points: xs.clone(),
                    output_points: xs,
                    input_components: 1,
                    output_components: 1,
                    inputs: rows_from(&fs),
                    outputs: rows_from(&us),
                    tags,
                    provenance,
                }
            }
            &Self::Multioutput1d { grid, train, test, seed, length_scale, amplitude } => {
                let grf = Grf1dConfig { length_scale, amplitude, grid, jitter: default_jitter(), seed, reference_grid: None };
                let inputs = sample_grf(&grf, train + test)?;
                let mut outputs = DMatrix::zeros(train + test, 2 * grid);
                for (k, row) in inputs.row_iter().enumerate() {
                    let f: Vec<f64> = row.iter().copied().collect();
                    let (u, du) = solve_linear_poisson_1d(&f)?;
                    outputs.view_mut((k, 0), (1, grid)).copy_from_slice(&u);
                    outputs.view_mut((k, grid), (1, grid)).copy_from_slice(&du);
                }
                let points = uniform_grid_1d(0.0, 1.0, grid);
                FunctionDataset {
                    input_points: points.clone(),
                    output_points: points,
                    input_components: 1,
                    output_components: 2,
                    inputs,
                    outputs,
                    tags: split_tags(train, test),
                    provenance,
                }
            }
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Manufactured Darcy problem: `u* = x(1 - x)` and the forcing
/// `f* = ((0.2 + u*²) u*')'` evaluated analytically.
pub fn darcy_manufactured(n: usize) -> (Vec<f64>, Vec<f64>) {
    let xs = uniform_grid_1d(0.0, 1.0, n);
    let u: Vec<f64> = xs.iter().map(|x| x * (1.0 - x)).collect();
    let f = xs
        .iter()
        .map(|x| {
            let u = x * (1.0 - x);
            let du = 1.0 - 2.0 * x;
            2.0 * u * du * du - 2.0 * permeability(u)
        })
        .collect();
    (f, u)
}

/// Max nodal error of the Darcy solver against [`darcy_manufactured`].
pub fn darcy_manufactured_error(n: usize) -> Result<f64> {
    let (f, exact) = darcy_manufactured(n);
    let u = solve_darcy_1d(&f, NewtonConfig::default())?;
    Ok(u.iter().zip(&exact).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}
