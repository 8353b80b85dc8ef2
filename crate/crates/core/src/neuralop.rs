//! The coefficient-to-coefficient network.
//!
//! One hidden tanh layer maps input coefficients `a` (length m1) to output
//! coefficients `b` (length m2):
//!
//! `b_k = Σ_i c_ki tanh(Σ_j ξ_ij a_j + η_i)`
//!
//! Training minimizes the mean relative L2 error of the reconstructed
//! functions `Ψ b` against sampled targets `u`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, ThinSvd};
use crate::rng;

/// Samples whose relative residual is below this are treated as exact fits
/// and contribute a zero subgradient.
const ZERO_RESIDUAL: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorNet {
    hidden_weights: DMatrix<f64>,
    hidden_biases: DVector<f64>,
    output_weights: DMatrix<f64>,
    seed: u64,
}

impl OperatorNet {
    /// Uniform weights in ±1/√fan_in, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::config("net", "all layer widths must be at least 1"));
        }
        let mut rng = rng::stream(seed, 0);
        let r1 = 1.0 / (input_dim as f64).sqrt();
        let r2 = 1.0 / (hidden_dim as f64).sqrt();
        let hidden_weights = DMatrix::from_fn(hidden_dim, input_dim, |_, _| rng.random_range(-r1..=r1));
        let output_weights = DMatrix::from_fn(output_dim, hidden_dim, |_, _| rng.random_range(-r2..=r2));
        Ok(Self {
            hidden_weights,
            hidden_biases: DVector::zeros(hidden_dim),
            output_weights,
            seed,
        })
    }

    /// `hidden_weights` is H×m1, `output_weights` is m2×H.
    pub fn from_parts(
        hidden_weights: DMatrix<f64>,
        hidden_biases: DVector<f64>,
        output_weights: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        let h = hidden_weights.nrows();
        if h == 0 || hidden_weights.ncols() == 0 || output_weights.nrows() == 0 {
            return Err(Error::config("net", "all layer widths must be at least 1"));
        }
        if hidden_biases.len() != h || output_weights.ncols() != h {
            return Err(Error::config("net", "parameter shapes disagree on the hidden width"));
        }
        let net = Self { hidden_weights, hidden_biases, output_weights, seed };
        if !net.is_finite() {
            return Err(Error::Numerical("network parameters must be finite".into()));
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weights.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.output_weights.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_weights(&self) -> &DMatrix<f64> {
        &self.hidden_weights
    }

    pub fn hidden_biases(&self) -> &DVector<f64> {
        &self.hidden_biases
    }

    pub fn output_weights(&self) -> &DMatrix<f64> {
        &self.output_weights
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim();
        self.input_dim() * h + h + h * self.output_dim()
    }

    fn is_finite(&self) -> bool {
        self.hidden_weights.iter().chain(self.hidden_biases.iter()).chain(self.output_weights.iter()).all(|v| v.is_finite())
    }

    /// Parameters as one vector: ξ, then η, then c, each column-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.hidden_weights.as_slice());
        out.extend_from_slice(self.hidden_biases.as_slice());
        out.extend_from_slice(self.output_weights.as_slice());
        out
    }

    pub fn from_flat(input_dim: usize, hidden_dim: usize, output_dim: usize, params: &[f64], seed: u64) -> Result<Self> {
        let n1 = input_dim * hidden_dim;
        let expected = n1 + hidden_dim + hidden_dim * output_dim;
        if params.len() != expected {
            return Err(Error::Format(format!(
                "parameter vector has length {}, expected {expected}",
                params.len()
            )));
        }
        Self::from_parts(
            DMatrix::from_column_slice(hidden_dim, input_dim, &params[..n1]),
            DVector::from_column_slice(&params[n1..n1 + hidden_dim]),
            DMatrix::from_column_slice(output_dim, hidden_dim, &params[n1 + hidden_dim..]),
            seed,
        )
    }

    fn check_input(&self, a: &DMatrix<f64>) -> Result<()> {
        if a.ncols() != self.input_dim() {
            return Err(Error::Data(format!(
                "input has {} coefficient columns, network expects {}",
                a.ncols(),
                self.input_dim()
            )));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("input coefficient at sample {} is not finite", i % a.nrows())));
        }
        Ok(())
    }

    fn hidden(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(a.nrows(), self.hidden_dim());
        gemm(1.0, a, false, &self.hidden_weights, true, 0.0, &mut z);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let eta = self.hidden_biases[j];
            col.apply(|v| *v = (*v + eta).tanh());
        }
        z
    }

    fn output(&self, hidden: &DMatrix<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(hidden.nrows(), self.output_dim());
        gemm(1.0, hidden, false, &self.output_weights, true, 0.0, &mut b);
        b
    }

    /// Maps an M×m1 batch of input coefficients to M×m2 output coefficients.
    pub fn forward(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(a)?;
        Ok(self.output(&self.hidden(a)))
    }

    /// Predicted function values `B Ψᵀ` (M×n2) for a design `Ψ` (n2×m2).
    pub fn predict_values(&self, a: &DMatrix<f64>, design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if design.ncols() != self.output_dim() {
            return Err(Error::Data(format!(
                "output design has {} columns, network produces {}",
                design.ncols(),
                self.output_dim()
            )));
        }
        let b = self.forward(a)?;
        Ok(reconstruct(&b, design))
    }

    fn apply_step(&mut self, step: &Gradient) {
        self.hidden_weights -= &step.hidden_weights;
        self.hidden_biases -= &step.hidden_biases;
        self.output_weights -= &step.output_weights;
    }
}

/// `B Ψᵀ`, the sampled functions represented by coefficient rows `B`.
pub fn reconstruct(coeffs: &DMatrix<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(coeffs.nrows(), design.nrows());
    gemm(1.0, coeffs, false, design, true, 0.0, &mut out);
    out
}

/// Gradient with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub hidden_weights: DMatrix<f64>,
    pub hidden_biases: DVector<f64>,
    pub output_weights: DMatrix<f64>,
}

impl Gradient {
    pub fn zeros_like(net: &OperatorNet) -> Self {
        Self {
            hidden_weights: DMatrix::zeros(net.hidden_dim(), net.input_dim()),
            hidden_biases: DVector::zeros(net.hidden_dim()),
            output_weights: DMatrix::zeros(net.output_dim(), net.hidden_dim()),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.hidden_weights.as_slice());
        out.extend_from_slice(self.hidden_biases.as_slice());
        out.extend_from_slice(self.output_weights.as_slice());
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.hidden_weights.amax().max(self.hidden_biases.amax()).max(self.output_weights.amax())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeLoss {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn check_target_norms(norms: &[f64]) -> Result<()> {
    let zero: Vec<usize> = norms.iter().enumerate().filter(|(_, n)| !(**n > 0.0)).map(|(i, _)| i).collect();
    if zero.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("targets with zero norm at samples {zero:?}")))
    }
}

/// Mean over samples of `‖Ψ b − u‖ / ‖u‖`, computed directly.
pub fn relative_loss(coeffs: &DMatrix<f64>, design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<RelativeLoss> {
    if coeffs.ncols() != design.ncols() || design.nrows() != targets.ncols() || coeffs.nrows() != targets.nrows() {
        return Err(Error::Data(format!(
            "shape mismatch: coefficients {:?}, design {:?}, targets {:?}",
            coeffs.shape(),
            design.shape(),
            targets.shape()
        )));
    }
    let norms: Vec<f64> = targets.row_iter().map(|r| r.norm()).collect();
    check_target_norms(&norms)?;
    let mut residual = targets.clone();
    gemm(1.0, coeffs, false, design, true, -1.0, &mut residual);
    let per_sample: Vec<f64> = residual.row_iter().zip(&norms).map(|(r, n)| r.norm() / n).collect();
    Ok(RelativeLoss { mean: mean(&per_sample), per_sample })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// The relative loss against fixed targets, reduced through a thin SVD of
/// the output design so each evaluation costs O(M·m2·rank) instead of
/// O(M·m2·n2).
///
/// With `Ψ = U S Vᵀ`, `‖Ψ b − u‖² = ‖S Vᵀ b − Uᵀ u‖² + ‖u − U Uᵀ u‖²`.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `S Vᵀ`, rank×m2.
    reduced: Arc<DMatrix<f64>>,
    /// Rows `Uᵀ u`, M×rank.
    projected: DMatrix<f64>,
    perp_sq: Vec<f64>,
    norms: Vec<f64>,
}

impl Objective {
    pub fn new(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        if design.nrows() != targets.ncols() {
            return Err(Error::Data(format!(
                "targets have {} values per sample, design has {} rows",
                targets.ncols(),
                design.nrows()
            )));
        }
        Self::from_svd(&ThinSvd::new(design)?, targets)
    }

    /// As [`Objective::new`] with the design already factorized.
    pub fn from_svd(svd: &ThinSvd, targets: &DMatrix<f64>) -> Result<Self> {
        if svd.rows() != targets.ncols() {
            return Err(Error::Data(format!(
                "targets have {} values per sample, design has {} rows",
                targets.ncols(),
                svd.rows()
            )));
        }
        let norms: Vec<f64> = targets.row_iter().map(|r| r.norm()).collect();
        check_target_norms(&norms)?;
        let rank = svd.rank_above(0.0);
        let u = svd.u.columns(0, rank).into_owned();
        let mut reduced = svd.v.columns(0, rank).transpose();
        for (i, mut row) in reduced.row_iter_mut().enumerate() {
            row *= svd.s[i];
        }
        let mut projected = DMatrix::zeros(targets.nrows(), rank);
        gemm(1.0, targets, false, &u, false, 0.0, &mut projected);
        let mut perp = targets.clone();
        gemm(-1.0, &projected, false, &u, true, 1.0, &mut perp);
        let perp_sq = perp.row_iter().map(|r| r.norm_squared()).collect();
        Ok(Self { reduced: Arc::new(reduced), projected, perp_sq, norms })
    }

    pub fn samples(&self) -> usize {
        self.norms.len()
    }

    pub fn output_dim(&self) -> usize {
        self.reduced.ncols()
    }

    /// Restriction to the given sample rows.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            reduced: Arc::clone(&self.reduced),
            projected: self.projected.select_rows(rows),
            perp_sq: rows.iter().map(|&r| self.perp_sq[r]).collect(),
            norms: rows.iter().map(|&r| self.norms[r]).collect(),
        }
    }

    /// Returns the in-span residual `B (S Vᵀ)ᵀ − Uᵀ u` and per-sample losses.
    fn residual(&self, coeffs: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mut e = self.projected.clone();
        gemm(1.0, coeffs, false, &self.reduced, true, -1.0, &mut e);
        let per_sample = e
            .row_iter()
            .zip(self.perp_sq.iter().zip(&self.norms))
            .map(|(r, (p, n))| (r.norm_squared() + p).sqrt() / n)
            .collect();
        (e, per_sample)
    }

    pub fn evaluate(&self, coeffs: &DMatrix<f64>) -> RelativeLoss {
        let (_, per_sample) = self.residual(coeffs);
        RelativeLoss { mean: mean(&per_sample), per_sample }
    }

    /// Loss of `net` on inputs `a` and its gradient.
    pub fn loss_and_gradient(&self, net: &OperatorNet, a: &DMatrix<f64>) -> Result<(RelativeLoss, Gradient)> {
        net.check_input(a)?;
        if a.nrows() != self.samples() || self.output_dim() != net.output_dim() {
            return Err(Error::Data(format!(
                "batch of {} inputs for {} targets with output width {} (network {})",
                a.nrows(),
                self.samples(),
                self.output_dim(),
                net.output_dim()
            )));
        }
        let m = a.nrows() as f64;
        let hidden = net.hidden(a);
        let b = net.output(&hidden);
        let (mut e, per_sample) = self.residual(&b);
        for (k, mut row) in e.row_iter_mut().enumerate() {
            let rel = per_sample[k];
            let w = if rel > ZERO_RESIDUAL { 1.0 / (m * rel * self.norms[k] * self.norms[k]) } else { 0.0 };
            row *= w;
        }
        let mut g_b = DMatrix::zeros(a.nrows(), net.output_dim());
        gemm(1.0, &e, false, &self.reduced, false, 0.0, &mut g_b);
        let grad = backprop(net, a, &hidden, &g_b);
        Ok((RelativeLoss { mean: mean(&per_sample), per_sample }, grad))
    }
}

/// Parameter gradient given `dL/dB` (M×m2) at the cached hidden activations.
fn backprop(net: &OperatorNet, a: &DMatrix<f64>, hidden: &DMatrix<f64>, g_b: &DMatrix<f64>) -> Gradient {
    let mut grad = Gradient::zeros_like(net);
    gemm(1.0, g_b, true, hidden, false, 0.0, &mut grad.output_weights);
    let mut dz = DMatrix::zeros(a.nrows(), net.hidden_dim());
    gemm(1.0, g_b, false, &net.output_weights, false, 0.0, &mut dz);
    dz.zip_apply(hidden, |d, h| *d *= 1.0 - h * h);
    gemm(1.0, &dz, true, a, false, 0.0, &mut grad.hidden_weights);
    for (j, col) in dz.column_iter().enumerate() {
        grad.hidden_biases[j] = col.sum();
    }
    grad
}

/// Loss and exact gradient of [`relative_loss`] for one batch, computed
/// from the full residuals `Ψ b − u`.
pub fn gradient(
    net: &OperatorNet,
    a: &DMatrix<f64>,
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<(RelativeLoss, Gradient)> {
    net.check_input(a)?;
    if design.ncols() != net.output_dim() || design.nrows() != targets.ncols() || a.nrows() != targets.nrows() {
        return Err(Error::Data(format!(
            "shape mismatch: inputs {:?}, design {:?}, targets {:?}",
            a.shape(),
            design.shape(),
            targets.shape()
        )));
    }
    let norms: Vec<f64> = targets.row_iter().map(|r| r.norm()).collect();
    check_target_norms(&norms)?;
    let m = a.nrows() as f64;
    let hidden = net.hidden(a);
    let b = net.output(&hidden);
    let mut residual = targets.clone();
    gemm(1.0, &b, false, design, true, -1.0, &mut residual);
    let mut per_sample = Vec::with_capacity(norms.len());
    for (k, mut row) in residual.row_iter_mut().enumerate() {
        let rel = row.norm() / norms[k];
        per_sample.push(rel);
        let w = if rel > ZERO_RESIDUAL { 1.0 / (m * rel * norms[k] * norms[k]) } else { 0.0 };
        row *= w;
    }
    let mut g_b = DMatrix::zeros(a.nrows(), net.output_dim());
    gemm(1.0, &residual, false, design, false, 0.0, &mut g_b);
    let grad = backprop(net, a, &hidden, &g_b);
    Ok((RelativeLoss { mean: mean(&per_sample), per_sample }, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_lr_stage")]
    pub lr_stage_epochs: usize,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Test loss is recorded every this many epochs and at the end.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
}

fn default_lr_start() -> f64 {
    1e-3
}
fn default_lr_end() -> f64 {
    1e-6
}
fn default_lr_stage() -> usize {
    10_000
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_interval() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            batch_size: None,
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            lr_stage_epochs: default_lr_stage(),
            betas: default_betas(),
            eps: default_eps(),
            seed: 0,
            eval_interval: default_eval_interval(),
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self { epochs, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("train.{f}");
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config(field("lr_start"), "need lr_start >= lr_end > 0"));
        }
        if self.lr_stage_epochs == 0 {
            return Err(Error::config(field("lr_stage_epochs"), "must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) {
            return Err(Error::config(field("betas"), "each beta must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config(field("eval_interval"), "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based) of a run of `total` epochs.
///
/// The run is split into stages of `lr_stage_epochs`. Each stage starts a
/// factor `q` below the previous one and decays geometrically by `√q` over
/// its length, so the envelope is a staircase. `q` is chosen so the final
/// epoch lands on `lr_end`.
pub fn learning_rate(epoch: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total <= 1 {
        return cfg.lr_start;
    }
    let stage_len = cfg.lr_stage_epochs.max(1);
    let stages = total.div_ceil(stage_len);
    let epoch = epoch.min(total - 1);
    let stage = epoch / stage_len;
    let start = stage * stage_len;
    let len = (total - start).min(stage_len);
    let frac = if len > 1 { (epoch - start) as f64 / (len - 1) as f64 } else { 1.0 };
    let log_ratio = (cfg.lr_end / cfg.lr_start).ln();
    if stages == 1 {
        return cfg.lr_start * (log_ratio * frac).exp();
    }
    let log_q = log_ratio / (stages as f64 - 0.5);
    cfg.lr_start * (log_q * (stage as f64 + 0.5 * frac)).exp()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss on the training set before each epoch's update.
    pub train_loss: Vec<f64>,
    /// Full training-set loss of the returned network.
    pub final_train_loss: f64,
    /// Number of completed epochs at each test evaluation.
    pub test_epochs: Vec<usize>,
    pub test_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub seconds: f64,
    /// Mean wall-clock seconds per epoch.
    pub seconds_per_epoch: f64,
}

struct Adam {
    m: Gradient,
    v: Gradient,
    t: i32,
}

impl Adam {
    fn new(net: &OperatorNet) -> Self {
        Self { m: Gradient::zeros_like(net), v: Gradient::zeros_like(net), t: 0 }
    }

    /// Turns `g` into the parameter step in place.
    fn step(&mut self, g: &mut Gradient, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |m: &mut [f64], v: &mut [f64], g: &mut [f64]| {
            for ((m, v), g) in m.iter_mut().zip(v.iter_mut()).zip(g.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * *g;
                *v = b2 * *v + (1.0 - b2) * *g * *g;
                *g = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        };
        update(self.m.hidden_weights.as_mut_slice(), self.v.hidden_weights.as_mut_slice(), g.hidden_weights.as_mut_slice());
        update(self.m.hidden_biases.as_mut_slice(), self.v.hidden_biases.as_mut_slice(), g.hidden_biases.as_mut_slice());
        update(self.m.output_weights.as_mut_slice(), self.v.output_weights.as_mut_slice(), g.output_weights.as_mut_slice());
    }
}

fn diverged(epoch: usize, reason: impl Into<String>, last_good: &OperatorNet) -> Error {
    Error::Diverged { epoch, reason: reason.into(), last_good: Box::new(last_good.clone()) }
}

/// Trains `net` with Adam on the relative loss.
///
/// `a_train` is M×m1, `u_train` holds the sampled targets (M×n2) and
/// `design` is the output design `Ψ` (n2×m2).
pub fn train(
    net: OperatorNet,
    a_train: &DMatrix<f64>,
    u_train: &DMatrix<f64>,
    design: &DMatrix<f64>,
    cfg: &TrainConfig,
    test: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
) -> Result<(OperatorNet, TrainTrace)> {
    cfg.validate()?;
    let objective = Objective::new(design, u_train)?;
    let test_objective = match test {
        Some((a, u)) => Some((a, Objective::new(design, u)?)),
        None => None,
    };
    train_objective(net, a_train, &objective, cfg, test_objective.as_ref().map(|(a, o)| (*a, o)))
}

/// As [`train`] with precomputed objectives, so several runs against the
/// same targets share one SVD.
pub fn train_objective(
    mut net: OperatorNet,
    a_train: &DMatrix<f64>,
    objective: &Objective,
    cfg: &TrainConfig,
    test: Option<(&DMatrix<f64>, &Objective)>,
) -> Result<(OperatorNet, TrainTrace)> {
    cfg.validate()?;
    net.check_input(a_train)?;
    if a_train.nrows() != objective.samples() || objective.output_dim() != net.output_dim() {
        return Err(Error::Data("training inputs, targets and network widths disagree".into()));
    }
    if let Some((a, o)) = test {
        net.check_input(a)?;
        if a.nrows() != o.samples() {
            return Err(Error::Data("test inputs and targets disagree in sample count".into()));
        }
    }
    let started = Instant::now();
    let mut trace = TrainTrace::default();
    let samples = a_train.nrows();
    let batch = cfg.batch_size.unwrap_or(samples).min(samples).max(1);
    let mut order: Vec<usize> = (0..samples).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, 1);
    let mut adam = Adam::new(&net);
    let mut last_good = net.clone();

    let record_test = |net: &OperatorNet, epoch: usize, trace: &mut TrainTrace| -> Result<()> {
        if let Some((a, o)) = test {
            let loss = o.evaluate(&net.forward(a)?).mean;
            trace.test_epochs.push(epoch);
            trace.test_loss.push(loss);
        }
        Ok(())
    };
    record_test(&net, 0, &mut trace)?;

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(epoch, cfg.epochs, cfg);
        trace.learning_rate.push(lr);
        if batch == samples {
            let (loss, mut grad) = objective.loss_and_gradient(&net, a_train)?;
            if !loss.mean.is_finite() {
                return Err(diverged(epoch, "training loss is not finite", &last_good));
            }
            trace.train_loss.push(loss.mean);
            last_good.clone_from(&net);
            adam.step(&mut grad, lr, cfg);
            net.apply_step(&grad);
        } else {
            let loss = objective.evaluate(&net.forward(a_train)?).mean;
            if !loss.is_finite() {
                return Err(diverged(epoch, "training loss is not finite", &last_good));
            }
            trace.train_loss.push(loss);
            last_good.clone_from(&net);
            order.shuffle(&mut shuffle_rng);
            for rows in order.chunks(batch) {
                let sub = objective.subset(rows);
                let (_, mut grad) = sub.loss_and_gradient(&net, &a_train.select_rows(rows))?;
                adam.step(&mut grad, lr, cfg);
                net.apply_step(&grad);
            }
        }
        if !net.is_finite() {
            return Err(diverged(epoch, "parameters became non-finite", &last_good));
        }
        let done = epoch + 1;
        if done % cfg.eval_interval == 0 || done == cfg.epochs {
            record_test(&net, done, &mut trace)?;
        }
    }
    let final_loss = objective.evaluate(&net.forward(a_train)?).mean;
    if !final_loss.is_finite() {
        return Err(diverged(cfg.epochs, "final training loss is not finite", &last_good));
    }
    trace.final_train_loss = final_loss;
    trace.seconds = started.elapsed().as_secs_f64();
    trace.seconds_per_epoch = if cfg.epochs > 0 { trace.seconds / cfg.epochs as f64 } else { 0.0 };
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 9);
        DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    fn small_net(m1: usize, h: usize, m2: usize, seed: u64) -> OperatorNet {
        let mut net = OperatorNet::init(m1, h, m2, seed).unwrap();
        net.hidden_biases = DVector::from_iterator(h, (0..h).map(|i| 0.1 * i as f64 - 0.2));
        net
    }

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let a = OperatorNet::init(2, 4, 3, 5).unwrap();
        let b = OperatorNet::init(2, 4, 3, 5).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(OperatorNet::init(128, 512, 32, 0).unwrap().param_count(), 82_432);
        assert!(a.hidden_biases.iter().all(|v| *v == 0.0));
        assert!(a.hidden_weights.amax() <= 1.0 / 2f64.sqrt());
        assert!(a.output_weights.amax() <= 0.5);
        assert!(OperatorNet::init(0, 4, 3, 0).is_err());
    }

    #[test]
    fn zero_output_weights_give_zero_output() {
        let mut net = OperatorNet::init(3, 6, 2, 1).unwrap();
        net.output_weights.fill(0.0);
        let b = net.forward(&random_matrix(5, 3, 2)).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));

        let net = OperatorNet::from_parts(DMatrix::zeros(1, 3), DVector::zeros(1), DMatrix::from_element(2, 1, 7.0), 0).unwrap();
        assert!(net.forward(&random_matrix(4, 3, 3)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_naive_loop() {
        let net = small_net(4, 7, 3, 11);
        let a = random_matrix(6, 4, 12);
        let b = net.forward(&a).unwrap();
        for s in 0..6 {
            for k in 0..3 {
                let mut acc = 0.0;
                for i in 0..7 {
                    let mut z = net.hidden_biases[i];
                    for j in 0..4 {
                        z += net.hidden_weights[(i, j)] * a[(s, j)];
                    }
                    acc += net.output_weights[(k, i)] * z.tanh();
                }
                assert!((acc - b[(s, k)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_nan_and_bad_width() {
        let net = small_net(2, 3, 1, 0);
        let mut a = random_matrix(3, 2, 1);
        a[(1, 0)] = f64::NAN;
        assert!(matches!(net.forward(&a), Err(Error::Data(_))));
        assert!(matches!(net.forward(&random_matrix(3, 5, 1)), Err(Error::Data(_))));
    }

    #[test]
    fn flat_round_trip() {
        let net = small_net(3, 5, 2, 4);
        let back = OperatorNet::from_flat(3, 5, 2, &net.flat_params(), net.seed()).unwrap();
        assert_eq!(net, back);
        assert!(OperatorNet::from_flat(3, 5, 2, &[0.0; 3], 0).is_err());
    }

    #[test]
    fn relative_loss_hand_cases() {
        let design = DMatrix::<f64>::identity(3, 3);
        let u = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 2.0]);
        let exact = relative_loss(&u, &design, &u).unwrap();
        assert_eq!(exact.mean, 0.0);
        let zero = relative_loss(&DMatrix::zeros(1, 3), &design, &u).unwrap();
        assert!((zero.mean - 1.0).abs() < 1e-15);

        // residuals 0.1 and 0.3 relative to unit-norm targets
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 3, &[1.1, 0.0, 0.0, 0.0, 1.0, 0.3]);
        let loss = relative_loss(&b, &design, &u).unwrap();
        assert!((loss.mean - 0.2).abs() < 1e-14);
        assert!((loss.per_sample[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn zero_norm_targets_are_listed() {
        let design = DMatrix::<f64>::identity(2, 2);
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        match relative_loss(&DMatrix::zeros(3, 2), &design, &u) {
            Err(Error::Data(msg)) => assert!(msg.contains("[1, 2]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn objective_matches_direct_loss() {
        let design = random_matrix(20, 6, 3);
        let u = random_matrix(5, 20, 4);
        let b = random_matrix(5, 6, 5);
        let direct = relative_loss(&b, &design, &u).unwrap();
        let reduced = Objective::new(&design, &u).unwrap().evaluate(&b);
        for (x, y) in direct.per_sample.iter().zip(&reduced.per_sample) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn loss_of(net: &OperatorNet, a: &DMatrix<f64>, design: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        relative_loss(&net.forward(a).unwrap(), design, u).unwrap().mean
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (m1, h, m2, m) = (3, 5, 2, 4);
        let net = small_net(m1, h, m2, 21);
        let a = random_matrix(m, m1, 22);
        let design = random_matrix(7, m2, 23);
        let u = random_matrix(m, 7, 24);
        let (_, grad) = gradient(&net, &a, &design, &u).unwrap();
        let analytic = grad.flat();
        let params = net.flat_params();
        let step = 1e-6;
        for (i, g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus[i] += step;
            let mut minus = params.clone();
            minus[i] -= step;
            let fp = loss_of(&OperatorNet::from_flat(m1, h, m2, &plus, 0).unwrap(), &a, &design, &u);
            let fm = loss_of(&OperatorNet::from_flat(m1, h, m2, &minus, 0).unwrap(), &a, &design, &u);
            let fd = (fp - fm) / (2.0 * step);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-5, "parameter {i}: analytic {g}, finite difference {fd}");
        }
    }

    #[test]
    fn output_weight_gradient_single_sample_formula() {
        let net = small_net(2, 3, 2, 31);
        let a = random_matrix(1, 2, 32);
        let design = random_matrix(5, 2, 33);
        let u = random_matrix(1, 5, 34);
        let (_, grad) = gradient(&net, &a, &design, &u).unwrap();
        let b = net.forward(&a).unwrap();
        let r = &design * b.transpose() - u.transpose();
        let scale = 1.0 / (u.norm() * r.norm());
        let hidden = net.hidden(&a);
        let expected = design.transpose() * r * scale * hidden;
        assert!((expected - grad.output_weights).amax() < 1e-12);
    }

    #[test]
    fn reduced_gradient_matches_direct() {
        let net = small_net(3, 6, 4, 91);
        let a = random_matrix(7, 3, 92);
        let design = random_matrix(15, 4, 93);
        let u = random_matrix(7, 15, 94);
        let (l1, g1) = gradient(&net, &a, &design, &u).unwrap();
        let (l2, g2) = Objective::new(&design, &u).unwrap().loss_and_gradient(&net, &a).unwrap();
        assert!((l1.mean - l2.mean).abs() < 1e-12);
        for (x, y) in g1.flat().iter().zip(g2.flat()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let net = small_net(3, 4, 3, 41);
        let a = random_matrix(5, 3, 42);
        let design = random_matrix(8, 3, 43);
        let u = reconstruct(&net.forward(&a).unwrap(), &design);
        let (loss, grad) = gradient(&net, &a, &design, &u).unwrap();
        assert!(loss.mean < 1e-14, "{:?}", loss.per_sample);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn reconstruction_commutes_with_batching() {
        let net = small_net(3, 4, 2, 51);
        let a = random_matrix(6, 3, 52);
        let design = random_matrix(9, 2, 53);
        let all = net.predict_values(&a, &design).unwrap();
        let top = net.predict_values(&a.rows(0, 2).into_owned(), &design).unwrap();
        let rest = net.predict_values(&a.rows(2, 4).into_owned(), &design).unwrap();
        assert!((all.rows(0, 2) - top).amax() < 1e-14);
        assert!((all.rows(2, 4) - rest).amax() < 1e-14);
    }

    #[test]
    fn schedule_endpoints_and_staircase() {
        let cfg = TrainConfig::default();
        for total in [1usize, 2, 500, 10_000, 25_000, 40_000] {
            assert_eq!(learning_rate(0, total, &cfg), 1e-3);
            if total > 1 {
                let last = learning_rate(total - 1, total, &cfg);
                assert!((last / 1e-6 - 1.0).abs() < 0.01, "total {total}: {last}");
            }
            let mut prev = f64::INFINITY;
            for e in 0..total {
                let lr = learning_rate(e, total, &cfg);
                assert!(lr <= prev * (1.0 + 1e-12));
                prev = lr;
            }
        }
        // a visible drop at every stage boundary
        let before = learning_rate(9_999, 30_000, &cfg);
        let after = learning_rate(10_000, 30_000, &cfg);
        let within = learning_rate(9_998, 30_000, &cfg) / before;
        assert!(before / after > 1.5 * within);
    }

    #[test]
    fn zero_epochs_returns_net_unchanged() {
        let net = small_net(2, 3, 2, 61);
        let a = random_matrix(4, 2, 62);
        let design = DMatrix::identity(2, 2);
        let u = random_matrix(4, 2, 63);
        let (out, trace) = train(net.clone(), &a, &u, &design, &TrainConfig::with_epochs(0), None).unwrap();
        assert_eq!(out, net);
        assert!(trace.train_loss.is_empty());
    }

    #[test]
    fn diverging_training_reports_last_good() {
        let net = small_net(2, 3, 2, 71);
        let mut a = random_matrix(4, 2, 72);
        a[(0, 0)] = 1e300;
        let design = DMatrix::identity(2, 2);
        let u = random_matrix(4, 2, 73);
        let cfg = TrainConfig { lr_start: 1e300, lr_end: 1e299, ..TrainConfig::with_epochs(50) };
        match train(net, &a, &u, &design, &cfg, None) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|(_, t)| t.train_loss)),
        }
    }

    #[test]
    fn mini_batch_training_is_deterministic() {
        let net = small_net(3, 8, 3, 81);
        let a = random_matrix(20, 3, 82);
        let design = DMatrix::identity(3, 3);
        let u = a.clone();
        let cfg = TrainConfig { batch_size: Some(6), seed: 3, ..TrainConfig::with_epochs(30) };
        let (n1, t1) = train(net.clone(), &a, &u, &design, &cfg, Some((&a, &u))).unwrap();
        let (n2, t2) = train(net, &a, &u, &design, &cfg, Some((&a, &u))).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(t1.train_loss, t2.train_loss);
        assert_eq!(t1.test_epochs, vec![0, 30]);
        assert!(t1.final_train_loss < t1.train_loss[0]);
    }
}
