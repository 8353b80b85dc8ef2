//! Coefficient encoding against a fixed basis and coefficient diagnostics.
//!
//! Coefficients minimize `(1/n) |f - Phi a|^2 + lambda |a|^2` (ridge) or are
//! obtained through a truncated pseudo-inverse of `Phi`. Either way the
//! design matrix is factorized once and every sample is encoded by a single
//! matrix product.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, BasisSystem, VectorBasis};
use crate::error::{Error, Result};
use crate::linalg::{self, ThinSvd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMode {
    /// Discard `sigma_i < cut * sigma_1`.
    #[default]
    #[serde(rename = "relative")]
    RelativeToSigma1,
    /// Discard `sigma_i < cut`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncodeConfig {
    Ridge {
        lambda: f64,
    },
    #[serde(rename = "svd")]
    TruncatedSvd {
        cut: f64,
        #[serde(default)]
        mode: CutMode,
    },
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig::TruncatedSvd {
            cut: 1e-2,
            mode: CutMode::RelativeToSigma1,
        }
    }
}

impl EncodeConfig {
    pub fn ridge(lambda: f64) -> Self {
        EncodeConfig::Ridge { lambda }
    }

    pub fn svd(cut: f64) -> Self {
        EncodeConfig::TruncatedSvd {
            cut,
            mode: CutMode::RelativeToSigma1,
        }
    }

    pub fn svd_absolute(cut: f64) -> Self {
        EncodeConfig::TruncatedSvd {
            cut,
            mode: CutMode::Absolute,
        }
    }

    /// The regularization strength: `lambda` or `cut`.
    pub fn strength(&self) -> f64 {
        match *self {
            EncodeConfig::Ridge { lambda } => lambda,
            EncodeConfig::TruncatedSvd { cut, .. } => cut,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EncodeConfig::Ridge { lambda } if !(lambda >= 0.0) || !lambda.is_finite() => Err(
                Error::config("encode.lambda", format!("must be finite and >= 0, got {lambda}")),
            ),
            EncodeConfig::TruncatedSvd { cut, .. } if !(cut >= 0.0) || !cut.is_finite() => Err(
                Error::config("encode.cut", format!("must be finite and >= 0, got {cut}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Factorized encoder for one design matrix.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncodeConfig,
    rows: usize,
    singular_values: Vec<f64>,
    retained: usize,
    // m x rows; coefficients = values * operator^T
    operator: DMatrix<f64>,
}

impl Encoder {
    /// `points` is the number of sample points `n` in the `1/n` data term.
    /// It differs from `design.nrows()` for stacked vector-valued systems.
    pub fn new(design: &DMatrix<f64>, points: usize, config: EncodeConfig) -> Result<Self> {
        config.validate()?;
        let (rows, m) = design.shape();
        if rows == 0 || m == 0 {
            return Err(Error::config(
                "design",
                format!("design matrix must be non-empty, got {rows}x{m}"),
            ));
        }
        Self::from_svd(&ThinSvd::new(design)?, points, config)
    }

    /// As [`Encoder::new`] with the design already factorized.
    pub fn from_svd(svd: &ThinSvd, points: usize, config: EncodeConfig) -> Result<Self> {
        config.validate()?;
        let (rows, m) = (svd.rows(), svd.cols());
        if rows == 0 || m == 0 || svd.s.is_empty() {
            return Err(Error::config(
                "design",
                format!("design matrix must be non-empty, got {rows}x{m}"),
            ));
        }
        let s = &svd.s;
        let sigma1 = s[0];
        let filter: Vec<f64> = match config {
            EncodeConfig::Ridge { lambda } => {
                let shift = lambda * points as f64;
                if shift == 0.0 {
                    let smallest = if rows < m { 0.0 } else { *s.last().unwrap() };
                    let condition = if smallest > 0.0 {
                        (sigma1 / smallest).powi(2)
                    } else {
                        f64::INFINITY
                    };
                    if !(condition * f64::EPSILON * rows.max(m) as f64 <= 1.0) {
                        return Err(Error::RankDeficient { condition });
                    }
                }
                s.iter().map(|&si| si / (si * si + shift)).collect()
            }
            EncodeConfig::TruncatedSvd { cut, mode } => {
                let threshold = match mode {
                    CutMode::RelativeToSigma1 => cut * sigma1,
                    CutMode::Absolute => cut,
                };
                s.iter()
                    .map(|&si| if si < threshold || si == 0.0 { 0.0 } else { 1.0 / si })
                    .collect()
            }
        };
        let retained = filter.iter().filter(|f| **f != 0.0).count();
        let mut scaled_v = svd.v.clone();
        for (c, f) in filter.iter().enumerate() {
            scaled_v.column_mut(c).scale_mut(*f);
        }
        let operator = scaled_v * svd.u.transpose();
        Ok(Self {
            config,
            rows,
            singular_values: svd.s.clone(),
            retained,
            operator,
        })
    }

    pub fn config(&self) -> EncodeConfig {
        self.config
    }

    /// Singular values of the design matrix, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Number of singular modes kept by the filter.
    pub fn retained_modes(&self) -> usize {
        self.retained
    }

    pub fn basis_len(&self) -> usize {
        self.operator.nrows()
    }

    /// Encodes every row of `values` (`M x rows`), returning `M x m`.
    pub fn encode(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if values.ncols() != self.rows {
            return Err(Error::config(
                "values",
                format!(
                    "design matrix has {} rows but samples have {} values",
                    self.rows,
                    values.ncols()
                ),
            ));
        }
        Ok(values * self.operator.transpose())
    }
}

/// Per-sample expansion coefficients, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub values: DMatrix<f64>,
    pub basis: BasisSpec,
    /// Components of a vector-valued basis; 1 for scalar bases.
    pub components: usize,
}

impl CoefficientMatrix {
    pub fn samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn basis_len(&self) -> usize {
        self.values.ncols()
    }
}

/// Encodes `values` (`M x n`) sampled at `points` against a scalar basis.
pub fn encode(
    basis: &BasisSystem,
    points: &DMatrix<f64>,
    values: &DMatrix<f64>,
    config: EncodeConfig,
) -> Result<CoefficientMatrix> {
    let design = basis.design_matrix(points)?;
    let encoder = Encoder::new(&design, points.nrows(), config)?;
    Ok(CoefficientMatrix {
        values: encoder.encode(values)?,
        basis: basis.spec(),
        components: 1,
    })
}

/// Vector-valued variant: each row of `values` holds the `C` components
/// back to back (`M x (C n)`), matching the stacked design matrix.
pub fn encode_vector(
    basis: &VectorBasis,
    points: &DMatrix<f64>,
    values: &DMatrix<f64>,
    config: EncodeConfig,
) -> Result<CoefficientMatrix> {
    let expected = basis.component_count() * points.nrows();
    if values.ncols() != expected {
        return Err(Error::config(
            "values",
            format!(
                "{} components on {} points need {expected} values per sample, got {}",
                basis.component_count(),
                points.nrows(),
                values.ncols()
            ),
        ));
    }
    let design = basis.design_matrix(points)?;
    let encoder = Encoder::new(&design, points.nrows(), config)?;
    Ok(CoefficientMatrix {
        values: encoder.encode(values)?,
        basis: basis.components()[0].spec(),
        components: basis.component_count(),
    })
}

/// Spectral and variance summaries of a coefficient matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDiagnostics {
    pub effective_rank: f64,
    pub singular_values: Vec<f64>,
    pub per_basis_variance: Vec<f64>,
    /// `exp` of the Shannon entropy of the normalized per-basis variances; a
    /// balance proxy ranging over `[1, m]`.
    pub variance_entropy: f64,
    /// Set when the matrix is identically zero.
    pub degenerate: bool,
}

/// `exp(-sum p_k ln p_k)` with `p = sigma / |sigma|_1` and `0 ln 0 = 0`.
/// Returns 1 for an all-zero spectrum.
pub fn effective_rank(singular_values: &[f64]) -> f64 {
    entropy_exp(singular_values)
}

fn entropy_exp(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return 1.0;
    }
    let h: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub fn diagnostics(coeffs: &DMatrix<f64>) -> Result<CoefficientDiagnostics> {
    let (rows, m) = coeffs.shape();
    if rows == 0 || m == 0 {
        return Err(Error::Data(format!(
            "coefficient matrix must be non-empty, got {rows}x{m}"
        )));
    }
    let singular_values = linalg::singular_values(coeffs)?;
    let degenerate = coeffs.iter().all(|v| *v == 0.0);
    let per_basis_variance: Vec<f64> = (0..m)
        .map(|j| {
            if rows < 2 {
                return 0.0;
            }
            let col = coeffs.column(j);
            let mean = col.mean();
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rows - 1) as f64
        })
        .collect();
    Ok(CoefficientDiagnostics {
        effective_rank: effective_rank(&singular_values),
        variance_entropy: entropy_exp(&per_basis_variance),
        singular_values,
        per_basis_variance,
        degenerate,
    })
}

/// Relative L2 errors of a set of approximations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionErrors {
    /// `None` for zero-norm targets.
    pub per_sample: Vec<Option<f64>>,
    /// Mean over the samples with a defined error.
    pub mean: f64,
    pub excluded: usize,
}

impl ProjectionErrors {
    pub fn from_norms(residuals: &[f64], targets: &[f64]) -> Self {
        let per_sample: Vec<Option<f64>> = residuals
            .iter()
            .zip(targets)
            .map(|(r, t)| if *t > 0.0 { Some(r / t) } else { None })
            .collect();
        let defined: Vec<f64> = per_sample.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Self {
            excluded: per_sample.len() - defined.len(),
            per_sample,
            mean,
        }
    }
}

/// Encodes `targets` with `config` and measures `|Psi b - u| / |u|` per
/// sample on the sampling grid.
pub fn projection_error(
    basis: &BasisSystem,
    points: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    config: EncodeConfig,
) -> Result<ProjectionErrors> {
    let design = basis.design_matrix(points)?;
    projection_error_with_design(&design, points.nrows(), targets, config)
}

pub fn projection_error_with_design(
    design: &DMatrix<f64>,
    points: usize,
    targets: &DMatrix<f64>,
    config: EncodeConfig,
) -> Result<ProjectionErrors> {
    let encoder = Encoder::new(design, points, config)?;
    let coeffs = encoder.encode(targets)?;
    let residual = coeffs * design.transpose() - targets;
    Ok(ProjectionErrors::from_norms(
        linalg::row_norms(&residual).as_slice(),
        linalg::row_norms(targets).as_slice(),
    ))
}

/// Distance of each target row to the column space of `design`, relative to
/// the target norm: the discrete best-approximation error. Directions with
/// singular values below `max(rows, m) * eps * sigma_1` are treated as
/// outside the numerical column space.
pub fn best_approximation_error(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<ProjectionErrors> {
    if targets.ncols() != design.nrows() {
        return Err(Error::config(
            "targets",
            format!(
                "design has {} rows, targets have {} values",
                design.nrows(),
                targets.ncols()
            ),
        ));
    }
    best_approximation_error_svd(&ThinSvd::new(design)?, targets)
}

/// As [`best_approximation_error`] with the design already factorized.
pub fn best_approximation_error_svd(svd: &ThinSvd, targets: &DMatrix<f64>) -> Result<ProjectionErrors> {
    if targets.ncols() != svd.rows() {
        return Err(Error::config(
            "targets",
            format!("design has {} rows, targets have {} values", svd.rows(), targets.ncols()),
        ));
    }
    let sigma1 = svd.s.first().copied().unwrap_or(0.0);
    let tol = svd.rows().max(svd.cols()) as f64 * f64::EPSILON * sigma1;
    let r = svd.rank_above(tol);
    let basis = svd.u.columns(0, r);
    let along = targets * basis;
    let residual = targets - along * basis.transpose();
    Ok(ProjectionErrors::from_norms(
        linalg::row_norms(&residual).as_slice(),
        linalg::row_norms(targets).as_slice(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{uniform_grid_1d, FemBasis1D};
    use approx::assert_abs_diff_eq;

    #[test]
    fn ridge_single_column_mean() {
        let phi = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let enc = Encoder::new(&phi, 2, EncodeConfig::ridge(0.0)).unwrap();
        let a = enc.encode(&DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_design_returns_samples() {
        let phi = DMatrix::<f64>::identity(3, 3);
        let f = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 2.0, 5.0, 0.0, -0.1]);
        let enc = Encoder::new(&phi, 3, EncodeConfig::ridge(0.0)).unwrap();
        assert!((enc.encode(&f).unwrap() - &f).amax() < 1e-15);
    }

    #[test]
    fn truncation_drops_tiny_mode() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-8]);
        let enc = Encoder::new(&phi, 2, EncodeConfig::svd(1e-3)).unwrap();
        let a = enc.encode(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(enc.retained_modes(), 1);
    }

    #[test]
    fn absolute_cut_mode() {
        let phi = DMatrix::from_row_slice(2, 2, &[10.0, 0.0, 0.0, 0.5]);
        let keep = Encoder::new(&phi, 2, EncodeConfig::svd_absolute(0.4)).unwrap();
        let drop = Encoder::new(&phi, 2, EncodeConfig::svd_absolute(0.6)).unwrap();
        assert_eq!(keep.retained_modes(), 2);
        assert_eq!(drop.retained_modes(), 1);
    }

    #[test]
    fn singular_normal_equations_rejected() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let err = Encoder::new(&phi, 3, EncodeConfig::ridge(0.0)).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        assert!(Encoder::new(&phi, 3, EncodeConfig::ridge(1e-6)).is_ok());
    }

    #[test]
    fn invalid_config_and_shapes() {
        let phi = DMatrix::<f64>::identity(2, 2);
        assert!(matches!(
            Encoder::new(&phi, 2, EncodeConfig::ridge(-1.0)),
            Err(Error::Config { .. })
        ));
        assert!(Encoder::new(&phi, 2, EncodeConfig::svd(f64::NAN)).is_err());
        let enc = Encoder::new(&phi, 2, EncodeConfig::default()).unwrap();
        assert!(enc.encode(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn effective_rank_hand_cases() {
        assert_abs_diff_eq!(effective_rank(&[1.0; 4]), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(effective_rank(&[5.0, 0.0, 0.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(effective_rank(&[2.0, 1.0, 1.0]), 2f64.powf(1.5), epsilon = 1e-12);
        assert_eq!(effective_rank(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let d = diagnostics(&DMatrix::zeros(4, 3)).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.effective_rank, 1.0);
    }

    #[test]
    fn per_basis_variance_is_sample_variance() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let d = diagnostics(&a).unwrap();
        assert_abs_diff_eq!(d.per_basis_variance[0], 1.0, epsilon = 1e-15);
        assert_eq!(d.per_basis_variance[1], 0.0);
        assert_abs_diff_eq!(d.variance_entropy, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn in_span_targets_have_zero_projection_error() {
        let fem = BasisSystem::Fem(FemBasis1D::new(vec![0.0, 0.5, 1.0]).unwrap());
        let pts = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        let u = DMatrix::from_row_slice(1, 3, &[0.0, 0.5, 1.0]);
        let e = projection_error(&fem, &pts, &u, EncodeConfig::ridge(0.0)).unwrap();
        assert!(e.per_sample[0].unwrap() < 1e-15);
    }

    #[test]
    fn zero_targets_are_excluded() {
        let fem = BasisSystem::Fem(FemBasis1D::uniform(0.0, 1.0, 2).unwrap());
        let pts = uniform_grid_1d(0.0, 1.0, 7);
        let mut u = DMatrix::zeros(2, 7);
        for i in 0..7 {
            u[(1, i)] = (3.0 * pts[(i, 0)]).sin();
        }
        let e = projection_error(&fem, &pts, &u, EncodeConfig::ridge(0.0)).unwrap();
        assert_eq!(e.excluded, 1);
        assert!(e.per_sample[0].is_none());
        assert_eq!(e.mean, e.per_sample[1].unwrap());
    }
}
