//! End-to-end runs: build bases, encode, train, evaluate, and the studies
//! built from repeated runs (cutoff sweeps, resolution transfer, scalar vs
//! vector-valued bases).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, BasisSystem, RfmSpec, VectorBasis};
use crate::datagen::{DatasetSpec, FunctionDataset, SampleTag};
use crate::encoder::{self, CoefficientDiagnostics, CoefficientMatrix, EncodeConfig, Encoder};
use crate::error::{Error, Result, Stage, StageExt};
use crate::io::{self, Container};
use crate::linalg::{block_diagonal, ThinSvd};
use crate::neuralop::{self, Objective, OperatorNet, TrainConfig, TrainTrace};

/// What the network sees as input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Basis coefficients of the input function.
    #[default]
    C2c,
    /// Raw point values of the input function.
    P2c,
}

/// How multi-component functions are expanded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// One scalar basis per component, coefficients concatenated.
    #[default]
    Scalar,
    /// Vector-valued basis functions sharing one coefficient per index.
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default)]
    pub mode: InputMode,
    /// Required for C2C; ignored for P2C.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
    #[serde(default)]
    pub encode: EncodeConfig,
    #[serde(default)]
    pub construction: Construction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub basis: BasisSpec,
    /// Used for the encoded projection error and output diagnostics.
    #[serde(default)]
    pub encode: EncodeConfig,
    #[serde(default)]
    pub construction: Construction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    512
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: default_hidden(), seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Grids used by resolution-transfer evaluation.
    #[serde(default)]
    pub resolutions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub input: InputConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub net: NetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn rfm(partitions: Vec<usize>, features: usize, range: f64, seed: u64) -> BasisSpec {
    BasisSpec::Rfm(RfmSpec::new(partitions, features, range, seed))
}

impl ExperimentConfig {
    /// Desk-scale defaults for each generator.
    pub fn preset(problem: &str) -> Result<Self> {
        let train = TrainConfig { epochs: 5_000, eval_interval: 100, ..TrainConfig::default() };
        let cfg = match problem {
            "darcy1d" => Self {
                dataset: DatasetSpec::Darcy1d {
                    grid: 2000,
                    train: 500,
                    test: 200,
                    seed: 1,
                    length_scale: 0.04,
                    amplitude: 1.0,
                    reference_grid: None,
                    tol: 1e-10,
                },
                input: InputConfig {
                    mode: InputMode::C2c,
                    basis: Some(rfm(vec![8], 16, 3.0, 11)),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                output: OutputConfig {
                    basis: rfm(vec![4], 8, 3.0, 12),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                net: NetConfig::default(),
                train: TrainConfig { batch_size: Some(50), ..train.clone() },
                eval: EvalConfig::default(),
            },
            "poisson2d" => Self {
                dataset: DatasetSpec::Poisson2d { grid: 41, train: 400, test: 100, seed: 1, modes: 5 },
                input: InputConfig {
                    mode: InputMode::C2c,
                    basis: Some(rfm(vec![2, 2], 64, 3.0, 11)),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                output: OutputConfig {
                    basis: rfm(vec![8, 8], 6, 3.0, 12),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                net: NetConfig::default(),
                train,
                eval: EvalConfig::default(),
            },
            "highdpoisson" => Self {
                dataset: DatasetSpec::Highdpoisson { dim: 4, points: 4000, train: 8, gen1: 2, gen2: 10, seed: 1 },
                input: InputConfig {
                    mode: InputMode::C2c,
                    basis: Some(rfm(vec![1; 4], 128, 1.0, 11)),
                    encode: EncodeConfig::svd(1e-1),
                    construction: Construction::Scalar,
                },
                output: OutputConfig {
                    basis: rfm(vec![1; 4], 128, 1.0, 12),
                    encode: EncodeConfig::svd(1e-1),
                    construction: Construction::Scalar,
                },
                net: NetConfig::default(),
                train: TrainConfig { epochs: 20_000, eval_interval: 500, ..train.clone() },
                eval: EvalConfig::default(),
            },
            "multioutput1d" => Self {
                dataset: DatasetSpec::Multioutput1d { grid: 500, train: 400, test: 100, seed: 1, length_scale: 0.1, amplitude: 1.0 },
                input: InputConfig {
                    mode: InputMode::C2c,
                    basis: Some(rfm(vec![4], 16, 3.0, 11)),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                output: OutputConfig {
                    basis: rfm(vec![8], 16, 3.0, 12),
                    encode: EncodeConfig::svd(1e-2),
                    construction: Construction::Scalar,
                },
                net: NetConfig { hidden: 256, seed: 0 },
                train: TrainConfig { epochs: 2_000, batch_size: Some(50), ..train.clone() },
                eval: EvalConfig::default(),
            },
            other => {
                return Err(Error::config(
                    "dataset.problem",
                    format!("unknown problem `{other}` (expected darcy1d, poisson2d, highdpoisson or multioutput1d)"),
                ))
            }
        };
        Ok(cfg.resolved())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.input.mode == InputMode::C2c && self.input.basis.is_none() {
            return Err(Error::config("input.basis", "C2C mode needs an input basis"));
        }
        self.input.encode.validate().map_err(|e| prefix_field(e, "input.encode"))?;
        self.output.encode.validate().map_err(|e| prefix_field(e, "output.encode"))?;
        if self.net.hidden == 0 {
            return Err(Error::config("net.hidden", "must be at least 1"));
        }
        if self.eval.resolutions.contains(&0) {
            return Err(Error::config("eval.resolutions", "grid sizes must be positive"));
        }
        Ok(())
    }

    /// Copy with defaults made explicit: missing RFM bounds become the
    /// dataset domain.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let domain = dataset_domain(&self.dataset);
        let fill = |b: &mut BasisSpec| {
            if let BasisSpec::Rfm(s) = b {
                if s.bounds.is_none() && s.partitions.len() == domain.len() {
                    s.bounds = Some(domain.clone());
                }
            }
        };
        if let Some(b) = out.input.basis.as_mut() {
            fill(b);
        }
        fill(&mut out.output.basis);
        out
    }

    pub fn hash(&self) -> Result<String> {
        io::config_hash(self)
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        e => e,
    }
}

/// Domain box of each generator.
pub fn dataset_domain(spec: &DatasetSpec) -> Vec<[f64; 2]> {
    match spec {
        DatasetSpec::Darcy1d { .. } | DatasetSpec::Multioutput1d { .. } => vec![[0.0, 1.0]],
        DatasetSpec::Poisson2d { .. } => vec![[0.0, 1.0]; 2],
        DatasetSpec::Highdpoisson { dim, .. } => vec![[-1.0, 1.0]; *dim],
    }
}

/// Network inputs for every sample, with encoder details for C2C.
#[derive(Debug, Clone)]
pub struct InputFeatures {
    pub values: DMatrix<f64>,
    /// Singular values of the input design (first component for scalar
    /// constructions). Empty for P2C.
    pub design_singular_values: Vec<f64>,
    pub retained_modes: Option<usize>,
}

/// Encodes (or passes through) the input functions sampled at `points`.
pub fn input_features(
    input: &InputConfig,
    points: &DMatrix<f64>,
    values: &DMatrix<f64>,
    components: usize,
) -> Result<InputFeatures> {
    let n = points.nrows();
    if values.ncols() != components * n {
        return Err(Error::Data(format!(
            "inputs have {} values per sample, expected {components} components on {n} points",
            values.ncols()
        )));
    }
    if input.mode == InputMode::P2c {
        return Ok(InputFeatures { values: values.clone(), design_singular_values: Vec::new(), retained_modes: None });
    }
    let spec = input.basis.as_ref().ok_or_else(|| Error::config("input.basis", "C2C mode needs an input basis"))?;
    let dim = points.ncols();
    match input.construction {
        Construction::Vector if components > 1 => {
            let basis = VectorBasis::build(dim, spec, components)?;
            let design = basis.design_matrix(points)?;
            let enc = Encoder::new(&design, n, input.encode)?;
            Ok(InputFeatures {
                values: enc.encode(values)?,
                design_singular_values: enc.singular_values().to_vec(),
                retained_modes: Some(enc.retained_modes()),
            })
        }
        _ => {
            let basis = BasisSystem::build(dim, spec)?;
            let design = basis.design_matrix(points)?;
            let enc = Encoder::new(&design, n, input.encode)?;
            let m = enc.basis_len();
            let mut out = DMatrix::zeros(values.nrows(), components * m);
            for c in 0..components {
                let block = values.columns(c * n, n).into_owned();
                out.columns_mut(c * m, m).copy_from(&enc.encode(&block)?);
            }
            Ok(InputFeatures {
                values: out,
                design_singular_values: enc.singular_values().to_vec(),
                retained_modes: Some(enc.retained_modes()),
            })
        }
    }
}

/// Output design `Ψ` mapping network outputs to stacked function values:
/// block diagonal for the scalar construction, stacked component blocks
/// for the vector construction.
pub fn output_design(output: &OutputConfig, points: &DMatrix<f64>, components: usize) -> Result<DMatrix<f64>> {
    let dim = points.ncols();
    match output.construction {
        Construction::Vector if components > 1 => VectorBasis::build(dim, &output.basis, components)?.design_matrix(points),
        _ => {
            let design = BasisSystem::build(dim, &output.basis)?.design_matrix(points)?;
            Ok(if components > 1 { block_diagonal(&design, components) } else { design })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub effective_rank: f64,
    /// Balance proxy: exp of the entropy of normalized per-coefficient
    /// variances.
    pub variance_entropy: f64,
    pub degenerate: bool,
    /// Singular modes kept by the encoder (C2C only).
    pub retained_modes: Option<usize>,
}

impl DiagnosticsSummary {
    fn new(d: &CoefficientDiagnostics, retained_modes: Option<usize>) -> Self {
        Self {
            effective_rank: d.effective_rank,
            variance_entropy: d.variance_entropy,
            degenerate: d.degenerate,
            retained_modes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub input_mode: InputMode,
    pub input_construction: Construction,
    pub output_construction: Construction,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub parameters: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub extrapolation_samples: usize,
    pub epochs: usize,
    pub final_train_error: f64,
    /// Mean relative L2 error on the test split.
    pub final_test_error: f64,
    pub test_errors: Vec<f64>,
    pub extrapolation_error: Option<f64>,
    pub extrapolation_errors: Vec<f64>,
    /// Mean best-approximation error of the test targets over the span of
    /// the output basis.
    pub projection_error: f64,
    pub projection_errors: Vec<f64>,
    /// Mean projection error when test targets are encoded with the output
    /// encode config.
    pub encoded_projection_error: f64,
    /// Test samples whose error falls below their projection error by more
    /// than 1e-9.
    pub bound_violations: usize,
    pub input_diagnostics: DiagnosticsSummary,
    pub output_diagnostics: DiagnosticsSummary,
    pub trace: TrainTrace,
    pub seconds: f64,
    pub config_hash: String,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.seconds = 0.0;
        r.trace.seconds = 0.0;
        r.trace.seconds_per_epoch = 0.0;
        r
    }
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub report: RunReport,
    pub net: OperatorNet,
    /// Network inputs for every sample of the dataset, in dataset order.
    pub inputs: InputFeatures,
    pub tags: Vec<SampleTag>,
}

impl Run {
    /// Input coefficients as a container (C2C runs).
    pub fn coefficient_container(&self) -> Result<Container> {
        let basis = self
            .config
            .input
            .basis
            .clone()
            .ok_or_else(|| Error::config("input.basis", "P2C runs have no input coefficients"))?;
        let coeffs = CoefficientMatrix { values: self.inputs.values.clone(), basis, components: 1 };
        io::coefficients_to_container(
            &coeffs,
            &self.inputs.design_singular_values,
            &self.tags,
            serde_json::json!({ "encode": self.config.input.encode, "config_hash": self.report.config_hash }),
        )
    }
}

/// Input coefficients of every sample in `ds` as a container, together
/// with their diagnostics.
pub fn encode_dataset(config: &ExperimentConfig, ds: &FunctionDataset) -> Result<(Container, CoefficientDiagnostics)> {
    let config = config.resolved();
    config.validate()?;
    if config.input.mode == InputMode::P2c {
        return Err(Error::config("input.mode", "P2C runs have no input coefficients"));
    }
    ds.validate().stage(Stage::Dataset)?;
    let basis = config.input.basis.clone().ok_or_else(|| Error::config("input.basis", "C2C mode needs an input basis"))?;
    let feats = input_features(&config.input, &ds.input_points, &ds.inputs, ds.input_components).stage(Stage::Encode)?;
    let diag = encoder::diagnostics(&feats.values).stage(Stage::Encode)?;
    let coeffs = CoefficientMatrix { values: feats.values, basis, components: ds.input_components };
    let container = io::coefficients_to_container(
        &coeffs,
        &feats.design_singular_values,
        &ds.tags,
        serde_json::json!({
            "encode": config.input.encode,
            "construction": config.input.construction,
            "config_hash": config.hash()?,
        }),
    )?;
    Ok((container, diag))
}

/// Generates the dataset and runs the pipeline.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    Ok(execute(config)?.report)
}

pub fn execute(config: &ExperimentConfig) -> Result<Run> {
    config.validate()?;
    let ds = config.dataset.generate().stage(Stage::Dataset)?;
    run_on_dataset(config, &ds)
}

fn split_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

fn defined(errors: &encoder::ProjectionErrors) -> Vec<f64> {
    errors.per_sample.iter().map(|e| e.unwrap_or(f64::NAN)).collect()
}

/// Runs the pipeline on an existing dataset.
pub fn run_on_dataset(config: &ExperimentConfig, ds: &FunctionDataset) -> Result<Run> {
    let config = config.resolved();
    config.validate()?;
    ds.validate().stage(Stage::Dataset)?;
    let train_idx = ds.indices(SampleTag::Train);
    let test_idx = ds.indices(SampleTag::Test);
    let extra_idx = ds.indices(SampleTag::Extrapolation);
    if train_idx.is_empty() {
        return Err(Error::config("dataset.train", "the dataset has no training samples"));
    }
    if test_idx.is_empty() {
        return Err(Error::config("dataset.test", "the dataset has no test samples"));
    }

    let inputs = input_features(&config.input, &ds.input_points, &ds.inputs, ds.input_components).stage(Stage::Encode)?;
    let design = output_design(&config.output, &ds.output_points, ds.output_components).stage(Stage::Basis)?;
    let svd = ThinSvd::new(&design).stage(Stage::Basis)?;

    let a_train = split_rows(&inputs.values, &train_idx);
    let a_test = split_rows(&inputs.values, &test_idx);
    let u_train = split_rows(&ds.outputs, &train_idx);
    let u_test = split_rows(&ds.outputs, &test_idx);

    let objective = Objective::from_svd(&svd, &u_train).stage(Stage::Train)?;
    let test_objective = Objective::from_svd(&svd, &u_test).stage(Stage::Train)?;
    let net = OperatorNet::init(a_train.ncols(), config.net.hidden, design.ncols(), config.net.seed).stage(Stage::Train)?;
    let (net, trace) =
        neuralop::train_objective(net, &a_train, &objective, &config.train, Some((&a_test, &test_objective))).stage(Stage::Train)?;

    let evaluate = || -> Result<_> {
        let test = neuralop::relative_loss(&net.forward(&a_test)?, &design, &u_test)?;
        let extra = if extra_idx.is_empty() {
            None
        } else {
            let a = split_rows(&inputs.values, &extra_idx);
            let u = split_rows(&ds.outputs, &extra_idx);
            Some(neuralop::relative_loss(&net.forward(&a)?, &design, &u)?)
        };
        let proj = encoder::best_approximation_error_svd(&svd, &u_test)?;
        let out_encoder = Encoder::from_svd(&svd, ds.output_points.nrows(), config.output.encode)?;
        let out_coeffs = out_encoder.encode(&u_test)?;
        let reconstructed = neuralop::reconstruct(&out_coeffs, &design);
        let encoded = encoder::ProjectionErrors::from_norms(
            crate::linalg::row_norms(&(reconstructed - &u_test)).as_slice(),
            crate::linalg::row_norms(&u_test).as_slice(),
        );
        let out_diag = DiagnosticsSummary::new(&encoder::diagnostics(&out_coeffs)?, Some(out_encoder.retained_modes()));
        Ok((test, extra, proj, encoded, out_diag))
    };
    let (test, extra, proj, encoded, output_diagnostics) = evaluate().stage(Stage::Evaluate)?;
    let input_diag = encoder::diagnostics(&a_train).stage(Stage::Evaluate)?;

    let projection_errors = defined(&proj);
    let bound_violations = test
        .per_sample
        .iter()
        .zip(&projection_errors)
        .filter(|(e, p)| **e < **p - 1e-9)
        .count();
    let report = RunReport {
        problem: config.dataset.name().to_string(),
        input_mode: config.input.mode,
        input_construction: config.input.construction,
        output_construction: config.output.construction,
        input_dim: net.input_dim(),
        hidden_dim: net.hidden_dim(),
        output_dim: net.output_dim(),
        parameters: net.param_count(),
        train_samples: train_idx.len(),
        test_samples: test_idx.len(),
        extrapolation_samples: extra_idx.len(),
        epochs: config.train.epochs,
        final_train_error: trace.final_train_loss,
        final_test_error: test.mean,
        test_errors: test.per_sample,
        extrapolation_error: extra.as_ref().map(|e| e.mean),
        extrapolation_errors: extra.map(|e| e.per_sample).unwrap_or_default(),
        projection_error: proj.mean,
        projection_errors,
        encoded_projection_error: encoded.mean,
        bound_violations,
        input_diagnostics: DiagnosticsSummary::new(&input_diag, inputs.retained_modes),
        output_diagnostics,
        seconds: trace.seconds,
        trace,
        config_hash: config.hash()?,
    };
    Ok(Run { config, report, net, inputs, tags: ds.tags.clone() })
}

/// One row of a cutoff sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Cut for truncated-SVD encoding, `λ` for ridge.
    pub cut: f64,
    pub effective_rank: f64,
    pub variance_entropy: f64,
    pub retained_modes: Option<usize>,
    pub final_train_error: f64,
    pub final_test_error: f64,
    pub projection_error: f64,
}

impl SweepRow {
    fn from_report(cut: f64, r: &RunReport) -> Self {
        Self {
            cut,
            effective_rank: r.input_diagnostics.effective_rank,
            variance_entropy: r.input_diagnostics.variance_entropy,
            retained_modes: r.input_diagnostics.retained_modes,
            final_train_error: r.final_train_error,
            final_test_error: r.final_test_error,
            projection_error: r.projection_error,
        }
    }
}

/// `base` with its input encoding strength replaced by `cut`.
pub fn with_input_cut(base: &ExperimentConfig, cut: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.input.encode = match base.input.encode {
        EncodeConfig::Ridge { .. } => EncodeConfig::Ridge { lambda: cut },
        EncodeConfig::TruncatedSvd { mode, .. } => EncodeConfig::TruncatedSvd { cut, mode },
    };
    cfg
}

/// One run per input cut, all on the same dataset, bases and seeds.
pub fn sweep_cutoff(base: &ExperimentConfig, cuts: &[f64]) -> Result<Vec<(SweepRow, Run)>> {
    base.validate()?;
    let ds = base.dataset.generate().stage(Stage::Dataset)?;
    sweep_on_dataset(base, &ds, cuts)
}

pub fn sweep_on_dataset(base: &ExperimentConfig, ds: &FunctionDataset, cuts: &[f64]) -> Result<Vec<(SweepRow, Run)>> {
    if cuts.is_empty() {
        return Err(Error::config("cuts", "need at least one cut value"));
    }
    if base.input.mode == InputMode::P2c {
        return Err(Error::config("input.mode", "a cutoff sweep needs C2C inputs"));
    }
    cuts.iter()
        .map(|&cut| {
            let run = run_on_dataset(&with_input_cut(base, cut), ds)?;
            Ok((SweepRow::from_report(cut, &run.report), run))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub grid: usize,
    pub test_error: f64,
    pub projection_error: f64,
}

/// Re-evaluates a trained run on regenerated data at other resolutions. The
/// input basis is re-encoded at the new points; the network is unchanged.
pub fn eval_resolutions(run: &Run, resolutions: &[usize]) -> Result<Vec<ResolutionResult>> {
    eval_resolutions_with(&run.config, &run.net, resolutions)
}

/// [`eval_resolutions`] for a network restored from a checkpoint.
pub fn eval_resolutions_with(config: &ExperimentConfig, net: &OperatorNet, resolutions: &[usize]) -> Result<Vec<ResolutionResult>> {
    if resolutions.is_empty() {
        return Err(Error::config("eval.resolutions", "need at least one resolution"));
    }
    if config.input.mode == InputMode::P2c {
        return Err(Error::config("input.mode", "P2C networks are tied to the training grid"));
    }
    resolutions
        .iter()
        .map(|&n| {
            let ds = config.dataset.with_grid(n).generate().stage(Stage::Dataset)?;
            evaluate(config, net, &ds).map(|(test_error, projection_error)| ResolutionResult { grid: n, test_error, projection_error })
        })
        .collect()
}

/// Mean test error and mean projection error of a trained run on `ds`.
pub fn eval_on_dataset(run: &Run, ds: &FunctionDataset) -> Result<(f64, f64)> {
    evaluate(&run.config, &run.net, ds)
}

pub fn evaluate(config: &ExperimentConfig, net: &OperatorNet, ds: &FunctionDataset) -> Result<(f64, f64)> {
    let test_idx = ds.indices(SampleTag::Test);
    if test_idx.is_empty() {
        return Err(Error::config("dataset.test", "the dataset has no test samples"));
    }
    let inputs = input_features(&config.input, &ds.input_points, &ds.inputs, ds.input_components).stage(Stage::Encode)?;
    if inputs.values.ncols() != net.input_dim() {
        return Err(Error::Data(format!(
            "network expects {} inputs but the dataset encodes to {}",
            net.input_dim(),
            inputs.values.ncols()
        )));
    }
    let design = output_design(&config.output, &ds.output_points, ds.output_components).stage(Stage::Basis)?;
    let a = split_rows(&inputs.values, &test_idx);
    let u = split_rows(&ds.outputs, &test_idx);
    let loss = neuralop::relative_loss(&net.forward(&a)?, &design, &u).stage(Stage::Evaluate)?;
    let proj = encoder::best_approximation_error(&design, &u).stage(Stage::Evaluate)?;
    Ok((loss.mean, proj.mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorScalarComparison {
    pub scalar: RunReport,
    pub vector: RunReport,
}

/// Runs the scalar and the vector-valued construction on the same data.
pub fn compare_vector_scalar(base: &ExperimentConfig) -> Result<VectorScalarComparison> {
    base.validate()?;
    let ds = base.dataset.generate().stage(Stage::Dataset)?;
    compare_on_dataset(base, &ds)
}

pub fn compare_on_dataset(base: &ExperimentConfig, ds: &FunctionDataset) -> Result<VectorScalarComparison> {
    if ds.input_components == 1 && ds.output_components == 1 {
        return Err(Error::config("dataset", "comparison needs a multi-component dataset"));
    }
    let with = |c: Construction| {
        let mut cfg = base.clone();
        cfg.input.construction = c;
        cfg.output.construction = c;
        cfg
    };
    let scalar = run_on_dataset(&with(Construction::Scalar), ds)?.report;
    let vector = run_on_dataset(&with(Construction::Vector), ds)?.report;
    Ok(VectorScalarComparison { scalar, vector })
}

pub const TRACE_COLUMNS: [&str; 4] = ["epoch", "train_rel_err", "test_rel_err", "lr"];
pub const DIAGNOSTIC_COLUMNS: [&str; 4] = ["cut_or_lambda", "erank", "variance_entropy", "mean_projection_error"];

/// Trace rows: one per epoch `e` with the training error after `e`
/// updates, the test error where it was evaluated, and the learning rate of
/// update `e + 1`. Missing values are NaN.
pub fn trace_rows(trace: &TrainTrace) -> Vec<Vec<f64>> {
    let epochs = trace.train_loss.len();
    let mut rows: Vec<Vec<f64>> = (0..=epochs)
        .map(|e| {
            let train = if e < epochs { trace.train_loss[e] } else { trace.final_train_loss };
            let lr = trace.learning_rate.get(e).copied().unwrap_or(f64::NAN);
            vec![e as f64, train, f64::NAN, lr]
        })
        .collect();
    for (e, loss) in trace.test_epochs.iter().zip(&trace.test_loss) {
        if let Some(row) = rows.get_mut(*e) {
            row[2] = *loss;
        }
    }
    rows
}

/// Writes `report.json`, `traces.csv`, `diagnostics.csv`,
/// `checkpoint.fbc` and the resolved `config.toml` into `dir`.
pub fn write_run_dir(dir: &Path, run: &Run) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report = serde_json::to_string_pretty(&run.report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("report.json"), report)?;
    io::write_csv(&dir.join("traces.csv"), &TRACE_COLUMNS, &trace_rows(&run.report.trace))?;
    let d = &run.report.input_diagnostics;
    io::write_csv(
        &dir.join("diagnostics.csv"),
        &DIAGNOSTIC_COLUMNS,
        &[vec![run.config.input.encode.strength(), d.effective_rank, d.variance_entropy, run.report.projection_error]],
    )?;
    io::checkpoint_to_container(&run.net, run.report.epochs, &run.report.config_hash)?.write(&dir.join("checkpoint.fbc"))?;
    fs::write(dir.join("config.toml"), io::to_toml(&run.config)?)?;
    Ok(())
}

/// Writes a sweep table with the diagnostics columns plus errors.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut header: Vec<&str> = DIAGNOSTIC_COLUMNS.to_vec();
    header.extend(["retained_modes", "final_train_rel_err", "final_test_rel_err"]);
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.cut,
                r.effective_rank,
                r.variance_entropy,
                r.projection_error,
                r.retained_modes.map_or(f64::NAN, |m| m as f64),
                r.final_train_error,
                r.final_test_error,
            ]
        })
        .collect();
    io::write_csv(path, &header, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::FemSpec;

    fn tiny_darcy() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset("darcy1d").unwrap();
        cfg.dataset = DatasetSpec::Darcy1d {
            grid: 101,
            train: 20,
            test: 8,
            seed: 3,
            length_scale: 0.1,
            amplitude: 1.0,
            reference_grid: None,
            tol: 1e-10,
        };
        cfg.net.hidden = 16;
        cfg.train.epochs = 30;
        cfg.train.eval_interval = 10;
        cfg
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for p in ["darcy1d", "poisson2d", "highdpoisson", "multioutput1d"] {
            let cfg = ExperimentConfig::preset(p).unwrap();
            let text = io::to_toml(&cfg).unwrap();
            let back: ExperimentConfig = io::parse_config(&text).unwrap();
            assert_eq!(back, cfg, "{text}");
        }
        assert!(matches!(ExperimentConfig::preset("nope"), Err(Error::Config { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = io::to_toml(&ExperimentConfig::preset("darcy1d").unwrap()).unwrap();
        text = text.replace("[net]", "[net]\nwidth = 3");
        match io::parse_config::<ExperimentConfig>(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "width"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_is_complete_and_deterministic() {
        let cfg = tiny_darcy();
        let a = execute(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.report.without_timing(), b.without_timing());
        let r = &a.report;
        assert_eq!(r.test_errors.len(), 8);
        assert_eq!(r.trace.train_loss.len(), 30);
        assert_eq!(r.trace.test_epochs, vec![0, 10, 20, 30]);
        assert_eq!(r.bound_violations, 0);
        assert!(r.final_test_error >= r.projection_error - 1e-9);
        assert_eq!(r.input_dim, 128);
        assert_eq!(r.output_dim, 32);
    }

    #[test]
    fn fem_output_at_grid_nodes_has_zero_projection_error() {
        let mut cfg = tiny_darcy();
        cfg.output.basis = BasisSpec::Fem(FemSpec::uniform(100));
        let r = run(&cfg).unwrap();
        assert!(r.projection_error < 1e-12, "{}", r.projection_error);
    }

    #[test]
    fn p2c_differs_only_in_input_width() {
        let mut cfg = tiny_darcy();
        cfg.input.mode = InputMode::P2c;
        let r = run(&cfg).unwrap();
        assert_eq!(r.input_dim, 101);
        assert!(r.input_diagnostics.retained_modes.is_none());
    }

    #[test]
    fn same_resolution_reproduces_test_error() {
        let run = execute(&tiny_darcy()).unwrap();
        let res = eval_resolutions(&run, &[101]).unwrap();
        assert_eq!(res[0].test_error, run.report.final_test_error);
        assert!(eval_resolutions(&run, &[]).is_err());
    }

    #[test]
    fn singleton_sweep_matches_run() {
        let cfg = tiny_darcy();
        let rows = sweep_cutoff(&cfg, &[1e-2]).unwrap();
        let r = run(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].1.report.without_timing(), r.without_timing());
        assert!(sweep_cutoff(&cfg, &[]).is_err());
    }

    #[test]
    fn vector_construction_halves_output_coefficients() {
        let mut cfg = ExperimentConfig::preset("multioutput1d").unwrap();
        cfg.dataset = DatasetSpec::Multioutput1d { grid: 60, train: 10, test: 4, seed: 2, length_scale: 0.1, amplitude: 1.0 };
        cfg.net.hidden = 8;
        cfg.train.epochs = 5;
        let cmp = compare_vector_scalar(&cfg).unwrap();
        assert_eq!(cmp.scalar.output_dim, 2 * cmp.vector.output_dim);
        assert_eq!(cmp.scalar.parameters - cmp.vector.parameters, cmp.vector.output_dim * 8);
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let run = execute(&tiny_darcy()).unwrap();
        write_run_dir(dir.path(), &run).unwrap();
        let (header, rows) = io::read_csv(&dir.path().join("traces.csv")).unwrap();
        assert_eq!(header, TRACE_COLUMNS);
        assert_eq!(rows.len(), 31);
        assert_eq!(rows[30][2], run.report.trace.test_loss[3]);
        let cfg: ExperimentConfig = io::read_config(&dir.path().join("config.toml")).unwrap();
        assert_eq!(cfg, run.config);
        let cp = io::checkpoint_from_container(&Container::read(&dir.path().join("checkpoint.fbc")).unwrap()).unwrap();
        assert_eq!(cp.net, run.net);
        assert_eq!(cp.config_hash, run.report.config_hash);
    }
}
