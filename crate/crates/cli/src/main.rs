use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbc2c::datagen::FunctionDataset;
use fbc2c::experiment::{self, ExperimentConfig};
use fbc2c::io::{self, Container};
use fbc2c::{encoder, Error, ErrorKind, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fbc2c", version, about = "Fixed-basis coefficient-to-coefficient operator learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired function dataset container.
    Gen(GenArgs),
    /// Encode the input functions of a dataset against the configured input basis.
    Encode(EncodeArgs),
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run directory.
    Eval(EvalArgs),
    /// Effective rank and variance diagnostics of a coefficient container.
    Diagnose(DiagnoseArgs),
    /// Train once per input cut and write the sweep table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "problem")]
    config: Option<PathBuf>,
    /// Built-in preset: darcy1d, poisson2d, highdpoisson or multioutput1d.
    #[arg(long)]
    problem: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.problem) {
            (Some(path), _) => io::read_config(path),
            (None, Some(p)) => ExperimentConfig::preset(p),
            (None, None) => Err(Error::config("config", "pass --config <file> or --problem <name>")),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Grid size (points for the high-dimensional family).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Dataset container; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the input cut (or ridge λ).
    #[arg(long)]
    cut: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
    /// Diagnostics CSV path.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory to create.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated grid sizes for resolution transfer.
    #[arg(long, value_delimiter = ',')]
    resolutions: Vec<usize>,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Coefficient container.
    input: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    cuts: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::MissingFile => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Other => 1,
    }
}

fn error_line(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Config => "config",
        ErrorKind::MissingFile => "missing_file",
        ErrorKind::Numerical => "numerical",
        ErrorKind::Other => "other",
    };
    let mut obj = json!({ "error": kind, "message": e.to_string() });
    if let Error::Config { field, .. } = e.root() {
        obj["field"] = json!(field);
    }
    obj.to_string()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn load_dataset(path: &Path) -> Result<FunctionDataset> {
    io::dataset_from_container(&Container::read(path).map_err(|e| annotate_missing(e, path))?)
}

fn annotate_missing(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        e => e,
    }
}

fn dataset_for(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<FunctionDataset> {
    match data {
        Some(p) => load_dataset(p),
        None => cfg.dataset.generate(),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = a.source.load()?;
    let mut spec = cfg.dataset.clone();
    if let Some(n) = a.n {
        spec = spec.with_grid(n);
    }
    if a.train.is_some() || a.test.is_some() {
        let (train, test) = spec.counts();
        spec = spec.with_counts(a.train.unwrap_or(train), a.test.unwrap_or(test));
    }
    if let Some(seed) = a.seed {
        spec = spec.with_seed(seed);
    }
    let ds = spec.generate()?;
    io::dataset_to_container(&ds)?.write(&a.output)?;
    println!(
        "{}",
        json!({ "samples": ds.samples(), "input_points": ds.input_points.nrows(), "output_points": ds.output_points.nrows(), "output": a.output })
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let mut cfg = a.source.load()?;
    if let Some(cut) = a.cut {
        cfg = experiment::with_input_cut(&cfg, cut);
    }
    let ds = dataset_for(&cfg, a.data.as_deref())?;
    let (container, diag) = experiment::encode_dataset(&cfg, &ds)?;
    container.write(&a.output)?;
    if let Some(path) = &a.diagnostics {
        let proj = projection_error(&cfg, &ds)?;
        io::write_csv(
            path,
            &experiment::DIAGNOSTIC_COLUMNS,
            &[vec![cfg.input.encode.strength(), diag.effective_rank, diag.variance_entropy, proj]],
        )?;
    }
    println!("{}", json!({ "erank": diag.effective_rank, "variance_entropy": diag.variance_entropy, "output": a.output }));
    Ok(())
}

/// Mean best-approximation error of the test targets over the output basis.
fn projection_error(cfg: &ExperimentConfig, ds: &FunctionDataset) -> Result<f64> {
    let cfg = cfg.resolved();
    let design = experiment::output_design(&cfg.output, &ds.output_points, ds.output_components)?;
    let idx = ds.indices(fbc2c::datagen::SampleTag::Test);
    let idx = if idx.is_empty() { (0..ds.samples()).collect() } else { idx };
    Ok(encoder::best_approximation_error(&design, &ds.outputs.select_rows(&idx))?.mean)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.source.load()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let ds = dataset_for(&cfg, a.data.as_deref())?;
    let run = experiment::run_on_dataset(&cfg, &ds)?;
    experiment::write_run_dir(&a.out, &run)?;
    let r = &run.report;
    println!(
        "{}",
        json!({
            "final_train_error": r.final_train_error,
            "final_test_error": r.final_test_error,
            "projection_error": r.projection_error,
            "epochs": r.epochs,
            "seconds_per_epoch": r.trace.seconds_per_epoch,
            "run_dir": a.out,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg_path = a.run.join("config.toml");
    let cfg: ExperimentConfig = io::read_config(&cfg_path).map_err(|e| annotate_missing(e, &cfg_path))?;
    let ckpt_path = a.run.join("checkpoint.fbc");
    let ckpt = io::checkpoint_from_container(&Container::read(&ckpt_path).map_err(|e| annotate_missing(e, &ckpt_path))?)?;
    let ds = dataset_for(&cfg, a.data.as_deref())?;
    let (test_error, projection_error) = experiment::evaluate(&cfg, &ckpt.net, &ds)?;
    let mut out = json!({
        "test_error": test_error,
        "projection_error": projection_error,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
    });
    if !a.resolutions.is_empty() {
        let res = experiment::eval_resolutions_with(&cfg, &ckpt.net, &a.resolutions)?;
        let errors: Vec<f64> = res.iter().map(|r| r.test_error).collect();
        let max = errors.iter().copied().fold(f64::MIN, f64::max);
        let min = errors.iter().copied().fold(f64::MAX, f64::min);
        out["resolutions"] = json!(res);
        out["max_min_ratio"] = json!(max / min);
    }
    let text = out.to_string();
    if let Some(path) = &a.json {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let c = Container::read(&a.input).map_err(|e| annotate_missing(e, &a.input))?;
    let coeffs = io::coefficients_from_container(&c)?;
    let d = encoder::diagnostics(&coeffs)?;
    if let Some(path) = &a.csv {
        let strength = c
            .metadata
            .get("encode")
            .and_then(|e| serde_json::from_value::<encoder::EncodeConfig>(e.clone()).ok())
            .map_or(f64::NAN, |e| e.strength());
        io::write_csv(path, &experiment::DIAGNOSTIC_COLUMNS, &[vec![strength, d.effective_rank, d.variance_entropy, f64::NAN]])?;
    }
    println!("erank {:.3}", d.effective_rank);
    println!("variance_entropy {:.3}", d.variance_entropy);
    println!("samples {} basis {}", coeffs.nrows(), coeffs.ncols());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.source.load()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let ds = dataset_for(&cfg, a.data.as_deref())?;
    let rows: Vec<_> = experiment::sweep_on_dataset(&cfg, &ds, &a.cuts)?.into_iter().map(|(row, _)| row).collect();
    experiment::write_sweep_csv(&a.output, &rows)?;
    for r in &rows {
        println!("{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(())
}
