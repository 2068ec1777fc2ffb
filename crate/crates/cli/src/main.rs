//! `biascomp`: generate toy models, quantize, calibrate bias compensation,
//! evaluate, and dump figure data.

use std::path::PathBuf;
use std::process::ExitCode;

use biascomp::io::{self, ModelFile};
use biascomp::model::{calibrate, evaluate, settings, synth_batch, Arch, QuantMode, QuantSettings, QuantizedModel};
use biascomp::quant::{Granularity, Scheme};
use biascomp::report::{bias_stats, ErrorReport, ReportKind};
use biascomp::{Error, RngStream};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Relative slack for the calibration-set guarantee check.
const GUARANTEE_TOL: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "biascomp", version, about = "Post-training quantization with output bias compensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a toy model plus calibration and held-out batches.
    Gen(GenArgs),
    /// Quantize a float model without fitting biases.
    Quantize(QuantizeArgs),
    /// Quantize and fit one bias vector per site on a calibration batch.
    Calibrate(CalibrateArgs),
    /// Per-site errors of a quantized model on a batch.
    Eval(EvalArgs),
    /// Bias distribution statistics of a model.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// e.g. `transformer:blocks=2,d=32,heads=4,ff=64,seq=16` or `mlp:784-256-64`
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Held-out batch size; defaults to --batch-size.
    #[arg(long)]
    heldout_size: Option<usize>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_calib: PathBuf,
    #[arg(long)]
    out_heldout: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Symmetric,
    Asymmetric,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[allow(clippy::enum_variant_names)]
enum GranularityArg {
    PerTensor,
    PerChannel,
    PerGroup,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    WeightOnly,
    WeightActivation,
}

#[derive(Args, Debug)]
struct QuantArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits: u8,
    #[arg(long, value_enum, default_value_t = SchemeArg::Symmetric)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerTensor)]
    granularity: GranularityArg,
    /// Group size for per-group quantization (default 64).
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::WeightOnly)]
    mode: ModeArg,
}

impl QuantArgs {
    fn settings(&self) -> Result<QuantSettings, Error> {
        let granularity = match (self.granularity, self.group_size) {
            (GranularityArg::PerGroup, size) => Granularity::PerGroup { size: size.unwrap_or(64) },
            (_, Some(_)) => {
                return Err(Error::Argument("--group-size requires --granularity per-group".into()));
            }
            (GranularityArg::PerTensor, None) => Granularity::PerTensor,
            // Output channels are the columns of an [in, out] weight.
            (GranularityArg::PerChannel, None) => Granularity::PerChannel { axis: 1 },
        };
        let scheme = match self.scheme {
            SchemeArg::Symmetric => Scheme::Symmetric,
            SchemeArg::Asymmetric => Scheme::Asymmetric,
        };
        let mode = match self.mode {
            ModeArg::WeightOnly => QuantMode::WeightOnly,
            ModeArg::WeightActivation => QuantMode::WeightActivation,
        };
        settings(self.bits, scheme, granularity, mode)
    }
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    /// Quantize only; attach no biases (ablation).
    #[arg(long)]
    no_bc: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Per-site error series as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Store biases as 32-bit floats (lossy; flagged in reports).
    #[arg(long)]
    f32_bias: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    /// Float reference model; defaults to the float weights inside --model.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Numeric { .. } | Error::Instability { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Error> {
    let arch: Arch = a.arch.parse()?;
    if a.batch_size == 0 || a.heldout_size == Some(0) {
        return Err(Error::Argument("batch sizes must be positive".into()));
    }
    let mut rng = RngStream::new(a.seed);
    let spec = arch.build(&mut rng.fork())?;
    let calib = synth_batch(&arch.input_shape(a.batch_size), &mut rng.fork())?;
    let heldout = synth_batch(&arch.input_shape(a.heldout_size.unwrap_or(a.batch_size)), &mut rng.fork())?;
    io::write_spec(&a.out_model, &spec)?;
    io::write_batch(&a.out_calib, &calib)?;
    if let Some(p) = &a.out_heldout {
        io::write_batch(p, &heldout)?;
    }
    println!(
        "generated {arch} (seed {}): {} quantized sites, calibration batch {:?}",
        a.seed,
        spec.sites().len(),
        calib.inputs().shape()
    );
    Ok(())
}

/// Float spec files are quantized with `quant`; bias-free quantized files are used as-is.
fn load_unbiased(path: &PathBuf, quant: &QuantArgs) -> Result<QuantizedModel, Error> {
    let settings = quant.settings()?;
    match io::read_model_file(path)? {
        ModelFile::Float(spec) => QuantizedModel::quantize(spec, settings),
        ModelFile::Quantized(m) if m.has_biases() => Err(Error::Argument(format!(
            "{} already carries bias vectors",
            path.display()
        ))),
        ModelFile::Quantized(m) => Ok(m),
    }
}

fn cmd_quantize(a: QuantizeArgs) -> Result<(), Error> {
    let model = load_unbiased(&a.model, &a.quant)?;
    io::write_model(&a.out, &model)?;
    println!("quantized {} sites with {}", model.sites().len(), model.settings().weight);
    Ok(())
}

fn print_sites(report: &ErrorReport) {
    println!("{:>4}  {:<22} {:>14} {:>14} {:>8}", "site", "name", "base", "compensated", "ratio");
    for s in &report.sites {
        let ratio = if s.base_error > 0.0 {
            (s.base_error - s.compensated_error) / s.base_error
        } else {
            0.0
        };
        println!(
            "{:>4}  {:<22} {:>14.6e} {:>14.6e} {:>7.2}%",
            s.site_index,
            s.site_name,
            s.base_error,
            s.compensated_error,
            100.0 * ratio
        );
    }
    let sum = &report.summary;
    println!(
        "{}/{} sites reduced, mean reduction {:.2}%",
        sum.sites_reduced,
        sum.sites,
        100.0 * sum.mean_reduction_ratio
    );
    if let Some(f) = &report.final_output_error {
        println!(
            "final output error: {:.6e} without bias, {:.6e} with bias",
            f.uncompensated, f.compensated
        );
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Error> {
    let model = load_unbiased(&a.model, &a.quant)?;
    let batch = io::read_batch(&a.batch)?;
    let spec = model.spec().clone();
    let (model, mut report) = if a.no_bc {
        let mut report = evaluate(&model, &batch, &spec)?;
        report.kind = ReportKind::Calibration;
        (model, report)
    } else {
        let (model, records) = calibrate(model, &batch)?;
        let mut report = ErrorReport::from_calibration(&model, records);
        report.final_output_error = evaluate(&model, &batch, &spec)?.final_output_error;
        (model, report)
    };
    if a.f32_bias {
        io::write_model_lossy_bias(&a.out, &model)?;
        report.bias_precision = biascomp::bias::BiasPrecision::F32;
    } else {
        io::write_model(&a.out, &model)?;
    }
    io::write_report(&a.report, std::slice::from_ref(&report))?;
    if let Some(p) = &a.csv {
        io::write_csv(p, &report.sites)?;
    }
    print_sites(&report);
    let bad = report.regressions(GUARANTEE_TOL);
    if let Some(s) = bad.first() {
        return Err(Error::Numeric {
            site: format!(
                "{} (compensated {} > base {} on calibration data)",
                s.site_name, s.compensated_error, s.base_error
            ),
        });
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let model = io::read_model(&a.model)?;
    let batch = io::read_batch(&a.batch)?;
    let reference = match &a.reference {
        Some(p) => io::read_model_file(p)?.spec().clone(),
        None => model.spec().clone(),
    };
    let report = evaluate(&model, &batch, &reference)?;
    if let Some(p) = &a.report {
        io::write_report(p, std::slice::from_ref(&report))?;
    }
    if let Some(p) = &a.csv {
        io::write_csv(p, &report.sites)?;
    }
    print_sites(&report);
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Error> {
    let stats = match io::read_model_file(&a.model)? {
        ModelFile::Quantized(m) => bias_stats(&m),
        ModelFile::Float(_) => Vec::new(),
    };
    if stats.is_empty() {
        eprintln!("warning: {} has no bias vectors attached", a.model.display());
    }
    if let Some(p) = &a.csv {
        io::write_bias_csv(p, &stats)?;
    }
    println!("{:>4}  {:<22} {:>6} {:>13} {:>13} {:>13}", "site", "name", "len", "mean", "abs_mean", "variance");
    for s in &stats {
        println!(
            "{:>4}  {:<22} {:>6} {:>13.5e} {:>13.5e} {:>13.5e}",
            s.site_index, s.site_name, s.len, s.mean, s.abs_mean, s.variance
        );
    }
    Ok(())
}
