//! `pac`: command-line frontend for perspective-aware convolution.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pac_core::bench::{run_bench, to_csv, to_text, Workload};
use pac_core::gradcheck::{default_eps, run_gradcheck, GradcheckReport};
use pac_core::io::{
    angle_field_from_tensors, angle_tensor, load_module_params, mask_tensor, read_kitti_calib,
    read_pact_file, save_module_params, write_angle_ppm, write_pact_file, MANIFEST_FILE,
};
use pac_core::{
    angle_field_with_policy, build_offset_field, init_params, pac_conv_forward_with,
    pac_module_forward, standard_conv_forward, with_threads, AboveHorizon, AngleField, AnyTensor,
    ConvImpl, ConvParams, DType, GroundPlane, KernelSpec, OffsetField, PacModuleConfig, Scalar,
    Tensor,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "pac", version, about = "Perspective-aware convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the per-pixel perspective angle field from a KITTI calibration.
    AngleField(AngleFieldArgs),
    /// Build sheared kernel offsets from an angle field.
    Offsets(OffsetsArgs),
    /// Run the perspective-aware convolution forward pass.
    Conv(ConvArgs),
    /// Run a standard zero-padded dilated convolution.
    ConvStd(ConvStdArgs),
    /// Run the multi-branch PAC module forward pass.
    Module(ModuleArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the forward implementations.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AboveHorizonArg {
    Verbatim,
    Fallback,
}

impl From<AboveHorizonArg> for AboveHorizon {
    fn from(a: AboveHorizonArg) -> Self {
        match a {
            AboveHorizonArg::Verbatim => AboveHorizon::Verbatim,
            AboveHorizonArg::Fallback => AboveHorizon::Fallback,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImplArg {
    Naive,
    Gather,
}

impl From<ImplArg> for ConvImpl {
    fn from(a: ImplArg) -> Self {
        match a {
            ImplArg::Naive => ConvImpl::Naive,
            ImplArg::Gather => ConvImpl::Gather,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchImplArg {
    Naive,
    Gather,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn finite_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite number, got {s:?}")),
    }
}

fn odd_count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v % 2 == 1 => Ok(v),
        _ => Err(format!("expected an odd positive integer, got {s:?}")),
    }
}

fn shape4(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected N,C,H,W, got {s:?}"))?;
    match parts[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok([n, c, h, w]),
        _ => Err(format!("expected four positive integers N,C,H,W, got {s:?}")),
    }
}

/// Comma-separated dilations, parsed as one value.
#[derive(Clone, Debug)]
struct Dilations(Vec<usize>);

fn dilation_list(s: &str) -> Result<Dilations, String> {
    if s.trim().is_empty() {
        return Ok(Dilations(Vec::new()));
    }
    s.split(',')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(d) if d >= 1 => Ok(d),
            _ => Err(format!("bad dilation {p:?} in {s:?}")),
        })
        .collect::<Result<_, _>>()
        .map(Dilations)
}

#[derive(clap::Args, Debug)]
struct AngleFieldArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    width: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    height: u64,
    /// Ground plane height in camera coordinates (meters, Y down).
    #[arg(long = "ground-y", value_parser = finite_f64, allow_hyphen_values = true)]
    ground_y: f64,
    /// Feature-map stride; all intrinsics are divided by it.
    #[arg(long, value_parser = positive_f64)]
    stride: Option<f64>,
    #[arg(long = "horizon-eps", default_value_t = pac_core::DEFAULT_HORIZON_EPSILON, value_parser = positive_f64)]
    horizon_eps: f64,
    #[arg(long = "above-horizon", value_enum, default_value = "verbatim")]
    above_horizon: AboveHorizonArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ppm: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct OffsetsArgs {
    #[arg(long)]
    angles: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dilation: u64,
    #[arg(long, default_value_t = 3, value_parser = odd_count)]
    rows: usize,
    #[arg(long, default_value_t = 3, value_parser = odd_count)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ConvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long)]
    offsets: PathBuf,
    #[arg(long = "impl", value_enum, default_value = "gather")]
    implementation: ImplArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ConvStdArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    dilation: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ModuleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long = "ground-y", value_parser = finite_f64, allow_hyphen_values = true)]
    ground_y: f64,
    /// Perspective branch dilations; an empty list keeps only the standard branch.
    #[arg(long, default_value = "2,4,6,8", value_parser = dilation_list)]
    dilations: Dilations,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Params directory: loaded if it has a manifest, otherwise written.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step (default 1e-6 for f64, 1e-2 for f32).
    #[arg(long, value_parser = positive_f64)]
    eps: Option<f64>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DTypeArg,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long, value_parser = shape4)]
    shape: [usize; 4],
    #[arg(long = "c-out", value_parser = clap::value_parser!(u64).range(1..))]
    c_out: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    dilation: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
    /// Upper bound on worker threads.
    #[arg(long, env = "PAC_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[arg(long = "impl", value_enum)]
    implementation: BenchImplArg,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn mask_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".mask");
    PathBuf::from(s)
}

fn read_tensor(path: &Path) -> Result<AnyTensor> {
    read_pact_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_tensor(path: &Path, t: AnyTensor) -> Result<()> {
    write_pact_file(path, &t).with_context(|| format!("writing {}", path.display()))
}

fn cmd_angle_field(args: AngleFieldArgs) -> Result<()> {
    let mut k = read_kitti_calib(&args.calib)
        .with_context(|| format!("reading calibration {}", args.calib.display()))?;
    if let Some(stride) = args.stride {
        k = k.downscaled(stride)?;
    }
    let ground = GroundPlane::new(args.ground_y)?;
    let angles = angle_field_with_policy(
        args.width as usize,
        args.height as usize,
        &k,
        &ground,
        args.horizon_eps,
        args.above_horizon.into(),
    )?;
    write_tensor(&args.out, angle_tensor(&angles).into())?;
    write_tensor(&mask_path(&args.out), mask_tensor(&angles).into())?;
    if let Some(ppm) = &args.ppm {
        let file = File::create(ppm).with_context(|| format!("creating {}", ppm.display()))?;
        write_angle_ppm(&angles, BufWriter::new(file))?;
    }
    Ok(())
}

fn load_angles(path: &Path) -> Result<AngleField> {
    let phi = read_tensor(path)?.into_f64();
    let mask_file = mask_path(path);
    let mask = if mask_file.exists() {
        read_tensor(&mask_file)?.into_f64()
    } else {
        Tensor::from_fn(phi.dims(), |_| 1.0)
    };
    Ok(angle_field_from_tensors(&phi, &mask)?)
}

fn cmd_offsets(args: OffsetsArgs) -> Result<()> {
    let angles = load_angles(&args.angles)?;
    let spec = KernelSpec::new(args.rows, args.cols, args.dilation as usize)?;
    let offsets = build_offset_field(&angles, &spec)?;
    write_tensor(&args.out, offsets.to_tensor().into())
}

fn load_conv_params<T: Scalar>(weights: &Path, bias: Option<&Path>) -> Result<ConvParams<T>> {
    let w = read_tensor(weights)?.cast::<T>();
    Ok(match bias {
        Some(b) => ConvParams::new(w, read_tensor(b)?.cast())?,
        None => ConvParams::without_bias(w)?,
    })
}

fn conv_typed<T: Scalar>(args: &ConvArgs, input: Tensor<T>, offsets: &OffsetField) -> Result<Tensor<T>> {
    let params = load_conv_params::<T>(&args.weights, args.bias.as_deref())?;
    Ok(pac_conv_forward_with(args.implementation.into(), &input, &params, offsets)?)
}

fn cmd_conv(args: ConvArgs) -> Result<()> {
    let input = read_tensor(&args.input)?;
    let offsets = OffsetField::from_tensor(&read_tensor(&args.offsets)?.into_f64())?;
    let out: AnyTensor = match input {
        AnyTensor::F32(x) => conv_typed(&args, x, &offsets)?.into(),
        AnyTensor::F64(x) => conv_typed(&args, x, &offsets)?.into(),
    };
    write_tensor(&args.out, out)
}

fn conv_std_typed<T: Scalar>(args: &ConvStdArgs, input: Tensor<T>) -> Result<Tensor<T>> {
    let params = load_conv_params::<T>(&args.weights, args.bias.as_deref())?;
    Ok(standard_conv_forward(&input, &params, args.dilation as usize)?)
}

fn cmd_conv_std(args: ConvStdArgs) -> Result<()> {
    let out: AnyTensor = match read_tensor(&args.input)? {
        AnyTensor::F32(x) => conv_std_typed(&args, x)?.into(),
        AnyTensor::F64(x) => conv_std_typed(&args, x)?.into(),
    };
    write_tensor(&args.out, out)
}

fn module_typed<T: Scalar>(args: &ModuleArgs, input: Tensor<T>, angles: &AngleField) -> Result<Tensor<T>>
where
    AnyTensor: From<Tensor<T>>,
{
    let c_in = input.shape4("input")?[1];
    let mut config = PacModuleConfig::with_dilations(c_in, c_in, &args.dilations.0);
    config.seed = args.seed;

    let existing = args.params.as_ref().filter(|dir| dir.join(MANIFEST_FILE).exists());
    let params = match existing {
        Some(dir) => {
            let (branches, params) = load_module_params::<T>(dir)
                .with_context(|| format!("loading params from {}", dir.display()))?;
            config.branches = branches;
            config.c_mid = params.branches[0].c_out();
            config.c_out = params.fusion.c_out();
            params
        }
        None => {
            let params = init_params::<T>(&config)?;
            if let Some(dir) = &args.params {
                save_module_params(dir, &config.branches, &params)
                    .with_context(|| format!("writing params to {}", dir.display()))?;
            }
            params
        }
    };
    Ok(pac_module_forward(&input, &params, &config, angles)?)
}

fn cmd_module(args: ModuleArgs) -> Result<()> {
    let k = read_kitti_calib(&args.calib)
        .with_context(|| format!("reading calibration {}", args.calib.display()))?;
    let ground = GroundPlane::new(args.ground_y)?;
    let input = read_tensor(&args.input)?;
    let [_, _, h, w] = match &input {
        AnyTensor::F32(t) => t.shape4("input")?,
        AnyTensor::F64(t) => t.shape4("input")?,
    };
    let angles = angle_field_with_policy(
        w,
        h,
        &k,
        &ground,
        pac_core::DEFAULT_HORIZON_EPSILON,
        AboveHorizon::Verbatim,
    )?;
    let out: AnyTensor = match input {
        AnyTensor::F32(x) => module_typed(&args, x, &angles)?.into(),
        AnyTensor::F64(x) => module_typed(&args, x, &angles)?.into(),
    };
    write_tensor(&args.out, out)
}

fn print_gradcheck(report: &GradcheckReport) {
    println!(
        "gradcheck dtype={} eps={:e} tolerance={:e}",
        report.dtype.name(),
        report.eps,
        report.tolerance
    );
    for g in &report.groups {
        let status = if g.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<24} n={:<5} max_rel_err={:.6e} {status}", g.name, g.checked, g.max_rel_error);
    }
    println!("overall: {}", if report.passed() { "PASS" } else { "FAIL" });
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let dtype = match args.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    let eps = args.eps.unwrap_or_else(|| default_eps(dtype));
    let report = match dtype {
        DType::F32 => run_gradcheck::<f32>(args.seed, eps)?,
        DType::F64 => run_gradcheck::<f64>(args.seed, eps)?,
    };
    print_gradcheck(&report);
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_DATA) })
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let impls: Vec<ConvImpl> = match args.implementation {
        BenchImplArg::Naive => vec![ConvImpl::Naive],
        BenchImplArg::Gather => vec![ConvImpl::Gather],
        BenchImplArg::Both => ConvImpl::ALL.to_vec(),
    };
    let threads = args
        .threads
        .map(|t| t as usize)
        .unwrap_or_else(rayon::current_num_threads);
    let workload = Workload::new(args.shape, args.c_out as usize, args.dilation as usize, 0)?;
    let reports = with_threads(threads, || {
        impls
            .iter()
            .map(|&which| run_bench(&workload, which, args.repeat as usize))
            .collect::<pac_core::Result<Vec<_>>>()
    })??;

    if let [a, b] = &reports[..] {
        if (a.checksum - b.checksum).abs() >= 1e-10 {
            bail!(
                "checksum mismatch between {} ({}) and {} ({})",
                a.impl_name,
                a.checksum,
                b.impl_name,
                b.checksum
            );
        }
    }
    print!("{}", to_text(&reports));
    if let Some(path) = &args.csv {
        fs::write(path, to_csv(&reports)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::AngleField(a) => cmd_angle_field(a)?,
        Command::Offsets(a) => cmd_offsets(a)?,
        Command::Conv(a) => cmd_conv(a)?,
        Command::ConvStd(a) => cmd_conv_std(a)?,
        Command::Module(a) => cmd_module(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn init_thread_pool() -> Result<()> {
    let Ok(value) = std::env::var("PAC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t >= 1)
        .ok_or_else(|| anyhow!("PAC_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
