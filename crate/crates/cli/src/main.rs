//! `rapidnet` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime or
//! verification failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rapidnet::analysis::{report, report_for_model, AnalysisReport};
use rapidnet::bench::{bench_case, BenchCase, BenchProtocol};
use rapidnet::blocks::MixerMode;
use rapidnet::reparam::reparameterize_model;
use rapidnet::trainer::{accuracy, toy_config, train_toy, write_csv, Schedule, SyntheticDataset, TrainOptions};
use rapidnet::verify::{
    block_gradient_checks, conv_oracle_checks, fused_gap, jitter_params, op_gradient_checks, CheckOutcome,
};
use rapidnet::weights_io::{load, peek_dtype_file, save};
use rapidnet::{build_model, default_config, DType, Error, ModelConfig, Parameterized, RapidNetModel, Rng, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
    /// stdout went away (e.g. piped into `head`).
    #[error("output closed")]
    Closed,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) | Failure::Verification(_) => 2,
            Failure::Closed => 0,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidShape(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidGeometry(_)
            | Error::InvalidVariant(_)
            | Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Io(io) => io.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::Closed;
        }
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "rapidnet", version, about = "Build, analyze, verify, benchmark and run RapidNet models")]
struct Cli {
    /// Seed for weight init, inputs and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,

    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a model and save it as a checkpoint.
    Build(BuildArgs),
    /// Parameter, MAC and receptive-field report.
    Analyze(AnalyzeArgs),
    /// Reparameterization, convolution-oracle and gradient checks.
    Verify(VerifyArgs),
    /// Time one benchmark case; prints a JSON line.
    Bench(BenchArgs),
    /// Train the micro variant on the synthetic quadrant task; prints a CSV loss trace.
    TrainToy(TrainArgs),
    /// Run a checkpoint on a raw little-endian f32 tensor; prints JSON.
    Infer(InferArgs),
    /// Re-save a checkpoint, optionally reparameterized.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct ArchArgs {
    #[arg(long, default_value = "ti")]
    variant: String,
    /// Override the class count.
    #[arg(long)]
    classes: Option<usize>,
    /// mldc, sldc, conv3x3 or pointwise.
    #[arg(long)]
    mixer: Option<String>,
    /// Mixer dilations as `a,b`.
    #[arg(long, value_parser = parse_pair)]
    dilations: Option<(usize, usize)>,
    #[arg(long)]
    mixer_kernel: Option<usize>,
    #[arg(long)]
    no_cpe: bool,
    #[arg(long)]
    no_lkffn: bool,
}

impl ArchArgs {
    fn config(&self, seed: u64) -> CliResult<ModelConfig> {
        let mut cfg = default_config(&self.variant)?;
        cfg.seed = seed;
        if let Some(c) = self.classes {
            cfg.num_classes = c;
        }
        if let Some(m) = &self.mixer {
            cfg.mixer_mode = m.parse::<MixerMode>()?;
        }
        if let Some(d) = self.dilations {
            cfg.dilations = d;
        }
        if let Some(k) = self.mixer_kernel {
            cfg.mixer_kernel = k;
        }
        cfg.use_cpe &= !self.no_cpe;
        cfg.lk_ffn &= !self.no_lkffn;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, conflicts_with = "model")]
    variant: Option<String>,
    /// Analyze a saved checkpoint instead of a registered variant.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "micro")]
    variant: String,
    /// Defaults to 64 for micro and 224 otherwise.
    #[arg(long)]
    resolution: Option<usize>,
    /// Randomized conv configurations checked against the naive oracle.
    #[arg(long, default_value_t = 200)]
    oracle_cases: usize,
    #[arg(long)]
    skip_gradients: bool,
    /// Perturbs one fused kernel before comparing (negative test).
    #[arg(long, hide = true)]
    corrupt_fused: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CaseArg {
    Dilated3x3,
    Dense,
    Mldc,
    PwMixer,
    Model,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    case: CaseArg,
    #[arg(long, default_value_t = 3)]
    dilation: usize,
    /// Kernel of the dense case.
    #[arg(long, default_value_t = 7)]
    kernel: usize,
    #[arg(long, default_value = "ti")]
    variant: String,
    #[arg(long)]
    fused: bool,
    /// `N,C,H,W`; defaults to 1,32,28,28 for ops and 1,3,224,224 for models.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    trim: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// cosine or constant.
    #[arg(long, default_value = "cosine")]
    schedule: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the trained model here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw little-endian f32 values in NCHW order.
    #[arg(long)]
    input: PathBuf,
    /// `N,3,H,W`
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    fused: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("expected two comma-separated values, got {s:?}")),
    }
}

struct Ctx {
    seed: u64,
    dtype: DType,
    json: bool,
}

impl Ctx {
    fn emit(&self, json: Value, human: impl FnOnce() -> String) -> CliResult {
        let text = if self.json {
            serde_json::to_string_pretty(&json).map_err(|e| Failure::Runtime(e.to_string()))?
        } else {
            human()
        };
        writeln!(io::stdout(), "{text}")?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        dtype: cli.dtype.into(),
        json: cli.json,
    };
    let result = match &cli.command {
        Command::Build(a) => dispatch(ctx.dtype, &ctx, a, build::<f32>, build::<f64>),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Verify(a) => dispatch(ctx.dtype, &ctx, a, verify::<f32>, verify::<f64>),
        Command::Bench(a) => bench(&ctx, a),
        Command::TrainToy(a) => dispatch(ctx.dtype, &ctx, a, train::<f32>, train::<f64>),
        Command::Infer(a) => with_checkpoint_dtype(&a.model, &ctx, a, infer::<f32>, infer::<f64>),
        Command::Export(a) => with_checkpoint_dtype(&a.model, &ctx, a, export::<f32>, export::<f64>),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch<A>(
    dtype: DType,
    ctx: &Ctx,
    args: &A,
    f32_fn: fn(&Ctx, &A) -> CliResult,
    f64_fn: fn(&Ctx, &A) -> CliResult,
) -> CliResult {
    match dtype {
        DType::F32 => f32_fn(ctx, args),
        DType::F64 => f64_fn(ctx, args),
    }
}

fn with_checkpoint_dtype<A>(
    path: &Path,
    ctx: &Ctx,
    args: &A,
    f32_fn: fn(&Ctx, &A) -> CliResult,
    f64_fn: fn(&Ctx, &A) -> CliResult,
) -> CliResult {
    let dtype = peek_dtype_file(path).map_err(checkpoint_error)?;
    dispatch(dtype, ctx, args, f32_fn, f64_fn)
}

fn checkpoint_error(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::Format(_) | Error::CorruptFile(_) | Error::Version(_) | Error::Integrity(_) => {
            Failure::Runtime(e.to_string())
        }
        other => other.into(),
    }
}

fn build<T: Scalar>(ctx: &Ctx, a: &BuildArgs) -> CliResult {
    let cfg = a.arch.config(ctx.seed)?;
    let model = build_model::<T>(&cfg)?;
    save(&model, &a.out)?;
    let bytes = fs::metadata(&a.out)?.len();
    ctx.emit(
        json!({
            "path": a.out,
            "variant": cfg.name,
            "dtype": T::DTYPE.to_string(),
            "params": model.param_count(),
            "tensors": model.tensor_count(),
            "bytes": bytes,
        }),
        || {
            format!(
                "wrote {} ({} bytes): {} {}, {} params in {} tensors",
                a.out.display(),
                bytes,
                cfg.name,
                T::DTYPE,
                model.param_count(),
                model.tensor_count()
            )
        },
    )
}

fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> CliResult {
    let r = match &a.model {
        Some(path) => match peek_dtype_file(path).map_err(checkpoint_error)? {
            DType::F32 => report_for_model(&load::<f32>(path).map_err(checkpoint_error)?, a.resolution)?,
            DType::F64 => report_for_model(&load::<f64>(path).map_err(checkpoint_error)?, a.resolution)?,
        },
        None => report(&default_config(a.variant.as_deref().unwrap_or("ti"))?, a.resolution)?,
    };
    let value = serde_json::to_value(&r).map_err(|e| Failure::Runtime(e.to_string()))?;
    ctx.emit(value, || render_report(&r))
}

fn render_report(r: &AnalysisReport) -> String {
    let mut s = format!(
        "{:<40} {:>10} {:>14}  {:<18} {:>3} {:>3} {:>4}\n",
        "layer", "params", "MACs", "output", "k", "d", "trf"
    );
    for l in &r.layers {
        s += &format!(
            "{:<40} {:>10} {:>14}  {:<18} {:>3} {:>3} {:>4}\n",
            l.name,
            l.params,
            l.macs,
            format!("{:?}", l.out_shape),
            l.k,
            l.d,
            l.trf
        );
    }
    s += &format!(
        "\n{} @ {}x{}: {:.3}M params, {:.3} GMACs, composite receptive field {}",
        r.variant,
        r.resolution,
        r.resolution,
        r.total_params as f64 / 1e6,
        r.total_gmacs,
        r.composite_rf
    );
    s
}

fn verify<T: Scalar>(ctx: &Ctx, a: &VerifyArgs) -> CliResult {
    let cfg = ModelConfig {
        seed: ctx.seed,
        ..default_config(&a.variant)?
    };
    let res = a.resolution.unwrap_or(if a.variant == "micro" { 64 } else { 224 });
    let tolerance = match T::DTYPE {
        DType::F32 => 1e-4,
        DType::F64 => 1e-8,
    };
    let mut model = build_model::<T>(&cfg)?;
    jitter_params(&mut model, &mut Rng::new(ctx.seed ^ 0x1));
    model.calibrate_bn(&Tensor::randn(&[4, 3, res, res], &mut Rng::new(ctx.seed ^ 0x2), 0.0, 1.0)?)?;
    let (mut fused, _) = reparameterize_model(&model)?;
    if a.corrupt_fused {
        fused.visit_params_mut("", &mut |name, t, _| {
            if name == "stem.conv1.weight" {
                t.data_mut()[0] = t.data()[0] + T::lit(0.5);
            }
        });
    }
    let mut checks = vec![fused_gap(&model, &fused, res, ctx.seed ^ 0x3, tolerance)?];
    checks.extend(conv_oracle_checks(a.oracle_cases, ctx.seed)?);
    if !a.skip_gradients {
        checks.extend(op_gradient_checks(ctx.seed)?);
        checks.extend(block_gradient_checks(ctx.seed)?);
    }
    let failed: Vec<&CheckOutcome> = checks.iter().filter(|c| !c.passed).collect();
    let groups = summarize(&checks);
    ctx.emit(
        json!({
            "variant": cfg.name,
            "dtype": T::DTYPE.to_string(),
            "resolution": res,
            "passed": failed.is_empty(),
            "groups": groups.iter().map(|(g, n, worst, ok)| json!({
                "group": g, "checks": n, "worst_error": worst, "passed": ok,
            })).collect::<Vec<_>>(),
            "failures": failed,
        }),
        || {
            let mut s = String::new();
            for (g, n, worst, ok) in &groups {
                s += &format!("{:<22} {:>4} checks  worst {:.3e}  {}\n", g, n, worst, if *ok { "ok" } else { "FAILED" });
            }
            for c in &failed {
                s += &format!("failed: {} (error {:.3e}, tolerance {:.1e})\n", c.name, c.error, c.tolerance);
            }
            s += if failed.is_empty() { "all checks passed" } else { "verification FAILED" };
            s
        },
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} of {} checks failed", failed.len(), checks.len())))
    }
}

/// Groups checks by the leading segment of their name.
fn summarize(checks: &[CheckOutcome]) -> Vec<(String, usize, f64, bool)> {
    let mut groups: Vec<(String, usize, f64, bool)> = Vec::new();
    for c in checks {
        let key = c.name.split('/').next().unwrap_or("").to_string();
        let error = if c.error.is_nan() { f64::INFINITY } else { c.error };
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1 += 1;
                g.2 = g.2.max(error);
                g.3 &= c.passed;
            }
            None => groups.push((key, 1, error, c.passed)),
        }
    }
    groups
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> CliResult {
    if ctx.dtype != DType::F32 {
        return Err(Failure::Usage("benchmarks run in f32 only".into()));
    }
    let (case, default_shape) = match a.case {
        CaseArg::Dilated3x3 => (BenchCase::Dilated3x3 { dilation: a.dilation }, vec![1, 32, 28, 28]),
        CaseArg::Dense => (BenchCase::DenseKxK { kernel: a.kernel }, vec![1, 32, 28, 28]),
        CaseArg::Mldc => (BenchCase::MldcBlock, vec![1, 32, 28, 28]),
        CaseArg::PwMixer => (BenchCase::PwMixer, vec![1, 32, 28, 28]),
        CaseArg::Model => (
            BenchCase::Model {
                variant: a.variant.clone(),
                fused: a.fused,
            },
            vec![1, 3, 224, 224],
        ),
    };
    let protocol = BenchProtocol {
        rounds: a.rounds,
        iters_per_round: a.iters,
        trim: a.trim,
        warmup: a.warmup,
        threads: a.threads,
    };
    protocol.validate()?;
    let shape = a.shape.clone().unwrap_or(default_shape);
    let r = bench_case(&case, &shape, &protocol, ctx.seed)?;
    let line = serde_json::to_string(&r).map_err(|e| Failure::Runtime(e.to_string()))?;
    writeln!(io::stdout(), "{line}")?;
    if !ctx.json {
        eprintln!(
            "{}: trimmed mean {:.3} ms, median {:.3} ms, min {:.3} ms per round of {} ({} MACs per call)",
            r.label,
            r.trimmed_mean_ns / 1e6,
            r.median_ns / 1e6,
            r.min_ns / 1e6,
            a.iters,
            r.macs
        );
    }
    Ok(())
}

fn train<T: Scalar>(ctx: &Ctx, a: &TrainArgs) -> CliResult {
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        schedule: a.schedule.parse::<Schedule>()?,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        seed: ctx.seed,
    };
    let data = SyntheticDataset::<T>::new(a.samples, a.size, ctx.seed)?;
    let out = train_toy(&toy_config(ctx.seed), &data, &opts)?;
    let acc = accuracy(&out.model, &data)?;
    if let Some(path) = &a.checkpoint {
        save(&out.model, path)?;
    }
    let first = out.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = out.tail_loss(10);
    match &a.out {
        Some(path) => write_csv(&out.trace, io::BufWriter::new(fs::File::create(path)?))?,
        None if !ctx.json => write_csv(&out.trace, io::stdout().lock())?,
        None => {}
    }
    let summary = format!(
        "{} steps: loss {first:.4} -> {last:.4} (mean of last 10), train accuracy {:.1}%",
        a.steps,
        acc * 100.0
    );
    if ctx.json {
        ctx.emit(
            json!({
                "steps": a.steps,
                "first_loss": first,
                "final_loss": last,
                "accuracy": acc,
                "trace": if a.out.is_some() { Value::Null } else { json!(out.trace) },
            }),
            String::new,
        )
    } else if a.out.is_some() {
        ctx.emit(Value::Null, || summary)
    } else {
        eprintln!("{summary}");
        Ok(())
    }
}

fn read_input<T: Scalar>(path: &Path, shape: &[usize]) -> CliResult<Tensor<T>> {
    let [_, 3, _, _] = shape else {
        return Err(Failure::Usage(format!("--shape must be N,3,H,W, got {shape:?}")));
    };
    let bytes = fs::read(path)?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Failure::Usage(format!(
            "input has {} bytes, shape {shape:?} needs {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}

fn infer<T: Scalar>(_ctx: &Ctx, a: &InferArgs) -> CliResult {
    let model: RapidNetModel<T> = load(&a.model).map_err(checkpoint_error)?;
    let x = read_input::<T>(&a.input, &a.shape)?;
    let logits = model.infer(&x)?;
    let (n, classes) = logits.dims2()?;
    let rows: Vec<Vec<f64>> = logits
        .data()
        .chunks(classes)
        .map(|row| row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect();
    let top: Vec<Value> = rows
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..classes).collect();
            idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            idx.iter()
                .take(a.top_k)
                .map(|&i| json!({"class": i, "logit": row[i]}))
                .collect()
        })
        .collect();
    let out = json!({"shape": [n, classes], "top_k": top, "logits": rows});
    writeln!(io::stdout(), "{out}")?;
    Ok(())
}

fn export<T: Scalar>(ctx: &Ctx, a: &ExportArgs) -> CliResult {
    let model: RapidNetModel<T> = load(&a.model).map_err(checkpoint_error)?;
    let (out, fusion) = if a.fused {
        let (fused, r) = reparameterize_model(&model)?;
        (fused, Some(r))
    } else {
        (model, None)
    };
    save(&out, &a.out)?;
    ctx.emit(
        json!({
            "path": a.out,
            "fused": out.config.fused,
            "bn_layers": out.bn_count(),
            "tensors": out.tensor_count(),
            "fusion": fusion.as_ref().map(|r| json!({
                "fused_skips": r.fused_skips,
                "folded_bns": r.folded_bns,
                "max_abs_logit_diff": r.max_abs_logit_diff,
            })),
        }),
        || {
            let mut s = format!("wrote {}: {} tensors, {} BN layers", a.out.display(), out.tensor_count(), out.bn_count());
            if let Some(r) = &fusion {
                s += &format!(
                    "\nfused {} skips, folded {} BNs, max logit gap {:.3e}",
                    r.fused_skips, r.folded_bns, r.max_abs_logit_diff
                );
            }
            s
        },
    )
}
