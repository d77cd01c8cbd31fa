//! `mcan`: count, run, train and evaluate multi-connected channel attention
//! super-resolution networks.

mod config;

use std::fs::File;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mcan_core::analysis;
use mcan_core::arch::graph::GraphError;
use mcan_core::data::{self, EvalOptions, ImageError};
use mcan_core::format::{self, FormatError};
use mcan_core::train::{self, AdamState, StepRecord, TrainObserver, TrainingSet};
use mcan_core::{Model, ModelConfig, Preset, SigmoidVariant, TensorError, WeightStore};

use config::RunFile;

/// Process exit codes.
mod exit {
    pub const IO: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const FORMAT: u8 = 3;
    pub const SHAPE: u8 = 4;
    pub const NUMERIC: u8 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "mcan", version, about = "Channel attention super-resolution on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print parameters, mult-adds and sigmoid count of a model.
    Count(CountArgs),
    /// Super-resolve one PNG.
    Upscale(UpscaleArgs),
    /// Train from a TOML run file on a directory of PNGs.
    Train(TrainArgs),
    /// PSNR/SSIM of a model over a dataset directory.
    Eval(EvalArgs),
    /// List the entries of a weight file and verify its checksum.
    InspectWeights(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Records,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse::<Preset>().map_err(|_| {
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown model `{s}`; expected one of {}", names.join(", "))
    })
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s.trim_start_matches(['x', 'X']).parse::<usize>() {
        Ok(v) if [2, 3, 4].contains(&v) => Ok(v),
        _ => Err(format!("scale must be 2, 3 or 4, got `{s}`")),
    }
}

/// `WIDTHxHEIGHT`, returned as `(height, width)`.
fn parse_hr(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    match (w.parse::<usize>(), h.parse::<usize>()) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => Ok((h, w)),
        _ => Err(format!("expected WIDTHxHEIGHT, got `{s}`")),
    }
}

/// Which network to build.
#[derive(Debug, Args)]
struct ModelArgs {
    /// Preset name.
    #[arg(long, value_parser = parse_preset, conflicts_with = "config")]
    model: Option<Preset>,
    /// TOML run file whose `[model]` section describes the network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Upscaling factor; overrides the run file.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    /// Use x/(1+|x|) in every attention gate.
    #[arg(long, conflicts_with = "standard_sigmoid")]
    fast_sigmoid: bool,
    /// Use the logistic sigmoid in every attention gate.
    #[arg(long)]
    standard_sigmoid: bool,
    /// Feed each block only from its predecessor instead of the matrix links.
    #[arg(long)]
    no_mim_connections: bool,
    /// Replace edge feature fusion by the last cell's output.
    #[arg(long)]
    no_eff: bool,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunFile::load(path)?.model_config()?,
            None => ModelConfig::preset(self.model.unwrap_or(Preset::Mcan), 2)?,
        };
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        if self.fast_sigmoid {
            cfg.sigmoid = SigmoidVariant::Fast;
        }
        if self.standard_sigmoid {
            cfg.sigmoid = SigmoidVariant::Standard;
        }
        if self.no_mim_connections {
            cfg.mim_connections = false;
        }
        if self.no_eff {
            cfg.eff_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn label(&self) -> String {
        match (&self.model, &self.config) {
            (Some(p), _) => p.name().to_string(),
            (None, Some(path)) => path.display().to_string(),
            (None, None) => Preset::Mcan.name().to_string(),
        }
    }
}

#[derive(Debug, Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output resolution the mult-adds are normalized to.
    #[arg(long, value_parser = parse_hr, default_value = "1280x720")]
    hr: (usize, usize),
    /// Also list every convolution.
    #[arg(long)]
    per_layer: bool,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct UpscaleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weight file matching the model.
    #[arg(long)]
    weights: PathBuf,
    /// Low-resolution PNG
    #[arg(long)]
    input: PathBuf,
    /// Where to write the upscaled PNG
    #[arg(long)]
    output: PathBuf,
    /// Average over the eight flips and rotations of the input.
    #[arg(long)]
    self_ensemble: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run file with `[model]` and `[train]` sections.
    #[arg(long)]
    config: PathBuf,
    /// Directory of HR training PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory: `HR/` with optional `LR/` or `LR/x{s}/`, or a flat
    /// directory of HR images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    self_ensemble: bool,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
    /// Also check names and shapes against this preset.
    #[arg(long, value_parser = parse_preset)]
    model: Option<Preset>,
}

fn cmd_count(args: &CountArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let model = Model::zeroed(cfg)?;
    let report = analysis::report(&model, args.hr)?.with_model_name(args.model.label());
    match args.format {
        OutputFormat::Table => emit(&report.to_table(args.per_layer)),
        OutputFormat::Records => {
            let mut r = report;
            if !args.per_layer {
                r.per_layer.clear();
            }
            emit(&r.to_records())
        }
    }
}

fn load_model(args: &ModelArgs, weights: &Path) -> Result<Model> {
    let mut model = Model::zeroed(args.resolve()?)?;
    format::load_weights(weights, &mut model.weights)
        .with_context(|| format!("loading {}", weights.display()))?;
    Ok(model)
}

fn cmd_upscale(args: &UpscaleArgs) -> Result<()> {
    let model = load_model(&args.model, &args.weights)?;
    let image = data::load_png(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let lr = data::to_tensor::<f32>(&image);
    let scale = model.config.scale;
    let sr = if args.self_ensemble {
        data::self_ensemble(&model, &lr, scale)?
    } else {
        model.forward_at(&lr, scale)?
    };
    let out = data::to_image(&sr)?;
    data::save_png(&out, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    info!(
        "{}x{} -> {}x{} written to {}",
        image.width(),
        image.height(),
        out.width(),
        out.height(),
        args.output.display()
    );
    Ok(())
}

/// Streams the loss log and writes periodic checkpoints.
struct CliObserver {
    log: BufWriter<File>,
    checkpoint: PathBuf,
    io_error: Option<std::io::Error>,
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, r: &StepRecord) {
        if self.io_error.is_none() {
            if let Err(e) = writeln!(self.log, "{},{},{}", r.step, r.loss, r.lr) {
                self.io_error = Some(e);
            }
        }
        if (r.step + 1) % 100 == 0 {
            info!("step {} loss {:.6} lr {:.3e}", r.step + 1, r.loss, r.lr);
        }
    }

    fn on_checkpoint(&mut self, step: u64, weights: &WeightStore, state: &AdamState) -> mcan_core::Result<()> {
        format::save_weights(&self.checkpoint, weights, Some(state))?;
        info!("checkpoint at step {step} written to {}", self.checkpoint.display());
        Ok(())
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = RunFile::load(&args.config)?;
    let model_cfg = run.model_config()?;
    let train_cfg = run.train_config()?;
    let mut model = Model::build(model_cfg, train_cfg.seed)?;
    let state = match &args.resume {
        Some(path) => {
            let st = format::load_weights(path, &mut model.weights)
                .with_context(|| format!("resuming from {}", path.display()))?;
            if st.is_none() {
                warn!("{} has no optimizer state; starting Adam afresh", path.display());
            }
            st
        }
        None => None,
    };
    let set = TrainingSet::load_dir(&args.data, &train_cfg.scales, train_cfg.patch)
        .with_context(|| format!("loading training images from {}", args.data.display()))?;

    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "step,loss,lr")?;
    let mut observer = CliObserver {
        log,
        checkpoint: args.out.clone(),
        io_error: None,
    };
    info!(
        "training {} parameters for {} steps",
        model.weights.scalar_count(),
        train_cfg.max_steps
    );
    let result = train::train_loop(&mut model, &set, &train_cfg, state, &mut observer);
    observer.log.flush()?;
    if let Some(e) = observer.io_error.take() {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    match result {
        Ok(outcome) => {
            format::save_weights(&args.out, &model.weights, Some(&outcome.state))?;
            info!("checkpoint written to {}", args.out.display());
            Ok(())
        }
        Err(e @ mcan_core::Error::NonFinite { .. }) => {
            let failed = suffixed(&args.out, ".failed");
            format::save_weights(&failed, &model.weights, None)?;
            Err(anyhow!(e).context(format!(
                "training aborted; last finite weights saved to {}",
                failed.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model, &args.weights)?;
    let opts = EvalOptions {
        scale: model.config.scale,
        ensemble: args.self_ensemble,
    };
    let report = data::evaluate(&model, &args.data, opts)?;
    for s in &report.skipped {
        warn!("skipped {}: {}", s.name, s.reason);
    }
    match args.format {
        OutputFormat::Table => emit(&report.to_table()),
        OutputFormat::Records => emit(&report.to_records()),
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let file = format::read_weight_file(&args.path)?;
    let width = file.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(4);
    let mut text = String::new();
    let mut total = 0usize;
    for (name, t) in &file.entries {
        let [a, b, c, d] = t.shape();
        let _ = writeln!(text, "{name:<width$}  {a}x{b}x{c}x{d}  {}", t.len());
        total += t.len();
    }
    let _ = writeln!(text, "entries {}  scalars {}", file.entries.len(), total);
    if let Some(st) = &file.optimizer {
        let _ = writeln!(text, "optimizer state at step {}", st.step);
    }
    if let Some(p) = args.model {
        let mut model = Model::zeroed(ModelConfig::preset(p, 2)?)?;
        format::apply_entries(&mut model.weights, file.entries)?;
        let _ = writeln!(text, "matches {}", p.name());
    }
    emit(&text)
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Maps the first recognized error in the chain to an exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mcan_core::Error>() {
            match e {
                mcan_core::Error::Format(f) => return format_code(f),
                mcan_core::Error::Tensor(_) => return exit::SHAPE,
                mcan_core::Error::Graph(GraphError::Tensor { .. } | GraphError::SeedChannels { .. }) => {
                    return exit::SHAPE
                }
                mcan_core::Error::NonFinite { .. } => return exit::NUMERIC,
                mcan_core::Error::Config(_) => return exit::USAGE,
                mcan_core::Error::Io { .. } | mcan_core::Error::Image(_) => return exit::IO,
                _ => {}
            }
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            return format_code(f);
        }
        if cause.downcast_ref::<TensorError>().is_some() {
            return exit::SHAPE;
        }
        if cause.downcast_ref::<ImageError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return exit::USAGE;
        }
    }
    exit::IO
}

fn format_code(e: &FormatError) -> u8 {
    if e.is_corruption() {
        exit::FORMAT
    } else {
        exit::SHAPE
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MCAN_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!(UsageError(format!("MCAN_THREADS must be a positive integer, got `{v}`"))),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Count(a) => cmd_count(a),
        Command::Upscale(a) => cmd_upscale(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectWeights(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.chain().any(|c| c.is::<UsageError>()) {
                exit::USAGE
            } else {
                exit_code(&e)
            };
            ExitCode::from(code)
        }
    }
}
