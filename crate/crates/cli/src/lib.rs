//! Command-line front end. `run` parses arguments, dispatches, and maps the
//! outcome to an exit code: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use unfoldcs::checkpoint::Checkpoint;
use unfoldcs::evaluation::benchmark::{checkpoint_file_name, evaluate_image};
use unfoldcs::evaluation::{run_benchmark, BenchmarkOptions};
use unfoldcs::imaging::{load_luma, save_png};
use unfoldcs::network::Variant;
use unfoldcs::selector::ModulationInput;
use unfoldcs::sensing::{generate_phi, BLOCK_PIXELS};
use unfoldcs::training::data::load_image_dir;
use unfoldcs::training::{finetune_deblock, finetune_noise, train, EpochLog, TrainConfig};
use unfoldcs_service::{AppState, ModelRegistry, DEFAULT_MAX_PIXELS};

/// Name of the configuration snapshot written next to every run's outputs.
pub const SNAPSHOT_FILE: &str = "resolved_config.json";
/// Name of the per-epoch training log.
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<unfoldcs::Error> for CliError {
    fn from(e: unfoldcs::Error) -> Self {
        match e {
            unfoldcs::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "unfoldcs", version, about = "Block compressive-sensing reconstruction with dynamic unfolded networks")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory receiving checkpoints, logs and the config snapshot.
    #[arg(long, default_value = "runs")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetunePhase {
    Deblock,
    Noise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Main training phase from scratch.
    Train(ConfigArgs),
    /// Continue a trained checkpoint (deblocking or noise robustness).
    Finetune {
        #[arg(long, value_enum)]
        phase: FinetunePhase,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Benchmark checkpoints on a directory of images.
    Eval {
        /// Checkpoint file, or directory with one file per ratio.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ratios in percent (or fractions), comma separated.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        /// Evaluate every trained multiplier (the default without --mu).
        #[arg(long, conflicts_with = "mu")]
        mu_sweep: bool,
        /// Multipliers to evaluate, comma separated.
        #[arg(long, value_delimiter = ',')]
        mu: Vec<f64>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "eval")]
        output_dir: PathBuf,
    },
    /// Sample and reconstruct a single image.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, conflicts_with = "encoding")]
        mu: Option<f64>,
        /// Bit string such as `010100`.
        #[arg(long)]
        encoding: Option<String>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_MAX_PIXELS)]
        max_pixels: usize,
    },
    /// Write a sampling operator (raw little-endian f32 plus JSON sidecar).
    ExportMatrix {
        /// Ratio in percent or as a fraction.
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Entry point used by the binary.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Finetune { phase, ckpt, config } => cmd_finetune(phase, &ckpt, &config),
        Command::Eval {
            ckpt,
            data,
            ratios,
            mu_sweep,
            mu,
            stride,
            output_dir,
        } => cmd_eval(ckpt, data, ratios, mu_sweep, mu, stride, &output_dir),
        Command::Reconstruct {
            ckpt,
            input,
            output,
            mu,
            encoding,
            stride,
        } => cmd_reconstruct(&ckpt, &input, &output, mu, encoding, stride),
        Command::Serve {
            ckpt_dir,
            port,
            host,
            max_pixels,
        } => cmd_serve(&ckpt_dir, &host, port, max_pixels),
        Command::ExportMatrix {
            ratio,
            seed,
            output,
        } => {
            let phi = generate_phi(as_fraction(ratio), BLOCK_PIXELS, seed)?;
            phi.save(&output)?;
            log::info!("wrote {}x{} operator to {}", phi.m(), phi.n(), output.display());
            Ok(())
        }
    }
}

/// Accepts `30` or `0.3` for thirty percent.
pub fn as_fraction(ratio: f64) -> f64 {
    if ratio > 1.0 {
        ratio / 100.0
    } else {
        ratio
    }
}

/// Parses `--set` arguments. A key given twice with different values is a
/// conflict; values are JSON, falling back to a plain string.
pub fn parse_overrides(items: &[String]) -> Result<BTreeMap<String, Value>, CliError> {
    let mut out = BTreeMap::new();
    for item in items {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {item:?} is not KEY=VALUE")))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Usage(format!("override {item:?} has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if let Some(prev) = out.get(&key) {
            if prev != &value {
                return Err(CliError::Usage(format!(
                    "conflicting overrides for {key}: {prev} and {value}"
                )));
            }
        }
        out.insert(key, value);
    }
    Ok(out)
}

/// Reads the JSON config (or starts from defaults / `base`), applies the
/// overrides and validates the result.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    base: Option<&TrainConfig>,
) -> Result<TrainConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!(
                    "{}: malformed JSON at line {}, column {}: {e}",
                    p.display(),
                    e.line(),
                    e.column()
                ))
            })?;
            if !doc.is_object() {
                return Err(CliError::Usage(format!("{}: config must be a JSON object", p.display())));
            }
            doc
        }
        None => serde_json::to_value(base.cloned().unwrap_or_default()).expect("config serialises"),
    };
    let map = doc.as_object_mut().expect("checked object");
    for (k, v) in parse_overrides(overrides)? {
        map.insert(k, v);
    }
    let config: TrainConfig = serde_json::from_value(doc).map_err(|e| {
        let origin = path.map_or("configuration".to_string(), |p| p.display().to_string());
        CliError::Usage(format!("{origin}: {e}"))
    })?;
    config.validate()?;
    Ok(config)
}

fn write_snapshot(dir: &Path, value: &impl Serialize) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    let path = dir.join(SNAPSHOT_FILE);
    let text = serde_json::to_string_pretty(value).expect("snapshot serialises");
    fs::write(&path, text + "\n").map_err(runtime)?;
    Ok(path)
}

fn training_images(config: &TrainConfig) -> Result<Vec<ndarray::Array2<f64>>, CliError> {
    let dir = config.resolve_data_dir()?;
    let images: Vec<_> = load_image_dir(&dir)?.into_iter().map(|(_, img)| img).collect();
    if images.is_empty() {
        return Err(CliError::Usage(format!("no decodable images in {}", dir.display())));
    }
    Ok(images)
}

struct JsonlLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl JsonlLog {
    fn create(dir: &Path) -> Result<Self, CliError> {
        let file = File::create(dir.join(LOG_FILE)).map_err(runtime)?;
        Ok(JsonlLog {
            out: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, log: &EpochLog) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(log).expect("log serialises");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }

    fn finish(self) -> Result<(), CliError> {
        self.error.map_or(Ok(()), |e| Err(runtime(e)))
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<(), CliError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, None)?;
    write_snapshot(&args.output_dir, &config)?;
    let images = training_images(&config)?;
    let mut log = JsonlLog::create(&args.output_dir)?;
    let ckpt = train(&config, images, &mut |l| log.record(l))?;
    log.finish()?;
    let path = args.output_dir.join(checkpoint_file_name(config.ratio));
    ckpt.save(&path)?;
    log::info!("saved {}", path.display());
    Ok(())
}

fn cmd_finetune(phase: FinetunePhase, ckpt_path: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let embedded: Option<TrainConfig> = ckpt
        .meta
        .train_config
        .clone()
        .and_then(|v| serde_json::from_value(v).ok());
    let config = resolve_config(args.config.as_deref(), &args.overrides, embedded.as_ref())?;
    write_snapshot(&args.output_dir, &config)?;
    let images = training_images(&config)?;
    let mut log = JsonlLog::create(&args.output_dir)?;
    let ratio = ckpt.meta.ratio;
    let tuned = match phase {
        FinetunePhase::Deblock => finetune_deblock(ckpt, &config, images, &mut |l| log.record(l))?,
        FinetunePhase::Noise => finetune_noise(ckpt, &config, images, &mut |l| log.record(l))?,
    };
    log.finish()?;
    let path = args.output_dir.join(checkpoint_file_name(ratio));
    tuned.save(&path)?;
    log::info!("saved {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    ratios: &'a [f64],
    mu_values: &'a [f64],
    stride: Option<usize>,
}

fn cmd_eval(
    ckpt: PathBuf,
    data: PathBuf,
    ratios: Vec<f64>,
    mu_sweep: bool,
    mu: Vec<f64>,
    stride: Option<usize>,
    output_dir: &Path,
) -> Result<(), CliError> {
    if !data.is_dir() {
        return Err(CliError::Usage(format!("data directory {} not found", data.display())));
    }
    if !ckpt.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    // an empty list means every multiplier the model was trained with
    let mu_values = if mu_sweep { Vec::new() } else { mu };
    let options = BenchmarkOptions {
        checkpoint: ckpt,
        dataset: data,
        ratios: ratios.into_iter().map(as_fraction).collect(),
        mu_values,
        stride,
    };
    write_snapshot(
        output_dir,
        &EvalSnapshot {
            ckpt: &options.checkpoint,
            data: &options.dataset,
            ratios: &options.ratios,
            mu_values: &options.mu_values,
            stride: options.stride,
        },
    )?;
    let report = run_benchmark(&options)?;
    let (csv, json) = report.write(output_dir)?;
    for row in report.aggregates() {
        println!(
            "{} ratio {} mu {}: {:.2} dB / {:.4}, N_AM ({:.1}, {:.1}), {:.3} GFLOPs",
            row.dataset,
            row.ratio,
            row.mu.map_or("-".to_string(), |m| m.to_string()),
            row.psnr_db,
            row.ssim,
            row.n_am_g,
            row.n_am_p,
            row.dynamic_gflops
        );
    }
    for absent in &report.absent {
        println!("ratio {}: no checkpoint at {}", absent.ratio, absent.path.display());
    }
    log::info!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

#[derive(Serialize)]
struct ReconstructSummary {
    output: PathBuf,
    encoding: String,
    mu: Option<f64>,
    initial_psnr_db: f64,
    psnr_db: f64,
    ssim: f64,
    n_am: [usize; 2],
    path_mask: Vec<[bool; 2]>,
    dynamic_gflops: f64,
    static_gflops: f64,
}

fn cmd_reconstruct(
    ckpt_path: &Path,
    input: &Path,
    output: &Path,
    mu: Option<f64>,
    encoding: Option<String>,
    stride: Option<usize>,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let meta = &ckpt.meta;
    let modulation = match (mu, encoding, meta.variant) {
        (_, _, Variant::DpDun) => ModulationInput::zeros(0),
        (Some(mu), None, _) => ModulationInput::preset_in(mu, &meta.mu_set)
            .map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(bits), _) => {
            let m = ModulationInput::from_bitstring(&bits).map_err(|e| CliError::Usage(e.to_string()))?;
            if m.bits().len() != meta.encoding_len {
                return Err(CliError::Usage(format!(
                    "encoding has {} bits, the model expects {}",
                    m.bits().len(),
                    meta.encoding_len
                )));
            }
            m
        }
        (None, None, _) => ModulationInput::preset_in(meta.mu_set[0], &meta.mu_set)?,
        (Some(_), Some(_), _) => unreachable!("clap rejects --mu with --encoding"),
    };
    let image = load_luma(input).map_err(|e| CliError::Usage(e.to_string()))?;
    let phi = meta.phi()?;
    let score = evaluate_image(
        &ckpt.network,
        &phi,
        &image,
        &modulation,
        stride.unwrap_or(meta.eval_stride),
    )?;
    save_png(&score.reconstruction.mapv(|v| v.clamp(0.0, 1.0)), output)?;
    let summary = ReconstructSummary {
        output: output.to_path_buf(),
        encoding: modulation.bitstring(),
        mu: modulation.mu(),
        initial_psnr_db: score.initial_psnr_db,
        psnr_db: score.psnr_db,
        ssim: score.ssim,
        n_am: [score.trace.n_am_g, score.trace.n_am_p],
        path_mask: score.trace.path_mask(),
        dynamic_gflops: score.trace.dynamic_flops / 1e9,
        static_gflops: score.trace.static_flops / 1e9,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    let sidecar = output.with_extension("json");
    fs::write(&sidecar, &text).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn cmd_serve(dir: &Path, host: &str, port: u16, max_pixels: usize) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
    let registry = ModelRegistry::load_dir(dir).map_err(runtime)?;
    let state = Arc::new(AppState {
        registry,
        max_pixels,
    });
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(unfoldcs_service::serve(state, addr)).map_err(runtime)
}
