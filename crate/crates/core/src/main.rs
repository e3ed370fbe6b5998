use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use zshdr::error::{Error, Result};
use zshdr::exposure::{simulate_sdr_sequence, AutoExposureState, HdrFrame, SdrFrame};
use zshdr::fixture::FixtureConfig;
use zshdr::fusion::{
    expand_stack, expand_video, fuse_stack, ConstantResidual, FusionConfig, ResidualPredictor,
    StackOptions,
};
use zshdr::io::{
    format_exposure_sidecar, read_exposure_sidecar, read_hdr_sequence, read_sdr_sequence,
    write_hdr_sequence, write_png, write_sdr_sequence, FrameFormat, FrameSequenceSpec,
};
use zshdr::metrics::{score_frames, scores_to_csv, DisplayModel, PuCurve};
use zshdr::optim::AdamConfig;
use zshdr::training::{train_video_with, TrainConfig, TrainReport};
use zshdr::unet::{load_weights, save_weights, ModelConfig, ModelWeights};

const SUBCOMMANDS: [&str; 5] = ["simulate-sdr", "train", "expand", "evaluate", "fixture-gen"];

/// Zero-shot inverse tone mapping of SDR video.
///
/// Log verbosity is read from ZSHDR_LOG (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "zshdr", version)]
struct Cli {
    /// Cap on worker threads for per-frame parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// key=value file of default flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an HDR sequence to auto-exposed 8-bit PNG frames.
    SimulateSdr(SimulateArgs),
    /// Train a residual network on one SDR video.
    Train(TrainArgs),
    /// Expand SDR frames to HDR with a trained network.
    Expand(ExpandArgs),
    /// Score predicted HDR frames against a reference with PU-PSNR and PU-SSIM.
    Evaluate(EvaluateArgs),
    /// Write the synthetic moving-disk HDR sequence.
    FixtureGen(FixtureArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    input_pattern: String,
    #[arg(long, default_value = "pfm")]
    input_format: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    output_pattern: String,
    /// Temporal smoothing of the exposure value.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Per-frame exposure CSV; defaults to OUTPUT/exposures.csv.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    pattern: String,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long)]
    weights_out: PathBuf,
    /// One tab-separated line per epoch: epoch, loss, residual, image, seconds.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    max_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_cos: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many epochs without a 1% improvement; 0 disables.
    #[arg(long, default_value_t = 0)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    /// Save weights (with optimizer moments) every N epochs to WEIGHTS_OUT.ckpt.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Include Adam moments in the final weights file.
    #[arg(long)]
    save_moments: bool,
}

#[derive(Args, Debug)]
struct ExpandArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    pattern: String,
    /// Not needed when the stack is just `0`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    output_pattern: String,
    #[arg(long, default_value = "pfm")]
    out_format: String,
    /// Exposure offsets in stops, consecutive multiples of 2 around 0.
    #[arg(long, default_value = "-4,-2,0,2,4", allow_hyphen_values = true)]
    stack: String,
    /// Leave brighter predictions unclamped while chaining.
    #[arg(long)]
    no_clamp_up: bool,
    #[arg(long, default_value_t = 1e-4)]
    weight_floor: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    /// Also write every stack exposure as PNG into this directory.
    #[arg(long)]
    dump_stack: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    pred_pattern: String,
    #[arg(long, default_value = "pfm")]
    pred_format: String,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    ref_pattern: String,
    #[arg(long, default_value = "pfm")]
    ref_format: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1400.0)]
    peak_luminance: f64,
    #[arg(long, default_value_t = 0.02)]
    black_level: f64,
    #[arg(long, default_value_t = 99.9)]
    scale_percentile: f64,
    /// Exposure CSV from simulate-sdr; predictions are divided by 2^f per frame.
    #[arg(long)]
    exposure_sidecar: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "frame_%06d")]
    pattern: String,
    #[arg(long, default_value = "pfm")]
    format: String,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    disk_radiance: f64,
    #[arg(long, default_value_t = 9.5)]
    disk_radius: f64,
    #[arg(long, default_value_t = 5.0)]
    ramp_stops: f64,
    #[arg(long, default_value_t = 2.0)]
    ramp_shape: f64,
    #[arg(long, default_value_t = 0.05)]
    background_level: f64,
    #[arg(long, default_value_t = 1.5)]
    texture_stops: f64,
}

/// Splices `--key value` pairs from the config file in front of the
/// subcommand's own flags so later (explicit) flags win.
fn apply_config_file(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, at, format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key.is_empty() || key == "config" {
            return Err(Error::format(&path, at, format!("invalid key '{key}'")));
        }
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => injected.push(format!("--{key}={value}")),
        }
    }
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn parse_format(s: &str) -> Result<FrameFormat> {
    FrameFormat::parse(s)
}

fn hdr_format(s: &str) -> Result<FrameFormat> {
    match parse_format(s)? {
        FrameFormat::Png8 => Err(Error::InvalidConfig("HDR frames must be pfm or hdr".into())),
        f => Ok(f),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "input directory {} does not exist",
            path.display()
        )))
    }
}

fn parse_offsets(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidConfig(format!("bad stack offset '{t}'")))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    AutoExposureState::new(args.alpha)?;
    let input = FrameSequenceSpec::new(
        &args.input,
        &args.input_pattern,
        hdr_format(&args.input_format)?,
        1.0,
    )?;
    let output =
        FrameSequenceSpec::new(&args.output, &args.output_pattern, FrameFormat::Png8, 1.0)?;
    require_dir(&args.input)?;
    let hdr = read_hdr_sequence(&input)?;
    let (sdr, exposures) = simulate_sdr_sequence(&hdr.frames, args.alpha)?;
    write_sdr_sequence(&sdr, &output)?;
    let sidecar = args
        .sidecar
        .unwrap_or_else(|| args.output.join("exposures.csv"));
    write_text(&sidecar, &format_exposure_sidecar(&exposures))?;
    log::info!("wrote {} frames to {}", sdr.len(), args.output.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        max_epochs: args.max_epochs,
        adam: AdamConfig {
            learning_rate: args.lr,
            beta1: args.beta1,
            beta2: args.beta2,
            epsilon: args.adam_eps,
        },
        lambda_cos: args.lambda_cos,
        seed: args.seed,
        early_stop_patience: args.early_stop_patience,
        model: ModelConfig {
            base_channels: args.base_channels,
        },
    };
    config.validate()?;
    let spec = FrameSequenceSpec::new(&args.input, &args.pattern, FrameFormat::Png8, args.fps)?;
    require_dir(&args.input)?;
    let (video, fps) = read_sdr_sequence(&spec)?;

    let mut report = match &args.report {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let checkpoint = {
        let mut name = args.weights_out.clone().into_os_string();
        name.push(".ckpt");
        PathBuf::from(name)
    };
    let (weights, _) = train_video_with(&video, fps, &config, |stats, weights| {
        if let (Some(file), Some(path)) = (report.as_mut(), args.report.as_ref()) {
            writeln!(file, "{}", TrainReport::format_line(stats))
                .map_err(|e| Error::io(path, e))?;
        }
        if args.checkpoint_every > 0 && stats.epoch % args.checkpoint_every == 0 {
            save_weights(weights, &checkpoint, true)?;
        }
        Ok(())
    })?;
    save_weights(&weights, &args.weights_out, args.save_moments)
}

fn expand(args: ExpandArgs) -> Result<()> {
    let offsets = parse_offsets(&args.stack)?;
    let mut options = StackOptions::from_offsets(&offsets)?;
    options.clamp_up = !args.no_clamp_up;
    let fusion = FusionConfig {
        weight_floor: args.weight_floor,
        gamma: args.gamma,
    };
    fusion.validate()?;
    let input = FrameSequenceSpec::new(&args.input, &args.pattern, FrameFormat::Png8, 1.0)?;
    let output = FrameSequenceSpec::new(
        &args.output,
        &args.output_pattern,
        hdr_format(&args.out_format)?,
        1.0,
    )?;
    require_dir(&args.input)?;
    let needs_model = options.n_down + options.n_up > 0;
    let weights: Option<ModelWeights> = match (&args.weights, needs_model) {
        (Some(p), _) => Some(load_weights(p)?),
        (None, true) => {
            return Err(Error::InvalidConfig(
                "--weights is required for a multi-exposure stack".into(),
            ))
        }
        (None, false) => None,
    };
    let identity = ConstantResidual(1.0);
    let predictor: &dyn ResidualPredictor = match &weights {
        Some(w) => w,
        None => &identity,
    };
    let (video, _) = read_sdr_sequence(&input)?;

    let frames: Vec<HdrFrame> = match &args.dump_stack {
        None => expand_video(predictor, &video, options, &fusion)?,
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut out = Vec::with_capacity(video.len());
            for (i, frame) in video.iter().enumerate() {
                let stack = expand_stack(predictor, frame, options)?;
                for (image, offset) in stack.entries() {
                    let name = format!("{}_ev{:+}.png", input.pattern.file_stem(i as u64), offset);
                    write_png(&SdrFrame::quantized(image, *offset), &dir.join(name))?;
                }
                out.push(fuse_stack(&stack, &fusion)?);
            }
            out
        }
    };
    write_hdr_sequence(&frames, &output)?;
    log::info!(
        "wrote {} HDR frames to {}",
        frames.len(),
        args.output.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = DisplayModel {
        peak_luminance: args.peak_luminance,
        black_level: args.black_level,
        scale_percentile: args.scale_percentile,
    };
    model.validate()?;
    let pred_spec = FrameSequenceSpec::new(
        &args.pred,
        &args.pred_pattern,
        hdr_format(&args.pred_format)?,
        1.0,
    )?;
    let ref_spec = FrameSequenceSpec::new(
        &args.reference,
        &args.ref_pattern,
        hdr_format(&args.ref_format)?,
        1.0,
    )?;
    require_dir(&args.pred)?;
    require_dir(&args.reference)?;
    let mut preds = read_hdr_sequence(&pred_spec)?.frames;
    let refs = read_hdr_sequence(&ref_spec)?.frames;
    if let Some(path) = &args.exposure_sidecar {
        let exposures = read_exposure_sidecar(path)?;
        if exposures.len() != preds.len() {
            return Err(Error::InvalidInput(format!(
                "sidecar lists {} exposures for {} frames",
                exposures.len(),
                preds.len()
            )));
        }
        for (frame, f) in preds.iter_mut().zip(exposures) {
            let gain = 2f64.powf(-f);
            frame.image = frame.image.map(|v| v * gain);
        }
    }
    let scores = score_frames(&preds, &refs, &model, &PuCurve::banding_glare())?;
    let csv = scores_to_csv(&scores);
    match &args.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn fixture(args: FixtureArgs) -> Result<()> {
    let config = FixtureConfig {
        frames: args.frames,
        size: args.size,
        disk_radiance: args.disk_radiance,
        disk_radius: args.disk_radius,
        ramp_stops: args.ramp_stops,
        ramp_shape: args.ramp_shape,
        background_level: args.background_level,
        texture_stops: args.texture_stops,
    };
    let spec = FrameSequenceSpec::new(&args.output, &args.pattern, hdr_format(&args.format)?, 1.0)?;
    let frames = config.generate()?;
    write_hdr_sequence(&frames, &spec)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::SimulateSdr(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Expand(a) => expand(a),
        Command::Evaluate(a) => evaluate(a),
        Command::FixtureGen(a) => fixture(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZSHDR_LOG", "warn")).init();
    let args = match apply_config_file(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut command = Cli::command().args_override_self(true);
    for name in SUBCOMMANDS {
        command = command.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let cli = match Cli::from_arg_matches(&command.get_matches_from(args)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
