//! The `nvc` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or format errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::io::checkpoint::{self, ModelCheckpoint};
use crate::io::codec;
use crate::io::config;
use crate::io::container::{Container, ContainerHeader, HEADER_BYTES};
use crate::io::image::{list_images, read_image};
use crate::io::patches::PatchSource;
use crate::synth;
use crate::training::{self, LossMode, TrainConfig, TELEMETRY_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nvc", version, about = "Learned lossy image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on patches from a directory of PNG/PPM images.
    Train(TrainArgs),
    /// Train one model per latent width and write the rate-distortion CSV.
    Sweep(SweepArgs),
    /// Compress an image into a coded container.
    Compress(CodecArgs),
    /// Decompress a coded container into a PNG/PPM image.
    Decompress(CodecArgs),
    /// Code every image in a directory and report per-image metrics.
    Evaluate(EvaluateArgs),
    /// Print the header of a coded image or checkpoint.
    Inspect { path: PathBuf },
    /// Write a deterministic synthetic scene corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    latent_channels: Option<usize>,
    #[arg(long)]
    hidden_channels: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV (`step,loss,mse,rate_bpp`).
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out images coded for each grid point.
    #[arg(long)]
    eval: PathBuf,
    /// Comma-separated latent widths.
    #[arg(long, value_delimiter = ',', default_values_t = training::DEFAULT_LATENT_GRID)]
    grid: Vec<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also keep each trained checkpoint here.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CodecArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<training::TrainError> for CliError {
    fn from(e: training::TrainError) -> Self {
        match e {
            training::TrainError::Config(_) | training::TrainError::Model(crate::model::ModelError::InvalidSpec(_)) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::data(other),
        }
    }
}

fn merge_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let entries = config::load(path).map_err(|e| match e {
            config::ConfigError::Read { .. } => CliError::data(e),
            _ => CliError::Usage(e.to_string()),
        })?;
        for (key, value) in entries {
            cfg.set(&key, &value)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
    }
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { cfg.$f = v; } )* };
    }
    over!(lambda, latent_channels, hidden_channels, patch_size, batch_size, steps, learning_rate, seed, loss_mode);
    Ok(cfg)
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let cfg = merge_config(args)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_model(path: &Path) -> Result<ModelCheckpoint, CliError> {
    ModelCheckpoint::load(path).map_err(CliError::data)
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.config)?;
    let source = PatchSource::from_dir(&args.data, cfg.patch_size).map_err(CliError::data)?;
    info!("training on {} images: {cfg:?}", source.len());
    let mut telemetry = args.telemetry.as_deref().map(create).transpose()?;
    if let Some(t) = telemetry.as_mut() {
        writeln!(t, "{TELEMETRY_HEADER}").map_err(CliError::data)?;
    }
    let mut write_err = None;
    let report_every = (cfg.steps / 20).max(1);
    let outcome = training::train_with(&cfg, &source, |s| {
        if let Some(t) = telemetry.as_mut() {
            if let Err(e) = writeln!(t, "{}", s.csv_row()) {
                write_err.get_or_insert(e);
            }
        }
        if s.step % report_every == 0 || s.step + 1 == cfg.steps {
            info!("step {} loss {:.6} mse {:.6} rate {:.4} bpp", s.step, s.loss, s.mse, s.rate_bpp);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::data(e));
    }
    if let Some(mut t) = telemetry {
        t.flush().map_err(CliError::data)?;
    }
    outcome.checkpoint.save(&args.out).map_err(CliError::data)?;
    println!(
        "wrote {} (model {})",
        args.out.display(),
        checkpoint::hex(&outcome.checkpoint.model_id())
    );
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<(), CliError> {
    let cfg = merge_config(&args.config)?;
    if args.grid.is_empty() {
        return Err(CliError::Usage("--grid must list at least one latent width".into()));
    }
    for &latent_channels in &args.grid {
        TrainConfig { latent_channels, ..cfg.clone() }.validate()?;
    }
    let source = PatchSource::from_dir(&args.data, cfg.patch_size).map_err(CliError::data)?;
    let eval: Vec<_> = list_images(&args.eval)
        .map_err(CliError::data)?
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<_, _>>()
        .map_err(CliError::data)?;
    if let Some(dir) = &args.models {
        fs::create_dir_all(dir).map_err(CliError::data)?;
    }
    let mut save_err = None;
    let points = training::sweep_with(&cfg, &args.grid, &source, &eval, |point, ck| {
        info!(
            "latent {}: {:.4} bpp, mse {:.6}, psnr {:.2}, ssim {:.4}",
            point.latent_channels, point.bpp, point.mse, point.psnr, point.ssim
        );
        if let Some(dir) = &args.models {
            if let Err(e) = ck.save(&dir.join(format!("latent_{}.ckpt", point.latent_channels))) {
                save_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(CliError::data(e));
    }
    let mut out = output(args.out.as_deref())?;
    training::write_sweep_csv(&points, &mut out).map_err(CliError::data)?;
    out.flush().map_err(CliError::data)
}

fn compress_cmd(args: CodecArgs) -> Result<(), CliError> {
    let ck = load_model(&args.model)?;
    let s = codec::compress_file(&args.input, &ck, &args.out).map_err(CliError::data)?;
    println!(
        "{}x{}: {} bits ({} payload), {:.4} bpp, {} symbols, {} escapes",
        s.width, s.height, s.total_bits, s.payload_bits, s.bpp, s.symbols, s.escapes
    );
    Ok(())
}

fn decompress_cmd(args: CodecArgs) -> Result<(), CliError> {
    let ck = load_model(&args.model)?;
    let h = codec::decompress_file(&args.input, &ck, &args.out).map_err(CliError::data)?;
    println!("{}x{} written to {}", h.width, h.height, args.out.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), CliError> {
    let ck = load_model(&args.model)?;
    let eval = codec::evaluate_dir(&args.dir, &ck).map_err(CliError::data)?;
    let mut out = output(args.out.as_deref())?;
    eval.write_csv(&mut out).map_err(CliError::data)?;
    out.flush().map_err(CliError::data)
}

fn print_container_header(h: &ContainerHeader, total_bytes: usize) {
    println!("coded image (NVC1, version {})", crate::io::container::VERSION);
    println!("model_id            {}", checkpoint::hex(&h.model_id));
    println!("width x height      {} x {}", h.width, h.height);
    println!("channels            {}", h.channels);
    println!("latent_channels     {}", h.latent_channels);
    println!("payload_bit_length  {}", h.payload_bit_length);
    println!("file bytes          {total_bytes} (header {HEADER_BYTES})");
    let bpp = crate::metrics::bits_per_pixel(total_bytes as u64 * 8, h.width, h.height);
    println!("bpp                 {bpp:.4}");
}

fn inspect_cmd(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(&crate::io::container::MAGIC) {
        let c = Container::from_bytes(&bytes).map_err(CliError::data)?;
        print_container_header(&c.header, bytes.len());
    } else if bytes.starts_with(&checkpoint::MAGIC) {
        let ck = ModelCheckpoint::from_bytes(&bytes).map_err(CliError::data)?;
        let spec = ck.model.spec();
        let m = &ck.metadata;
        println!("checkpoint (NVCK, version {})", checkpoint::VERSION);
        println!("model_id            {}", checkpoint::hex(&ck.model_id()));
        println!("latent_channels     {}", spec.latent_channels);
        println!("hidden_channels     {}", spec.hidden_channels);
        println!("input_channels      {}", spec.input_channels);
        println!("downsample_factor   {}", spec.downsample_factor);
        println!("posterior_head      {:?}", ck.model.head());
        println!("loss_mode           {}", m.loss_mode);
        println!("lambda              {}", m.lambda);
        println!("steps               {}", m.steps);
        println!("seed                {}", m.seed);
        println!("learning_rate       {}", m.learning_rate);
        println!("batch_size          {}", m.batch_size);
        println!("patch_size          {}", m.patch_size);
        println!("parameters          {}", ck.model.params().element_count());
        for p in ck.model.params().iter() {
            println!("  {:<26} {:?}", p.name, p.tensor.shape());
        }
    } else {
        return Err(CliError::Data(format!(
            "{}: neither a coded image nor a checkpoint",
            path.display()
        )));
    }
    Ok(())
}

fn gen_corpus_cmd(args: GenCorpusArgs) -> Result<(), CliError> {
    if args.height < 8 || args.width < 8 {
        return Err(CliError::Usage("scenes must be at least 8x8".into()));
    }
    let files = synth::write_corpus(&args.out, args.seed, args.count, args.height, args.width)
        .map_err(CliError::data)?;
    println!("wrote {} scenes to {}", files.len(), args.out.display());
    Ok(())
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Compress(a) => compress_cmd(a),
        Command::Decompress(a) => decompress_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect { path } => inspect_cmd(&path),
        Command::GenCorpus(a) => gen_corpus_cmd(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "lambda = 0.5\nsteps = 7 # short\nlatent_channels = 8\nhidden_channels=16\npatch_size=16\n").unwrap();
        let cli = Cli::try_parse_from([
            "nvc", "train", "--config", path.to_str().unwrap(), "--steps", "3", "--data", "d", "--out", "o",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let cfg = resolve_config(&args.config).unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.latent_channels, 8);
        assert_eq!(cfg.patch_size, 16);
    }

    #[test]
    fn bad_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "lamda = 0.5\n").unwrap();
        let cli = Cli::try_parse_from(["nvc", "train", "--config", path.to_str().unwrap(), "--data", "d", "--out", "o"]).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        assert_eq!(resolve_config(&args.config).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn grid_parses_comma_lists() {
        let cli = Cli::try_parse_from(["nvc", "sweep", "--data", "d", "--eval", "e", "--grid", "4,8,16"]).unwrap();
        let Command::Sweep(args) = cli.command else { panic!() };
        assert_eq!(args.grid, [4, 8, 16]);
        let cli = Cli::try_parse_from(["nvc", "sweep", "--data", "d", "--eval", "e"]).unwrap();
        let Command::Sweep(args) = cli.command else { panic!() };
        assert_eq!(args.grid, [4, 8, 16, 32, 64, 128]);
    }

    #[test]
    fn unknown_flags_exit_with_usage_status() {
        assert_eq!(run(["nvc", "compress", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["nvc"]), EXIT_USAGE);
        assert_eq!(run(["nvc", "--help"]), EXIT_OK);
    }
}
