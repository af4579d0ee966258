//! Command-line interface.
//!
//! Usage errors exit with 2 (reported by clap or by configuration
//! validation); runtime failures exit with 1.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_corpus, load_image, save_png, write_synthetic_corpus, Corpus};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA_S;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainState};
use crate::verify::{self, Suite, ROUNDTRIP_TOLERANCE};
use crate::wavelet::{wavelet_energy, wavelet_pool, wavelet_unpool};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "safin", version, about = "Wavelet style transfer with self-attentive factorized instance normalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the decoder and stylization modules
    Train(TrainArgs),
    /// Stylize one content image with one style image
    Stylize(StylizeArgs),
    /// Run the built-in invariant suites
    Verify(VerifyArgs),
    /// Check wavelet pool/unpool reconstruction on an image or random data
    WaveletRoundtrip(RoundtripArgs),
    /// Write the 8-image synthetic corpus
    GenCorpus(GenCorpusArgs),
}

fn existing_dir(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("directory {s} does not exist"))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of content images
    #[arg(long, value_name = "DIR", value_parser = existing_dir)]
    pub content: PathBuf,
    /// Directory of style images
    #[arg(long, value_name = "DIR", value_parser = existing_dir)]
    pub style: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Checkpoint to write
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_S)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace attention with the plain FIN parameter path
    #[arg(long)]
    pub no_attention: bool,
    /// Training resolution, a multiple of 16
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long, value_name = "IMG")]
    pub content: PathBuf,
    #[arg(long, value_name = "IMG")]
    pub style: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "IMG")]
    pub out: PathBuf,
    /// Working resolution (multiple of 8); defaults to the training size
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Image to decompose; random tensors are used when omitted
    #[arg(long, value_name = "IMG")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command, writing reports to `out` and diagnostics to `err`.
/// Returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Stylize(a) => cmd_stylize(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::WaveletRoundtrip(a) => cmd_wavelet_roundtrip(a, out),
        Command::GenCorpus(a) => cmd_gen_corpus(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn report_skipped(corpus: &Corpus, err: &mut dyn Write) -> Result<()> {
    for (path, e) in &corpus.skipped {
        writeln!(err, "warning: skipped {}: {e}", path.display())?;
    }
    Ok(())
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = TrainConfig {
        steps: a.steps as usize,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        lambda_s: a.lambda_s,
        seed: a.seed,
        image_size: a.image_size,
        attention_enabled: !a.no_attention,
        content_dir: a.content,
        style_dir: a.style,
        checkpoint_path: a.out,
        ..TrainConfig::default()
    };
    if let Err(e) = cfg.validate() {
        writeln!(err, "error: {e}")?;
        return Ok(EXIT_USAGE);
    }
    let content = load_corpus(&cfg.content_dir, cfg.image_size)?;
    report_skipped(&content, err)?;
    let style = load_corpus(&cfg.style_dir, cfg.image_size)?;
    report_skipped(&style, err)?;

    let mut state = TrainState::new(&cfg)?;
    let mut io_error = None;
    train(&mut state, &content.images, &style.images, cfg.steps, |step, r| {
        if io_error.is_none() {
            if let Err(e) = writeln!(out, "{step}\t{}\t{}\t{}", r.content, r.style, r.total) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    save_checkpoint(&state, &cfg.checkpoint_path)?;
    Ok(0)
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (sq / a.len() as f64).sqrt()
}

pub fn cmd_stylize(a: StylizeArgs, out: &mut dyn Write) -> Result<i32> {
    let state = load_checkpoint(&a.ckpt)?;
    let size = a.image_size.unwrap_or(state.net.config.input_size);
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Config(format!("image size {size} must be a positive multiple of 8")));
    }
    let content = load_image(&a.content, size)?;
    let style = load_image(&a.style, size)?;
    let image = state.net.stylize(&content, &style)?;
    save_png(&image, &a.out)?;
    writeln!(out, "wrote {}", a.out.display())?;
    writeln!(out, "reconstruction_rmse\t{}", rmse(&image, &content))?;
    Ok(0)
}

pub fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let mut all = true;
    for report in verify::run(a.suite)? {
        writeln!(out, "[{}]", report.suite)?;
        for check in &report.checks {
            writeln!(out, "  {check}")?;
        }
        let worst = report.checks.iter().map(|c| c.worst).fold(0.0, f64::max);
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{} {verdict} (worst measured {worst:.3e})", report.suite)?;
        all &= report.passed();
    }
    Ok(if all { 0 } else { EXIT_FAILURE })
}

fn roundtrip_error(x: &Tensor) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bands = wavelet_pool(tape.constant(x.clone()))?;
    let back = wavelet_unpool(&bands)?.value();
    let energy = (wavelet_energy(&bands) - x.sum_squares()).abs();
    Ok((back.max_abs_diff(x), energy))
}

pub fn cmd_wavelet_roundtrip(a: RoundtripArgs, out: &mut dyn Write) -> Result<i32> {
    let inputs: Vec<(String, Tensor)> = match &a.input {
        Some(path) => {
            let img = load_image(path, a.image_size)?;
            let shape = [1, 3, a.image_size, a.image_size];
            vec![(path.display().to_string(), img.reshape(&shape)?)]
        }
        None => {
            let mut rng = SplitMix64::new(a.seed);
            [4, 8, 16, 32]
                .into_iter()
                .map(|s| {
                    let t = Tensor::from_fn(&[2, 4, s, s], |_| rng.uniform(-1.0, 1.0));
                    (format!("random (2,4,{s},{s})"), t)
                })
                .collect()
        }
    };
    let mut worst = 0.0f64;
    for (name, x) in &inputs {
        let (e, energy) = roundtrip_error(x)?;
        writeln!(out, "{name}\tmax_abs_error\t{e:e}\tenergy_error\t{energy:e}")?;
        worst = worst.max(e);
    }
    let ok = worst < ROUNDTRIP_TOLERANCE;
    writeln!(
        out,
        "{} worst {worst:e} < {ROUNDTRIP_TOLERANCE:e}",
        if ok { "PASS" } else { "FAIL" }
    )?;
    Ok(if ok { 0 } else { EXIT_FAILURE })
}

pub fn cmd_gen_corpus(a: GenCorpusArgs, out: &mut dyn Write) -> Result<i32> {
    for path in write_synthetic_corpus(&a.out, a.seed)? {
        writeln!(out, "{}", path.display())?;
    }
    Ok(0)
}

