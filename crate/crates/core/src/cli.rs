//! Command-line driver. Every command prints CSV on stdout; failures print a
//! single `error: ...` line on stderr and exit with 1 (usage) or 2
//! (runtime).

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use clap::{Parser, Subcommand};

use crate::bitstream::{self, Mode, HEADER_LEN, MAGIC};
use crate::dsp::{self, Spectrogram};
use crate::prior::PriorKind;
use crate::schemes::Model;
use crate::training::{self, fmt_g6, Dataset, RdPoint, SynthSpec, TrainConfig, TrainError, Trainer, RD_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "frae", version, about = "Feedback recurrent autoencoder codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the model file and a CSV training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or `synth:<kind>[:key=value,...]`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resumable checkpoint written after every epoch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint; the log is appended to.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode a `.wav` or `.spec` file to a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fixed")]
        mode: Mode,
    },
    /// Decode a bitstream to a `.spec` file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop metrics of one or more models on a dataset.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: String,
        /// Evaluate only the validation split the trainer held out.
        #[arg(long)]
        val_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a β × prior grid plus uniform-prior baselines.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "0.001:0.007:0.001")]
        betas: String,
        /// `all` or a comma list of prior kinds.
        #[arg(long, default_value = "all")]
        priors: String,
        /// Comma list of seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Bottleneck sizes of the fixed-rate baselines.
        #[arg(long, default_value = "8,16,32,36")]
        baseline_dims: String,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as `.spec` files.
    SynthData {
        /// `<kind>[:key=value,...]`, kind is `ar1` or `noisy_sines`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Griffin-Lim resynthesis of a dB spectrogram or bitstream to WAV.
    GlDecode {
        #[arg(long = "in")]
        input: PathBuf,
        /// Needed when the input is a bitstream.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn rt(e: impl Display) -> CliError {
    CliError::Runtime(one_line(&e.to_string()))
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(one_line(&e.to_string()))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv`, runs the command writing CSV to `out`, and returns the
/// process exit code. Errors go to `err` as one line.
pub fn main_with(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "error: {}", first.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            config,
            data,
            out: model_out,
            log,
            checkpoint,
            resume,
            seed,
        } => cmd_train(&config, &data, &model_out, log, checkpoint, resume, seed, out),
        Command::Encode {
            model,
            input,
            out: path,
            mode,
        } => cmd_encode(&model, &input, &path, mode, out),
        Command::Decode { model, input, out: path } => cmd_decode(&model, &input, &path, out),
        Command::Eval {
            model,
            data,
            val_only,
            out: path,
        } => cmd_eval(&model, &data, val_only, path, out),
        Command::Sweep {
            config,
            data,
            betas,
            priors,
            seeds,
            baseline_dims,
            threads,
            out: path,
        } => cmd_sweep(&config, &data, &betas, &priors, &seeds, &baseline_dims, threads, path, out),
        Command::SynthData { spec, out: dir } => {
            let s = SynthSpec::parse(&spec).map_err(usage)?;
            let d = training::synth_dataset(&s).map_err(rt)?;
            d.save_dir(&dir).map_err(rt)?;
            writeln!(out, "utterances,frames,bins").map_err(rt)?;
            writeln!(out, "{},{},{}", d.utterances.len(), d.total_frames(), d.bins()).map_err(rt)?;
            Ok(())
        }
        Command::GlDecode {
            input,
            model,
            out: path,
            iters,
            seed,
        } => cmd_gl_decode(&input, model.as_deref(), &path, iters, seed, out),
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    TrainConfig::parse(&text).map_err(|e| match e {
        TrainError::Config { .. } | TrainError::Invalid(_) => usage(format!("{}: {e}", path.display())),
        other => rt(other),
    })
}

/// A directory of `.spec`/`.wav` files or `synth:<spec>`.
pub fn load_data(data: &str) -> Result<Dataset, CliError> {
    match data.strip_prefix("synth:") {
        Some(spec) => {
            let s = SynthSpec::parse(spec).map_err(usage)?;
            training::synth_dataset(&s).map_err(rt)
        }
        None => Dataset::load_dir(Path::new(data)).map_err(rt),
    }
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| rt(format!("model {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    data: &str,
    model_out: &Path,
    log: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dataset = load_data(data)?;
    let log_path = log.unwrap_or_else(|| with_suffix(model_out, ".log.csv"));
    let mut trainer = match &resume {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(rt)?;
            Trainer::resume(cfg, &dataset, &bytes).map_err(rt)?
        }
        None => Trainer::new(cfg, &dataset).map_err(rt)?,
    };
    if resume.is_none() || !log_path.exists() {
        std::fs::write(&log_path, format!("{}\n", training::LOG_HEADER)).map_err(rt)?;
    }
    let mut written = 0;
    let result = loop {
        if trainer.epoch >= trainer.config.epochs {
            break Ok(());
        }
        let r = trainer.run_epoch();
        let fresh = training::TrainingLog {
            rows: trainer.log.rows[written..].to_vec(),
        };
        written = trainer.log.rows.len();
        append(&log_path, &fresh.csv_rows())?;
        if let Err(e) = r {
            break Err(e);
        }
        if let Some(ck) = &checkpoint {
            std::fs::write(ck, trainer.checkpoint()).map_err(rt)?;
        }
    };
    match result {
        Ok(()) => {
            trainer.model.save(model_out, false).map_err(rt)?;
            write!(out, "{}", trainer.log.to_csv()).map_err(rt)?;
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch, checkpoint: last, ..
        }) => {
            last.save(model_out, false).map_err(rt)?;
            Err(rt(format!("training diverged in epoch {epoch}; last good model written")))
        }
        Err(e) => Err(rt(e)),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn append(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path).map_err(rt)?;
    f.write_all(text.as_bytes()).map_err(rt)
}

fn load_frames(path: &Path) -> Result<Spectrogram, CliError> {
    let spec = training::load_utterance(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    if spec.frames() == 0 {
        return Err(rt(format!("{}: no frames", path.display())));
    }
    Ok(spec)
}

pub const REPORT_HEADER: &str = "frames,bits,seconds,kbps";

fn report(out: &mut dyn Write, frames: usize, bits: u64) -> Result<(), CliError> {
    let seconds = frames as f64 / training::FRAME_RATE_HZ;
    let kbps = if frames == 0 { 0.0 } else { bits as f64 / seconds / 1000.0 };
    writeln!(out, "{REPORT_HEADER}").map_err(rt)?;
    writeln!(out, "{frames},{bits},{},{}", fmt_g6(seconds), fmt_g6(kbps)).map_err(rt)
}

fn cmd_encode(model: &Path, input: &Path, path: &Path, mode: Mode, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(model)?;
    let frames = load_frames(input)?;
    let latents = model.encode(&frames).map_err(rt)?;
    let enc = bitstream::encode(&model, &latents, mode).map_err(rt)?;
    std::fs::write(path, &enc.bytes).map_err(rt)?;
    report(out, latents.frames(), enc.payload_bits)
}

fn decode_file(model: &Model, input: &Path) -> Result<(Spectrogram, u64), CliError> {
    let bytes = std::fs::read(input).map_err(rt)?;
    let (h, latents) = bitstream::decode(model, &bytes).map_err(rt)?;
    let spec = model.decode(&latents).map_err(rt)?;
    let bits = match h.mode {
        Mode::Fixed => latents.indices.len() as u64 * model.arch().levels.trailing_zeros() as u64,
        Mode::Arithmetic => 8 * (bytes.len() - HEADER_LEN) as u64,
    };
    Ok((spec, bits))
}

fn cmd_decode(model: &Path, input: &Path, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(model)?;
    let (spec, bits) = decode_file(&model, input)?;
    spec.write(path).map_err(rt)?;
    report(out, spec.frames(), bits)
}

pub const EVAL_HEADER: &str = "scheme,prior,latent_dim,frames,mel_mse,spectral_snr,bits_per_frame,bitrate_bps";

fn cmd_eval(models: &[PathBuf], data: &str, val_only: bool, path: Option<PathBuf>, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_data(data)?;
    let utts = if val_only {
        dataset.split(TrainConfig::default().val_fraction).1
    } else {
        dataset.utterances.clone()
    };
    let mut csv = format!("{EVAL_HEADER}\n");
    for p in models {
        let m = load_model(p)?;
        let r = training::evaluate(&m, &utts).map_err(rt)?;
        let a = m.arch();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.scheme,
            a.prior,
            a.latent_dim,
            r.frames,
            fmt_g6(r.mel_mse),
            fmt_g6(r.spectral_snr),
            fmt_g6(r.bits_per_frame),
            fmt_g6(r.bitrate())
        ));
    }
    if let Some(p) = path {
        std::fs::write(p, &csv).map_err(rt)?;
    }
    write!(out, "{csv}").map_err(rt)
}

/// `start:stop:step` inclusive, or a comma list.
pub fn parse_betas(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("beta '{x}': {e}"));
    match parts.len() {
        1 => s.split(',').map(num).collect(),
        3 => {
            let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0) || b < a {
                return Err("beta range needs start <= stop and step > 0".into());
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            // rounding to 12 decimals keeps 0.001·k printable exactly
            Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12).collect())
        }
        _ => Err(format!("bad beta range '{s}'")),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<T>().map_err(|e| format!("{what} '{x}': {e}")))
        .collect()
}

/// Grid cells in output order: every (prior, β, seed), then the uniform
/// baselines per bottleneck size and seed.
pub fn sweep_grid(base: &TrainConfig, betas: &[f64], priors: &[PriorKind], seeds: &[u64], dims: &[usize]) -> Vec<TrainConfig> {
    let mut cells = Vec::new();
    for &prior in priors {
        for &beta in betas {
            for &seed in seeds {
                cells.push(TrainConfig {
                    prior,
                    beta,
                    seed,
                    ..base.clone()
                });
            }
        }
    }
    for &d in dims {
        for &seed in seeds {
            cells.push(TrainConfig {
                prior: PriorKind::Uniform,
                beta: 0.0,
                latent_dim: d,
                seed,
                ..base.clone()
            });
        }
    }
    cells
}

fn sweep_cell(cfg: &TrainConfig, dataset: &Dataset) -> Result<RdPoint, String> {
    let outcome = training::train(cfg, dataset).map_err(|e| e.to_string())?;
    let eval_set = if outcome.validation.is_empty() {
        dataset.utterances.clone()
    } else {
        outcome.validation
    };
    let m = training::evaluate(&outcome.model, &eval_set).map_err(|e| e.to_string())?;
    Ok(RdPoint::new(cfg, &m))
}

/// Runs cells on `threads` workers; rows are emitted strictly in grid
/// order as soon as every earlier cell is done. Stops at the first failed
/// cell after flushing the rows before it.
pub fn run_sweep(
    cells: &[TrainConfig],
    dataset: &Dataset,
    threads: usize,
    mut emit: impl FnMut(&RdPoint) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RdPoint, String>)>();
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = sweep_cell(&cells[i], dataset);
                let failed = r.is_err();
                if tx.send((i, r)).is_err() || failed {
                    next.store(cells.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: Vec<Option<Result<RdPoint, String>>> = vec![None; cells.len()];
        let mut cursor = 0;
        for (i, r) in rx {
            pending[i] = Some(r);
            while cursor < cells.len() {
                match pending[cursor].take() {
                    Some(Ok(p)) => emit(&p)?,
                    Some(Err(e)) => {
                        next.store(cells.len(), Ordering::SeqCst);
                        let c = &cells[cursor];
                        return Err(rt(format!(
                            "cell {} (prior {}, beta {}, seed {}): {e}",
                            cursor, c.prior, c.beta, c.seed
                        )));
                    }
                    None => break,
                }
                cursor += 1;
            }
        }
        if cursor < cells.len() {
            return Err(rt("sweep stopped early"));
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &Path,
    data: &str,
    betas: &str,
    priors: &str,
    seeds: &str,
    dims: &str,
    threads: usize,
    path: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let base = load_config(config)?;
    let betas = parse_betas(betas).map_err(usage)?;
    let priors: Vec<PriorKind> = if priors == "all" {
        vec![PriorKind::TimeInvariant, PriorKind::CondPrevLatent, PriorKind::CondDecoderState]
    } else {
        parse_list(priors, "prior").map_err(usage)?
    };
    let seeds: Vec<u64> = parse_list(seeds, "seed").map_err(usage)?;
    let dims: Vec<usize> = parse_list(dims, "dimension").map_err(usage)?;
    let cells = sweep_grid(&base, &betas, &priors, &seeds, &dims);
    for c in &cells {
        c.validate().map_err(usage)?;
    }
    let dataset = load_data(data)?;
    if let Some(p) = &path {
        std::fs::write(p, format!("{RD_HEADER}\n")).map_err(rt)?;
    }
    writeln!(out, "{RD_HEADER}").map_err(rt)?;
    run_sweep(&cells, &dataset, threads, |p| {
        let row = format!("{}\n", p.to_csv_row());
        if let Some(path) = &path {
            append(path, &row)?;
        }
        out.write_all(row.as_bytes()).map_err(rt)?;
        out.flush().map_err(rt)
    })
}

fn cmd_gl_decode(input: &Path, model: Option<&Path>, path: &Path, iters: usize, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = std::fs::read(input).map_err(rt)?;
    let spec = if bytes.starts_with(MAGIC) {
        let m = model.ok_or_else(|| usage("--model is required to decode a bitstream"))?;
        decode_file(&load_model(m)?, input)?.0
    } else {
        Spectrogram::from_bytes(&bytes).map_err(rt)?
    };
    if spec.bins() != dsp::BINS {
        return Err(rt(format!("Griffin-Lim needs {} bins, got {}", dsp::BINS, spec.bins())));
    }
    let r = dsp::griffin_lim(&spec, iters, seed);
    dsp::wav_write(path, &r.samples).map_err(rt)?;
    writeln!(out, "iteration,consistency").map_err(rt)?;
    for (i, c) in r.consistency.iter().enumerate() {
        writeln!(out, "{i},{}", fmt_g6(*c)).map_err(rt)?;
    }
    Ok(())
}
