//! Rate–distortion training with truncated BPTT, datasets, and evaluation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{self, DspError, Spectrogram};
use crate::nn::{round_f32, AdamConfig, ModelParams, NnError};
use crate::prior::PriorKind;
use crate::schemes::{Architecture, CodecError, CodecState, Model, Normalizer, SchemeId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged in epoch {epoch}")]
    Diverged {
        epoch: usize,
        checkpoint: Box<Model>,
        log: TrainingLog,
    },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Codec(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Frame rate of every spectrogram sequence.
pub const FRAME_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: SchemeId,
    pub prior: PriorKind,
    pub latent_dim: usize,
    pub levels: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prior_hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub bptt: usize,
    pub segment_len: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Temperature of the soft assignment that carries rate gradients.
    pub tau: f64,
    pub clip: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: SchemeId::Frae,
            prior: PriorKind::Uniform,
            latent_dim: 8,
            levels: 4,
            enc_hidden: 128,
            dec_hidden: 128,
            prior_hidden: 64,
            beta: 0.0,
            lr: 1e-3,
            batch_size: 16,
            bptt: 32,
            segment_len: 128,
            epochs: 20,
            seed: 0,
            tau: 0.1,
            clip: 5.0,
            val_fraction: 0.1,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| TrainError::Config {
        line,
        msg: format!("{key}: {e}"),
    })
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::Config {
                line: n,
                msg: format!("expected key = value, found '{line}'"),
            })?;
            c.set(n, key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; `line` is used for error messages.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "scheme" => self.scheme = parse_value(line, key, v)?,
            "prior" => self.prior = parse_value(line, key, v)?,
            "latent_dim" | "D" => self.latent_dim = parse_value(line, key, v)?,
            "levels" | "K" => self.levels = parse_value(line, key, v)?,
            "enc_hidden" => self.enc_hidden = parse_value(line, key, v)?,
            "dec_hidden" => self.dec_hidden = parse_value(line, key, v)?,
            "prior_hidden" => self.prior_hidden = parse_value(line, key, v)?,
            "beta" => self.beta = parse_value(line, key, v)?,
            "lr" => self.lr = parse_value(line, key, v)?,
            "batch_size" => self.batch_size = parse_value(line, key, v)?,
            "bptt" => self.bptt = parse_value(line, key, v)?,
            "segment_len" => self.segment_len = parse_value(line, key, v)?,
            "epochs" => self.epochs = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "tau" => self.tau = parse_value(line, key, v)?,
            "clip" => self.clip = parse_value(line, key, v)?,
            "val_fraction" => self.val_fraction = parse_value(line, key, v)?,
            _ => {
                return Err(TrainError::Config {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a nonnegative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.bptt == 0 || self.segment_len == 0 {
            return bad("batch_size, bptt and segment_len must be positive");
        }
        if !(self.tau > 0.0) || !(self.clip > 0.0) {
            return bad("tau and clip must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        self.architecture(1).validate()?;
        Ok(())
    }

    pub fn architecture(&self, frame_dim: usize) -> Architecture {
        Architecture {
            scheme: self.scheme,
            prior: self.prior,
            frame_dim,
            latent_dim: self.latent_dim,
            levels: self.levels,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            prior_hidden: self.prior_hidden,
        }
    }

    /// The config in the form [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        format!(
            "scheme = {}\nprior = {}\nlatent_dim = {}\nlevels = {}\nenc_hidden = {}\ndec_hidden = {}\n\
             prior_hidden = {}\nbeta = {}\nlr = {}\nbatch_size = {}\nbptt = {}\nsegment_len = {}\n\
             epochs = {}\nseed = {}\ntau = {}\nclip = {}\nval_fraction = {}\n",
            self.scheme,
            self.prior,
            self.latent_dim,
            self.levels,
            self.enc_hidden,
            self.dec_hidden,
            self.prior_hidden,
            self.beta,
            self.lr,
            self.batch_size,
            self.bptt,
            self.segment_len,
            self.epochs,
            self.seed,
            self.tau,
            self.clip,
            self.val_fraction
        )
    }
}

/// A set of utterances sharing one frame width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Spectrogram>,
}

impl Dataset {
    pub fn new(utterances: Vec<Spectrogram>) -> Result<Self> {
        let Some(first) = utterances.first() else {
            return Err(TrainError::Dataset("no utterances".into()));
        };
        let bins = first.bins();
        if utterances.iter().any(|u| u.bins() != bins) {
            return Err(TrainError::Dataset("utterances differ in frame width".into()));
        }
        if utterances.iter().all(|u| u.frames() == 0) {
            return Err(TrainError::Dataset("all utterances are empty".into()));
        }
        Ok(Dataset { utterances })
    }

    pub fn bins(&self) -> usize {
        self.utterances[0].bins()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Spectrogram::frames).sum()
    }

    /// Disjoint train/validation split by utterance; the last
    /// `round(n·fraction)` utterances (at least one when `n ≥ 2`) validate.
    pub fn split(&self, val_fraction: f64) -> (Vec<Spectrogram>, Vec<Spectrogram>) {
        let n = self.utterances.len();
        if n < 2 || val_fraction == 0.0 {
            return (self.utterances.clone(), Vec::new());
        }
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let (train, val) = self.utterances.split_at(n - n_val);
        (train.to_vec(), val.to_vec())
    }

    /// Reads every `.spec` and `.wav` file in `dir` (sorted by name); WAV
    /// files become dB spectrograms.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("spec" | "wav")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(TrainError::Dataset(format!("no .spec or .wav files in {}", dir.display())));
        }
        let utterances = paths.iter().map(|p| load_utterance(p)).collect::<Result<Vec<_>>>()?;
        Dataset::new(utterances)
    }

    /// Writes `utt0000.spec`, `utt0001.spec`, ... into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, u) in self.utterances.iter().enumerate() {
            u.write(&dir.join(format!("utt{i:04}.spec")))?;
        }
        Ok(())
    }
}

/// A `.spec` dump or a `.wav` file converted to a dB spectrogram.
pub fn load_utterance(path: &Path) -> Result<Spectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => Ok(dsp::spectrogram(&dsp::wav_read(path)?)?),
        _ => Ok(Spectrogram::read(path)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Ar1,
    NoisySines,
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ar1" => Ok(SynthKind::Ar1),
            "noisy_sines" | "noisy-sines" => Ok(SynthKind::NoisySines),
            _ => Err(format!("unknown synthetic dataset '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub utterances: usize,
    pub frames: usize,
    pub bins: usize,
    /// AR(1) coefficient; ignored by `NoisySines`.
    pub rho: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn ar1(utterances: usize, frames: usize, bins: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::Ar1,
            utterances,
            frames,
            bins,
            rho: 0.95,
            seed,
        }
    }

    /// Parses `kind[:key=value,...]`, e.g. `ar1:utts=40,frames=256,bins=8,rho=0.95,seed=1`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = SynthSpec::ar1(40, 256, 8, 0);
        spec.kind = kind.parse()?;
        for item in rest.split(',').filter(|x| !x.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| format!("expected key=value, found '{item}'"))?;
            let err = |e: &dyn fmt::Display| format!("{k}: {e}");
            match k {
                "utts" => spec.utterances = v.parse().map_err(|e| err(&e))?,
                "frames" => spec.frames = v.parse().map_err(|e| err(&e))?,
                "bins" => spec.bins = v.parse().map_err(|e| err(&e))?,
                "rho" => spec.rho = v.parse().map_err(|e| err(&e))?,
                "seed" => spec.seed = v.parse().map_err(|e| err(&e))?,
                _ => return Err(format!("unknown synthetic key '{k}'")),
            }
        }
        Ok(spec)
    }
}

/// Generates a reproducible synthetic dataset. Values are rounded to `f32`
/// so a saved dataset reloads identically.
///
/// `Ar1`: each channel follows `x_t = ρ·x_{t−1} + ε_t`, `ε ~ N(0, 1−ρ²)`,
/// started from the stationary distribution. `NoisySines`: each channel is a
/// sum of three sinusoids of random frequency and phase plus white noise.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.utterances == 0 || spec.frames == 0 || spec.bins == 0 {
        return Err(TrainError::Dataset("synthetic dataset needs positive sizes".into()));
    }
    if !(spec.rho.abs() < 1.0) {
        return Err(TrainError::Dataset("|rho| must be below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut utterances = Vec::with_capacity(spec.utterances);
    for _ in 0..spec.utterances {
        let mut data = vec![0.0; spec.frames * spec.bins];
        match spec.kind {
            SynthKind::Ar1 => {
                let innov = Normal::new(0.0, (1.0 - spec.rho * spec.rho).sqrt()).unwrap();
                let unit = Normal::new(0.0, 1.0).unwrap();
                for f in 0..spec.bins {
                    let mut x: f64 = unit.sample(&mut rng);
                    for t in 0..spec.frames {
                        if t > 0 {
                            x = spec.rho * x + innov.sample(&mut rng);
                        }
                        data[t * spec.bins + f] = x;
                    }
                }
            }
            SynthKind::NoisySines => {
                let noise = Normal::new(0.0, 0.1).unwrap();
                for f in 0..spec.bins {
                    let comps: Vec<(f64, f64, f64)> = (0..3)
                        .map(|_| {
                            (
                                rng.gen_range(0.1..1.0),
                                rng.gen_range(0.005..0.1) * std::f64::consts::TAU,
                                rng.gen_range(0.0..std::f64::consts::TAU),
                            )
                        })
                        .collect();
                    for t in 0..spec.frames {
                        let s: f64 = comps.iter().map(|(a, w, p)| a * (w * t as f64 + p).sin()).sum();
                        data[t * spec.bins + f] = s + noise.sample(&mut rng);
                    }
                }
            }
        }
        round_f32(&mut data);
        utterances.push(Spectrogram::new(spec.frames, spec.bins, data)?);
    }
    Dataset::new(utterances)
}

/// `(Σ_t d_t + β·Σ_t rate_t) / T` given the frame-mean distortion and the
/// summed rate in nats.
pub fn rd_loss(tape: &mut Tape, distortion: Var, rate_nats: Option<Var>, beta: f64, frames: usize) -> Result<Var> {
    match rate_nats {
        Some(r) if beta != 0.0 => {
            let r = tape.scale(r, beta / frames as f64);
            Ok(tape.add(distortion, r).map_err(NnError::from)?)
        }
        _ => Ok(distortion),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub mel_mse: f64,
    pub bits_per_frame: f64,
    pub loss: f64,
}

/// Per-epoch metrics; `to_csv` writes `epoch,split,mel_mse,bits_per_frame,loss`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "epoch,split,mel_mse,bits_per_frame,loss";

impl TrainingLog {
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{}\n",
                    r.epoch,
                    r.split,
                    fmt_g6(r.mel_mse),
                    fmt_g6(r.bits_per_frame),
                    fmt_g6(r.loss)
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{LOG_HEADER}\n{}", self.csv_rows())
    }

    pub fn last(&self, split: Split) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Formats with 6 significant digits, like C's `%.6g`.
pub fn fmt_g6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{:.5e}", v);
    let (mant, e) = s.split_once('e').unwrap();
    let e: i32 = e.parse().unwrap();
    if (-5..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        let f = format!("{:.*}", decimals, v);
        trim_zeros(&f)
    } else {
        let m = trim_zeros(mant);
        format!("{m}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mel_mse: f64,
    pub bits_per_frame: f64,
    pub spectral_snr: f64,
    pub frames: usize,
}

impl Metrics {
    pub fn bitrate(&self) -> f64 {
        self.bits_per_frame * FRAME_RATE_HZ
    }
}

/// Closed-loop evaluation: every reconstruction comes from the indices the
/// encoder would transmit. Distortion and rate are frame-weighted means.
pub fn evaluate(model: &Model, utterances: &[Spectrogram]) -> Result<Metrics> {
    let bins = model.arch().frame_dim;
    let mut all_x = Vec::new();
    let mut all_y = Vec::new();
    let mut bits = 0.0;
    let mut frames = 0;
    for u in utterances {
        let r = model.run(u)?;
        bits += r.frame_bits.iter().sum::<f64>();
        frames += u.frames();
        all_x.extend_from_slice(u.data());
        all_y.extend_from_slice(r.reconstruction.data());
    }
    if frames == 0 {
        return Err(TrainError::Dataset("nothing to evaluate".into()));
    }
    let x = Spectrogram::new(frames, bins, all_x)?;
    let y = Spectrogram::new(frames, bins, all_y)?;
    Ok(Metrics {
        mel_mse: dsp::mel_mse(&x, &y)?,
        bits_per_frame: bits / frames as f64,
        spectral_snr: dsp::spectral_snr(&x, &y)?,
        frames,
    })
}

/// One rate–distortion measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub scheme: SchemeId,
    pub prior: PriorKind,
    pub latent_dim: usize,
    pub beta: f64,
    pub seed: u64,
    pub bits_per_frame: f64,
    pub bitrate: f64,
    pub mel_mse: f64,
    pub spectral_snr: f64,
}

pub const RD_HEADER: &str = "scheme,prior,latent_dim,beta,seed,bits_per_frame,bitrate_bps,mel_mse,spectral_snr";

impl RdPoint {
    pub fn new(config: &TrainConfig, m: &Metrics) -> Self {
        RdPoint {
            scheme: config.scheme,
            prior: config.prior,
            latent_dim: config.latent_dim,
            beta: config.beta,
            seed: config.seed,
            bits_per_frame: m.bits_per_frame,
            bitrate: m.bitrate(),
            mel_mse: m.mel_mse,
            spectral_snr: m.spectral_snr,
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.prior,
            self.latent_dim,
            fmt_g6(self.beta),
            self.seed,
            fmt_g6(self.bits_per_frame),
            fmt_g6(self.bitrate),
            fmt_g6(self.mel_mse),
            fmt_g6(self.spectral_snr)
        )
    }

    pub fn from_csv_row(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(format!("expected 9 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        Ok(RdPoint {
            scheme: f[0].parse()?,
            prior: f[1].parse()?,
            latent_dim: f[2].parse().map_err(|e| format!("latent_dim: {e}"))?,
            beta: num(3)?,
            seed: f[4].parse().map_err(|e| format!("seed: {e}"))?,
            bits_per_frame: num(5)?,
            bitrate: num(6)?,
            mel_mse: num(7)?,
            spectral_snr: num(8)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    utt: usize,
    start: usize,
    len: usize,
}

const CHECKPOINT_EPOCH: &str = "train.epoch";

/// Stateful trainer; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    /// Completed epochs.
    pub epoch: usize,
    pub log: TrainingLog,
    train: Vec<Spectrogram>,
    val: Vec<Spectrogram>,
    train_norm: Vec<Vec<Vec<f64>>>,
    segments: Vec<Segment>,
    weights: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (train, val) = dataset.split(config.val_fraction);
        let arch = config.architecture(dataset.bins());
        let mut model = Model::new(arch, config.seed)?;
        model.norm = Normalizer::fit(train.iter().flat_map(|u| u.rows()), dataset.bins());
        Trainer::assemble(config, model, 0, train, val)
    }

    /// Continues from checkpoint bytes written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, dataset: &Dataset, checkpoint: &[u8]) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::from_bytes(checkpoint)?;
        let epoch = params
            .remove(CHECKPOINT_EPOCH)
            .ok_or_else(|| TrainError::Invalid("not a training checkpoint".into()))?
            .item() as usize;
        let model = Model::from_params(params)?;
        if *model.arch() != config.architecture(dataset.bins()) {
            return Err(TrainError::Invalid("checkpoint architecture differs from config".into()));
        }
        let (train, val) = dataset.split(config.val_fraction);
        Trainer::assemble(config, model, epoch, train, val)
    }

    fn assemble(config: TrainConfig, model: Model, epoch: usize, train: Vec<Spectrogram>, val: Vec<Spectrogram>) -> Result<Self> {
        let train_norm: Vec<Vec<Vec<f64>>> = train.iter().map(|u| u.rows().map(|r| model.norm.normalize(r)).collect()).collect();
        let mut segments = Vec::new();
        for (utt, u) in train.iter().enumerate() {
            let mut start = 0;
            while start < u.frames() {
                let len = config.segment_len.min(u.frames() - start);
                segments.push(Segment { utt, start, len });
                start += len;
            }
        }
        if segments.is_empty() {
            return Err(TrainError::Dataset("training split has no frames".into()));
        }
        let weights = model.norm.distortion_weights();
        Ok(Trainer {
            config,
            model,
            epoch,
            log: TrainingLog::default(),
            train,
            val,
            train_norm,
            segments,
            weights,
        })
    }

    pub fn validation_set(&self) -> &[Spectrogram] {
        &self.val
    }

    pub fn training_set(&self) -> &[Spectrogram] {
        &self.train
    }

    /// Model file with optimizer state and the completed-epoch count.
    pub fn checkpoint(&self) -> Vec<u8> {
        let extra = [(CHECKPOINT_EPOCH.to_string(), Tensor::row(&[self.epoch as f64]))];
        self.model.to_bytes_with(&extra, true)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    fn diverged(&self, checkpoint: Model) -> TrainError {
        TrainError::Diverged {
            epoch: self.epoch + 1,
            checkpoint: Box::new(checkpoint),
            log: self.log.clone(),
        }
    }

    /// One pass over the shuffled training segments, then validation.
    /// On a non-finite loss the model is restored to the previous epoch and
    /// [`TrainError::Diverged`] is returned.
    pub fn run_epoch(&mut self) -> Result<()> {
        let saved = self.model.clone();
        let mut order = self.segments.clone();
        order.shuffle(&mut self.epoch_rng(self.epoch));
        let adam = AdamConfig {
            lr: self.config.lr,
            ..AdamConfig::default()
        };
        let ln2 = std::f64::consts::LN_2;
        let (mut dist_sum, mut rate_sum, mut loss_sum, mut frame_sum) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            let len = batch.iter().map(|s| s.len).min().unwrap();
            let arch = *self.model.arch();
            let mut state = CodecState::new(&arch, batch.len());
            let mut t0 = 0;
            while t0 < len {
                let w = self.config.bptt.min(len - t0);
                let mut tape = Tape::new();
                let bound = self.model.params.bind(&mut tape);
                let ts = state.to_tape(&mut tape);
                let mut inputs = Vec::with_capacity(w);
                for t in t0..t0 + w {
                    let mut rows = Vec::with_capacity(batch.len() * arch.frame_dim);
                    for s in batch {
                        rows.extend_from_slice(&self.train_norm[s.utt][s.start + t]);
                    }
                    inputs.push(tape.constant(Tensor::new(vec![batch.len(), arch.frame_dim], rows).map_err(NnError::from)?));
                }
                let net = &self.model.net;
                let steps = net.unroll(&mut tape, &bound, ts, &inputs)?;
                let dist = net.distortion(&mut tape, &steps, &inputs, &self.weights)?;
                let rate = net.rate_nats(&mut tape, &bound, &steps, self.config.tau)?;
                let loss = rd_loss(&mut tape, dist, rate, self.config.beta, w)?;
                let loss_v = tape.value(loss).item();
                if !loss_v.is_finite() {
                    let e = self.diverged(saved.clone());
                    self.model = saved;
                    return Err(e);
                }
                let rate_bits = match rate {
                    Some(r) => tape.value(r).item() / ln2,
                    None => (arch.latent_dim as f64 * (arch.levels as f64).log2()) * w as f64,
                };
                dist_sum += tape.value(dist).item() * w as f64;
                rate_sum += rate_bits;
                loss_sum += loss_v * w as f64;
                frame_sum += w;
                tape.backward(loss).map_err(NnError::from)?;
                self.model.params.accumulate_grads(&tape, &bound);
                self.model.params.clip_grad_norm(self.config.clip);
                if self.model.params.adam_step(&adam).is_err() {
                    let e = self.diverged(saved.clone());
                    self.model = saved;
                    return Err(e);
                }
                let next = steps.last().unwrap().next;
                state = CodecState::from_tape(arch.scheme, batch.len(), &tape, &next);
                t0 += w;
            }
        }
        self.epoch += 1;
        let n = frame_sum as f64;
        self.log.rows.push(LogRow {
            epoch: self.epoch,
            split: Split::Train,
            mel_mse: dist_sum / n,
            bits_per_frame: rate_sum / n,
            loss: loss_sum / n,
        });
        if !self.val.is_empty() {
            let m = evaluate(&self.model, &self.val)?;
            self.log.rows.push(LogRow {
                epoch: self.epoch,
                split: Split::Val,
                mel_mse: m.mel_mse,
                bits_per_frame: m.bits_per_frame,
                loss: m.mel_mse + self.config.beta * m.bits_per_frame * ln2,
            });
        }
        Ok(())
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Trained model plus its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
    pub validation: Vec<Spectrogram>,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    t.run()?;
    Ok(TrainOutcome {
        model: t.model,
        log: t.log,
        validation: t.val,
    })
}

/// Fits a fresh prior of `kind` to the latents a frozen codec produces on
/// `utterances`, by full-batch Adam on the code length. Codec weights and
/// normalization are copied unchanged.
pub fn fit_prior(model: &Model, kind: PriorKind, utterances: &[Spectrogram], steps: usize, lr: f64, seed: u64) -> Result<Model> {
    let arch = Architecture {
        prior: kind,
        ..*model.arch()
    };
    let mut fitted = Model::new(arch, seed)?;
    fitted.norm = model.norm.clone();
    let prior_names: Vec<String> = fitted
        .params
        .names()
        .filter(|n| n.starts_with("prior."))
        .map(str::to_string)
        .collect();
    for name in model.params.names().filter(|n| !n.starts_with("prior.")) {
        *fitted.params.get_mut(name)? = model.params.get(name)?.clone();
    }
    if kind == PriorKind::Uniform {
        return Ok(fitted);
    }
    let (d, k) = (arch.latent_dim, arch.levels);
    let cond_dim = arch.prior_cond_dim();
    let mut cond = Vec::new();
    let mut onehot = Vec::new();
    let mut rows = 0;
    // conditioning is replayed on the receiver's side: decoder state and
    // previous dequantized latent
    let mut codec = crate::schemes::StreamCodec::new(&fitted);
    for u in utterances {
        let mut state = codec.initial_state();
        let mut prev_yq = vec![0.0; d];
        for f in u.rows() {
            let before = state.clone();
            let e = codec.encode_step(&mut state, &fitted.norm.normalize(f))?;
            match kind {
                PriorKind::CondDecoderState => {
                    let h = before
                        .dec
                        .as_ref()
                        .ok_or_else(|| TrainError::Invalid("decoder-state prior needs decoder state".into()))?;
                    cond.extend_from_slice(h.data());
                }
                PriorKind::CondPrevLatent => cond.extend_from_slice(&prev_yq),
                _ => {}
            }
            for &i in &e.indices {
                let mut row = vec![0.0; k];
                row[i] = 1.0;
                onehot.extend(row);
            }
            prev_yq = e.yq;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(TrainError::Dataset("no frames to fit the prior on".into()));
    }
    let mut sub = ModelParams::new();
    for n in &prior_names {
        sub.insert(n, fitted.params.get(n)?.clone())?;
    }
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let cond_t = (cond_dim > 0)
        .then(|| Tensor::new(vec![rows, cond_dim], cond))
        .transpose()
        .map_err(NnError::from)?;
    let target = Tensor::new(vec![rows * d, k], onehot).map_err(NnError::from)?;
    let prior = &fitted.net.prior;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let b = sub.bind(&mut tape);
        let c = cond_t.clone().map(|t| tape.constant(t));
        let logits = prior.logits(&mut tape, &b, c, rows).map_err(CodecError::from)?;
        let a = tape.constant(target.clone());
        let r = prior.rate_nats(&mut tape, logits, a).map_err(CodecError::from)?;
        let r = tape.scale(r, 1.0 / rows as f64);
        tape.backward(r).map_err(NnError::from)?;
        sub.accumulate_grads(&tape, &b);
        sub.adam_step(&adam)?;
    }
    for n in &prior_names {
        *fitted.params.get_mut(n)? = sub.get(n)?.clone();
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scheme: SchemeId) -> TrainConfig {
        TrainConfig {
            scheme,
            latent_dim: 2,
            enc_hidden: 8,
            dec_hidden: 8,
            prior_hidden: 8,
            batch_size: 4,
            bptt: 8,
            segment_len: 16,
            epochs: 2,
            lr: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn data() -> Dataset {
        synth_dataset(&SynthSpec::ar1(10, 32, 3, 1)).unwrap()
    }

    #[test]
    fn config_parse_and_errors() {
        let c = TrainConfig::parse("# comment\nscheme = c\nD = 16\nbeta=0.004 # trailing\n\nprior = h\n").unwrap();
        assert_eq!(c.scheme, SchemeId::DecoderOnly);
        assert_eq!(c.latent_dim, 16);
        assert_eq!(c.beta, 0.004);
        assert_eq!(c.prior, PriorKind::CondDecoderState);
        match TrainConfig::parse("epochs = 3\n\nlr = fast\n") {
            Err(TrainError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match TrainConfig::parse("nope = 1") {
            Err(TrainError::Config { line: 1, msg }) => assert!(msg.contains("nope")),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::parse("missing equals").is_err());
        assert!(TrainConfig::parse("beta = -1").is_err());
        assert!(TrainConfig::parse("scheme = a\nprior = h").is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let c = TrainConfig {
            beta: 0.003,
            prior: PriorKind::TimeInvariant,
            ..tiny(SchemeId::Separate)
        };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn ar1_statistics() {
        let d = synth_dataset(&SynthSpec::ar1(4, 4000, 2, 9)).unwrap();
        let (mut num, mut den, mut sq, mut n) = (0.0, 0.0, 0.0, 0.0);
        for u in &d.utterances {
            for f in 0..2 {
                let x: Vec<f64> = (0..u.frames()).map(|t| u.frame(t)[f]).collect();
                num += x.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
                den += x[..x.len() - 1].iter().map(|v| v * v).sum::<f64>();
                sq += x.iter().map(|v| v * v).sum::<f64>();
                n += x.len() as f64;
            }
        }
        assert!((num / den - 0.95).abs() < 0.02, "lag-1 {}", num / den);
        assert!((sq / n - 1.0).abs() < 0.2);
    }

    #[test]
    fn rho_zero_is_white() {
        let mut s = SynthSpec::ar1(1, 20000, 1, 3);
        s.rho = 0.0;
        let d = synth_dataset(&s).unwrap();
        let x = d.utterances[0].data();
        let r: f64 = x.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / x.iter().map(|v| v * v).sum::<f64>();
        assert!(r.abs() < 0.03);
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in ["ar1:seed=4", "noisy_sines:utts=3,frames=50,bins=5,seed=4"] {
            let s = SynthSpec::parse(kind).unwrap();
            assert_eq!(synth_dataset(&s).unwrap(), synth_dataset(&s).unwrap());
        }
        let a = synth_dataset(&SynthSpec::parse("ar1:seed=1").unwrap()).unwrap();
        let b = synth_dataset(&SynthSpec::parse("ar1:seed=2").unwrap()).unwrap();
        assert_ne!(a, b);
        assert!(SynthSpec::parse("ar1:bogus=1").is_err());
    }

    #[test]
    fn split_is_disjoint_ninety_ten() {
        let d = synth_dataset(&SynthSpec::ar1(20, 4, 2, 0)).unwrap();
        let (tr, va) = d.split(0.1);
        assert_eq!((tr.len(), va.len()), (18, 2));
        assert!(va.iter().all(|v| !tr.contains(v)));
    }

    #[test]
    fn uniform_rate_term() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::scalar(1.5));
        let r = tape.constant(Tensor::scalar(3.0 * 8.0 * 4f64.ln()));
        let l = rd_loss(&mut tape, d, Some(r), 0.01, 3).unwrap();
        assert!((tape.value(l).item() - (1.5 + 0.01 * 8.0 * 4f64.ln())).abs() < 1e-12);
        let l0 = rd_loss(&mut tape, d, Some(r), 0.0, 3).unwrap();
        assert_eq!(tape.value(l0).item(), 1.5);
    }

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(0.0), "0");
        assert_eq!(fmt_g6(1600.0), "1600");
        assert_eq!(fmt_g6(1.23456789), "1.23457");
        assert_eq!(fmt_g6(0.000123456789), "0.000123457");
        assert_eq!(fmt_g6(1.5e-7), "1.5e-07");
        assert_eq!(fmt_g6(123456789.0), "1.23457e+08");
        assert_eq!(fmt_g6(-2.5), "-2.5");
        assert_eq!(fmt_g6(9.9999996), "10");
        assert_eq!(fmt_g6(999999.6), "1e+06");
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let d = data();
        let a = train(&tiny(SchemeId::Frae), &d).unwrap();
        let b = train(&tiny(SchemeId::Frae), &d).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.to_bytes(true), b.model.to_bytes(true));
        assert_eq!(a.log.rows.len(), 4);
        assert!(a.log.to_csv().starts_with(LOG_HEADER));
        assert_eq!(a.log.last(Split::Train).unwrap().bits_per_frame, 4.0);
    }

    #[test]
    fn resume_continues_the_log() {
        let d = data();
        let cfg = tiny(SchemeId::Separate);
        let full = train(&cfg, &d).unwrap();
        let mut first = Trainer::new(cfg.clone(), &d).unwrap();
        first.run_epoch().unwrap();
        let ck = first.checkpoint();
        let mut second = Trainer::resume(cfg, &d, &ck).unwrap();
        second.run().unwrap();
        let mut joined = first.log.rows.clone();
        joined.extend(second.log.rows.iter().copied());
        assert_eq!(joined, full.log.rows);
        assert_eq!(second.model.to_bytes(true), full.model.to_bytes(true));
    }

    #[test]
    fn every_scheme_and_prior_trains() {
        let d = data();
        for scheme in SchemeId::ALL {
            let mut cfg = tiny(scheme);
            cfg.epochs = 1;
            cfg.beta = 0.01;
            cfg.prior = if scheme.has_decoder_state() {
                PriorKind::CondDecoderState
            } else {
                PriorKind::CondPrevLatent
            };
            let out = train(&cfg, &d).unwrap();
            assert!(out.log.rows.iter().all(|r| r.loss.is_finite()), "{scheme}");
        }
    }

    #[test]
    fn constant_data_is_memorized() {
        let u = Spectrogram::new(64, 2, [3.0, -1.0].repeat(64)).unwrap();
        let d = Dataset::new(vec![u.clone(), u]).unwrap();
        let mut cfg = tiny(SchemeId::NoRecurrency);
        cfg.epochs = 50;
        let out = train(&cfg, &d).unwrap();
        // constant bins have zero variance, so the floored std makes the
        // normalized target 0 and any bias-only fit is exact
        assert!(out.log.last(Split::Val).unwrap().mel_mse < 1e-3);
    }

    #[test]
    fn divergence_restores_checkpoint() {
        let d = data();
        let mut t = Trainer::new(tiny(SchemeId::Frae), &d).unwrap();
        t.run_epoch().unwrap();
        let before = t.model.clone();
        t.model.params.get_mut("dec.fc_out.b").unwrap().data_mut()[0] = f64::NAN;
        let snapshot = t.model.clone();
        match t.run_epoch() {
            Err(TrainError::Diverged { epoch, checkpoint, log }) => {
                assert_eq!(epoch, 2);
                assert_eq!(log.rows.len(), 2);
                assert_eq!(checkpoint.to_bytes(false), snapshot.to_bytes(false));
            }
            other => panic!("{other:?}"),
        }
        assert_ne!(before.to_bytes(false), t.model.to_bytes(false));
    }

    #[test]
    fn rd_point_csv_round_trip() {
        let p = RdPoint {
            scheme: SchemeId::Frae,
            prior: PriorKind::CondDecoderState,
            latent_dim: 16,
            beta: 0.003,
            seed: 2,
            bits_per_frame: 21.25,
            bitrate: 2125.0,
            mel_mse: 0.5,
            spectral_snr: 12.75,
        };
        assert_eq!(RdPoint::from_csv_row(&p.to_csv_row()).unwrap(), p);
    }

    #[test]
    fn fit_prior_keeps_codec_and_lowers_code_length() {
        let d = data();
        let out = train(&tiny(SchemeId::Frae), &d).unwrap();
        let utts = &d.utterances;
        let before = evaluate(&out.model, utts).unwrap();
        for kind in [PriorKind::TimeInvariant, PriorKind::CondPrevLatent, PriorKind::CondDecoderState] {
            let fitted = fit_prior(&out.model, kind, utts, 150, 1e-2, 1).unwrap();
            assert_eq!(fitted.arch().prior, kind);
            assert_eq!(fitted.encode(&utts[0]).unwrap(), out.model.encode(&utts[0]).unwrap());
            let after = evaluate(&fitted, utts).unwrap();
            assert_eq!(after.mel_mse, before.mel_mse);
            assert!(after.bits_per_frame < before.bits_per_frame, "{kind}: {}", after.bits_per_frame);
        }
        let m = Model::new(tiny(SchemeId::EncoderOnly).architecture(3), 0).unwrap();
        assert!(fit_prior(&m, PriorKind::CondDecoderState, utts, 1, 1e-2, 0).is_err());
    }
}
