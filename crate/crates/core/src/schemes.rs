//! The seven recurrent autoencoder topologies behind one per-frame step.
//!
//! | scheme            | encoder input            | encoder GRU | decoder state |
//! |-------------------|--------------------------|-------------|---------------|
//! | `NoRecurrency`    | `x_t`                    | no          | no            |
//! | `EncoderOnly`     | `x_t`                    | yes         | no            |
//! | `DecoderOnly`     | `x_t`                    | no          | yes           |
//! | `Separate`        | `x_t`                    | yes         | yes           |
//! | `LatentFeedback`  | `[x_t, ŷ_{t−1}]`         | yes         | yes           |
//! | `OutputFeedback`  | `[x_t, x̂_{t−1}]`         | yes         | yes           |
//! | `Frae`            | `[x_t, h_{t−1}]`         | no          | yes           |
//!
//! Every decoder is `FC(D→H, tanh) → GRU(H→H) → FC(H→F)`. Schemes without
//! decoder state run the same GRU from a zero state at every frame, so all
//! schemes share one layer stack and differ only in what is carried between
//! frames. Recurrent and decoder paths consume dequantized latents `ŷ_t`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dsp::{self, DspError, Spectrogram};
use crate::nn::{round_f32, Activation, Bound, Codebook, GruCell, Linear, ModelParams, NnError};
use crate::prior::{self, PriorError, PriorKind, PriorModel};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("codec state does not match {0}")]
    StateMismatch(String),
    #[error("latent index {index} out of range for {levels} levels")]
    IndexOutOfRange { index: usize, levels: usize },
    #[error("frame width {got} does not match model width {expected}")]
    FrameWidth { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

impl From<AutodiffError> for CodecError {
    fn from(e: AutodiffError) -> Self {
        CodecError::Nn(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    NoRecurrency = 0,
    EncoderOnly = 1,
    DecoderOnly = 2,
    Separate = 3,
    LatentFeedback = 4,
    OutputFeedback = 5,
    Frae = 6,
}

impl SchemeId {
    pub const ALL: [SchemeId; 7] = [
        SchemeId::NoRecurrency,
        SchemeId::EncoderOnly,
        SchemeId::DecoderOnly,
        SchemeId::Separate,
        SchemeId::LatentFeedback,
        SchemeId::OutputFeedback,
        SchemeId::Frae,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        SchemeId::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::NoRecurrency => "no-recurrency",
            SchemeId::EncoderOnly => "encoder-only",
            SchemeId::DecoderOnly => "decoder-only",
            SchemeId::Separate => "separate",
            SchemeId::LatentFeedback => "latent-feedback",
            SchemeId::OutputFeedback => "output-feedback",
            SchemeId::Frae => "frae",
        }
    }

    pub fn has_encoder_state(self) -> bool {
        matches!(
            self,
            SchemeId::EncoderOnly | SchemeId::Separate | SchemeId::LatentFeedback | SchemeId::OutputFeedback
        )
    }

    pub fn has_decoder_state(self) -> bool {
        !matches!(self, SchemeId::NoRecurrency | SchemeId::EncoderOnly)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let by_letter = match s {
            "a" => Some(SchemeId::NoRecurrency),
            "b" => Some(SchemeId::EncoderOnly),
            "c" => Some(SchemeId::DecoderOnly),
            "d" => Some(SchemeId::Separate),
            "e" => Some(SchemeId::LatentFeedback),
            "f" => Some(SchemeId::OutputFeedback),
            _ => None,
        };
        by_letter
            .or_else(|| SchemeId::ALL.into_iter().find(|id| id.name() == s))
            .ok_or_else(|| format!("unknown scheme '{s}'"))
    }
}

/// Layer sizes and wiring of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub scheme: SchemeId,
    pub prior: PriorKind,
    pub frame_dim: usize,
    pub latent_dim: usize,
    pub levels: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prior_hidden: usize,
}

impl Architecture {
    pub fn new(scheme: SchemeId, frame_dim: usize, latent_dim: usize) -> Self {
        Architecture {
            scheme,
            prior: PriorKind::Uniform,
            frame_dim,
            latent_dim,
            levels: 4,
            enc_hidden: 128,
            dec_hidden: 128,
            prior_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.frame_dim, self.latent_dim, self.enc_hidden, self.dec_hidden, self.prior_hidden];
        if positive.contains(&0) {
            return Err(CodecError::InvalidArch("all dimensions must be positive".into()));
        }
        if !(2..=255).contains(&self.levels) {
            return Err(CodecError::InvalidArch(format!("{} levels (need 2..=255)", self.levels)));
        }
        if self.latent_dim > u16::MAX as usize {
            return Err(CodecError::InvalidArch("latent dimension exceeds 65535".into()));
        }
        if self.prior == PriorKind::CondDecoderState && !self.scheme.has_decoder_state() {
            return Err(CodecError::InvalidArch(format!(
                "{} prior needs a scheme with decoder state, not {}",
                self.prior, self.scheme
            )));
        }
        Ok(())
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.frame_dim
            + match self.scheme {
                SchemeId::LatentFeedback => self.latent_dim,
                SchemeId::OutputFeedback => self.frame_dim,
                SchemeId::Frae => self.dec_hidden,
                _ => 0,
            }
    }

    pub fn prior_cond_dim(&self) -> usize {
        match self.prior {
            PriorKind::CondPrevLatent => self.latent_dim,
            PriorKind::CondDecoderState => self.dec_hidden,
            _ => 0,
        }
    }

    fn needs_prev_latent(&self) -> bool {
        self.scheme == SchemeId::LatentFeedback || self.prior == PriorKind::CondPrevLatent
    }

    fn needs_prev_output(&self) -> bool {
        self.scheme == SchemeId::OutputFeedback
    }

    fn to_meta(self) -> Tensor {
        let v = [
            self.scheme.code() as usize,
            self.prior.code() as usize,
            self.frame_dim,
            self.latent_dim,
            self.levels,
            self.enc_hidden,
            self.dec_hidden,
            self.prior_hidden,
        ];
        Tensor::row(&v.map(|x| x as f64))
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != 8 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(CodecError::Format("bad meta.arch entry".into()));
        }
        let u = |i: usize| v[i] as usize;
        let arch = Architecture {
            scheme: SchemeId::from_code(u(0) as u8).ok_or_else(|| CodecError::Format("unknown scheme code".into()))?,
            prior: PriorKind::from_code(u(1) as u8).ok_or_else(|| CodecError::Format("unknown prior code".into()))?,
            frame_dim: u(2),
            latent_dim: u(3),
            levels: u(4),
            enc_hidden: u(5),
            dec_hidden: u(6),
            prior_hidden: u(7),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Recurrent state of one or more streams (one row per stream). Exactly the
/// slots the scheme and prior read are present; all start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecState {
    pub scheme: SchemeId,
    pub batch: usize,
    pub enc: Option<Tensor>,
    pub dec: Option<Tensor>,
    pub prev_latent: Option<Tensor>,
    pub prev_output: Option<Tensor>,
}

impl CodecState {
    pub fn new(arch: &Architecture, batch: usize) -> Self {
        let zeros = |present: bool, width: usize| present.then(|| Tensor::zeros(&[batch, width]));
        CodecState {
            scheme: arch.scheme,
            batch,
            enc: zeros(arch.scheme.has_encoder_state(), arch.enc_hidden),
            dec: zeros(arch.scheme.has_decoder_state(), arch.dec_hidden),
            prev_latent: zeros(arch.needs_prev_latent(), arch.latent_dim),
            prev_output: zeros(arch.needs_prev_output(), arch.frame_dim),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.enc.is_none() && self.dec.is_none() && self.prev_latent.is_none() && self.prev_output.is_none()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        let expected = CodecState::new(arch, self.batch);
        let shape = |t: &Option<Tensor>| t.as_ref().map(|t| t.shape().to_vec());
        let same = self.scheme == expected.scheme
            && shape(&self.enc) == shape(&expected.enc)
            && shape(&self.dec) == shape(&expected.dec)
            && shape(&self.prev_latent) == shape(&expected.prev_latent)
            && shape(&self.prev_output) == shape(&expected.prev_output);
        if !same {
            return Err(CodecError::StateMismatch(format!("{} / {} prior", arch.scheme, arch.prior)));
        }
        Ok(())
    }

    /// Records the state on `tape` as constants (no gradient crosses
    /// truncation boundaries).
    pub fn to_tape(&self, tape: &mut Tape) -> TapeState {
        let mut c = |t: &Option<Tensor>| t.as_ref().map(|t| tape.constant(t.clone()));
        TapeState {
            enc: c(&self.enc),
            dec: c(&self.dec),
            prev_latent: c(&self.prev_latent),
            prev_output: c(&self.prev_output),
        }
    }

    pub fn from_tape(scheme: SchemeId, batch: usize, tape: &Tape, s: &TapeState) -> Self {
        let v = |var: Option<Var>| var.map(|v| tape.value(v).clone());
        CodecState {
            scheme,
            batch,
            enc: v(s.enc),
            dec: v(s.dec),
            prev_latent: v(s.prev_latent),
            prev_output: v(s.prev_output),
        }
    }
}

/// [`CodecState`] slots as tape handles.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapeState {
    pub enc: Option<Var>,
    pub dec: Option<Var>,
    pub prev_latent: Option<Var>,
    pub prev_output: Option<Var>,
}

/// Tape handles produced by one encoder+decoder frame step.
#[derive(Debug, Clone)]
pub struct FrameStep {
    pub y: Var,
    pub yq: Var,
    pub indices: Vec<usize>,
    pub xhat: Var,
    /// Prior logits `[(B·D) × K]` for this frame's latents.
    pub logits: Var,
    pub next: TapeState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    enc_in: Linear,
    enc_gru: Option<GruCell>,
    enc_out: Linear,
    pub codebook: Codebook,
    dec_in: Linear,
    dec_gru: GruCell,
    dec_out: Linear,
    pub prior: PriorModel,
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let eh = arch.enc_hidden;
        let dh = arch.dec_hidden;
        Ok(Network {
            arch,
            enc_in: Linear::new("enc.fc_in", arch.encoder_input_dim(), eh, Activation::Tanh),
            enc_gru: arch.scheme.has_encoder_state().then(|| GruCell::new("enc.gru", eh, eh)),
            enc_out: Linear::new("enc.fc_out", eh, arch.latent_dim, Activation::Linear),
            codebook: Codebook::new("codebook", arch.latent_dim, arch.levels),
            dec_in: Linear::new("dec.fc_in", arch.latent_dim, dh, Activation::Tanh),
            dec_gru: GruCell::new("dec.gru", dh, dh),
            dec_out: Linear::new("dec.fc_out", dh, arch.frame_dim, Activation::Linear),
            prior: PriorModel::new(arch.prior, arch.latent_dim, arch.levels, arch.prior_cond_dim(), arch.prior_hidden),
        })
    }

    /// Fresh parameters from a seeded generator.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        self.enc_in.init(&mut params, &mut rng)?;
        if let Some(g) = &self.enc_gru {
            g.init(&mut params, &mut rng)?;
        }
        self.enc_out.init(&mut params, &mut rng)?;
        self.codebook.init(&mut params)?;
        self.dec_in.init(&mut params, &mut rng)?;
        self.dec_gru.init(&mut params, &mut rng)?;
        self.dec_out.init(&mut params, &mut rng)?;
        self.prior.init(&mut params, &mut rng)?;
        Ok(params)
    }

    fn batch_of(&self, tape: &Tape, x: Var) -> Result<usize> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.arch.frame_dim {
            return Err(CodecError::FrameWidth {
                expected: self.arch.frame_dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        Ok(shape[0])
    }

    fn slot(&self, v: Option<Var>, what: &str) -> Result<Var> {
        v.ok_or_else(|| CodecError::StateMismatch(format!("{} (missing {what} state)", self.arch.scheme)))
    }

    /// Encoder half of a step: latent `y`, its quantization and the next
    /// encoder-GRU state.
    pub fn encode_frame(&self, tape: &mut Tape, b: &Bound, state: &TapeState, x: Var) -> Result<(Var, Var, Vec<usize>, Option<Var>)> {
        self.batch_of(tape, x)?;
        let input = match self.arch.scheme {
            SchemeId::LatentFeedback => {
                let z = self.slot(state.prev_latent, "latent")?;
                tape.concat(&[x, z])?
            }
            SchemeId::OutputFeedback => {
                let o = self.slot(state.prev_output, "output")?;
                tape.concat(&[x, o])?
            }
            SchemeId::Frae => {
                let h = self.slot(state.dec, "decoder")?;
                tape.concat(&[x, h])?
            }
            _ => x,
        };
        let mut a = self.enc_in.forward(tape, b, input)?;
        let mut enc_next = None;
        if let Some(gru) = &self.enc_gru {
            let e = self.slot(state.enc, "encoder")?;
            a = gru.step(tape, b, a, e)?;
            enc_next = Some(a);
        }
        let y = self.enc_out.forward(tape, b, a)?;
        let (yq, indices) = self.codebook.quantize(tape, b, y)?;
        Ok((y, yq, indices, enc_next))
    }

    /// Decoder half of a step: reconstruction and the next decoder state.
    pub fn decode_frame(&self, tape: &mut Tape, b: &Bound, state: &TapeState, yq: Var) -> Result<(Var, Option<Var>)> {
        let batch = tape.shape(yq)[0];
        let u = self.dec_in.forward(tape, b, yq)?;
        let h_prev = if self.arch.scheme.has_decoder_state() {
            self.slot(state.dec, "decoder")?
        } else {
            tape.constant(Tensor::zeros(&[batch, self.arch.dec_hidden]))
        };
        let h = self.dec_gru.step(tape, b, u, h_prev)?;
        let xhat = self.dec_out.forward(tape, b, h)?;
        Ok((xhat, self.arch.scheme.has_decoder_state().then_some(h)))
    }

    /// Prior logits for the next frame given the state before it.
    pub fn prior_logits(&self, tape: &mut Tape, b: &Bound, state: &TapeState, batch: usize) -> Result<Var> {
        let cond = match self.arch.prior {
            PriorKind::CondPrevLatent => Some(self.slot(state.prev_latent, "latent")?),
            PriorKind::CondDecoderState => Some(self.slot(state.dec, "decoder")?),
            _ => None,
        };
        Ok(self.prior.logits(tape, b, cond, batch)?)
    }

    fn advance(&self, enc: Option<Var>, dec: Option<Var>, yq: Var, xhat: Var) -> TapeState {
        TapeState {
            enc,
            dec,
            prev_latent: self.arch.needs_prev_latent().then_some(yq),
            prev_output: self.arch.needs_prev_output().then_some(xhat),
        }
    }

    /// Full analysis-by-synthesis step: encode `x`, then run the decoder on
    /// the quantized latent so the returned state is exactly what a
    /// receiver holding only the indices computes.
    pub fn step(&self, tape: &mut Tape, b: &Bound, state: &TapeState, x: Var) -> Result<FrameStep> {
        let batch = self.batch_of(tape, x)?;
        let logits = self.prior_logits(tape, b, state, batch)?;
        let (y, yq, indices, enc_next) = self.encode_frame(tape, b, state, x)?;
        let (xhat, dec_next) = self.decode_frame(tape, b, state, yq)?;
        Ok(FrameStep {
            y,
            yq,
            indices,
            xhat,
            logits,
            next: self.advance(enc_next, dec_next, yq, xhat),
        })
    }

    /// Receiver-side step from transmitted indices (`B·D` values).
    pub fn decode_step(&self, tape: &mut Tape, b: &Bound, state: &TapeState, indices: &[usize]) -> Result<(Var, TapeState)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.arch.levels) {
            return Err(CodecError::IndexOutOfRange {
                index: bad,
                levels: self.arch.levels,
            });
        }
        let yq = self.codebook.dequantize(tape, b, indices)?;
        let (xhat, dec_next) = self.decode_frame(tape, b, state, yq)?;
        Ok((xhat, self.advance(state.enc, dec_next, yq, xhat)))
    }

    /// Applies [`Network::step`] over a sequence of `[B × F]` frames on one
    /// tape so gradients flow through time.
    pub fn unroll(&self, tape: &mut Tape, b: &Bound, state: TapeState, frames: &[Var]) -> Result<Vec<FrameStep>> {
        let mut steps = Vec::with_capacity(frames.len());
        let mut s = state;
        for &x in frames {
            let step = self.step(tape, b, &s, x)?;
            s = step.next;
            steps.push(step);
        }
        Ok(steps)
    }

    /// Mean over frames of the weighted squared error between
    /// reconstructions and targets.
    pub fn distortion(&self, tape: &mut Tape, steps: &[FrameStep], targets: &[Var], weights: &[f64]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (s, &x) in steps.iter().zip(targets) {
            let d = tape.weighted_sq_error(s.xhat, x, weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
        let total = total.ok_or_else(|| CodecError::InvalidArch("unroll needs at least one frame".into()))?;
        Ok(tape.scale(total, 1.0 / steps.len() as f64))
    }

    /// Rate term in nats summed over the frames, averaged over the batch.
    /// Forward value is the code length of the hard indices; the gradient
    /// reaches the encoder through a soft assignment with temperature `tau`.
    pub fn rate_nats(&self, tape: &mut Tape, b: &Bound, steps: &[FrameStep], tau: f64) -> Result<Option<Var>> {
        if self.arch.prior == PriorKind::Uniform || steps.is_empty() {
            return Ok(None);
        }
        let k = self.arch.levels;
        let codebook = b.var(&self.codebook.name)?;
        let batch = tape.shape(steps[0].y)[0];
        let mut total: Option<Var> = None;
        for s in steps {
            let mut onehot = vec![0.0; s.indices.len() * k];
            for (n, &i) in s.indices.iter().enumerate() {
                onehot[n * k + i] = 1.0;
            }
            let hard = Tensor::new(vec![s.indices.len(), k], onehot)?;
            let soft = tape.soft_assign(s.y, codebook, tau)?;
            let assign = tape.straight_through(hard, soft)?;
            let r = self.prior.rate_nats(tape, s.logits, assign)?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
        Ok(total.map(|t| tape.scale(t, 1.0 / batch as f64)))
    }
}

/// Per-bin affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(bins: usize) -> Self {
        Normalizer {
            mean: vec![0.0; bins],
            std: vec![1.0; bins],
        }
    }

    /// Per-bin statistics over every frame, stored at `f32` precision.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a [f64]>, bins: usize) -> Self {
        let mut sum = vec![0.0; bins];
        let mut sq = vec![0.0; bins];
        let mut n = 0usize;
        for f in frames {
            for (i, v) in f.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Normalizer::identity(bins);
        }
        let mut mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        round_f32(&mut mean);
        round_f32(&mut std);
        Normalizer { mean, std }
    }

    pub fn normalize(&self, frame: &[f64]) -> Vec<f64> {
        frame.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, frame: &[f64]) -> Vec<f64> {
        frame.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }

    /// Per-bin weights that make a squared error on normalized frames equal
    /// the Mel-weighted MSE of the denormalized frames.
    pub fn distortion_weights(&self) -> Vec<f64> {
        let mel = dsp::mel_weights(self.mean.len());
        let total: f64 = mel.iter().sum();
        mel.iter().zip(&self.std).map(|(w, s)| w * s * s / total).collect()
    }
}

/// `T × D` codebook indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSequence {
    pub dim: usize,
    pub levels: usize,
    pub indices: Vec<usize>,
}

impl LatentSequence {
    pub fn new(dim: usize, levels: usize, indices: Vec<usize>) -> Result<Self> {
        if dim == 0 || !indices.len().is_multiple_of(dim) {
            return Err(CodecError::InvalidArch(format!(
                "{} indices do not fill rows of {dim}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= levels) {
            return Err(CodecError::IndexOutOfRange { index: bad, levels });
        }
        Ok(LatentSequence { dim, levels, indices })
    }

    pub fn frames(&self) -> usize {
        self.indices.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        &self.indices[t * self.dim..(t + 1) * self.dim]
    }
}

/// Result of running a model over an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcoded {
    pub latents: LatentSequence,
    pub reconstruction: Spectrogram,
    pub distortion: f64,
    /// Ideal code length of each frame under the model's prior, in bits.
    pub frame_bits: Vec<f64>,
}

const META_ARCH: &str = "meta.arch";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Architecture, trained parameters and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Network,
    pub params: ModelParams,
    pub norm: Normalizer,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let net = Network::new(arch)?;
        let params = net.init_params(seed)?;
        Ok(Model {
            net,
            params,
            norm: Normalizer::identity(arch.frame_dim),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.net.arch
    }

    fn extras(&self) -> Vec<(String, Tensor)> {
        vec![
            (META_ARCH.to_string(), self.net.arch.to_meta()),
            (NORM_MEAN.to_string(), Tensor::row(&self.norm.mean)),
            (NORM_STD.to_string(), Tensor::row(&self.norm.std)),
        ]
    }

    /// Model file bytes (`FRAEPARM` layout); `with_optimizer` adds the Adam
    /// state needed to resume training.
    pub fn to_bytes(&self, with_optimizer: bool) -> Vec<u8> {
        self.to_bytes_with(&[], with_optimizer)
    }

    /// [`Model::to_bytes`] with additional named tensors.
    pub fn to_bytes_with(&self, extra: &[(String, Tensor)], with_optimizer: bool) -> Vec<u8> {
        let mut all = self.extras();
        all.extend_from_slice(extra);
        self.params.to_bytes_with(&all, with_optimizer)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Model::from_params(ModelParams::from_bytes(bytes)?)
    }

    /// Splits a parsed model file into architecture, normalizer and
    /// weights, checking every expected parameter is present.
    pub fn from_params(mut params: ModelParams) -> Result<Self> {
        let missing = |n: &str| CodecError::Format(format!("missing {n}"));
        let arch = Architecture::from_meta(&params.remove(META_ARCH).ok_or_else(|| missing(META_ARCH))?)?;
        let mean = params.remove(NORM_MEAN).ok_or_else(|| missing(NORM_MEAN))?.into_data();
        let std = params.remove(NORM_STD).ok_or_else(|| missing(NORM_STD))?.into_data();
        if mean.len() != arch.frame_dim || std.len() != arch.frame_dim {
            return Err(CodecError::Format("normalization width mismatch".into()));
        }
        let net = Network::new(arch)?;
        let reference = net.init_params(0)?;
        for name in reference.names() {
            let expected = reference.get(name)?.shape();
            let found = params.get(name).map_err(|_| missing(name))?.shape();
            if expected != found {
                return Err(CodecError::Format(format!("{name}: shape {found:?}, expected {expected:?}")));
            }
        }
        if params.len() != reference.len() {
            return Err(CodecError::Format("unexpected extra parameters".into()));
        }
        Ok(Model {
            net,
            params,
            norm: Normalizer { mean, std },
        })
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        std::fs::write(path, self.to_bytes(with_optimizer)).map_err(NnError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(NnError::from)?;
        Model::from_bytes(&bytes)
    }

    /// Fingerprint of the inference-relevant model file contents.
    pub fn hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_bytes(false));
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn check_width(&self, spec: &Spectrogram) -> Result<()> {
        if spec.bins() != self.arch().frame_dim {
            return Err(CodecError::FrameWidth {
                expected: self.arch().frame_dim,
                got: spec.bins(),
            });
        }
        Ok(())
    }

    /// Runs the whole utterance through [`Network::unroll`] on one tape.
    pub fn run(&self, frames: &Spectrogram) -> Result<Transcoded> {
        self.check_width(frames)?;
        let arch = *self.arch();
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let state = CodecState::new(&arch, 1).to_tape(&mut tape);
        let inputs: Vec<Var> = frames.rows().map(|f| tape.constant(Tensor::row(&self.norm.normalize(f)))).collect();
        let steps = self.net.unroll(&mut tape, &b, state, &inputs)?;
        let mut indices = Vec::with_capacity(frames.frames() * arch.latent_dim);
        let mut recon = Vec::with_capacity(frames.data().len());
        let mut frame_bits = Vec::with_capacity(frames.frames());
        for s in &steps {
            indices.extend_from_slice(&s.indices);
            recon.extend(self.norm.denormalize(tape.value(s.xhat).data()));
            let p = prior::probabilities(tape.value(s.logits));
            frame_bits.push(prior::nll_bits(&p, arch.levels, &s.indices));
        }
        let reconstruction = Spectrogram::new(frames.frames(), arch.frame_dim, recon)?;
        Ok(Transcoded {
            latents: LatentSequence::new(arch.latent_dim, arch.levels, indices)?,
            distortion: dsp::mel_mse(frames, &reconstruction)?,
            reconstruction,
            frame_bits,
        })
    }

    /// Streaming encode, one frame at a time.
    pub fn encode(&self, frames: &Spectrogram) -> Result<LatentSequence> {
        self.check_width(frames)?;
        let mut codec = StreamCodec::new(self);
        let mut state = codec.initial_state();
        let mut indices = Vec::new();
        for f in frames.rows() {
            indices.extend(codec.encode_step(&mut state, &self.norm.normalize(f))?.indices);
        }
        LatentSequence::new(self.arch().latent_dim, self.arch().levels, indices)
    }

    /// Streaming decode from indices alone.
    pub fn decode(&self, latents: &LatentSequence) -> Result<Spectrogram> {
        let mut codec = StreamCodec::new(self);
        let mut state = codec.initial_state();
        let mut out = Vec::new();
        for t in 0..latents.frames() {
            let xhat = codec.decode_step(&mut state, latents.frame(t))?;
            out.extend(self.norm.denormalize(&xhat));
        }
        Ok(Spectrogram::new(latents.frames(), self.arch().frame_dim, out)?)
    }
}

/// One transmitted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub indices: Vec<usize>,
    pub yq: Vec<f64>,
}

/// Frame-at-a-time encoder/decoder for a single stream. Parameters are
/// recorded once; each step reuses the tape beyond them.
pub struct StreamCodec<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    base: usize,
}

impl<'m> StreamCodec<'m> {
    pub fn new(model: &'m Model) -> Self {
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let base = tape.len();
        StreamCodec { model, tape, bound, base }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn initial_state(&self) -> CodecState {
        CodecState::new(self.model.arch(), 1)
    }

    fn begin(&mut self, state: &CodecState) -> Result<TapeState> {
        state.check(self.model.arch())?;
        if state.batch != 1 {
            return Err(CodecError::StateMismatch("a single stream".into()));
        }
        self.tape.truncate(self.base);
        Ok(state.to_tape(&mut self.tape))
    }

    /// Encodes one normalized frame and advances `state` through the
    /// decoder (analysis-by-synthesis).
    pub fn encode_step(&mut self, state: &mut CodecState, frame: &[f64]) -> Result<EncodedFrame> {
        let s = self.begin(state)?;
        let net = &self.model.net;
        let x = self.tape.constant(Tensor::row(frame));
        let (_, yq, indices, enc_next) = net.encode_frame(&mut self.tape, &self.bound, &s, x)?;
        let (xhat, dec_next) = net.decode_frame(&mut self.tape, &self.bound, &s, yq)?;
        let next = net.advance(enc_next, dec_next, yq, xhat);
        *state = CodecState::from_tape(state.scheme, 1, &self.tape, &next);
        Ok(EncodedFrame {
            indices,
            yq: self.tape.value(yq).data().to_vec(),
        })
    }

    /// Decodes one frame of indices to a normalized reconstruction.
    pub fn decode_step(&mut self, state: &mut CodecState, indices: &[usize]) -> Result<Vec<f64>> {
        if indices.len() != self.model.arch().latent_dim {
            return Err(CodecError::StateMismatch(format!(
                "{} indices per frame, got {}",
                self.model.arch().latent_dim,
                indices.len()
            )));
        }
        let s = self.begin(state)?;
        let (xhat, next) = self.model.net.decode_step(&mut self.tape, &self.bound, &s, indices)?;
        *state = CodecState::from_tape(state.scheme, 1, &self.tape, &next);
        Ok(self.tape.value(xhat).data().to_vec())
    }

    /// Prior probabilities `[D × K]` for the frame that follows `state`.
    pub fn prior_probabilities(&mut self, state: &CodecState) -> Result<Vec<f64>> {
        let s = self.begin(state)?;
        let logits = self.model.net.prior_logits(&mut self.tape, &self.bound, &s, 1)?;
        Ok(prior::probabilities(self.tape.value(logits)))
    }
}
