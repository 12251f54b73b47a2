//! Audio front-end: PCM16 WAV I/O, square-root-Hann STFT at 16 kHz with a
//! 320-sample window and 160-sample hop, dB spectrograms, Mel-weighted
//! error, Griffin-Lim phase recovery and the spectrogram dump format.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 320;
pub const HOP: usize = 160;
pub const BINS: usize = FFT_SIZE / 2 + 1;
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP as f64;
pub const HZ_PER_BIN: f64 = SAMPLE_RATE as f64 / FFT_SIZE as f64;
pub const MAG_FLOOR: f64 = 1e-5;
pub const SNR_CAP_DB: f64 = 99.0;

pub const SPEC_MAGIC: &[u8; 8] = b"FRAESPEC";

#[derive(Debug, Error)]
pub enum DspError {
    #[error("wav: {0}")]
    Wav(String),
    #[error("unsupported wav: {0}")]
    Unsupported(String),
    #[error("input too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    Shape {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("malformed spectrogram dump: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

// ---------------------------------------------------------------------------
// FFT

/// Mixed-radix decimation-in-time FFT for any length (radix 2, 3, 5 and
/// plain DFT butterflies for other prime factors).
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    factors: Vec<usize>,
    twiddles: Vec<Complex64>,
}

fn factorize(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "fft size must be positive");
        let twiddles = (0..n)
            .map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / n as f64))
            .collect();
        Fft {
            n,
            factors: factorize(n),
            twiddles,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[allow(clippy::too_many_arguments)]
    fn rec(&self, x: &[Complex64], start: usize, stride: usize, n: usize, depth: usize, inverse: bool, out: &mut [Complex64]) {
        if n == 1 {
            out[0] = x[start];
            return;
        }
        let p = self.factors[depth];
        let m = n / p;
        for r in 0..p {
            self.rec(
                x,
                start + r * stride,
                stride * p,
                m,
                depth + 1,
                inverse,
                &mut out[r * m..(r + 1) * m],
            );
        }
        let step = self.n / n;
        let mut combined = vec![Complex64::new(0.0, 0.0); n];
        for (k, c) in combined.iter_mut().enumerate() {
            let mut acc = out[k % m];
            for r in 1..p {
                let mut w = self.twiddles[(r * k % n) * step];
                if inverse {
                    w = w.conj();
                }
                acc += w * out[r * m + k % m];
            }
            *c = acc;
        }
        out.copy_from_slice(&combined);
    }

    pub fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        self.rec(x, 0, 1, self.n, 0, false, &mut out);
        out
    }

    /// Inverse transform including the `1/n` scale.
    pub fn inverse(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        self.rec(x, 0, 1, self.n, 0, true, &mut out);
        let s = 1.0 / self.n as f64;
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// One-sided spectrum (`n/2 + 1` bins) of a real signal.
    pub fn rfft(&self, x: &[f64]) -> Vec<Complex64> {
        let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut full = self.forward(&c);
        full.truncate(self.n / 2 + 1);
        full
    }

    /// Real signal from a one-sided spectrum, assuming Hermitian symmetry.
    pub fn irfft(&self, half: &[Complex64]) -> Vec<f64> {
        assert_eq!(half.len(), self.n / 2 + 1);
        let mut full = vec![Complex64::new(0.0, 0.0); self.n];
        full[..half.len()].copy_from_slice(half);
        for k in 1..self.n.div_ceil(2) {
            full[self.n - k] = half[k].conj();
        }
        self.inverse(&full).iter().map(|c| c.re).collect()
    }
}

// ---------------------------------------------------------------------------
// STFT

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Square root of the periodic Hann window; applied at both analysis and
/// synthesis so their product is a Hann window.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    hann(n).into_iter().map(f64::sqrt).collect()
}

pub fn frame_count(samples: usize) -> usize {
    if samples < FFT_SIZE {
        0
    } else {
        (samples - FFT_SIZE) / HOP + 1
    }
}

/// Complex STFT, `T × BINS`. Frame `t` covers samples `[t·HOP, t·HOP + FFT_SIZE)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: Vec<Vec<Complex64>>,
}

impl ComplexSpectrogram {
    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect()
    }
}

pub struct Stft {
    fft: Fft,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Stft::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        Stft {
            fft: Fft::new(FFT_SIZE),
            window: sqrt_hann(FFT_SIZE),
        }
    }

    pub fn stft(&self, samples: &[f64]) -> Result<ComplexSpectrogram> {
        if samples.len() < FFT_SIZE {
            return Err(DspError::TooShort {
                got: samples.len(),
                need: FFT_SIZE,
            });
        }
        let frames = (0..frame_count(samples.len()))
            .map(|t| {
                let seg: Vec<f64> = samples[t * HOP..t * HOP + FFT_SIZE]
                    .iter()
                    .zip(&self.window)
                    .map(|(s, w)| s * w)
                    .collect();
                self.fft.rfft(&seg)
            })
            .collect();
        Ok(ComplexSpectrogram { frames })
    }

    /// Least-squares overlap-add inverse: synthesis-windowed frames divided
    /// by the summed squared window. Samples no window covers are zero.
    pub fn istft(&self, spec: &ComplexSpectrogram) -> Vec<f64> {
        let t = spec.frames.len();
        if t == 0 {
            return Vec::new();
        }
        let len = (t - 1) * HOP + FFT_SIZE;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for (i, frame) in spec.frames.iter().enumerate() {
            let seg = self.fft.irfft(frame);
            for n in 0..FFT_SIZE {
                out[i * HOP + n] += seg[n] * self.window[n];
                norm[i * HOP + n] += self.window[n] * self.window[n];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            *o = if *w > 1e-10 { *o / w } else { 0.0 };
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Spectrograms

/// Real `T × F` frame matrix (dB values for audio).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bins || bins == 0 {
            return Err(DspError::Format(format!(
                "{frames}x{bins} needs {} values, got {}",
                frames * bins,
                data.len()
            )));
        }
        Ok(Spectrogram { frames, bins, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let bins = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != bins) {
            return Err(DspError::Format("ragged rows".into()));
        }
        Spectrogram::new(rows.len(), bins, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.bins)
    }

    /// `FRAESPEC` dump: magic, `T` u32, `F` u32, row-major f32, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(SPEC_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != SPEC_MAGIC {
            return Err(DspError::Format("bad magic or header".into()));
        }
        let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != t * f * 4 {
            return Err(DspError::Format(format!(
                "expected {} payload bytes, found {}",
                t * f * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Spectrogram::new(t, f, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Spectrogram::from_bytes(&bytes)
    }
}

pub fn to_db_value(m: f64) -> f64 {
    20.0 * m.max(MAG_FLOOR).log10()
}

pub fn from_db_value(v: f64) -> f64 {
    10f64.powf(v / 20.0)
}

/// `20·log10(max(m, 1e-5))` per magnitude.
pub fn to_db(magnitudes: &[Vec<f64>]) -> Result<Spectrogram> {
    let rows: Vec<Vec<f64>> = magnitudes.iter().map(|r| r.iter().map(|&m| to_db_value(m)).collect()).collect();
    Spectrogram::from_rows(&rows)
}

pub fn from_db(spec: &Spectrogram) -> Vec<Vec<f64>> {
    spec.rows().map(|r| r.iter().map(|&v| from_db_value(v)).collect()).collect()
}

/// dB-magnitude spectrogram of a waveform.
pub fn spectrogram(samples: &[f64]) -> Result<Spectrogram> {
    to_db(&Stft::new().stft(samples)?.magnitudes())
}

// ---------------------------------------------------------------------------
// Metrics

/// Perceptual weight of frequency `hz`: 1 up to 1 kHz, `969.672 / f` above.
pub fn mel_weight(hz: f64) -> f64 {
    if hz <= 1000.0 {
        1.0
    } else {
        969.672 / hz
    }
}

/// Weights for `bins` bins spaced `HZ_PER_BIN` apart starting at DC.
pub fn mel_weights(bins: usize) -> Vec<f64> {
    (0..bins).map(|b| mel_weight(b as f64 * HZ_PER_BIN)).collect()
}

fn check_same(op: &'static str, x: &Spectrogram, y: &Spectrogram) -> Result<()> {
    if x.frames != y.frames || x.bins != y.bins {
        return Err(DspError::Shape {
            op,
            a: (x.frames, x.bins),
            b: (y.frames, y.bins),
        });
    }
    Ok(())
}

/// Mean over frames of `Σ_f w[f]·(x − x̂)² / Σ_f w[f]`.
pub fn mel_mse(x: &Spectrogram, xhat: &Spectrogram) -> Result<f64> {
    check_same("mel_mse", x, xhat)?;
    if x.frames == 0 {
        return Ok(0.0);
    }
    let w = mel_weights(x.bins);
    let wsum: f64 = w.iter().sum();
    let total: f64 = x
        .rows()
        .zip(xhat.rows())
        .map(|(a, b)| a.iter().zip(b).zip(&w).map(|((p, q), wf)| wf * (p - q) * (p - q)).sum::<f64>() / wsum)
        .sum();
    Ok(total / x.frames as f64)
}

/// `10·log10(Σx² / Σ(x − x̂)²)`, capped at 99 dB.
pub fn spectral_snr(x: &Spectrogram, xhat: &Spectrogram) -> Result<f64> {
    check_same("spectral_snr", x, xhat)?;
    let signal: f64 = x.data.iter().map(|v| v * v).sum();
    let noise: f64 = x.data.iter().zip(&xhat.data).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

// ---------------------------------------------------------------------------
// Griffin-Lim

/// Waveform plus the spectral-consistency error `‖ |STFT(x_i)| − target ‖₂`
/// measured after each projection round.
#[derive(Debug, Clone)]
pub struct GriffinLimResult {
    pub samples: Vec<f64>,
    pub consistency: Vec<f64>,
}

fn consistency_error(spec: &ComplexSpectrogram, target: &[Vec<f64>]) -> f64 {
    spec.frames
        .iter()
        .zip(target)
        .flat_map(|(f, t)| f.iter().zip(t).map(|(c, m)| (c.norm() - m) * (c.norm() - m)))
        .sum::<f64>()
        .sqrt()
}

/// Alternating projections from a seeded uniform random phase.
pub fn griffin_lim(spec: &Spectrogram, iters: usize, seed: u64) -> GriffinLimResult {
    let target = from_db(spec);
    griffin_lim_magnitudes(&target, iters, seed)
}

pub fn griffin_lim_magnitudes(target: &[Vec<f64>], iters: usize, seed: u64) -> GriffinLimResult {
    let stft = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = ComplexSpectrogram {
        frames: target
            .iter()
            .map(|row| row.iter().map(|&m| Complex64::from_polar(m, rng.gen_range(-PI..PI))).collect())
            .collect(),
    };
    let mut samples = stft.istft(&current);
    let mut consistency = Vec::with_capacity(iters + 1);
    if samples.is_empty() {
        return GriffinLimResult { samples, consistency };
    }
    for _ in 0..iters {
        let achieved = stft.stft(&samples).expect("istft output spans at least one frame");
        consistency.push(consistency_error(&achieved, target));
        for (dst, (src, mags)) in current.frames.iter_mut().zip(achieved.frames.iter().zip(target)) {
            for ((d, s), &m) in dst.iter_mut().zip(src).zip(mags) {
                let norm = s.norm();
                *d = if norm > 0.0 { s * (m / norm) } else { Complex64::new(m, 0.0) };
            }
        }
        samples = stft.istft(&current);
    }
    let achieved = stft.stft(&samples).expect("istft output spans at least one frame");
    consistency.push(consistency_error(&achieved, target));
    GriffinLimResult { samples, consistency }
}

// ---------------------------------------------------------------------------
// WAV

/// Reads a RIFF/WAVE PCM16 mono 16 kHz file as samples in `[-1, 1)`.
pub fn wav_read(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    wav_read_bytes(&bytes)
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Walks the RIFF chunk list (odd-sized chunks carry one pad byte) and
/// decodes the `data` chunk after validating `fmt `.
pub fn wav_read_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Wav("not a RIFF/WAVE file".into()));
    }
    let end = (8 + le_u32(&bytes[4..8]) as usize).min(bytes.len());
    let mut pos = 12;
    let mut format_seen = false;
    while pos + 8 <= end {
        let id = &bytes[pos..pos + 4];
        let len = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|&e| e <= end)
            .ok_or_else(|| DspError::Wav(format!("chunk at byte {pos} overruns the file")))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(DspError::Wav("fmt chunk too short".into()));
                }
                let tag = le_u16(&body[0..2]);
                let channels = le_u16(&body[2..4]);
                let rate = le_u32(&body[4..8]);
                let bits = le_u16(&body[14..16]);
                if tag != 1 {
                    return Err(DspError::Unsupported(format!("format tag {tag} (need PCM)")));
                }
                if bits != 16 {
                    return Err(DspError::Unsupported(format!("{bits}-bit samples (need PCM16)")));
                }
                if channels != 1 {
                    return Err(DspError::Unsupported(format!("{channels} channels (need mono)")));
                }
                if rate != SAMPLE_RATE {
                    return Err(DspError::Unsupported(format!("{rate} Hz (need {SAMPLE_RATE})")));
                }
                format_seen = true;
            }
            b"data" => {
                if !format_seen {
                    return Err(DspError::Wav("data chunk before fmt chunk".into()));
                }
                if !len.is_multiple_of(2) {
                    return Err(DspError::Wav("data chunk holds a partial sample".into()));
                }
                return Ok(body
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect());
            }
            _ => {}
        }
        pos = body_end + (len & 1);
    }
    Err(DspError::Wav("missing data chunk".into()))
}

fn to_pcm(v: f64) -> i16 {
    (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Canonical 44-byte-header PCM16 mono 16 kHz file.
pub fn wav_write_bytes(samples: &[f64]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&to_pcm(s).to_le_bytes());
    }
    out
}

pub fn wav_write(path: &Path, samples: &[f64]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&wav_write_bytes(samples))?;
    Ok(())
}
