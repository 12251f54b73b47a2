//! Latent sequence serialization: a 28-byte header followed by either a
//! fixed-rate packed payload or an arithmetic-coded payload driven by the
//! model's prior.
//!
//! Header (little-endian):
//!
//! | offset | size | field         |
//! |--------|------|---------------|
//! | 0      | 8    | `FRAEBITS`    |
//! | 8      | 2    | version       |
//! | 10     | 1    | mode          |
//! | 11     | 1    | scheme code   |
//! | 12     | 1    | prior code    |
//! | 13     | 2    | D             |
//! | 15     | 1    | K             |
//! | 16     | 4    | frame count   |
//! | 20     | 8    | model hash    |

use thiserror::Error;

use crate::prior::PriorKind;
use crate::schemes::{CodecError, LatentSequence, Model, SchemeId, StreamCodec};

pub const MAGIC: &[u8; 8] = b"FRAEBITS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

/// Total of every quantized frequency table.
pub const PROB_TOTAL: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum BitstreamError {
    #[error("bad header: {0}")]
    Header(String),
    #[error("payload truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("model hash mismatch: stream {stream:016x}, model {model:016x}")]
    HashMismatch { stream: u64, model: u64 },
    #[error("stream does not match model: {0}")]
    ModelMismatch(String),
    #[error("fixed-rate mode needs a power-of-two alphabet, got K={0}")]
    NotPowerOfTwo(usize),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, BitstreamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fixed = 0,
    Arithmetic = 1,
}

impl Mode {
    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Mode::Fixed),
            1 => Some(Mode::Arithmetic),
            _ => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Mode::Fixed),
            "arith" | "arithmetic" => Ok(Mode::Arithmetic),
            _ => Err(format!("unknown mode '{s}' (fixed|arith)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    pub mode: Mode,
    pub scheme: SchemeId,
    pub prior: PriorKind,
    pub latent_dim: u16,
    pub levels: u8,
    pub frame_count: u32,
    pub model_hash: u64,
}

impl StreamHeader {
    pub fn for_model(model: &Model, mode: Mode, frame_count: usize) -> Result<Self> {
        let a = model.arch();
        let frame_count = u32::try_from(frame_count).map_err(|_| BitstreamError::Header("too many frames".into()))?;
        Ok(StreamHeader {
            version: VERSION,
            mode,
            scheme: a.scheme,
            prior: a.prior,
            latent_dim: a.latent_dim as u16,
            levels: a.levels as u8,
            frame_count,
            model_hash: model.hash(),
        })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..8].copy_from_slice(MAGIC);
        b[8..10].copy_from_slice(&self.version.to_le_bytes());
        b[10] = self.mode as u8;
        b[11] = self.scheme.code();
        b[12] = self.prior.code();
        b[13..15].copy_from_slice(&self.latent_dim.to_le_bytes());
        b[15] = self.levels;
        b[16..20].copy_from_slice(&self.frame_count.to_le_bytes());
        b[20..28].copy_from_slice(&self.model_hash.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| BitstreamError::Header(m.to_string());
        if b.len() < HEADER_LEN {
            return Err(bad("shorter than 28 bytes"));
        }
        if &b[..8] != MAGIC {
            return Err(bad("magic"));
        }
        let version = u16::from_le_bytes([b[8], b[9]]);
        if version != VERSION {
            return Err(BitstreamError::Header(format!("unsupported version {version}")));
        }
        let h = StreamHeader {
            version,
            mode: Mode::from_code(b[10]).ok_or_else(|| bad("mode"))?,
            scheme: SchemeId::from_code(b[11]).ok_or_else(|| bad("scheme"))?,
            prior: PriorKind::from_code(b[12]).ok_or_else(|| bad("prior kind"))?,
            latent_dim: u16::from_le_bytes([b[13], b[14]]),
            levels: b[15],
            frame_count: u32::from_le_bytes(b[16..20].try_into().unwrap()),
            model_hash: u64::from_le_bytes(b[20..28].try_into().unwrap()),
        };
        if h.latent_dim == 0 || h.levels < 2 {
            return Err(bad("empty latent space"));
        }
        Ok(h)
    }

    /// Fails unless the stream was produced by `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let a = model.arch();
        if self.scheme != a.scheme || self.prior != a.prior || self.latent_dim as usize != a.latent_dim || self.levels as usize != a.levels
        {
            return Err(BitstreamError::ModelMismatch(format!(
                "stream {}/{}/D={}/K={}, model {}/{}/D={}/K={}",
                self.scheme, self.prior, self.latent_dim, self.levels, a.scheme, a.prior, a.latent_dim, a.levels
            )));
        }
        let h = model.hash();
        if self.model_hash != h {
            return Err(BitstreamError::HashMismatch {
                stream: self.model_hash,
                model: h,
            });
        }
        Ok(())
    }
}

/// MSB-first bit sink.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    pub fn push(&mut self, bit: bool) {
        if self.bits.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    pub fn push_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.push((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit source; reads past the end yield zeros and are counted.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn next_bit(&mut self) -> bool {
        let byte = (self.pos / 8) as usize;
        let bit = self.bytes.get(byte).is_some_and(|b| b & (0x80 >> (self.pos % 8)) != 0);
        self.pos += 1;
        bit
    }

    pub fn read_bits(&mut self, n: u32) -> u64 {
        (0..n).fold(0, |acc, _| (acc << 1) | self.next_bit() as u64)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Bits consumed beyond the end of the buffer.
    pub fn overrun(&self) -> u64 {
        self.pos.saturating_sub(self.bytes.len() as u64 * 8)
    }
}

fn bits_per_symbol(levels: usize) -> Result<u32> {
    if !levels.is_power_of_two() {
        return Err(BitstreamError::NotPowerOfTwo(levels));
    }
    Ok(levels.trailing_zeros())
}

/// Fixed-rate payload: `log2 K` bits per index, frame-major, MSB first.
pub fn pack_fixed(latents: &LatentSequence) -> Result<Vec<u8>> {
    let bits = bits_per_symbol(latents.levels)?;
    let mut w = BitWriter::new();
    for &i in &latents.indices {
        w.push_bits(i as u64, bits);
    }
    Ok(w.into_bytes())
}

pub fn unpack_fixed(payload: &[u8], frames: usize, dim: usize, levels: usize) -> Result<LatentSequence> {
    let bits = bits_per_symbol(levels)?;
    let total = frames as u64 * dim as u64 * bits as u64;
    let need = total.div_ceil(8) as usize;
    if payload.len() < need {
        return Err(BitstreamError::Truncated);
    }
    if payload.len() > need {
        return Err(BitstreamError::TrailingData(payload.len() - need));
    }
    let mut r = BitReader::new(payload);
    let indices = (0..frames * dim).map(|_| r.read_bits(bits) as usize).collect();
    Ok(LatentSequence::new(dim, levels, indices)?)
}

/// Quantizes a distribution to integer frequencies summing to
/// [`PROB_TOTAL`]: `1 + ⌊p·(total − K)⌋` each, remainder to the most
/// probable symbol (lowest index on ties). Every frequency is ≥ 1.
pub fn quantize_probs(probs: &[f64]) -> Vec<u32> {
    let k = probs.len() as u32;
    let scale = (PROB_TOTAL - k) as f64;
    let mut freq: Vec<u32> = probs.iter().map(|&p| 1 + (p.clamp(0.0, 1.0) * scale).floor() as u32).collect();
    let sum: u32 = freq.iter().sum();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    // Σ⌊p·s⌋ ≤ s for a distribution; guard against rounding overshoot anyway
    if sum <= PROB_TOTAL {
        freq[best] += PROB_TOTAL - sum;
    } else {
        let mut excess = sum - PROB_TOTAL;
        while excess > 0 {
            let i = (0..freq.len()).max_by_key(|&i| (freq[i], std::cmp::Reverse(i))).unwrap();
            freq[i] -= 1;
            excess -= 1;
        }
    }
    freq
}

/// `−log2(f_i / total)`: the ideal code length under quantized frequencies.
pub fn quantized_bits(freq: &[u32], symbol: usize) -> f64 {
    (PROB_TOTAL as f64 / freq[symbol] as f64).log2()
}

const PRECISION: u32 = 32;
const FULL: u64 = (1 << PRECISION) - 1;
const HALF: u64 = 1 << (PRECISION - 1);
const QUARTER: u64 = 1 << (PRECISION - 2);

/// Binary arithmetic encoder with 32-bit registers and pending-bit carry
/// handling.
#[derive(Debug, Clone)]
pub struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for ArithEncoder {
    fn default() -> Self {
        ArithEncoder {
            low: 0,
            high: FULL,
            pending: 0,
            out: BitWriter::new(),
        }
    }
}

impl ArithEncoder {
    pub fn new() -> Self {
        ArithEncoder::default()
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, freq: &[u32], symbol: usize) {
        let lo: u64 = freq[..symbol].iter().map(|&f| f as u64).sum();
        let hi = lo + freq[symbol] as u64;
        let total = PROB_TOTAL as u64;
        let range = self.high - self.low + 1;
        self.high = self.low + range * hi / total - 1;
        self.low += range * lo / total;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Emits the shortest suffix that, padded with zeros, lands inside the
    /// final interval. Returns the bytes and the exact bit count.
    pub fn finish(mut self) -> (Vec<u8>, u64) {
        if self.low == 0 && self.pending == 0 {
            // all-zero continuation already decodes correctly
            let bits = self.out.bit_len();
            return (self.out.into_bytes(), bits);
        }
        for k in 1..=PRECISION {
            let step = 1u64 << (PRECISION - k);
            let v = self.low.div_ceil(step) * step;
            if v <= self.high {
                let prefix = v >> (PRECISION - k);
                self.emit((prefix >> (k - 1)) & 1 == 1);
                for i in (0..k - 1).rev() {
                    self.out.push((prefix >> i) & 1 == 1);
                }
                break;
            }
        }
        let bits = self.out.bit_len();
        (self.out.into_bytes(), bits)
    }
}

#[derive(Debug, Clone)]
pub struct ArithDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    pending: u64,
    input: BitReader<'a>,
}

impl<'a> ArithDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut input = BitReader::new(bytes);
        let value = input.read_bits(PRECISION);
        ArithDecoder {
            low: 0,
            high: FULL,
            value,
            pending: 0,
            input,
        }
    }

    pub fn decode(&mut self, freq: &[u32]) -> Result<usize> {
        let total = PROB_TOTAL as u64;
        let range = self.high - self.low + 1;
        let count = ((self.value - self.low + 1) * total - 1) / range;
        let mut lo = 0u64;
        let mut symbol = None;
        for (s, &f) in freq.iter().enumerate() {
            if count < lo + f as u64 {
                symbol = Some(s);
                break;
            }
            lo += f as u64;
        }
        let s = symbol.ok_or_else(|| BitstreamError::Corrupt("code value outside the table".into()))?;
        let hi = lo + freq[s] as u64;
        self.high = self.low + range * hi / total - 1;
        self.low += range * lo / total;
        loop {
            if self.high < HALF {
                self.pending = 0;
            } else if self.low >= HALF {
                self.pending = 0;
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.input.next_bit() as u64;
        }
        if self.input.overrun() > PRECISION as u64 {
            return Err(BitstreamError::Corrupt("read past the end of the payload".into()));
        }
        Ok(s)
    }

    pub fn bytes_len(&self) -> usize {
        self.input.bytes.len()
    }

    /// Bits consumed so far, counting the 32-bit lookahead.
    pub fn position(&self) -> u64 {
        self.input.position()
    }

    /// Length in bits of the stream an [`ArithEncoder`] would have produced
    /// for the symbols decoded so far.
    pub fn expected_bits(&self) -> u64 {
        let shifted = self.input.position() - PRECISION as u64;
        if self.low == 0 && self.pending == 0 {
            return shifted;
        }
        let k = (1..=PRECISION)
            .find(|&k| {
                let step = 1u64 << (PRECISION - k);
                self.low.div_ceil(step) * step <= self.high
            })
            .unwrap_or(PRECISION);
        shifted + k as u64
    }
}

/// Arithmetic-coded payload plus its exact length in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ArithPayload {
    pub bytes: Vec<u8>,
    pub bits: u64,
    /// `Σ −log2(f/total)` over every coded symbol.
    pub ideal_bits: f64,
}

/// Codes `latents` frame by frame. `probs(prev)` returns the `[D × K]`
/// distribution of the next frame given the previous frame's indices
/// (empty for the first frame); the decoder calls it with the same
/// arguments.
pub fn encode_arith_with(latents: &LatentSequence, mut probs: impl FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<ArithPayload> {
    let (d, k) = (latents.dim, latents.levels);
    let mut enc = ArithEncoder::new();
    let mut ideal = 0.0;
    for t in 0..latents.frames() {
        let prev = if t == 0 { &[][..] } else { latents.frame(t - 1) };
        let p = probs(prev)?;
        for (dim, &s) in latents.frame(t).iter().enumerate() {
            let freq = quantize_probs(&p[dim * k..(dim + 1) * k]);
            ideal += quantized_bits(&freq, s);
            enc.encode(&freq, s);
        }
        debug_assert_eq!(p.len(), d * k);
    }
    let (bytes, bits) = enc.finish();
    Ok(ArithPayload {
        bytes,
        bits,
        ideal_bits: ideal,
    })
}

pub fn decode_arith_with(
    payload: &[u8],
    frames: usize,
    dim: usize,
    levels: usize,
    mut probs: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<LatentSequence> {
    if frames * dim == 0 && !payload.is_empty() {
        return Err(BitstreamError::TrailingData(payload.len()));
    }
    let mut dec = ArithDecoder::new(payload);
    let mut indices: Vec<usize> = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let prev = if t == 0 { &[][..] } else { &indices[(t - 1) * dim..t * dim] };
        let p = probs(prev)?;
        if p.len() != dim * levels {
            return Err(BitstreamError::Corrupt("probability table size".into()));
        }
        for d in 0..dim {
            let freq = quantize_probs(&p[d * levels..(d + 1) * levels]);
            indices.push(dec.decode(&freq)?);
        }
    }
    let used = dec.expected_bits();
    let used_bytes = used.div_ceil(8) as usize;
    if payload.len() > used_bytes {
        return Err(BitstreamError::TrailingData(payload.len() - used_bytes));
    }
    if payload.len() < used_bytes {
        return Err(BitstreamError::Truncated);
    }
    if !used.is_multiple_of(8) && payload[used_bytes - 1] & (0xff >> (used % 8)) != 0 {
        return Err(BitstreamError::Corrupt("nonzero padding bits".into()));
    }
    Ok(LatentSequence::new(dim, levels, indices)?)
}

/// Prior probabilities replayed through the decoder network: for each frame
/// the previous frame's indices are decoded first, so conditioning matches
/// what the receiver holds.
fn model_probs<'m>(model: &'m Model) -> impl FnMut(&[usize]) -> Result<Vec<f64>> + 'm {
    let mut codec = StreamCodec::new(model);
    let mut state = codec.initial_state();
    move |prev: &[usize]| {
        if !prev.is_empty() {
            codec.decode_step(&mut state, prev)?;
        }
        Ok(codec.prior_probabilities(&state)?)
    }
}

/// A complete stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// Payload length in bits, excluding the header and byte padding.
    pub payload_bits: u64,
    /// Ideal payload length under the quantized prior (arithmetic mode).
    pub ideal_bits: Option<f64>,
}

pub fn encode(model: &Model, latents: &LatentSequence, mode: Mode) -> Result<Encoded> {
    let a = model.arch();
    if latents.dim != a.latent_dim || latents.levels != a.levels {
        return Err(BitstreamError::ModelMismatch("latent shape".into()));
    }
    let header = StreamHeader::for_model(model, mode, latents.frames())?;
    let mut bytes = header.to_bytes().to_vec();
    let (payload_bits, ideal_bits) = match mode {
        Mode::Fixed => {
            let payload = pack_fixed(latents)?;
            bytes.extend(payload);
            (latents.indices.len() as u64 * bits_per_symbol(a.levels)? as u64, None)
        }
        Mode::Arithmetic => {
            let p = encode_arith_with(latents, model_probs(model))?;
            bytes.extend(&p.bytes);
            (p.bits, Some(p.ideal_bits))
        }
    };
    Ok(Encoded {
        bytes,
        payload_bits,
        ideal_bits,
    })
}

pub fn decode(model: &Model, bytes: &[u8]) -> Result<(StreamHeader, LatentSequence)> {
    let h = StreamHeader::from_bytes(bytes)?;
    h.check_model(model)?;
    let payload = &bytes[HEADER_LEN..];
    let (frames, d, k) = (h.frame_count as usize, h.latent_dim as usize, h.levels as usize);
    let latents = match h.mode {
        Mode::Fixed => unpack_fixed(payload, frames, d, k)?,
        Mode::Arithmetic => decode_arith_with(payload, frames, d, k, model_probs(model))?,
    };
    Ok((h, latents))
}
