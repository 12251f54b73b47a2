//! C ABI over the `frae` codec.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns one of the
//! `FRAE_*` status codes; the message of the most recent failure on the
//! calling thread is available from [`frae_last_error`].
//!
//! Spectrogram frames are row-major `double` arrays of `frame_dim` values
//! per frame, in dB.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use frae::bitstream::{self, BitstreamError, Mode};
use frae::dsp::Spectrogram;
use frae::nn::NnError;
use frae::schemes::{CodecError, CodecState, Model, StreamCodec};

pub const FRAE_OK: i32 = 0;
/// A required pointer argument was null.
pub const FRAE_ERR_NULL: i32 = 1;
/// A file could not be read.
pub const FRAE_ERR_IO: i32 = 2;
/// Malformed model file.
pub const FRAE_ERR_FORMAT: i32 = 3;
/// Argument sizes do not match the model.
pub const FRAE_ERR_SHAPE: i32 = 4;
/// Malformed or corrupt bitstream.
pub const FRAE_ERR_BITSTREAM: i32 = 5;
/// Bitstream was written by a different model.
pub const FRAE_ERR_MODEL_MISMATCH: i32 = 6;
/// Unknown mode or otherwise invalid argument.
pub const FRAE_ERR_INVALID: i32 = 7;
/// Internal error; the library caught a panic.
pub const FRAE_ERR_INTERNAL: i32 = 8;

pub const FRAE_MODE_FIXED: u32 = 0;
pub const FRAE_MODE_ARITHMETIC: u32 = 1;

/// A loaded model.
pub struct FraeModel {
    model: Model,
}

/// Frame-at-a-time coding state for one stream. Owns a copy of the model.
pub struct FraeStream {
    model: Model,
    state: CodecState,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FraeModelInfo {
    /// Recurrency scheme code, 0 to 6.
    pub scheme: u32,
    /// Prior code: 0 uniform, 1 time-invariant, 2 previous latent, 3 decoder state.
    pub prior: u32,
    pub frame_dim: u32,
    pub latent_dim: u32,
    pub levels: u32,
    /// Fingerprint written into every bitstream header.
    pub hash: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

#[derive(Debug)]
struct Failure(i32, String);

impl Failure {
    fn new(code: i32, msg: impl Into<String>) -> Self {
        Failure(code, msg.into())
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        let code = match &e {
            CodecError::Nn(NnError::Io(_)) => FRAE_ERR_IO,
            CodecError::Format(_) | CodecError::InvalidArch(_) | CodecError::Nn(_) => FRAE_ERR_FORMAT,
            CodecError::FrameWidth { .. } | CodecError::StateMismatch(_) => FRAE_ERR_SHAPE,
            CodecError::IndexOutOfRange { .. } => FRAE_ERR_INVALID,
            _ => FRAE_ERR_INTERNAL,
        };
        Failure(code, e.to_string())
    }
}

impl From<BitstreamError> for Failure {
    fn from(e: BitstreamError) -> Self {
        match e {
            BitstreamError::Codec(c) => c.into(),
            BitstreamError::HashMismatch { .. } | BitstreamError::ModelMismatch(_) => Failure(FRAE_ERR_MODEL_MISMATCH, e.to_string()),
            BitstreamError::NotPowerOfTwo(_) => Failure(FRAE_ERR_INVALID, e.to_string()),
            _ => Failure(FRAE_ERR_BITSTREAM, e.to_string()),
        }
    }
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|m| *m.borrow_mut() = msg.to_string());
}

/// Runs `f`, recording its error message and turning panics into
/// `FRAE_ERR_INTERNAL`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FRAE_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal error");
            FRAE_ERR_INTERNAL
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(FRAE_ERR_NULL, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// `len` elements at `p`; a null pointer is accepted for an empty slice.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_raw<T>(v: Vec<T>) -> (*mut T, usize) {
    let b = v.into_boxed_slice();
    let len = b.len();
    if len == 0 {
        return (ptr::null_mut(), 0);
    }
    (Box::into_raw(b) as *mut T, len)
}

unsafe fn free_raw<T>(p: *mut T, len: usize) {
    if !p.is_null() && len > 0 {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, len)));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn frae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn frae_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|m| {
        let m = m.borrow();
        if !buf.is_null() && len > 0 {
            let n = m.len().min(len - 1);
            ptr::copy_nonoverlapping(m.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        m.len()
    })
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frae_model_load(path: *const c_char, out: *mut *mut FraeModel) -> i32 {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(FRAE_ERR_INVALID, "path is not UTF-8"))?;
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(FraeModel { model }));
        Ok(())
    })
}

/// Parses a model from the bytes of a model file.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frae_model_from_bytes(data: *const u8, len: usize, out: *mut *mut FraeModel) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let model = Model::from_bytes(slice(data, len, "data")?)?;
        *out = Box::into_raw(Box::new(FraeModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `frae_model_load`/`frae_model_from_bytes`
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn frae_model_free(model: *mut FraeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frae_model_info(model: *const FraeModel, out: *mut FraeModelInfo) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let m = &(*model).model;
        let a = m.arch();
        *out = FraeModelInfo {
            scheme: a.scheme.code() as u32,
            prior: a.prior.code() as u32,
            frame_dim: a.frame_dim as u32,
            latent_dim: a.latent_dim as u32,
            levels: a.levels as u32,
            hash: m.hash(),
        };
        Ok(())
    })
}

/// Encodes `frames` frames to a complete bitstream. On success `*out`
/// holds `*out_len` bytes to be released with `frae_bytes_free`.
///
/// # Safety
/// `model` must be a live handle, `data` must point to
/// `frames × frame_dim` doubles, and `out`/`out_len` be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frae_encode(
    model: *const FraeModel,
    data: *const f64,
    frames: usize,
    mode: u32,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        non_null(out_len, "out_len")?;
        let m = &(*model).model;
        let mode = match mode {
            FRAE_MODE_FIXED => Mode::Fixed,
            FRAE_MODE_ARITHMETIC => Mode::Arithmetic,
            other => return Err(Failure::new(FRAE_ERR_INVALID, format!("unknown mode {other}"))),
        };
        let width = m.arch().frame_dim;
        let n = frames
            .checked_mul(width)
            .ok_or_else(|| Failure::new(FRAE_ERR_SHAPE, "frame count overflows"))?;
        let spec = Spectrogram::new(frames, width, slice(data, n, "data")?.to_vec()).map_err(CodecError::from)?;
        let latents = m.encode(&spec)?;
        let enc = bitstream::encode(m, &latents, mode)?;
        (*out, *out_len) = into_raw(enc.bytes);
        Ok(())
    })
}

/// Decodes a bitstream. On success `*out` holds `*frames × frame_dim`
/// doubles to be released with `frae_frames_free`.
///
/// # Safety
/// `model` must be a live handle, `data` must point to `len` bytes and
/// `out`/`frames` be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frae_decode(model: *const FraeModel, data: *const u8, len: usize, out: *mut *mut f64, frames: *mut usize) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        non_null(frames, "frames")?;
        let m = &(*model).model;
        let (_, latents) = bitstream::decode(m, slice(data, len, "data")?)?;
        let spec = m.decode(&latents)?;
        *frames = spec.frames();
        (*out, _) = into_raw(spec.data().to_vec());
        Ok(())
    })
}

/// # Safety
/// `p`/`len` must come from `frae_encode`.
#[no_mangle]
pub unsafe extern "C" fn frae_bytes_free(p: *mut u8, len: usize) {
    free_raw(p, len);
}

/// `count` is the number of doubles, `frames × frame_dim`.
///
/// # Safety
/// `p`/`count` must come from `frae_decode`.
#[no_mangle]
pub unsafe extern "C" fn frae_frames_free(p: *mut f64, count: usize) {
    free_raw(p, count);
}

/// Starts a stream at the codec's initial state.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer. The stream does
/// not borrow the model, which may be freed first.
#[no_mangle]
pub unsafe extern "C" fn frae_stream_new(model: *const FraeModel, out: *mut *mut FraeStream) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let model = (*model).model.clone();
        let state = CodecState::new(model.arch(), 1);
        *out = Box::into_raw(Box::new(FraeStream { model, state }));
        Ok(())
    })
}

/// # Safety
/// `stream` must be null or a live stream handle.
#[no_mangle]
pub unsafe extern "C" fn frae_stream_free(stream: *mut FraeStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// # Safety
/// `stream` must be a live stream handle.
#[no_mangle]
pub unsafe extern "C" fn frae_stream_reset(stream: *mut FraeStream) -> i32 {
    guard(|| {
        non_null(stream, "stream")?;
        let s = &mut *stream;
        s.state = CodecState::new(s.model.arch(), 1);
        Ok(())
    })
}

/// Encodes one frame of `frame_dim` values into `latent_dim` indices and
/// advances the stream.
///
/// # Safety
/// `stream` must be a live handle, `frame` must point to `frame_dim`
/// doubles and `indices` to `latent_dim` writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn frae_stream_encode(stream: *mut FraeStream, frame: *const f64, indices: *mut u32) -> i32 {
    guard(|| {
        non_null(stream, "stream")?;
        non_null(indices, "indices")?;
        let s = &mut *stream;
        let a = *s.model.arch();
        let x = s.model.norm.normalize(slice(frame, a.frame_dim, "frame")?);
        let mut codec = StreamCodec::new(&s.model);
        let e = codec.encode_step(&mut s.state, &x)?;
        let out = std::slice::from_raw_parts_mut(indices, a.latent_dim);
        for (o, &i) in out.iter_mut().zip(&e.indices) {
            *o = i as u32;
        }
        Ok(())
    })
}

/// Decodes one frame of `latent_dim` indices into `frame_dim` values and
/// advances the stream.
///
/// # Safety
/// `stream` must be a live handle, `indices` must point to `latent_dim`
/// `uint32_t` and `frame` to `frame_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn frae_stream_decode(stream: *mut FraeStream, indices: *const u32, frame: *mut f64) -> i32 {
    guard(|| {
        non_null(stream, "stream")?;
        non_null(frame, "frame")?;
        let s = &mut *stream;
        let a = *s.model.arch();
        let idx: Vec<usize> = slice(indices, a.latent_dim, "indices")?.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.levels) {
            return Err(CodecError::IndexOutOfRange {
                index: bad,
                levels: a.levels,
            }
            .into());
        }
        let mut codec = StreamCodec::new(&s.model);
        let xhat = codec.decode_step(&mut s.state, &idx)?;
        std::slice::from_raw_parts_mut(frame, a.frame_dim).copy_from_slice(&s.model.norm.denormalize(&xhat));
        Ok(())
    })
}
