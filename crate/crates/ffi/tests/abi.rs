use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use frae::bitstream::{self, Mode};
use frae::dsp::Spectrogram;
use frae::prior::PriorKind;
use frae::schemes::{Architecture, Model, SchemeId};
use frae_ffi::*;

fn model(prior: PriorKind) -> Model {
    let mut arch = Architecture::new(SchemeId::Frae, 5, 3);
    arch.prior = prior;
    arch.enc_hidden = 6;
    arch.dec_hidden = 6;
    arch.prior_hidden = 4;
    Model::new(arch, 4).unwrap()
}

fn frames(n: usize, width: usize) -> Vec<f64> {
    (0..n * width).map(|i| -50.0 + ((i * 37) % 41) as f64).collect()
}

fn handle(m: &Model) -> *mut FraeModel {
    let bytes = m.to_bytes(false);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { frae_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut h) }, FRAE_OK);
    h
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 128];
    let n = unsafe { frae_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(s.len(), n.min(127));
    s
}

#[test]
fn encode_decode_match_library() {
    for prior in [PriorKind::Uniform, PriorKind::CondDecoderState] {
        let m = model(prior);
        let h = handle(&m);
        let x = frames(12, 5);
        let spec = Spectrogram::new(12, 5, x.clone()).unwrap();
        let latents = m.encode(&spec).unwrap();
        for (code, mode) in [(FRAE_MODE_FIXED, Mode::Fixed), (FRAE_MODE_ARITHMETIC, Mode::Arithmetic)] {
            let (mut p, mut len) = (ptr::null_mut(), 0);
            assert_eq!(unsafe { frae_encode(h, x.as_ptr(), 12, code, &mut p, &mut len) }, FRAE_OK);
            let got = unsafe { std::slice::from_raw_parts(p, len) }.to_vec();
            assert_eq!(got, bitstream::encode(&m, &latents, mode).unwrap().bytes);

            let (mut out, mut n) = (ptr::null_mut(), 0);
            assert_eq!(unsafe { frae_decode(h, p, len, &mut out, &mut n) }, FRAE_OK);
            assert_eq!(n, 12);
            let y = unsafe { std::slice::from_raw_parts(out, n * 5) };
            assert_eq!(y, m.decode(&latents).unwrap().data());
            unsafe {
                frae_frames_free(out, n * 5);
                frae_bytes_free(p, len);
            }
        }
        unsafe { frae_model_free(h) };
    }
}

#[test]
fn info_and_streaming() {
    let m = model(PriorKind::TimeInvariant);
    let h = handle(&m);
    let mut info = FraeModelInfo::default();
    assert_eq!(unsafe { frae_model_info(h, &mut info) }, FRAE_OK);
    assert_eq!(
        (info.scheme, info.prior, info.frame_dim, info.latent_dim, info.levels),
        (6, 1, 5, 3, 4)
    );
    assert_eq!(info.hash, m.hash());

    let x = frames(6, 5);
    let latents = m.encode(&Spectrogram::new(6, 5, x.clone()).unwrap()).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { frae_stream_new(h, &mut s) }, FRAE_OK);
    unsafe { frae_model_free(h) };
    for round in 0..2 {
        let mut idx = Vec::new();
        for t in 0..6 {
            let mut out = [0u32; 3];
            assert_eq!(unsafe { frae_stream_encode(s, x[t * 5..].as_ptr(), out.as_mut_ptr()) }, FRAE_OK);
            idx.extend(out.iter().map(|&i| i as usize));
        }
        assert_eq!(idx, latents.indices, "round {round}");
        assert_eq!(unsafe { frae_stream_reset(s) }, FRAE_OK);
    }
    let bad = [0u32, 9, 0];
    let mut y = [0.0; 5];
    assert_eq!(unsafe { frae_stream_decode(s, bad.as_ptr(), y.as_mut_ptr()) }, FRAE_ERR_INVALID);
    assert!(last_error().contains("out of range"));
    unsafe { frae_stream_free(s) };
}

#[test]
fn error_codes() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { frae_model_load(missing.as_ptr(), &mut h) }, FRAE_ERR_IO);
    assert!(h.is_null());
    assert_eq!(unsafe { frae_model_load(ptr::null(), &mut h) }, FRAE_ERR_NULL);
    assert_eq!(last_error(), "path is null");
    let junk = [1u8, 2, 3];
    assert_eq!(unsafe { frae_model_from_bytes(junk.as_ptr(), 3, &mut h) }, FRAE_ERR_FORMAT);

    let m = model(PriorKind::Uniform);
    let h = handle(&m);
    let x = frames(3, 5);
    let (mut p, mut len) = (ptr::null_mut(), 0);
    assert_eq!(unsafe { frae_encode(h, x.as_ptr(), 3, 7, &mut p, &mut len) }, FRAE_ERR_INVALID);
    assert_eq!(unsafe { frae_encode(h, ptr::null(), 3, 0, &mut p, &mut len) }, FRAE_ERR_NULL);
    assert_eq!(unsafe { frae_encode(h, x.as_ptr(), 3, FRAE_MODE_FIXED, &mut p, &mut len) }, FRAE_OK);

    let (mut out, mut n) = (ptr::null_mut(), 0);
    assert_eq!(unsafe { frae_decode(h, p, len - 1, &mut out, &mut n) }, FRAE_ERR_BITSTREAM);
    let other = handle(&Model::new(*m.arch(), 99).unwrap());
    assert_eq!(unsafe { frae_decode(other, p, len, &mut out, &mut n) }, FRAE_ERR_MODEL_MISMATCH);
    assert!(last_error().contains("hash"));
    unsafe {
        frae_bytes_free(p, len);
        frae_model_free(other);
        frae_model_free(h);
        frae_model_free(ptr::null_mut());
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { std::ffi::CStr::from_ptr(frae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn c_program_links_against_header_and_static_library() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libfrae_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));

    let model_path = dir.path().join("m.model");
    model(PriorKind::CondDecoderState).save(&model_path, false).unwrap();
    let run = Command::new(&exe).arg(&model_path).output().unwrap();
    assert!(
        run.status.success(),
        "exit {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8(run.stdout).unwrap().starts_with("ok "));
}
