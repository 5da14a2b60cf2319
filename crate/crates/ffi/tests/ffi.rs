use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use directcaps::data::{bicubic_resize, Image};
use directcaps::model::ModelConfig;
use directcaps::training::{Ablation, RunConfig, TrainConfig, Trainer};
use directcaps_ffi::*;

fn last_error() -> String {
    let p = dc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_trainer() -> Trainer {
    let model = ModelConfig {
        conv_filters: vec![4],
        conv_kernel: 3,
        conv_padding: 1,
        primary_types: 2,
        primary_kernel: 3,
        primary_stride: 2,
        caps_dim_primary: 4,
        caps_dim_class: 4,
        recon_hidden: [8, 8],
        batch_size: 2,
        ..ModelConfig::for_input(3, 1, 8, 8)
    };
    Trainer::new(RunConfig::new(model, TrainConfig::default()), Ablation::Full).unwrap()
}

fn load(path: &Path) -> *mut DcModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dc_model_load(c.as_ptr(), &mut m) }, DcStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(dc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dcc");
    let mut trainer = tiny_trainer();
    trainer.save_checkpoint(&path).unwrap();

    let m = load(&path);
    let (mut k, mut c, mut h, mut w) = (0, 0, 0, 0);
    assert_eq!(unsafe { dc_model_info(m, &mut k, &mut c, &mut h, &mut w) }, DcStatus::Ok);
    assert_eq!((k, c, h, w), (3, 1, 8, 8));

    let imgs: Vec<Image> = (0..2)
        .map(|i| Image::new(1, 8, 8, (0..64).map(|p| ((p * 7 + i * 13) % 64) as f32 / 63.0).collect()).unwrap())
        .collect();
    let pixels: Vec<f32> = imgs.iter().flat_map(|i| i.data().to_vec()).collect();
    let mut scores = vec![0f32; 6];
    let st = unsafe { dc_model_predict(m, pixels.as_ptr(), pixels.len(), 2, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, DcStatus::Ok);
    let expected: Vec<f32> = trainer.model.scores(&imgs.iter().collect::<Vec<_>>()).unwrap().concat();
    assert_eq!(scores, expected);

    let st = unsafe { dc_model_predict(m, pixels.as_ptr(), pixels.len() - 1, 2, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, DcStatus::InvalidArgument);
    assert!(last_error().contains("pixels"));
    unsafe { dc_model_free(m) };
}

#[test]
fn load_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.dcc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dc_model_load(missing.as_ptr(), &mut m) }, DcStatus::Io);
    assert!(m.is_null());

    let junk: PathBuf = dir.path().join("junk.dcc");
    std::fs::write(&junk, b"not a checkpoint at all, just bytes").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dc_model_load(junk.as_ptr(), &mut m) }, DcStatus::Corrupt);
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { dc_model_load(ptr::null(), &mut m) }, DcStatus::NullPointer);
    assert_eq!(unsafe { dc_model_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, DcStatus::NullPointer);
    unsafe { dc_model_free(ptr::null_mut()) };
}

#[test]
fn success_clears_last_error() {
    let mut s = 0.0;
    assert_eq!(unsafe { dc_mcnemar(0, 0, &mut s, ptr::null_mut()) }, DcStatus::InvalidArgument);
    assert!(!dc_last_error().is_null());
    assert_eq!(unsafe { dc_mcnemar(10, 2, &mut s, ptr::null_mut()) }, DcStatus::Ok);
    assert!(dc_last_error().is_null());
}

#[test]
fn mcnemar_values() {
    let (mut s, mut sig) = (0.0, true);
    assert_eq!(unsafe { dc_mcnemar(10, 2, &mut s, &mut sig) }, DcStatus::Ok);
    assert!((s - 4.083).abs() < 1e-3 && !sig);
    assert_eq!(unsafe { dc_mcnemar(30, 2, &mut s, &mut sig) }, DcStatus::Ok);
    assert!((s - 22.781).abs() < 1e-3 && sig);
}

#[test]
fn resize_matches_library() {
    let src: Vec<f32> = (0..3 * 5 * 7).map(|i| (i % 11) as f32 / 10.0).collect();
    let img = Image::new(3, 5, 7, src.clone()).unwrap();
    let mut dst = vec![0f32; 3 * 9 * 4];
    let st = unsafe { dc_bicubic_resize(src.as_ptr(), 3, 5, 7, dst.as_mut_ptr(), 9, 4) };
    assert_eq!(st, DcStatus::Ok);
    assert_eq!(dst, bicubic_resize(&img, 9, 4).unwrap().data());
    let st = unsafe { dc_bicubic_resize(src.as_ptr(), 3, 5, 7, dst.as_mut_ptr(), 0, 4) };
    assert_eq!(st, DcStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/directcaps.h")).unwrap();
    for sym in ["dc_version", "dc_last_error", "dc_model_load", "dc_model_free", "dc_model_info", "dc_model_predict", "dc_bicubic_resize", "dc_mcnemar", "typedef struct DcModel DcModel"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(dir.join("tests/smoke.c"))
        .status()
    else {
        eprintln!("no C compiler on PATH; syntax check skipped");
        return;
    };
    assert!(status.success());
}
