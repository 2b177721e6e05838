use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use stylecl::model::{Checkpoint, SegModel};
use stylecl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stylecl_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn ramp_image(h: usize, w: usize, shift: f32) -> Vec<f32> {
    (0..h * w * 3)
        .map(|i| ((i % 97) as f32 / 97.0 * 0.8 + shift).clamp(0.0, 1.0))
        .collect()
}

#[test]
fn delta_and_status_codes() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { stylecl_delta(44.47, 63.08, &mut out) },
        StyleclStatus::Ok
    );
    assert!((out - 29.51).abs() <= 0.02);
    assert_eq!(last_error(), "");
    assert_eq!(
        unsafe { stylecl_delta(1.0, 0.0, &mut out) },
        StyleclStatus::Division
    );
    assert!(last_error().contains("oracle"));
    assert_eq!(
        unsafe { stylecl_delta(1.0, 2.0, ptr::null_mut()) },
        StyleclStatus::NullPointer
    );

    let d = [29.51, 23.65];
    assert_eq!(
        unsafe { stylecl_delta_bar(d.as_ptr(), 2, &mut out) },
        StyleclStatus::Ok
    );
    assert!((out - 26.58).abs() <= 0.01);
    assert_eq!(
        unsafe { stylecl_delta_bar(d.as_ptr(), 0, &mut out) },
        StyleclStatus::InvalidArgument
    );
}

#[test]
fn bank_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (32, 32);
    let mut bank = ptr::null_mut();
    assert_eq!(
        unsafe { stylecl_bank_new(h, w, 0.1, &mut bank) },
        StyleclStatus::Ok
    );
    let imgs: Vec<f32> = [ramp_image(h, w, 0.0), ramp_image(h, w, 0.1)].concat();
    assert_eq!(
        unsafe { stylecl_bank_add_style(bank, imgs.as_ptr(), 2) },
        StyleclStatus::Ok
    );
    assert_eq!(unsafe { stylecl_bank_len(bank) }, 1);

    let img = ramp_image(h, w, 0.05);
    let mut out = vec![0.0f32; h * w * 3];
    assert_eq!(
        unsafe { stylecl_bank_apply(bank, 0, img.as_ptr(), h, w, out.as_mut_ptr()) },
        StyleclStatus::Ok
    );
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(
        unsafe { stylecl_bank_apply(bank, 5, img.as_ptr(), h, w, out.as_mut_ptr()) },
        StyleclStatus::Protocol
    );
    assert_eq!(
        unsafe { stylecl_bank_apply(bank, 0, img.as_ptr(), 16, 16, out.as_mut_ptr()) },
        StyleclStatus::Shape
    );

    let path = dir.path().join("bank.styb");
    assert_eq!(
        unsafe { stylecl_bank_save(bank, cpath(&path).as_ptr()) },
        StyleclStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { stylecl_bank_load(cpath(&path).as_ptr(), &mut loaded) },
        StyleclStatus::Ok
    );
    let mut again = vec![0.0f32; h * w * 3];
    assert_eq!(
        unsafe { stylecl_bank_apply(loaded, 0, img.as_ptr(), h, w, again.as_mut_ptr()) },
        StyleclStatus::Ok
    );
    assert_eq!(out, again);
    unsafe {
        stylecl_bank_free(bank);
        stylecl_bank_free(loaded);
        stylecl_bank_free(ptr::null_mut());
    }

    let mut missing = ptr::null_mut();
    let st = unsafe { stylecl_bank_load(cpath(&dir.path().join("nope")).as_ptr(), &mut missing) };
    assert_eq!(st, StyleclStatus::Io);
    assert!(missing.is_null());
    std::fs::write(dir.path().join("junk"), b"XXXX").unwrap();
    assert_eq!(
        unsafe { stylecl_bank_load(cpath(&dir.path().join("junk")).as_ptr(), &mut missing) },
        StyleclStatus::Format
    );
    assert_eq!(
        unsafe { stylecl_bank_load(ptr::null(), &mut missing) },
        StyleclStatus::NullPointer
    );
}

#[test]
fn model_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let model = SegModel::<f32>::init(7, 8, vec![0, 1, 2]).unwrap();
    let path = dir.path().join("m.segc");
    Checkpoint {
        step: 0,
        schedule_hash: 1,
        model: model.clone(),
    }
    .save(&path)
    .unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { stylecl_model_load(cpath(&path).as_ptr(), &mut m) },
        StyleclStatus::Ok
    );
    assert_eq!(unsafe { stylecl_model_num_classes(m) }, 3);
    let mut layout = [0u8; 3];
    assert_eq!(
        unsafe { stylecl_model_layout(m, layout.as_mut_ptr(), 3) },
        StyleclStatus::Ok
    );
    assert_eq!(layout, [0, 1, 2]);
    assert_eq!(
        unsafe { stylecl_model_layout(m, layout.as_mut_ptr(), 2) },
        StyleclStatus::Shape
    );
    let mut step = 9;
    assert_eq!(
        unsafe { stylecl_model_step(m, &mut step) },
        StyleclStatus::Ok
    );
    assert_eq!(step, 0);

    let (h, w) = (8, 8);
    let img = ramp_image(h, w, 0.0);
    let mut logits = vec![0.0f32; h * w * 3];
    assert_eq!(
        unsafe { stylecl_model_forward(m, img.as_ptr(), h, w, logits.as_mut_ptr(), logits.len()) },
        StyleclStatus::Ok
    );
    let t = stylecl::numerics::Tensor3::from_vec(h, w, 3, img.clone()).unwrap();
    assert_eq!(logits, model.forward(&t).unwrap().data());
    let mut labels = vec![0u8; h * w];
    assert_eq!(
        unsafe { stylecl_model_predict(m, img.as_ptr(), h, w, labels.as_mut_ptr()) },
        StyleclStatus::Ok
    );
    assert_eq!(labels, stylecl::model::predict(&model, &t).unwrap());
    assert_eq!(
        unsafe { stylecl_model_forward(m, img.as_ptr(), h, w, logits.as_mut_ptr(), 3) },
        StyleclStatus::Shape
    );
    unsafe { stylecl_model_free(m) };
}

#[test]
fn header_is_generated_and_parses() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stylecl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "stylecl_delta",
        "stylecl_bank_apply",
        "stylecl_model_predict",
        "STYLECL_STATUS_OK",
        "typedef struct StyleclBank",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let status = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status();
    assert!(status.expect("C compiler available").success());
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(stylecl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
