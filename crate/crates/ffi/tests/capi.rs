use std::ffi::{CStr, CString};
use std::ptr;

use vdl_surrogate::pipeline::{PipelineConfig, Run};
use vdl_surrogate_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vdls_last_error()) }.to_string_lossy().into_owned()
}

fn trained_run() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    Run::new(d.path(), PipelineConfig::smoke()).unwrap().train_all().unwrap();
    d
}

#[test]
fn session_round_trip() {
    let dir = trained_run();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut session = ptr::null_mut();
    unsafe {
        assert_eq!(vdls_session_open(path.as_ptr(), &mut session), VdlsStatus::Ok);
        let mut n = 0;
        assert_eq!(vdls_session_param_count(session, &mut n), VdlsStatus::Ok);
        assert_eq!(n, 4);
        let (mut lo, mut hi) = (0.0, 0.0);
        assert_eq!(vdls_session_param_range(session, 0, &mut lo, &mut hi), VdlsStatus::Ok);
        assert_eq!((lo, hi), (0.5, 2.0));
        assert_eq!(vdls_session_param_range(session, 7, &mut lo, &mut hi), VdlsStatus::InvalidArgument);

        let params = [1.0, 0.1, 0.5, 0.5];
        let vp = [1.0, 1.0, 1.0];
        let mut vol = ptr::null_mut();
        assert_eq!(vdls_session_infer(session, params.as_ptr(), 4, vp.as_ptr(), &mut vol), VdlsStatus::Ok);
        let mut ext = [0usize; 3];
        let mut data = ptr::null();
        let mut len = 0;
        assert_eq!(vdls_volume_data(vol, ext.as_mut_ptr(), &mut data, &mut len), VdlsStatus::Ok);
        assert_eq!(ext, [16, 16, 16]);
        assert_eq!(len, 4096);
        assert!(std::slice::from_raw_parts(data, len).iter().all(|v| v.is_finite()));
        vdls_volume_free(vol);

        let mut img = ptr::null_mut();
        assert_eq!(vdls_session_render(session, params.as_ptr(), 4, vp.as_ptr(), ptr::null(), &mut img), VdlsStatus::Ok);
        let (mut w, mut h, mut px) = (0, 0, ptr::null());
        assert_eq!(vdls_image_pixels(img, &mut w, &mut h, &mut px), VdlsStatus::Ok);
        assert_eq!((w, h), (24, 20));
        let png = CString::new(dir.path().join("c.png").to_str().unwrap()).unwrap();
        assert_eq!(vdls_image_write_png(img, png.as_ptr()), VdlsStatus::Ok);
        assert!(dir.path().join("c.png").exists());
        vdls_image_free(img);

        let bad_tf = CString::new(r#"{"points": []}"#).unwrap();
        let mut img2 = ptr::null_mut();
        assert_eq!(
            vdls_session_render(session, params.as_ptr(), 4, vp.as_ptr(), bad_tf.as_ptr(), &mut img2),
            VdlsStatus::InvalidArgument
        );
        assert!(img2.is_null());
        assert!(!last_error().is_empty());

        let mut values = [0.0; 3];
        let mut sens = [0.0; 3];
        assert_eq!(
            vdls_session_sensitivity(session, params.as_ptr(), 4, 3, 3, values.as_mut_ptr(), sens.as_mut_ptr()),
            VdlsStatus::Ok
        );
        assert_eq!(values, [0.0, 0.5, 1.0]);
        assert!(sens.iter().all(|s| s.is_finite() && *s >= 0.0));
        vdls_session_free(session);
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let mut session = ptr::null_mut();
        assert_eq!(vdls_session_open(ptr::null(), &mut session), VdlsStatus::NullPointer);
        assert!(last_error().contains("run_dir"));
        let empty = tempfile::tempdir().unwrap();
        let path = CString::new(empty.path().to_str().unwrap()).unwrap();
        assert_eq!(vdls_session_open(path.as_ptr(), &mut session), VdlsStatus::MissingArtifact);
        assert!(last_error().contains("train-predictor"), "{}", last_error());
        assert!(session.is_null());
        let mut n = 0;
        assert_eq!(vdls_session_param_count(ptr::null(), &mut n), VdlsStatus::NullPointer);
        vdls_session_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(vdls_version()) }.to_str().unwrap().is_empty());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vdl_surrogate.h")).unwrap();
    for name in ["vdls_session_open", "vdls_session_render", "vdls_last_error", "VDLS_STATUS_MISSING_ARTIFACT", "VdlsSession"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
