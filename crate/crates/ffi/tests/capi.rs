use std::ffi::{CStr, CString};
use std::ptr;

use nerd::backbone::BackboneConfig;
use nerd::heads::{sigmoid, HeadKind};
use nerd::{ModelConfig, SegModel, Tensor};
use nerd_ffi::*;

fn last_error() -> String {
    let p = nerd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn saved_model(kind: HeadKind, dir: &std::path::Path) -> (SegModel, CString) {
    let model = SegModel::new(ModelConfig::new(BackboneConfig::with_filters(vec![2, 2, 2, 2, 2], 2), kind), 9).unwrap();
    let path = dir.join("m.ckpt");
    model.save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

#[test]
fn model_round_trip_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(HeadKind::Nerdc, dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { nerd_model_load(path.as_ptr(), &mut handle) }, NerdStatus::Ok);
    assert!(nerd_last_error().is_null());

    let mut info = NerdModelInfo::default();
    assert_eq!(unsafe { nerd_model_info(handle, &mut info) }, NerdStatus::Ok);
    assert_eq!((info.in_channels, info.feature_channels, info.head), (2, 2, NerdHead::Nerdc as u32));

    let (b, h, w, c) = (2, 16, 16, 2);
    let images: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let expected = model.predict(&Tensor::from_vec([b, h, w, c], images.clone()).unwrap()).unwrap();
    let mut probs = vec![0.0; b * h * w];
    assert_eq!(unsafe { nerd_model_predict(handle, images.as_ptr(), b, h, w, c, probs.as_mut_ptr()) }, NerdStatus::Ok);
    for (p, l) in probs.iter().zip(&expected.values) {
        assert_eq!(*p, sigmoid(*l));
    }
    let mut mask = vec![7u8; b * h * w];
    assert_eq!(unsafe { nerd_model_segment(handle, images.as_ptr(), b, h, w, c, 0.5, mask.as_mut_ptr()) }, NerdStatus::Ok);
    for (m, p) in mask.iter().zip(&probs) {
        assert_eq!(*m, u8::from(*p >= 0.5));
    }

    let status = unsafe { nerd_model_predict(handle, images.as_ptr(), b, h, w, 3, probs.as_mut_ptr()) };
    assert_eq!(status, NerdStatus::Shape);
    assert!(last_error().contains("channel"), "{}", last_error());
    unsafe { nerd_model_free(handle) };
    unsafe { nerd_model_free(ptr::null_mut()) };
}

#[test]
fn load_failures_are_reported() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { nerd_model_load(missing.as_ptr(), &mut handle) }, NerdStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nerd_model_load(junk.as_ptr(), &mut handle) }, NerdStatus::Format);
    assert_eq!(unsafe { nerd_model_load(ptr::null(), &mut handle) }, NerdStatus::NullPointer);
    assert_eq!(unsafe { nerd_model_load(junk.as_ptr(), ptr::null_mut()) }, NerdStatus::NullPointer);
}

#[test]
fn position_field_values() {
    let mut raw = vec![0.0; 2 * 3 * 4];
    assert_eq!(unsafe { nerd_position_field(2, 3, false, raw.as_mut_ptr()) }, NerdStatus::Ok);
    // pixel (1, 0): top 1, right 2, bottom 0, left 0
    assert_eq!(&raw[12..16], &[1.0, 2.0, 0.0, 0.0]);
    let mut norm = vec![0.0; 2 * 3 * 4];
    assert_eq!(unsafe { nerd_position_field(2, 3, true, norm.as_mut_ptr()) }, NerdStatus::Ok);
    assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(unsafe { nerd_position_field(0, 3, false, raw.as_mut_ptr()) }, NerdStatus::InvalidArgument);
}

#[test]
fn metrics_on_small_masks() {
    // two ground-truth lesions, one predicted blob covering the first plus a false positive
    let gt: [u8; 10] = [1, 1, 0, 0, 0, 0, 0, 0, 1, 1];
    let pred: [u8; 10] = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0];
    let mut d = 0.0;
    assert_eq!(unsafe { nerd_dice(pred.as_ptr(), gt.as_ptr(), 1, 1, 10, &mut d) }, NerdStatus::Ok);
    assert_eq!(d, 2.0 * 1.0 / 6.0);

    let mut lesions = NerdLesionMetrics { ldice: 0.0, ltpr: 0.0, lfpr: 0.0, gt_lesions: 0, pred_lesions: 0 };
    assert_eq!(unsafe { nerd_lesion_metrics(pred.as_ptr(), gt.as_ptr(), 1, 1, 10, 4, 2, &mut lesions) }, NerdStatus::Ok);
    assert_eq!((lesions.gt_lesions, lesions.pred_lesions), (2, 2));
    assert_eq!((lesions.ltpr, lesions.lfpr, lesions.ldice), (0.5, 0.5, 0.5));
    let status = unsafe { nerd_lesion_metrics(pred.as_ptr(), gt.as_ptr(), 1, 1, 10, 5, 2, &mut lesions) };
    assert_eq!(status, NerdStatus::Config);

    let spacing = [1.0, 1.0, 0.5];
    let mut s = NerdSurfaceMetrics { hd: 0.0, hd95: 0.0, asd: 0.0 };
    assert_eq!(unsafe { nerd_surface_metrics(pred.as_ptr(), gt.as_ptr(), 1, 1, 10, spacing.as_ptr(), &mut s) }, NerdStatus::Ok);
    // farthest ground-truth voxel (x = 9) is 5 voxels from the prediction at x = 4
    assert_eq!(s.hd, 2.5);

    let empty = [0u8; 10];
    let status = unsafe { nerd_surface_metrics(empty.as_ptr(), gt.as_ptr(), 1, 1, 10, spacing.as_ptr(), &mut s) };
    assert_eq!(status, NerdStatus::UndefinedBoundary);
    let bad = [2u8; 10];
    assert_eq!(unsafe { nerd_dice(bad.as_ptr(), gt.as_ptr(), 1, 1, 10, &mut d) }, NerdStatus::InvalidArgument);
    assert_eq!(unsafe { nerd_dice(ptr::null(), gt.as_ptr(), 1, 1, 10, &mut d) }, NerdStatus::NullPointer);
    assert_eq!(unsafe { nerd_dice(pred.as_ptr(), gt.as_ptr(), 0, 1, 10, &mut d) }, NerdStatus::Shape);
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nerd.h")).unwrap();
    for name in [
        "nerd_model_load",
        "nerd_model_free",
        "nerd_model_info",
        "nerd_model_predict",
        "nerd_model_segment",
        "nerd_position_field",
        "nerd_dice",
        "nerd_lesion_metrics",
        "nerd_surface_metrics",
        "nerd_last_error",
        "typedef struct NerdModel NerdModel",
        "NERD_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(nerd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
