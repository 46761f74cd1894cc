use std::ffi::{CStr, CString};
use std::ptr;

use pneumoseg::model::{Model, ModelSpec};
use pneumoseg::network::NetworkConfig;
use pneumoseg::synthdata::{generate_phantom, PhantomSpec};
use pneumoseg::volume_io::{save_mask, save_volume};
use pneumoseg_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ps_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_model_file(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = NetworkConfig {
        dense_layers: 1,
        dense_growth: 2,
        lstm_hidden: 2,
        head_channels: 2,
        image_size: 16,
        ..NetworkConfig::default()
    };
    let path = dir.join("tiny.weights");
    Model::init(ModelSpec::Ours(cfg), 1)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(ps_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut model: *mut PsModel = ptr::null_mut();
    assert_eq!(
        unsafe { ps_model_load(ptr::null(), &mut model) },
        PsStatus::PsErrNullArgument
    );
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { ps_mask_save(ptr::null(), ptr::null()) },
        PsStatus::PsErrNullArgument
    );
    assert_eq!(unsafe { ps_model_image_size(ptr::null()) }, 0);
    unsafe {
        ps_model_free(ptr::null_mut());
        ps_volume_free(ptr::null_mut());
        ps_mask_free(ptr::null_mut());
    }
}

#[test]
fn missing_and_malformed_files_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut model: *mut PsModel = ptr::null_mut();
    let missing = cstr(&dir.path().join("nope.weights"));
    assert_eq!(
        unsafe { ps_model_load(missing.as_ptr(), &mut model) },
        PsStatus::PsErrIo
    );
    assert!(last_error().contains("nope.weights"));
    let junk = dir.path().join("junk.weights");
    std::fs::write(&junk, b"not a weight file").unwrap();
    assert_eq!(
        unsafe { ps_model_load(cstr(&junk).as_ptr(), &mut model) },
        PsStatus::PsErrFormat
    );
    assert!(model.is_null());
}

#[test]
fn predict_quantify_and_dice_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let weights = cstr(&tiny_model_file(dir.path()));
    let ph = generate_phantom(&PhantomSpec::base()).unwrap();
    let vol_path = dir.path().join("p.vol");
    save_volume(&ph.volume, &vol_path).unwrap();
    let ref_path = dir.path().join("ref.mask");
    save_mask(&ph.mask, &ref_path).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ps_model_load(weights.as_ptr(), &mut model), PsStatus::PsOk);
        assert_eq!(ps_model_image_size(model), 16);
        assert!(ps_model_num_params(model) > 0);

        let mut vol = ptr::null_mut();
        assert_eq!(
            ps_volume_load(cstr(&vol_path).as_ptr(), &mut vol),
            PsStatus::PsOk
        );
        let mut shape = [0usize; 3];
        assert_eq!(ps_volume_shape(vol, shape.as_mut_ptr()), PsStatus::PsOk);
        assert_eq!(shape, ph.volume.shape());

        let mut pred = ptr::null_mut();
        assert_eq!(ps_model_predict(model, vol, 4, &mut pred), PsStatus::PsOk);
        let mut mshape = [0usize; 3];
        assert_eq!(ps_mask_shape(pred, mshape.as_mut_ptr()), PsStatus::PsOk);
        assert_eq!(mshape, shape);
        let n = shape.iter().product::<usize>();
        let mut labels = vec![9u8; n];
        assert_eq!(
            ps_mask_labels(pred, labels.as_mut_ptr(), n - 1),
            PsStatus::PsErrBufferTooSmall
        );
        assert_eq!(ps_mask_labels(pred, labels.as_mut_ptr(), n), PsStatus::PsOk);
        assert!(labels.iter().all(|&l| l <= 2));

        let mut reference = ptr::null_mut();
        assert_eq!(
            ps_mask_load(cstr(&ref_path).as_ptr(), &mut reference),
            PsStatus::PsOk
        );
        let mut d = -1.0;
        assert_eq!(ps_dice(reference, reference, 1, &mut d), PsStatus::PsOk);
        assert_eq!(d, 1.0);
        assert_eq!(ps_dice(pred, reference, 0, &mut d), PsStatus::PsOk);
        assert!((0.0..=1.0).contains(&d));
        assert_eq!(ps_dice(pred, reference, 7, &mut d), PsStatus::PsErrData);

        let mut q = PsQuantReport::default();
        assert_eq!(
            ps_quantify(reference, ptr::null(), 0.0, 0.0, 0.0, &mut q),
            PsStatus::PsOk
        );
        assert_eq!(q.has_lung, 1);
        assert_eq!(q.total_pneumonia_ml, q.ggo_ml + q.high_opacity_ml);
        // explicit spacing scales volumes linearly
        let mut q2 = PsQuantReport::default();
        let s = ph.volume.spacing();
        assert_eq!(
            ps_quantify(reference, ptr::null(), 2.0 * s.dz, s.dy, s.dx, &mut q2),
            PsStatus::PsOk
        );
        assert!((q2.lung_ml - 2.0 * q.lung_ml).abs() < 1e-9 * q.lung_ml.max(1.0));

        let saved = cstr(&dir.path().join("pred.mask"));
        assert_eq!(ps_mask_save(pred, saved.as_ptr()), PsStatus::PsOk);
        let mut back = ptr::null_mut();
        assert_eq!(ps_mask_load(saved.as_ptr(), &mut back), PsStatus::PsOk);
        assert_eq!(ps_dice(back, pred, 2, &mut d), PsStatus::PsOk);
        assert_eq!(d, 1.0);

        for m in [pred, reference, back] {
            ps_mask_free(m);
        }
        ps_volume_free(vol);
        ps_model_free(model);
    }
}

#[test]
fn volumes_from_buffers_validate_inputs() {
    let voxels = [-1000i16; 2 * 3 * 4];
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(
            ps_volume_new(2, 3, 4, 1.0, 0.5, 0.5, voxels.as_ptr(), &mut v),
            PsStatus::PsOk
        );
        let mut shape = [0usize; 3];
        ps_volume_shape(v, shape.as_mut_ptr());
        assert_eq!(shape, [2, 3, 4]);
        ps_volume_free(v);
        let mut bad = ptr::null_mut();
        assert_eq!(
            ps_volume_new(2, 3, 4, -1.0, 0.5, 0.5, voxels.as_ptr(), &mut bad),
            PsStatus::PsErrData
        );
        assert!(bad.is_null());
        assert_eq!(
            ps_volume_new(2, 3, 4, 1.0, 0.5, 0.5, ptr::null(), &mut bad),
            PsStatus::PsErrNullArgument
        );
    }
}

#[test]
fn header_declares_every_exported_function() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pneumoseg.h"))
            .unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 15);
    for name in exported {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    for item in [
        "PsModel",
        "PsVolume",
        "PsMask",
        "PsQuantReport",
        "PS_OK",
        "PS_ERR_INTERNAL",
    ] {
        assert!(header.contains(item), "{item} missing from header");
    }
}
