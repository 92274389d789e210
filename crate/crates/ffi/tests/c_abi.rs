use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use scnfusion::features::{extract_subject, Class};
use scnfusion::model::{FusionNet, ModelConfig};
use scnfusion::nifti::{read_nifti_file, read_roi_table_file, AtlasParcellation};
use scnfusion::preprocess::{normalize_robust, NormalizationParams};
use scnfusion::scn::{blend, individual_scn, ScnKind, ScnMatrix};
use scnfusion::synth::{
    generate_cohort, write_cohort, CohortSpec, ATLAS_FILE, ROI_TABLE_FILE, SUBJECT_DIR,
};
use scnfusion_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = scnf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_cohort(dir: &Path) {
    let spec = CohortSpec {
        n_per_class: 2,
        grid: 32,
        ..CohortSpec::default()
    };
    write_cohort(&generate_cohort(&spec).unwrap(), dir, None).unwrap();
}

#[test]
fn volume_and_atlas_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    let subject = dir.path().join(SUBJECT_DIR).join("sub-001.nii.gz");
    unsafe {
        let mut vol = ptr::null_mut();
        assert_eq!(
            scnf_volume_read(cstr(&subject).as_ptr(), &mut vol),
            ScnfStatus::Ok
        );
        let mut shape = [0usize; 3];
        assert_eq!(scnf_volume_shape(vol, shape.as_mut_ptr()), ScnfStatus::Ok);
        assert_eq!(shape, [32, 32, 32]);
        let (mut data, mut len) = (ptr::null(), 0usize);
        assert_eq!(scnf_volume_data(vol, &mut data, &mut len), ScnfStatus::Ok);
        let (_, expected) = read_nifti_file(&subject).unwrap();
        assert_eq!(std::slice::from_raw_parts(data, len), &expected.data[..]);

        let mut atlas = ptr::null_mut();
        let status = scnf_atlas_read(
            cstr(&dir.path().join(ATLAS_FILE)).as_ptr(),
            cstr(&dir.path().join(ROI_TABLE_FILE)).as_ptr(),
            &mut atlas,
        );
        assert_eq!(status, ScnfStatus::Ok);
        assert_eq!(scnf_atlas_n_rois(atlas), 116);

        let mut means = vec![0.0; 116];
        let mut iqrs = vec![0.0; 116];
        let mut global = [0.0; 3];
        let status = scnf_extract_features(
            vol,
            atlas,
            116,
            means.as_mut_ptr(),
            iqrs.as_mut_ptr(),
            global.as_mut_ptr(),
        );
        assert_eq!(status, ScnfStatus::Ok);

        let table = read_roi_table_file(&dir.path().join(ROI_TABLE_FILE), None).unwrap();
        let (_, av) = read_nifti_file(&dir.path().join(ATLAS_FILE)).unwrap();
        let parcel = AtlasParcellation::from_volume(&av, table).unwrap();
        let norm = normalize_robust(&expected, &NormalizationParams::default()).unwrap();
        let f = extract_subject("s", Class::Hc, &norm.volume, &norm.mask, &parcel).unwrap();
        assert_eq!(means, f.roi_means);
        assert_eq!(iqrs, f.roi_iqrs);
        assert_eq!(
            global,
            [
                f.global_stats.mean,
                f.global_stats.std,
                f.global_stats.median
            ]
        );

        let status = scnf_extract_features(
            vol,
            atlas,
            10,
            means.as_mut_ptr(),
            iqrs.as_mut_ptr(),
            global.as_mut_ptr(),
        );
        assert_eq!(status, ScnfStatus::InvalidArgument);
        assert!(last_error().contains("116"));

        scnf_atlas_free(atlas);
        scnf_volume_free(vol);
        scnf_volume_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.nii");
    std::fs::write(&bad, b"not a nifti file at all").unwrap();
    unsafe {
        let mut vol = ptr::null_mut();
        assert_eq!(
            scnf_volume_read(cstr(&bad).as_ptr(), &mut vol),
            ScnfStatus::Nifti
        );
        assert!(vol.is_null());
        assert!(last_error().contains("broken.nii"));

        let missing = dir.path().join("missing.nii");
        assert_eq!(
            scnf_volume_read(cstr(&missing).as_ptr(), &mut vol),
            ScnfStatus::Io
        );
        assert_eq!(
            scnf_volume_read(ptr::null(), &mut vol),
            ScnfStatus::NullArgument
        );
        assert_eq!(
            scnf_volume_read(cstr(&bad).as_ptr(), ptr::null_mut()),
            ScnfStatus::NullArgument
        );
        assert_eq!(scnf_atlas_n_rois(ptr::null()), 0);

        let stage = CString::new("bogus").unwrap();
        let out = cstr(dir.path());
        assert_eq!(
            scnf_run_stage(ptr::null(), stage.as_ptr(), out.as_ptr(), 1),
            ScnfStatus::InvalidArgument
        );
        assert!(last_error().contains("bogus"));
    }
}

#[test]
fn scn_matches_core() {
    let n = 5;
    let means = [1.0, 2.0, 0.5, 3.0, 1.5];
    let iqrs = [0.2, 0.1, 0.4, 0.3, 0.6];
    let gm: Vec<f64> = (0..n * n)
        .map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.3 })
        .collect();
    let gi: Vec<f64> = (0..n * n)
        .map(|k| if k % (n + 1) == 0 { 1.0 } else { -0.1 })
        .collect();
    let mut out = vec![0.0; 2 * n * n];
    let status = unsafe {
        scnf_build_scn(
            n,
            means.as_ptr(),
            iqrs.as_ptr(),
            gm.as_ptr(),
            gi.as_ptr(),
            0.55,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, ScnfStatus::Ok);
    let group = |v: &[f64]| ScnMatrix {
        n,
        values: v.to_vec(),
        kind: ScnKind::Group,
    };
    let c0 = blend(&group(&gm), &individual_scn(&means).unwrap(), 0.55).unwrap();
    let c1 = blend(&group(&gi), &individual_scn(&iqrs).unwrap(), 0.55).unwrap();
    assert_eq!(&out[..n * n], &c0.values[..]);
    assert_eq!(&out[n * n..], &c1.values[..]);

    let zeros = [0.0; 5];
    let status = unsafe {
        scnf_build_scn(
            n,
            zeros.as_ptr(),
            iqrs.as_ptr(),
            gm.as_ptr(),
            gi.as_ptr(),
            0.55,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, ScnfStatus::InvalidArgument);
}

#[test]
fn model_predicts_and_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig {
        n_rois: 8,
        n_aux: 11,
        conv_widths: [2, 3, 4],
        scn_fc: [6, 5],
        aux_fc: [4, 3],
        fusion_hidden: 5,
        ..ModelConfig::default()
    };
    let mut net = FusionNet::new(config, 3).unwrap();
    let stem = dir.path().join("m");
    net.save(&stem, serde_json::json!({})).unwrap();

    let scn: Vec<f64> = (0..2 * 64)
        .map(|k| ((k * 37) % 11) as f64 / 11.0 - 0.4)
        .collect();
    let aux: Vec<f64> = (0..11).map(|k| k as f64 * 0.1 - 0.5).collect();
    let t_scn = scnfusion::nn::Tensor::new(vec![1, 2, 8, 8], scn.clone());
    let t_aux = scnfusion::nn::Tensor::new(vec![1, 11], aux.clone());
    let expected = net.forward(&t_scn, &t_aux).unwrap().data[1];
    let expected_no_aux = net.forward_no_aux(&t_scn).unwrap().data[1];

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            scnf_model_load(cstr(&stem).as_ptr(), &mut model),
            ScnfStatus::Ok
        );
        let (mut r, mut k) = (0usize, 0usize);
        assert_eq!(scnf_model_dims(model, &mut r, &mut k), ScnfStatus::Ok);
        assert_eq!((r, k), (8, 11));
        let mut p = 0.0;
        assert_eq!(
            scnf_model_predict(model, scn.as_ptr(), aux.as_ptr(), 1, &mut p),
            ScnfStatus::Ok
        );
        assert_eq!(p, expected);
        assert_eq!(
            scnf_model_predict(model, scn.as_ptr(), ptr::null(), 0, &mut p),
            ScnfStatus::Ok
        );
        assert_eq!(p, expected_no_aux);
        assert_eq!(
            scnf_model_predict(model, scn.as_ptr(), ptr::null(), 1, &mut p),
            ScnfStatus::NullArgument
        );

        let mut scores = vec![-1.0; 8];
        assert_eq!(
            scnf_model_gradcam(model, scn.as_ptr(), aux.as_ptr(), 1, scores.as_mut_ptr()),
            ScnfStatus::Ok
        );
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let max = scores.iter().cloned().fold(0.0, f64::max);
        assert!(max == 1.0 || max == 0.0);
        scnf_model_free(model);

        let missing = dir.path().join("nope");
        assert_ne!(
            scnf_model_load(cstr(&missing).as_ptr(), &mut model),
            ScnfStatus::Ok
        );
    }
}

#[test]
fn auc_uses_midranks() {
    let labels = [0u8, 0, 1, 1];
    let scores = [0.1, 0.5, 0.5, 0.9];
    let mut auc = 0.0;
    assert_eq!(
        unsafe { scnf_auc(labels.as_ptr(), scores.as_ptr(), 4, &mut auc) },
        ScnfStatus::Ok
    );
    assert_eq!(auc, 0.875);
    let bad = [0u8, 2, 1, 1];
    assert_eq!(
        unsafe { scnf_auc(bad.as_ptr(), scores.as_ptr(), 4, &mut auc) },
        ScnfStatus::InvalidArgument
    );
}

#[test]
fn synth_stage_runs_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"synth": {"n_per_class": 2, "grid": 32}}"#).unwrap();
    let out = dir.path().join("out");
    let stage = CString::new("synth").unwrap();
    let status = unsafe {
        scnf_run_stage(
            cstr(&config).as_ptr(),
            stage.as_ptr(),
            cstr(&out).as_ptr(),
            1,
        )
    };
    assert_eq!(status, ScnfStatus::Ok, "{}", last_error());
    assert!(out.join(ATLAS_FILE).exists());
    assert_eq!(std::fs::read_dir(out.join(SUBJECT_DIR)).unwrap().count(), 4);
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/scnfusion.h"))
            .unwrap();
    for f in [
        "scnf_last_error",
        "scnf_volume_read",
        "scnf_atlas_read",
        "scnf_extract_features",
        "scnf_build_scn",
        "scnf_model_load",
        "scnf_model_predict",
        "scnf_model_gradcam",
        "scnf_model_free",
        "scnf_auc",
        "scnf_run_stage",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct ScnfModel ScnfModel;"));
}
