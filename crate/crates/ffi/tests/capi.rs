use std::ffi::{CStr, CString};
use std::ptr;

use ndarray::Array2;
use omicsurv::dataio::{self, ClinicalRecord};
use omicsurv::models::{self, Family, ModelSpec};
use omicsurv_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = omicsurv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn auc_matches_known_value() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut out = 0.0;
    let st = unsafe { omicsurv_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) };
    assert_eq!(st, OmsStatus::Ok);
    assert!((out - 0.75).abs() < 1e-12);
    assert!(omicsurv_last_error().is_null());
}

#[test]
fn auc_single_class_is_runtime_error() {
    let scores = [0.1, 0.4];
    let labels = [1u8, 1];
    let mut out = 0.0;
    let st = unsafe { omicsurv_auc(scores.as_ptr(), labels.as_ptr(), 2, &mut out) };
    assert_ne!(st, OmsStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported() {
    let labels = [0u8, 1];
    let mut out = 0.0;
    let st = unsafe { omicsurv_auc(ptr::null(), labels.as_ptr(), 2, &mut out) };
    assert_eq!(st, OmsStatus::NullPointer);
    assert!(last_error().contains("scores"));
    let st = unsafe { omicsurv_make_label(10.0, true, 60.0, ptr::null_mut()) };
    assert_eq!(st, OmsStatus::NullPointer);
    unsafe {
        omicsurv_expression_free(ptr::null_mut());
        omicsurv_km_free(ptr::null_mut());
        omicsurv_model_free(ptr::null_mut());
        assert_eq!(omicsurv_km_len(ptr::null()), 0);
        assert_eq!(omicsurv_model_n_features(ptr::null()), 0);
    }
}

#[test]
fn make_label_cases() {
    let mut out = 9;
    let cases = [
        (100.0, false, 1),
        (100.0, true, 1),
        (30.0, true, 0),
        (30.0, false, -1),
        (60.0, true, 0),
    ];
    for (t, e, want) in cases {
        assert_eq!(unsafe { omicsurv_make_label(t, e, 60.0, &mut out) }, OmsStatus::Ok);
        assert_eq!(out, want, "t={t} event={e}");
    }
    assert_eq!(
        unsafe { omicsurv_make_label(-1.0, true, 60.0, &mut out) },
        OmsStatus::DataError
    );
    assert_eq!(
        unsafe { omicsurv_make_label(10.0, true, 0.0, &mut out) },
        OmsStatus::RuntimeError
    );
}

#[test]
fn tsne_writes_finite_coordinates() {
    let n = 12;
    let m = 3;
    let x: Vec<f64> = (0..n * m).map(|i| ((i * 7919) % 97) as f64 / 10.0).collect();
    let mut out = vec![f64::NAN; n * 2];
    let st = unsafe { omicsurv_tsne(x.as_ptr(), n, m, 2, 3.0, 300, 7, out.as_mut_ptr()) };
    assert_eq!(
        st,
        OmsStatus::Ok,
        "{}",
        if st == OmsStatus::Ok {
            String::new()
        } else {
            last_error()
        }
    );
    assert!(out.iter().all(|v| v.is_finite()));
    let st = unsafe { omicsurv_tsne(x.as_ptr(), n, m, 2, 30.0, 300, 7, out.as_mut_ptr()) };
    assert_eq!(st, OmsStatus::ConfigError);
}

#[test]
fn expression_handles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let genes = vec!["g1".to_string(), "g2".into(), "g3".into()];
    let a = dataio::ExpressionMatrix::new(
        "a",
        ids("a", 4),
        genes.clone(),
        Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64),
        dataio::Scale::Log2,
    )
    .unwrap();
    let b = dataio::ExpressionMatrix::new(
        "b",
        ids("b", 5),
        genes,
        Array2::from_shape_fn((5, 3), |(i, j)| 100.0 + (i * 5 + j) as f64),
        dataio::Scale::Log2,
    )
    .unwrap();
    let (pa, pb, pout) = (
        dir.path().join("a.csv"),
        dir.path().join("b.csv"),
        dir.path().join("out.csv"),
    );
    dataio::write_expression(&a, &pa).unwrap();
    dataio::write_expression(&b, &pb).unwrap();

    let mut ha = ptr::null_mut();
    let mut hb = ptr::null_mut();
    let mut hn = ptr::null_mut();
    unsafe {
        assert_eq!(omicsurv_expression_load(cstr(&pa).as_ptr(), &mut ha), OmsStatus::Ok);
        assert_eq!(omicsurv_expression_load(cstr(&pb).as_ptr(), &mut hb), OmsStatus::Ok);
        let (mut n, mut g) = (0, 0);
        assert_eq!(omicsurv_expression_shape(ha, &mut n, &mut g), OmsStatus::Ok);
        assert_eq!((n, g), (4, 3));
        assert_eq!(omicsurv_expression_fsqn(ha, hb, &mut hn), OmsStatus::Ok);
        assert_eq!(omicsurv_expression_write(hn, cstr(&pout).as_ptr()), OmsStatus::Ok);
        omicsurv_expression_free(ha);
        omicsurv_expression_free(hb);
        omicsurv_expression_free(hn);
    }
    let normalized = dataio::load_expression(&pout, dataio::Orientation::PatientsAsRows).unwrap();
    assert!(normalized.values().iter().all(|&v| (100.0..=124.0).contains(&v)));

    let missing = dir.path().join("missing.csv");
    let mut h = ptr::null_mut();
    let st = unsafe { omicsurv_expression_load(cstr(&missing).as_ptr(), &mut h) };
    assert_eq!(st, OmsStatus::DataError);
    assert!(h.is_null());
}

#[test]
fn km_handle_reports_points() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |id: &str, t: f64, e: bool| ClinicalRecord {
        patient_id: id.into(),
        observed_time_months: t,
        event: e,
        age_years: None,
        group_label: None,
    };
    let records = vec![
        rec("a", 1.0, true),
        rec("b", 2.0, false),
        rec("c", 3.0, true),
        rec("d", 4.0, false),
    ];
    let path = dir.path().join("clinical.csv");
    dataio::write_clinical(&records, &path).unwrap();
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(omicsurv_km_load(cstr(&path).as_ptr(), &mut c), OmsStatus::Ok);
        assert!(omicsurv_km_len(c) >= 2);
        let mut s = 0.0;
        assert_eq!(omicsurv_km_survival_at(c, 0.5, &mut s), OmsStatus::Ok);
        assert_eq!(s, 1.0);
        assert_eq!(omicsurv_km_survival_at(c, 3.5, &mut s), OmsStatus::Ok);
        assert!((s - 0.75 * 0.5).abs() < 1e-12);
        let (mut t, mut sv) = (0.0, 0.0);
        assert_eq!(omicsurv_km_point(c, 0, &mut t, &mut sv), OmsStatus::Ok);
        assert_eq!(t, 1.0);
        assert!((sv - 0.75).abs() < 1e-12);
        assert_eq!(omicsurv_km_point(c, 99, &mut t, &mut sv), OmsStatus::RuntimeError);
        omicsurv_km_free(c);
    }
}

#[test]
fn model_handle_predicts_like_library() {
    let dir = tempfile::tempdir().unwrap();
    let n = 20;
    let x = Array2::from_shape_fn(
        (n, 2),
        |(i, j)| if i < n / 2 { j as f64 } else { 5.0 + j as f64 } + i as f64 * 0.01,
    );
    let y: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    let spec = ModelSpec::new(Family::GaussianNb).with_seed(1);
    let fitted = models::Estimator::Model(spec);
    let features = dataio::FeatureMatrix::new(
        (0..n).map(|i| format!("p{i}")).collect(),
        vec!["f0".into(), "f1".into()],
        x.clone(),
    )
    .unwrap();
    let data = omicsurv::survival::LabeledDataset {
        features,
        labels: y,
        times: vec![100.0; n],
        events: vec![false; n],
        horizon_months: 60.0,
    };
    let model = fitted.fit(&data).unwrap();
    let path = dir.path().join("model.json");
    models::save_model(&model, &path).unwrap();
    let want = model.predict_scores(x.view()).unwrap();

    let flat: Vec<f64> = x.iter().copied().collect();
    let mut out = vec![0.0; n];
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(omicsurv_model_load(cstr(&path).as_ptr(), &mut h), OmsStatus::Ok);
        assert_eq!(omicsurv_model_n_features(h), 2);
        assert_eq!(
            omicsurv_model_predict(h, flat.as_ptr(), n, 2, out.as_mut_ptr()),
            OmsStatus::Ok
        );
        assert_eq!(out, want);
        let st = omicsurv_model_predict(h, flat.as_ptr(), n / 2, 4, out.as_mut_ptr());
        assert_eq!(st, OmsStatus::RuntimeError);
        assert!(last_error().contains("features"));
        omicsurv_model_free(h);
    }
}

#[test]
fn run_experiment_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "seed = \"not a number\"\n").unwrap();
    let st = unsafe { omicsurv_run_experiment(cstr(&path).as_ptr(), 1) };
    assert_eq!(st, OmsStatus::ConfigError);
    let st = unsafe { omicsurv_run_experiment(ptr::null(), 1) };
    assert_eq!(st, OmsStatus::NullPointer);
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(omicsurv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/omicsurv.h")).unwrap();
    for name in [
        "OMICSURV_H",
        "typedef struct OmsExpression OmsExpression",
        "typedef struct OmsKmCurve OmsKmCurve",
        "typedef struct OmsModel OmsModel",
        "OMS_STATUS_OK = 0",
        "OMS_STATUS_PANIC",
        "omicsurv_last_error",
        "omicsurv_version",
        "omicsurv_auc",
        "omicsurv_make_label",
        "omicsurv_tsne",
        "omicsurv_expression_load",
        "omicsurv_expression_shape",
        "omicsurv_expression_fsqn",
        "omicsurv_expression_write",
        "omicsurv_expression_free",
        "omicsurv_km_load",
        "omicsurv_km_len",
        "omicsurv_km_point",
        "omicsurv_km_survival_at",
        "omicsurv_km_free",
        "omicsurv_model_load",
        "omicsurv_model_n_features",
        "omicsurv_model_predict",
        "omicsurv_model_free",
        "omicsurv_run_experiment",
    ] {
        assert!(header.contains(name), "header missing {name}");
    }
}
