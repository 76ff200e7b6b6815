use std::ffi::{CStr, CString};
use std::ptr;

use stratrla_ffi::*;

const CONFIG: &str = r#"{
    "risk_limit": 0.05,
    "strata": [
        {"size": 200, "assorter": {"kind": "comparison", "upper_bound_original": 1.0, "reported_mean": 0.55}, "method": "alpha_st"},
        {"size": 200, "assorter": {"kind": "comparison", "upper_bound_original": 1.0, "reported_mean": 0.55}, "method": "alpha_st"}
    ],
    "grid_size": 100
}"#;

fn last_error() -> String {
    let p = stratrla_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_session() -> *mut StratrlaSession {
    let cfg = CString::new(CONFIG).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { stratrla_session_new(cfg.as_ptr(), &mut s) }, StratrlaStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn session_runs_until_stopped() {
    let s = new_session();
    let mut status = StratrlaSessionStatus::Exhausted;
    unsafe {
        assert_eq!(stratrla_session_status(s, &mut status), StratrlaStatus::Ok);
        assert_eq!(status, StratrlaSessionStatus::Running);
        let mut rounds = 0;
        while status == StratrlaSessionStatus::Running {
            let mut k = 0usize;
            assert_eq!(stratrla_session_recommend(s, &mut k), StratrlaStatus::Ok);
            assert!(k == 1 || k == 2);
            assert_eq!(stratrla_session_ingest(s, k, 1.0, true, 1.0), StratrlaStatus::Ok);
            assert_eq!(stratrla_session_status(s, &mut status), StratrlaStatus::Ok);
            rounds += 1;
            assert!(rounds < 400);
        }
        assert_eq!(status, StratrlaSessionStatus::Stopped);
        let (mut pf, mut pm) = (1.0, 1.0);
        assert_eq!(stratrla_session_pvalues(s, &mut pf, &mut pm), StratrlaStatus::Ok);
        assert!(pm <= 0.05, "P_M {pm}");
        let mut n = 0u64;
        assert_eq!(stratrla_session_num_draws(s, &mut n), StratrlaStatus::Ok);
        assert_eq!(n, rounds);

        assert_eq!(stratrla_session_ingest(s, 1, 1.0, true, 1.0), StratrlaStatus::Stopped);
        assert!(last_error().contains("stopped"));
        let mut k = 0usize;
        assert_eq!(stratrla_session_recommend(s, &mut k), StratrlaStatus::Stopped);
        stratrla_session_free(s);
    }
}

#[test]
fn snapshot_round_trip_preserves_pvalues() {
    let s = new_session();
    unsafe {
        for i in 0..30 {
            let x = if i % 7 == 3 { 0.0 } else { 1.0 };
            assert_eq!(stratrla_session_ingest(s, 1 + i % 2, x, true, 1.0), StratrlaStatus::Ok);
        }
        let mut json = ptr::null_mut();
        assert_eq!(stratrla_session_snapshot_json(s, &mut json), StratrlaStatus::Ok);
        let mut copy = ptr::null_mut();
        assert_eq!(stratrla_session_from_snapshot(json, &mut copy), StratrlaStatus::Ok);
        stratrla_string_free(json);

        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        stratrla_session_pvalues(s, &mut a, &mut b);
        stratrla_session_pvalues(copy, &mut c, &mut d);
        assert_eq!((a, b), (c, d));
        stratrla_session_free(s);
        stratrla_session_free(copy);
    }
}

#[test]
fn bad_inputs_map_to_codes() {
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(stratrla_session_new(ptr::null(), &mut s), StratrlaStatus::NullPointer);
        let bad = CString::new("{not json").unwrap();
        assert_eq!(stratrla_session_new(bad.as_ptr(), &mut s), StratrlaStatus::Json);
        let invalid = CString::new(r#"{"risk_limit": 1.5, "strata": []}"#).unwrap();
        assert_eq!(stratrla_session_new(invalid.as_ptr(), &mut s), StratrlaStatus::Config);
        assert!(!last_error().is_empty());
        let latin1 = [0xffu8, 0];
        assert_eq!(
            stratrla_session_new(latin1.as_ptr().cast(), &mut s),
            StratrlaStatus::InvalidUtf8
        );
        assert!(s.is_null());

        let s = new_session();
        assert_eq!(stratrla_session_ingest(s, 0, 1.0, true, 1.0), StratrlaStatus::Config);
        assert_eq!(stratrla_session_ingest(s, 3, 1.0, true, 1.0), StratrlaStatus::Config);
        assert_eq!(stratrla_session_ingest(s, 1, 7.0, true, 1.0), StratrlaStatus::Domain);
        assert_eq!(stratrla_session_pvalues(s, ptr::null_mut(), ptr::null_mut()), StratrlaStatus::NullPointer);
        let mut n = 9u64;
        assert_eq!(stratrla_session_num_draws(s, &mut n), StratrlaStatus::Ok);
        assert_eq!(n, 0);
        assert!(stratrla_last_error_message().is_null());
        stratrla_session_free(s);

        assert_eq!(stratrla_session_ingest(ptr::null_mut(), 1, 1.0, false, 0.0), StratrlaStatus::NullPointer);
        stratrla_session_free(ptr::null_mut());
        stratrla_string_free(ptr::null_mut());
    }
}

#[test]
fn pure_pvalue_functions() {
    let mut out = 0.0;
    unsafe {
        let p = [0.1, 0.1];
        assert_eq!(stratrla_fisher_pvalue(p.as_ptr(), 2, &mut out), StratrlaStatus::Ok);
        let x = -2.0 * 2.0 * 0.1f64.ln();
        let expected = (-x / 2.0).exp() * (1.0 + x / 2.0);
        assert!((out - expected).abs() < 1e-12);

        assert_eq!(stratrla_chi2_survival(x, 2, &mut out), StratrlaStatus::Ok);
        assert!((out - expected).abs() < 1e-12);
        assert_eq!(stratrla_chi2_survival(-1.0, 2, &mut out), StratrlaStatus::Domain);
        assert_eq!(stratrla_chi2_survival(1.0, 0, &mut out), StratrlaStatus::Domain);

        let log_m = [1.0, 2.0];
        assert_eq!(stratrla_intersection_pvalue(log_m.as_ptr(), 2, &mut out), StratrlaStatus::Ok);
        assert!((out - (-3.0f64).exp()).abs() < 1e-15);

        assert_eq!(stratrla_fisher_pvalue(ptr::null(), 2, &mut out), StratrlaStatus::NullPointer);
        assert_eq!(stratrla_fisher_pvalue(ptr::null(), 0, &mut out), StratrlaStatus::Config);
        let bad = [1.5];
        assert_eq!(stratrla_fisher_pvalue(bad.as_ptr(), 1, &mut out), StratrlaStatus::Domain);
    }
    let v = unsafe { CStr::from_ptr(stratrla_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/stratrla.h")).unwrap();
    for name in [
        "stratrla_session_new",
        "stratrla_session_free",
        "stratrla_session_ingest",
        "stratrla_session_snapshot_json",
        "stratrla_string_free",
        "stratrla_last_error_message",
        "STRATRLA_STATUS_OK",
        "typedef struct StratrlaSession StratrlaSession",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"stratrla.h\"\nint main(void) { StratrlaSession *s = 0; return stratrla_session_new(\"{}\", &s) == STRATRLA_STATUS_OK; }\n",
    )
    .unwrap();
    let out = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
    {
        Ok(out) => out,
        Err(_) => {
            eprintln!("no C compiler; skipping");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
