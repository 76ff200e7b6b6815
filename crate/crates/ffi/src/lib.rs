//! C ABI for the stratified audit engine.
//!
//! Sessions are opaque handles created from a JSON audit config and released
//! with [`stratrla_session_free`]. Every fallible call returns a
//! [`StratrlaStatus`]; on failure a message is kept per thread and can be read
//! with [`stratrla_last_error_message`]. Strings returned to the caller are
//! owned by the caller and must be released with [`stratrla_string_free`].
//!
//! Strata are numbered from 1 across this interface.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stratrla::combiner::{chi2_even_df_survival, fisher_pvalue, intersection_pvalue};
use stratrla::engine::{AuditConfig, AuditSession, SessionSnapshot, Status};
use stratrla::AuditError;

/// Result codes. `STRATRLA_STATUS_OK` is zero; everything else is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratrlaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Domain = 4,
    Contract = 5,
    Exhausted = 6,
    AllExhausted = 7,
    Stopped = 8,
    Lp = 9,
    Parse = 10,
    Io = 11,
    Json = 12,
    Panic = 13,
}

/// Session state as reported by [`stratrla_session_status`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratrlaSessionStatus {
    Running = 0,
    Stopped = 1,
    Exhausted = 2,
}

/// Opaque audit session.
pub struct StratrlaSession {
    inner: AuditSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn code_for(err: &AuditError) -> StratrlaStatus {
    match err {
        AuditError::Config(_) => StratrlaStatus::Config,
        AuditError::Domain(_) => StratrlaStatus::Domain,
        AuditError::Contract(_) => StratrlaStatus::Contract,
        AuditError::Exhausted { .. } => StratrlaStatus::Exhausted,
        AuditError::AllExhausted => StratrlaStatus::AllExhausted,
        AuditError::Stopped => StratrlaStatus::Stopped,
        AuditError::Lp(_) => StratrlaStatus::Lp,
        AuditError::Parse { .. } | AuditError::Fixture(_) => StratrlaStatus::Parse,
        AuditError::Io(_) => StratrlaStatus::Io,
        AuditError::Json(_) => StratrlaStatus::Json,
    }
}

struct Failure(StratrlaStatus, String);

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        Failure(code_for(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(StratrlaStatus::Json, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(StratrlaStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> StratrlaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            StratrlaStatus::Ok
        }
        Ok(Err(Failure(code, message))) => {
            set_error(message);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            StratrlaStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(StratrlaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn session_ref<'a>(s: *const StratrlaSession) -> Result<&'a StratrlaSession, Failure> {
    s.as_ref().ok_or_else(|| null("session"))
}

unsafe fn session_mut<'a>(s: *mut StratrlaSession) -> Result<&'a mut StratrlaSession, Failure> {
    s.as_mut().ok_or_else(|| null("session"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("values"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(StratrlaStatus::Json, "output contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stratrla_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL after a
/// success. The pointer is valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stratrla_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stratrla_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a session from an audit config in JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_new(
    config_json: *const c_char,
    out: *mut *mut StratrlaSession,
) -> StratrlaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config: AuditConfig = serde_json::from_str(read_str(config_json, "config_json")?)?;
        let inner = AuditSession::new(config)?;
        out.write(Box::into_raw(Box::new(StratrlaSession { inner })));
        Ok(())
    })
}

/// Rebuilds a session from a snapshot produced by
/// [`stratrla_session_snapshot_json`].
///
/// # Safety
/// `snapshot_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_from_snapshot(
    snapshot_json: *const c_char,
    out: *mut *mut StratrlaSession,
) -> StratrlaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let snap: SessionSnapshot = serde_json::from_str(read_str(snapshot_json, "snapshot_json")?)?;
        let inner = AuditSession::from_snapshot(&snap)?;
        out.write(Box::into_raw(Box::new(StratrlaSession { inner })));
        Ok(())
    })
}

/// Destroys a session. NULL is ignored.
///
/// # Safety
/// `session` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_free(session: *mut StratrlaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Records one audited card. `cvr` is read only when `has_cvr` is non-zero.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_ingest(
    session: *mut StratrlaSession,
    stratum: usize,
    mvr: f64,
    has_cvr: bool,
    cvr: f64,
) -> StratrlaStatus {
    guard(|| {
        let s = session_mut(session)?;
        let k = s.inner.sizes().len();
        if stratum == 0 || stratum > k {
            return Err(Failure(
                StratrlaStatus::Config,
                format!("stratum {stratum} outside 1..={k}"),
            ));
        }
        s.inner.ingest_card(stratum - 1, mvr, has_cvr.then_some(cvr))?;
        Ok(())
    })
}

/// Current maximum combined P-values.
///
/// # Safety
/// `session` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_pvalues(
    session: *const StratrlaSession,
    p_fisher: *mut f64,
    p_intersection: *mut f64,
) -> StratrlaStatus {
    guard(|| {
        let risk = session_ref(session)?.inner.risk();
        write_out(p_fisher, risk.p_fisher, "p_fisher")?;
        write_out(p_intersection, risk.p_intersection, "p_intersection")
    })
}

/// Session state.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_status(
    session: *const StratrlaSession,
    out: *mut StratrlaSessionStatus,
) -> StratrlaStatus {
    guard(|| {
        let status = match session_ref(session)?.inner.status() {
            Status::Running => StratrlaSessionStatus::Running,
            Status::Stopped => StratrlaSessionStatus::Stopped,
            Status::Exhausted => StratrlaSessionStatus::Exhausted,
        };
        write_out(out, status, "out")
    })
}

/// Number of cards ingested so far.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_num_draws(session: *const StratrlaSession, out: *mut u64) -> StratrlaStatus {
    guard(|| write_out(out, session_ref(session)?.inner.num_draws(), "out"))
}

/// Stratum to sample next (numbered from 1).
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_recommend(session: *const StratrlaSession, out: *mut usize) -> StratrlaStatus {
    guard(|| {
        let rec = session_ref(session)?.inner.recommended_stratum()?;
        write_out(out, rec.stratum + 1, "out")
    })
}

/// Session snapshot as JSON. Free the result with [`stratrla_string_free`].
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_session_snapshot_json(
    session: *const StratrlaSession,
    out: *mut *mut c_char,
) -> StratrlaStatus {
    guard(|| {
        let json = serde_json::to_string(&session_ref(session)?.inner.snapshot())?;
        write_out(out, into_c_string(json)?, "out")
    })
}

/// Fisher combination of `len` P-values.
///
/// # Safety
/// `p` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_fisher_pvalue(p: *const f64, len: usize, out: *mut f64) -> StratrlaStatus {
    guard(|| write_out(out, fisher_pvalue(slice(p, len)?)?, "out"))
}

/// `min(1, 1 / prod M_k)` from `len` log supermartingale values.
///
/// # Safety
/// `log_m` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_intersection_pvalue(log_m: *const f64, len: usize, out: *mut f64) -> StratrlaStatus {
    guard(|| write_out(out, intersection_pvalue(slice(log_m, len)?), "out"))
}

/// Upper tail of the chi-squared distribution with `2k` degrees of freedom.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stratrla_chi2_survival(x: f64, k: usize, out: *mut f64) -> StratrlaStatus {
    guard(|| {
        if k == 0 || !x.is_finite() || x < 0.0 {
            return Err(Failure(
                StratrlaStatus::Domain,
                format!("need k >= 1 and finite x >= 0, got k = {k}, x = {x}"),
            ));
        }
        write_out(out, chi2_even_df_survival(x, k), "out")
    })
}
