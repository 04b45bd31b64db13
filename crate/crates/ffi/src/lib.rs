//! C ABI for the diagnosis engine.
//!
//! Every fallible call returns a [`VdStatus`]; on failure `vd_last_error`
//! holds a message for the calling thread. Strings handed out by the library
//! are owned by the caller and released with `vd_string_free`. Handles are
//! opaque and released with their matching `*_free` function.
//!
//! An engine may be shared between threads. A session must not be used by
//! two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vibrodiag::diagnose::{Diagnosis, DialogueSession, Engine, ParseStatus};
use vibrodiag::optim::load_checkpoint;
use vibrodiag::sigproc::{decode_wav, read_wav, WavClip};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    MalformedWav = 5,
    Inference = 6,
    Panic = 7,
}

/// How the generated text was mapped to a label.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VdParseStatus {
    Exact = 0,
    Substring = 1,
    Unparseable = 2,
}

/// A loaded checkpoint.
pub struct VdEngine {
    engine: Engine,
}

/// A diagnosed clip plus its follow-up history.
pub struct VdSession {
    session: DialogueSession,
}

/// Outcome of a diagnosis. Both strings are owned by the caller; `label` is
/// null when the text matched no label.
#[repr(C)]
pub struct VdDiagnosis {
    pub raw_text: *mut c_char,
    pub label: *mut c_char,
    pub parse_status: VdParseStatus,
    pub truncated: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

type Res<T> = Result<T, (VdStatus, String)>;

fn guard(f: impl FnOnce() -> Res<()>) -> VdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err((VdStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize) -> Res<&'a [u8]> {
    if p.is_null() {
        return Err((VdStatus::NullArgument, "wav buffer is null".into()));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn c_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

fn inference(e: impl std::fmt::Display) -> (VdStatus, String) {
    (VdStatus::Inference, e.to_string())
}

fn to_c(d: &Diagnosis) -> VdDiagnosis {
    VdDiagnosis {
        raw_text: c_string(&d.raw_text),
        label: d.parsed_label.as_deref().map_or(ptr::null_mut(), c_string),
        parse_status: match d.parse_status {
            ParseStatus::Exact => VdParseStatus::Exact,
            ParseStatus::Substring => VdParseStatus::Substring,
            ParseStatus::Unparseable => VdParseStatus::Unparseable,
        },
        truncated: d.truncated,
    }
}

fn wav_from_bytes(bytes: &[u8]) -> Res<WavClip> {
    decode_wav(bytes).map_err(|e| (VdStatus::MalformedWav, e.to_string()))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn vd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_engine_load(path: *const c_char, out: *mut *mut VdEngine) -> VdStatus {
    guard(|| {
        if out.is_null() {
            return Err((VdStatus::NullArgument, "out is null".into()));
        }
        let path = str_arg(path, "path")?;
        let ckpt = load_checkpoint(Path::new(path)).map_err(|e| (VdStatus::Checkpoint, e.to_string()))?;
        *out = Box::into_raw(Box::new(VdEngine {
            engine: Engine::new(ckpt),
        }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from `vd_engine_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vd_engine_free(engine: *mut VdEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Sets the generation budget in tokens per answer.
///
/// # Safety
/// `engine` must be a live engine not in use by another thread.
#[no_mangle]
pub unsafe extern "C" fn vd_engine_set_max_len(engine: *mut VdEngine, max_len: usize) -> VdStatus {
    guard(|| {
        let e = engine.as_mut().ok_or((VdStatus::NullArgument, "engine is null".to_string()))?;
        e.engine.max_len = max_len.max(1);
        Ok(())
    })
}

unsafe fn engine_ref<'a>(engine: *const VdEngine) -> Res<&'a Engine> {
    engine
        .as_ref()
        .map(|e| &e.engine)
        .ok_or((VdStatus::NullArgument, "engine is null".into()))
}

unsafe fn write_diagnosis(out: *mut VdDiagnosis, d: &Diagnosis) -> Res<()> {
    if out.is_null() {
        return Err((VdStatus::NullArgument, "out is null".into()));
    }
    *out = to_c(d);
    Ok(())
}

/// Diagnoses a WAV file.
///
/// # Safety
/// `engine` must be live, `wav_path` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vd_diagnose_file(engine: *const VdEngine, wav_path: *const c_char, out: *mut VdDiagnosis) -> VdStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let path = str_arg(wav_path, "wav_path")?;
        let clip = read_wav(path).map_err(|e| match e {
            vibrodiag::sigproc::SignalError::IoFailure(io) => (VdStatus::Io, io.to_string()),
            other => (VdStatus::MalformedWav, other.to_string()),
        })?;
        write_diagnosis(out, &e.diagnose(&clip).map_err(inference)?)
    })
}

/// Diagnoses a WAV file held in memory.
///
/// # Safety
/// `engine` must be live, `wav` must point to `len` readable bytes and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn vd_diagnose_bytes(engine: *const VdEngine, wav: *const u8, len: usize, out: *mut VdDiagnosis) -> VdStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let clip = wav_from_bytes(bytes_arg(wav, len)?)?;
        write_diagnosis(out, &e.diagnose(&clip).map_err(inference)?)
    })
}

/// Releases the strings inside a diagnosis and nulls them.
///
/// # Safety
/// `d` must be null or point to a diagnosis filled by this library.
#[no_mangle]
pub unsafe extern "C" fn vd_diagnosis_clear(d: *mut VdDiagnosis) {
    if let Some(d) = d.as_mut() {
        vd_string_free(d.raw_text);
        vd_string_free(d.label);
        d.raw_text = ptr::null_mut();
        d.label = ptr::null_mut();
    }
}

/// Diagnoses an in-memory WAV file and opens a follow-up session on it.
///
/// # Safety
/// As for `vd_diagnose_bytes`; `session` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_session_open(
    engine: *const VdEngine,
    wav: *const u8,
    len: usize,
    session: *mut *mut VdSession,
    out: *mut VdDiagnosis,
) -> VdStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if session.is_null() {
            return Err((VdStatus::NullArgument, "session is null".into()));
        }
        let clip = wav_from_bytes(bytes_arg(wav, len)?)?;
        let (d, s) = e.open_session("ffi", &clip).map_err(inference)?;
        write_diagnosis(out, &d)?;
        *session = Box::into_raw(Box::new(VdSession { session: s }));
        Ok(())
    })
}

/// Asks a follow-up question; the answer goes to `*answer`.
///
/// # Safety
/// `engine` and `session` must be live, `question` NUL-terminated and `answer` valid.
#[no_mangle]
pub unsafe extern "C" fn vd_session_ask(
    engine: *const VdEngine,
    session: *mut VdSession,
    question: *const c_char,
    answer: *mut *mut c_char,
) -> VdStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let s = session
            .as_mut()
            .ok_or((VdStatus::NullArgument, "session is null".to_string()))?;
        let q = str_arg(question, "question")?;
        if answer.is_null() {
            return Err((VdStatus::NullArgument, "answer is null".into()));
        }
        let text = e.follow_up(&mut s.session, q).map_err(inference)?;
        *answer = c_string(&text);
        Ok(())
    })
}

/// Number of follow-up exchanges so far; 0 for null.
///
/// # Safety
/// `session` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn vd_session_turns(session: *const VdSession) -> usize {
    session.as_ref().map_or(0, |s| s.session.history.len())
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `session` must come from `vd_session_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vd_session_free(session: *mut VdSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
