//! C ABI over a trained persearch system.
//!
//! Every fallible call returns a [`PsStatus`]. On failure the message is kept
//! per thread and can be read with [`ps_last_error`] until the next failing
//! call on that thread. Handles are opaque and must be released with
//! [`ps_system_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use persearch::config::KeyValues;
use persearch::pipeline::persist::{load_system, save_system};
use persearch::pipeline::{build_system, PipelineConfig, SearchRequest, System, SystemConfig};
use persearch::world::{generate_world, simulate_logs};
use persearch::{Error, ErrorKind};

/// Call outcome. The error categories share their values with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an otherwise unusable argument.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Shape = 4,
    Numeric = 5,
    Lookup = 6,
    Attention = 7,
    Format = 8,
    Io = 9,
    /// The output buffer is shorter than the result; the required length was written.
    BufferTooSmall = 10,
    /// An internal panic was caught at the boundary.
    Internal = 11,
}

impl From<ErrorKind> for PsStatus {
    fn from(kind: ErrorKind) -> Self {
        match kind {
            ErrorKind::Config => PsStatus::Config,
            ErrorKind::Data => PsStatus::Data,
            ErrorKind::Shape => PsStatus::Shape,
            ErrorKind::Numeric => PsStatus::Numeric,
            ErrorKind::Lookup => PsStatus::Lookup,
            ErrorKind::Attention => PsStatus::Attention,
            ErrorKind::Format => PsStatus::Format,
            ErrorKind::Io => PsStatus::Io,
        }
    }
}

/// Opaque handle to a trained system.
pub struct PsSystem {
    inner: System,
}

/// One ranked result.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsHit {
    pub video_id: u32,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Arg(String),
    Lib(Error),
    Status(PsStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, catching panics and recording the failure message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            PsStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            e.kind().into()
        }
        Ok(Err(Failure::Status(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PsStatus::Internal
        }
    }
}

/// Borrows a C string; null and invalid UTF-8 are argument errors.
unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Failure::Arg(format!("{what} is not UTF-8")))
}

unsafe fn system<'a>(ptr: *const PsSystem) -> Result<&'a System, Failure> {
    ptr.as_ref().map(|s| &s.inner).ok_or_else(|| Failure::Arg("system handle is null".into()))
}

fn hand_out(out: *mut *mut PsSystem, inner: System) -> Result<(), Failure> {
    // SAFETY: the caller checked `out` for null before the system was built.
    unsafe { *out = Box::into_raw(Box::new(PsSystem { inner })) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Generates a world, simulates its logs and trains every model.
///
/// `config` holds `key = value` lines and may be null for the defaults.
///
/// # Safety
/// `config` must be null or a valid NUL-terminated string, and `out` a
/// valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ps_system_build(config: *const c_char, seed: u64, out: *mut *mut PsSystem) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        let mut cfg = SystemConfig::default();
        if !config.is_null() {
            cfg.apply(&KeyValues::parse(text(config, "config")?)?)?;
        }
        let world = generate_world(&cfg.world, seed)?;
        let logs = simulate_logs(&world, &cfg.logs, cfg.days, seed)?;
        hand_out(out, build_system(world, logs, &cfg, seed)?)
    })
}

/// Loads a system saved by [`ps_system_save`] or the CLI's `build-tables` step.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_system_load(dir: *const c_char, out: *mut *mut PsSystem) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        let dir = text(dir, "dir")?;
        hand_out(out, load_system(Path::new(dir))?)
    })
}

/// Writes every artifact of the system into `dir`.
///
/// # Safety
/// `sys` must come from this library and `dir` be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_system_save(sys: *const PsSystem, dir: *const c_char) -> PsStatus {
    guard(|| Ok(save_system(system(sys)?, Path::new(text(dir, "dir")?))?))
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sys` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn ps_system_free(sys: *mut PsSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Entity counts and the first timestamp after the logged history.
///
/// # Safety
/// `sys` must come from this library; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn ps_system_info(
    sys: *const PsSystem,
    users: *mut u32,
    videos: *mut u32,
    queries: *mut u32,
    log_end: *mut u64,
) -> PsStatus {
    guard(|| {
        let s = system(sys)?;
        let end = s.logs.events.iter().map(|e| e.timestamp + 1).max().unwrap_or(0);
        for (ptr, value) in [(users, s.world.users.len()), (videos, s.world.videos.len()), (queries, s.world.queries.len())] {
            if !ptr.is_null() {
                *ptr = value as u32;
            }
        }
        if !log_end.is_null() {
            *log_end = end;
        }
        Ok(())
    })
}

/// Serves the first page for `(user, query)` at `timestamp` with a named
/// preset (`base`, `qrcf_pdr`, `qin` or `pr2`). The page length goes to
/// `out_len`; if it exceeds `capacity` nothing else is written and
/// `PS_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `sys` must come from this library, `preset` be a valid NUL-terminated
/// string, `hits` point to `capacity` writable entries (or be null when
/// `capacity` is 0) and `out_len` be valid.
#[no_mangle]
pub unsafe extern "C" fn ps_system_search(
    sys: *const PsSystem,
    preset: *const c_char,
    user_id: u32,
    query_id: u32,
    timestamp: u64,
    hits: *mut PsHit,
    capacity: usize,
    out_len: *mut usize,
) -> PsStatus {
    guard(|| {
        let s = system(sys)?;
        if out_len.is_null() || (hits.is_null() && capacity > 0) {
            return Err(Failure::Arg("output pointers are null".into()));
        }
        let cfg = PipelineConfig::by_name(text(preset, "preset")?)?;
        let req = SearchRequest { session_id: 0, user_id, query_id, timestamp };
        let out = s.run_pipeline(&cfg, &req)?;
        *out_len = out.page.len();
        if out.page.len() > capacity {
            return Err(Failure::Status(
                PsStatus::BufferTooSmall,
                format!("page holds {} hits, buffer {capacity}", out.page.len()),
            ));
        }
        for (i, hit) in out.page.iter().enumerate() {
            *hits.add(i) = PsHit { video_id: hit.id, score: hit.score };
        }
        Ok(())
    })
}
