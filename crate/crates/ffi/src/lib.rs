//! C interface to the semslam pipeline.
//!
//! Objects cross the boundary as JSON text (frames, configs, maps, worlds)
//! or CSV (trajectories). Every call returns a [`SemslamStatus`]; on failure
//! [`semslam_last_error`] describes what went wrong. Strings handed out by
//! the library must be released with [`semslam_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use semslam::eval::{landmark_prf, MatchConfig};
use semslam::io::{self, IoError, MapExport};
use semslam::pipeline::{oracle_for, Pipeline, PipelineConfig, PipelineError, RunResult};
use semslam::simulator::{simulate, SimConfig, WorldGT};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemslamStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON, schema or config violation, or an out-of-order frame.
    InvalidInput = 3,
    /// Optimizer or evaluator failure.
    Runtime = 4,
    /// The pipeline was already finished.
    Finished = 5,
    Panic = 6,
}

/// Opaque pipeline handle.
pub struct SemslamPipeline {
    inner: Pipeline,
    result: Option<RunResult>,
}

struct Failure(SemslamStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Graph { .. } => SemslamStatus::Runtime,
            _ => SemslamStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let status = match e {
            IoError::SchemaViolation { .. } => SemslamStatus::InvalidInput,
            IoError::Io { .. } => SemslamStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(SemslamStatus::InvalidInput, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SemslamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SemslamStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal error: {message}"));
            SemslamStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(SemslamStatus::NullArgument, format!("{name} is null"))
}

/// # Safety
/// `s` is null or a valid nul-terminated string.
unsafe fn opt_str<'a>(s: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s).to_str().map(Some).map_err(|e| Failure(SemslamStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn req_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, Failure> {
    opt_str(s, name)?.ok_or_else(|| null(name))
}

unsafe fn handle<'a>(p: *mut SemslamPipeline) -> Result<&'a mut SemslamPipeline, Failure> {
    p.as_mut().ok_or_else(|| null("pipeline"))
}

unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|e| Failure(SemslamStatus::Runtime, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn semslam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn semslam_status_name(status: SemslamStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SemslamStatus::Ok => c"ok",
        SemslamStatus::NullArgument => c"null argument",
        SemslamStatus::InvalidUtf8 => c"invalid utf-8",
        SemslamStatus::InvalidInput => c"invalid input",
        SemslamStatus::Runtime => c"runtime failure",
        SemslamStatus::Finished => c"pipeline finished",
        SemslamStatus::Panic => c"internal error",
    };
    s.as_ptr()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or came from this library and has not been freed.
#[no_mangle]
pub unsafe extern "C" fn semslam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a pipeline. `config_json` may be null for defaults. A scripted
/// oracle needs `world_json`; otherwise it may be null.
///
/// # Safety
/// String arguments are null or nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_new(
    config_json: *const c_char,
    world_json: *const c_char,
    out: *mut *mut SemslamPipeline,
) -> SemslamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: PipelineConfig = match opt_str(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => PipelineConfig::default(),
        };
        cfg.validate()?;
        let world: Option<WorldGT> = match opt_str(world_json, "world_json")? {
            Some(s) => Some(serde_json::from_str(s)?),
            None => None,
        };
        let oracle = oracle_for(&cfg, world)?;
        let inner = Pipeline::new(cfg, oracle)?;
        *out = Box::into_raw(Box::new(SemslamPipeline { inner, result: None }));
        Ok(())
    })
}

/// Destroys a pipeline. Null is ignored.
///
/// # Safety
/// `p` is null or a live handle from [`semslam_pipeline_new`].
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_free(p: *mut SemslamPipeline) {
    if !p.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(p))));
    }
}

/// Processes one frame given as a single JSON dataset line.
///
/// # Safety
/// `p` is a live handle and `frame_json` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_step(p: *mut SemslamPipeline, frame_json: *const c_char) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        if p.result.is_some() {
            return Err(Failure(SemslamStatus::Finished, "pipeline already finished".into()));
        }
        let frame = io::frame_from_json(req_str(frame_json, "frame_json")?, 1)?;
        p.inner.step(&frame)?;
        Ok(())
    })
}

/// Runs the last evaluator round and the final optimization. Later steps
/// fail with `SEMSLAM_STATUS_FINISHED`; finishing twice is a no-op.
///
/// # Safety
/// `p` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_finish(p: *mut SemslamPipeline) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        if p.result.is_none() {
            p.result = Some(p.inner.finish()?);
        }
        Ok(())
    })
}

/// Live landmarks, including those not yet seen often enough to export.
///
/// # Safety
/// `p` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_landmark_count(p: *mut SemslamPipeline, out: *mut usize) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        *out.as_mut().ok_or_else(|| null("out"))? = p.inner.map().landmarks.len();
        Ok(())
    })
}

/// Frames processed so far.
///
/// # Safety
/// `p` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_pose_count(p: *mut SemslamPipeline, out: *mut usize) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        *out.as_mut().ok_or_else(|| null("out"))? = p.inner.pose_count();
        Ok(())
    })
}

/// Current map export as JSON.
///
/// # Safety
/// `p` is a live handle; `out` is writable. Free the result with
/// [`semslam_string_free`].
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_map_json(p: *mut SemslamPipeline, out: *mut *mut c_char) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        give_string(out, serde_json::to_string(&p.inner.export_map())?)
    })
}

/// Current trajectory estimate as CSV with a header row.
///
/// # Safety
/// As [`semslam_pipeline_map_json`].
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_trajectory_csv(
    p: *mut SemslamPipeline,
    out: *mut *mut c_char,
) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        let mut buf = Vec::new();
        io::write_trajectory_to(&mut buf, &p.inner.trajectory())
            .map_err(|e| Failure(SemslamStatus::Runtime, e.to_string()))?;
        give_string(out, String::from_utf8(buf).expect("csv output is utf-8"))
    })
}

/// Every map edit so far as JSON.
///
/// # Safety
/// As [`semslam_pipeline_map_json`].
#[no_mangle]
pub unsafe extern "C" fn semslam_pipeline_edit_log_json(
    p: *mut SemslamPipeline,
    out: *mut *mut c_char,
) -> SemslamStatus {
    guard(|| {
        let p = handle(p)?;
        give_string(out, serde_json::to_string(p.inner.edit_log())?)
    })
}

/// Generates a synthetic dataset. `config_json` may be null for defaults.
/// Frames come back as JSON lines, the world as JSON.
///
/// # Safety
/// `config_json` is null or nul-terminated; both outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn semslam_simulate(
    config_json: *const c_char,
    out_frames_jsonl: *mut *mut c_char,
    out_world_json: *mut *mut c_char,
) -> SemslamStatus {
    guard(|| {
        if out_frames_jsonl.is_null() || out_world_json.is_null() {
            return Err(null("out"));
        }
        let cfg: SimConfig = match opt_str(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => SimConfig::default(),
        };
        let data = simulate(&cfg).map_err(|e| Failure(SemslamStatus::InvalidInput, e.to_string()))?;
        let mut frames = String::new();
        for f in &data.frames {
            frames.push_str(&io::frame_to_json(f));
            frames.push('\n');
        }
        let world = serde_json::to_string(&data.world)?;
        give_string(out_frames_jsonl, frames)?;
        give_string(out_world_json, world).inspect_err(|_| {
            semslam_string_free(*out_frames_jsonl);
            *out_frames_jsonl = ptr::null_mut();
        })
    })
}

/// Landmark precision, recall and F1 of a map against a world, as JSON.
/// Matching uses the category rule at `match_dist` meters.
///
/// # Safety
/// Strings are nul-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn semslam_eval_landmarks(
    map_json: *const c_char,
    world_json: *const c_char,
    match_dist: f64,
    out_json: *mut *mut c_char,
) -> SemslamStatus {
    guard(|| {
        if match_dist.is_nan() || match_dist <= 0.0 {
            return Err(Failure(SemslamStatus::InvalidInput, "match_dist must be positive".into()));
        }
        let map: MapExport = serde_json::from_str(req_str(map_json, "map_json")?)?;
        map.validate().map_err(|m| Failure(SemslamStatus::InvalidInput, m))?;
        let world: WorldGT = serde_json::from_str(req_str(world_json, "world_json")?)?;
        let report = landmark_prf(&map, &world, &MatchConfig { distance: match_dist, ..MatchConfig::default() });
        give_string(out_json, serde_json::to_string(&report)?)
    })
}
