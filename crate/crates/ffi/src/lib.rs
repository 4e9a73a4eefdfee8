//! C ABI over render sessions.
//!
//! Every fallible call returns an [`SpStatus`]; on failure the message is
//! available from [`sp_last_error`] on the same thread. Handles are opaque and
//! owned by the caller until passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stylepoint::error::Error;
use stylepoint::image::RgbImage;
use stylepoint::pipeline::{self, PipelineConfig, RenderSession, StyleUpdate};
use stylepoint::synth::SceneKind;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    PoseOutOfBounds = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Internal = 8,
}

/// Opaque render session.
pub struct SpSession {
    inner: RenderSession,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpSessionInfo {
    pub width: u32,
    pub height: u32,
    pub points: u64,
    /// World→camera, row-major 3×4.
    pub canonical_pose: [f64; 12],
    pub max_translation: f64,
    pub max_rotation_deg: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpStyleUpdate {
    /// NUL-terminated hex id.
    pub style_id: [c_char; 17],
    pub cache_hit: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SpStatus {
    match e {
        Error::PoseOutOfBounds(_) => SpStatus::PoseOutOfBounds,
        Error::Io { .. } | Error::IoBare(_) => SpStatus::Io,
        Error::Format { .. } => SpStatus::Format,
        Error::InvalidArgument(_) | Error::InvalidCamera(_) | Error::Config(_) | Error::ImageTooSmall { .. } => {
            SpStatus::InvalidArgument
        }
        _ => SpStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SpStatus, String)>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpStatus, String) {
    (SpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a generated scene (`boxes`, `planes` or `room`) into `dir`.
///
/// # Safety
/// `kind` and `dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sp_make_scene(kind: *const c_char, seed: u64, size: u32, dir: *const c_char) -> SpStatus {
    guard(|| {
        let kind: SceneKind = c_str(kind, "kind")?.parse().map_err(lib)?;
        let dir = PathBuf::from(c_str(dir, "dir")?);
        pipeline::make_scene(kind, seed, size as usize, dir).map_err(lib)?;
        Ok(())
    })
}

/// Opens a session from a pipeline TOML file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_open(config_path: *const c_char, out: *mut *mut SpSession) -> SpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(config_path, "config_path")?;
        let inner = PipelineConfig::load(path).and_then(|c| c.session()).map_err(lib)?;
        *out = Box::into_raw(Box::new(SpSession { inner }));
        Ok(())
    })
}

/// Releases a session; null is ignored.
///
/// # Safety
/// `session` must come from [`sp_session_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_session_free(session: *mut SpSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `session` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_info(session: *const SpSession, out: *mut SpSessionInfo) -> SpStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let info = s.inner.info();
        *out = SpSessionInfo {
            width: info.width as u32,
            height: info.height as u32,
            points: info.points as u64,
            canonical_pose: info.canonical_pose,
            max_translation: info.bounds.translation,
            max_rotation_deg: info.bounds.rotation_deg,
        };
        Ok(())
    })
}

/// Renders `pose` (12 doubles, row-major 3×4) into `rgb`, `width·height·3`
/// bytes, row-major interleaved.
///
/// # Safety
/// `pose` must point to 12 doubles and `rgb` to `rgb_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_session_render(
    session: *const SpSession,
    pose: *const f64,
    width: u32,
    height: u32,
    rgb: *mut u8,
    rgb_len: usize,
) -> SpStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if pose.is_null() {
            return Err(null("pose"));
        }
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let need = width as usize * height as usize * 3;
        if rgb_len < need {
            return Err((SpStatus::BufferTooSmall, format!("need {need} bytes, got {rgb_len}")));
        }
        let pose = std::slice::from_raw_parts(pose, 12);
        let pose = s.inner.check_pose(pose).map_err(lib)?;
        let cam = s.inner.camera(pose, width as usize, height as usize).map_err(lib)?;
        let (img, _) = s.inner.render(&cam).map_err(lib)?;
        std::slice::from_raw_parts_mut(rgb, need).copy_from_slice(&img.to_rgb8());
        Ok(())
    })
}

fn write_update(u: &StyleUpdate, out: &mut SpStyleUpdate) {
    let mut id = [0 as c_char; 17];
    for (d, b) in id.iter_mut().zip(u.style_id.bytes().take(16)) {
        *d = b as c_char;
    }
    *out = SpStyleUpdate {
        style_id: id,
        cache_hit: u.cache_hit,
    };
}

/// Switches the session's style to an 8-bit RGB image.
///
/// # Safety
/// `rgb` must point to `width·height·3` bytes; `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn sp_session_set_style_rgb8(
    session: *const SpSession,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut SpStyleUpdate,
) -> SpStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let (w, h) = (width as usize, height as usize);
        let bytes = std::slice::from_raw_parts(rgb, w * h * 3);
        let img = RgbImage::from_rgb8(w, h, bytes).map_err(lib)?;
        let update = s.inner.set_style(&img).map_err(lib)?;
        if let Some(o) = out.as_mut() {
            write_update(&update, o);
        }
        Ok(())
    })
}

/// Switches the session's style to a PNG file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn sp_session_set_style_png(
    session: *const SpSession,
    path: *const c_char,
    out: *mut SpStyleUpdate,
) -> SpStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let img = RgbImage::read_png(c_str(path, "path")?).map_err(lib)?;
        let update = s.inner.set_style(&img).map_err(lib)?;
        if let Some(o) = out.as_mut() {
            write_update(&update, o);
        }
        Ok(())
    })
}
