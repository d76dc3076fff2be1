//! C ABI over the dialog emotion recognizer: load a checkpoint once, then
//! label dialogs from any language that can call C.
//!
//! Conventions:
//! - Handles are opaque pointers created by `hitrans_session_open` and
//!   released by `hitrans_session_free`.
//! - Functions returning pointers return NULL on failure; functions
//!   returning `HitransStatus` return `Ok` (0) on success. Either way the
//!   failure details are retrievable per thread via
//!   `hitrans_last_error_code` / `hitrans_last_error_message`.
//! - Strings returned as `*mut c_char` are owned by the caller and must be
//!   released with `hitrans_string_free`.
//! - The error-message pointer stays valid until the next failing call on
//!   the same thread.

use hitrans::checkpoint::{self, Checkpoint};
use hitrans::data::Dialog;
use hitrans::model::encode_dialog;
use hitrans::tokenizer::{TokenizerConfig, Vocab};
use hitrans::Error;
use std::cell::{Cell, RefCell};
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Stable result/error codes. Anything nonzero is a failure and pairs with
/// a message from `hitrans_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitransStatus {
    Ok = 0,
    Shape = 1,
    Index = 2,
    Config = 3,
    Contract = 4,
    Length = 5,
    Capacity = 6,
    Parse = 7,
    Data = 8,
    Train = 9,
    Metric = 10,
    Checkpoint = 11,
    Incompatible = 12,
    Cli = 13,
    Io = 14,
    /// A required pointer argument was NULL.
    NullPointer = 100,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 101,
    /// The library panicked; the session may be in an unknown state.
    Panicked = 102,
}

fn status_of(e: &Error) -> HitransStatus {
    match e.kind() {
        "shape" => HitransStatus::Shape,
        "index" => HitransStatus::Index,
        "config" => HitransStatus::Config,
        "contract" => HitransStatus::Contract,
        "length" => HitransStatus::Length,
        "capacity" => HitransStatus::Capacity,
        "parse" => HitransStatus::Parse,
        "data" => HitransStatus::Data,
        "train" => HitransStatus::Train,
        "metric" => HitransStatus::Metric,
        "checkpoint" => HitransStatus::Checkpoint,
        "incompatible" => HitransStatus::Incompatible,
        "cli" => HitransStatus::Cli,
        _ => HitransStatus::Io,
    }
}

thread_local! {
    static LAST_CODE: Cell<HitransStatus> = const { Cell::new(HitransStatus::Ok) };
    static LAST_MESSAGE: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(code: HitransStatus, message: &str) {
    LAST_CODE.with(|c| c.set(code));
    let message = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_MESSAGE.with(|m| *m.borrow_mut() = Some(message));
}

fn clear_error() {
    LAST_CODE.with(|c| c.set(HitransStatus::Ok));
    LAST_MESSAGE.with(|m| *m.borrow_mut() = None);
}

fn fail<T>(code: HitransStatus, message: &str) -> Option<T> {
    set_error(code, message);
    None
}

/// Runs a fallible body with panic containment; `None` means the error slot
/// has been filled.
fn guarded<T>(body: impl FnOnce() -> Option<T>) -> Option<T> {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(result) => result,
        Err(_) => fail(HitransStatus::Panicked, "internal panic"),
    }
}

/// A loaded model plus everything needed to turn dialog text into labels.
/// Opaque to C; create with `hitrans_session_open`, release with
/// `hitrans_session_free`.
pub struct HitransSession {
    ckpt: Checkpoint,
    vocab: Vocab,
    tokenizer: TokenizerConfig,
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Option<&'a str> {
    if ptr.is_null() {
        return fail(HitransStatus::NullPointer, &format!("{} is NULL", name));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Some(s),
        Err(_) => fail(
            HitransStatus::InvalidUtf8,
            &format!("{} is not valid UTF-8", name),
        ),
    }
}

fn owned_c_string(s: String) -> Option<*mut c_char> {
    match CString::new(s) {
        Ok(c) => Some(c.into_raw()),
        Err(_) => fail(
            HitransStatus::Contract,
            "output contains an interior NUL byte",
        ),
    }
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn hitrans_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Error code of the most recent failing call on this thread, or `Ok`.
#[no_mangle]
pub extern "C" fn hitrans_last_error_code() -> HitransStatus {
    LAST_CODE.with(|c| c.get())
}

/// Message of the most recent failing call on this thread, or NULL when no
/// error is pending. Valid until the next failing call on this thread; do
/// not free.
#[no_mangle]
pub extern "C" fn hitrans_last_error_message() -> *const c_char {
    LAST_MESSAGE.with(|m| {
        m.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Loads a checkpoint and its vocabulary file into a ready-to-predict
/// session. Returns NULL on failure (wrong format, fingerprint mismatch,
/// missing files, ...).
///
/// # Safety
/// `checkpoint_path` and `vocab_path` must be NUL-terminated strings valid
/// for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn hitrans_session_open(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
) -> *mut HitransSession {
    guarded(|| {
        clear_error();
        let ckpt_path = unsafe { utf8_arg(checkpoint_path, "checkpoint_path") }?;
        let vocab_path = unsafe { utf8_arg(vocab_path, "vocab_path") }?;
        let open = || -> hitrans::Result<HitransSession> {
            let ckpt = checkpoint::load(Path::new(ckpt_path))?;
            let vocab = Vocab::load(Path::new(vocab_path))?;
            ckpt.require_vocab(&vocab)?;
            let tokenizer = TokenizerConfig {
                max_len: ckpt.model.config.lower.max_positions,
                lowercase: true,
            };
            Ok(HitransSession { ckpt, vocab, tokenizer })
        };
        match open() {
            Ok(session) => Some(Box::into_raw(Box::new(session))),
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
    .unwrap_or(ptr::null_mut())
}

/// Releases a session created by `hitrans_session_open`. NULL is a no-op.
///
/// # Safety
/// `session` must be a pointer returned by `hitrans_session_open` that has
/// not been freed already.
#[no_mangle]
pub unsafe extern "C" fn hitrans_session_free(session: *mut HitransSession) {
    if !session.is_null() {
        drop(unsafe { Box::from_raw(session) });
    }
}

/// Number of emotion classes the loaded model predicts, or -1 on NULL.
///
/// # Safety
/// `session` must be a live pointer from `hitrans_session_open` or NULL.
#[no_mangle]
pub unsafe extern "C" fn hitrans_session_n_classes(session: *const HitransSession) -> c_int {
    if session.is_null() {
        set_error(HitransStatus::NullPointer, "session is NULL");
        return -1;
    }
    unsafe { &*session }.ckpt.labels.len() as c_int
}

/// The model's label names as a JSON array of strings, in class order.
/// Caller frees with `hitrans_string_free`; NULL on failure.
///
/// # Safety
/// `session` must be a live pointer from `hitrans_session_open` or NULL.
#[no_mangle]
pub unsafe extern "C" fn hitrans_session_labels_json(
    session: *const HitransSession,
) -> *mut c_char {
    guarded(|| {
        clear_error();
        if session.is_null() {
            return fail(HitransStatus::NullPointer, "session is NULL");
        }
        let names = unsafe { &*session }.ckpt.labels.names();
        owned_c_string(serde_json::to_string(names).expect("label names serialize"))
    })
    .unwrap_or(ptr::null_mut())
}

/// Labels one dialog. `dialog_json` is a JSON object shaped like a corpus
/// line — `{"utterances":[{"text":"...","speaker":"..."}, ...]}` (labels
/// optional and ignored) — and the result is a JSON array with one
/// predicted label name per utterance, in order. Caller frees the result
/// with `hitrans_string_free`; NULL on failure.
///
/// # Safety
/// `session` must be a live pointer from `hitrans_session_open`;
/// `dialog_json` must be a NUL-terminated string valid for the call.
#[no_mangle]
pub unsafe extern "C" fn hitrans_predict_json(
    session: *const HitransSession,
    dialog_json: *const c_char,
) -> *mut c_char {
    guarded(|| {
        clear_error();
        if session.is_null() {
            return fail(HitransStatus::NullPointer, "session is NULL");
        }
        let session = unsafe { &*session };
        let text = unsafe { utf8_arg(dialog_json, "dialog_json") }?;
        let dialog: Dialog = match serde_json::from_str(text) {
            Ok(d) => d,
            Err(e) => return fail(HitransStatus::Parse, &format!("dialog JSON: {}", e)),
        };
        if dialog.utterances.is_empty() {
            return fail(HitransStatus::Data, "dialog has no utterances");
        }
        let predict = || -> hitrans::Result<Vec<&str>> {
            let encoded =
                encode_dialog(&dialog, &session.vocab, &session.tokenizer, &session.ckpt.labels)?;
            let preds = session.ckpt.model.predict(&encoded)?;
            preds
                .into_iter()
                .map(|p| {
                    session.ckpt.labels.name(p).ok_or_else(|| {
                        Error::Index(format!("predicted class {} has no label name", p))
                    })
                })
                .collect()
        };
        match predict() {
            Ok(names) => {
                owned_c_string(serde_json::to_string(&names).expect("label names serialize"))
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
    .unwrap_or(ptr::null_mut())
}

/// Frees a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by one of the
/// string-returning functions here, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hitrans_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
