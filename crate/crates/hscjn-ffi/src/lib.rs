//! C ABI over the dialogue generation library: load a trained
//! checkpoint, generate responses, score response files, and drive
//! training from a config file.
//!
//! Conventions:
//! - every fallible call returns `HSCJN_STATUS_OK` (0),
//!   `HSCJN_STATUS_USAGE` (1), or `HSCJN_STATUS_RUNTIME` (2);
//! - on failure, `hscjn_last_error()` holds a message for the calling
//!   thread until the next failing call;
//! - strings returned through out-parameters are owned by the caller
//!   and must be released with `hscjn_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_uint, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use hscjn::config::TrainConfig;
use hscjn::corpus::{tokenize_utterance, Vocabulary, EOU_TOKEN};
use hscjn::decode::{render_response, Decoder};
use hscjn::metrics::{eval_report_files, EvalOptions};
use hscjn::model::{ModelConfig, ModelParams};
use hscjn::train::checkpoint::load_checkpoint;
use hscjn::train::run_training;

pub const HSCJN_STATUS_OK: c_int = 0;
pub const HSCJN_STATUS_USAGE: c_int = 1;
pub const HSCJN_STATUS_RUNTIME: c_int = 2;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn fail(code: c_int, msg: &str) -> c_int {
    set_error(msg);
    code
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hscjn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// A loaded model: checkpoint parameters, model shape, and vocabulary.
pub struct HscjnModel {
    params: ModelParams<f32>,
    config: ModelConfig,
    vocab: Vocabulary,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, String> {
    if ptr.is_null() {
        return Err(format!("{what} is null"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| format!("{what} is not valid UTF-8"))
}

/// Load a checkpoint and its vocabulary dump.
///
/// # Safety
/// `checkpoint_path` and `vocab_path` must be NUL-terminated strings;
/// `out_model` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hscjn_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out_model: *mut *mut HscjnModel,
) -> c_int {
    if out_model.is_null() {
        return fail(HSCJN_STATUS_USAGE, "out_model is null");
    }
    *out_model = ptr::null_mut();
    let ckpt = match cstr_arg(checkpoint_path, "checkpoint_path") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    let vocab_path = match cstr_arg(vocab_path, "vocab_path") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    let (header, params, _) = match load_checkpoint::<f32>(Path::new(ckpt)) {
        Ok(x) => x,
        Err(e) => return fail(HSCJN_STATUS_RUNTIME, &e.to_string()),
    };
    let vocab = match Vocabulary::load(Path::new(vocab_path)) {
        Ok(v) => v,
        Err(e) => return fail(HSCJN_STATUS_RUNTIME, &e.to_string()),
    };
    if vocab.len() != header.config.vocab_size {
        return fail(
            HSCJN_STATUS_RUNTIME,
            &format!(
                "vocabulary has {} entries but the checkpoint expects {}",
                vocab.len(),
                header.config.vocab_size
            ),
        );
    }
    let model = Box::new(HscjnModel { params, config: header.config, vocab });
    *out_model = Box::into_raw(model);
    HSCJN_STATUS_OK
}

/// # Safety
/// `model` must come from `hscjn_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hscjn_model_free(model: *mut HscjnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model.
///
/// # Safety
/// `model` must be a live pointer from `hscjn_model_load`.
#[no_mangle]
pub unsafe extern "C" fn hscjn_model_vocab_size(model: *const HscjnModel) -> c_uint {
    if model.is_null() {
        return 0;
    }
    (*model).vocab.len() as c_uint
}

/// Generate a response for a `__eou__`-separated context. With
/// `two_turn`, two consecutive turns are generated and joined by
/// ` __eou__ `. The response is written to `out_response` as a
/// caller-owned string.
///
/// # Safety
/// `model` must be live, `context` NUL-terminated, and `out_response`
/// writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hscjn_generate(
    model: *const HscjnModel,
    context: *const c_char,
    beam_width: c_uint,
    max_len: c_uint,
    two_turn: bool,
    out_response: *mut *mut c_char,
) -> c_int {
    if out_response.is_null() {
        return fail(HSCJN_STATUS_USAGE, "out_response is null");
    }
    *out_response = ptr::null_mut();
    if model.is_null() {
        return fail(HSCJN_STATUS_USAGE, "model is null");
    }
    if beam_width == 0 || max_len == 0 {
        return fail(HSCJN_STATUS_USAGE, "beam_width and max_len must be >= 1");
    }
    let text = match cstr_arg(context, "context") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    let model = &*model;
    let ids: Vec<Vec<u32>> = text
        .split(EOU_TOKEN)
        .map(tokenize_utterance)
        .filter(|u| !u.is_empty())
        .map(|u| u.iter().map(|t| model.vocab.encode(t)).collect())
        .collect();
    if ids.is_empty() {
        return fail(HSCJN_STATUS_USAGE, "context has no utterances");
    }
    let result = std::panic::catch_unwind(|| {
        let mut decoder = Decoder::new(&model.params, &model.config);
        if two_turn {
            let (a, b) = decoder.two_turn(&ids, beam_width as usize, max_len as usize);
            render_response(&model.vocab, &[a, b])
        } else {
            let out = decoder.beam(&ids, beam_width as usize, max_len as usize);
            render_response(&model.vocab, &[out])
        }
    });
    match result {
        Ok(line) => {
            let c = CString::new(line.replace('\0', " ")).unwrap();
            *out_response = c.into_raw();
            HSCJN_STATUS_OK
        }
        Err(_) => fail(HSCJN_STATUS_RUNTIME, "decoding panicked"),
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from an out-parameter of this library and not be
/// freed twice.
#[no_mangle]
pub unsafe extern "C" fn hscjn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Score a responses file against a references file; the JSON report is
/// written to `out_json` as a caller-owned string.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out_json` must be
/// writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hscjn_eval_files(
    responses_path: *const c_char,
    references_path: *const c_char,
    out_json: *mut *mut c_char,
) -> c_int {
    if out_json.is_null() {
        return fail(HSCJN_STATUS_USAGE, "out_json is null");
    }
    *out_json = ptr::null_mut();
    let responses = match cstr_arg(responses_path, "responses_path") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    let references = match cstr_arg(references_path, "references_path") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    match eval_report_files(
        Path::new(responses),
        Path::new(references),
        &EvalOptions::default(),
    ) {
        Ok(report) => match serde_json::to_string_pretty(&report) {
            Ok(json) => {
                *out_json = CString::new(json.replace('\0', " ")).unwrap().into_raw();
                HSCJN_STATUS_OK
            }
            Err(e) => fail(HSCJN_STATUS_RUNTIME, &e.to_string()),
        },
        Err(e) => fail(HSCJN_STATUS_RUNTIME, &e.to_string()),
    }
}

/// Run training as configured by a `key=value` file (the same format
/// the CLI's `--config` accepts; corpus paths go in the file).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hscjn_train_file(config_path: *const c_char) -> c_int {
    let path = match cstr_arg(config_path, "config_path") {
        Ok(s) => s,
        Err(e) => return fail(HSCJN_STATUS_USAGE, &e),
    };
    let mut cfg = TrainConfig::default();
    if let Err(e) = cfg.apply_file(&PathBuf::from(path)) {
        return fail(HSCJN_STATUS_USAGE, &e.to_string());
    }
    if let Err(e) = cfg.validate() {
        return fail(HSCJN_STATUS_USAGE, &e.to_string());
    }
    match run_training(&cfg, None) {
        Ok(_) => HSCJN_STATUS_OK,
        Err(e) => fail(HSCJN_STATUS_RUNTIME, &e.to_string()),
    }
}
