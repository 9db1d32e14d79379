//! C ABI for the poisonbench simulator.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `pb_*_new`/`pb_*_load` call and released by the matching `pb_*_free`.
//! Fallible calls return a [`PbStatus`]; the message of the last failure on
//! the calling thread is available from [`pb_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use poisonbench::agent::Episode;
use poisonbench::harness::config::parse_pairs;
use poisonbench::harness::{self, ExperimentConfig, HarnessError, Method, Models, Workspace};
use poisonbench::influence::InfluenceEngine;
use poisonbench::risk::{parse_sequence, write_sequence};

/// Result codes shared by all fallible calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    MissingArtifact = 5,
    OutOfRange = 6,
    Runtime = 7,
    Panic = 8,
}

/// Parsed experiment configuration.
pub struct PbConfig(ExperimentConfig);

/// Corpus, embeddings, dataset and target list built from a configuration.
pub struct PbWorkspace(Workspace);

/// Offline ensemble and online model.
pub struct PbModels(Models);

/// Influence estimator around the offline ensemble.
pub struct PbEngine(InfluenceEngine);

/// Outcome of one attack method on one target.
pub struct PbAttack(Episode);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(PbStatus, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) => PbStatus::Config,
            HarnessError::Io { .. } => PbStatus::Io,
            HarnessError::MissingArtifact(_) | HarnessError::StaleArtifact(_) => PbStatus::MissingArtifact,
            _ => PbStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: PbStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f` with panics and errors turned into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PbStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(PbStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn read_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(PbStatus::NullArgument, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(PbStatus::NullArgument, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(PbStatus::Runtime, "string contains a NUL byte"))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn drop_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next `pb_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer returned by a `pb_*` call documented as
/// returning an owned string, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads a `key = value` config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pb_config_from_file(path: *const c_char, out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let cfg = ExperimentConfig::from_file(Path::new(path), &[]).map_err(HarnessError::from)?;
        write_out(out, boxed(PbConfig(cfg)), "out")
    })
}

/// Parses config text in the file format.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pb_config_from_text(text: *const c_char, out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        let text = read_str(text, "text")?;
        let pairs = parse_pairs(text).map_err(HarnessError::from)?;
        let cfg = ExperimentConfig::from_pairs(&pairs).map_err(HarnessError::from)?;
        write_out(out, boxed(PbConfig(cfg)), "out")
    })
}

/// Sets one key, as a CLI override would. The config is left unchanged when
/// the new value fails validation.
///
/// # Safety
/// `cfg` must come from `pb_config_from_*`; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pb_config_set(cfg: *mut PbConfig, key: *const c_char, value: *const c_char) -> PbStatus {
    guard(|| {
        let cfg = cfg
            .as_mut()
            .ok_or_else(|| fail(PbStatus::NullArgument, "cfg is null"))?;
        let key = read_str(key, "key")?;
        let value = read_str(value, "value")?;
        let mut next = cfg.0.clone();
        next.set(key, value).map_err(HarnessError::from)?;
        next.validate().map_err(HarnessError::from)?;
        cfg.0 = next;
        Ok(())
    })
}

/// Renders the config in the file format. Owned string; free with
/// `pb_string_free`. Returns NULL on failure.
///
/// # Safety
/// `cfg` must come from `pb_config_from_*`.
#[no_mangle]
pub unsafe extern "C" fn pb_config_to_text(cfg: *const PbConfig) -> *mut c_char {
    let mut s = ptr::null_mut();
    guard(|| {
        s = to_c_string(read_ref(cfg, "cfg")?.0.to_text())?;
        Ok(())
    });
    s
}

/// # Safety
/// `cfg` must be NULL or come from `pb_config_from_*`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_config_free(cfg: *mut PbConfig) {
    drop_box(cfg);
}

/// Builds the corpus, embedding table, dataset and targets.
///
/// # Safety
/// `cfg` must come from `pb_config_from_*` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_workspace_load(cfg: *const PbConfig, out: *mut *mut PbWorkspace) -> PbStatus {
    guard(|| {
        let cfg = read_ref(cfg, "cfg")?;
        let ws = Workspace::load(&cfg.0)?;
        write_out(out, boxed(PbWorkspace(ws)), "out")
    })
}

/// Number of attack targets.
///
/// # Safety
/// `ws` must come from `pb_workspace_load` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_workspace_target_count(ws: *const PbWorkspace, out: *mut usize) -> PbStatus {
    guard(|| write_out(out, read_ref(ws, "ws")?.0.targets.len(), "out"))
}

/// News id of target `index`. Owned string; free with `pb_string_free`.
/// Returns NULL when `index` is out of range.
///
/// # Safety
/// `ws` must come from `pb_workspace_load`.
#[no_mangle]
pub unsafe extern "C" fn pb_workspace_target_id(ws: *const PbWorkspace, index: usize) -> *mut c_char {
    let mut s = ptr::null_mut();
    guard(|| {
        let ws = &read_ref(ws, "ws")?.0;
        let n = *ws
            .targets
            .get(index)
            .ok_or_else(|| fail(PbStatus::OutOfRange, format!("target index {index} out of range")))?;
        s = to_c_string(ws.target_id(n).to_string())?;
        Ok(())
    });
    s
}

/// # Safety
/// `ws` must be NULL or come from `pb_workspace_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_workspace_free(ws: *mut PbWorkspace) {
    drop_box(ws);
}

/// Trains the offline ensemble and the online model in memory.
///
/// # Safety
/// `ws` must come from `pb_workspace_load` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_models_fit(ws: *const PbWorkspace, out: *mut *mut PbModels) -> PbStatus {
    guard(|| {
        let models = read_ref(ws, "ws")?.0.fit_models()?;
        write_out(out, boxed(PbModels(models)), "out")
    })
}

/// Reads models written by the `train` command under the configured output.
///
/// # Safety
/// `ws` must come from `pb_workspace_load` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_models_load(ws: *const PbWorkspace, out: *mut *mut PbModels) -> PbStatus {
    guard(|| {
        let models = read_ref(ws, "ws")?.0.load_models()?;
        write_out(out, boxed(PbModels(models)), "out")
    })
}

/// # Safety
/// `models` must be NULL or come from `pb_models_*`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_models_free(models: *mut PbModels) {
    drop_box(models);
}

/// Factorizes the offline ensemble's Hessians for influence estimates.
///
/// # Safety
/// `ws` and `models` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pb_engine_new(
    ws: *const PbWorkspace,
    models: *const PbModels,
    out: *mut *mut PbEngine,
) -> PbStatus {
    guard(|| {
        let ws = &read_ref(ws, "ws")?.0;
        let engine = ws.engine(&read_ref(models, "models")?.0)?;
        write_out(out, boxed(PbEngine(engine)), "out")
    })
}

/// Offline MRR of target `index` before any edit.
///
/// # Safety
/// `ws` and `engine` must be live handles built from the same workspace and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pb_engine_clean_mrr(
    ws: *const PbWorkspace,
    engine: *const PbEngine,
    index: usize,
    out: *mut f64,
) -> PbStatus {
    guard(|| {
        let ws = &read_ref(ws, "ws")?.0;
        let engine = &read_ref(engine, "engine")?.0;
        let n = target_at(ws, index)?;
        let mrr = engine.with_target(n).map_err(HarnessError::from)?.clean_mrr();
        write_out(out, mrr, "out")
    })
}

/// # Safety
/// `engine` must be NULL or come from `pb_engine_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_engine_free(engine: *mut PbEngine) {
    drop_box(engine);
}

fn target_at(ws: &Workspace, index: usize) -> Result<usize, Failure> {
    ws.targets
        .get(index)
        .copied()
        .ok_or_else(|| fail(PbStatus::OutOfRange, format!("target index {index} out of range")))
}

/// Runs `method` ("none", "random", "effective" or "tdp-cp") against
/// target `index` with the workspace's environment and agent settings.
///
/// # Safety
/// `ws` and `engine` must be live handles built from the same workspace,
/// `method` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_run(
    ws: *const PbWorkspace,
    engine: *const PbEngine,
    method: *const c_char,
    index: usize,
    out: *mut *mut PbAttack,
) -> PbStatus {
    guard(|| {
        let ws = &read_ref(ws, "ws")?.0;
        let engine = &read_ref(engine, "engine")?.0;
        let method: Method = read_str(method, "method")?
            .parse()
            .map_err(|e: String| fail(PbStatus::Config, e))?;
        let n = target_at(ws, index)?;
        let env = ws.env(engine, n, ws.cfg.env.clone())?;
        let run = harness::run_method(&env, method, &ws.agent_config(n), ws.cfg.random_seed, n)?;
        write_out(out, boxed(PbAttack(run.episode)), "out")
    })
}

/// Estimated MRR gain of the attack at the time it was run.
///
/// # Safety
/// `attack` must come from `pb_attack_run` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_gain(attack: *const PbAttack, out: *mut f64) -> PbStatus {
    guard(|| write_out(out, read_ref(attack, "attack")?.0.gain, "out"))
}

/// Risk budget consumed.
///
/// # Safety
/// `attack` must come from `pb_attack_run` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_spent(attack: *const PbAttack, out: *mut f64) -> PbStatus {
    guard(|| write_out(out, read_ref(attack, "attack")?.0.spent, "out"))
}

/// Number of word replacements.
///
/// # Safety
/// `attack` must come from `pb_attack_run` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_len(attack: *const PbAttack, out: *mut usize) -> PbStatus {
    guard(|| write_out(out, read_ref(attack, "attack")?.0.perturbations.len(), "out"))
}

/// The replacements as tab-separated `news, old, new, cost` lines, the
/// `.seq` file format. Owned string; free with `pb_string_free`.
///
/// # Safety
/// `attack` must come from `pb_attack_run`.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_sequence(attack: *const PbAttack) -> *mut c_char {
    let mut s = ptr::null_mut();
    guard(|| {
        s = to_c_string(write_sequence(&read_ref(attack, "attack")?.0.perturbations))?;
        Ok(())
    });
    s
}

/// # Safety
/// `attack` must be NULL or come from `pb_attack_run`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_attack_free(attack: *mut PbAttack) {
    drop_box(attack);
}

/// Influence estimate of the MRR gain of a sequence in `.seq` format
/// against target `index`.
///
/// # Safety
/// `ws` and `engine` must be live handles built from the same workspace,
/// `sequence` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pb_estimate_gain(
    ws: *const PbWorkspace,
    engine: *const PbEngine,
    index: usize,
    sequence: *const c_char,
    out: *mut f64,
) -> PbStatus {
    guard(|| {
        let ws = &read_ref(ws, "ws")?.0;
        let engine = &read_ref(engine, "engine")?.0;
        let seq = parse_sequence(read_str(sequence, "sequence")?)
            .map_err(|e| fail(PbStatus::Config, format!("sequence: {e}")))?;
        let n = target_at(ws, index)?;
        let env = ws.env(engine, n, ws.cfg.env.clone())?;
        let gain = env.sequence_gain(&seq).map_err(HarnessError::from)?;
        write_out(out, gain, "out")
    })
}
