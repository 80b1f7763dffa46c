// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `structcorr`.
//!
//! Every fallible function returns an [`ScStatus`] and writes its result
//! through an out-pointer. On failure the message is available from
//! [`sc_last_error_message`] on the same thread. Handles are opaque and
//! released with their `_free` function; strings returned by the library are
//! released with [`sc_free_string`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use structcorr::cli::{ExperimentConfig, Layout};
use structcorr::corpus::{Corpus, CorpusConfig};
use structcorr::correspondence::{rsa_score, DissimilarityMatrix};
use structcorr::intervention::{exploitation_report, ReportSettings};
use structcorr::model::{checkpoint, Hooks, LanguageModel, ModelParams, TrainingProvenance};
use structcorr::oracle::{build_cooccurrence_oracle, build_world_oracle, OracleModel};
use structcorr::world::{generate_world, WorldConfig, WorldStructure};
use structcorr::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    InvalidArgument = 1,
    Schema = 2,
    MissingArtifact = 3,
    Numerical = 4,
    NullPointer = 5,
    Io = 6,
    Panic = 7,
}

/// Which hand-wired oracle to build.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScOracleKind {
    World = 0,
    Cooccurrence = 1,
}

pub struct ScWorld(WorldStructure);

pub struct ScCorpus(Corpus);

enum Inner {
    Trained(ModelParams),
    Oracle(Box<OracleModel>),
}

pub struct ScModel {
    inner: Inner,
    provenance: TrainingProvenance,
}

impl ScModel {
    fn model(&self) -> &dyn LanguageModel {
        match &self.inner {
            Inner::Trained(p) => p,
            Inner::Oracle(o) => o.as_ref(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ScStatus {
    match e {
        Error::Schema(_) | Error::Json(_) | Error::Csv(_) => ScStatus::Schema,
        Error::MissingArtifact(_) => ScStatus::MissingArtifact,
        Error::Divergence(_) | Error::Singular(_) => ScStatus::Numerical,
        Error::Io(_) => ScStatus::Io,
        _ => ScStatus::InvalidArgument,
    }
}

/// Run `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (ScStatus, String)>) -> ScStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            ScStatus::Panic
        }
    }
}

fn lib<T>(r: structcorr::Result<T>) -> Result<T, (ScStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ScStatus, String) {
    (ScStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (ScStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, (ScStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| (ScStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ScStatus, String)> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, (ScStatus, String)> {
    serde_json::from_str(text).map_err(|e| (ScStatus::Schema, format!("{what}: {e}")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (ScStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), (ScStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = CString::new(s).map_err(|_| (ScStatus::InvalidArgument, "string has interior nul".into()))?.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. Free with
/// `sc_free_string`.
#[no_mangle]
pub extern "C" fn sc_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Release a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sc_free_string(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn sc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate a world. `config_json` may be null for the default
/// configuration.
#[no_mangle]
pub unsafe extern "C" fn sc_world_generate(seed: u64, config_json: *const c_char, out: *mut *mut ScWorld) -> ScStatus {
    guard(|| {
        let cfg: WorldConfig = match opt_str(config_json, "config_json")? {
            Some(t) => parse(t, "world config")?,
            None => WorldConfig::default(),
        };
        put(out, ScWorld(lib(generate_world(seed, &cfg))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sc_world_from_json(json: *const c_char, out: *mut *mut ScWorld) -> ScStatus {
    guard(|| put(out, ScWorld(lib(WorldStructure::from_json(req_str(json, "json")?))?)))
}

#[no_mangle]
pub unsafe extern "C" fn sc_world_to_json(world: *const ScWorld, out: *mut *mut c_char) -> ScStatus {
    guard(|| put_string(out, lib(as_ref(world, "world")?.0.to_json())?))
}

#[no_mangle]
pub unsafe extern "C" fn sc_world_free(world: *mut ScWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Render a corpus from a world. `config_json` may be null for the default
/// configuration.
#[no_mangle]
pub unsafe extern "C" fn sc_corpus_generate(
    world: *const ScWorld,
    config_json: *const c_char,
    out: *mut *mut ScCorpus,
) -> ScStatus {
    guard(|| {
        let world = as_ref(world, "world")?;
        let cfg: CorpusConfig = match opt_str(config_json, "config_json")? {
            Some(t) => parse(t, "corpus config")?,
            None => CorpusConfig::default(),
        };
        put(out, ScCorpus(lib(structcorr::corpus::generate_corpus(&world.0, &cfg))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sc_corpus_n_tokens(corpus: *const ScCorpus, out: *mut usize) -> ScStatus {
    guard(|| {
        let c = as_ref(corpus, "corpus")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = c.0.n_tokens();
        Ok(())
    })
}

/// Token id of `token` in the corpus vocabulary.
#[no_mangle]
pub unsafe extern "C" fn sc_corpus_token_id(corpus: *const ScCorpus, token: *const c_char, out: *mut u32) -> ScStatus {
    guard(|| {
        let c = as_ref(corpus, "corpus")?;
        let id = lib(c.0.vocab.id(req_str(token, "token")?))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = id;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sc_corpus_free(corpus: *mut ScCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Load a trained checkpoint.
#[no_mangle]
pub unsafe extern "C" fn sc_model_load(path: *const c_char, out: *mut *mut ScModel) -> ScStatus {
    guard(|| {
        let (params, provenance) = lib(checkpoint::load(&PathBuf::from(req_str(path, "path")?)))?;
        put(out, ScModel { inner: Inner::Trained(params), provenance })
    })
}

/// Build a hand-wired oracle for a world and corpus.
#[no_mangle]
pub unsafe extern "C" fn sc_model_oracle(
    world: *const ScWorld,
    corpus: *const ScCorpus,
    kind: ScOracleKind,
    out: *mut *mut ScModel,
) -> ScStatus {
    guard(|| {
        let (w, c) = (&as_ref(world, "world")?.0, &as_ref(corpus, "corpus")?.0);
        let oracle = lib(match kind {
            ScOracleKind::World => build_world_oracle(w, c),
            ScOracleKind::Cooccurrence => build_cooccurrence_oracle(w, c),
        })?;
        let provenance = oracle.provenance.clone();
        put(out, ScModel { inner: Inner::Oracle(Box::new(oracle)), provenance })
    })
}

/// Greedy next token after `tokens[0..len]`.
#[no_mangle]
pub unsafe extern "C" fn sc_model_next_token(
    model: *const ScModel,
    tokens: *const u32,
    len: usize,
    out: *mut u32,
) -> ScStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        let ids = std::slice::from_raw_parts(tokens, len);
        let pass = lib(m.model().forward_with_trace(ids, &Hooks::new()))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = pass.argmax();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sc_model_free(model: *mut ScModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spearman RSA between two row-major `n`×`n` dissimilarity matrices.
#[no_mangle]
pub unsafe extern "C" fn sc_rsa_score(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> ScStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("matrix"));
        }
        let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let read = |p: *const f64| {
            lib(DissimilarityMatrix::new(labels.clone(), std::slice::from_raw_parts(p, n * n).to_vec()))
        };
        let r = lib(rsa_score(&read(a)?, &read(b)?))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r;
        Ok(())
    })
}

/// Exploitation report as JSON. `settings_json` holds `ReportSettings`; null
/// uses the defaults.
#[no_mangle]
pub unsafe extern "C" fn sc_exploitation_report(
    model: *const ScModel,
    world: *const ScWorld,
    corpus: *const ScCorpus,
    settings_json: *const c_char,
    out_json: *mut *mut c_char,
) -> ScStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let (w, c) = (&as_ref(world, "world")?.0, &as_ref(corpus, "corpus")?.0);
        let settings: ReportSettings = match opt_str(settings_json, "settings_json")? {
            Some(t) => parse(t, "report settings")?,
            None => ReportSettings::default(),
        };
        let report = lib(exploitation_report(m.model(), &m.provenance, w, c, &settings))?;
        put_string(out_json, lib(serde_json::to_string(&report).map_err(Error::from))?)
    })
}

/// Run the full pipeline for a config file into `out_dir` (null: the
/// config's own directory) with `threads` workers (0: all cores). Writes the
/// report JSON to `out_json` when it is not null.
#[no_mangle]
pub unsafe extern "C" fn sc_audit(
    config_path: *const c_char,
    out_dir: *const c_char,
    threads: u32,
    out_json: *mut *mut c_char,
) -> ScStatus {
    guard(|| {
        let (cfg, bytes) = lib(ExperimentConfig::load(&PathBuf::from(req_str(config_path, "config_path")?)))?;
        let dir = opt_str(out_dir, "out_dir")?.map_or_else(|| cfg.output_dir.clone(), PathBuf::from);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if threads > 0 {
            builder = builder.num_threads(threads as usize);
        }
        let pool = builder.build().map_err(|e| (ScStatus::InvalidArgument, e.to_string()))?;
        let (doc, _) = pool.install(|| lib(structcorr::cli::audit(&cfg, &bytes, &Layout::new(dir))))?;
        if !out_json.is_null() {
            put_string(out_json, lib(serde_json::to_string(&doc).map_err(Error::from))?)?;
        }
        Ok(())
    })
}
