//! C ABI over the sampler.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns an [`AsStatus`] and
//! leaves a message for [`as_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use anneal_stein::cli_io::config::apply_override;
use anneal_stein::cli_io::RunConfig;
use anneal_stein::extension::extend;
use anneal_stein::flow::{clean_prediction, velocity_from_score, NoiseSchedule, ScheduleKind};
use anneal_stein::svgd::{anneal_sample, StepRecord};
use anneal_stein::{Error, ErrorClass, LatticeField, Shape};

/// Status codes. The nonzero values other than `NULL_ARGUMENT` and `PANIC`
/// equal the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsStatus {
    Ok = 0,
    Other = 1,
    Usage = 2,
    Runtime = 3,
    Protocol = 4,
    NullArgument = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsSchedule {
    RectifiedLinear = 0,
    VariancePreserving = 1,
}

/// Parsed and validated run configuration.
pub struct AsConfig {
    doc: toml::Table,
    config: RunConfig,
    base_dir: PathBuf,
}

/// A list of equally shaped lattice fields.
pub struct AsEnsemble {
    fields: Vec<LatticeField>,
}

/// Called once per annealing level. `segment` is 0 for plain sampling.
pub type AsStepCallback = Option<
    unsafe extern "C" fn(user: *mut c_void, segment: u32, t: u32, tau: f64, bandwidth: f64, mean_pairwise_distance: f64),
>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AsStatus {
    match e.class() {
        ErrorClass::Usage => AsStatus::Usage,
        ErrorClass::Runtime => AsStatus::Runtime,
        ErrorClass::Protocol => AsStatus::Protocol,
        ErrorClass::Other => AsStatus::Other,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (AsStatus, String)>) -> AsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            AsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (AsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AsStatus, String) {
    (AsStatus::NullArgument, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AsStatus::Usage, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn as_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn as_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a TOML run configuration. Relative file references resolve against
/// `base_dir`, which may be NULL for the current directory.
///
/// # Safety
/// `toml` and `base_dir` must be NUL-terminated strings or NULL; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn as_config_parse(toml: *const c_char, base_dir: *const c_char, out: *mut *mut AsConfig) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = c_str(toml, "toml")?;
        let base_dir = if base_dir.is_null() {
            PathBuf::from(".")
        } else {
            PathBuf::from(c_str(base_dir, "base_dir")?)
        };
        let doc: toml::Table = toml::from_str(text).map_err(|e| (AsStatus::Usage, e.to_string()))?;
        let config = RunConfig::from_table(doc.clone()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AsConfig { doc, config, base_dir }));
        Ok(())
    })
}

/// Applies a `dotted.key=value` override and re-validates. On failure the
/// configuration is unchanged.
///
/// # Safety
/// `cfg` must come from [`as_config_parse`]; `assignment` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn as_config_set(cfg: *mut AsConfig, assignment: *const c_char) -> AsStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let a = c_str(assignment, "assignment")?;
        let mut doc = cfg.doc.clone();
        apply_override(&mut doc, a).map_err(lib_err)?;
        cfg.config = RunConfig::from_table(doc.clone()).map_err(lib_err)?;
        cfg.doc = doc;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from [`as_config_parse`] or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_config_free(cfg: *mut AsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn forward(cb: AsStepCallback, user: *mut c_void, segment: usize, r: &StepRecord) {
    if let Some(f) = cb {
        unsafe { f(user, segment as u32, r.t as u32, r.tau, r.bandwidth, r.mean_pairwise_distance) }
    }
}

/// Runs the annealed sampler; `out` receives `particles` fields.
///
/// # Safety
/// `cfg` must come from [`as_config_parse`]; `out` must be writable;
/// `callback`, if set, is called on this thread with `user`.
#[no_mangle]
pub unsafe extern "C" fn as_sample(
    cfg: *const AsConfig,
    callback: AsStepCallback,
    user: *mut c_void,
    out: *mut *mut AsEnsemble,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let c = &cfg.config;
        let mut target = c.build_target(&cfg.base_dir).map_err(lib_err)?;
        let ens = anneal_sample(&mut target, &c.svgd, c.particles, c.seed, &mut |r| forward(callback, user, 0, r))
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AsEnsemble {
            fields: ens.into_particles(),
        }));
        Ok(())
    })
}

/// Runs segment extension; `out` receives one field, the concatenated sequence.
///
/// # Safety
/// As [`as_sample`].
#[no_mangle]
pub unsafe extern "C" fn as_extend(
    cfg: *const AsConfig,
    callback: AsStepCallback,
    user: *mut c_void,
    out: *mut *mut AsEnsemble,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let (plan, settings) = cfg.config.build_extension(&cfg.base_dir).map_err(lib_err)?;
        let ext = extend(&plan, &settings, &mut |s, r| forward(callback, user, s, r)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AsEnsemble {
            fields: vec![ext.sequence],
        }));
        Ok(())
    })
}

/// Number of fields; 0 for NULL.
///
/// # Safety
/// `e` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_len(e: *const AsEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.fields.len())
}

/// Writes `(h, w, n, c)` of the fields into `dims`.
///
/// # Safety
/// `e` must come from this library; `dims` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_dims(e: *const AsEnsemble, dims: *mut u32) -> AsStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("ensemble"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let d = e.fields.first().map_or([0; 4], |f| f.shape().dims());
        for (i, v) in d.iter().enumerate() {
            *dims.add(i) = *v as u32;
        }
        Ok(())
    })
}

/// Copies field `index` (row-major `h, w, n, c`) into `buf`, which must hold
/// exactly `len` doubles, the element count.
///
/// # Safety
/// `e` must come from this library; `buf` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_copy(e: *const AsEnsemble, index: usize, buf: *mut f64, len: usize) -> AsStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("ensemble"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let f = e
            .fields
            .get(index)
            .ok_or_else(|| (AsStatus::Usage, format!("index {index} out of range {}", e.fields.len())))?;
        if f.len() != len {
            return Err((AsStatus::Usage, format!("buffer holds {len} values, field has {}", f.len())));
        }
        ptr::copy_nonoverlapping(f.data().as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `e` must come from this library or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_free(e: *mut AsEnsemble) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

fn schedule(kind: AsSchedule, eps: f64) -> Result<NoiseSchedule, (AsStatus, String)> {
    let k = match kind {
        AsSchedule::RectifiedLinear => ScheduleKind::RectifiedLinear,
        AsSchedule::VariancePreserving => ScheduleKind::VariancePreserving,
    };
    NoiseSchedule::new(k, eps).map_err(lib_err)
}

unsafe fn pointwise(
    kind: AsSchedule,
    eps: f64,
    tau: f64,
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
    f: fn(&LatticeField, &LatticeField, f64, &NoiseSchedule) -> anneal_stein::Result<LatticeField>,
) -> AsStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("input or output buffer"));
        }
        let sched = schedule(kind, eps)?;
        let shape = Shape::new(1, 1, len, 1);
        let x = LatticeField::from_vec(shape, std::slice::from_raw_parts(a, len).to_vec()).map_err(lib_err)?;
        let y = LatticeField::from_vec(shape, std::slice::from_raw_parts(b, len).to_vec()).map_err(lib_err)?;
        let r = f(&x, &y, tau, &sched).map_err(lib_err)?;
        ptr::copy_nonoverlapping(r.data().as_ptr(), out, len);
        Ok(())
    })
}

/// Probability-flow velocity from a score, elementwise over `len` values.
///
/// # Safety
/// `x`, `score` and `out` must each hold `len` doubles; `out` may alias neither input.
#[no_mangle]
pub unsafe extern "C" fn as_velocity_from_score(
    kind: AsSchedule,
    eps: f64,
    tau: f64,
    x: *const f64,
    score: *const f64,
    len: usize,
    out: *mut f64,
) -> AsStatus {
    pointwise(kind, eps, tau, x, score, len, out, velocity_from_score)
}

/// Clean prediction from a velocity, elementwise over `len` values.
///
/// # Safety
/// As [`as_velocity_from_score`].
#[no_mangle]
pub unsafe extern "C" fn as_clean_prediction(
    kind: AsSchedule,
    eps: f64,
    tau: f64,
    x: *const f64,
    velocity: *const f64,
    len: usize,
    out: *mut f64,
) -> AsStatus {
    pointwise(kind, eps, tau, x, velocity, len, out, clean_prediction)
}
