//! C ABI over the grid inversion and editing engine.
//!
//! Objects cross the boundary as opaque handles created by `*_from_json` or
//! by an operation and released with the matching `*_free`. Every fallible
//! call returns a [`DikStatus`]; on failure [`dik_last_error_message`]
//! describes the problem for the calling thread. Strings returned by the
//! library must be released with [`dik_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dik_core::bench::PipelineConfig;
use dik_core::grounding::ground;
use dik_core::inversion::{edit, invert, FusionParams};
use dik_core::masking::ScheduleParams;
use dik_core::metrics::{region_metrics, IntensityGrid};
use dik_core::types::parse_json;
use dik_core::{Conditioning, DenoiserSpec, Error, GroundingMask, ResidualStack, RngState, SpatialPrompt, TokenGrid};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DikStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    DimensionMismatch = 5,
    OutOfBounds = 6,
    ChecksumMismatch = 7,
    Infeasible = 8,
    Io = 9,
    Internal = 10,
    Panic = 11,
}

impl From<&Error> for DikStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parse { .. } => DikStatus::Parse,
            Error::Validation(_) => DikStatus::Validation,
            Error::DimensionMismatch { .. } => DikStatus::DimensionMismatch,
            Error::OutOfBounds(_) => DikStatus::OutOfBounds,
            Error::ChecksumMismatch { .. } => DikStatus::ChecksumMismatch,
            Error::Infeasible(_) => DikStatus::Infeasible,
            Error::Io { .. } => DikStatus::Io,
            Error::Case { source, .. } => DikStatus::from(source.as_ref()),
            Error::Internal(_) => DikStatus::Internal,
        }
    }
}

/// Token grid handle.
pub struct DikGrid(TokenGrid);

/// Grounding mask handle.
pub struct DikMask(GroundingMask);

/// Residual stack handle.
pub struct DikStack(ResidualStack);

/// Denoiser handle.
pub struct DikDenoiser(DenoiserSpec);

/// Numeric parameters of inversion and editing.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DikParams {
    pub timesteps: usize,
    pub mask_temperature: f64,
    pub lambda: f64,
    pub lai_margin: f64,
    pub temperature: f64,
}

/// Region metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DikMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl DikParams {
    fn schedule(&self) -> Result<ScheduleParams, Error> {
        ScheduleParams::new(self.timesteps, self.mask_temperature)
    }

    fn fusion(&self) -> Result<FusionParams, Error> {
        let f = FusionParams {
            lambda: self.lambda,
            lai_margin: self.lai_margin,
            temperature: self.temperature,
            lambda_map: None,
        };
        f.validate()?;
        Ok(f)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8,
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DikStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DikStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed for `{name}`"));
            DikStatus::NullArgument
        }
        Ok(Err(Failure::Utf8)) => {
            set_error("string argument is not valid UTF-8".into());
            DikStatus::InvalidUtf8
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            DikStatus::from(&e)
        }
        Err(_) => {
            set_error("panic inside the library".into());
            DikStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or(Failure::Null(name))
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    // SAFETY: non-null and nul-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::Utf8)
}

unsafe fn tokens<'a>(p: *const u32, len: usize) -> Result<&'a [u32], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null("prompt"));
    }
    // SAFETY: `p` points at `len` readable u32 values per the API contract.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: `out` is non-null and writable.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    let c = CString::new(s).map_err(|e| Error::Internal(e.to_string()))?;
    // SAFETY: `out` is non-null and writable.
    unsafe { *out = c.into_raw() };
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn dik_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dik_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: per the contract above.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Library defaults: 64 steps, deterministic masking, λ 0.2, margin 1, τ 1.
#[no_mangle]
pub extern "C" fn dik_params_default() -> DikParams {
    let s = ScheduleParams::default();
    let f = FusionParams::default();
    DikParams {
        timesteps: s.timesteps,
        mask_temperature: s.mask_temperature,
        lambda: f.lambda,
        lai_margin: f.lai_margin,
        temperature: f.temperature,
    }
}

/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_grid_from_json(json: *const c_char, out: *mut *mut DikGrid) -> DikStatus {
    guard(|| unsafe {
        let g = TokenGrid::from_json(text(json, "json")?)?;
        put(out, DikGrid(g))
    })
}

/// # Safety
/// `grid` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_grid_to_json(grid: *const DikGrid, out: *mut *mut c_char) -> DikStatus {
    guard(|| unsafe { put_string(out, borrow(grid, "grid")?.0.to_json()) })
}

/// # Safety
/// `grid` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_grid_shape(grid: *const DikGrid, height: *mut usize, width: *mut usize) -> DikStatus {
    guard(|| unsafe {
        let g = &borrow(grid, "grid")?.0;
        if height.is_null() || width.is_null() {
            return Err(Failure::Null("height/width"));
        }
        *height = g.height();
        *width = g.width();
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dik_grid_free(grid: *mut DikGrid) {
    unsafe { release(grid) }
}

/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_mask_from_json(json: *const c_char, out: *mut *mut DikMask) -> DikStatus {
    guard(|| unsafe {
        let m = GroundingMask::from_json(text(json, "json")?)?;
        put(out, DikMask(m))
    })
}

/// # Safety
/// `mask` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_mask_to_json(mask: *const DikMask, out: *mut *mut c_char) -> DikStatus {
    guard(|| unsafe { put_string(out, borrow(mask, "mask")?.0.to_json()) })
}

/// Number of set positions, or 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dik_mask_count(mask: *const DikMask) -> usize {
    unsafe { mask.as_ref() }.map_or(0, |m| m.0.count())
}

/// # Safety
/// `mask` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dik_mask_free(mask: *mut DikMask) {
    unsafe { release(mask) }
}

/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_stack_from_json(json: *const c_char, out: *mut *mut DikStack) -> DikStatus {
    guard(|| unsafe {
        let s = ResidualStack::from_json(text(json, "json")?)?;
        put(out, DikStack(s))
    })
}

/// # Safety
/// `stack` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_stack_to_json(stack: *const DikStack, out: *mut *mut c_char) -> DikStatus {
    guard(|| unsafe { put_string(out, borrow(stack, "stack")?.0.to_json()) })
}

/// # Safety
/// `stack` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dik_stack_free(stack: *mut DikStack) {
    unsafe { release(stack) }
}

/// Parse a denoiser spec such as `{"kind":"local-hash","vocab_size":32}`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_denoiser_from_json(json: *const c_char, out: *mut *mut DikDenoiser) -> DikStatus {
    guard(|| unsafe {
        let spec: DenoiserSpec = parse_json(text(json, "json")?)?;
        spec.validate()?;
        put(out, DikDenoiser(spec))
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_denoiser_local_hash(
    vocab_size: usize,
    locality_radius: usize,
    out: *mut *mut DikDenoiser,
) -> DikStatus {
    guard(|| unsafe {
        let spec = DenoiserSpec::local_hash(vocab_size, locality_radius);
        spec.validate()?;
        put(out, DikDenoiser(spec))
    })
}

/// # Safety
/// `denoiser` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dik_denoiser_free(denoiser: *mut DikDenoiser) {
    unsafe { release(denoiser) }
}

/// Ground a prompt JSON (`point`, `box` or `text`) on `grid`.
///
/// # Safety
/// `grid` must be a live handle, `prompt_json` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dik_ground(grid: *const DikGrid, prompt_json: *const c_char, out: *mut *mut DikMask) -> DikStatus {
    guard(|| unsafe {
        let g = &borrow(grid, "grid")?.0;
        let prompt: SpatialPrompt = parse_json(text(prompt_json, "prompt_json")?)?;
        put(out, DikMask(ground(g, &prompt)?))
    })
}

/// Stage 1: residual stack of `grid` over `mask` under the source prompt.
///
/// # Safety
/// Handles must be live, `prompt` must point at `prompt_len` values (or be
/// null with length 0), `params` must be readable and `out` writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dik_invert(
    grid: *const DikGrid,
    mask: *const DikMask,
    prompt: *const u32,
    prompt_len: usize,
    denoiser: *const DikDenoiser,
    params: *const DikParams,
    seed: u64,
    out: *mut *mut DikStack,
) -> DikStatus {
    guard(|| unsafe {
        let p = borrow(params, "params")?;
        let stack = invert(
            &borrow(grid, "grid")?.0,
            &borrow(mask, "mask")?.0,
            &p.schedule()?,
            &Conditioning::source(tokens(prompt, prompt_len)?.to_vec()),
            &borrow(denoiser, "denoiser")?.0,
            &p.fusion()?,
            &RngState::from_seed(seed),
        )?;
        put(out, DikStack(stack))
    })
}

/// Stage 2: replay `stack` on its source grid under the target prompt.
///
/// # Safety
/// As for [`dik_invert`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dik_edit(
    grid: *const DikGrid,
    stack: *const DikStack,
    prompt: *const u32,
    prompt_len: usize,
    denoiser: *const DikDenoiser,
    params: *const DikParams,
    seed: u64,
    out: *mut *mut DikGrid,
) -> DikStatus {
    guard(|| unsafe {
        let p = borrow(params, "params")?;
        let edited = edit(
            &borrow(grid, "grid")?.0,
            &borrow(stack, "stack")?.0,
            &Conditioning::target(tokens(prompt, prompt_len)?.to_vec()),
            &p.fusion()?,
            &borrow(denoiser, "denoiser")?.0,
            &RngState::from_seed(seed),
        )?;
        put(out, DikGrid(edited))
    })
}

/// MSE, PSNR and SSIM of two token grids (rendered through the palette)
/// over `region`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dik_region_metrics(
    reference: *const DikGrid,
    candidate: *const DikGrid,
    region: *const DikMask,
    out: *mut DikMetrics,
) -> DikStatus {
    guard(|| unsafe {
        let a = IntensityGrid::from_tokens(&borrow(reference, "reference")?.0)?;
        let b = IntensityGrid::from_tokens(&borrow(candidate, "candidate")?.0)?;
        let m = region_metrics(&a, &b, &borrow(region, "region")?.0)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = DikMetrics {
            mse: m.mse,
            psnr: m.psnr,
            ssim: m.ssim,
        };
        Ok(())
    })
}

/// Run one benchmark case JSON under a pipeline config JSON and return the
/// case report JSON.
///
/// # Safety
/// Strings must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dik_run_case(
    case_json: *const c_char,
    pipeline_json: *const c_char,
    out: *mut *mut c_char,
) -> DikStatus {
    guard(|| unsafe {
        let case = parse_json(text(case_json, "case_json")?)?;
        let config: PipelineConfig = parse_json(text(pipeline_json, "pipeline_json")?)?;
        let report = dik_core::bench::run_case(&case, &config)?;
        let s = serde_json::to_string(&report).map_err(|e| Error::Internal(e.to_string()))?;
        put_string(out, s)
    })
}
