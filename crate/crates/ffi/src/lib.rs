//! C ABI over the `cvt` library.
//!
//! Every fallible function returns a [`CvtStatus`]. On failure the message
//! is kept per thread and read with [`cvt_last_error`]. Models and samples
//! are opaque heap handles released with their `_free` function.
//!
//! # Safety
//!
//! Pointer arguments must be non-null, aligned and valid for the stated
//! length unless documented otherwise. Handles must come from this library
//! and must not be used after they are freed. Strings are NUL-terminated
//! UTF-8.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cvt::eval::iou;
use cvt::geometry::{project_point, CameraCalib, Projection};
use cvt::model::{init_params, predict, CameraView, ModelConfig, ParamStore};
use cvt::scene::{generate_scene, read_sample, write_sample, Sample, SceneConfig};
use cvt::tensor::Tensor;
use cvt::train::{load_checkpoint, save_checkpoint};
use cvt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Calibration = 7,
    Degenerate = 8,
    Contract = 9,
    Generation = 10,
    NonFiniteLoss = 11,
    BufferTooSmall = 12,
    InvalidUtf8 = 13,
    /// A point projected to or behind the camera plane.
    Behind = 14,
    Panic = 15,
}

/// Built-in scene and model configurations.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvtPreset {
    /// Four cameras at 64×128, 64×64 map.
    Desk = 0,
    /// Two cameras at 8×16, 32×32 map.
    Micro = 1,
}

/// A model configuration with its parameters.
pub struct CvtModel {
    config: ModelConfig,
    params: ParamStore,
}

/// Camera images, calibrations and map-view label of one scene.
pub struct CvtSample {
    sample: Sample,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CvtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => CvtStatus::Shape,
            Error::InvalidArgument { .. } => CvtStatus::InvalidArgument,
            Error::Contract(_) => CvtStatus::Contract,
            Error::Calibration(_) => CvtStatus::Calibration,
            Error::Degenerate(_) => CvtStatus::Degenerate,
            Error::Config(_) => CvtStatus::Config,
            Error::Format { .. } => CvtStatus::Format,
            Error::Generation { .. } => CvtStatus::Generation,
            Error::NonFiniteLoss { .. } => CvtStatus::NonFiniteLoss,
            Error::Io { .. } => CvtStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CvtStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic for [`cvt_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CvtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CvtStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(CvtStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CvtStatus::InvalidUtf8, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn presets(p: CvtPreset) -> (SceneConfig, ModelConfig) {
    match p {
        CvtPreset::Desk => (SceneConfig::desk(), ModelConfig::desk()),
        CvtPreset::Micro => (SceneConfig::micro(), ModelConfig::micro()),
    }
}

unsafe fn emit<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), Failure> {
    non_null(dst, "output buffer")?;
    if len < src.len() {
        return Err(fail(
            CvtStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cvt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Freshly initialized model of `preset` with parameters drawn from `seed`.
#[no_mangle]
pub unsafe extern "C" fn cvt_model_init(preset: CvtPreset, seed: u64, out: *mut *mut CvtModel) -> CvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let (_, config) = presets(preset);
        let params = init_params(&config, seed)?;
        emit(out, CvtModel { config, params });
        Ok(())
    })
}

/// Loads a checkpoint directory written by `cvt train`.
#[no_mangle]
pub unsafe extern "C" fn cvt_model_load(dir: *const c_char, out: *mut *mut CvtModel) -> CvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let ck = load_checkpoint(&path_arg(dir, "dir")?, None)?;
        emit(
            out,
            CvtModel {
                config: ck.model,
                params: ck.params,
            },
        );
        Ok(())
    })
}

/// Writes the model as a checkpoint without optimizer state.
#[no_mangle]
pub unsafe extern "C" fn cvt_model_save(model: *const CvtModel, dir: *const c_char) -> CvtStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        save_checkpoint(&path_arg(dir, "dir")?, &m.config, &m.params, None)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cvt_model_free(model: *mut CvtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Logit tensor shape `channels × height × width` produced by [`cvt_predict`].
#[no_mangle]
pub unsafe extern "C" fn cvt_model_output_shape(
    model: *const CvtModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CvtStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(channels, "channels")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        let c = &(*model).config;
        *channels = c.channels;
        *height = c.out_h;
        *width = c.out_w;
        Ok(())
    })
}

/// Generates and renders one scene of `preset`.
#[no_mangle]
pub unsafe extern "C" fn cvt_sample_generate(preset: CvtPreset, seed: u64, out: *mut *mut CvtSample) -> CvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let (scene, _) = presets(preset);
        let sample = Sample::from_scene(&generate_scene(&scene, seed)?)?;
        emit(out, CvtSample { sample });
        Ok(())
    })
}

/// Reads one sample directory (`manifest.json` plus BT1 tensors).
#[no_mangle]
pub unsafe extern "C" fn cvt_sample_read(dir: *const c_char, out: *mut *mut CvtSample) -> CvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let sample = read_sample(&path_arg(dir, "dir")?)?;
        emit(out, CvtSample { sample });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cvt_sample_write(sample: *const CvtSample, dir: *const c_char) -> CvtStatus {
    guard(|| {
        non_null(sample, "sample")?;
        write_sample(&path_arg(dir, "dir")?, &(*sample).sample)?;
        Ok(())
    })
}

/// Releases a sample. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cvt_sample_free(sample: *mut CvtSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Number of cameras in the sample, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn cvt_sample_num_cameras(sample: *const CvtSample) -> usize {
    if sample.is_null() {
        0
    } else {
        (*sample).sample.num_cameras()
    }
}

/// Copies the `C×h×w` label (0 or 1 per cell) into `out`, which holds `len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn cvt_sample_label(sample: *const CvtSample, out: *mut f32, len: usize) -> CvtStatus {
    guard(|| {
        non_null(sample, "sample")?;
        copy_out((*sample).sample.label.data(), out, len)
    })
}

/// Map-view logits for `sample` seen through the listed cameras (all of
/// them when `cameras` is null). `out` holds `len` floats in `C×h×w` order.
#[no_mangle]
pub unsafe extern "C" fn cvt_predict(
    model: *const CvtModel,
    sample: *const CvtSample,
    cameras: *const usize,
    n_cameras: usize,
    out: *mut f32,
    len: usize,
) -> CvtStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(sample, "sample")?;
        let (m, s) = (&*model, &(*sample).sample);
        let all = CameraView::all(&s.images, &s.calibs);
        let views: Vec<CameraView> = if cameras.is_null() {
            all
        } else {
            let picked = std::slice::from_raw_parts(cameras, n_cameras);
            let mut v = Vec::with_capacity(picked.len());
            for &k in picked {
                let view = all.get(k).ok_or_else(|| {
                    fail(
                        CvtStatus::InvalidArgument,
                        format!("camera {k} out of range for {} cameras", all.len()),
                    )
                })?;
                v.push(*view);
            }
            v
        };
        let logits = predict(&m.params, &m.config, &views)?;
        copy_out(logits.data(), out, len)
    })
}

/// Per-channel IoU of `channels×height×width` logits against a 0/1 target
/// at probability threshold 0.5. An empty union scores 1. `out` receives
/// `channels` values.
#[no_mangle]
pub unsafe extern "C" fn cvt_iou(
    logits: *const f32,
    target: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CvtStatus {
    guard(|| {
        non_null(logits, "logits")?;
        non_null(target, "target")?;
        let n = channels * height * width;
        let shape = [channels, height, width];
        let z = Tensor::new(shape, std::slice::from_raw_parts(logits, n).to_vec())?;
        let y = Tensor::new(shape, std::slice::from_raw_parts(target, n).to_vec())?;
        let scores: Vec<f64> = iou(&z, &y, None)?.iter().map(|c| c.iou).collect();
        copy_out(&scores, out, channels)
    })
}

/// Projects world point `x` through intrinsics `k` and rotation `r` (both
/// row-major 3×3) of a camera at `t`. Writes the pixel to `uv`; returns
/// `CVT_STATUS_BEHIND` for points not in front of the camera.
#[no_mangle]
pub unsafe extern "C" fn cvt_project_point(
    k: *const f64,
    r: *const f64,
    t: *const f64,
    x: *const f64,
    uv: *mut f64,
) -> CvtStatus {
    guard(|| {
        for (p, name) in [(k, "k"), (r, "r"), (t, "t"), (x, "x")] {
            non_null(p, name)?;
        }
        non_null(uv, "uv")?;
        let mat = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, 9);
            [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
        };
        let vec3 = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, 3);
            [s[0], s[1], s[2]]
        };
        let calib = CameraCalib::new(mat(k), mat(r), vec3(t))?;
        match project_point(&calib, vec3(x)) {
            Projection::Pixel(p) => copy_out(&[p.u, p.v], uv, 2),
            Projection::Behind => Err(fail(CvtStatus::Behind, "point is behind the camera")),
        }
    })
}
