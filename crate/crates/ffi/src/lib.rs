//! C ABI over the flowdet library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns an `i32` status (`FLOWDET_OK` on success); the message of the
//! most recent failure on the calling thread is available through
//! [`flowdet_last_error`]. Panics are caught and reported as
//! `FLOWDET_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flowdet::data::{load_kitti_bin, write_kitti_bin, Box3};
use flowdet::eval::bev_iou;
use flowdet::model::{pair_forward_flow, BackboneGeometry, ModelParams, PairGeometry};
use flowdet::numeric::Tensor;
use flowdet::pipeline::{detect_boxes, Checkpoint, RunConfig};
use flowdet::pointops::PointCloud;
use flowdet::Error;

pub const FLOWDET_OK: i32 = 0;
pub const FLOWDET_ERR_NULL: i32 = 1;
pub const FLOWDET_ERR_INVALID: i32 = 2;
pub const FLOWDET_ERR_SHAPE: i32 = 3;
pub const FLOWDET_ERR_NON_FINITE: i32 = 4;
pub const FLOWDET_ERR_IO: i32 = 5;
pub const FLOWDET_ERR_FORMAT: i32 = 6;
pub const FLOWDET_ERR_CHECKPOINT: i32 = 7;
pub const FLOWDET_ERR_CONFIG: i32 = 8;
pub const FLOWDET_ERR_DIVERGENCE: i32 = 9;
pub const FLOWDET_ERR_BUFFER_TOO_SMALL: i32 = 10;
pub const FLOWDET_ERR_PANIC: i32 = 99;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Shape { .. } => FLOWDET_ERR_SHAPE,
        Error::NonFinite(_) => FLOWDET_ERR_NON_FINITE,
        Error::Io(_) => FLOWDET_ERR_IO,
        Error::Format { .. } => FLOWDET_ERR_FORMAT,
        Error::Checkpoint(_) => FLOWDET_ERR_CHECKPOINT,
        Error::Config(_) => FLOWDET_ERR_CONFIG,
        Error::Divergence { .. } => FLOWDET_ERR_DIVERGENCE,
        _ => FLOWDET_ERR_INVALID,
    }
}

/// Failure carried back to the boundary.
struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FLOWDET_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FLOWDET_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FLOWDET_ERR_NULL, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FLOWDET_ERR_INVALID, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn cloud_arg(xyz: *const f32, n: usize) -> Result<PointCloud, Fail> {
    if xyz.is_null() {
        return Err(null("xyz"));
    }
    let data = std::slice::from_raw_parts(xyz, n * 3).to_vec();
    Ok(PointCloud::new(Tensor::new(vec![n, 3], data)?)?)
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Point cloud: `n × 3` coordinates plus optional reflectance.
pub struct FlowdetCloud(PointCloud);

/// Model parameters with their architecture.
pub struct FlowdetModel(ModelParams<f32>);

/// Oriented 3D box; `size` is `(w, l, h)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowdetBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub score: f64,
}

impl From<&Box3> for FlowdetBox {
    fn from(b: &Box3) -> Self {
        Self {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class_id: b.class_id as u32,
            score: b.score,
        }
    }
}

impl From<&FlowdetBox> for Box3 {
    fn from(b: &FlowdetBox) -> Self {
        Box3 {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class_id: b.class_id as usize,
            score: b.score,
        }
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn flowdet_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flowdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cloud from `n` xyz triples.
///
/// # Safety
/// `xyz` must point to `3 n` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_new(
    xyz: *const f32,
    n: usize,
    out: *mut *mut FlowdetCloud,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(FlowdetCloud(cloud_arg(xyz, n)?)));
        Ok(())
    })
}

/// Reads a KITTI velodyne `.bin` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_load_kitti(
    path: *const c_char,
    out: *mut *mut FlowdetCloud,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cloud = load_kitti_bin(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FlowdetCloud(cloud)));
        Ok(())
    })
}

/// Writes a cloud as a KITTI velodyne `.bin` file.
///
/// # Safety
/// `cloud` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_save_kitti(
    cloud: *const FlowdetCloud,
    path: *const c_char,
) -> i32 {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        write_kitti_bin(path_arg(path)?, &c.0)?;
        Ok(())
    })
}

/// Number of points, 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_len(cloud: *const FlowdetCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the coordinates into `buf` (`3 len` floats).
///
/// # Safety
/// `cloud` must be a live handle; `buf` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_xyz(
    cloud: *const FlowdetCloud,
    buf: *mut f32,
    cap: usize,
) -> i32 {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        let data = c.0.xyz.data();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if cap < data.len() {
            return Err(Fail(
                FLOWDET_ERR_BUFFER_TOO_SMALL,
                format!("need {} floats, got {cap}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flowdet_cloud_free(cloud: *mut FlowdetCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Fresh model. With a null `config_path` the default architecture is used;
/// otherwise the `[model]` table of the run config file.
///
/// # Safety
/// `config_path` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_new(
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut FlowdetModel,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let run = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(path_arg(config_path)?)?
        };
        let params = ModelParams::init(run.model, seed)?;
        *out = Box::into_raw(Box::new(FlowdetModel(params)));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_load(
    path: *const c_char,
    out: *mut *mut FlowdetModel,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FlowdetModel(ck.model_params())));
        Ok(())
    })
}

/// Saves a model as a checkpoint (step 0, no optimizer state).
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_save(
    model: *const FlowdetModel,
    path: *const c_char,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        Checkpoint::new(&m.0, 0, "ffi").save(path_arg(path)?)?;
        Ok(())
    })
}

/// Number of points the backbone samples from each frame; the length of
/// the flow output in rows.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_num_samples(model: *const FlowdetModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.backbone.n_sample)
}

/// Estimates scene flow from `frame_t` to `frame_t1`. Writes the sampled
/// frame-t points to `sampled` and their flow vectors to `flow`, both
/// `3 num_samples` floats; `*rows` receives the row count.
///
/// # Safety
/// Handles must be live; `sampled` and `flow` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_flow(
    model: *const FlowdetModel,
    frame_t: *const FlowdetCloud,
    frame_t1: *const FlowdetCloud,
    seed: u64,
    sampled: *mut f32,
    flow: *mut f32,
    cap: usize,
    rows: *mut usize,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let a = handle(frame_t, "frame_t")?;
        let b = handle(frame_t1, "frame_t1")?;
        let rows = out_ptr(rows, "rows")?;
        if sampled.is_null() || flow.is_null() {
            return Err(null("output buffer"));
        }
        let pair = PairGeometry::<f32>::build(&a.0, &b.0, &m.0.config, seed)?;
        let f = pair_forward_flow(&pair, &m.0)?;
        let n = f.data().len();
        if cap < n {
            return Err(Fail(
                FLOWDET_ERR_BUFFER_TOO_SMALL,
                format!("need {n} floats, got {cap}"),
            ));
        }
        ptr::copy_nonoverlapping(pair.frame_t.sampled_xyz.data().as_ptr(), sampled, n);
        ptr::copy_nonoverlapping(f.data().as_ptr(), flow, n);
        *rows = f.rows();
        Ok(())
    })
}

/// Detects boxes in one frame with the default decoding settings. At most
/// `cap` boxes are written; `*count` receives the number written.
///
/// # Safety
/// Handles must be live; `boxes` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_detect(
    model: *const FlowdetModel,
    frame: *const FlowdetCloud,
    seed: u64,
    boxes: *mut FlowdetBox,
    cap: usize,
    count: *mut usize,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(frame, "frame")?;
        let count = out_ptr(count, "count")?;
        if boxes.is_null() && cap > 0 {
            return Err(null("boxes"));
        }
        let geom = BackboneGeometry::<f32>::build(&c.0, &m.0.config.backbone, seed)?;
        let eval = RunConfig::default().detect.eval;
        let dets = detect_boxes(&geom, &m.0, &eval)?;
        let n = dets.len().min(cap);
        for (i, d) in dets.iter().take(n).enumerate() {
            *boxes.add(i) = FlowdetBox::from(d);
        }
        *count = n;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flowdet_model_free(model: *mut FlowdetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Bird's-eye-view IoU of two oriented boxes.
///
/// # Safety
/// `a`, `b` must point to valid boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowdet_bev_iou(
    a: *const FlowdetBox,
    b: *const FlowdetBox,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let a = handle(a, "a")?;
        let b = handle(b, "b")?;
        let out = out_ptr(out, "out")?;
        *out = bev_iou(&Box3::from(a), &Box3::from(b));
        Ok(())
    })
}
