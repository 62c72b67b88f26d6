//! C interface to the subnerf core: load a trained field and a dataset,
//! render views, and compute image metrics.
//!
//! Every function returns an [`SnStatus`]; on failure the message is kept
//! per thread and read with [`sn_last_error`]. Images cross the boundary as
//! row-major interleaved RGB `double` buffers of `width * height * 3` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use subnerf::camera::{Bounds, CameraPose, Intrinsics};
use subnerf::checkpoint::Container;
use subnerf::dataset::{load_dataset, Dataset, Split};
use subnerf::field::FieldParams;
use subnerf::image::Image;
use subnerf::metrics::{psnr, ssim, Kernel};
use subnerf::render::{render_image, RenderConfig};
use subnerf::train::train_config_from_container;
use subnerf::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnKernel {
    Average = 0,
    Tent = 1,
}

/// Pinhole intrinsics in pixels; the principal point is usually the image centre.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// One dataset view. `split` is 0 for training views and 1 for test views.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnViewInfo {
    pub id: usize,
    pub split: u32,
    /// Row-major 4x4 camera-to-world matrix.
    pub cam_to_world: [f64; 16],
    pub lr: SnIntrinsics,
    pub hr: SnIntrinsics,
}

/// A trained radiance field with the sample counts it was trained with.
pub struct SnField {
    params: FieldParams,
    n_coarse: usize,
    n_fine: usize,
}

pub struct SnDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SnStatus::Io,
            Error::Format { .. } | Error::Checkpoint(_) | Error::Dataset(_) => SnStatus::Format,
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::OutsideImage { .. }
            | Error::BehindCamera(_)
            | Error::EmptyBatch => SnStatus::InvalidArgument,
            _ => SnStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SnStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SnStatus::Runtime
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_arg(data: &[f64], width: usize, height: usize) -> Result<Image, Fail> {
    Ok(Image::new(width, height, data.to_vec())?)
}

fn copy_out(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(invalid(format!(
            "{what} holds {} values, need {}",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn rgb_len(width: usize, height: usize) -> Result<usize, Fail> {
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image size overflows"))
}

fn to_intrinsics(i: &SnIntrinsics) -> Result<Intrinsics, Fail> {
    Ok(Intrinsics::new(i.focal, i.cx, i.cy, i.width, i.height)?)
}

fn from_intrinsics(i: &Intrinsics) -> SnIntrinsics {
    SnIntrinsics {
        focal: i.focal,
        cx: i.cx,
        cy: i.cy,
        width: i.width,
        height: i.height,
    }
}

fn pose_from_rows(m: &[f64]) -> Result<CameraPose, Fail> {
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        row.copy_from_slice(&m[r * 4..r * 4 + 4]);
    }
    Ok(CameraPose::new(rows)?)
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a field checkpoint written by `subnerf train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_field_load(path: *const c_char, out: *mut *mut SnField) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = Container::load(path_arg(path, "path")?)?;
        let params = FieldParams::from_container(&c)?;
        let d = RenderConfig::default();
        let (n_coarse, n_fine) = match train_config_from_container(&c)? {
            Some(t) => (t.n_coarse, t.n_fine),
            None => (d.n_coarse, d.n_fine),
        };
        *out = Box::into_raw(Box::new(SnField {
            params,
            n_coarse,
            n_fine,
        }));
        Ok(())
    })
}

/// # Safety
/// `field` must come from [`sn_field_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sn_field_free(field: *mut SnField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Overrides the coarse and fine sample counts used by the render calls.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sn_field_set_samples(field: *mut SnField, n_coarse: usize, n_fine: usize) -> SnStatus {
    guard(|| {
        let f = field.as_mut().ok_or_else(|| null("field"))?;
        let cfg = RenderConfig {
            n_coarse,
            n_fine,
            ..RenderConfig::default()
        };
        cfg.validate()?;
        f.n_coarse = n_coarse;
        f.n_fine = n_fine;
        Ok(())
    })
}

fn render_into(
    f: &SnField,
    pose: &CameraPose,
    intr: &Intrinsics,
    bounds: Bounds,
    white_background: bool,
    rgb: &mut [f64],
    depth: Option<&mut [f64]>,
) -> Result<(), Fail> {
    let cfg = RenderConfig {
        n_coarse: f.n_coarse,
        n_fine: f.n_fine,
        white_background,
        jitter: false,
    };
    if rgb.len() != rgb_len(intr.width, intr.height)? {
        return Err(invalid(format!("rgb buffer holds {} values", rgb.len())));
    }
    if let Some(d) = &depth {
        if d.len() != intr.width * intr.height {
            return Err(invalid(format!("depth buffer holds {} values", d.len())));
        }
    }
    let r = render_image(&f.params, pose, intr, bounds, &cfg)?;
    copy_out(rgb, r.image.data(), "rgb")?;
    if let Some(d) = depth {
        copy_out(d, &r.depth, "depth")?;
    }
    Ok(())
}

/// Renders an arbitrary camera. `cam_to_world` points to 16 row-major
/// values. `rgb` must hold `width * height * 3` values; `depth` may be NULL,
/// otherwise it must hold `width * height` values.
///
/// # Safety
/// All non-NULL pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sn_render(
    field: *const SnField,
    cam_to_world: *const f64,
    intrinsics: *const SnIntrinsics,
    near: f64,
    far: f64,
    white_background: bool,
    rgb: *mut f64,
    rgb_len: usize,
    depth: *mut f64,
    depth_len: usize,
) -> SnStatus {
    guard(|| {
        let f = ref_arg(field, "field")?;
        let pose = pose_from_rows(slice_arg(cam_to_world, 16, "cam_to_world")?)?;
        let intr = to_intrinsics(ref_arg(intrinsics, "intrinsics")?)?;
        let bounds = Bounds::new(near, far)?;
        let rgb = slice_out(rgb, rgb_len, "rgb")?;
        let depth = if depth.is_null() {
            None
        } else {
            Some(slice_out(depth, depth_len, "depth")?)
        };
        render_into(f, &pose, &intr, bounds, white_background, rgb, depth)
    })
}

/// Loads a dataset directory written by `subnerf make-dataset`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_load(path: *const c_char, out: *mut *mut SnDataset) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_dataset(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SnDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`sn_dataset_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_free(dataset: *mut SnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of views in the dataset.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_len(dataset: *const SnDataset, out: *mut usize) -> SnStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = d.inner.views.len();
        Ok(())
    })
}

unsafe fn view_at<'a>(dataset: *const SnDataset, index: usize) -> Result<(&'a Dataset, usize), Fail> {
    let d = &ref_arg(dataset, "dataset")?.inner;
    if index >= d.views.len() {
        return Err(invalid(format!(
            "view index {index} out of range ({} views)",
            d.views.len()
        )));
    }
    Ok((d, index))
}

/// Describes view `index` (0-based position, not the view id).
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_view(dataset: *const SnDataset, index: usize, out: *mut SnViewInfo) -> SnStatus {
    guard(|| {
        let (d, i) = view_at(dataset, index)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let v = &d.views[i];
        let m = v.hr_camera.pose.matrix();
        let mut rows = [0.0; 16];
        for r in 0..4 {
            rows[r * 4..r * 4 + 4].copy_from_slice(&m[r]);
        }
        *out = SnViewInfo {
            id: v.id,
            split: match v.split {
                Split::Train => 0,
                Split::Test => 1,
            },
            cam_to_world: rows,
            lr: from_intrinsics(&v.lr_camera.intr),
            hr: from_intrinsics(&v.hr_camera.intr),
        };
        Ok(())
    })
}

/// Copies the ground-truth image of view `index`, HR when `high_res` is
/// true and LR otherwise.
///
/// # Safety
/// `dataset` must be a live handle and `rgb` valid for `rgb_len` values.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_image(
    dataset: *const SnDataset,
    index: usize,
    high_res: bool,
    rgb: *mut f64,
    rgb_len: usize,
) -> SnStatus {
    guard(|| {
        let (d, i) = view_at(dataset, index)?;
        let v = &d.views[i];
        let img = if high_res { &v.hr } else { &v.lr };
        copy_out(slice_out(rgb, rgb_len, "rgb")?, img.data(), "rgb")
    })
}

/// Renders dataset view `index` at HR resolution with the dataset's bounds
/// and background. `depth` may be NULL.
///
/// # Safety
/// Handles must be live and non-NULL buffers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sn_render_view(
    field: *const SnField,
    dataset: *const SnDataset,
    index: usize,
    rgb: *mut f64,
    rgb_len: usize,
    depth: *mut f64,
    depth_len: usize,
) -> SnStatus {
    guard(|| {
        let f = ref_arg(field, "field")?;
        let (d, i) = view_at(dataset, index)?;
        let cam = d.views[i].hr_camera;
        let rgb = slice_out(rgb, rgb_len, "rgb")?;
        let depth = if depth.is_null() {
            None
        } else {
            Some(slice_out(depth, depth_len, "depth")?)
        };
        render_into(
            f,
            &cam.pose,
            &cam.intr,
            cam.bounds,
            d.manifest.white_background,
            rgb,
            depth,
        )
    })
}

/// PSNR in dB of two `width × height` RGB images with values in [0, 1];
/// identical images report 99.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sn_psnr(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SnStatus {
    guard(|| {
        let n = rgb_len(width, height)?;
        let a = image_arg(slice_arg(a, n, "a")?, width, height)?;
        let b = image_arg(slice_arg(b, n, "b")?, width, height)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = psnr(&a, &b)?;
        Ok(())
    })
}

/// Mean SSIM over the RGB channels (11×11 Gaussian window, σ = 1.5).
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sn_ssim(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SnStatus {
    guard(|| {
        let n = rgb_len(width, height)?;
        let a = image_arg(slice_arg(a, n, "a")?, width, height)?;
        let b = image_arg(slice_arg(b, n, "b")?, width, height)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ssim(&a, &b)?;
        Ok(())
    })
}

/// Downsamples by an integer factor `scale` that divides both sides, with
/// `kernel` one of the [`SnKernel`] values. `out`
/// must hold `(width / scale) * (height / scale) * 3` values.
///
/// # Safety
/// `img` must hold `width * height * 3` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn sn_downsample(
    img: *const f64,
    width: usize,
    height: usize,
    scale: usize,
    kernel: u32,
    out: *mut f64,
    out_len: usize,
) -> SnStatus {
    guard(|| {
        let src = image_arg(slice_arg(img, rgb_len(width, height)?, "img")?, width, height)?;
        let k = match kernel {
            k if k == SnKernel::Average as u32 => Kernel::Average,
            k if k == SnKernel::Tent as u32 => Kernel::Tent,
            k => return Err(invalid(format!("unknown kernel {k}"))),
        };
        let low = k.apply(&src, scale)?;
        copy_out(slice_out(out, out_len, "out")?, low.data(), "out")
    })
}
