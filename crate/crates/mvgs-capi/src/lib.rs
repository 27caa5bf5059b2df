//! C ABI over the splatting library: opaque handles, integer status codes,
//! and caller-owned buffers, so any language with a C FFI can bind.
//!
//! Every fallible call returns [`MvgsStatus`]; zero is success, and on any
//! failure [`mvgs_last_error`] yields a thread-local message describing what
//! went wrong. Scenes are opaque [`MvgsScene`] handles created and destroyed
//! in matching pairs; a null handle or output pointer yields
//! `NullArgument`, never a crash. Enum-valued inputs travel as `u32` codes
//! so garbage from the C side is rejected instead of being undefined.
//! Panics are caught at the boundary and surface as the `Panic` status.

use mvgs::batchvar::MiniBatchSpec;
use mvgs::gradients::{gradcheck, CheckLoss};
use mvgs::io::{load_scene, save_scene};
use mvgs::rasterizer::{render, RasterSettings, RenderPlan};
use mvgs::scene::{
    make_synthetic_sized, Camera, CameraLayout, Gaussian3D, Image, SceneDataset,
    PARAMS_PER_GAUSSIAN,
};
use mvgs::trainer::{self, LossMode, TrainConfig, TrainError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result code of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvgsStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument value was out of range or inconsistent.
    InvalidArgument = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// The computation itself failed (non-finite values, tolerances).
    Failed = 4,
    /// A panic was caught at the FFI boundary.
    Panic = 5,
}

/// Image-difference objective used by training; pass as `u32`.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvgsLossMode {
    L1 = 0,
    L2 = 1,
    /// Per-view mix of L1 and windowed structural dissimilarity.
    L1Dssim = 2,
    /// L1 plus depth-aware structural dissimilarity on a merged canvas.
    L1Dssim3d = 3,
}

/// Objective checked by [`mvgs_gradcheck`]; pass as `u32`.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvgsCheckLoss {
    L1 = 0,
    L2 = 1,
    Dssim = 2,
    Dssim3d = 3,
    /// Weighted L1 + DSSIM mix.
    Mix = 4,
    /// L1 on rendered depth.
    DepthL1 = 5,
}

/// Opaque scene handle: gaussians plus the cameras observing them.
pub struct MvgsScene {
    gaussians: Vec<Gaussian3D>,
    cameras: Vec<Camera>,
}

/// Knobs for [`mvgs_train`]; fill via [`mvgs_train_options_default`] first.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MvgsTrainOptions {
    pub iterations: u64,
    /// Seeds initialization, batch sampling, and density control.
    pub seed: u64,
    /// Random gaussians to start from.
    pub init_gaussians: usize,
    /// A [`MvgsLossMode`] value.
    pub loss_mode: u32,
    /// Views per mini-batch; 1 selects single-view batching.
    pub batch_views: usize,
    /// Pixel budget per multi-view batch; 0 means one full canvas.
    pub pixels_per_batch: usize,
}

/// Outcome of one finite-difference gradient check.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MvgsGradcheckResult {
    /// Parameters compared against central differences.
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    /// Degenerate random scenes discarded before checking.
    pub rejected_draws: u32,
    pub passed: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: MvgsStatus, msg: impl std::fmt::Display) -> MvgsStatus {
    let text = msg.to_string().replace('\0', "?");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap());
    status
}

fn guarded(f: impl FnOnce() -> MvgsStatus) -> MvgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(MvgsStatus::Panic, "internal panic caught at the FFI boundary"),
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mvgs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code ("ok", "null_argument", ...).
#[no_mangle]
pub extern "C" fn mvgs_status_name(status: MvgsStatus) -> *const c_char {
    let name: &'static CStr = match status {
        MvgsStatus::Ok => c"ok",
        MvgsStatus::NullArgument => c"null_argument",
        MvgsStatus::InvalidArgument => c"invalid_argument",
        MvgsStatus::Io => c"io",
        MvgsStatus::Failed => c"failed",
        MvgsStatus::Panic => c"panic",
    };
    name.as_ptr()
}

/// ABI revision; bump on any incompatible change.
#[no_mangle]
pub extern "C" fn mvgs_abi_version() -> u32 {
    1
}

/// Flat parameters per gaussian (mean, log scale, quaternion, opacity
/// logit, color).
#[no_mangle]
pub extern "C" fn mvgs_gaussian_param_count() -> usize {
    PARAMS_PER_GAUSSIAN
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, MvgsStatus> {
    if path.is_null() {
        return Err(fail(MvgsStatus::NullArgument, "path is null"));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(MvgsStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

fn hand_out(scene: MvgsScene, out: *mut *mut MvgsScene) -> MvgsStatus {
    unsafe { *out = Box::into_raw(Box::new(scene)) };
    MvgsStatus::Ok
}

/// Generate a deterministic random scene with an orbit of cameras.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle the
/// caller must release with [`mvgs_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_synthetic(
    seed: u64,
    n_gaussians: usize,
    n_cameras: usize,
    width: u32,
    height: u32,
    out: *mut *mut MvgsScene,
) -> MvgsStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MvgsStatus::NullArgument, "out is null");
        }
        match make_synthetic_sized(seed, n_gaussians, n_cameras, CameraLayout::Orbit, width, height)
        {
            Ok((gaussians, cameras)) => hand_out(MvgsScene { gaussians, cameras }, out),
            Err(e) => fail(MvgsStatus::InvalidArgument, e),
        }
    })
}

/// Load a scene file written by [`mvgs_scene_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; the
/// returned handle must be released with [`mvgs_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_load(
    path: *const c_char,
    out: *mut *mut MvgsScene,
) -> MvgsStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MvgsStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_scene(path) {
            Ok(scene) => hand_out(
                MvgsScene {
                    gaussians: scene.gaussians,
                    cameras: scene.cameras,
                },
                out,
            ),
            Err(e) => fail(MvgsStatus::Io, e),
        }
    })
}

/// Write a scene to a text file that round-trips exactly.
///
/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_save(
    scene: *const MvgsScene,
    path: *const c_char,
) -> MvgsStatus {
    guarded(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(MvgsStatus::NullArgument, "scene is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_scene(&scene.gaussians, &scene.cameras, path) {
            Ok(()) => MvgsStatus::Ok,
            Err(e) => fail(MvgsStatus::Io, e),
        }
    })
}

/// Release a handle; null is a no-op.
///
/// # Safety
/// `scene` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_free(scene: *mut MvgsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of gaussians in the scene; 0 for a null handle.
///
/// # Safety
/// `scene` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_gaussian_count(scene: *const MvgsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.gaussians.len())
}

/// Number of cameras in the scene; 0 for a null handle.
///
/// # Safety
/// `scene` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_camera_count(scene: *const MvgsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.cameras.len())
}

/// Pixel dimensions of one camera.
///
/// # Safety
/// All pointers must be valid; `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_camera_size(
    scene: *const MvgsScene,
    view: u32,
    width: *mut u32,
    height: *mut u32,
) -> MvgsStatus {
    guarded(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(MvgsStatus::NullArgument, "scene is null");
        };
        if width.is_null() || height.is_null() {
            return fail(MvgsStatus::NullArgument, "width or height is null");
        }
        let Some(cam) = scene.cameras.get(view as usize) else {
            return fail(
                MvgsStatus::InvalidArgument,
                format!("view {view} out of range ({} cameras)", scene.cameras.len()),
            );
        };
        *width = cam.width;
        *height = cam.height;
        MvgsStatus::Ok
    })
}

/// Copy one gaussian's flat parameters into `params_out`
/// ([`mvgs_gaussian_param_count`] doubles).
///
/// # Safety
/// `params_out` must hold at least that many doubles.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_gaussian_params(
    scene: *const MvgsScene,
    index: usize,
    params_out: *mut f64,
) -> MvgsStatus {
    guarded(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(MvgsStatus::NullArgument, "scene is null");
        };
        if params_out.is_null() {
            return fail(MvgsStatus::NullArgument, "params_out is null");
        }
        let Some(g) = scene.gaussians.get(index) else {
            return fail(
                MvgsStatus::InvalidArgument,
                format!("gaussian {index} out of range ({} gaussians)", scene.gaussians.len()),
            );
        };
        let params = g.params();
        std::slice::from_raw_parts_mut(params_out, PARAMS_PER_GAUSSIAN)
            .copy_from_slice(&params);
        MvgsStatus::Ok
    })
}

/// Render one view. `color_out` receives width*height RGB triplets in
/// row-major order (3 doubles per pixel, values in [0, 1]); `depth_out`,
/// if non-null, receives width*height blended depths with background
/// pixels at the camera's far plane.
///
/// # Safety
/// Buffers must be at least as large as the layout above requires.
#[no_mangle]
pub unsafe extern "C" fn mvgs_scene_render(
    scene: *const MvgsScene,
    view: u32,
    tile_size: u32,
    color_out: *mut f64,
    depth_out: *mut f64,
) -> MvgsStatus {
    guarded(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(MvgsStatus::NullArgument, "scene is null");
        };
        if color_out.is_null() {
            return fail(MvgsStatus::NullArgument, "color_out is null");
        }
        let Some(cam) = scene.cameras.get(view as usize) else {
            return fail(
                MvgsStatus::InvalidArgument,
                format!("view {view} out of range ({} cameras)", scene.cameras.len()),
            );
        };
        if tile_size == 0 {
            return fail(MvgsStatus::InvalidArgument, "tile_size must be positive");
        }
        let plan = RenderPlan::full(view, cam.width, cam.height, tile_size);
        let out = match render(&plan, &scene.gaussians, &scene.cameras, &RasterSettings::default())
        {
            Ok(out) => out,
            Err(e) => return fail(MvgsStatus::Failed, e),
        };
        let n = (cam.width * cam.height) as usize;
        let color = std::slice::from_raw_parts_mut(color_out, n * 3);
        for (px, rgb) in out.image(0).pixels.iter().enumerate() {
            color[px * 3..px * 3 + 3].copy_from_slice(rgb);
        }
        if !depth_out.is_null() {
            let depth = std::slice::from_raw_parts_mut(depth_out, n);
            for (px, d) in depth.iter_mut().enumerate() {
                *d = out.depth(0, px);
            }
        }
        MvgsStatus::Ok
    })
}

/// Fill `out` with the default training options.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvgs_train_options_default(out: *mut MvgsTrainOptions) -> MvgsStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MvgsStatus::NullArgument, "out is null");
        }
        let cfg = TrainConfig::default();
        *out = MvgsTrainOptions {
            iterations: cfg.iterations,
            seed: cfg.seed,
            init_gaussians: 100,
            loss_mode: MvgsLossMode::L1 as u32,
            batch_views: 1,
            pixels_per_batch: 0,
        };
        MvgsStatus::Ok
    })
}

/// Optimize a fresh set of gaussians against ground-truth images of the
/// scene's cameras. `images` holds camera_count * width * height RGB
/// triplets, views concatenated in camera order. On success `out` receives
/// a new scene handle with the trained gaussians and, if `final_loss` is
/// non-null, the last mini-batch loss is written there.
///
/// # Safety
/// `images` must hold the full layout above; `out` must be valid; the
/// returned handle must be released with [`mvgs_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn mvgs_train(
    dataset: *const MvgsScene,
    images: *const f64,
    options: *const MvgsTrainOptions,
    final_loss: *mut f64,
    out: *mut *mut MvgsScene,
) -> MvgsStatus {
    guarded(|| {
        let Some(scene) = dataset.as_ref() else {
            return fail(MvgsStatus::NullArgument, "dataset is null");
        };
        let Some(opts) = options.as_ref() else {
            return fail(MvgsStatus::NullArgument, "options is null");
        };
        if images.is_null() || out.is_null() {
            return fail(MvgsStatus::NullArgument, "images or out is null");
        }
        let Some(cam0) = scene.cameras.first() else {
            return fail(MvgsStatus::InvalidArgument, "scene has no cameras");
        };
        let (w, h) = (cam0.width, cam0.height);
        if scene.cameras.iter().any(|c| c.width != w || c.height != h) {
            return fail(MvgsStatus::InvalidArgument, "cameras disagree on resolution");
        }
        let loss_mode = match opts.loss_mode {
            0 => LossMode::L1,
            1 => LossMode::L2,
            2 => LossMode::L1Dssim,
            3 => LossMode::L1Dssim3d,
            other => {
                return fail(MvgsStatus::InvalidArgument, format!("loss_mode {other} unknown"))
            }
        };

        let px = (w * h) as usize;
        let flat = std::slice::from_raw_parts(images, scene.cameras.len() * px * 3);
        let images: Vec<Image> = (0..scene.cameras.len())
            .map(|v| {
                let pixels = flat[v * px * 3..(v + 1) * px * 3]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                Image {
                    width: w,
                    height: h,
                    pixels,
                    depth: None,
                }
            })
            .collect();
        let data = SceneDataset {
            cameras: scene.cameras.clone(),
            images,
            name: "ffi".to_string(),
        };

        let mut cfg = TrainConfig::default();
        cfg.iterations = opts.iterations;
        cfg.seed = opts.seed;
        cfg.loss_mode = loss_mode;
        let budget = if opts.pixels_per_batch == 0 { px } else { opts.pixels_per_batch };
        if opts.batch_views <= 1 {
            cfg.batch = MiniBatchSpec::single_view(opts.seed);
            cfg.adc.batch_views = 1;
        } else {
            cfg.batch = MiniBatchSpec::multi_view(opts.batch_views, budget, opts.seed);
            cfg.adc.batch_views = opts.batch_views;
        }

        let init = match make_synthetic_sized(
            opts.seed,
            opts.init_gaussians,
            2,
            CameraLayout::Orbit,
            w,
            h,
        ) {
            Ok((gaussians, _)) => gaussians,
            Err(e) => return fail(MvgsStatus::InvalidArgument, e),
        };
        match trainer::train(&cfg, &data, init) {
            Ok(result) => {
                if !final_loss.is_null() {
                    *final_loss = result.losses.last().copied().unwrap_or(f64::NAN);
                }
                hand_out(
                    MvgsScene {
                        gaussians: result.gaussians,
                        cameras: scene.cameras.clone(),
                    },
                    out,
                )
            }
            Err(e @ TrainError::Config(_)) => fail(MvgsStatus::InvalidArgument, e),
            Err(e) => fail(MvgsStatus::Failed, e),
        }
    })
}

/// Compare analytic gradients on a random scene against central finite
/// differences. A failed comparison still returns `Ok`; inspect
/// `result.passed`.
///
/// # Safety
/// `result_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvgs_gradcheck(
    seed: u64,
    n_gaussians: usize,
    size: u32,
    loss: u32,
    result_out: *mut MvgsGradcheckResult,
) -> MvgsStatus {
    guarded(|| {
        if result_out.is_null() {
            return fail(MvgsStatus::NullArgument, "result_out is null");
        }
        let loss = match loss {
            0 => CheckLoss::L1,
            1 => CheckLoss::L2,
            2 => CheckLoss::Dssim,
            3 => CheckLoss::Dssim3d,
            4 => CheckLoss::Mix,
            5 => CheckLoss::DepthL1,
            other => return fail(MvgsStatus::InvalidArgument, format!("loss {other} unknown")),
        };
        if n_gaussians == 0 || size == 0 {
            return fail(MvgsStatus::InvalidArgument, "n_gaussians and size must be positive");
        }
        let report = gradcheck(seed, n_gaussians, size, loss);
        *result_out = MvgsGradcheckResult {
            checked: report.checked,
            worst_rel: report.worst_rel,
            worst_abs: report.worst_abs,
            rejected_draws: report.rejected_draws,
            passed: report.passed,
        };
        MvgsStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(seed: u64, n: usize, cams: usize, size: u32) -> *mut MvgsScene {
        let mut scene: *mut MvgsScene = std::ptr::null_mut();
        let status = unsafe { mvgs_scene_synthetic(seed, n, cams, size, size, &mut scene) };
        assert_eq!(status, MvgsStatus::Ok);
        assert!(!scene.is_null());
        scene
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(mvgs_last_error()) }
            .to_str()
            .unwrap()
            .to_string()
    }

    #[test]
    fn synthetic_scene_reports_counts_and_sizes() {
        let scene = synthetic(3, 12, 4, 16);
        unsafe {
            assert_eq!(mvgs_scene_gaussian_count(scene), 12);
            assert_eq!(mvgs_scene_camera_count(scene), 4);
            let (mut w, mut h) = (0u32, 0u32);
            assert_eq!(mvgs_scene_camera_size(scene, 3, &mut w, &mut h), MvgsStatus::Ok);
            assert_eq!((w, h), (16, 16));
            let mut params = [0.0; PARAMS_PER_GAUSSIAN];
            assert_eq!(
                mvgs_scene_gaussian_params(scene, 11, params.as_mut_ptr()),
                MvgsStatus::Ok
            );
            assert!(params.iter().all(|p| p.is_finite()));
            mvgs_scene_free(scene);
        }
    }

    #[test]
    fn null_and_out_of_range_arguments_are_rejected() {
        unsafe {
            assert_eq!(mvgs_scene_gaussian_count(std::ptr::null()), 0);
            let mut out: *mut MvgsScene = std::ptr::null_mut();
            assert_eq!(
                mvgs_scene_load(std::ptr::null(), &mut out),
                MvgsStatus::NullArgument
            );
            let scene = synthetic(1, 3, 2, 8);
            let (mut w, mut h) = (0u32, 0u32);
            assert_eq!(
                mvgs_scene_camera_size(scene, 9, &mut w, &mut h),
                MvgsStatus::InvalidArgument
            );
            assert!(last_error().contains("out of range"));
            assert_eq!(
                mvgs_scene_synthetic(1, 3, 1, 8, 8, &mut out),
                MvgsStatus::InvalidArgument,
                "an orbit needs at least two cameras"
            );
            mvgs_scene_free(scene);
            mvgs_scene_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("s.txt").to_str().unwrap()).unwrap();
        let scene = synthetic(7, 9, 3, 8);
        unsafe {
            assert_eq!(mvgs_scene_save(scene, path.as_ptr()), MvgsStatus::Ok);
            let mut loaded: *mut MvgsScene = std::ptr::null_mut();
            assert_eq!(mvgs_scene_load(path.as_ptr(), &mut loaded), MvgsStatus::Ok);
            assert_eq!(mvgs_scene_gaussian_count(loaded), 9);
            let (mut a, mut b) = ([0.0; 14], [0.0; 14]);
            for i in 0..9 {
                mvgs_scene_gaussian_params(scene, i, a.as_mut_ptr());
                mvgs_scene_gaussian_params(loaded, i, b.as_mut_ptr());
                assert_eq!(a, b, "gaussian {i} changed in the round trip");
            }
            mvgs_scene_free(scene);
            mvgs_scene_free(loaded);
        }
    }

    fn render_all(scene: *mut MvgsScene, cams: usize, size: u32) -> Vec<f64> {
        let px = (size * size) as usize;
        let mut flat = vec![0.0f64; cams * px * 3];
        for v in 0..cams {
            let status = unsafe {
                mvgs_scene_render(
                    scene,
                    v as u32,
                    16,
                    flat[v * px * 3..].as_mut_ptr(),
                    std::ptr::null_mut(),
                )
            };
            assert_eq!(status, MvgsStatus::Ok);
        }
        flat
    }

    #[test]
    fn render_fills_color_and_depth_buffers() {
        let scene = synthetic(5, 20, 2, 16);
        let mut color = vec![-1.0f64; 16 * 16 * 3];
        let mut depth = vec![-1.0f64; 16 * 16];
        let status = unsafe {
            mvgs_scene_render(scene, 0, 16, color.as_mut_ptr(), depth.as_mut_ptr())
        };
        assert_eq!(status, MvgsStatus::Ok);
        assert!(color.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!(depth.iter().all(|d| *d > 0.0));
        unsafe { mvgs_scene_free(scene) };
    }

    #[test]
    fn training_against_rendered_targets_runs_and_returns_a_model() {
        let scene = synthetic(11, 15, 3, 16);
        let images = render_all(scene, 3, 16);
        let mut opts = MvgsTrainOptions {
            iterations: 0,
            seed: 0,
            init_gaussians: 0,
            loss_mode: 99,
            batch_views: 0,
            pixels_per_batch: 0,
        };
        unsafe {
            assert_eq!(mvgs_train_options_default(&mut opts), MvgsStatus::Ok);
            opts.iterations = 6;
            opts.seed = 2;
            opts.init_gaussians = 8;
            let mut trained: *mut MvgsScene = std::ptr::null_mut();
            let mut final_loss = f64::NAN;
            let status = mvgs_train(scene, images.as_ptr(), &opts, &mut final_loss, &mut trained);
            assert_eq!(status, MvgsStatus::Ok);
            assert!(final_loss.is_finite());
            assert_eq!(mvgs_scene_gaussian_count(trained), 8);
            assert_eq!(mvgs_scene_camera_count(trained), 3);

            opts.loss_mode = 99;
            let mut bad: *mut MvgsScene = std::ptr::null_mut();
            assert_eq!(
                mvgs_train(scene, images.as_ptr(), &opts, std::ptr::null_mut(), &mut bad),
                MvgsStatus::InvalidArgument
            );
            mvgs_scene_free(trained);
            mvgs_scene_free(scene);
        }
    }

    #[test]
    fn gradcheck_passes_through_the_abi() {
        let mut result = MvgsGradcheckResult {
            checked: 0,
            worst_rel: f64::NAN,
            worst_abs: f64::NAN,
            rejected_draws: 0,
            passed: false,
        };
        let status = unsafe { mvgs_gradcheck(21, 4, 8, MvgsCheckLoss::L1 as u32, &mut result) };
        assert_eq!(status, MvgsStatus::Ok);
        assert!(result.passed, "worst rel {:e}", result.worst_rel);
        assert!(result.checked > 0);
        let status = unsafe { mvgs_gradcheck(21, 4, 8, 42, &mut result) };
        assert_eq!(status, MvgsStatus::InvalidArgument);
    }

    #[test]
    fn generated_header_covers_the_surface() {
        let header = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/include/mvgs.h"
        ))
        .unwrap();
        for symbol in [
            "MvgsStatus",
            "MvgsTrainOptions",
            "MvgsGradcheckResult",
            "mvgs_scene_synthetic",
            "mvgs_scene_load",
            "mvgs_scene_save",
            "mvgs_scene_render",
            "mvgs_scene_free",
            "mvgs_train_options_default",
            "mvgs_train",
            "mvgs_gradcheck",
            "mvgs_last_error",
            "mvgs_abi_version",
        ] {
            assert!(header.contains(symbol), "{symbol} missing from mvgs.h");
        }
        assert!(header.contains("typedef struct MvgsScene MvgsScene"), "handle must be opaque");
    }
}
