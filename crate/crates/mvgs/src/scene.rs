//! Scene state: anisotropic 3D gaussians, pinhole cameras, images, and the
//! synthetic scene generator used by the tests and benchmarks.
//!
//! Optimizable parameters are stored unconstrained: opacity as a logit,
//! scale as a log. Rendering applies `sigmoid` / `exp` so both stay strictly
//! positive no matter what the optimizer does.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of optimizable scalars per gaussian (3 mean + 3 log-scale +
/// 4 quaternion + 1 opacity logit + 3 color).
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// One anisotropic 3D gaussian primitive with view-independent RGB color.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    /// Position (mean μ) in world units.
    pub mean: Vector3<f64>,
    /// Per-axis log of the scale; S = diag(exp(log_scale)).
    pub log_scale: Vector3<f64>,
    /// Orientation quaternion (w, x, y, z); renormalized before use.
    pub rotation: [f64; 4],
    /// Opacity in logit space; o = sigmoid(opacity_logit) ∈ (0,1).
    pub opacity_logit: f64,
    /// RGB in [0,1].
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Rotation matrix of the (renormalized) quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(normalize_quat(self.rotation))
    }

    /// Flattened parameter vector, fixed order: mean, log_scale, quat, opacity, color.
    pub fn params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.rotation[3],
            self.opacity_logit,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        match idx {
            0 => self.mean.x = v,
            1 => self.mean.y = v,
            2 => self.mean.z = v,
            3 => self.log_scale.x = v,
            4 => self.log_scale.y = v,
            5 => self.log_scale.z = v,
            6..=9 => self.rotation[idx - 6] = v,
            10 => self.opacity_logit = v,
            11..=13 => self.color[idx - 11] = v,
            _ => panic!("parameter index {idx} out of range"),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pinhole camera. `rotation` columns are the camera axes (x right, y down,
/// z forward) expressed in world coordinates and `translation` is the camera
/// position, so world→camera is `p_cam = Rᵀ·(p − t)` (row-vector convention:
/// `(p − t)·R`).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub znear: f64,
    pub zfar: f64,
}

impl Camera {
    pub fn world_to_cam(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn cam_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Perspective coefficients (P0, P1, P2, P3): `x_ndc = P0·x_cam/z_cam`,
    /// `y_ndc = P1·y_cam/z_cam`, clip z from P2/P3.
    pub fn projection_coeffs(&self) -> [f64; 4] {
        let p0 = 2.0 * self.fx / self.width as f64;
        let p1 = 2.0 * self.fy / self.height as f64;
        let p2 = self.zfar / (self.zfar - self.znear);
        let p3 = -self.zfar * self.znear / (self.zfar - self.znear);
        [p0, p1, p2, p3]
    }

    /// NDC → pixel: `px = ndc_x·W/2 + cx` (so NDC (0,0) lands on the
    /// principal point).
    pub fn pixel_from_ndc(&self, ndc: [f64; 2]) -> [f64; 2] {
        [
            ndc[0] * self.width as f64 * 0.5 + self.cx,
            ndc[1] * self.height as f64 * 0.5 + self.cy,
        ]
    }

    /// World point of pixel-center coordinates at a given camera-space depth.
    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> Vector3<f64> {
        let x = (px - self.cx) / self.fx * depth;
        let y = (py - self.cy) / self.fy * depth;
        self.cam_to_world(Vector3::new(x, y, depth))
    }

    pub fn n_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Dense RGB image, row-major, channels in [0,1]; optional depth channel in
/// world units with the far plane as background sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
    pub depth: Option<Vec<f64>>,
}

impl Image {
    pub fn constant(width: u32, height: u32, value: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; (width * height) as usize],
            depth: None,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Training data: one ground-truth image per camera.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub name: String,
}

impl SceneDataset {
    /// Round-robin train/holdout split: every `every`-th view held out.
    pub fn split(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for i in 0..self.cameras.len() {
            if every > 0 && i % every == 0 {
                holdout.push(i);
            } else {
                train.push(i);
            }
        }
        (train, holdout)
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("multi-view requires at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("need at least 1 gaussian, got {0}")]
    NoGaussians(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraLayout {
    Orbit,
    Random,
}

/// Deterministic synthetic scene: gaussians inside the unit ball, cameras at
/// distance ~3 looking at the origin. 64×64 views; use
/// [`make_synthetic_sized`] for other resolutions.
pub fn make_synthetic(
    seed: u64,
    n_gaussians: usize,
    n_cameras: usize,
    layout: CameraLayout,
) -> Result<(Vec<Gaussian3D>, Vec<Camera>), SceneError> {
    make_synthetic_sized(seed, n_gaussians, n_cameras, layout, 64, 64)
}

pub fn make_synthetic_sized(
    seed: u64,
    n_gaussians: usize,
    n_cameras: usize,
    layout: CameraLayout,
    width: u32,
    height: u32,
) -> Result<(Vec<Gaussian3D>, Vec<Camera>), SceneError> {
    if n_gaussians < 1 {
        return Err(SceneError::NoGaussians(n_gaussians));
    }
    if n_cameras < 2 {
        return Err(SceneError::TooFewCameras(n_cameras));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let gaussians = (0..n_gaussians)
        .map(|_| {
            let mean = sample_in_ball(&mut rng);
            let log_scale = Vector3::new(
                rng.gen_range(0.01..0.15f64).ln(),
                rng.gen_range(0.01..0.15f64).ln(),
                rng.gen_range(0.01..0.15f64).ln(),
            );
            let rotation = sample_unit_quat(&mut rng);
            let opacity_logit = logit(rng.gen_range(0.3..0.95));
            let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            Gaussian3D {
                mean,
                log_scale,
                rotation,
                opacity_logit,
                color,
            }
        })
        .collect();

    let cameras = (0..n_cameras)
        .map(|k| {
            let position = match layout {
                CameraLayout::Orbit => {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / n_cameras as f64;
                    3.0 * Vector3::new(theta.cos(), theta.sin(), 0.0)
                }
                CameraLayout::Random => {
                    let dir = sample_in_ball(&mut rng).normalize();
                    rng.gen_range(2.5..3.5) * dir
                }
            };
            look_at_camera(position, Vector3::zeros(), width, height)
        })
        .collect();

    Ok((gaussians, cameras))
}

fn sample_in_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n <= 1.0 && n > 1e-6 {
            return v;
        }
    }
}

fn sample_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 <= 1.0 && n2 > 1e-4 {
            return normalize_quat(q);
        }
    }
}

/// Camera at `position` with optical axis through `target`.
pub fn look_at_camera(
    position: Vector3<f64>,
    target: Vector3<f64>,
    width: u32,
    height: u32,
) -> Camera {
    let forward = (target - position).normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if forward.cross(&up).norm() < 1e-6 {
        up = Vector3::new(1.0, 0.0, 0.0);
    }
    let x = forward.cross(&up).normalize();
    let y = forward.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, forward]);
    let f = 1.2 * width.min(height) as f64;
    Camera {
        rotation,
        translation: position,
        fx: f,
        fy: f,
        cx: width as f64 * 0.5,
        cy: height as f64 * 0.5,
        width,
        height,
        znear: 0.1,
        zfar: 10.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(7, 100, 8, CameraLayout::Orbit).unwrap();
        let b = make_synthetic(7, 100, 8, CameraLayout::Orbit).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn synthetic_means_inside_unit_ball() {
        let (gs, _) = make_synthetic(3, 200, 4, CameraLayout::Random).unwrap();
        for g in &gs {
            assert!(g.mean.norm() <= 1.0);
            let s = g.scales();
            assert!(s.min() >= 0.01 && s.max() <= 0.15);
            assert!(g.opacity() > 0.3 - 1e-12 && g.opacity() < 0.95 + 1e-12);
        }
    }

    #[test]
    fn orbit_cameras_look_at_origin() {
        let (_, cams) = make_synthetic(1, 1, 2, CameraLayout::Orbit).unwrap();
        assert_eq!(cams.len(), 2);
        // Two cameras at angle 0 and π.
        assert_relative_eq!(cams[0].translation.x, 3.0, epsilon = 1e-12);
        assert_relative_eq!(cams[1].translation.x, -3.0, epsilon = 1e-12);
        for cam in &cams {
            let forward = cam.rotation.column(2).into_owned();
            let to_origin = -cam.translation.normalize();
            assert_relative_eq!((forward - to_origin).norm(), 0.0, epsilon = 1e-12);
            // Orthonormal, right-handed.
            assert_relative_eq!(
                (cam.rotation * cam.rotation.transpose() - Matrix3::identity()).norm(),
                0.0,
                epsilon = 1e-12
            );
            assert_relative_eq!(cam.rotation.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_cameras_rejected() {
        assert!(make_synthetic(0, 10, 1, CameraLayout::Orbit).is_err());
    }

    #[test]
    fn world_cam_round_trip() {
        let (_, cams) = make_synthetic(5, 1, 5, CameraLayout::Random).unwrap();
        let p = Vector3::new(0.3, -0.2, 0.5);
        for cam in &cams {
            let back = cam.cam_to_world(cam.world_to_cam(p));
            assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn unproject_inverts_projection() {
        let (_, cams) = make_synthetic(9, 1, 3, CameraLayout::Orbit).unwrap();
        let cam = &cams[1];
        let p = Vector3::new(0.1, 0.2, -0.3);
        let pc = cam.world_to_cam(p);
        let px = cam.fx * pc.x / pc.z + cam.cx;
        let py = cam.fy * pc.y / pc.z + cam.cy;
        let back = cam.unproject(px, py, pc.z);
        assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quat_rotation_is_orthonormal() {
        let q = normalize_quat([0.9, -0.3, 0.2, 0.1]);
        let r = quat_to_rotation(q);
        assert_relative_eq!(
            (r * r.transpose() - Matrix3::identity()).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn activations_strictly_positive() {
        let g = Gaussian3D {
            mean: Vector3::zeros(),
            log_scale: Vector3::new(-30.0, 0.0, 30.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: -40.0,
            color: [0.0; 3],
        };
        assert!(g.opacity() > 0.0);
        assert!(g.scales().min() > 0.0);
    }

    #[test]
    fn param_roundtrip() {
        let (mut gs, _) = make_synthetic(11, 1, 2, CameraLayout::Orbit).unwrap();
        let orig = gs[0].clone();
        let p = orig.params();
        for (i, v) in p.iter().enumerate() {
            gs[0].set_param(i, *v);
        }
        assert_eq!(gs[0], orig);
    }
}
