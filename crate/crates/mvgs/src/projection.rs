//! World→camera→NDC→pixel transforms and the EWA projection of 3D gaussian
//! covariances to screen-space ellipses, plus the analytic jacobians used by
//! the backward pass.
//!
//! Conventions: camera depth is `z_cam` (positive in front), NDC is the
//! post-perspective `[-1,1]²` square, pixels are `ndc·extent/2 + principal
//! point` with samples at pixel centers `(i+0.5, j+0.5)`.

use crate::scene::{Camera, Gaussian3D};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Screen-space footprint of one gaussian in one view.
#[derive(Debug, Clone)]
pub struct Projected2D {
    /// Projected mean in pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// Projected mean in NDC.
    pub mean_ndc: Vector2<f64>,
    /// Camera-space z, world units.
    pub depth: f64,
    /// 2×2 screen covariance in pixel², after dilation.
    pub cov2d: Matrix2<f64>,
    pub cov2d_inv: Matrix2<f64>,
    /// Binning extent in pixels.
    pub radius: f64,
    pub visible: bool,
    /// Covariance came out non-invertible even after dilation.
    pub degenerate: bool,
}

impl Projected2D {
    fn culled(depth: f64, degenerate: bool) -> Self {
        Projected2D {
            mean2d: Vector2::zeros(),
            mean_ndc: Vector2::zeros(),
            depth,
            cov2d: Matrix2::zeros(),
            cov2d_inv: Matrix2::zeros(),
            radius: 0.0,
            visible: false,
            degenerate,
        }
    }
}

/// Knobs of the projection stage. Defaults follow common splatting practice.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionParams {
    /// Frustum culling bound on |NDC| components; > 1 keeps splats whose
    /// center is slightly off screen but whose footprint still touches it.
    pub guard_band: f64,
    /// Binning radius in units of the largest screen-space σ.
    pub radius_sigmas: f64,
    /// Isotropic pixel² term added to the projected covariance; antialias
    /// floor that also keeps it invertible.
    pub dilation: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            guard_band: 1.3,
            radius_sigmas: 3.0,
            dilation: 0.3,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("camera-space depth {0} not positive; cull before mapping gradients")]
    NonPositiveDepth(f64),
}

/// World covariance Σ = R·S·Sᵀ·Rᵀ with R from the quaternion and
/// S = diag(exp(log_scale)).
pub fn covariance3d(g: &Gaussian3D) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s = g.scales();
    let d = Matrix3::from_diagonal(&s.component_mul(&s));
    r * d * r.transpose()
}

/// Jacobian of the camera→pixel map at `p_cam`:
/// `px = (fx·x/z + cx, fy·y/z + cy)`.
pub fn pixel_jacobian(cam: &Camera, p_cam: Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Project one gaussian into one view: perspective for the mean, local
/// affine (EWA) for the covariance, then `dilation·I` and a 3σ extent.
pub fn project(g: &Gaussian3D, cam: &Camera, params: &ProjectionParams) -> Projected2D {
    let p_cam = cam.world_to_cam(g.mean);
    let depth = p_cam.z;
    if depth <= cam.znear {
        return Projected2D::culled(depth, false);
    }
    let [p0, p1, _, _] = cam.projection_coeffs();
    let mean_ndc = Vector2::new(p0 * p_cam.x / depth, p1 * p_cam.y / depth);
    if mean_ndc.x.abs() > params.guard_band || mean_ndc.y.abs() > params.guard_band {
        return Projected2D::culled(depth, false);
    }
    let px = cam.pixel_from_ndc([mean_ndc.x, mean_ndc.y]);
    let mean2d = Vector2::new(px[0], px[1]);

    let w = cam.rotation.transpose();
    let sigma_cam = w * covariance3d(g) * w.transpose();
    let j = pixel_jacobian(cam, p_cam);
    let mut cov2d = j * sigma_cam * j.transpose();
    cov2d[(0, 0)] += params.dilation;
    cov2d[(1, 1)] += params.dilation;

    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Projected2D::culled(depth, true);
    }
    let cov2d_inv = Matrix2::new(c / det, -b / det, -b / det, a / det);
    let lambda_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = params.radius_sigmas * lambda_max.sqrt();

    Projected2D {
        mean2d,
        mean_ndc,
        depth,
        cov2d,
        cov2d_inv,
        radius,
        visible: true,
        degenerate: false,
    }
}

/// Jacobian of the camera→NDC map at `p_cam` (2×3):
/// rows `(P0/z, 0, −x_ndc/z)` and `(0, P1/z, −y_ndc/z)`.
pub fn ndc_jacobian(cam: &Camera, p_cam: Vector3<f64>, ndc: Vector2<f64>) -> Matrix2x3<f64> {
    let [p0, p1, _, _] = cam.projection_coeffs();
    let z = p_cam.z;
    Matrix2x3::new(p0 / z, 0.0, -ndc.x / z, 0.0, p1 / z, -ndc.y / z)
}

/// Pull an NDC-space positional gradient back to world space:
/// `dL/dμ_world = R · (∂ndc/∂p_cam)ᵀ · dL/dμ_ndc`.
pub fn grad_ndc_to_world(
    grad_ndc: Vector2<f64>,
    p_cam: Vector3<f64>,
    ndc: Vector2<f64>,
    cam: &Camera,
) -> Result<Vector3<f64>, ProjectionError> {
    if p_cam.z <= 0.0 {
        return Err(ProjectionError::NonPositiveDepth(p_cam.z));
    }
    let a = ndc_jacobian(cam, p_cam, ndc);
    Ok(cam.rotation * (a.transpose() * grad_ndc))
}

/// Least-squares preimage of a world-space positional gradient in one view's
/// NDC gradient space: solves `(∂ndc/∂world)ᵀ·g_ndc ≈ g_world`. Exact when
/// `g_world` lies in the row space of the view's NDC jacobian.
pub fn ndc_grad_from_world(
    grad_world: Vector3<f64>,
    p_cam: Vector3<f64>,
    ndc: Vector2<f64>,
    cam: &Camera,
) -> Result<Vector2<f64>, ProjectionError> {
    if p_cam.z <= 0.0 {
        return Err(ProjectionError::NonPositiveDepth(p_cam.z));
    }
    let a = ndc_jacobian(cam, p_cam, ndc) * cam.rotation.transpose();
    let gram = a * a.transpose();
    let inv = gram
        .try_inverse()
        .expect("NDC jacobian rows are independent for z > 0");
    Ok(inv * (a * grad_world))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic, normalize_quat, CameraLayout};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> Camera {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 76.8,
            fy: 76.8,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            znear: 0.1,
            zfar: 10.0,
        }
    }

    fn opposite_pair() -> (Camera, Camera) {
        let mut c1 = identity_cam();
        c1.translation = Vector3::new(0.0, 0.0, -1.0);
        let mut c2 = identity_cam();
        c2.rotation = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0));
        c2.translation = Vector3::new(0.0, 0.0, 1.0);
        (c1, c2)
    }

    fn test_gaussian(mean: Vector3<f64>) -> Gaussian3D {
        Gaussian3D {
            mean,
            log_scale: Vector3::new(0.05f64.ln(), 0.08f64.ln(), 0.03f64.ln()),
            rotation: normalize_quat([0.9, 0.1, -0.3, 0.2]),
            opacity_logit: 0.5,
            color: [0.2, 0.5, 0.7],
        }
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let cam = identity_cam();
        let g = test_gaussian(Vector3::new(0.0, 0.0, 2.0));
        let p = project(&g, &cam, &ProjectionParams::default());
        assert!(p.visible);
        assert_relative_eq!(p.mean_ndc.norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.mean2d.x, cam.cx, epsilon = 1e-12);
        assert_relative_eq!(p.mean2d.y, cam.cy, epsilon = 1e-12);
        assert_relative_eq!(p.depth, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn opposite_cameras_agree_on_origin() {
        let (c1, c2) = opposite_pair();
        let g = test_gaussian(Vector3::zeros());
        for cam in [&c1, &c2] {
            let p = project(&g, cam, &ProjectionParams::default());
            assert!(p.visible);
            assert_relative_eq!(p.depth, 1.0, epsilon = 1e-15);
            assert_relative_eq!(p.mean_ndc.norm(), 0.0, epsilon = 1e-15);
        }
        // The two camera positions really are opposite.
        assert_relative_eq!((c1.translation + c2.translation).norm(), 0.0);
    }

    #[test]
    fn opposite_cameras_nullify_world_gradient() {
        let (c1, c2) = opposite_pair();
        let g_world = Vector3::new(1.0, 0.0, 0.0);
        let mut sum = Vector2::zeros();
        let mut norms = 0.0;
        for cam in [&c1, &c2] {
            let p_cam = cam.world_to_cam(Vector3::zeros());
            let g_ndc = ndc_grad_from_world(g_world, p_cam, Vector2::zeros(), cam).unwrap();
            // Consistency: pulling back reproduces the world gradient.
            let back = grad_ndc_to_world(g_ndc, p_cam, Vector2::zeros(), cam).unwrap();
            assert_relative_eq!((back - g_world).norm(), 0.0, epsilon = 1e-12);
            sum += g_ndc;
            norms += g_ndc.norm();
        }
        assert!(sum.norm() <= 1e-10);
        assert!(norms > 0.0);
    }

    #[test]
    fn depth_matches_dense_matrix_oracle() {
        let (gs, cams) = make_synthetic(21, 20, 6, CameraLayout::Random).unwrap();
        for cam in &cams {
            // (μ,1)-row times the 4×3 matrix [R; −tᵀR], built and multiplied
            // by explicit loops.
            let mut b = [[0.0f64; 3]; 4];
            for i in 0..3 {
                for j in 0..3 {
                    b[i][j] = cam.rotation[(i, j)];
                }
            }
            for j in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += cam.translation[i] * cam.rotation[(i, j)];
                }
                b[3][j] = -acc;
            }
            for g in &gs {
                let row = [g.mean.x, g.mean.y, g.mean.z, 1.0];
                let mut cam_pt = [0.0f64; 3];
                for (j, out) in cam_pt.iter_mut().enumerate() {
                    *out = (0..4).map(|i| row[i] * b[i][j]).sum();
                }
                let p = project(g, cam, &ProjectionParams::default());
                assert_relative_eq!(p.depth, cam_pt[2], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn covariance3d_isotropic() {
        let mut g = test_gaussian(Vector3::zeros());
        g.log_scale = Vector3::repeat(0.07f64.ln());
        let sigma = covariance3d(&g);
        let expected = Matrix3::identity() * 0.07 * 0.07;
        assert_relative_eq!((sigma - expected).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance3d_quarter_turn_swaps_axes() {
        let half = std::f64::consts::FRAC_PI_4;
        let g = Gaussian3D {
            mean: Vector3::zeros(),
            log_scale: Vector3::new(0.1f64.ln(), 0.02f64.ln(), 0.05f64.ln()),
            rotation: [half.cos(), 0.0, 0.0, half.sin()],
            opacity_logit: 0.0,
            color: [0.0; 3],
        };
        let sigma = covariance3d(&g);
        let expected = Matrix3::from_diagonal(&Vector3::new(0.02 * 0.02, 0.1 * 0.1, 0.05 * 0.05));
        assert_relative_eq!((sigma - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn covariance3d_matches_scalar_oracle() {
        let (gs, _) = make_synthetic(33, 25, 2, CameraLayout::Orbit).unwrap();
        for g in &gs {
            let [w, x, y, z] = g.rotation;
            let r = [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ];
            let s2 = [
                (2.0 * g.log_scale.x).exp(),
                (2.0 * g.log_scale.y).exp(),
                (2.0 * g.log_scale.z).exp(),
            ];
            let sigma = covariance3d(g);
            for i in 0..3 {
                for j in 0..3 {
                    let want: f64 = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
                    assert_relative_eq!(sigma[(i, j)], want, epsilon = 1e-12);
                    assert_relative_eq!(sigma[(i, j)], sigma[(j, i)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn culling_by_depth_and_guard_band() {
        let cam = identity_cam();
        let params = ProjectionParams::default();
        let behind = test_gaussian(Vector3::new(0.0, 0.0, -2.0));
        assert!(!project(&behind, &cam, &params).visible);
        // |ndc_x| = P0·x/z = 2.4·x/z; x/z = 0.6 → 1.44 > 1.3.
        let off = test_gaussian(Vector3::new(1.2, 0.0, 2.0));
        assert!(!project(&off, &cam, &params).visible);
        let edge = test_gaussian(Vector3::new(1.0, 0.0, 2.0));
        assert!(project(&edge, &cam, &params).visible);
    }

    #[test]
    fn ndc_jacobian_matches_finite_differences() {
        let (gs, cams) = make_synthetic(55, 10, 5, CameraLayout::Random).unwrap();
        let params = ProjectionParams::default();
        let h = 1e-5;
        for cam in &cams {
            for g in &gs {
                let p = project(g, cam, &params);
                if !p.visible {
                    continue;
                }
                let analytic =
                    ndc_jacobian(cam, cam.world_to_cam(g.mean), p.mean_ndc) * cam.rotation.transpose();
                for axis in 0..3 {
                    let mut gp = g.clone();
                    let mut gm = g.clone();
                    gp.mean[axis] += h;
                    gm.mean[axis] -= h;
                    let pp = project(&gp, cam, &params);
                    let pm = project(&gm, cam, &params);
                    for row in 0..2 {
                        let fd = (pp.mean_ndc[row] - pm.mean_ndc[row]) / (2.0 * h);
                        let an = analytic[(row, axis)];
                        let scale = fd.abs().max(an.abs()).max(1e-9);
                        assert!(
                            ((fd - an) / scale).abs() < 1e-5,
                            "axis {axis} row {row}: fd {fd} vs analytic {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn grad_roundtrip_random() {
        let (gs, cams) = make_synthetic(77, 5, 4, CameraLayout::Random).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ProjectionParams::default();
        for cam in &cams {
            for g in &gs {
                let p = project(g, cam, &params);
                if !p.visible {
                    continue;
                }
                let g_ndc = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let world =
                    grad_ndc_to_world(g_ndc, cam.world_to_cam(g.mean), p.mean_ndc, cam).unwrap();
                let back =
                    ndc_grad_from_world(world, cam.world_to_cam(g.mean), p.mean_ndc, cam).unwrap();
                assert_relative_eq!((back - g_ndc).norm(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradient_maps_to_zero() {
        let cam = identity_cam();
        let out = grad_ndc_to_world(
            Vector2::zeros(),
            Vector3::new(0.1, 0.2, 2.0),
            Vector2::new(0.05, 0.1),
            &cam,
        )
        .unwrap();
        assert_eq!(out, Vector3::zeros());
    }

    #[test]
    fn cov2d_positive_definite_when_visible() {
        let (gs, cams) = make_synthetic(91, 40, 8, CameraLayout::Random).unwrap();
        let params = ProjectionParams::default();
        for cam in &cams {
            for g in &gs {
                let p = project(g, cam, &params);
                if !p.visible {
                    continue;
                }
                let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
                assert!(a > 0.0 && a * c - b * b > 0.0);
                assert!(p.radius > 0.0);
                assert!(p.depth > cam.znear);
                let id = p.cov2d * p.cov2d_inv;
                assert_relative_eq!((id - Matrix2::identity()).norm(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn negative_depth_rejected_by_gradient_maps() {
        let cam = identity_cam();
        let bad = Vector3::new(0.0, 0.0, -1.0);
        assert!(grad_ndc_to_world(Vector2::zeros(), bad, Vector2::zeros(), &cam).is_err());
        assert!(ndc_grad_from_world(Vector3::zeros(), bad, Vector2::zeros(), &cam).is_err());
    }
}
