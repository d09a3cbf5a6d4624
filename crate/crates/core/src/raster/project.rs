//! EWA projection of world-space Gaussians into image-space splats, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::camera::Camera;
use crate::scene::{oriented_normal, rotation_matrix, rotation_matrix_backward, GaussianPrimitive};
use crate::sh;

use super::{channels, RenderSettings};

/// A primitive projected into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source primitive in the scene.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Image-space covariance including the low-pass term.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Depth of the center along the camera axis; used for sorting.
    pub view_depth: f64,
    /// Distance from the camera center to the splat's tangent plane; this is the per-splat
    /// depth value blended into `D`.
    pub plane_distance: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Shortest-axis normal in the camera frame, oriented toward the camera.
    pub normal_cam: Vector3<f64>,
    /// Radius beyond which the splat's alpha is below the blending floor.
    pub cutoff_radius: f64,
    /// Three-sigma screen radius, the statistic used by densification.
    pub radius: f64,
    /// Gaussian exponents below this give alpha under the blending floor.
    pub(crate) log_alpha_floor: f64,
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) axis: usize,
    pub(crate) normal_sign: f64,
    pub(crate) color_active: [bool; 3],
}

pub(crate) fn project(
    index: usize,
    prim: &GaussianPrimitive,
    camera: &Camera,
    sh_degree: usize,
    settings: &RenderSettings,
) -> Option<Splat2D> {
    let t = camera.to_camera(&prim.center);
    if t.z <= camera.near {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let (u, v) = camera.project(&t);

    let r = rotation_matrix(&prim.rotation);
    let m = r * Matrix3::from_diagonal(&prim.scale);
    let sigma = m * m.transpose();
    let j = jacobian(&t, fx, fy);
    let tm = j * camera.rotation;
    let mut cov2d = tm * sigma * tm.transpose();
    cov2d[(0, 0)] += settings.low_pass;
    cov2d[(1, 1)] += settings.low_pass;
    let det = cov2d.determinant();
    if det < 1e-12 {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let cutoff_radius = if settings.alpha_min > 0.0 {
        let ratio = prim.opacity / settings.alpha_min;
        if ratio <= 1.0 {
            return None;
        }
        (2.0 * lambda_max * ratio.ln()).sqrt()
    } else {
        f64::INFINITY
    };
    let (w, h) = (camera.width as f64, camera.height as f64);
    if u + cutoff_radius < -0.5 || u - cutoff_radius > w - 0.5 || v + cutoff_radius < -0.5 || v - cutoff_radius > h - 0.5 {
        return None;
    }

    let cam_pos = camera.position();
    let (n_world, axis, normal_sign) = oriented_normal(prim, &cam_pos);
    let normal_cam = camera.rotation * n_world;
    let plane_distance = -normal_cam.dot(&t);

    let dir = (prim.center - cam_pos).normalize();
    let raw = sh::eval_raw(&prim.sh_coeffs, sh_degree, &dir);
    let mut color = [0.0; 3];
    let mut color_active = [false; 3];
    for c in 0..3 {
        let v = raw[c] + 0.5;
        color_active[c] = (0.0..=1.0).contains(&v);
        color[c] = v.clamp(0.0, 1.0);
    }

    Some(Splat2D {
        index,
        mean2d: [u, v],
        cov2d,
        conic,
        view_depth: t.z,
        plane_distance,
        color,
        opacity: prim.opacity,
        normal_cam,
        cutoff_radius,
        radius,
        log_alpha_floor: (settings.alpha_min / prim.opacity).ln() - 1e-9,
        cam_point: t,
        axis,
        normal_sign,
        color_active,
    })
}

fn jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2)
}

/// Image-space gradients accumulated for one splat over all pixels.
#[derive(Clone, Debug, Default)]
pub(crate) struct SplatAdjoint {
    pub mean2d: [f64; 2],
    /// Full-matrix gradient of the conic; the off-diagonal value applies to each of the two
    /// symmetric entries.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub values: Vec<f64>,
}

/// Gradients with respect to one primitive's stored parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Gradient for the raw quaternion components (w, i, j, k).
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh_coeffs: Vec<[f64; 3]>,
    pub feature: Vec<f64>,
}

impl PrimitiveGrad {
    pub fn zeros(sh_count: usize, feature_dim: usize) -> Self {
        PrimitiveGrad {
            center: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            sh_coeffs: vec![[0.0; 3]; sh_count],
            feature: vec![0.0; feature_dim],
        }
    }
}

pub(crate) fn project_backward(
    splat: &Splat2D,
    prim: &GaussianPrimitive,
    camera: &Camera,
    sh_degree: usize,
    adj: &SplatAdjoint,
) -> PrimitiveGrad {
    let t = splat.cam_point;
    let (fx, fy) = (camera.fx, camera.fy);
    let w_rot = camera.rotation;
    let mut grad = PrimitiveGrad::zeros(prim.sh_coeffs.len(), prim.feature.len());

    let g_d = adj.values[channels::DEPTH];
    let g_nc = Vector3::new(
        adj.values[channels::NORMAL],
        adj.values[channels::NORMAL + 1],
        adj.values[channels::NORMAL + 2],
    ) - t * g_d;
    let mut g_t = -splat.normal_cam * g_d;
    grad.feature
        .copy_from_slice(&adj.values[channels::FEATURE..channels::FEATURE + prim.feature.len()]);

    // conic -> covariance -> (Σ, J)
    let q = splat.conic;
    let g_q = Matrix2::new(adj.conic[0], adj.conic[1], adj.conic[1], adj.conic[2]);
    let g_cov2d = -(q * g_q * q);
    let r = rotation_matrix(&prim.rotation);
    let s2 = Matrix3::from_diagonal(&prim.scale.component_mul(&prim.scale));
    let sigma = r * s2 * r.transpose();
    let j = jacobian(&t, fx, fy);
    let tm = j * w_rot;
    let g_sigma = tm.transpose() * g_cov2d * tm;
    let g_tm = 2.0 * g_cov2d * tm * sigma;
    let g_j = g_tm * w_rot.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    let [g_u, g_v] = adj.mean2d;
    g_t.x += g_u * fx * iz;
    g_t.y += g_v * fy * iz;
    g_t.z += -g_u * fx * t.x * iz2 - g_v * fy * t.y * iz2;

    grad.center = w_rot.transpose() * g_t;

    // view-dependent color
    let cam_pos = camera.position();
    let dir_raw = prim.center - cam_pos;
    let dist = dir_raw.norm();
    let dir = dir_raw / dist;
    let mut g_raw = [0.0; 3];
    for c in 0..3 {
        if splat.color_active[c] {
            g_raw[c] = adj.values[channels::COLOR + c];
        }
    }
    let basis = sh::basis(sh_degree, &dir);
    let basis_grad = sh::basis_grad(sh_degree, &dir);
    let n_coeffs = sh::coeff_count(sh_degree).min(prim.sh_coeffs.len());
    let mut g_dir = Vector3::zeros();
    for k in 0..n_coeffs {
        let mut weighted = 0.0;
        for c in 0..3 {
            grad.sh_coeffs[k][c] = g_raw[c] * basis[k];
            weighted += g_raw[c] * prim.sh_coeffs[k][c];
        }
        if k > 0 {
            g_dir += Vector3::from(basis_grad[k]) * weighted;
        }
    }
    grad.center += (g_dir - dir * dir.dot(&g_dir)) / dist;

    // rotation and scale through Σ and the normal column
    let mut g_r = 2.0 * g_sigma * r * s2;
    let g_col = w_rot.transpose() * g_nc * splat.normal_sign;
    for i in 0..3 {
        g_r[(i, splat.axis)] += g_col[i];
    }
    let rt_g_r = r.transpose() * g_sigma * r;
    for k in 0..3 {
        grad.scale[k] = 2.0 * prim.scale[k] * rt_g_r[(k, k)];
    }
    grad.rotation = rotation_matrix_backward(&prim.rotation, &g_r);
    grad.opacity = adj.opacity;
    grad
}
