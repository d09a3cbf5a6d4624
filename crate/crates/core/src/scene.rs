//! Gaussian primitives, scenes, and the per-primitive derivations (covariance, normal, color)
//! consumed by the renderer and the trainer.

use nalgebra::{Matrix3, Quaternion, Vector3};

use crate::error::{GlsError, Result};
use crate::sh;

pub const DEFAULT_FEATURE_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Per-axis standard deviations, all positive.
    pub scale: Vector3<f64>,
    /// Unit quaternion (w, i, j, k).
    pub rotation: Quaternion<f64>,
    /// Post-activation opacity in [0, 1].
    pub opacity: f64,
    /// `(degree + 1)^2` RGB coefficient triples.
    pub sh_coeffs: Vec<[f64; 3]>,
    /// Semantic embedding.
    pub feature: Vec<f64>,
}

impl GaussianPrimitive {
    /// Axis-aligned primitive with a flat color and zero feature.
    pub fn new(center: Vector3<f64>, scale: Vector3<f64>, opacity: f64, rgb: [f64; 3], sh_degree: usize, feature_dim: usize) -> Self {
        let mut sh_coeffs = vec![[0.0; 3]; sh::coeff_count(sh_degree)];
        sh_coeffs[0] = sh::rgb_to_dc(rgb);
        GaussianPrimitive {
            center,
            scale,
            rotation: Quaternion::identity(),
            opacity,
            sh_coeffs,
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(GlsError::Validation(format!("non-positive scale {:?}", self.scale)));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(GlsError::Validation(format!(
                "rotation quaternion norm {} is not 1",
                self.rotation.norm()
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(GlsError::Validation(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if self.feature.len() != feature_dim {
            return Err(GlsError::Validation(format!(
                "feature has dimension {}, scene uses {feature_dim}",
                self.feature.len()
            )));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(GlsError::Validation("non-finite center".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub feature_dim: usize,
    /// Active spherical-harmonic degree used when rendering.
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl Scene {
    pub fn new(feature_dim: usize, sh_degree: usize) -> Self {
        Scene {
            primitives: Vec::new(),
            feature_dim,
            sh_degree,
            background: [0.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(GlsError::Validation(format!("sh degree {} > 3", self.sh_degree)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(self.feature_dim)
                .map_err(|e| GlsError::Validation(format!("primitive {i}: {e}")))?;
            if p.sh_coeffs.len() < sh::coeff_count(self.sh_degree) {
                return Err(GlsError::Validation(format!(
                    "primitive {i}: {} sh coefficients, degree {} needs {}",
                    p.sh_coeffs.len(),
                    self.sh_degree,
                    sh::coeff_count(self.sh_degree)
                )));
            }
        }
        Ok(())
    }

    /// Sub-scene with the selected primitives, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Scene {
        Scene {
            primitives: indices.iter().map(|&i| self.primitives[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Scene {
        Scene {
            primitives: Vec::new(),
            feature_dim: self.feature_dim,
            sh_degree: self.sh_degree,
            background: self.background,
        }
    }
}

/// Rotation matrix of `q` using the unit-quaternion polynomial; `q` is not renormalized, so
/// derivatives with respect to its raw components are exact.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
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

/// Pulls a gradient on the rotation matrix back to the quaternion components (w, i, j, k).
pub fn rotation_matrix_backward(q: &Quaternion<f64>, grad_r: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    [
        2.0 * grad_r.component_mul(&dw).sum(),
        2.0 * grad_r.component_mul(&dx).sum(),
        2.0 * grad_r.component_mul(&dy).sum(),
        2.0 * grad_r.component_mul(&dz).sum(),
    ]
}

/// `R · diag(scale²) · Rᵀ`.
pub fn covariance_from_scale_rotation(scale: &Vector3<f64>, rotation: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|&s| s > 0.0) {
        return Err(GlsError::InvalidParameter(format!(
            "scale components must be positive, got {scale:?}"
        )));
    }
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Index of the smallest scale component; ties go to the lowest index.
pub fn shortest_axis(scale: &Vector3<f64>) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if scale[k] < scale[best] {
            best = k;
        }
    }
    best
}

/// Shortest-axis direction oriented toward the camera, plus the sign that was applied to the
/// rotation column.
pub fn oriented_normal(prim: &GaussianPrimitive, camera_position: &Vector3<f64>) -> (Vector3<f64>, usize, f64) {
    let axis = shortest_axis(&prim.scale);
    let column: Vector3<f64> = prim.rotation_matrix().column(axis).into();
    let sign = if column.dot(&(camera_position - prim.center)) >= 0.0 {
        1.0
    } else {
        -1.0
    };
    (column * sign, axis, sign)
}

/// Unit shortest-axis normal of `prim`, oriented toward `camera_position`.
pub fn gaussian_normal(prim: &GaussianPrimitive, camera_position: &Vector3<f64>) -> Vector3<f64> {
    let (n, _, _) = oriented_normal(prim, camera_position);
    n.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn quat_about(axis: Vector3<f64>, angle: f64) -> Quaternion<f64> {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
    }

    #[test]
    fn covariance_examples() {
        let id = Quaternion::identity();
        let c = covariance_from_scale_rotation(&Vector3::new(1.0, 1.0, 1.0), &id).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);
        let c = covariance_from_scale_rotation(&Vector3::new(2.0, 1.0, 1.0), &id).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-15);
        let q = quat_about(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let c = covariance_from_scale_rotation(&Vector3::new(2.0, 1.0, 1.0), &q).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
        assert!(covariance_from_scale_rotation(&Vector3::new(1.0, 0.0, 1.0), &id).is_err());
    }

    #[test]
    fn normal_examples() {
        let mut p = GaussianPrimitive::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 0.1), 0.5, [0.5; 3], 0, 4);
        assert_relative_eq!(gaussian_normal(&p, &Vector3::new(0.0, 0.0, 5.0)), Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(gaussian_normal(&p, &Vector3::new(0.0, 0.0, -5.0)), -Vector3::z(), epsilon = 1e-15);

        // shortest axis x rotated 90° about y lands on -z; camera on +z flips it to +z
        p.scale = Vector3::new(0.1, 1.0, 1.0);
        p.rotation = quat_about(Vector3::y(), std::f64::consts::FRAC_PI_2);
        let rotated_x = p.rotation_matrix() * Vector3::x();
        assert_relative_eq!(rotated_x, -Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(gaussian_normal(&p, &Vector3::new(0.0, 0.0, 5.0)), Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn tie_break_picks_lowest_axis() {
        assert_eq!(shortest_axis(&Vector3::new(0.2, 0.2, 0.2)), 0);
        assert_eq!(shortest_axis(&Vector3::new(0.3, 0.2, 0.2)), 1);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = Quaternion::new(0.8, -0.3, 0.4, 0.2);
        let weights = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.9, 0.5, -0.6);
        let g = rotation_matrix_backward(&q, &weights);
        let f = |q: Quaternion<f64>| rotation_matrix(&q).component_mul(&weights).sum();
        let h = 1e-6;
        for c in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp.coords[(c + 3) % 4] += h;
            qm.coords[(c + 3) % 4] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-8, "component {c}: {fd} vs {}", g[c]);
        }
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(
            s in prop::array::uniform3(0.01f64..3.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
            prop_assume!(quat.norm() > 0.1);
            let quat = quat.normalize();
            let scale = Vector3::from(s);
            let c = covariance_from_scale_rotation(&scale, &quat).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut expected: Vec<f64> = s.iter().map(|v| v * v).collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b));
            }
        }

        #[test]
        fn normal_faces_camera(
            s in prop::array::uniform3(0.01f64..3.0),
            q in prop::array::uniform4(-1.0f64..1.0),
            cam in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
            prop_assume!(quat.norm() > 0.1);
            let mut p = GaussianPrimitive::new(Vector3::new(0.1, -0.2, 0.3), Vector3::from(s), 0.5, [0.5; 3], 0, 1);
            p.rotation = quat.normalize();
            let cam = Vector3::from(cam);
            let n = gaussian_normal(&p, &cam);
            prop_assert!((n.norm() - 1.0).abs() < 1e-6);
            prop_assert!(n.dot(&(cam - p.center)) >= 0.0);
        }

        #[test]
        fn axis_permutation_leaves_covariance_invariant(
            s in prop::array::uniform3(0.01f64..3.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            // permuting the scale axes while permuting the rotation columns the same way
            let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
            prop_assume!(quat.norm() > 0.1);
            let quat = quat.normalize();
            let scale = Vector3::from(s);
            let c = covariance_from_scale_rotation(&scale, &quat).unwrap();
            // cyclic permutation: new axis k = old axis (k+1)%3, via R' = R·P
            let perm = Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
            let r2 = rotation_matrix(&quat) * perm;
            let rot2 = nalgebra::UnitQuaternion::from_matrix(&r2).into_inner();
            let scale2 = Vector3::new(scale[1], scale[2], scale[0]);
            let c2 = covariance_from_scale_rotation(&scale2, &rot2).unwrap();
            prop_assert!((c - c2).abs().max() < 1e-9 * (1.0 + c.abs().max()));
        }
    }
}
