//! Depth-derived normals, per-pixel ray frames and the normal-error case analysis that
//! produces the refined target depth.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::image::{Image, Mask};

/// Normals computed from a depth map together with the pixels where they are defined.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNormals {
    /// Camera-frame unit normals; zero where undefined.
    pub normal: Image,
    pub valid: Mask,
}

/// `depth` holds distances along the pixel rays of `camera`.
pub fn normal_from_depth(depth: &Image, camera: &Camera) -> DepthNormals {
    let (w, h) = (depth.width, depth.height);
    let mut normal = Image::zeros(w, h, 3);
    let mut valid = Mask::new(w, h);
    let rays = ray_field(camera, w, h);
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.data[y * w + x];
        (d > 0.0 && d.is_finite()).then(|| rays[y * w + x] * d)
    };
    normal
        .data
        .par_chunks_mut(3 * w)
        .zip(valid.data.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (nrow, vrow))| {
            if y == 0 || y + 1 >= h {
                return;
            }
            for x in 1..w.saturating_sub(1) {
                let (Some(p0), Some(p1), Some(p2), Some(p3)) =
                    (point(x, y - 1), point(x, y + 1), point(x - 1, y), point(x + 1, y))
                else {
                    continue;
                };
                let c = (p1 - p0).cross(&(p3 - p2));
                let norm = c.norm();
                if norm <= f64::MIN_POSITIVE || !norm.is_finite() || point(x, y).is_none() {
                    continue;
                }
                nrow[3 * x..3 * x + 3].copy_from_slice((c / norm).as_slice());
                vrow[x] = true;
            }
        });
    DepthNormals { normal, valid }
}

/// Pulls a normal-field adjoint back to the depth map.
pub fn normal_from_depth_backward(depth: &Image, camera: &Camera, normals: &DepthNormals, grad_normal: &Image) -> Image {
    let (w, h) = (depth.width, depth.height);
    let rays = ray_field(camera, w, h);
    let mut grad = Image::zeros(w, h, 1);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !normals.valid.get(x, y) {
                continue;
            }
            let p = y * w + x;
            let g_n = Vector3::from_column_slice(&grad_normal.data[3 * p..3 * p + 3]);
            if g_n == Vector3::zeros() {
                continue;
            }
            let idx = [p - w, p + w, p - 1, p + 1];
            let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| rays[i] * depth.data[i]).collect();
            let a = pts[1] - pts[0];
            let b = pts[3] - pts[2];
            let c = a.cross(&b);
            let norm = c.norm();
            let n = c / norm;
            let g_c = (g_n - n * n.dot(&g_n)) / norm;
            let g_a = b.cross(&g_c);
            let g_b = g_c.cross(&a);
            grad.data[idx[1]] += rays[idx[1]].dot(&g_a);
            grad.data[idx[0]] -= rays[idx[0]].dot(&g_a);
            grad.data[idx[3]] += rays[idx[3]].dot(&g_b);
            grad.data[idx[2]] -= rays[idx[2]].dot(&g_b);
        }
    }
    grad
}

fn ray_field(camera: &Camera, w: usize, h: usize) -> Vec<Vector3<f64>> {
    (0..w * h)
        .map(|p| camera.ray_dir((p % w) as f64, (p / w) as f64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelFrame {
    pub ray: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub cos_theta_prime: f64,
}

const PARALLEL_EPS: f64 = 1e-6;

pub fn pixel_frame(normal: &Vector3<f64>, ray: &Vector3<f64>) -> PixelFrame {
    let perp = normal - ray * normal.dot(ray);
    let len = perp.norm();
    if len < PARALLEL_EPS {
        let helper = if ray.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let tangent = (helper - ray * helper.dot(ray)).normalize();
        return PixelFrame {
            ray: *ray,
            tangent,
            cos_theta_prime: 0.0,
        };
    }
    PixelFrame {
        ray: *ray,
        tangent: -perp / len,
        cos_theta_prime: len,
    }
}

/// Which case of the normal-error analysis a pixel falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalCase {
    /// The prior lies between the rendered normal and the ray-facing direction.
    M1,
    /// The prior points to the other side of the ray.
    M2,
    M3,
}

pub fn classify(cos_alpha: f64, cos_theta_prime: f64) -> NormalCase {
    if cos_alpha < 0.0 {
        NormalCase::M2
    } else if cos_alpha > cos_theta_prime && cos_theta_prime > 0.0 {
        NormalCase::M1
    } else {
        NormalCase::M3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementMasks {
    pub m1: Mask,
    pub m2: Mask,
    pub m3: Mask,
    pub cos_alpha: Image,
}

impl RefinementMasks {
    /// 0 = excluded, 1..=3 for the three cases.
    pub fn label_bytes(&self) -> Vec<u8> {
        (0..self.m1.data.len())
            .map(|i| {
                if self.m1.data[i] {
                    1
                } else if self.m2.data[i] {
                    2
                } else if self.m3.data[i] {
                    3
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn defined(&self, p: usize) -> bool {
        self.m1.data[p] || self.m2.data[p] || self.m3.data[p]
    }
}

fn unit_at(img: &Image, p: usize) -> Option<Vector3<f64>> {
    let v = Vector3::from_column_slice(&img.data[3 * p..3 * p + 3]);
    let n = v.norm();
    (n > 0.5).then(|| v / n)
}

/// Pixels with alpha at or below `alpha_floor`, or without a rendered or prior normal, are in
/// no mask.
pub fn refinement_masks(rendered_normal: &Image, prior_normal: &Image, rays: &Image, alpha: &Image, alpha_floor: f64) -> RefinementMasks {
    let (w, h) = (rendered_normal.width, rendered_normal.height);
    let mut masks = RefinementMasks {
        m1: Mask::new(w, h),
        m2: Mask::new(w, h),
        m3: Mask::new(w, h),
        cos_alpha: Image::zeros(w, h, 1),
    };
    for p in 0..w * h {
        if alpha.data[p] <= alpha_floor {
            continue;
        }
        let (Some(n), Some(prior)) = (unit_at(rendered_normal, p), unit_at(prior_normal, p)) else {
            continue;
        };
        let ray = Vector3::from_column_slice(&rays.data[3 * p..3 * p + 3]);
        let frame = pixel_frame(&n, &ray);
        let cos_alpha = -prior.dot(&frame.tangent);
        masks.cos_alpha.data[p] = cos_alpha;
        match classify(cos_alpha, frame.cos_theta_prime) {
            NormalCase::M1 => masks.m1.data[p] = true,
            NormalCase::M2 => masks.m2.data[p] = true,
            NormalCase::M3 => masks.m3.data[p] = true,
        }
    }
    masks
}

/// Per-pixel target depth; pixels outside all masks keep `unbiased_depth`.
pub fn refined_depth(depth: &Image, unbiased_depth: &Image, alpha: &Image, masks: &RefinementMasks) -> Image {
    let mut out = unbiased_depth.clone();
    for p in 0..out.data.len() {
        let (d, dp, a) = (depth.data[p], unbiased_depth.data[p], alpha.data[p]);
        if masks.m1.data[p] {
            out.data[p] = a * dp + d - a * d;
        } else if masks.m2.data[p] {
            out.data[p] = d;
        }
    }
    out
}
