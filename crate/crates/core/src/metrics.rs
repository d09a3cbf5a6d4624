//! Mesh, image and segmentation quality metrics.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlsError, Result};
use crate::image::{Image, Mask};
use crate::mesh::TriangleMesh;
use crate::spatial::KdTree;

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_BOUNDARY_WIDTH: usize = 3;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub chamfer_l1: f64,
    pub normal_consistency: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tau: f64,
}

/// Area-weighted surface samples with their face normals.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<(Vec<[f64; 3]>, Vec<Vector3<f64>>)> {
    if mesh.is_empty() {
        return Err(GlsError::Mesh("cannot sample an empty mesh".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(GlsError::Mesh("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.random::<f64>() * total;
        let t = cdf.partition_point(|c| *c <= r).min(cdf.len() - 1);
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let su = u.sqrt();
        let [a, b, c] = mesh.corners(t);
        let p = a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
        points.push([p.x, p.y, p.z]);
        normals.push(mesh.face_normal(t));
    }
    Ok((points, normals))
}

/// (distance, |cos| of normals) from every query sample to its nearest reference sample.
fn match_samples(query: &[[f64; 3]], qn: &[Vector3<f64>], tree: &KdTree, rn: &[Vector3<f64>]) -> Vec<(f64, f64)> {
    query
        .par_iter()
        .zip(qn.par_iter())
        .map(|(q, n)| {
            let (j, d2) = tree.nearest(q).unwrap();
            (d2.sqrt(), n.dot(&rn[j]).abs())
        })
        .collect()
}

pub fn mesh_metrics(pred: &TriangleMesh, gt: &TriangleMesh, samples: usize, tau: f64, seed: u64) -> Result<MeshMetrics> {
    if samples == 0 {
        return Err(GlsError::InvalidParameter("sample count must be positive".into()));
    }
    let (pp, pn) = sample_surface(pred, samples, seed)?;
    let (gp, gn) = sample_surface(gt, samples, seed)?;
    let to_gt = match_samples(&pp, &pn, &KdTree::new(&gp), &gn);
    let to_pred = match_samples(&gp, &gn, &KdTree::new(&pp), &pn);
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let accuracy = mean(&to_gt, |m| m.0);
    let completion = mean(&to_pred, |m| m.0);
    let normal_consistency = 0.5 * (mean(&to_gt, |m| m.1) + mean(&to_pred, |m| m.1));
    let precision = to_gt.iter().filter(|m| m.0 < tau).count() as f64 / to_gt.len() as f64;
    let recall = to_pred.iter().filter(|m| m.0 < tau).count() as f64 / to_pred.len() as f64;
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MeshMetrics {
        accuracy,
        completion,
        chamfer_l1: 0.5 * (accuracy + completion),
        normal_consistency,
        precision,
        recall,
        f_score,
        tau,
    })
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(GlsError::InvalidParameter("psnr needs images of the same shape".into()));
    }
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len().max(1) as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(GlsError::InvalidParameter("ssim needs images of the same shape".into()));
    }
    Ok(crate::ssim::ssim(pred, gt))
}

/// Mask pixels with a 4-neighbor outside the mask; the image border counts as outside.
pub fn mask_boundary(m: &Mask) -> Mask {
    let (w, h) = (m.width, m.height);
    Mask::from_fn(w, h, |x, y| {
        m.get(x, y) && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !m.get(x - 1, y) || !m.get(x + 1, y) || !m.get(x, y - 1) || !m.get(x, y + 1))
    })
}

/// Mask pixels within Chebyshev distance `width` of the mask boundary.
pub fn boundary_band(m: &Mask, width: usize) -> Mask {
    let b = mask_boundary(m);
    let (w, h) = (m.width, m.height);
    // separable square dilation
    let mut rows = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(width);
            let hi = (x + width).min(w - 1);
            rows.data[y * w + x] = (lo..=hi).any(|xx| b.data[y * w + xx]);
        }
    }
    Mask::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(width);
        let hi = (y + width).min(h - 1);
        m.get(x, y) && (lo..=hi).any(|yy| rows.data[yy * w + x])
    })
}

/// Both empty counts as 1, one empty as 0.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let union = a.data.iter().zip(&b.data).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub miou: f64,
    pub mbiou: f64,
}

/// Mean IoU and boundary IoU over paired masks.
pub fn miou_mbiou(pred: &[Mask], gt: &[Mask], boundary_width: usize) -> Result<SegmentationScores> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(GlsError::InvalidParameter("need equally many, and at least one, predicted and ground-truth masks".into()));
    }
    let mut miou = 0.0;
    let mut mbiou = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.width != g.width || p.height != g.height {
            return Err(GlsError::InvalidParameter("mask shapes differ".into()));
        }
        miou += iou(p, g);
        mbiou += iou(&boundary_band(p, boundary_width), &boundary_band(g, boundary_width));
    }
    let n = pred.len() as f64;
    Ok(SegmentationScores {
        miou: miou / n,
        mbiou: mbiou / n,
    })
}
