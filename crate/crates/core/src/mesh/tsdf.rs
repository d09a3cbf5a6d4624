//! Projective TSDF fusion of rendered depth maps.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{marching_cubes, palette_color, TriangleMesh};
use crate::camera::Camera;
use crate::error::{GlsError, Result};
use crate::image::{Image, LabelMap};
use crate::losses::ClassifierHead;
use crate::raster::{self, RenderSettings};
use crate::scene::Scene;

/// Grid of samples at `origin + voxel_size · (i, j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    /// Signed distance divided by the truncation, in [−1, 1].
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
    pub color: Vec<[f32; 3]>,
    classes: usize,
    votes: Vec<u16>,
}

impl TsdfVolume {
    /// Volume covering `[min, max]`; pass `classes > 0` to accumulate label votes.
    pub fn new(min: Vector3<f64>, max: Vector3<f64>, voxel_size: f64, truncation: f64, classes: usize) -> Result<Self> {
        if !(voxel_size > 0.0) || !(truncation > 0.0) {
            return Err(GlsError::InvalidParameter("voxel size and truncation must be positive".into()));
        }
        let extent = max - min;
        if extent.iter().any(|e| !(*e > 0.0)) {
            return Err(GlsError::InvalidParameter("volume bounds are empty".into()));
        }
        let dims = [0, 1, 2].map(|k| (extent[k] / voxel_size).ceil() as usize + 1);
        let n = dims[0] * dims[1] * dims[2];
        if n > 200_000_000 {
            return Err(GlsError::InvalidParameter(format!("volume of {n} voxels is too large")));
        }
        Ok(TsdfVolume {
            origin: min,
            voxel_size,
            dims,
            truncation,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            classes,
            votes: vec![0; n * classes.max(1)],
        })
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.classes > 0
    }

    pub fn node_position(&self, i: usize) -> Vector3<f64> {
        let [nx, ny, _] = self.dims;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Most voted class, smallest id on ties; 0 when unlabeled.
    pub fn label(&self, i: usize) -> u16 {
        if self.classes == 0 {
            return 0;
        }
        let votes = &self.votes[i * self.classes..(i + 1) * self.classes];
        let mut best = 0;
        for (k, v) in votes.iter().enumerate() {
            if *v > votes[best] {
                best = k;
            }
        }
        if votes[best] == 0 {
            0
        } else {
            best as u16
        }
    }

    /// Fills the volume from a signed distance function (weight 1 everywhere).
    pub fn fill_sdf(&mut self, sdf: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let trunc = self.truncation;
        let positions: Vec<Vector3<f64>> = (0..self.len()).map(|i| self.node_position(i)).collect();
        self.tsdf
            .par_iter_mut()
            .zip(self.weight.par_iter_mut())
            .zip(positions.par_iter())
            .for_each(|((t, w), p)| {
                *t = (sdf(p) / trunc).clamp(-1.0, 1.0) as f32;
                *w = 1.0;
            });
    }

    /// Integrates one z-depth map. Pixels with non-positive depth, depth beyond `camera.far`,
    /// or alpha at or below `alpha_floor` are skipped. Returns the number of voxels updated.
    pub fn integrate(
        &mut self,
        depth: &Image,
        color: Option<&Image>,
        alpha: Option<(&Image, f64)>,
        labels: Option<&LabelMap>,
        camera: &Camera,
    ) -> Result<usize> {
        depth.ensure_shape(camera.width, camera.height, 1, "fusion depth")?;
        let [nx, ny, _] = self.dims;
        let trunc = self.truncation;
        let classes = self.classes;
        let (w, h) = (camera.width, camera.height);
        let origin = self.origin;
        let voxel = self.voxel_size;
        let slab = nx * ny;
        let updated: usize = self
            .tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .zip(self.color.par_chunks_mut(slab))
            .zip(self.votes.par_chunks_mut(slab * classes.max(1)))
            .enumerate()
            .map(|(z, (((ts, ws), cs), vs))| {
                let mut count = 0;
                for y in 0..ny {
                    for x in 0..nx {
                        let p = origin + Vector3::new(x as f64, y as f64, z as f64) * voxel;
                        let pc = camera.to_camera(&p);
                        if pc.z <= camera.near {
                            continue;
                        }
                        let (u, v) = camera.project(&pc);
                        let (ui, vi) = (u.round(), v.round());
                        if ui < 0.0 || vi < 0.0 || ui >= w as f64 || vi >= h as f64 {
                            continue;
                        }
                        let pix = vi as usize * w + ui as usize;
                        let d = depth.data[pix];
                        if !(d > 0.0) || d > camera.far {
                            continue;
                        }
                        if let Some((a, floor)) = alpha {
                            if a.data[pix] <= floor {
                                continue;
                            }
                        }
                        let sdf = d - pc.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let sample = (sdf / trunc).min(1.0) as f32;
                        let i = y * nx + x;
                        let wt = ws[i];
                        ts[i] = (ts[i] * wt + sample) / (wt + 1.0);
                        if let Some(c) = color {
                            for k in 0..3 {
                                cs[i][k] = (cs[i][k] * wt + c.data[3 * pix + k] as f32) / (wt + 1.0);
                            }
                        }
                        ws[i] = wt + 1.0;
                        if let Some(l) = labels {
                            let id = l.data[pix] as usize;
                            if classes > 0 && id < classes && id > 0 {
                                vs[i * classes + id] = vs[i * classes + id].saturating_add(1);
                            }
                        }
                        count += 1;
                    }
                }
                count
            })
            .sum();
        if updated == 0 {
            log::warn!("depth map did not touch the fusion volume");
        }
        Ok(updated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshOptions {
    /// Fuse the unbiased depth (otherwise the blended plane depth).
    pub use_unbiased: bool,
    /// Fuse per-pixel class predictions and color vertices by label.
    pub semantic: bool,
    /// Defaults to the bounds diagonal / 256.
    pub voxel_size: Option<f64>,
    /// Truncation in voxels.
    pub truncation_voxels: f64,
    /// Defaults to the primitive-center bounding box inflated by 5%.
    pub bounds: Option<(Vector3<f64>, Vector3<f64>)>,
    pub alpha_floor: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        MeshOptions {
            use_unbiased: true,
            semantic: false,
            voxel_size: None,
            truncation_voxels: 4.0,
            bounds: None,
            alpha_floor: 0.05,
        }
    }
}

/// Axis-aligned bounds of `points` inflated by `fraction` of the extent on each side.
pub fn inflated_bounds(points: impl Iterator<Item = Vector3<f64>>, fraction: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        min = min.inf(&p);
        max = max.sup(&p);
        any = true;
    }
    if !any {
        return None;
    }
    let pad = (max - min) * fraction;
    let pad = pad.map(|v| v.max(1e-3));
    Some((min - pad, max + pad))
}

/// Renders every camera, fuses the depths and extracts the surface.
pub fn extract_scene_mesh(scene: &Scene, cameras: &[Camera], head: Option<&ClassifierHead>, options: &MeshOptions) -> Result<TriangleMesh> {
    if options.semantic && head.is_none() {
        return Err(GlsError::InvalidParameter("semantic meshing needs a classifier head".into()));
    }
    let (min, max) = match options.bounds {
        Some(b) => b,
        None => inflated_bounds(scene.primitives.iter().map(|p| p.center), 0.05)
            .ok_or_else(|| GlsError::EmptyScene("no primitives to mesh".into()))?,
    };
    let voxel = options.voxel_size.unwrap_or_else(|| (max - min).norm() / 256.0);
    let classes = if options.semantic { head.unwrap().classes } else { 0 };
    let mut volume = TsdfVolume::new(min, max, voxel, options.truncation_voxels * voxel, classes)?;
    let settings = RenderSettings::default();
    for cam in cameras {
        let (out, _) = raster::render_with(scene, cam, &settings)?;
        let depth = if options.use_unbiased {
            out.unbiased_z_depth()
        } else {
            let mut d = Image::zeros(cam.width, cam.height, 1);
            for p in 0..d.data.len() {
                d.data[p] = out.depth.data[p] * out.ray_dirs.data[3 * p + 2];
            }
            d
        };
        let labels = if options.semantic {
            let head = head.unwrap();
            let fd = out.feature.channels;
            let mut l = LabelMap::new(cam.width, cam.height);
            for p in 0..l.data.len() {
                l.data[p] = head.predict(&out.feature.data[p * fd..(p + 1) * fd]) as u16;
            }
            Some(l)
        } else {
            None
        };
        volume.integrate(&depth, Some(&out.color), Some((&out.alpha, options.alpha_floor)), labels.as_ref(), cam)?;
    }
    let mut mesh = marching_cubes(&volume);
    if options.semantic {
        mesh.colors = mesh.labels.iter().map(|l| palette_color(*l)).collect();
    }
    Ok(mesh)
}
