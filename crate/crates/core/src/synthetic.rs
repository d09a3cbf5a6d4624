//! Analytic scenes rendered by ray casting, with exact ground truth and configurable cue
//! noise.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{GlsError, Result};
use crate::image::{Image, LabelMap, Mask};
use crate::mesh::TriangleMesh;
use crate::priors::{top_k_object_mask, Dataset, InitPoint, PriorBundle, DEFAULT_TOP_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Square of side `2·half_extent`; `normal` is its visible side.
    Plane { center: [f64; 3], normal: [f64; 3], half_extent: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_size: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// 3D checkerboard; odd cells are darkened by `contrast`.
    Checker { cell: f64, contrast: f64 },
}

impl Default for Texture {
    fn default() -> Self {
        Texture::Checker { cell: 0.2, contrast: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u16,
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    #[serde(default)]
    pub texture: Texture,
    /// Generated (orthonormal across objects) when absent.
    #[serde(default)]
    pub feature: Option<Vec<f64>>,
    /// Receives the per-view lighting perturbation.
    #[serde(default)]
    pub perturbed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub target: [f64; 3],
    pub radius: f64,
    /// One ring of views per elevation; views are split evenly across rings.
    pub elevations_deg: Vec<f64>,
    pub fov_deg: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            target: [0.0, 0.0, 0.3],
            radius: 3.0,
            elevations_deg: vec![25.0, 50.0],
            fov_deg: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Angular jitter scale of the normal prior, degrees.
    pub normal_deg: f64,
    /// Probability that an instance id is dropped from a whole view.
    pub mask_view_dropout: f64,
    /// Probability that a labeled pixel is reset to unlabeled.
    pub mask_pixel_dropout: f64,
    /// Standard deviation of additive feature noise.
    pub feature_sigma: f64,
}

impl NoiseSpec {
    /// Every cue perturbed at relative level `level` (0.1 = 10%).
    pub fn uniform(level: f64) -> Self {
        NoiseSpec {
            normal_deg: 90.0 * level,
            mask_view_dropout: level,
            mask_pixel_dropout: level,
            feature_sigma: level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub orbit: OrbitSpec,
    /// Amplitude of view-dependent shadow/highlight blobs on perturbed objects.
    pub lighting_perturbation: f64,
    pub noise: NoiseSpec,
    pub feature_dim: usize,
    pub init_points: usize,
    /// Standard deviation of the initialization point jitter (scene units).
    pub init_noise: f64,
    pub background: [f64; 3],
    /// Rgb samples per pixel along each axis.
    pub supersample: usize,
    pub sensor_depth: bool,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            objects: vec![
                ObjectSpec {
                    id: 1,
                    name: "sphere".into(),
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, 0.5],
                        radius: 0.5,
                    },
                    color: [0.85, 0.35, 0.25],
                    texture: Texture::Checker { cell: 0.18, contrast: 0.5 },
                    feature: None,
                    perturbed: false,
                },
                ObjectSpec {
                    id: 2,
                    name: "ground".into(),
                    shape: Shape::Plane {
                        center: [0.0, 0.0, 0.0],
                        normal: [0.0, 0.0, 1.0],
                        half_extent: 1.25,
                    },
                    color: [0.35, 0.6, 0.85],
                    texture: Texture::Checker { cell: 0.25, contrast: 0.55 },
                    feature: None,
                    perturbed: true,
                },
            ],
            views: 16,
            width: 64,
            height: 64,
            orbit: OrbitSpec::default(),
            lighting_perturbation: 0.0,
            noise: NoiseSpec::default(),
            feature_dim: crate::scene::DEFAULT_FEATURE_DIM,
            init_points: 2000,
            init_noise: 0.01,
            background: [0.0, 0.0, 0.0],
            supersample: 2,
            sensor_depth: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Union of the object meshes; labels carry object ids.
    pub mesh: TriangleMesh,
    /// Per view, the silhouette of each object rendered alone.
    pub object_masks: Vec<BTreeMap<u16, Mask>>,
    /// Per view, ray distance to the first hit (0 on misses).
    pub depth: Vec<Image>,
    /// Per view, camera-frame normals of the first hit.
    pub normals: Vec<Image>,
    /// Per view, visible object ids.
    pub labels: Vec<LabelMap>,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Shape {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        match self {
            Shape::Sphere { center, radius } => {
                let oc = o - v3(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > EPS { -b - s } else { -b + s };
                if t <= EPS {
                    return None;
                }
                let p = o + d * t;
                Some(Hit {
                    t,
                    normal: (p - v3(*center)) / *radius,
                })
            }
            Shape::Plane {
                center,
                normal,
                half_extent,
            } => {
                let n = v3(*normal).normalize();
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (v3(*center) - o).dot(&n) / denom;
                if t <= EPS {
                    return None;
                }
                let p = o + d * t;
                let (u, v) = plane_axes(&n);
                let q = p - v3(*center);
                if q.dot(&u).abs() > *half_extent || q.dot(&v).abs() > *half_extent {
                    return None;
                }
                Some(Hit {
                    t,
                    normal: if denom < 0.0 { n } else { -n },
                })
            }
            Shape::Box { center, half_size } => {
                let c = v3(*center);
                let hs = v3(*half_size);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if (o[k] - c[k]).abs() > hs[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (c[k] - hs[k] - o[k]) / d[k];
                    let b = (c[k] + hs[k] - o[k]) / d[k];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t0 {
                        t0 = lo;
                        axis0 = k;
                    }
                    if hi < t1 {
                        t1 = hi;
                        axis1 = k;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > EPS { (t0, axis0) } else { (t1, axis1) };
                if t <= EPS {
                    return None;
                }
                let p = o + d * t;
                let mut normal = Vector3::zeros();
                normal[axis] = (p[axis] - c[axis]).signum();
                Some(Hit { t, normal })
            }
        }
    }

    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - v3(*center)).norm() - radius,
            Shape::Plane { center, normal, .. } => (p - v3(*center)).dot(&v3(*normal).normalize()),
            Shape::Box { center, half_size } => {
                let q = (p - v3(*center)).abs() - v3(*half_size);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    fn mesh(&self, id: u16) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        match self {
            Shape::Sphere { center, radius } => {
                let (seg, rings) = (96usize, 48usize);
                let c = v3(*center);
                m.vertices.push(c + Vector3::z() * *radius);
                for r in 1..rings {
                    let th = std::f64::consts::PI * r as f64 / rings as f64;
                    for s in 0..seg {
                        let ph = 2.0 * std::f64::consts::PI * s as f64 / seg as f64;
                        m.vertices.push(c + Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * *radius);
                    }
                }
                m.vertices.push(c - Vector3::z() * *radius);
                let last = (m.vertices.len() - 1) as u32;
                let idx = |r: usize, s: usize| (1 + (r - 1) * seg + s % seg) as u32;
                for s in 0..seg {
                    m.triangles.push([0, idx(1, s), idx(1, s + 1)]);
                    m.triangles.push([last, idx(rings - 1, s + 1), idx(rings - 1, s)]);
                }
                for r in 1..rings - 1 {
                    for s in 0..seg {
                        m.triangles.push([idx(r, s), idx(r + 1, s), idx(r + 1, s + 1)]);
                        m.triangles.push([idx(r, s), idx(r + 1, s + 1), idx(r, s + 1)]);
                    }
                }
            }
            Shape::Plane {
                center,
                normal,
                half_extent,
            } => {
                let n = v3(*normal).normalize();
                let (u, v) = plane_axes(&n);
                let c = v3(*center);
                let e = *half_extent;
                for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    m.vertices.push(c + u * (a * e) + v * (b * e));
                }
                m.triangles = vec![[0, 1, 2], [0, 2, 3]];
            }
            Shape::Box { center, half_size } => {
                let c = v3(*center);
                let h = v3(*half_size);
                for k in 0..8 {
                    let s = Vector3::new(
                        if k & 1 == 1 { 1.0 } else { -1.0 },
                        if k & 2 == 2 { 1.0 } else { -1.0 },
                        if k & 4 == 4 { 1.0 } else { -1.0 },
                    );
                    m.vertices.push(c + h.component_mul(&s));
                }
                m.triangles = vec![
                    [0, 2, 3],
                    [0, 3, 1],
                    [4, 5, 7],
                    [4, 7, 6],
                    [0, 1, 5],
                    [0, 5, 4],
                    [2, 6, 7],
                    [2, 7, 3],
                    [0, 4, 6],
                    [0, 6, 2],
                    [1, 3, 7],
                    [1, 7, 5],
                ];
            }
        }
        m.labels = vec![id; m.vertices.len()];
        m
    }
}

/// Orthonormal tangent basis (u, v) with u × v = n.
fn plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (helper - n * helper.dot(n)).normalize();
    let v = n.cross(&u);
    (u, v)
}

impl Texture {
    fn shade(&self, base: [f64; 3], p: &Vector3<f64>) -> [f64; 3] {
        match self {
            Texture::Flat => base,
            Texture::Checker { cell, contrast } => {
                let k = (p.x / cell).floor() + (p.y / cell).floor() + (p.z / cell).floor();
                let odd = (k as i64).rem_euclid(2) == 1;
                let f = if odd { 1.0 - contrast } else { 1.0 };
                base.map(|c| c * f)
            }
        }
    }
}

struct Blob {
    center: Vector3<f64>,
    radius: f64,
    sign: f64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(GlsError::Config("synthetic scene needs at least one object".into()));
        }
        let mut ids: Vec<u16> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, id)| *id as usize != i + 1) {
            return Err(GlsError::Config("object ids must be dense from 1".into()));
        }
        if self.views == 0 || self.width < 3 || self.height < 3 {
            return Err(GlsError::Config("need at least one view of at least 3x3 pixels".into()));
        }
        let o = &self.orbit;
        if !(o.radius > 0.0) || o.elevations_deg.is_empty() || o.elevations_deg.iter().any(|e| e.abs() >= 89.0) {
            return Err(GlsError::Config("degenerate camera orbit".into()));
        }
        if !(o.fov_deg > 1.0 && o.fov_deg < 170.0) {
            return Err(GlsError::Config("field of view must lie in (1, 170) degrees".into()));
        }
        if self.feature_dim == 0 {
            return Err(GlsError::Config("feature dimension must be positive".into()));
        }
        let generated = self.objects.iter().filter(|o| o.feature.is_none()).count();
        if generated > 0 && self.objects.len() > self.feature_dim {
            return Err(GlsError::Config("more objects than feature dimensions".into()));
        }
        for obj in &self.objects {
            if let Some(f) = &obj.feature {
                if f.len() != self.feature_dim {
                    return Err(GlsError::Config(format!("feature of object {} has the wrong dimension", obj.name)));
                }
            }
            let bad = match &obj.shape {
                Shape::Sphere { radius, .. } => !(*radius > 0.0),
                Shape::Plane { normal, half_extent, .. } => !(*half_extent > 0.0) || v3(*normal).norm() < 1e-9,
                Shape::Box { half_size, .. } => half_size.iter().any(|h| !(*h > 0.0)),
            };
            if bad {
                return Err(GlsError::Config(format!("object {} has a degenerate shape", obj.name)));
            }
        }
        let n = self.noise;
        if [n.mask_view_dropout, n.mask_pixel_dropout].iter().any(|p| !(0.0..=1.0).contains(p)) || n.normal_deg < 0.0 || n.feature_sigma < 0.0 {
            return Err(GlsError::Config("noise levels out of range".into()));
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let o = &self.orbit;
        let rings = o.elevations_deg.len();
        let f = (self.width as f64 / 2.0) / (o.fov_deg.to_radians() / 2.0).tan();
        let target = v3(o.target);
        let mut cams = Vec::with_capacity(self.views);
        for i in 0..self.views {
            let ring = i * rings / self.views;
            let first = (ring * self.views).div_ceil(rings);
            let count = ((ring + 1) * self.views).div_ceil(rings) - first;
            let j = i - first;
            let el = o.elevations_deg[ring].to_radians();
            let az = 2.0 * std::f64::consts::PI * (j as f64 + 0.5 * ring as f64) / count as f64;
            let eye = target + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * o.radius;
            cams.push(Camera::look_at(eye, target, Vector3::z(), f, f, self.width, self.height, 0.05, 4.0 * o.radius + 10.0)?);
        }
        Ok(cams)
    }

    fn features(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut out = Vec::new();
        for obj in &self.objects {
            if let Some(f) = &obj.feature {
                out.push(f.clone());
                continue;
            }
            loop {
                let mut v: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
                for b in basis.iter().chain(out.iter()) {
                    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>();
                    if nb == 0.0 {
                        continue;
                    }
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / nb;
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= n);
                    basis.push(v.clone());
                    out.push(v);
                    break;
                }
            }
        }
        out
    }

    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(usize, Hit)> {
        let mut best: Option<(usize, Hit)> = None;
        for (k, obj) in self.objects.iter().enumerate() {
            if let Some(hit) = obj.shape.intersect(o, d) {
                if best.as_ref().is_none_or(|b| hit.t < b.1.t) {
                    best = Some((k, hit));
                }
            }
        }
        best
    }

    /// The exact signed distance to the union of all objects.
    pub fn scene_sdf(&self, p: &Vector3<f64>) -> f64 {
        self.objects.iter().map(|o| o.shape.sdf(p)).fold(f64::INFINITY, f64::min)
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic in `seed`. Stored cues are quantized exactly as the on-disk formats store
/// them, so a save/load round trip reproduces the dataset bit for bit.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = spec.cameras()?;
    let features = spec.features(&mut rng);
    let (w, h, fd) = (spec.width, spec.height, spec.feature_dim);

    // per-view random draws happen up front so rendering can run in parallel
    let view_seeds: Vec<u64> = (0..spec.views).map(|_| rng.random()).collect();

    struct View {
        image: Image,
        priors: PriorBundle,
        depth: Image,
        normals: Image,
        labels: LabelMap,
        masks: BTreeMap<u16, Mask>,
    }

    let views: Vec<View> = cameras
        .par_iter()
        .zip(view_seeds.par_iter())
        .map(|(cam, vseed)| {
            let mut vrng = ChaCha8Rng::seed_from_u64(*vseed);
            let blobs: Vec<Blob> = if spec.lighting_perturbation > 0.0 {
                (0..4)
                    .map(|_| Blob {
                        center: Vector3::new(vrng.random_range(-1.2..1.2), vrng.random_range(-1.2..1.2), 0.0),
                        radius: vrng.random_range(0.2..0.5),
                        sign: if vrng.random_bool(0.5) { 1.0 } else { -1.0 },
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let origin = cam.position();
            let rot_t = cam.rotation.transpose();
            let shade = |k: usize, p: &Vector3<f64>| {
                let obj = &spec.objects[k];
                let mut c = obj.texture.shade(obj.color, p);
                if obj.perturbed && !blobs.is_empty() {
                    let s: f64 = blobs
                        .iter()
                        .map(|b| b.sign * (-(p - b.center).norm_squared() / (2.0 * b.radius * b.radius)).exp())
                        .sum();
                    let f = 1.0 + spec.lighting_perturbation * s;
                    c = c.map(|v| (v * f).clamp(0.0, 1.0));
                }
                c
            };

            let mut image = Image::zeros(w, h, 3);
            let mut depth = Image::zeros(w, h, 1);
            let mut normals = Image::zeros(w, h, 3);
            let mut labels = LabelMap::new(w, h);
            let mut feature_map = Image::zeros(w, h, fd);
            let mut masks: BTreeMap<u16, Mask> = spec.objects.iter().map(|o| (o.id, Mask::new(w, h))).collect();
            let ss = spec.supersample.max(1);
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let d_cam = cam.ray_dir(x as f64, y as f64);
                    let d = rot_t * d_cam;
                    if let Some((k, hit)) = spec.cast(&origin, &d) {
                        depth.data[p] = hit.t;
                        let n_cam = (cam.rotation * hit.normal).normalize();
                        for c in 0..3 {
                            normals.data[3 * p + c] = quantize_f32(n_cam[c]);
                        }
                        labels.data[p] = spec.objects[k].id;
                        for c in 0..fd {
                            feature_map.data[p * fd + c] = features[k][c];
                        }
                    }
                    for obj in &spec.objects {
                        if obj.shape.intersect(&origin, &d).is_some() {
                            masks.get_mut(&obj.id).unwrap().data[p] = true;
                        }
                    }
                    let mut rgb = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                            let v = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                            let dir = rot_t * cam.ray_dir(u, v);
                            let c = match spec.cast(&origin, &dir) {
                                Some((k, hit)) => shade(k, &(origin + dir * hit.t)),
                                None => spec.background,
                            };
                            for ch in 0..3 {
                                rgb[ch] += c[ch];
                            }
                        }
                    }
                    for ch in 0..3 {
                        image.data[3 * p + ch] = quantize_u8(rgb[ch] / (ss * ss) as f64);
                    }
                }
            }

            // cue noise
            let noise = &spec.noise;
            let mut normal_prior = normals.clone();
            if noise.normal_deg > 0.0 {
                let sigma = noise.normal_deg.to_radians().tan();
                for p in 0..w * h {
                    let n = Vector3::from_column_slice(&normals.data[3 * p..3 * p + 3]);
                    if n.norm() < 0.5 {
                        continue;
                    }
                    let g = Vector3::new(
                        StandardNormal.sample(&mut vrng),
                        StandardNormal.sample(&mut vrng),
                        StandardNormal.sample(&mut vrng),
                    );
                    let t: Vector3<f64> = g - n * n.dot(&g);
                    let jittered = (n + t * sigma).normalize();
                    for c in 0..3 {
                        normal_prior.data[3 * p + c] = quantize_f32(jittered[c]);
                    }
                }
            }
            let mut instance_mask = labels.clone();
            if noise.mask_view_dropout > 0.0 {
                for obj in &spec.objects {
                    if vrng.random_bool(noise.mask_view_dropout) {
                        instance_mask.data.iter_mut().filter(|l| **l == obj.id).for_each(|l| *l = 0);
                    }
                }
            }
            if noise.mask_pixel_dropout > 0.0 {
                for l in instance_mask.data.iter_mut() {
                    if *l != 0 && vrng.random_bool(noise.mask_pixel_dropout) {
                        *l = 0;
                    }
                }
            }
            if noise.feature_sigma > 0.0 {
                let dist = Normal::new(0.0, noise.feature_sigma).unwrap();
                for f in feature_map.data.iter_mut() {
                    *f += dist.sample(&mut vrng);
                }
            }
            feature_map.data.iter_mut().for_each(|f| *f = quantize_f32(*f));
            let sensor_depth = spec.sensor_depth.then(|| {
                let mut d = depth.clone();
                d.data.iter_mut().for_each(|v| *v = quantize_f32(*v));
                d
            });
            let big_object_mask = top_k_object_mask(&instance_mask, DEFAULT_TOP_K);
            View {
                image,
                priors: PriorBundle {
                    normal_prior,
                    instance_mask,
                    feature_map: Some(feature_map),
                    big_object_mask,
                    sensor_depth,
                },
                depth,
                normals,
                labels,
                masks,
            }
        })
        .collect();

    let init_points = sample_init_points(spec, &cameras, &views.iter().map(|v| (&v.image, &v.depth)).collect::<Vec<_>>(), &mut rng);

    let mut mesh = TriangleMesh::default();
    for obj in &spec.objects {
        mesh.append(&obj.shape.mesh(obj.id));
    }
    let class_names: BTreeMap<u16, String> = spec.objects.iter().map(|o| (o.id, o.name.clone())).collect();
    let text_queries: BTreeMap<String, Vec<f64>> = spec
        .objects
        .iter()
        .zip(&features)
        .map(|(o, f)| (o.name.clone(), f.iter().map(|v| quantize_f32(*v)).collect()))
        .collect();

    let mut images = Vec::new();
    let mut priors = Vec::new();
    let mut gt = GroundTruth {
        mesh,
        object_masks: Vec::new(),
        depth: Vec::new(),
        normals: Vec::new(),
        labels: Vec::new(),
    };
    for v in views {
        images.push(v.image);
        priors.push(v.priors);
        gt.depth.push(v.depth);
        gt.normals.push(v.normals);
        gt.labels.push(v.labels);
        gt.object_masks.push(v.masks);
    }
    let ds = Dataset {
        cameras,
        images,
        priors,
        class_count: spec.objects.len() + 1,
        class_names,
        feature_dim: fd,
        init_points,
        text_queries,
    };
    ds.validate()?;
    Ok((ds, gt))
}

fn sample_init_points(spec: &SyntheticSceneSpec, cameras: &[Camera], views: &[(&Image, &Image)], rng: &mut ChaCha8Rng) -> Vec<InitPoint> {
    let mut out = Vec::with_capacity(spec.init_points);
    let jitter = Normal::new(0.0, spec.init_noise.max(0.0)).unwrap();
    let mut attempts = 0;
    while out.len() < spec.init_points && attempts < spec.init_points * 50 {
        attempts += 1;
        let v = rng.random_range(0..cameras.len());
        let (img, depth) = views[v];
        let cam = &cameras[v];
        let x = rng.random_range(0..cam.width);
        let y = rng.random_range(0..cam.height);
        let t = depth.data[y * cam.width + x];
        if t <= 0.0 {
            continue;
        }
        let p = cam.to_world(&(cam.ray_dir(x as f64, y as f64) * t));
        let noise = if spec.init_noise > 0.0 {
            Vector3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng))
        } else {
            Vector3::zeros()
        };
        let p = (p + noise).map(quantize_f32);
        let c = img.pixel(x, y);
        out.push(InitPoint {
            position: p,
            color: [c[0], c[1], c[2]],
        });
    }
    out
}

/// Writes the ground truth next to a dataset: `gt/mesh.ply` and per-object amodal masks
/// `gt/masks/{view:04}_{id}.png`.
pub fn save_ground_truth(gt: &GroundTruth, root: &std::path::Path) -> Result<()> {
    let dir = root.join("masks");
    std::fs::create_dir_all(&dir)?;
    gt.mesh.write_ply(&root.join("mesh.ply"))?;
    for (v, masks) in gt.object_masks.iter().enumerate() {
        for (id, m) in masks {
            crate::io::write_mask_png(&dir.join(format!("{v:04}_{id}.png")), m)?;
        }
    }
    Ok(())
}
