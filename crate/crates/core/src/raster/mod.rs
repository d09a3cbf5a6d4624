//! Differentiable splatting of color, alpha, depth, normal and feature channels.
//!
//! Splats are depth-sorted once per view and binned into square tiles. Every pixel walks its
//! tile's list front to back. The backward pass re-runs each pixel's forward walk to recover
//! the per-splat alphas and transmittances and then accumulates gradients back to front, so no
//! per-pixel contribution lists outlive a call.

mod blend;
mod project;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{GlsError, Result};
use crate::image::Image;
use crate::scene::Scene;

pub use project::{PrimitiveGrad, Splat2D};

/// Layout of the per-splat value vector that is alpha-blended.
pub mod channels {
    pub const COLOR: usize = 0;
    /// Constant 1, so the blended value is the accumulated alpha.
    pub const ALPHA: usize = 3;
    pub const DEPTH: usize = 4;
    pub const NORMAL: usize = 5;
    pub const FEATURE: usize = 8;

    pub const fn count(feature_dim: usize) -> usize {
        FEATURE + feature_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    /// Added to the diagonal of every projected covariance (px²).
    pub low_pass: f64,
    pub alpha_max: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Blending stops before transmittance would fall below this value.
    pub transmittance_min: f64,
    /// Lower bound on |cos θ| in the unbiased depth.
    pub cos_clamp: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            low_pass: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            cos_clamp: 0.1,
            tile_size: 16,
        }
    }
}

/// All rendered channels of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    /// Blended plane distance `D`.
    pub depth: Image,
    /// `D / max(|cos θ|, cos_clamp)`: distance along the pixel ray to the blended plane.
    pub unbiased_depth: Image,
    pub feature: Image,
    /// Camera-frame unit normals (zero where nothing was blended).
    pub normal: Image,
    pub ray_dirs: Image,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Camera-frame z-depth of the unbiased surface point for every pixel.
    pub fn unbiased_z_depth(&self) -> Image {
        let mut out = Image::zeros(self.width(), self.height(), 1);
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = self.unbiased_depth.data[i] * self.ray_dirs.data[3 * i + 2];
        }
        out
    }
}

/// Upstream gradients for every output channel. Channels that do not enter the objective
/// stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAdjoint {
    pub color: Image,
    pub alpha: Image,
    pub depth: Image,
    pub unbiased_depth: Image,
    pub feature: Image,
    pub normal: Image,
}

impl RenderAdjoint {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        RenderAdjoint {
            color: Image::zeros(width, height, 3),
            alpha: Image::zeros(width, height, 1),
            depth: Image::zeros(width, height, 1),
            unbiased_depth: Image::zeros(width, height, 1),
            feature: Image::zeros(width, height, feature_dim),
            normal: Image::zeros(width, height, 3),
        }
    }

    fn check(&self, width: usize, height: usize, feature_dim: usize) -> Result<()> {
        self.color.ensure_shape(width, height, 3, "color adjoint")?;
        self.alpha.ensure_shape(width, height, 1, "alpha adjoint")?;
        self.depth.ensure_shape(width, height, 1, "depth adjoint")?;
        self.unbiased_depth
            .ensure_shape(width, height, 1, "unbiased depth adjoint")?;
        self.feature
            .ensure_shape(width, height, feature_dim, "feature adjoint")?;
        self.normal.ensure_shape(width, height, 3, "normal adjoint")?;
        Ok(())
    }

    /// Adds `other` scaled by `weight`.
    pub fn accumulate(&mut self, other: &RenderAdjoint, weight: f64) {
        let pairs = [
            (&mut self.color, &other.color),
            (&mut self.alpha, &other.alpha),
            (&mut self.depth, &other.depth),
            (&mut self.unbiased_depth, &other.unbiased_depth),
            (&mut self.feature, &other.feature),
            (&mut self.normal, &other.normal),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += weight * s;
            }
        }
    }
}

/// Gradients for every primitive of the scene plus the screen-space statistics used by
/// densification. Culled primitives carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrads {
    pub primitives: Vec<PrimitiveGrad>,
    /// Gradient with respect to the projected mean (pixels).
    pub mean2d: Vec<[f64; 2]>,
    /// Per-pixel absolute values of the mean gradient, summed over pixels.
    pub mean2d_abs: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub radii: Vec<f64>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardContext {
    pub(crate) settings: RenderSettings,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) stride: usize,
    pub(crate) splats: Vec<Splat2D>,
    pub(crate) values: Vec<f64>,
    pub(crate) tiles_x: usize,
    pub(crate) tile_lists: Vec<Vec<u32>>,
    pub(crate) raw: Vec<f64>,
    pub(crate) n_contrib: Vec<u32>,
    pub(crate) background: [f64; 3],
    /// Pixels whose unbiased depth hit the cosine clamp.
    pub(crate) cos_clamped: Vec<bool>,
}

impl ForwardContext {
    /// Splats that survived culling, front to back.
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    /// Identifies the piecewise-smooth branch of the forward pass; see the gradient tests.
    pub fn fingerprint(&self) -> u64 {
        blend::fingerprint(self)
    }
}

/// Projects every primitive; the result is sorted by view depth with index tie-break.
pub fn project_scene(scene: &Scene, camera: &Camera, settings: &RenderSettings) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| project::project(i, p, camera, scene.sh_degree, settings))
        .collect();
    splats.sort_by(|a, b| {
        a.view_depth
            .total_cmp(&b.view_depth)
            .then(a.index.cmp(&b.index))
    });
    splats
}

/// Projects a single primitive, `None` when culled.
pub fn project_gaussian(scene: &Scene, index: usize, camera: &Camera, settings: &RenderSettings) -> Option<Splat2D> {
    project::project(index, &scene.primitives[index], camera, scene.sh_degree, settings)
}

pub fn render(scene: &Scene, camera: &Camera) -> Result<RenderOutput> {
    Ok(render_with(scene, camera, &RenderSettings::default())?.0)
}

pub fn render_with(scene: &Scene, camera: &Camera, settings: &RenderSettings) -> Result<(RenderOutput, ForwardContext)> {
    camera.validate()?;
    let (width, height) = (camera.width, camera.height);
    let stride = channels::count(scene.feature_dim);
    let splats = project_scene(scene, camera, settings);

    let mut values = vec![0.0; splats.len() * stride];
    for (s, splat) in splats.iter().enumerate() {
        let v = &mut values[s * stride..(s + 1) * stride];
        v[channels::COLOR..channels::COLOR + 3].copy_from_slice(&splat.color);
        v[channels::ALPHA] = 1.0;
        v[channels::DEPTH] = splat.plane_distance;
        v[channels::NORMAL] = splat.normal_cam.x;
        v[channels::NORMAL + 1] = splat.normal_cam.y;
        v[channels::NORMAL + 2] = splat.normal_cam.z;
        v[channels::FEATURE..].copy_from_slice(&scene.primitives[splat.index].feature);
    }

    let ts = settings.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (s, splat) in splats.iter().enumerate() {
        let r = splat.cutoff_radius;
        let [u, v] = splat.mean2d;
        let x0 = (u - r).max(0.0).floor() as usize / ts;
        let x1 = ((u + r).min(width as f64 - 1.0).max(0.0).ceil() as usize / ts).min(tiles_x - 1);
        let y0 = (v - r).max(0.0).floor() as usize / ts;
        let y1 = ((v + r).min(height as f64 - 1.0).max(0.0).ceil() as usize / ts).min(tiles_y - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(s as u32);
            }
        }
    }

    let mut ctx = ForwardContext {
        settings: settings.clone(),
        width,
        height,
        stride,
        splats,
        values,
        tiles_x,
        tile_lists,
        raw: vec![0.0; width * height * stride],
        n_contrib: vec![0; width * height],
        background: scene.background,
        cos_clamped: Vec::new(),
    };
    blend::forward(&mut ctx);
    let output = finalize(&ctx, camera, scene.feature_dim);
    ctx.cos_clamped = (0..width * height)
        .map(|p| {
            let n = &output.normal.data[3 * p..3 * p + 3];
            let v = &output.ray_dirs.data[3 * p..3 * p + 3];
            (n[0] * v[0] + n[1] * v[1] + n[2] * v[2]).abs() <= settings.cos_clamp
        })
        .collect();
    Ok((output, ctx))
}

fn finalize(ctx: &ForwardContext, camera: &Camera, feature_dim: usize) -> RenderOutput {
    let (w, h, k) = (ctx.width, ctx.height, ctx.stride);
    let mut color = Image::zeros(w, h, 3);
    let mut alpha = Image::zeros(w, h, 1);
    let mut depth = Image::zeros(w, h, 1);
    let mut feature = Image::zeros(w, h, feature_dim);
    let mut normal = Image::zeros(w, h, 3);
    let mut ray_dirs = Image::zeros(w, h, 3);
    let bg = ctx.background;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let raw = &ctx.raw[p * k..(p + 1) * k];
            let a = raw[channels::ALPHA];
            for c in 0..3 {
                color.data[3 * p + c] = raw[channels::COLOR + c] + (1.0 - a) * bg[c];
            }
            alpha.data[p] = a;
            depth.data[p] = raw[channels::DEPTH];
            let n = Vector3::new(raw[channels::NORMAL], raw[channels::NORMAL + 1], raw[channels::NORMAL + 2]);
            let norm = n.norm();
            if norm > NORMAL_EPS {
                let n = n / norm;
                normal.data[3 * p..3 * p + 3].copy_from_slice(n.as_slice());
            }
            feature.data[p * feature_dim..(p + 1) * feature_dim]
                .copy_from_slice(&raw[channels::FEATURE..]);
            let ray = camera.ray_dir(x as f64, y as f64);
            ray_dirs.data[3 * p..3 * p + 3].copy_from_slice(ray.as_slice());
        }
    }
    let unbiased_depth = unbiased_depth(&depth, &normal, &ray_dirs, ctx.settings.cos_clamp);
    RenderOutput {
        color,
        alpha,
        depth,
        unbiased_depth,
        feature,
        normal,
        ray_dirs,
    }
}

const NORMAL_EPS: f64 = 1e-12;

/// `D / max(|n·v|, cos_clamp)` per pixel.
pub fn unbiased_depth(depth: &Image, normal: &Image, ray_dirs: &Image, cos_clamp: f64) -> Image {
    let mut out = Image::zeros(depth.width, depth.height, 1);
    for p in 0..depth.pixel_count() {
        let n = &normal.data[3 * p..3 * p + 3];
        let v = &ray_dirs.data[3 * p..3 * p + 3];
        let cos = (n[0] * v[0] + n[1] * v[1] + n[2] * v[2]).abs();
        out.data[p] = depth.data[p] / cos.max(cos_clamp);
    }
    out
}

/// Recomputes the forward pass and backpropagates `adjoint`.
pub fn render_backward(scene: &Scene, camera: &Camera, adjoint: &RenderAdjoint) -> Result<SceneGrads> {
    let (_, ctx) = render_with(scene, camera, &RenderSettings::default())?;
    backward(&ctx, scene, camera, adjoint)
}

/// Backpropagates `adjoint` through the forward pass recorded in `ctx`.
pub fn backward(ctx: &ForwardContext, scene: &Scene, camera: &Camera, adjoint: &RenderAdjoint) -> Result<SceneGrads> {
    adjoint.check(ctx.width, ctx.height, scene.feature_dim)?;
    if ctx.stride != channels::count(scene.feature_dim) {
        return Err(GlsError::InvalidParameter(
            "forward context does not belong to this scene".into(),
        ));
    }
    let raw_adjoint = finalize_backward(ctx, camera, adjoint, scene.feature_dim);
    let splat_adjoints = blend::backward(ctx, &raw_adjoint);

    let per_splat: Vec<PrimitiveGrad> = ctx
        .splats
        .par_iter()
        .zip(splat_adjoints.par_iter())
        .map(|(splat, adj)| {
            project::project_backward(splat, &scene.primitives[splat.index], camera, scene.sh_degree, &adj.0)
        })
        .collect();

    let n = scene.len();
    let mut grads = SceneGrads {
        primitives: scene
            .primitives
            .iter()
            .map(|p| PrimitiveGrad::zeros(p.sh_coeffs.len(), scene.feature_dim))
            .collect(),
        mean2d: vec![[0.0; 2]; n],
        mean2d_abs: vec![[0.0; 2]; n],
        visible: vec![false; n],
        radii: vec![0.0; n],
    };
    for ((splat, grad), (adj, abs)) in ctx.splats.iter().zip(per_splat).zip(splat_adjoints) {
        let i = splat.index;
        grads.primitives[i] = grad;
        grads.mean2d[i] = adj.mean2d;
        grads.mean2d_abs[i] = abs;
        grads.visible[i] = true;
        grads.radii[i] = splat.radius;
    }
    Ok(grads)
}

fn finalize_backward(ctx: &ForwardContext, camera: &Camera, adjoint: &RenderAdjoint, feature_dim: usize) -> Vec<f64> {
    let (w, k) = (ctx.width, ctx.stride);
    let bg = ctx.background;
    let cos_clamp = ctx.settings.cos_clamp;
    let mut out = vec![0.0; ctx.width * ctx.height * k];
    out.par_chunks_mut(k).enumerate().for_each(|(p, g)| {
        let raw = &ctx.raw[p * k..(p + 1) * k];
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let gc = &adjoint.color.data[3 * p..3 * p + 3];
        g[channels::COLOR..channels::COLOR + 3].copy_from_slice(gc);
        g[channels::ALPHA] = adjoint.alpha.data[p] - (gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2]);

        let ray = camera.ray_dir(x, y);
        let n_raw = Vector3::new(raw[channels::NORMAL], raw[channels::NORMAL + 1], raw[channels::NORMAL + 2]);
        let norm = n_raw.norm();
        let n = if norm > NORMAL_EPS { n_raw / norm } else { Vector3::zeros() };
        let dot = n.dot(&ray);
        let cm = dot.abs().max(cos_clamp);
        let g_dp = adjoint.unbiased_depth.data[p];
        let d = raw[channels::DEPTH];
        g[channels::DEPTH] = adjoint.depth.data[p] + g_dp / cm;

        let mut g_n = Vector3::new(
            adjoint.normal.data[3 * p],
            adjoint.normal.data[3 * p + 1],
            adjoint.normal.data[3 * p + 2],
        );
        if dot.abs() > cos_clamp {
            g_n += ray * (-g_dp * d / (cm * cm) * dot.signum());
        }
        if norm > NORMAL_EPS {
            let g_raw_n = (g_n - n * n.dot(&g_n)) / norm;
            g[channels::NORMAL] = g_raw_n.x;
            g[channels::NORMAL + 1] = g_raw_n.y;
            g[channels::NORMAL + 2] = g_raw_n.z;
        }
        g[channels::FEATURE..].copy_from_slice(&adjoint.feature.data[p * feature_dim..(p + 1) * feature_dim]);
    });
    out
}
