//! Optimization loop: raw parameters, Adam, AbsGS-style densification, pruning, opacity
//! resets and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::container;
use crate::error::{GlsError, Result};
use crate::losses::{self, ClassifierHead, LossReport, ObjectiveConfig, ObjectiveInputs};
use crate::priors::Dataset;
use crate::raster::{self, RenderSettings, SceneGrads};
use crate::scene::{rotation_matrix, GaussianPrimitive, Scene};
use crate::sh;
use crate::spatial::KdTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub position_delay_mult: f64,
    pub position_delay_steps: usize,
    /// Length of the exponential decay; the iteration count when unset.
    pub position_max_steps: Option<usize>,
    /// Band-0 color coefficients.
    pub feature: f64,
    /// Higher sh bands.
    pub sh_rest: f64,
    pub opacity: f64,
    pub scaling: f64,
    pub rotation: f64,
    pub semantic: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 0.00016,
            position_final: 0.0000016,
            position_delay_mult: 0.01,
            position_delay_steps: 0,
            position_max_steps: None,
            feature: 0.0025,
            sh_rest: 0.0025 / 20.0,
            opacity: 0.05,
            scaling: 0.005,
            rotation: 0.001,
            semantic: 0.0025,
            mlp: 0.00005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    pub from: usize,
    pub until: usize,
    pub grad_threshold: f64,
    pub abs_grad_threshold: f64,
    pub abs_split_radii2d_threshold: f64,
    pub max_abs_split_points: usize,
    pub max_all_points: usize,
    pub percent_dense: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            interval: 100,
            from: 500,
            until: 15000,
            grad_threshold: 0.0006,
            abs_grad_threshold: 0.0008,
            abs_split_radii2d_threshold: 20.0,
            max_abs_split_points: 50000,
            max_all_points: 6_000_000,
            percent_dense: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpacityConfig {
    pub reset_interval: usize,
    pub cull_threshold: f64,
    /// Opacities are clamped down to this value at every reset.
    pub reset_value: f64,
}

impl Default for OpacityConfig {
    fn default() -> Self {
        OpacityConfig {
            reset_interval: 3000,
            cull_threshold: 0.05,
            reset_value: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub opacity: OpacityConfig,
    pub objective: ObjectiveConfig,
    pub use_sensor_depth: bool,
    pub sh_degree: usize,
    /// The active sh degree grows by one every this many iterations.
    pub sh_increase_interval: usize,
    pub init_opacity: f64,
    /// The normal, depth-refinement and smoothness terms switch on after this many
    /// iterations; 0 optimizes everything from the start.
    pub geometry_warmup: usize,
    pub background: [f64; 3],
    /// Intermediate checkpoints every N iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30000,
            seed: 0,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            opacity: OpacityConfig::default(),
            objective: ObjectiveConfig::default(),
            use_sensor_depth: false,
            sh_degree: 3,
            sh_increase_interval: 1000,
            init_opacity: 0.1,
            geometry_warmup: 0,
            background: [0.0; 3],
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for small scenes (tens of views, 64-128 px) trained for a few thousand
    /// iterations. The smoothness weight is lowered because per-pixel normal differences grow
    /// as the image shrinks; at 0.5 it outweighs the photometric term on curved surfaces.
    pub fn desk_scale(iterations: usize) -> Self {
        let mut c = TrainConfig { iterations, ..Default::default() };
        c.densify.from = (iterations / 4).clamp(1, 200);
        c.densify.until = (iterations * 3 / 4 + 1).max(c.densify.from + 1);
        c.densify.max_all_points = 10_000;
        c.opacity.reset_interval = iterations + 1;
        c.geometry_warmup = (iterations / 4).min(500);
        c.objective.weights.alpha_s = 0.05;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlsError::Config(m));
        self.objective.weights.validate()?;
        let d = &self.densify;
        if d.enabled {
            if d.interval == 0 || d.from == 0 || d.from >= d.until {
                return bad(format!("densification needs 0 < from < until and interval > 0 (from {}, until {})", d.from, d.until));
            }
            if !(d.grad_threshold > 0.0 && d.abs_grad_threshold > 0.0 && d.abs_split_radii2d_threshold > 0.0 && d.percent_dense > 0.0) {
                return bad("densification thresholds must be positive".into());
            }
        }
        let o = &self.opacity;
        if o.reset_interval == 0 || !(o.cull_threshold > 0.0 && o.cull_threshold < 1.0) || !(o.reset_value > 0.0 && o.reset_value < 1.0) {
            return bad("opacity reset interval and thresholds out of range".into());
        }
        let lr = &self.lr;
        let rates = [lr.position_init, lr.position_final, lr.feature, lr.sh_rest, lr.opacity, lr.scaling, lr.rotation, lr.semantic, lr.mlp];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || !(lr.position_final > 0.0 && lr.position_init > 0.0) {
            return bad("learning rates must be finite and non-negative (position rates positive)".into());
        }
        if self.sh_degree > sh::MAX_SH_DEGREE || self.sh_increase_interval == 0 {
            return bad(format!("sh degree must be at most {} with a positive increase interval", sh::MAX_SH_DEGREE));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("initial opacity must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// The position rate at `step` of `max_steps` (log-linear decay with an optional warm-up).
    pub fn position_lr(&self, step: usize) -> f64 {
        let lr = &self.lr;
        let max_steps = lr.position_max_steps.unwrap_or(self.iterations).max(1);
        let delay = if lr.position_delay_steps > 0 {
            let t = (step as f64 / lr.position_delay_steps as f64).clamp(0.0, 1.0);
            lr.position_delay_mult + (1.0 - lr.position_delay_mult) * (0.5 * std::f64::consts::PI * t).sin()
        } else {
            1.0
        };
        let t = (step as f64 / max_steps as f64).clamp(0.0, 1.0);
        delay * (lr.position_init.ln() * (1.0 - t) + lr.position_final.ln() * t).exp()
    }
}

// raw parameter layout per primitive
const CENTER: usize = 0;
const SCALE: usize = 3;
const ROT: usize = 6;
const OPACITY: usize = 10;
const SH: usize = 11;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Pre-activation parameters: log scales, logit opacities and unit quaternions.
#[derive(Clone, Debug, PartialEq)]
pub struct RawParams {
    pub sh_count: usize,
    pub feature_dim: usize,
    pub data: Vec<f64>,
}

impl RawParams {
    pub fn stride(&self) -> usize {
        SH + 3 * self.sh_count + self.feature_dim
    }

    fn feature_offset(&self) -> usize {
        SH + 3 * self.sh_count
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_scene(scene: &Scene) -> Self {
        let sh_count = sh::coeff_count(sh::MAX_SH_DEGREE);
        let mut raw = RawParams {
            sh_count,
            feature_dim: scene.feature_dim,
            data: Vec::new(),
        };
        for p in &scene.primitives {
            raw.push(p);
        }
        raw
    }

    fn push(&mut self, p: &GaussianPrimitive) {
        let start = self.data.len();
        self.data.resize(start + self.stride(), 0.0);
        let row = &mut self.data[start..];
        row[CENTER..CENTER + 3].copy_from_slice(p.center.as_slice());
        for k in 0..3 {
            row[SCALE + k] = p.scale[k].ln();
        }
        let q = p.rotation.normalize();
        row[ROT..ROT + 4].copy_from_slice(&[q.w, q.i, q.j, q.k]);
        row[OPACITY] = logit(p.opacity);
        for (k, c) in p.sh_coeffs.iter().take(self.sh_count).enumerate() {
            row[SH + 3 * k..SH + 3 * k + 3].copy_from_slice(c);
        }
        let f = SH + 3 * self.sh_count;
        row[f..f + p.feature.len()].copy_from_slice(&p.feature);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    fn primitive(&self, i: usize) -> GaussianPrimitive {
        let r = self.row(i);
        let q = Quaternion::new(r[ROT], r[ROT + 1], r[ROT + 2], r[ROT + 3]);
        GaussianPrimitive {
            center: Vector3::new(r[CENTER], r[CENTER + 1], r[CENTER + 2]),
            scale: Vector3::new(r[SCALE].exp(), r[SCALE + 1].exp(), r[SCALE + 2].exp()),
            rotation: q / q.norm(),
            opacity: sigmoid(r[OPACITY]),
            sh_coeffs: (0..self.sh_count).map(|k| [r[SH + 3 * k], r[SH + 3 * k + 1], r[SH + 3 * k + 2]]).collect(),
            feature: r[self.feature_offset()..].to_vec(),
        }
    }

    pub fn to_scene(&self, sh_degree: usize, background: [f64; 3]) -> Scene {
        let mut scene = Scene::new(self.feature_dim, sh_degree);
        scene.background = background;
        scene.primitives = (0..self.len()).map(|i| self.primitive(i)).collect();
        scene
    }

    /// Chain rule from activated-parameter gradients to raw ones, written row by row.
    fn gradient(&self, grads: &SceneGrads) -> Vec<f64> {
        let s = self.stride();
        let fo = self.feature_offset();
        let mut out = vec![0.0; self.data.len()];
        for (i, g) in grads.primitives.iter().enumerate() {
            let r = self.row(i);
            let o = &mut out[i * s..(i + 1) * s];
            o[CENTER..CENTER + 3].copy_from_slice(g.center.as_slice());
            for k in 0..3 {
                o[SCALE + k] = g.scale[k] * r[SCALE + k].exp();
            }
            let q = [r[ROT], r[ROT + 1], r[ROT + 2], r[ROT + 3]];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = (0..4).map(|k| q[k] * g.rotation[k]).sum::<f64>() / (n * n);
            for k in 0..4 {
                o[ROT + k] = (g.rotation[k] - q[k] * dot) / n;
            }
            let a = sigmoid(r[OPACITY]);
            o[OPACITY] = g.opacity * a * (1.0 - a);
            for (k, c) in g.sh_coeffs.iter().enumerate().take(self.sh_count) {
                o[SH + 3 * k..SH + 3 * k + 3].copy_from_slice(c);
            }
            o[fo..fo + g.feature.len()].copy_from_slice(&g.feature);
        }
        out
    }

    fn normalize_rotations(&mut self) {
        let s = self.stride();
        for row in self.data.chunks_mut(s) {
            let n = row[ROT..ROT + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row[ROT..ROT + 4].iter_mut().for_each(|v| *v /= n);
            } else {
                row[ROT..ROT + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    fn select(&self, keep: &[bool]) -> Vec<f64> {
        self.data
            .chunks(self.stride())
            .zip(keep)
            .filter(|(_, k)| **k)
            .flat_map(|(r, _)| r.iter().copied())
            .collect()
    }
}

/// Adam moments for a row-major parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// `lr(k)` is the rate of element `k`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.step += 1;
        let b1 = 1.0 - BETA1.powi(self.step as i32);
        let b2 = 1.0 - BETA2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
            let mhat = self.m[k] / b1;
            let vhat = self.v[k] / b2;
            params[k] -= lr(k) * mhat / (vhat.sqrt() + EPS);
        }
    }

    fn select_rows(&mut self, stride: usize, keep: &[bool]) {
        let pick = |x: &Vec<f64>| -> Vec<f64> {
            x.chunks(stride)
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(r, _)| r.iter().copied())
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.m.len());
        out.extend_from_slice(b"GLSA");
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"GLSA" {
            return Err(GlsError::Validation("optimizer state: missing GLSA magic".into()));
        }
        let step = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 16 * n {
            return Err(GlsError::Validation("optimizer state: size mismatch".into()));
        }
        let vals: Vec<f64> = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Adam {
            step,
            m: vals[..n].to_vec(),
            v: vals[n..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub view: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub primitives: usize,
    pub position_lr: f64,
    pub elapsed_s: f64,
}

pub struct TrainOutput {
    pub scene: Scene,
    pub head: ClassifierHead,
    pub log: Vec<LogRecord>,
    pub optimizer: Adam,
}

impl TrainOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss.total)
    }
}

/// Scene radius used to scale position rates and the dense-size threshold: 1.1 times the
/// largest camera distance from the camera centroid.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centroid = cameras.iter().map(|c| c.position()).sum::<Vector3<f64>>() / cameras.len() as f64;
    let r = cameras.iter().map(|c| (c.position() - centroid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Isotropic primitives at the initialization points, scaled by the root mean squared
/// distance to their three nearest neighbors.
pub fn init_scene(ds: &Dataset, config: &TrainConfig) -> Result<Scene> {
    if ds.init_points.is_empty() {
        return Err(GlsError::EmptyScene("dataset has no initialization points".into()));
    }
    let pts: Vec<[f64; 3]> = ds.init_points.iter().map(|p| [p.position.x, p.position.y, p.position.z]).collect();
    let tree = KdTree::new(&pts);
    let mut scene = Scene::new(ds.feature_dim, 0);
    scene.background = config.background;
    for (i, p) in ds.init_points.iter().enumerate() {
        let nn = tree.k_nearest(&pts[i], 4);
        let others: Vec<f64> = nn.iter().filter(|(j, _)| *j != i).take(3).map(|(_, d)| *d).collect();
        let d2 = if others.is_empty() {
            1e-4
        } else {
            (others.iter().sum::<f64>() / others.len() as f64).max(1e-7)
        };
        let s = d2.sqrt();
        scene.primitives.push(GaussianPrimitive::new(p.position, Vector3::new(s, s, s), config.init_opacity, p.color, sh::MAX_SH_DEGREE, ds.feature_dim));
    }
    Ok(scene)
}

/// Gradient statistics accumulated between densification events.
#[derive(Clone, Debug, Default)]
pub struct DensifyStats {
    pub grad: Vec<f64>,
    pub abs_grad: Vec<f64>,
    pub grad3d: Vec<Vector3<f64>>,
    pub count: Vec<u32>,
    pub max_radii: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad: vec![0.0; n],
            abs_grad: vec![0.0; n],
            grad3d: vec![Vector3::zeros(); n],
            count: vec![0; n],
            max_radii: vec![0.0; n],
        }
    }

    /// Screen gradients are measured in normalized device units (pixels times half the image
    /// size), the scale the thresholds are defined in.
    pub fn accumulate(&mut self, grads: &SceneGrads, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..grads.visible.len() {
            if !grads.visible[i] {
                continue;
            }
            let [gx, gy] = grads.mean2d[i];
            let [ax, ay] = grads.mean2d_abs[i];
            self.grad[i] += ((gx * sx).powi(2) + (gy * sy).powi(2)).sqrt();
            self.abs_grad[i] += ((ax * sx).powi(2) + (ay * sy).powi(2)).sqrt();
            self.grad3d[i] += grads.primitives[i].center;
            self.count[i] += 1;
            self.max_radii[i] = self.max_radii[i].max(grads.radii[i]);
        }
    }

    fn mean(&self, v: &[f64], i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            v[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large high-gradient primitives, then prunes transparent and
/// oversized ones. New rows start with zero optimizer moments.
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    params: &mut RawParams,
    adam: &mut Adam,
    stats: &DensifyStats,
    config: &TrainConfig,
    extent: f64,
    prune_large: bool,
    rng: &mut ChaCha8Rng,
) -> DensifyOutcome {
    let d = &config.densify;
    let n = params.len();
    let stride = params.stride();
    let mut out = DensifyOutcome::default();
    let dense = d.percent_dense * extent;
    let max_scale = |i: usize| params.row(i)[SCALE..SCALE + 3].iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)).exp();

    let mut new_rows: Vec<f64> = Vec::new();
    let mut remove = vec![false; n];
    if n < d.max_all_points {
        let mut split = vec![false; n];
        let mut abs_candidates: Vec<usize> = (0..n)
            .filter(|&i| stats.mean(&stats.abs_grad, i) >= d.abs_grad_threshold && stats.max_radii[i] > d.abs_split_radii2d_threshold)
            .collect();
        abs_candidates.sort_by(|&a, &b| {
            stats
                .mean(&stats.abs_grad, b)
                .total_cmp(&stats.mean(&stats.abs_grad, a))
                .then(a.cmp(&b))
        });
        abs_candidates.truncate(d.max_abs_split_points);
        for i in abs_candidates {
            split[i] = true;
        }
        for i in 0..n {
            let g = stats.mean(&stats.grad, i);
            if g >= d.grad_threshold && max_scale(i) > dense {
                split[i] = true;
            }
        }
        let mut clone: Vec<bool> = (0..n)
            .map(|i| !split[i] && stats.mean(&stats.grad, i) >= d.grad_threshold && max_scale(i) <= dense)
            .collect();
        // each clone or split adds one primitive; past the budget the largest gradients win
        let budget = d.max_all_points - n;
        let mut grow: Vec<usize> = (0..n).filter(|&i| split[i] || clone[i]).collect();
        if grow.len() > budget {
            let priority = |i: usize| stats.mean(&stats.grad, i).max(stats.mean(&stats.abs_grad, i));
            grow.sort_by(|&a, &b| priority(b).total_cmp(&priority(a)).then(a.cmp(&b)));
            for &i in &grow[budget..] {
                split[i] = false;
                clone[i] = false;
            }
        }
        for i in 0..n {
            if clone[i] {
                // the clone steps one standard deviation down the accumulated gradient
                let mut row = params.row(i).to_vec();
                let g3 = stats.grad3d[i];
                if g3.norm() > 0.0 {
                    let step = -g3.normalize() * max_scale(i);
                    for k in 0..3 {
                        row[CENTER + k] += step[k];
                    }
                }
                new_rows.extend(row);
                out.cloned += 1;
            }
        }
        for i in 0..n {
            if !split[i] {
                continue;
            }
            let row = params.row(i);
            let q = Quaternion::new(row[ROT], row[ROT + 1], row[ROT + 2], row[ROT + 3]);
            let r = rotation_matrix(&(q / q.norm()));
            let s = Vector3::new(row[SCALE].exp(), row[SCALE + 1].exp(), row[SCALE + 2].exp());
            for _ in 0..2 {
                let z = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
                let offset = r * s.component_mul(&z);
                let mut child = row.to_vec();
                for k in 0..3 {
                    child[CENTER + k] += offset[k];
                    child[SCALE + k] -= 1.6f64.ln();
                }
                new_rows.extend(child);
            }
            remove[i] = true;
            out.split += 1;
        }
    }

    for i in 0..n {
        let op = sigmoid(params.row(i)[OPACITY]);
        let too_large = prune_large && (stats.max_radii[i] > 20.0 || max_scale(i) > 0.1 * extent);
        if !remove[i] && (op < config.opacity.cull_threshold || too_large) {
            remove[i] = true;
            out.pruned += 1;
        }
    }
    let added_opacity_check: Vec<bool> = new_rows
        .chunks(stride)
        .map(|r| sigmoid(r[OPACITY]) >= config.opacity.cull_threshold)
        .collect();
    out.pruned += added_opacity_check.iter().filter(|k| !**k).count();

    let keep: Vec<bool> = remove.iter().map(|r| !r).collect();
    let mut data = params.select(&keep);
    adam.select_rows(stride, &keep);
    for (row, k) in new_rows.chunks(stride).zip(&added_opacity_check) {
        if *k {
            data.extend_from_slice(row);
            adam.m.extend(std::iter::repeat_n(0.0, stride));
            adam.v.extend(std::iter::repeat_n(0.0, stride));
        }
    }
    params.data = data;
    out
}

/// Clamps every opacity down to `value` and clears its optimizer moments.
pub fn reset_opacity(params: &mut RawParams, adam: &mut Adam, value: f64) {
    let s = params.stride();
    let cap = logit(value);
    for i in 0..params.len() {
        let k = i * s + OPACITY;
        params.data[k] = params.data[k].min(cap);
        adam.m[k] = 0.0;
        adam.v[k] = 0.0;
    }
}

fn lr_table(params: &RawParams, config: &TrainConfig, position_lr: f64) -> Vec<f64> {
    let lr = &config.lr;
    let mut t = vec![0.0; params.stride()];
    t[CENTER..CENTER + 3].fill(position_lr);
    t[SCALE..SCALE + 3].fill(lr.scaling);
    t[ROT..ROT + 4].fill(lr.rotation);
    t[OPACITY] = lr.opacity;
    t[SH..SH + 3].fill(lr.feature);
    t[SH + 3..params.feature_offset()].fill(lr.sh_rest);
    t[params.feature_offset()..].fill(lr.semantic);
    t
}

/// Paths written by a training run under its output directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.glsc")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("ckpt_{iteration:06}.glsc"))
    }
}

/// Writes `path` plus the head and optimizer sidecars next to it.
pub fn write_checkpoint(path: &Path, scene: &Scene, head: &ClassifierHead, adam: &Adam) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    container::write_scene(path, scene)?;
    container::write_head(&container::sidecar_path(path, "head.json"), head)?;
    std::fs::write(container::sidecar_path(path, "adam.bin"), adam.encode())?;
    Ok(())
}

/// Trains a scene on `ds`. With `out` set, the log, checkpoints and the final `scene.glsc`
/// are written there; on divergence the last finite state goes to `last_good.glsc`.
pub fn train(ds: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    config.validate()?;
    ds.validate()?;
    if ds.is_empty() {
        return Err(GlsError::Config("dataset has no views".into()));
    }
    let mut objective = config.objective.clone();
    objective.terms.sensor_depth = config.use_sensor_depth;
    if config.use_sensor_depth && !ds.has_sensor_depth() {
        return Err(GlsError::Config("sensor depth enabled but the dataset has no depth maps".into()));
    }
    let paths = out.map(|p| RunPaths { root: p.to_path_buf() });
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.root)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = init_scene(ds, config)?;
    let mut params = RawParams::from_scene(&initial);
    let mut adam = Adam::new(params.data.len());
    // a random head drags the features away from the clip targets before it has learned anything
    let mut head = ClassifierHead::zeros(ds.feature_dim, ds.class_count.max(1));
    let mut head_adam = Adam::new(head.weight.len() + head.bias.len());
    let extent = camera_extent(&ds.cameras);
    let settings = RenderSettings::default();
    let mut stats = DensifyStats::new(params.len());
    let mut log = Vec::new();
    let mut log_file = match &paths {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p.log())?)),
        None => None,
    };
    let start = Instant::now();

    if config.iterations == 0 {
        if let Some(p) = &paths {
            write_checkpoint(&p.scene(), &initial, &head, &adam)?;
        }
        return Ok(TrainOutput {
            scene: initial,
            head,
            log,
            optimizer: adam,
        });
    }

    let mut order: Vec<usize> = Vec::new();
    let mut prev_scene: Option<Scene> = None;
    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = order.pop().unwrap();
        let degree = ((it - 1) / config.sh_increase_interval).min(config.sh_degree);
        let scene = params.to_scene(degree, config.background);
        let cam = &ds.cameras[view];
        let pr = &ds.priors[view];

        let (render, ctx) = raster::render_with(&scene, cam, &settings)?;
        let inputs = ObjectiveInputs {
            target: &ds.images[view],
            normal_prior: Some(&pr.normal_prior),
            instance_mask: Some(&pr.instance_mask),
            feature_map: pr.feature_map.as_ref(),
            big_object_mask: Some(&pr.big_object_mask),
            sensor_depth: pr.sensor_depth.as_ref(),
        };
        let warm = it <= config.geometry_warmup;
        let mut step_objective = objective.clone();
        if warm {
            step_objective.terms.normal = false;
            step_objective.terms.depth = false;
            step_objective.terms.smooth = false;
        }
        let obj = match losses::evaluate(&render, cam, Some(&head), &inputs, &step_objective, None) {
            Ok(o) => o,
            Err(GlsError::NonFiniteLoss(term)) => {
                if let Some(p) = &paths {
                    let good = prev_scene.as_ref().unwrap_or(&initial);
                    write_checkpoint(&p.root.join("last_good.glsc"), good, &head, &adam)?;
                }
                return Err(GlsError::Divergence { term, iteration: it });
            }
            Err(e) => return Err(e),
        };
        let grads = raster::backward(&ctx, &scene, cam, &obj.adjoint)?;
        let densifying = config.densify.enabled && it < config.densify.until;
        if densifying {
            stats.accumulate(&grads, cam.width, cam.height);
        }

        let position_lr = config.position_lr(it - 1) * extent;
        let g = params.gradient(&grads);
        let table = lr_table(&params, config, position_lr);
        let stride = params.stride();
        adam.update(&mut params.data, &g, |k| table[k % stride]);
        params.normalize_rotations();
        if let Some(hg) = &obj.head_grad {
            let mut flat: Vec<f64> = head.weight.iter().chain(&head.bias).copied().collect();
            let gflat: Vec<f64> = hg.weight.iter().chain(&hg.bias).copied().collect();
            head_adam.update(&mut flat, &gflat, |_| config.lr.mlp);
            let nw = head.weight.len();
            head.weight.copy_from_slice(&flat[..nw]);
            head.bias.copy_from_slice(&flat[nw..]);
        }

        let record = LogRecord {
            iteration: it,
            view,
            loss: obj.report,
            primitives: params.len(),
            position_lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        log.push(record);

        if densifying {
            if it > config.densify.from && it % config.densify.interval == 0 {
                let prune_large = it > config.opacity.reset_interval;
                let outcome = densify_and_prune(&mut params, &mut adam, &stats, config, extent, prune_large, &mut rng);
                log::debug!("iteration {it}: {outcome:?}, {} primitives", params.len());
                stats = DensifyStats::new(params.len());
            }
            if it % config.opacity.reset_interval == 0 {
                reset_opacity(&mut params, &mut adam, config.opacity.reset_value);
            }
        }
        if params.is_empty() {
            return Err(GlsError::EmptyScene(format!("every primitive was pruned by iteration {it}")));
        }
        prev_scene = Some(scene);

        if let Some(p) = &paths {
            if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
                write_checkpoint(&p.checkpoint(it), &params.to_scene(degree, config.background), &head, &adam)?;
            }
        }
    }

    let degree = ((config.iterations - 1) / config.sh_increase_interval).min(config.sh_degree);
    let scene = params.to_scene(degree, config.background);
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(p) = &paths {
        write_checkpoint(&p.scene(), &scene, &head, &adam)?;
    }
    Ok(TrainOutput {
        scene,
        head,
        log,
        optimizer: adam,
    })
}
