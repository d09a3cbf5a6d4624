//! Training objectives and their gradients with respect to the rendered channels.
//!
//! Every image-space loss is a mean over its supported pixels.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{GlsError, Result};
use crate::geometry::{self, DepthNormals, RefinementMasks};
use crate::image::{Image, LabelMap, Mask};
use crate::raster::{RenderAdjoint, RenderOutput};
use crate::ssim;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_n: f64,
    pub alpha_m: f64,
    pub alpha_clip: f64,
    pub alpha_d: f64,
    pub alpha_s: f64,
    pub lambda_dssim: f64,
    /// Weight of the optional sensor-depth term.
    pub sensor_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_n: 0.07,
            alpha_m: 0.3,
            alpha_clip: 1.0,
            alpha_d: 0.01,
            alpha_s: 0.5,
            lambda_dssim: 0.2,
            sensor_depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_n", self.alpha_n),
            ("alpha_m", self.alpha_m),
            ("alpha_clip", self.alpha_clip),
            ("alpha_d", self.alpha_d),
            ("alpha_s", self.alpha_s),
            ("lambda_dssim", self.lambda_dssim),
            ("sensor_depth", self.sensor_depth),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(GlsError::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_dssim > 1.0 {
            return Err(GlsError::Config("lambda_dssim must be at most 1".into()));
        }
        Ok(())
    }
}

/// Which optional terms take part in the objective.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossTerms {
    pub normal: bool,
    pub mask: bool,
    pub clip: bool,
    pub depth: bool,
    pub smooth: bool,
    pub sensor_depth: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            normal: true,
            mask: true,
            clip: true,
            depth: true,
            smooth: true,
            sensor_depth: false,
        }
    }
}

/// Disabled terms are `None` and absent from the serialized form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sensor: Option<f64>,
    pub total: f64,
}

/// Weighted sum in the fixed order c, n, m, clip, d, s, sensor.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let terms = [
        ("l_c", Some(report.l_c), 1.0),
        ("l_n", report.l_n, weights.alpha_n),
        ("l_m", report.l_m, weights.alpha_m),
        ("l_clip", report.l_clip, weights.alpha_clip),
        ("l_d", report.l_d, weights.alpha_d),
        ("l_s", report.l_s, weights.alpha_s),
        ("l_sensor", report.l_sensor, weights.sensor_depth),
    ];
    let mut total = 0.0;
    for (name, value, weight) in terms {
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(GlsError::NonFiniteLoss(name.into()));
            }
            total += weight * v;
        }
    }
    Ok(total)
}

/// Linear map from rendered features to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub feature_dim: usize,
    pub classes: usize,
    /// `classes × feature_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        ClassifierHead {
            feature_dim,
            classes,
            weight: vec![0.0; feature_dim * classes],
            bias: vec![0.0; classes],
        }
    }

    /// Uniform initialization in ±1/√D_f.
    pub fn random(feature_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (feature_dim.max(1) as f64).sqrt();
        let mut head = Self::zeros(feature_dim, classes);
        head.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        head.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        head
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|s| {
                let row = &self.weight[s * self.feature_dim..(s + 1) * self.feature_dim];
                self.bias[s] + row.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let logits = self.logits(feature);
        argmax(&logits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.feature_dim * self.classes || self.bias.len() != self.classes {
            return Err(GlsError::Validation("classifier head has inconsistent shapes".into()));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(GlsError::Validation("classifier head has non-finite parameters".into()));
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `(1−λ)·mean L1 + λ·(1 − SSIM)` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda: f64) -> (f64, Image) {
    let n = rendered.data.len().max(1) as f64;
    let mut grad = Image::zeros(rendered.width, rendered.height, rendered.channels);
    let mut l1 = 0.0;
    for (i, (a, b)) in rendered.data.iter().zip(&target.data).enumerate() {
        let r = a - b;
        l1 += r.abs();
        grad.data[i] = (1.0 - lambda) * sign(r) / n;
    }
    let mut value = (1.0 - lambda) * l1 / n;
    if lambda > 0.0 {
        let (s, g) = ssim::ssim_with_grad(rendered, target);
        value += lambda * (1.0 - s);
        for (d, v) in grad.data.iter_mut().zip(&g.data) {
            *d -= lambda * v;
        }
    }
    (value, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn vec3(img: &Image, p: usize) -> Vector3<f64> {
    Vector3::from_column_slice(&img.data[3 * p..3 * p + 3])
}

/// Prior normals shorter than this are treated as unlabeled.
const PRIOR_DEFINED: f64 = 0.5;

fn prior_defined(prior: &Image, p: usize) -> bool {
    vec3(prior, p).norm() > PRIOR_DEFINED
}

/// Mean over pixels with both normals defined of `A·(1 − N_d·N̂)`; returns the value and the
/// gradients for `N_d` and `A`.
pub fn normal_prior_loss(nd: &DepthNormals, prior: &Image, alpha: &Image) -> (f64, Image, Image) {
    let (w, h) = (alpha.width, alpha.height);
    let mut g_nd = Image::zeros(w, h, 3);
    let mut g_a = Image::zeros(w, h, 1);
    let support: Vec<usize> = (0..w * h)
        .filter(|&p| nd.valid.data[p] && prior_defined(prior, p))
        .collect();
    if support.is_empty() {
        return (0.0, g_nd, g_a);
    }
    let n = support.len() as f64;
    let mut value = 0.0;
    for &p in &support {
        let prior_n = vec3(prior, p);
        let dot = vec3(&nd.normal, p).dot(&prior_n);
        let a = alpha.data[p];
        value += a * (1.0 - dot);
        g_a.data[p] = (1.0 - dot) / n;
        for c in 0..3 {
            g_nd.data[3 * p + c] = -a * prior_n[c] / n;
        }
    }
    (value / n, g_nd, g_a)
}

/// Mean cross-entropy over labeled pixels; returns the value and gradients for the rendered
/// features and the head.
pub fn mask_ce_loss(feature: &Image, head: &ClassifierHead, labels: &LabelMap) -> Result<(f64, Image, HeadGrad)> {
    let d = head.feature_dim;
    if feature.channels != d {
        return Err(GlsError::InvalidParameter(format!(
            "feature map has {} channels, head expects {d}",
            feature.channels
        )));
    }
    let mut g_f = Image::zeros(feature.width, feature.height, d);
    let mut hg = HeadGrad {
        weight: vec![0.0; head.weight.len()],
        bias: vec![0.0; head.classes],
    };
    if let Some(bad) = labels.data.iter().find(|&&id| id as usize >= head.classes) {
        return Err(GlsError::Validation(format!(
            "instance id {bad} is not below the class count {}",
            head.classes
        )));
    }
    let labeled: Vec<usize> = (0..labels.data.len()).filter(|&p| labels.data[p] != 0).collect();
    if labeled.is_empty() {
        return Ok((0.0, g_f, hg));
    }
    let n = labeled.len() as f64;
    let mut value = 0.0;
    for &p in &labeled {
        let f = &feature.data[p * d..(p + 1) * d];
        let logits = head.logits(f);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let target = labels.data[p] as usize;
        value += m + sum.ln() - logits[target];
        for s in 0..head.classes {
            let g = ((logits[s] - m).exp() / sum - if s == target { 1.0 } else { 0.0 }) / n;
            hg.bias[s] += g;
            let row = s * d;
            for k in 0..d {
                hg.weight[row + k] += g * f[k];
                g_f.data[p * d + k] += g * head.weight[row + k];
            }
        }
    }
    Ok((value / n, g_f, hg))
}

/// Mean absolute difference over pixels and channels.
pub fn clip_feature_loss(feature: &Image, target: &Image) -> (f64, Image) {
    let n = feature.data.len().max(1) as f64;
    let mut grad = Image::zeros(feature.width, feature.height, feature.channels);
    let mut value = 0.0;
    for (i, (a, b)) in feature.data.iter().zip(&target.data).enumerate() {
        value += (a - b).abs();
        grad.data[i] = sign(a - b) / n;
    }
    (value / n, grad)
}

/// Edge-aware normal smoothness on `big_objects`, using forward differences. Without a feature
/// map every edge weight is 1.
pub fn smoothness_loss(nd: &DepthNormals, feature_map: Option<&Image>, big_objects: &Mask) -> (f64, Image) {
    let (w, h) = (big_objects.width, big_objects.height);
    let mut grad = Image::zeros(w, h, 3);
    let support: Vec<usize> = (0..w * h)
        .filter(|&p| {
            let (x, y) = (p % w, p / w);
            x + 1 < w
                && y + 1 < h
                && big_objects.data[p]
                && nd.valid.data[p]
                && nd.valid.data[p + 1]
                && nd.valid.data[p + w]
        })
        .collect();
    if support.is_empty() {
        return (0.0, grad);
    }
    let n = support.len() as f64;
    let edge = |p: usize, q: usize| -> f64 {
        match feature_map {
            Some(f) => {
                let c = f.channels;
                let l1: f64 = (0..c).map(|k| (f.data[q * c + k] - f.data[p * c + k]).abs()).sum();
                (-l1).exp()
            }
            None => 1.0,
        }
    };
    let mut value = 0.0;
    for &p in &support {
        for q in [p + 1, p + w] {
            let wgt = edge(p, q);
            for c in 0..3 {
                let diff = nd.normal.data[3 * q + c] - nd.normal.data[3 * p + c];
                value += wgt * diff.abs();
                let g = wgt * sign(diff) / n;
                grad.data[3 * q + c] += g;
                grad.data[3 * p + c] -= g;
            }
        }
    }
    (value / n, grad)
}

/// Detached target for the depth refinement term.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTarget {
    pub refined: Image,
    pub gate: Mask,
    pub masks: RefinementMasks,
}

/// Case masks, refined depth and the `N_d·N̂ < gate_cos` gate for one rendered view.
pub fn depth_target(render: &RenderOutput, nd: &DepthNormals, prior: &Image, alpha_floor: f64, gate_cos: f64) -> DepthTarget {
    let masks = geometry::refinement_masks(&render.normal, prior, &render.ray_dirs, &render.alpha, alpha_floor);
    let refined = geometry::refined_depth(&render.depth, &render.unbiased_depth, &render.alpha, &masks);
    let (w, h) = (render.width(), render.height());
    let gate = Mask::from_fn(w, h, |x, y| {
        let p = y * w + x;
        masks.defined(p) && nd.valid.data[p] && vec3(&nd.normal, p).dot(&vec3(prior, p)) < gate_cos
    });
    DepthTarget { refined, gate, masks }
}

/// Mean over gated pixels of `1 − exp(−|D_p − D_r|)`.
pub fn depth_refinement_loss(unbiased_depth: &Image, target: &DepthTarget) -> (f64, Image) {
    let mut grad = Image::zeros(unbiased_depth.width, unbiased_depth.height, 1);
    let n = target.gate.count();
    if n == 0 {
        return (0.0, grad);
    }
    let n = n as f64;
    let mut value = 0.0;
    for p in 0..unbiased_depth.data.len() {
        if !target.gate.data[p] {
            continue;
        }
        let r = unbiased_depth.data[p] - target.refined.data[p];
        let e = (-r.abs()).exp();
        value += 1.0 - e;
        grad.data[p] = e * sign(r) / n;
    }
    (value / n, grad)
}

/// Mean `|D_p − sensor|` over pixels with positive sensor depth.
pub fn sensor_depth_loss(unbiased_depth: &Image, sensor: &Image) -> (f64, Image) {
    let mut grad = Image::zeros(unbiased_depth.width, unbiased_depth.height, 1);
    let valid: Vec<usize> = (0..sensor.data.len())
        .filter(|&p| sensor.data[p] > 0.0 && sensor.data[p].is_finite())
        .collect();
    if valid.is_empty() {
        return (0.0, grad);
    }
    let n = valid.len() as f64;
    let mut value = 0.0;
    for &p in &valid {
        let r = unbiased_depth.data[p] - sensor.data[p];
        value += r.abs();
        grad.data[p] = sign(r) / n;
    }
    (value / n, grad)
}

/// Per-view supervision.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub target: &'a Image,
    pub normal_prior: Option<&'a Image>,
    pub instance_mask: Option<&'a LabelMap>,
    pub feature_map: Option<&'a Image>,
    pub big_object_mask: Option<&'a Mask>,
    pub sensor_depth: Option<&'a Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub alpha_floor: f64,
    /// Pixels whose depth normal agrees with the prior at least this well are left out of the
    /// depth refinement term.
    pub depth_gate_cos: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            terms: LossTerms::default(),
            alpha_floor: 0.05,
            depth_gate_cos: 0.9,
        }
    }
}

pub struct Objective {
    pub report: LossReport,
    pub adjoint: RenderAdjoint,
    pub head_grad: Option<HeadGrad>,
    pub depth_normals: DepthNormals,
    pub depth_target: Option<DepthTarget>,
}

/// Evaluates every enabled term on one rendered view and assembles the render adjoint of the
/// weighted total. `fixed_target` replaces the depth target computed from `render`.
pub fn evaluate(
    render: &RenderOutput,
    camera: &Camera,
    head: Option<&ClassifierHead>,
    inputs: &ObjectiveInputs,
    config: &ObjectiveConfig,
    fixed_target: Option<&DepthTarget>,
) -> Result<Objective> {
    let (w, h) = (render.width(), render.height());
    let feature_dim = render.feature.channels;
    let wts = &config.weights;
    let terms = &config.terms;
    let mut adjoint = RenderAdjoint::zeros(w, h, feature_dim);
    let mut report = LossReport::default();

    inputs.target.ensure_shape(w, h, 3, "target image")?;
    let (l_c, g_c) = photometric_loss(&render.color, inputs.target, wts.lambda_dssim);
    report.l_c = l_c;
    adjoint.color = g_c;

    let nd = geometry::normal_from_depth(&render.unbiased_depth, camera);
    let mut g_nd = Image::zeros(w, h, 3);

    let prior = inputs.normal_prior;
    if let Some(prior) = prior {
        prior.ensure_shape(w, h, 3, "normal prior")?;
    }
    if let (true, Some(prior)) = (terms.normal, prior) {
        let (v, gn, ga) = normal_prior_loss(&nd, prior, &render.alpha);
        report.l_n = Some(v);
        axpy(&mut g_nd, wts.alpha_n, &gn);
        axpy(&mut adjoint.alpha, wts.alpha_n, &ga);
    }

    if let Some(fm) = inputs.feature_map {
        fm.ensure_shape(w, h, feature_dim, "feature map")?;
    }
    if let (true, Some(mo)) = (terms.smooth, inputs.big_object_mask) {
        let (v, gn) = smoothness_loss(&nd, inputs.feature_map, mo);
        report.l_s = Some(v);
        axpy(&mut g_nd, wts.alpha_s, &gn);
    }

    let mut head_grad = None;
    if let (true, Some(labels), Some(head)) = (terms.mask, inputs.instance_mask, head) {
        let (v, gf, hg) = mask_ce_loss(&render.feature, head, labels)?;
        report.l_m = Some(v);
        axpy(&mut adjoint.feature, wts.alpha_m, &gf);
        head_grad = Some(HeadGrad {
            weight: hg.weight.iter().map(|g| g * wts.alpha_m).collect(),
            bias: hg.bias.iter().map(|g| g * wts.alpha_m).collect(),
        });
    }

    if let (true, Some(fm)) = (terms.clip, inputs.feature_map) {
        let (v, gf) = clip_feature_loss(&render.feature, fm);
        report.l_clip = Some(v);
        axpy(&mut adjoint.feature, wts.alpha_clip, &gf);
    }

    let mut target_out = None;
    if let (true, Some(prior)) = (terms.depth, prior) {
        let target = match fixed_target {
            Some(t) => t.clone(),
            None => depth_target(render, &nd, prior, config.alpha_floor, config.depth_gate_cos),
        };
        let (v, gd) = depth_refinement_loss(&render.unbiased_depth, &target);
        report.l_d = Some(v);
        axpy(&mut adjoint.unbiased_depth, wts.alpha_d, &gd);
        target_out = Some(target);
    }

    if terms.sensor_depth {
        let sensor = inputs
            .sensor_depth
            .ok_or_else(|| GlsError::Config("sensor depth enabled but no depth map is available".into()))?;
        sensor.ensure_shape(w, h, 1, "sensor depth")?;
        let (v, gd) = sensor_depth_loss(&render.unbiased_depth, sensor);
        report.l_sensor = Some(v);
        axpy(&mut adjoint.unbiased_depth, wts.sensor_depth, &gd);
    }

    if g_nd.data.iter().any(|v| *v != 0.0) {
        let g_dp = geometry::normal_from_depth_backward(&render.unbiased_depth, camera, &nd, &g_nd);
        axpy(&mut adjoint.unbiased_depth, 1.0, &g_dp);
    }

    report.total = total_loss(&report, wts)?;
    Ok(Objective {
        report,
        adjoint,
        head_grad,
        depth_normals: nd,
        depth_target: target_out,
    })
}

fn axpy(dst: &mut Image, a: f64, src: &Image) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photometric_examples() {
        let a = Image::filled(12, 12, 3, 0.4);
        assert_eq!(photometric_loss(&a, &a, 0.2).0, 0.0);
        let b = Image::filled(12, 12, 3, 0.5);
        assert!((photometric_loss(&a, &b, 0.0).0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut labels = LabelMap::new(2, 1);
        labels.data = vec![1, 2];
        let feature = Image::from_vec(2, 1, 1, vec![1.0, -1.0]).unwrap();
        let uniform = ClassifierHead::zeros(1, 3);
        let (v, _, _) = mask_ce_loss(&feature, &uniform, &labels).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);

        let mut sharp = ClassifierHead::zeros(1, 3);
        sharp.weight = vec![0.0, 800.0, -800.0];
        let (v, _, _) = mask_ce_loss(&feature, &sharp, &labels).unwrap();
        assert!(v < 1e-12);

        labels.data = vec![0, 0];
        let (v, gf, hg) = mask_ce_loss(&feature, &sharp, &labels).unwrap();
        assert_eq!(v, 0.0);
        assert!(gf.data.iter().chain(&hg.weight).all(|g| *g == 0.0));

        labels.data = vec![3, 0];
        assert!(mask_ce_loss(&feature, &sharp, &labels).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut labels = LabelMap::new(3, 1);
        labels.data = vec![1, 2, 0];
        let feature = Image::from_vec(3, 1, 2, vec![0.3, -0.7, 1.1, 0.2, 0.5, 0.5]).unwrap();
        let mut head = ClassifierHead::zeros(2, 3);
        head.weight = vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.9];
        head.bias = vec![0.05, -0.1, 0.2];
        let (_, gf, hg) = mask_ce_loss(&feature, &head, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = head.clone();
            p.weight[i] += h;
            let mut m = head.clone();
            m.weight[i] -= h;
            let fd = (mask_ce_loss(&feature, &p, &labels).unwrap().0 - mask_ce_loss(&feature, &m, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - hg.weight[i]).abs() < 1e-8);
        }
        for i in 0..6 {
            let mut p = feature.clone();
            p.data[i] += h;
            let mut m = feature.clone();
            m.data[i] -= h;
            let fd = (mask_ce_loss(&p, &head, &labels).unwrap().0 - mask_ce_loss(&m, &head, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - gf.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn clip_examples() {
        let f = Image::filled(4, 4, 2, 0.5);
        assert_eq!(clip_feature_loss(&f, &f).0, 0.0);
        assert_eq!(clip_feature_loss(&f, &Image::zeros(4, 4, 2)).0, 0.5);
    }

    #[test]
    fn depth_refinement_residual_ln2() {
        let dp = Image::from_vec(2, 1, 1, vec![1.0 + 2f64.ln(), 5.0]).unwrap();
        let mut gate = Mask::new(2, 1);
        gate.data[0] = true;
        let empty = Mask::new(2, 1);
        let target = DepthTarget {
            refined: Image::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap(),
            gate,
            masks: RefinementMasks {
                m1: empty.clone(),
                m2: empty.clone(),
                m3: empty,
                cos_alpha: Image::zeros(2, 1, 1),
            },
        };
        assert!((depth_refinement_loss(&dp, &target).0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sensor_examples() {
        let dp = Image::filled(3, 3, 1, 2.0);
        assert_eq!(sensor_depth_loss(&dp, &dp).0, 0.0);
        let s = Image::filled(3, 3, 1, 2.05);
        assert!((sensor_depth_loss(&dp, &s).0 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let mut r = LossReport::default();
        assert_eq!(total_loss(&r, &w).unwrap(), 0.0);
        r.l_c = 1.0;
        assert_eq!(total_loss(&r, &w).unwrap(), 1.0);
        r.l_c = 0.0;
        r.l_n = Some(1.0);
        assert_eq!(total_loss(&r, &w).unwrap(), 0.07);
        r.l_s = Some(f64::NAN);
        match total_loss(&r, &w) {
            Err(GlsError::NonFiniteLoss(t)) => assert_eq!(t, "l_s"),
            other => panic!("{other:?}"),
        }
    }
}
