#![allow(dead_code)]

use gls_core::raster::PrimitiveGrad;
use gls_core::{Camera, GaussianPrimitive, Image, Scene};
use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_camera(size: usize) -> Camera {
    let f = size as f64 * 1.1;
    Camera::look_at(
        Vector3::new(0.3, -2.6, 1.2),
        Vector3::zeros(),
        Vector3::z(),
        f,
        f,
        size,
        size,
        0.05,
        50.0,
    )
    .unwrap()
}

/// Random splats in front of `small_camera` with opacities kept below the alpha clamp.
pub fn random_scene(rng: &mut impl Rng, count: usize, sh_degree: usize, feature_dim: usize) -> Scene {
    let mut scene = Scene::new(feature_dim, sh_degree);
    scene.background = [0.2, 0.4, 0.6];
    for _ in 0..count {
        let center = Vector3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        );
        let scale = Vector3::new(
            rng.random_range(0.08..0.35),
            rng.random_range(0.08..0.35),
            rng.random_range(0.02..0.3),
        );
        let mut p = GaussianPrimitive::new(center, scale, rng.random_range(0.15..0.75), [0.5; 3], sh_degree, feature_dim);
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        p.rotation = q / q.norm();
        for c in p.sh_coeffs.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        for f in p.feature.iter_mut() {
            *f = rng.random_range(-1.0..1.0);
        }
        scene.primitives.push(p);
    }
    scene
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    let data = (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::from_vec(w, h, c, data).unwrap()
}

pub fn param_count(p: &GaussianPrimitive) -> usize {
    11 + 3 * p.sh_coeffs.len() + p.feature.len()
}

pub fn param_name(p: &GaussianPrimitive, slot: usize) -> String {
    let sh_end = 11 + 3 * p.sh_coeffs.len();
    match slot {
        0..=2 => format!("center[{slot}]"),
        3..=5 => format!("scale[{}]", slot - 3),
        6..=9 => format!("rotation[{}]", slot - 6),
        10 => "opacity".into(),
        s if s < sh_end => format!("sh[{}][{}]", (s - 11) / 3, (s - 11) % 3),
        s => format!("feature[{}]", s - sh_end),
    }
}

/// Mutable access to parameter `slot` of a primitive (raw quaternion components, post-sigmoid
/// opacity).
pub fn param_mut(p: &mut GaussianPrimitive, slot: usize) -> &mut f64 {
    let sh_end = 11 + 3 * p.sh_coeffs.len();
    match slot {
        0..=2 => &mut p.center[slot],
        3..=5 => &mut p.scale[slot - 3],
        6 => &mut p.rotation.coords[3],
        7 => &mut p.rotation.coords[0],
        8 => &mut p.rotation.coords[1],
        9 => &mut p.rotation.coords[2],
        10 => &mut p.opacity,
        s if s < sh_end => &mut p.sh_coeffs[(s - 11) / 3][(s - 11) % 3],
        s => &mut p.feature[s - sh_end],
    }
}

pub fn grad_value(g: &PrimitiveGrad, slot: usize) -> f64 {
    let sh_end = 11 + 3 * g.sh_coeffs.len();
    match slot {
        0..=2 => g.center[slot],
        3..=5 => g.scale[slot - 3],
        6..=9 => g.rotation[slot - 6],
        10 => g.opacity,
        s if s < sh_end => g.sh_coeffs[(s - 11) / 3][(s - 11) % 3],
        s => g.feature[s - sh_end],
    }
}

/// Relative error with the larger magnitude as denominator; both-tiny pairs count as equal.
pub fn rel_err(a: f64, b: f64, tiny: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < tiny {
        0.0
    } else {
        (a - b).abs() / m
    }
}

#[derive(Debug, Default)]
pub struct GradStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradStats {
    pub fn merge(&mut self, other: GradStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

pub const GRAD_TOL: f64 = 1e-4;

/// Compares the analytic gradient of `value` (whose render adjoint is `adj`) with central
/// differences over every primitive parameter. Perturbations that change a discrete choice of
/// the forward pass are skipped.
pub fn gradcheck(
    scene: &Scene,
    cam: &Camera,
    adj: &gls_core::raster::RenderAdjoint,
    value: impl Fn(&gls_core::raster::RenderOutput) -> f64,
) -> GradStats {
    use gls_core::raster::{self, RenderSettings};
    let settings = RenderSettings::default();
    let (_, ctx) = raster::render_with(scene, cam, &settings).unwrap();
    let base_fp = ctx.fingerprint();
    let grads = raster::backward(&ctx, scene, cam, adj).unwrap();
    let h = 1e-6;
    let mut stats = GradStats::default();
    for i in 0..scene.len() {
        for slot in 0..param_count(&scene.primitives[i]) {
            let eval = |delta: f64| {
                let mut s = scene.clone();
                *param_mut(&mut s.primitives[i], slot) += delta;
                let (out, ctx) = raster::render_with(&s, cam, &settings).unwrap();
                (value(&out), ctx.fingerprint())
            };
            let (fp, fpp) = eval(h);
            let (fm, fpm) = eval(-h);
            if fpp != base_fp || fpm != base_fp {
                stats.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            // A kink inside [-h, h] (an L1 residual crossing zero) shows up as step-size
            // dependence of the central difference.
            let (fph, _) = eval(h / 2.0);
            let (fmh, _) = eval(-h / 2.0);
            let fd_half = (fph - fmh) / h;
            if rel_err(fd, fd_half, 1e-6) > 1e-5 {
                stats.skipped += 1;
                continue;
            }
            let an = grad_value(&grads.primitives[i], slot);
            // differences of magnitude below the cancellation noise of fp - fm carry no signal
            let noise = 100.0 * f64::EPSILON * fp.abs().max(fm.abs()) / h;
            let e = (an - fd).abs() / (an.abs().max(fd.abs()) + noise / GRAD_TOL);
            if e >= GRAD_TOL {
                stats.failures.push(format!(
                    "primitive {i} {}: analytic {an:.6e} vs fd {fd:.6e}",
                    param_name(&scene.primitives[i], slot)
                ));
            }
            stats.worst = stats.worst.max(e);
            stats.checked += 1;
        }
    }
    stats
}

fn weighted_sum(img: &Image, w: &Image) -> f64 {
    img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

/// A random linear functional over every rendered channel, and its adjoint.
pub fn random_linear_functional(rng: &mut impl Rng, w: usize, h: usize, feature_dim: usize) -> gls_core::raster::RenderAdjoint {
    gls_core::raster::RenderAdjoint {
        color: random_image(rng, w, h, 3),
        alpha: random_image(rng, w, h, 1),
        depth: random_image(rng, w, h, 1),
        unbiased_depth: random_image(rng, w, h, 1),
        feature: random_image(rng, w, h, feature_dim),
        normal: random_image(rng, w, h, 3),
    }
}

pub fn apply_linear(out: &gls_core::raster::RenderOutput, adj: &gls_core::raster::RenderAdjoint) -> f64 {
    weighted_sum(&out.color, &adj.color)
        + weighted_sum(&out.alpha, &adj.alpha)
        + weighted_sum(&out.depth, &adj.depth)
        + weighted_sum(&out.unbiased_depth, &adj.unbiased_depth)
        + weighted_sum(&out.feature, &adj.feature)
        + weighted_sum(&out.normal, &adj.normal)
}

/// One adjoint per channel, each the all-ones "sum of the channel" functional.
pub fn channel_sum_adjoints(w: usize, h: usize, feature_dim: usize) -> Vec<(&'static str, gls_core::raster::RenderAdjoint)> {
    use gls_core::raster::RenderAdjoint;
    let z = || RenderAdjoint::zeros(w, h, feature_dim);
    let mut out = Vec::new();
    let mut a = z();
    a.color = Image::filled(w, h, 3, 1.0);
    out.push(("color", a));
    let mut a = z();
    a.alpha = Image::filled(w, h, 1, 1.0);
    out.push(("alpha", a));
    let mut a = z();
    a.depth = Image::filled(w, h, 1, 1.0);
    out.push(("depth", a));
    let mut a = z();
    a.unbiased_depth = Image::filled(w, h, 1, 1.0);
    out.push(("unbiased_depth", a));
    let mut a = z();
    a.feature = Image::filled(w, h, feature_dim, 1.0);
    out.push(("feature", a));
    let mut a = z();
    a.normal = Image::filled(w, h, 3, 1.0);
    out.push(("normal", a));
    out
}

pub struct LossFixture {
    pub target: Image,
    pub normal_prior: Image,
    pub labels: gls_core::LabelMap,
    pub feature_map: Image,
    pub big_objects: gls_core::Mask,
    pub head: gls_core::losses::ClassifierHead,
}

impl LossFixture {
    pub fn random(rng: &mut impl Rng, w: usize, h: usize, feature_dim: usize, classes: usize) -> Self {
        let mut normal_prior = Image::zeros(w, h, 3);
        for p in 0..w * h {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..-0.2),
            )
            .normalize();
            normal_prior.data[3 * p..3 * p + 3].copy_from_slice(v.as_slice());
        }
        let mut labels = gls_core::LabelMap::new(w, h);
        labels.data.iter_mut().for_each(|l| *l = rng.random_range(0..classes as u16));
        let target = Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let feature_map = random_image(rng, w, h, feature_dim);
        let big_objects = gls_core::Mask::from_fn(w, h, |_, _| rng.random_bool(0.7));
        let head = gls_core::losses::ClassifierHead::random(feature_dim, classes, rng);
        LossFixture {
            target,
            normal_prior,
            labels,
            feature_map,
            big_objects,
            head,
        }
    }

    pub fn inputs(&self) -> gls_core::losses::ObjectiveInputs<'_> {
        gls_core::losses::ObjectiveInputs {
            target: &self.target,
            normal_prior: Some(&self.normal_prior),
            instance_mask: Some(&self.labels),
            feature_map: Some(&self.feature_map),
            big_object_mask: Some(&self.big_objects),
            sensor_depth: None,
        }
    }
}

/// Objective configurations that isolate each loss term (the photometric term is always on).
pub fn single_term_configs() -> Vec<(&'static str, gls_core::losses::ObjectiveConfig)> {
    use gls_core::losses::{LossTerms, LossWeights, ObjectiveConfig};
    let none = LossTerms {
        normal: false,
        mask: false,
        clip: false,
        depth: false,
        smooth: false,
        sensor_depth: false,
    };
    let unit = LossWeights {
        alpha_n: 1.0,
        alpha_m: 1.0,
        alpha_clip: 1.0,
        alpha_d: 1.0,
        alpha_s: 1.0,
        lambda_dssim: 0.2,
        sensor_depth: 1.0,
    };
    let with = |terms: LossTerms| ObjectiveConfig {
        weights: unit.clone(),
        terms,
        ..ObjectiveConfig::default()
    };
    vec![
        ("l_c", with(none.clone())),
        ("l_n", with(LossTerms { normal: true, ..none.clone() })),
        ("l_m", with(LossTerms { mask: true, ..none.clone() })),
        ("l_clip", with(LossTerms { clip: true, ..none.clone() })),
        ("l_s", with(LossTerms { smooth: true, ..none.clone() })),
        ("l_d", with(LossTerms { depth: true, ..none.clone() })),
    ]
}

/// Gradient check of one objective configuration through the rasterizer; the depth target is
/// held at its base value, as it is detached.
pub fn loss_gradcheck(scene: &Scene, cam: &Camera, fixture: &LossFixture, config: &gls_core::losses::ObjectiveConfig) -> GradStats {
    use gls_core::losses;
    use gls_core::raster;
    let base = raster::render(scene, cam).unwrap();
    let inputs = fixture.inputs();
    let obj = losses::evaluate(&base, cam, Some(&fixture.head), &inputs, config, None).unwrap();
    let target = obj.depth_target.clone();
    gradcheck(scene, cam, &obj.adjoint, |out| {
        losses::evaluate(out, cam, Some(&fixture.head), &inputs, config, target.as_ref())
            .unwrap()
            .report
            .total
    })
}
