mod common;

use common::*;
use gls_core::raster::{self, RenderAdjoint, RenderSettings};
use gls_core::{Camera, GaussianPrimitive, Image, Scene};
use nalgebra::{Matrix3, Vector3};

fn axis_camera(size: usize) -> Camera {
    Camera {
        fx: 100.0,
        fy: 100.0,
        cx: (size as f64 - 1.0) / 2.0,
        cy: (size as f64 - 1.0) / 2.0,
        width: size,
        height: size,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        near: 0.01,
        far: 100.0,
    }
}

#[test]
fn empty_scene_shows_background() {
    let mut scene = Scene::new(2, 0);
    scene.background = [0.1, 0.2, 0.3];
    let out = raster::render(&scene, &axis_camera(9)).unwrap();
    assert!(out.alpha.data.iter().all(|a| *a == 0.0));
    for p in 0..81 {
        assert_eq!(&out.color.data[3 * p..3 * p + 3], &[0.1, 0.2, 0.3]);
    }
}

#[test]
fn single_splat_at_its_mean() {
    let mut scene = Scene::new(2, 0);
    scene.background = [0.0, 0.0, 1.0];
    let mut p = GaussianPrimitive::new(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, 0.1, 0.01), 0.9, [0.8, 0.4, 0.2], 0, 2);
    p.feature = vec![1.0, -2.0];
    scene.primitives.push(p);
    let out = raster::render(&scene, &axis_camera(21)).unwrap();
    let c = out.color.pixel(10, 10);
    // sh_to_color round trip of rgb_to_dc is exact up to rounding
    assert!((out.alpha.get(10, 10, 0) - 0.9).abs() < 1e-12);
    assert!((c[0] - 0.9 * 0.8).abs() < 1e-9);
    assert!((c[2] - (0.9 * 0.2 + 0.1)).abs() < 1e-9);
    assert!((out.depth.get(10, 10, 0) - 0.9 * 2.0).abs() < 1e-12);
    assert!((out.feature.get(10, 10, 1) + 0.9 * 2.0).abs() < 1e-12);
    assert!((out.normal.get(10, 10, 2) + 1.0).abs() < 1e-12);
}

#[test]
fn two_coincident_splats_blend_to_three_quarters() {
    let mut scene = Scene::new(1, 0);
    for _ in 0..2 {
        let mut p = GaussianPrimitive::new(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, 0.1, 0.01), 0.5, [0.5; 3], 0, 1);
        p.feature = vec![2.0];
        scene.primitives.push(p);
    }
    let out = raster::render(&scene, &axis_camera(21)).unwrap();
    assert!((out.feature.get(10, 10, 0) - 0.75 * 2.0).abs() < 1e-12);
    assert!((out.alpha.get(10, 10, 0) - 0.75).abs() < 1e-12);
}

#[test]
fn unbiased_depth_examples() {
    let v = [0.0, 0.0, 1.0];
    let one = |x: f64| Image::from_vec(1, 1, 1, vec![x]).unwrap();
    let vec3 = |a: [f64; 3]| Image::from_vec(1, 1, 3, a.to_vec()).unwrap();
    let rays = vec3(v);
    let cases = [(0.0f64, 2.0), (60.0, 4.0), (89.9, 20.0)];
    for (deg, expected) in cases {
        let t = deg.to_radians();
        let n = vec3([t.sin(), 0.0, -t.cos()]);
        let dp = raster::unbiased_depth(&one(2.0), &n, &rays, 0.1);
        assert!((dp.data[0] - expected).abs() < 1e-9, "{deg}: {}", dp.data[0]);
    }
}

#[test]
fn zero_adjoint_gives_zero_gradient() {
    let mut r = rng(3);
    let scene = random_scene(&mut r, 8, 1, 3);
    let cam = small_camera(16);
    let grads = raster::render_backward(&scene, &cam, &RenderAdjoint::zeros(16, 16, 3)).unwrap();
    for g in &grads.primitives {
        for slot in 0..11 + 3 * g.sh_coeffs.len() + g.feature.len() {
            assert_eq!(grad_value(g, slot), 0.0);
        }
    }
}

#[test]
fn mismatched_adjoint_is_rejected() {
    let mut r = rng(4);
    let scene = random_scene(&mut r, 3, 0, 3);
    let cam = small_camera(16);
    assert!(raster::render_backward(&scene, &cam, &RenderAdjoint::zeros(8, 16, 3)).is_err());
    assert!(raster::render_backward(&scene, &cam, &RenderAdjoint::zeros(16, 16, 2)).is_err());
}

#[test]
fn depth_gradient_of_lone_splat_is_its_alpha() {
    let mut scene = Scene::new(1, 0);
    scene
        .primitives
        .push(GaussianPrimitive::new(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, 0.1, 0.01), 0.6, [0.5; 3], 0, 1));
    let cam = axis_camera(21);
    let mut adj = RenderAdjoint::zeros(21, 21, 1);
    adj.depth.set(10, 10, 0, 1.0);
    let grads = raster::render_backward(&scene, &cam, &adj).unwrap();
    assert!((grads.primitives[0].center.z - 0.6).abs() < 1e-9);
}

#[test]
fn permuting_primitives_is_bit_identical() {
    let mut r = rng(5);
    let scene = random_scene(&mut r, 15, 1, 3);
    let mut reversed = scene.clone();
    reversed.primitives.reverse();
    let cam = small_camera(24);
    let a = raster::render(&scene, &cam).unwrap();
    let b = raster::render(&reversed, &cam).unwrap();
    assert_eq!(a, b);
}

#[test]
fn feature_blending_is_linear() {
    let mut r = rng(6);
    let scene = random_scene(&mut r, 12, 0, 4);
    let mut doubled = scene.clone();
    for p in doubled.primitives.iter_mut() {
        p.feature.iter_mut().for_each(|f| *f *= 2.0);
    }
    let cam = small_camera(20);
    let a = raster::render(&scene, &cam).unwrap();
    let b = raster::render(&doubled, &cam).unwrap();
    for (x, y) in a.feature.data.iter().zip(&b.feature.data) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn adding_a_primitive_never_lowers_alpha() {
    let mut r = rng(7);
    for _ in 0..10 {
        let scene = random_scene(&mut r, 10, 0, 1);
        let cam = small_camera(16);
        let before = raster::render(&scene, &cam).unwrap();
        let mut more = scene.clone();
        more.primitives.push(random_scene(&mut r, 1, 0, 1).primitives.remove(0));
        let after = raster::render(&more, &cam).unwrap();
        for (a, b) in before.alpha.data.iter().zip(&after.alpha.data) {
            assert!(b + 1e-12 >= *a);
        }
    }
}

#[test]
fn alpha_range_and_unit_normals() {
    let mut r = rng(8);
    let scene = random_scene(&mut r, 20, 0, 1);
    let out = raster::render(&scene, &small_camera(32)).unwrap();
    for p in 0..32 * 32 {
        let a = out.alpha.data[p];
        assert!((0.0..=1.0 + 1e-12).contains(&a));
        if a > 0.5 {
            let n = &out.normal.data[3 * p..3 * p + 3];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn tile_size_does_not_change_the_image() {
    let mut r = rng(9);
    let scene = random_scene(&mut r, 20, 1, 2);
    let cam = small_camera(40);
    let (a, _) = raster::render_with(&scene, &cam, &RenderSettings::default()).unwrap();
    let settings = RenderSettings {
        tile_size: 7,
        ..RenderSettings::default()
    };
    let (b, _) = raster::render_with(&scene, &cam, &settings).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, 5 + seed as usize * 5, 1, 3);
        let cam = small_camera(16);
        let adj = random_linear_functional(&mut r, 16, 16, 3);
        let stats = gradcheck(&scene, &cam, &adj, |out| apply_linear(out, &adj));
        assert!(stats.failures.is_empty(), "seed {seed}: {:?}", stats.failures);
        assert!(stats.skipped * 20 < stats.checked, "too many branch changes: {stats:?}");
    }
}

#[test]
fn channel_sums_match_finite_differences() {
    let mut r = rng(11);
    let scene = random_scene(&mut r, 12, 1, 3);
    let cam = small_camera(16);
    for (name, adj) in channel_sum_adjoints(16, 16, 3) {
        let stats = gradcheck(&scene, &cam, &adj, |out| apply_linear(out, &adj));
        assert!(stats.failures.is_empty(), "{name}: {:?}", stats.failures);
    }
}
