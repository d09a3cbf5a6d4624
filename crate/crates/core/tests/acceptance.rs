//! End-to-end acceptance checks. Runs without the test harness so that every criterion prints
//! exactly one PASS/FAIL line; the process exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use gls_core::geometry::{self, DepthNormals, RefinementMasks};
use gls_core::losses::{self, ClassifierHead, DepthTarget, LossReport, ObjectiveConfig};
use gls_core::mesh::{self, MeshOptions, TriangleMesh, TsdfVolume};
use gls_core::metrics::{self, MeshMetrics};
use gls_core::query::{select_and_render, QueryEmbedding};
use gls_core::synthetic::{generate_synthetic, GroundTruth, NoiseSpec, SyntheticSceneSpec};
use gls_core::trainer::{train, RunPaths, TrainConfig, TrainOutput};
use gls_core::priors::Dataset;
use gls_core::{Image, LabelMap, Mask};
use nalgebra::Vector3;
use rand::Rng;

// tolerances and limits
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_TIME_LIMIT_S: f64 = 120.0;
const LOSS_ZERO_TOL: f64 = 1e-12;
const RECON_ITERATIONS: usize = 2000;
const RECON_TIME_LIMIT_S: f64 = 15.0 * 60.0;
const NC_MIN: f64 = 0.90;
const MIOU_MIN: f64 = 0.85;
const MBIOU_MIN: f64 = 0.6;
const QUERY_THRESHOLD: f64 = 0.6;
const PRIOR_NOISE: f64 = 0.1;
const SHADOW_AMPLITUDE: f64 = 0.5;
const NC_ABLATION_DROP: f64 = 0.02;
const MIOU_ABLATION_DROP: f64 = 0.05;
const DETERMINISM_ITERATIONS: usize = 300;
const DETERMINISM_LOSS_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut stats = GradStats::default();
    let cam = small_camera(16);
    for seed in 0..10u64 {
        let mut r = rng(9000 + seed);
        let scene = random_scene(&mut r, 11 + seed as usize, 1, 3);
        for (name, adj) in channel_sum_adjoints(16, 16, 3) {
            let s = gradcheck(&scene, &cam, &adj, |out| apply_linear(out, &adj));
            if !s.failures.is_empty() {
                return Err(format!("scene {seed} channel {name}: {}", s.failures[0]));
            }
            stats.merge(s);
        }
        let fixture = LossFixture::random(&mut r, 16, 16, 3, 4);
        for (name, config) in single_term_configs() {
            let s = loss_gradcheck(&scene, &cam, &fixture, &config);
            if !s.failures.is_empty() {
                return Err(format!("scene {seed} loss {name}: {}", s.failures[0]));
            }
            stats.merge(s);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        stats.worst < GRAD_REL_TOL && secs < GRAD_TIME_LIMIT_S && stats.skipped * 10 < stats.checked,
        format!(
            "worst relative error {:.2e} (tol {GRAD_REL_TOL:e}) over {} parameters, {} skipped at branch changes, {secs:.1} s (limit {GRAD_TIME_LIMIT_S} s)",
            stats.worst, stats.checked, stats.skipped
        ),
    )
}

// ---------------------------------------------------------------------------------------------

fn random_unit(r: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn refinement_case_suite() -> Outcome {
    let n = 1000;
    let mut r = rng(77);
    let mut normal = Image::zeros(n, 1, 3);
    let mut prior = Image::zeros(n, 1, 3);
    let mut rays = Image::zeros(n, 1, 3);
    let mut depth = Image::zeros(n, 1, 1);
    let mut unbiased = Image::zeros(n, 1, 1);
    let mut alpha = Image::zeros(n, 1, 1);
    for p in 0..n {
        let ray = {
            let v = random_unit(&mut r);
            Vector3::new(v.x * 0.6, v.y * 0.6, v.z.abs() + 0.3).normalize()
        };
        // the rendered normal faces the camera
        let mut nv = random_unit(&mut r);
        if nv.dot(&ray) > 0.0 {
            nv = -nv;
        }
        let prior_n = random_unit(&mut r);
        let d = r.random_range(0.5..5.0);
        let dp = d / nv.dot(&ray).abs().max(0.1);
        normal.data[3 * p..3 * p + 3].copy_from_slice(nv.as_slice());
        prior.data[3 * p..3 * p + 3].copy_from_slice(prior_n.as_slice());
        rays.data[3 * p..3 * p + 3].copy_from_slice(ray.as_slice());
        depth.data[p] = d;
        unbiased.data[p] = dp;
        alpha.data[p] = r.random_range(0.1..1.0);
    }
    let masks = geometry::refinement_masks(&normal, &prior, &rays, &alpha, 0.05);
    let refined = geometry::refined_depth(&depth, &unbiased, &alpha, &masks);
    let mut violations = Vec::new();
    let mut counts = [0usize; 3];
    for p in 0..n {
        let member = [masks.m1.data[p], masks.m2.data[p], masks.m3.data[p]];
        if member.iter().filter(|m| **m).count() != 1 {
            violations.push(format!("pixel {p} in {member:?}"));
            continue;
        }
        // independent classification from the angles themselves
        let nv = Vector3::from_column_slice(&normal.data[3 * p..3 * p + 3]);
        let ray = Vector3::from_column_slice(&rays.data[3 * p..3 * p + 3]);
        let pr = Vector3::from_column_slice(&prior.data[3 * p..3 * p + 3]);
        let theta_prime = nv.angle(&ray) - std::f64::consts::FRAC_PI_2;
        let cos_tp = theta_prime.cos();
        let perp = nv - ray * nv.dot(&ray);
        let cos_a = pr.dot(&perp) / perp.norm();
        let expected = if cos_a < 0.0 {
            1
        } else if cos_a > cos_tp && cos_tp > 0.0 {
            0
        } else {
            2
        };
        let near_boundary = cos_a.abs() < 1e-9 || (cos_a - cos_tp).abs() < 1e-9;
        let got = member.iter().position(|m| *m).unwrap();
        if got != expected && !near_boundary {
            violations.push(format!("pixel {p}: case m{} but angles give m{}", got + 1, expected + 1));
        }
        counts[got] += 1;
        let (d, dp, dr) = (depth.data[p], unbiased.data[p], refined.data[p]);
        let ok = match got {
            0 => d.min(dp) <= dr && dr <= d.max(dp),
            1 => dr == d,
            _ => dr == dp,
        };
        if !ok {
            violations.push(format!("pixel {p} m{}: D {d} D_p {dp} D_r {dr}", got + 1));
        }
    }
    check(
        violations.is_empty() && counts.iter().all(|c| *c > 0),
        format!(
            "{} violations over {n} triples (m1 {}, m2 {}, m3 {}){}",
            violations.len(),
            counts[0],
            counts[1],
            counts[2],
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let (w, h) = (16, 16);
    let mut r = rng(5);
    let mut fails = Vec::new();
    let mut zero = |name: &str, v: f64| {
        if !(v.abs() <= LOSS_ZERO_TOL) {
            fails.push(format!("{name} = {v:e} at its target"));
        }
    };

    let img = random_image(&mut r, w, h, 3).scaled(0.5);
    zero("L_c", losses::photometric_loss(&img, &img, 0.2).0);

    let cam = small_camera(w);
    let depth = Image::from_vec(w, h, 1, (0..w * h).map(|p| 2.0 + 0.01 * (p % w) as f64 + 0.02 * (p / w) as f64).collect()).unwrap();
    let nd = geometry::normal_from_depth(&depth, &cam);
    let alpha = Image::filled(w, h, 1, 0.9);
    zero("L_n", losses::normal_prior_loss(&nd, &nd.normal, &alpha).0);

    let classes = 3;
    let mut labels = LabelMap::new(w, h);
    labels.data.iter_mut().for_each(|l| *l = r.random_range(1..classes as u16));
    let mut feature = Image::zeros(w, h, classes);
    for p in 0..w * h {
        feature.data[p * classes + labels.data[p] as usize] = 1.0;
    }
    let mut head = ClassifierHead::zeros(classes, classes);
    for s in 0..classes {
        head.weight[s * classes + s] = 1000.0;
    }
    zero("L_m", losses::mask_ce_loss(&feature, &head, &labels).unwrap().0);

    let f = random_image(&mut r, w, h, 4);
    zero("L_clip", losses::clip_feature_loss(&f, &f).0);

    let flat = DepthNormals {
        normal: Image::from_vec(w, h, 3, (0..w * h).flat_map(|_| [0.0, 0.6, -0.8]).collect()).unwrap(),
        valid: Mask::from_fn(w, h, |_, _| true),
    };
    zero("L_s", losses::smoothness_loss(&flat, Some(&f), &Mask::from_fn(w, h, |_, _| true)).0);

    let all = Mask::from_fn(w, h, |_, _| true);
    let target = |refined: Image| DepthTarget {
        refined,
        gate: all.clone(),
        masks: RefinementMasks {
            m1: all.clone(),
            m2: Mask::new(w, h),
            m3: Mask::new(w, h),
            cos_alpha: Image::zeros(w, h, 1),
        },
    };
    zero("L_d", losses::depth_refinement_loss(&depth, &target(depth.clone())).0);

    let mut max_ld: f64 = 0.0;
    for _ in 0..1000 {
        let dp = Image::from_vec(w, h, 1, (0..w * h).map(|_| r.random_range(0.1..10.0)).collect()).unwrap();
        let dr = Image::from_vec(w, h, 1, (0..w * h).map(|_| r.random_range(0.1..30.0)).collect()).unwrap();
        max_ld = max_ld.max(losses::depth_refinement_loss(&dp, &target(dr)).0);
    }
    if !(max_ld < 1.0) {
        fails.push(format!("L_d reached {max_ld}"));
    }

    // full objective with default weights against the weighted sum written out
    let scene = random_scene(&mut r, 12, 0, 3);
    let fixture = LossFixture::random(&mut r, w, h, 3, 4);
    let render = gls_core::raster::render(&scene, &cam).unwrap();
    let config = ObjectiveConfig::default();
    let rep: LossReport = losses::evaluate(&render, &cam, Some(&fixture.head), &fixture.inputs(), &config, None).unwrap().report;
    let (Some(n), Some(m), Some(c), Some(d), Some(s)) = (rep.l_n, rep.l_m, rep.l_clip, rep.l_d, rep.l_s) else {
        return Err(format!("default objective left a term out: {rep:?}"));
    };
    let expected = rep.l_c + 0.07 * n + 0.3 * m + 1.0 * c + 0.01 * d + 0.5 * s;
    if rep.total != expected {
        fails.push(format!("total {} vs weighted sum {expected}", rep.total));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("six losses vanish at their targets (tol {LOSS_ZERO_TOL:e}), max L_d {max_ld:.6} < 1, total == weighted sum exactly")
        } else {
            fails.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------------------------

struct Run {
    ds: Dataset,
    gt: GroundTruth,
    out: TrainOutput,
    seconds: f64,
}

fn train_synthetic(spec: &SyntheticSceneSpec, configure: impl FnOnce(&mut TrainConfig)) -> Run {
    let start = Instant::now();
    let (ds, gt) = generate_synthetic(spec, 0).unwrap();
    let mut config = TrainConfig::desk_scale(RECON_ITERATIONS);
    configure(&mut config);
    let out = train(&ds, &config, None).unwrap();
    Run {
        ds,
        gt,
        out,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn mesh_quality(run: &Run) -> (MeshMetrics, f64) {
    let bounds = run.ds.init_bounds().unwrap();
    let voxel = (bounds.1 - bounds.0).norm() / 256.0;
    let options = MeshOptions {
        bounds: Some(bounds),
        voxel_size: Some(voxel),
        ..Default::default()
    };
    let mesh = mesh::extract_scene_mesh(&run.out.scene, &run.ds.cameras, Some(&run.out.head), &options).unwrap();
    let m = metrics::mesh_metrics(&mesh, &run.gt.mesh, metrics::DEFAULT_SAMPLES, metrics::DEFAULT_TAU, 0).unwrap();
    (m, voxel)
}

fn segmentation_quality(run: &Run) -> metrics::SegmentationScores {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (id, name) in &run.ds.class_names {
        if *id == 0 {
            continue;
        }
        let q = QueryEmbedding {
            name: name.clone(),
            vector: run.ds.text_queries[name].clone(),
        };
        let sel = select_and_render(&run.out.scene, &q, QUERY_THRESHOLD, &run.ds.cameras).unwrap();
        for (v, m) in sel.masks.into_iter().enumerate() {
            pred.push(m);
            gt.push(run.gt.object_masks[v][id].clone());
        }
    }
    metrics::miou_mbiou(&pred, &gt, metrics::DEFAULT_BOUNDARY_WIDTH).unwrap()
}

fn synthetic_reconstruction() -> Outcome {
    let run = train_synthetic(&SyntheticSceneSpec::default(), |_| {});
    let (m, voxel) = mesh_quality(&run);
    check(
        m.chamfer_l1 < 2.0 * voxel && m.normal_consistency > NC_MIN && run.seconds < RECON_TIME_LIMIT_S,
        format!(
            "{RECON_ITERATIONS} iterations: Chamfer-L1 {:.4} (limit 2·voxel = {:.4}), normal consistency {:.3} (min {NC_MIN}), {:.0} s (limit {RECON_TIME_LIMIT_S} s)",
            m.chamfer_l1,
            2.0 * voxel,
            m.normal_consistency,
            run.seconds
        ),
    )
}

fn noisy_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        noise: NoiseSpec::uniform(PRIOR_NOISE),
        ..Default::default()
    }
}

fn synthetic_segmentation() -> Outcome {
    let run = train_synthetic(&noisy_spec(), |_| {});
    let s = segmentation_quality(&run);
    check(
        s.miou > MIOU_MIN && s.mbiou > MBIOU_MIN,
        format!("threshold {QUERY_THRESHOLD}, prior noise {PRIOR_NOISE}: mIoU {:.3} (min {MIOU_MIN}), mBIoU {:.3} (min {MBIOU_MIN})", s.miou, s.mbiou),
    )
}

fn ablation_direction() -> Outcome {
    let spec = SyntheticSceneSpec {
        lighting_perturbation: SHADOW_AMPLITUDE,
        ..noisy_spec()
    };
    let full = train_synthetic(&spec, |_| {});
    let no_normal = train_synthetic(&spec, |c| c.objective.terms.normal = false);
    let no_clip = train_synthetic(&spec, |c| c.objective.terms.clip = false);
    let nc_full = mesh_quality(&full).0.normal_consistency;
    let nc_ablated = mesh_quality(&no_normal).0.normal_consistency;
    let miou_full = segmentation_quality(&full).miou;
    let miou_ablated = segmentation_quality(&no_clip).miou;
    check(
        nc_full - nc_ablated >= NC_ABLATION_DROP && miou_full - miou_ablated >= MIOU_ABLATION_DROP,
        format!(
            "no L_n: normal consistency {nc_full:.3} -> {nc_ablated:.3} (min drop {NC_ABLATION_DROP}); no L_clip: mIoU {miou_full:.3} -> {miou_ablated:.3} (min drop {MIOU_ABLATION_DROP})"
        ),
    )
}

// ---------------------------------------------------------------------------------------------

fn determinism() -> Outcome {
    let (ds, _) = generate_synthetic(&SyntheticSceneSpec::default(), 3).unwrap();
    let config = TrainConfig {
        seed: 11,
        ..TrainConfig::desk_scale(DETERMINISM_ITERATIONS)
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<TrainOutput> = dirs.iter().map(|d| train(&ds, &config, Some(d.path())).unwrap()).collect();
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(RunPaths { root: d.path().to_path_buf() }.scene()).unwrap())
        .collect();
    let (a, b) = (runs[0].final_loss().unwrap(), runs[1].final_loss().unwrap());
    let grew = runs[0].log.last().unwrap().primitives != runs[0].log[0].primitives;
    check(
        (a - b).abs() <= DETERMINISM_LOSS_TOL && bytes[0] == bytes[1] && grew,
        format!(
            "{DETERMINISM_ITERATIONS} iterations with densification: final loss difference {:e} (tol {DETERMINISM_LOSS_TOL:e}), checkpoints {} ({} bytes)",
            (a - b).abs(),
            if bytes[0] == bytes[1] { "bit-identical" } else { "differ" },
            bytes[0].len()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// brute-force references

fn brute_mesh_metrics(pred: &TriangleMesh, gt: &TriangleMesh, samples: usize, tau: f64, seed: u64) -> MeshMetrics {
    let (pp, pn) = metrics::sample_surface(pred, samples, seed).unwrap();
    let (gp, gn) = metrics::sample_surface(gt, samples, seed).unwrap();
    let nearest = |q: &[f64; 3], set: &[[f64; 3]]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, s) in set.iter().enumerate() {
            let d = ((q[0] - s[0]).powi(2) + (q[1] - s[1]).powi(2) + (q[2] - s[2]).powi(2)).sqrt();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let mut acc = 0.0;
    let mut nc_a = 0.0;
    let mut prec = 0.0;
    for (q, n) in pp.iter().zip(&pn) {
        let (j, d) = nearest(q, &gp);
        acc += d;
        nc_a += n.dot(&gn[j]).abs();
        prec += if d < tau { 1.0 } else { 0.0 };
    }
    let mut comp = 0.0;
    let mut nc_c = 0.0;
    let mut rec = 0.0;
    for (q, n) in gp.iter().zip(&gn) {
        let (j, d) = nearest(q, &pp);
        comp += d;
        nc_c += n.dot(&pn[j]).abs();
        rec += if d < tau { 1.0 } else { 0.0 };
    }
    let k = samples as f64;
    let (acc, comp, prec, rec) = (acc / k, comp / k, prec / k, rec / k);
    MeshMetrics {
        accuracy: acc,
        completion: comp,
        chamfer_l1: (acc + comp) / 2.0,
        normal_consistency: (nc_a / k + nc_c / k) / 2.0,
        precision: prec,
        recall: rec,
        f_score: if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 },
        tau,
    }
}

fn brute_psnr(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data.len() {
        se += (a.data[i] - b.data[i]).powi(2);
    }
    let mse = se / a.data.len() as f64;
    if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Direct 11×11 window sums, zero outside the image.
fn brute_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h, ch) = (a.width as isize, a.height as isize, a.channels);
    let mut g = [[0.0; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..ch {
        let at = |img: &Image, x: isize, y: isize| {
            if x < 0 || y < 0 || x >= w || y >= h {
                0.0
            } else {
                img.data[(y * w + x) as usize * ch + c]
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / norm;
                        let (px, py) = (x + j as isize - 5, y + i as isize - 5);
                        let (va, vb) = (at(a, px, py), at(b, px, py));
                        mx += wt * va;
                        my += wt * vb;
                        sxx += wt * va * va;
                        syy += wt * vb * vb;
                        sxy += wt * va * vb;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (w * h) as f64 / ch as f64
}

fn brute_band(m: &Mask, width: usize) -> Vec<bool> {
    let (w, h) = (m.width as isize, m.height as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && m.data[(y * w + x) as usize];
    let boundary: Vec<(isize, isize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| inside(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !inside(x + dx, y + dy)))
        .collect();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| inside(x, y) && boundary.iter().any(|&(bx, by)| (bx - x).abs().max((by - y).abs()) <= width as isize))
        .collect()
}

fn brute_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_blob_mask(r: &mut impl Rng, w: usize, h: usize) -> Mask {
    let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
    let (rx, ry) = (r.random_range(2.0..w as f64 / 2.0), r.random_range(2.0..h as f64 / 2.0));
    let noise = r.random_range(0.0..0.05);
    Mask::from_fn(w, h, |x, y| {
        let u = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
        (u < 1.0) != r.random_bool(noise)
    })
}

fn fixture_mesh(r: &mut impl Rng) -> TriangleMesh {
    let mut vol = TsdfVolume::new(Vector3::repeat(-1.0), Vector3::repeat(1.0), 0.1, 0.4, 0).unwrap();
    let c = Vector3::new(r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.2..0.2));
    let (rad, k) = (r.random_range(0.4..0.7), r.random_range(0.0..0.2));
    vol.fill_sdf(|p| (p - c).norm() - rad - k * (3.0 * p.x).sin());
    mesh::marching_cubes(&vol)
}

fn metric_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = rng(4242);
    for fixture in 0..5 {
        let (a, b) = (fixture_mesh(&mut r), fixture_mesh(&mut r));
        let got = metrics::mesh_metrics(&a, &b, 1500, 0.05, fixture).unwrap();
        let want = brute_mesh_metrics(&a, &b, 1500, 0.05, fixture);
        for (g, e) in [
            (got.accuracy, want.accuracy),
            (got.completion, want.completion),
            (got.chamfer_l1, want.chamfer_l1),
            (got.normal_consistency, want.normal_consistency),
            (got.precision, want.precision),
            (got.recall, want.recall),
            (got.f_score, want.f_score),
        ] {
            worst = worst.max((g - e).abs());
        }

        let (w, h) = (24 + fixture as usize * 3, 20 + fixture as usize * 2);
        let x = random_image(&mut r, w, h, 3).scaled(0.5);
        let y = Image::from_vec(w, h, 3, x.data.iter().map(|v| (v + r.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect()).unwrap();
        worst = worst.max((metrics::psnr(&x, &y).unwrap() - brute_psnr(&x, &y)).abs());
        worst = worst.max((metrics::ssim(&x, &y).unwrap() - brute_ssim(&x, &y)).abs());

        let pred: Vec<Mask> = (0..3).map(|_| random_blob_mask(&mut r, w, h)).collect();
        let gt: Vec<Mask> = (0..3).map(|_| random_blob_mask(&mut r, w, h)).collect();
        let seg = metrics::miou_mbiou(&pred, &gt, 3).unwrap();
        let miou = pred.iter().zip(&gt).map(|(p, g)| brute_iou(&p.data, &g.data)).sum::<f64>() / 3.0;
        let mbiou = pred.iter().zip(&gt).map(|(p, g)| brute_iou(&brute_band(p, 3), &brute_band(g, 3))).sum::<f64>() / 3.0;
        worst = worst.max((seg.miou - miou).abs()).max((seg.mbiou - mbiou).abs());
    }
    check(
        worst < METRIC_TOL,
        format!("mesh metrics, PSNR, SSIM, mIoU and mBIoU on 5 fixtures: max deviation from brute force {worst:.2e} (tol {METRIC_TOL:e})"),
    )
}

// ---------------------------------------------------------------------------------------------

fn tsdf_oracle() -> Outcome {
    let (radius, voxel) = (0.7, 0.02);
    let mut vol = TsdfVolume::new(Vector3::repeat(-1.0), Vector3::repeat(1.0), voxel, 4.0 * voxel, 0).unwrap();
    vol.fill_sdf(|p| p.norm() - radius);
    let m = mesh::marching_cubes(&vol);
    if m.is_empty() {
        return Err("empty mesh".into());
    }
    let mean = m.vertices.iter().map(|v| (v.norm() - radius).abs()).sum::<f64>() / m.vertices.len() as f64;
    check(
        mean < voxel / 4.0,
        format!("mean radial error {mean:.2e} over {} vertices (limit voxel/4 = {:.2e})", m.vertices.len(), voxel / 4.0),
    )
}

// ---------------------------------------------------------------------------------------------

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("refinement case suite", refinement_case_suite),
        ("loss identities", loss_identities),
        ("synthetic reconstruction", synthetic_reconstruction),
        ("synthetic segmentation", synthetic_segmentation),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
        ("metric oracles", metric_oracles),
        ("tsdf oracle", tsdf_oracle),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
