//! Per-tile alpha compositing and its adjoint.

use rayon::prelude::*;

use super::project::{SplatAdjoint, Splat2D};
use super::{ForwardContext, RenderSettings};

struct Hit {
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

fn evaluate(splat: &Splat2D, x: f64, y: f64, settings: &RenderSettings) -> Option<Hit> {
    let dx = x - splat.mean2d[0];
    let dy = y - splat.mean2d[1];
    // outside the cutoff circle alpha is below the floor anyway; the margin absorbs roundoff
    let r = splat.cutoff_radius * (1.0 + 1e-6) + 1e-9;
    if dx * dx + dy * dy > r * r {
        return None;
    }
    let q = &splat.conic;
    let power = -0.5 * (q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
    if power > 0.0 || power < splat.log_alpha_floor {
        return None;
    }
    let gauss = power.exp();
    let raw = splat.opacity * gauss;
    let clamped = raw > settings.alpha_max;
    let alpha = raw.min(settings.alpha_max);
    if alpha < settings.alpha_min {
        return None;
    }
    Some(Hit {
        alpha,
        gauss,
        dx,
        dy,
        clamped,
    })
}

fn tile_pixels(ctx: &ForwardContext, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = ctx.settings.tile_size.max(1);
    let (tx, ty) = (tile % ctx.tiles_x, tile / ctx.tiles_x);
    let (x0, y0) = (tx * ts, ty * ts);
    let (x1, y1) = ((x0 + ts).min(ctx.width), (y0 + ts).min(ctx.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

pub(super) fn forward(ctx: &mut ForwardContext) {
    let k = ctx.stride;
    let shared: &ForwardContext = ctx;
    let results: Vec<Vec<(usize, Vec<f64>, u32)>> = (0..shared.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &shared.tile_lists[tile];
            tile_pixels(shared, tile)
                .map(|(x, y)| {
                    let mut acc = vec![0.0; k];
                    let mut t = 1.0;
                    let mut last = 0u32;
                    for (li, &s) in list.iter().enumerate() {
                        let splat = &shared.splats[s as usize];
                        let Some(hit) = evaluate(splat, x as f64, y as f64, &shared.settings) else {
                            continue;
                        };
                        let t_next = t * (1.0 - hit.alpha);
                        if t_next < shared.settings.transmittance_min {
                            break;
                        }
                        let w = hit.alpha * t;
                        let v = &shared.values[s as usize * k..(s as usize + 1) * k];
                        for (a, val) in acc.iter_mut().zip(v) {
                            *a += w * val;
                        }
                        t = t_next;
                        last = li as u32 + 1;
                    }
                    (y * shared.width + x, acc, last)
                })
                .collect()
        })
        .collect();
    for tile in results {
        for (p, acc, last) in tile {
            ctx.raw[p * k..(p + 1) * k].copy_from_slice(&acc);
            ctx.n_contrib[p] = last;
        }
    }
}

// layout of a per-splat accumulator row
const U: usize = 0;
const V: usize = 1;
const Q00: usize = 2;
const Q01: usize = 3;
const Q11: usize = 4;
const OPACITY: usize = 5;
const ABS_U: usize = 6;
const ABS_V: usize = 7;
const VALUES: usize = 8;

/// Returns, for every sorted splat, its image-space adjoint and the summed absolute
/// per-pixel mean gradient.
pub(super) fn backward(ctx: &ForwardContext, raw_adjoint: &[f64]) -> Vec<(SplatAdjoint, [f64; 2])> {
    let k = ctx.stride;
    let row = VALUES + k;
    let settings = &ctx.settings;

    let locals: Vec<Vec<f64>> = (0..ctx.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &ctx.tile_lists[tile];
            let mut local = vec![0.0; list.len() * row];
            let mut stack: Vec<(usize, Hit, f64)> = Vec::new();
            let mut suffix = vec![0.0; k];
            for (x, y) in tile_pixels(ctx, tile) {
                let p = y * ctx.width + x;
                let g = &raw_adjoint[p * k..(p + 1) * k];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let n = ctx.n_contrib[p] as usize;
                stack.clear();
                let mut t = 1.0;
                for (li, &s) in list[..n].iter().enumerate() {
                    if let Some(hit) = evaluate(&ctx.splats[s as usize], x as f64, y as f64, settings) {
                        let a = hit.alpha;
                        stack.push((li, hit, t));
                        t *= 1.0 - a;
                    }
                }
                suffix.iter_mut().for_each(|v| *v = 0.0);
                for (li, hit, t) in stack.iter().rev() {
                    let s = list[*li] as usize;
                    let vals = &ctx.values[s * k..(s + 1) * k];
                    let acc = &mut local[li * row..(li + 1) * row];
                    let w = hit.alpha * t;
                    let inv = 1.0 / (1.0 - hit.alpha);
                    let mut g_alpha = 0.0;
                    for c in 0..k {
                        g_alpha += g[c] * (vals[c] * t - suffix[c] * inv);
                        acc[VALUES + c] += g[c] * w;
                        suffix[c] += vals[c] * w;
                    }
                    if hit.clamped {
                        continue;
                    }
                    let splat = &ctx.splats[s];
                    acc[OPACITY] += g_alpha * hit.gauss;
                    let gp = g_alpha * hit.alpha;
                    let q = &splat.conic;
                    let gu = gp * (q[(0, 0)] * hit.dx + q[(0, 1)] * hit.dy);
                    let gv = gp * (q[(0, 1)] * hit.dx + q[(1, 1)] * hit.dy);
                    acc[U] += gu;
                    acc[V] += gv;
                    acc[ABS_U] += gu.abs();
                    acc[ABS_V] += gv.abs();
                    acc[Q00] += -0.5 * gp * hit.dx * hit.dx;
                    acc[Q01] += -0.5 * gp * hit.dx * hit.dy;
                    acc[Q11] += -0.5 * gp * hit.dy * hit.dy;
                }
            }
            local
        })
        .collect();

    let mut global = vec![0.0; ctx.splats.len() * row];
    for (tile, local) in locals.iter().enumerate() {
        for (li, &s) in ctx.tile_lists[tile].iter().enumerate() {
            let dst = &mut global[s as usize * row..(s as usize + 1) * row];
            for (d, v) in dst.iter_mut().zip(&local[li * row..(li + 1) * row]) {
                *d += v;
            }
        }
    }
    global
        .chunks(row)
        .map(|r| {
            (
                SplatAdjoint {
                    mean2d: [r[U], r[V]],
                    conic: [r[Q00], r[Q01], r[Q11]],
                    opacity: r[OPACITY],
                    values: r[VALUES..].to_vec(),
                },
                [r[ABS_U], r[ABS_V]],
            )
        })
        .collect()
}

/// Hash of every discrete choice made by the forward pass: which splats survived culling,
/// which pixel-splat pairs contributed, clamped alphas, normal orientations and color clamps.
/// Two parameter settings with equal fingerprints lie on the same smooth branch.
pub(super) fn fingerprint(ctx: &ForwardContext) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for s in &ctx.splats {
        s.index.hash(&mut h);
        s.axis.hash(&mut h);
        (s.normal_sign > 0.0).hash(&mut h);
        s.color_active.hash(&mut h);
    }
    for tile in 0..ctx.tile_lists.len() {
        let list = &ctx.tile_lists[tile];
        for (x, y) in tile_pixels(ctx, tile) {
            let p = y * ctx.width + x;
            let n = ctx.n_contrib[p] as usize;
            p.hash(&mut h);
            for &s in &list[..n] {
                match evaluate(&ctx.splats[s as usize], x as f64, y as f64, &ctx.settings) {
                    Some(hit) => (s, hit.clamped).hash(&mut h),
                    None => u32::MAX.hash(&mut h),
                }
            }
            // the first entry past the cutoff decides whether termination moved
            list.get(n).hash(&mut h);
        }
    }
    ctx.cos_clamped.hash(&mut h);
    h.finish()
}
