//! Marching cubes over the TSDF zero level set.
//!
//! The 256-entry case table is derived at first use: crossings on each cube face are joined
//! so that every inside corner run is cut off on its own (which resolves ambiguous faces
//! consistently between neighboring cubes), the face segments are chained into closed
//! loops and each loop is fanned into triangles.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::tsdf::TsdfVolume;
use super::TriangleMesh;

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

fn edge_index(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p == a && q == b) || (p == b && q == a))
        .expect("corners do not share an edge")
}

/// The four corners of each face in counter-clockwise order seen from outside the cube.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let mut corners: Vec<usize> = (0..8).filter(|&c| corner_offset(c)[axis] == side).collect();
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let angle = |c: usize| {
                let o = corner_offset(c);
                (o[v] as f64 - 0.5).atan2(o[u] as f64 - 0.5)
            };
            corners.sort_by(|a, b| angle(*a).total_cmp(&angle(*b)));
            // (u, v, axis) is right-handed, so increasing angle is counter-clockwise seen from +axis
            if side == 0 {
                corners.reverse();
            }
            out.push([corners[0], corners[1], corners[2], corners[3]]);
        }
    }
    out
}

fn case_triangles(case: usize, faces: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next: HashMap<usize, usize> = HashMap::new();
    for face in faces {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_index(a, b), inside(b)));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        // rotate so the list starts with an entering crossing, then pair enter -> leave
        let start = crossings.iter().position(|c| c.1).unwrap();
        crossings.rotate_left(start);
        for pair in crossings.chunks(2) {
            next.insert(pair[0].0, pair[1].0);
        }
    }
    let mut tris = Vec::new();
    let mut keys: Vec<usize> = next.keys().copied().collect();
    keys.sort_unstable();
    let mut used = vec![false; 12];
    for k in keys {
        if used[k] {
            continue;
        }
        let mut ring = vec![k];
        used[k] = true;
        let mut cur = next[&k];
        while cur != k {
            used[cur] = true;
            ring.push(cur);
            cur = next[&cur];
        }
        for i in 1..ring.len() - 1 {
            tris.push([ring[0], ring[i], ring[i + 1]]);
        }
    }
    tris
}

fn table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = faces();
        (0..256).map(|c| case_triangles(c, &faces)).collect()
    })
}

/// Extracts the zero level set of `volume.tsdf`, skipping cubes that touch an unobserved
/// voxel. Triangles face toward positive values.
pub fn marching_cubes(volume: &TsdfVolume) -> TriangleMesh {
    let table = table();
    let [nx, ny, nz] = volume.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    let node = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let mut case = 0usize;
                    let mut observed = true;
                    for c in 0..8 {
                        let o = corner_offset(c);
                        let i = node(x + o[0], y + o[1], z + o[2]);
                        if volume.weight[i] <= 0.0 {
                            observed = false;
                            break;
                        }
                        if volume.tsdf[i] < 0.0 {
                            case |= 1 << c;
                        }
                    }
                    if !observed || case == 0 || case == 255 {
                        continue;
                    }
                    for t in &table[case] {
                        let key = |e: usize| {
                            let (a, b) = EDGES[e];
                            let oa = corner_offset(a);
                            let ob = corner_offset(b);
                            let axis = (0..3).find(|&k| oa[k] != ob[k]).unwrap();
                            let base = node(x + oa[0].min(ob[0]), y + oa[1].min(ob[1]), z + oa[2].min(ob[2]));
                            base as u64 * 3 + axis as u64
                        };
                        tris.push([key(t[0]), key(t[1]), key(t[2])]);
                    }
                }
            }
            tris
        })
        .collect();

    let mut mesh = TriangleMesh::default();
    let semantic = volume.has_labels();
    let mut index: HashMap<u64, u32> = HashMap::new();
    for tri in slabs.into_iter().flatten() {
        let mut ids = [0u32; 3];
        for (k, key) in tri.iter().enumerate() {
            ids[k] = *index.entry(*key).or_insert_with(|| {
                let axis = (*key % 3) as usize;
                let a = (*key / 3) as usize;
                let step = [1, nx, nx * ny][axis];
                let b = a + step;
                let (va, vb) = (volume.tsdf[a] as f64, volume.tsdf[b] as f64);
                let t = if va == vb { 0.5 } else { (va / (va - vb)).clamp(0.0, 1.0) };
                let pa = volume.node_position(a);
                let mut p = pa;
                p[axis] += t * volume.voxel_size;
                mesh.vertices.push(p);
                let ca = volume.color[a];
                let cb = volume.color[b];
                mesh.colors.push([
                    ca[0] as f64 + t * (cb[0] as f64 - ca[0] as f64),
                    ca[1] as f64 + t * (cb[1] as f64 - ca[1] as f64),
                    ca[2] as f64 + t * (cb[2] as f64 - ca[2] as f64),
                ]);
                if semantic {
                    mesh.labels.push(volume.label(if t < 0.5 { a } else { b }));
                }
                (mesh.vertices.len() - 1) as u32
            });
        }
        mesh.triangles.push(ids);
    }
    mesh.remove_degenerate();
    mesh
}

#[allow(dead_code)]
fn cube_corner(c: usize) -> Vector3<f64> {
    let o = corner_offset(c);
    Vector3::new(o[0] as f64, o[1] as f64, o[2] as f64)
}
