//! Scene persistence: the versioned `GLSC` container, splat PLY export, feature sidecar and
//! classifier head files.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector3};

use crate::error::{GlsError, Result};
use crate::io::{PlyData, PlyType};
use crate::losses::ClassifierHead;
use crate::scene::{GaussianPrimitive, Scene};
use crate::sh;

pub const MAGIC: &[u8; 4] = b"GLSC";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
// background rgb, sh degree, sh coefficient count
const TRAILER: usize = 20;

fn floats_per_primitive(sh_count: usize, feature_dim: usize) -> usize {
    3 + 3 + 4 + 1 + 3 * sh_count + feature_dim
}

fn sh_count_of(scene: &Scene) -> usize {
    scene
        .primitives
        .first()
        .map(|p| p.sh_coeffs.len())
        .unwrap_or_else(|| sh::coeff_count(scene.sh_degree))
}

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let sh_count = sh_count_of(scene);
    if scene.primitives.iter().any(|p| p.sh_coeffs.len() != sh_count) {
        return Err(GlsError::Validation("primitives disagree on sh coefficient count".into()));
    }
    let per = floats_per_primitive(sh_count, scene.feature_dim);
    let mut out = Vec::with_capacity(HEADER + 4 * per * scene.len() + TRAILER);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, scene.len() as u32, scene.feature_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for p in &scene.primitives {
        p.center.iter().for_each(|v| put(*v));
        p.scale.iter().for_each(|v| put(*v));
        [p.rotation.w, p.rotation.i, p.rotation.j, p.rotation.k].into_iter().for_each(&mut put);
        put(p.opacity);
        p.sh_coeffs.iter().flatten().for_each(|v| put(*v));
        p.feature.iter().for_each(|v| put(*v));
    }
    scene.background.iter().for_each(|v| put(*v));
    out.extend_from_slice(&(scene.sh_degree as u32).to_le_bytes());
    out.extend_from_slice(&(sh_count as u32).to_le_bytes());
    Ok(out)
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let bad = |m: &str| GlsError::Validation(format!("scene container: {m}"));
    if bytes.len() < HEADER + TRAILER || &bytes[..4] != MAGIC {
        return Err(bad("missing GLSC magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let version = u32_at(4);
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (count, feature_dim) = (u32_at(8), u32_at(12));
    let t = bytes.len() - TRAILER;
    let background = [f32_at(t), f32_at(t + 4), f32_at(t + 8)];
    let sh_degree = u32_at(t + 12);
    let sh_count = u32_at(t + 16);
    if sh_degree > sh::MAX_SH_DEGREE || sh_count < sh::coeff_count(sh_degree) || sh_count > 16 {
        return Err(bad("bad sh layout"));
    }
    let per = floats_per_primitive(sh_count, feature_dim);
    if (t - HEADER) != 4 * per * count {
        return Err(bad(&format!("payload size does not match {count} primitives")));
    }
    let mut scene = Scene::new(feature_dim, sh_degree);
    scene.background = background;
    let mut o = HEADER;
    let mut next = || {
        let v = f32_at(o);
        o += 4;
        v
    };
    for _ in 0..count {
        let center = Vector3::new(next(), next(), next());
        let scale = Vector3::new(next(), next(), next());
        let rotation = Quaternion::new(next(), next(), next(), next());
        let norm = rotation.norm();
        if !(norm > 0.0) {
            return Err(bad("zero quaternion"));
        }
        let opacity = next();
        let sh_coeffs = (0..sh_count).map(|_| [next(), next(), next()]).collect();
        let feature = (0..feature_dim).map(|_| next()).collect();
        scene.primitives.push(GaussianPrimitive {
            center,
            scale,
            rotation: rotation / norm,
            opacity,
            sh_coeffs,
            feature,
        });
    }
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path).map_err(|e| GlsError::load(path, e))?;
    decode_scene(&bytes).map_err(|e| GlsError::load(path, e))
}

/// Sibling file of a checkpoint, e.g. `ckpt.glsc` → `ckpt.head.json`.
pub fn sidecar_path(scene_path: &Path, suffix: &str) -> PathBuf {
    let stem = scene_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    scene_path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_head(path: &Path, head: &ClassifierHead) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(head)?)?;
    Ok(())
}

pub fn read_head(path: &Path) -> Result<ClassifierHead> {
    let bytes = std::fs::read(path).map_err(|e| GlsError::load(path, e))?;
    let head: ClassifierHead = serde_json::from_slice(&bytes).map_err(|e| GlsError::load(path, e))?;
    head.validate()?;
    Ok(head)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Standard splat PLY (log scales, logit opacity, channel-major `f_rest_*`) for third-party
/// viewers.
pub fn splat_ply(scene: &Scene) -> PlyData {
    let sh_count = sh_count_of(scene);
    let mut props: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    props.extend((0..3 * (sh_count - 1)).map(|k| format!("f_rest_{k}")));
    props.push("opacity".into());
    props.extend((0..3).map(|k| format!("scale_{k}")));
    props.extend((0..4).map(|k| format!("rot_{k}")));
    let mut vertices = Vec::with_capacity(props.len() * scene.len());
    for p in &scene.primitives {
        vertices.extend(p.center.iter());
        vertices.extend([0.0; 3]);
        vertices.extend(p.sh_coeffs[0]);
        for c in 0..3 {
            vertices.extend(p.sh_coeffs[1..].iter().map(|k| k[c]));
        }
        vertices.push(logit(p.opacity));
        vertices.extend(p.scale.iter().map(|s| s.ln()));
        vertices.extend([p.rotation.w, p.rotation.i, p.rotation.j, p.rotation.k]);
    }
    PlyData {
        properties: props.into_iter().map(|n| (n, PlyType::F32)).collect(),
        vertices,
        faces: Vec::new(),
    }
}

/// Reads a splat PLY written by [`splat_ply`] or a compatible tool. Features are zero.
pub fn scene_from_splat_ply(ply: &PlyData, feature_dim: usize) -> Result<Scene> {
    let col = |n: &str| ply.column(n).ok_or_else(|| GlsError::Validation(format!("splat PLY lacks property {n}")));
    let xyz = [col("x")?, col("y")?, col("z")?];
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let op = col("opacity")?;
    let sc = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let mut rest = Vec::new();
    while let Some(c) = ply.column(&format!("f_rest_{}", rest.len())) {
        rest.push(c);
    }
    let extra = rest.len() / 3;
    let sh_count = extra + 1;
    let sh_degree = (0..=sh::MAX_SH_DEGREE)
        .find(|d| sh::coeff_count(*d) == sh_count)
        .ok_or_else(|| GlsError::Validation(format!("{} f_rest properties do not form an sh band", rest.len())))?;
    let mut scene = Scene::new(feature_dim, sh_degree);
    for i in 0..ply.vertex_count() {
        let mut sh_coeffs = vec![[dc[0][i], dc[1][i], dc[2][i]]];
        for k in 0..extra {
            sh_coeffs.push([rest[k][i], rest[extra + k][i], rest[2 * extra + k][i]]);
        }
        let q = Quaternion::new(rot[0][i], rot[1][i], rot[2][i], rot[3][i]);
        scene.primitives.push(GaussianPrimitive {
            center: Vector3::new(xyz[0][i], xyz[1][i], xyz[2][i]),
            scale: Vector3::new(sc[0][i].exp(), sc[1][i].exp(), sc[2][i].exp()),
            rotation: q / q.norm(),
            opacity: 1.0 / (1.0 + (-op[i]).exp()),
            sh_coeffs,
            feature: vec![0.0; feature_dim],
        });
    }
    scene.validate()?;
    Ok(scene)
}

/// `GLSF`, u32 count, u32 dim, then f32 features row-major.
pub fn encode_features(scene: &Scene) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * scene.len() * scene.feature_dim);
    out.extend_from_slice(b"GLSF");
    out.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    out.extend_from_slice(&(scene.feature_dim as u32).to_le_bytes());
    for p in &scene.primitives {
        for f in &p.feature {
            out.write_all(&(*f as f32).to_le_bytes()).unwrap();
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<(usize, Vec<Vec<f64>>)> {
    if bytes.len() < 12 || &bytes[..4] != b"GLSF" {
        return Err(GlsError::Validation("feature sidecar: missing GLSF magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * count * dim {
        return Err(GlsError::Validation("feature sidecar: size mismatch".into()));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dim, vals.chunks(dim.max(1)).take(count).map(|c| c.to_vec()).collect()))
}

/// Writes `stem.ply` and `stem.feat.bin`.
pub fn export_splats(stem: &Path, scene: &Scene) -> Result<()> {
    crate::io::write_ply(&stem.with_extension("ply"), &splat_ply(scene))?;
    std::fs::write(stem.with_extension("feat.bin"), encode_features(scene))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_scene(n: usize) -> Scene {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut s = Scene::new(5, 1);
        s.background = [0.25, 0.5, 1.0];
        for _ in 0..n {
            let mut p = GaussianPrimitive::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                Vector3::new(0.1, 0.2, 0.05),
                rng.random_range(0.1..0.9),
                [0.3, 0.6, 0.9],
                1,
                5,
            );
            let q = Quaternion::new(rng.random(), rng.random(), rng.random(), 0.3f64);
            p.rotation = q / q.norm();
            p.sh_coeffs[2] = [0.1, -0.2, 0.3];
            p.feature.iter_mut().for_each(|f| *f = rng.random_range(-1.0..1.0));
            s.primitives.push(p);
        }
        s
    }

    #[test]
    fn container_round_trip_is_stable_after_one_quantization() {
        let s = random_scene(7);
        let once = decode_scene(&encode_scene(&s).unwrap()).unwrap();
        assert_eq!(once.len(), 7);
        assert_eq!(once.background, s.background);
        assert_eq!(once.sh_degree, 1);
        let bytes = encode_scene(&once).unwrap();
        let twice = decode_scene(&bytes).unwrap();
        assert_eq!(encode_scene(&twice).unwrap(), bytes);
        for (a, b) in s.primitives.iter().zip(&once.primitives) {
            assert!((a.center - b.center).norm() < 1e-6);
            assert!((a.opacity - b.opacity).abs() < 1e-6);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_scene(&random_scene(3)).unwrap();
        assert_eq!(&bytes[..4], b"GLSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 16 + 4 * 3 * (11 + 12 + 5) + 20);
    }

    #[test]
    fn truncated_or_foreign_bytes_are_rejected() {
        let bytes = encode_scene(&random_scene(3)).unwrap();
        assert!(decode_scene(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_scene(b"PLY not a scene at all....").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_scene(&v2).is_err());
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = Scene::new(16, 3);
        let back = decode_scene(&encode_scene(&s).unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.sh_degree, 3);
    }

    #[test]
    fn splat_ply_round_trip() {
        let s = random_scene(4);
        let dir = tempfile::tempdir().unwrap();
        export_splats(&dir.path().join("splats"), &s).unwrap();
        let ply = crate::io::read_ply(&dir.path().join("splats.ply")).unwrap();
        let back = scene_from_splat_ply(&ply, 5).unwrap();
        for (a, b) in s.primitives.iter().zip(&back.primitives) {
            assert!((a.scale - b.scale).norm() < 1e-6);
            assert!((a.opacity - b.opacity).abs() < 1e-6);
            assert!((a.sh_coeffs[3][1] - b.sh_coeffs[3][1]).abs() < 1e-6);
        }
        let (dim, feats) = decode_features(&std::fs::read(dir.path().join("splats.feat.bin")).unwrap()).unwrap();
        assert_eq!(dim, 5);
        assert!((feats[2][4] - s.primitives[2].feature[4]).abs() < 1e-6);
    }
}
