//! Triangle meshes, TSDF fusion and marching cubes.

mod marching;
mod tsdf;

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{GlsError, Result};
use crate::io::{self, PlyData, PlyType};

pub use marching::marching_cubes;
pub use tsdf::{extract_scene_mesh, inflated_bounds, MeshOptions, TsdfVolume};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex rgb in [0,1]; empty or one per vertex.
    pub colors: Vec<[f64; 3]>,
    /// Per-vertex class ids; empty or one per vertex.
    pub labels: Vec<u16>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return Err(GlsError::Mesh("triangle index out of range".into()));
        }
        if !self.colors.is_empty() && self.colors.len() != n {
            return Err(GlsError::Mesh("color count does not match vertex count".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != n {
            return Err(GlsError::Mesh("label count does not match vertex count".into()));
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        let [i, j, k] = self.triangles[t];
        [self.vertices[i as usize], self.vertices[j as usize], self.vertices[k as usize]]
    }

    /// Unit normal from the counter-clockwise winding, zero for degenerate faces.
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Appends `other`, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let offset = self.vertices.len() as u32;
        let had_colors = !self.colors.is_empty() || self.vertices.is_empty();
        let had_labels = !self.labels.is_empty() || self.vertices.is_empty();
        self.vertices.extend_from_slice(&other.vertices);
        if had_colors && !other.colors.is_empty() {
            self.colors.extend_from_slice(&other.colors);
        } else {
            self.colors.clear();
        }
        if had_labels && !other.labels.is_empty() {
            self.labels.extend_from_slice(&other.labels);
        } else {
            self.labels.clear();
        }
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
    }

    pub fn to_ply(&self) -> PlyData {
        let mut properties = vec![
            ("x".to_string(), PlyType::F32),
            ("y".to_string(), PlyType::F32),
            ("z".to_string(), PlyType::F32),
        ];
        let has_colors = self.colors.len() == self.vertices.len() && !self.vertices.is_empty();
        let has_labels = self.labels.len() == self.vertices.len() && !self.vertices.is_empty();
        if has_colors {
            for c in ["red", "green", "blue"] {
                properties.push((c.to_string(), PlyType::U8));
            }
        }
        if has_labels {
            properties.push(("label".to_string(), PlyType::U16));
        }
        let mut vertices = Vec::with_capacity(self.vertices.len() * properties.len());
        for (i, v) in self.vertices.iter().enumerate() {
            vertices.extend_from_slice(&[v.x, v.y, v.z]);
            if has_colors {
                vertices.extend(self.colors[i].iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round()));
            }
            if has_labels {
                vertices.push(self.labels[i] as f64);
            }
        }
        PlyData {
            properties,
            vertices,
            faces: self.triangles.clone(),
        }
    }

    pub fn from_ply(ply: &PlyData) -> Result<Self> {
        let col = |n: &str| ply.column(n);
        let (Some(x), Some(y), Some(z)) = (col("x"), col("y"), col("z")) else {
            return Err(GlsError::Mesh("ply has no vertex positions".into()));
        };
        let vertices = (0..x.len()).map(|i| Vector3::new(x[i], y[i], z[i])).collect();
        let colors = match (col("red"), col("green"), col("blue")) {
            (Some(r), Some(g), Some(b)) => (0..r.len()).map(|i| [r[i] / 255.0, g[i] / 255.0, b[i] / 255.0]).collect(),
            _ => Vec::new(),
        };
        let labels = col("label")
            .map(|l| l.iter().map(|v| *v as u16).collect())
            .unwrap_or_default();
        let mesh = TriangleMesh {
            vertices,
            colors,
            labels,
            triangles: ply.faces.clone(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        io::write_ply(path, &self.to_ply())
    }

    pub fn read_ply(path: &Path) -> Result<Self> {
        Self::from_ply(&io::read_ply(path)?)
    }

    /// Drops triangles with zero area (repeated or collinear corners).
    pub fn remove_degenerate(&mut self) {
        let keep: Vec<[u32; 3]> = (0..self.triangles.len())
            .filter(|&t| self.triangle_area(t) > 0.0)
            .map(|t| self.triangles[t])
            .collect();
        self.triangles = keep;
    }
}

/// Fixed label palette; label 0 is gray.
pub fn palette_color(label: u16) -> [f64; 3] {
    if label == 0 {
        return [0.5, 0.5, 0.5];
    }
    // golden-ratio hue walk keeps neighboring ids apart
    let h = (label as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(h, 0.75, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// JSON sidecar mapping each label present in `mesh` to its palette color (0–255).
pub fn palette_json(mesh: &TriangleMesh, names: &std::collections::BTreeMap<u16, String>) -> serde_json::Value {
    let mut labels: Vec<u16> = mesh.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    let entries: Vec<serde_json::Value> = labels
        .iter()
        .map(|l| {
            let c = palette_color(*l);
            serde_json::json!({
                "label": l,
                "name": names.get(l).cloned().unwrap_or_default(),
                "color": c.iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({ "palette": entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_keeps_labels() {
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)],
            colors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            labels: vec![1, 1, 2],
            triangles: vec![[0, 1, 2]],
        };
        let back = TriangleMesh::from_ply(&mesh.to_ply()).unwrap();
        assert_eq!(back, mesh);
        assert!((mesh.surface_area() - 0.5).abs() < 1e-12);
        assert_eq!(mesh.face_normal(0), Vector3::z());
    }

    #[test]
    fn palette_is_distinct() {
        let a = palette_color(1);
        let b = palette_color(2);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
    }
}
