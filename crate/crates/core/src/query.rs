//! Open-vocabulary selection: cosine scoring of primitive features against a query embedding.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{GlsError, Result};
use crate::image::{Image, Mask};
use crate::raster::{self, RenderOutput};
use crate::scene::Scene;

pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Rendered alpha above which a pixel belongs to the selection mask.
pub const MASK_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub name: String,
    pub vector: Vec<f64>,
}

impl QueryEmbedding {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.vector.len() != feature_dim {
            return Err(GlsError::InvalidParameter(format!(
                "query {} has dimension {}, the scene uses {feature_dim}",
                self.name,
                self.vector.len()
            )));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(GlsError::InvalidParameter(format!("query {} is not finite", self.name)));
        }
        Ok(())
    }
}

/// Turns text into an embedding in the scene's feature space.
pub trait QueryEncoder {
    fn encode(&self, text: &str) -> Result<QueryEmbedding>;
}

/// Looks queries up in a table of pre-encoded embeddings.
pub struct TableEncoder<'a>(pub &'a std::collections::BTreeMap<String, Vec<f64>>);

impl QueryEncoder for TableEncoder<'_> {
    fn encode(&self, text: &str) -> Result<QueryEmbedding> {
        self.0
            .get(text)
            .map(|v| QueryEmbedding {
                name: text.to_string(),
                vector: v.clone(),
            })
            .ok_or_else(|| GlsError::InvalidParameter(format!("unknown query {text}")))
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn score_gaussians(scene: &Scene, query: &QueryEmbedding) -> Result<Vec<f64>> {
    query.validate(scene.feature_dim)?;
    Ok(scene.primitives.iter().map(|p| cosine(&p.feature, &query.vector)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn select(scene: &Scene, query: &QueryEmbedding, threshold: f64) -> Result<Selection> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(GlsError::InvalidParameter(format!("threshold {threshold} outside [-1, 1]")));
    }
    let scores = score_gaussians(scene, query)?;
    let indices = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    Ok(Selection { indices, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub selection: Selection,
    /// One mask per camera.
    pub masks: Vec<Mask>,
}

impl SelectionResult {
    pub fn is_empty(&self) -> bool {
        self.selection.is_empty()
    }
}

/// Renders the selected primitives alone; a pixel is in the mask where their alpha exceeds
/// one half.
pub fn select_and_render(scene: &Scene, query: &QueryEmbedding, threshold: f64, cameras: &[Camera]) -> Result<SelectionResult> {
    let selection = select(scene, query, threshold)?;
    let sub = scene.subset(&selection.indices);
    let masks = cameras
        .iter()
        .map(|cam| -> Result<Mask> {
            if sub.is_empty() {
                return Ok(Mask::new(cam.width, cam.height));
            }
            let out = raster::render(&sub, cam)?;
            Ok(Mask::from_fn(cam.width, cam.height, |x, y| out.alpha.data[y * cam.width + x] > MASK_ALPHA))
        })
        .collect::<Result<_>>()?;
    if selection.is_empty() {
        log::warn!("query {} selected no primitives at threshold {threshold}", query.name);
    }
    Ok(SelectionResult { selection, masks })
}

/// Per-pixel cosine between the rendered feature and the query.
pub fn attention_map(render: &RenderOutput, query: &QueryEmbedding) -> Result<Image> {
    let fd = render.feature.channels;
    query.validate(fd)?;
    let (w, h) = (render.width(), render.height());
    let mut out = Image::zeros(w, h, 1);
    for p in 0..w * h {
        out.data[p] = cosine(&render.feature.data[p * fd..(p + 1) * fd], &query.vector);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianPrimitive;
    use nalgebra::Vector3;

    fn scene_with(features: &[[f64; 3]]) -> Scene {
        let mut s = Scene::new(3, 0);
        for (i, f) in features.iter().enumerate() {
            let mut p = GaussianPrimitive::new(Vector3::new(i as f64 * 0.1, 0.0, 3.0), Vector3::new(0.2, 0.2, 0.2), 0.9, [0.5; 3], 0, 3);
            p.feature = f.to_vec();
            s.primitives.push(p);
        }
        s
    }

    fn q(v: [f64; 3]) -> QueryEmbedding {
        QueryEmbedding {
            name: "q".into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn cosine_examples() {
        let s = scene_with(&[[1.0, 2.0, 0.0], [0.0, 0.0, 4.0], [-1.0, -2.0, 0.0], [0.0; 3]]);
        let scores = score_gaussians(&s, &q([1.0, 2.0, 0.0])).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-12);
        assert_eq!(scores[1], 0.0);
        assert!((scores[2] + 1.0).abs() < 1e-12);
        assert_eq!(scores[3], 0.0);
        assert!(score_gaussians(&s, &QueryEmbedding { name: "bad".into(), vector: vec![1.0] }).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let s = scene_with(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.2, 0.0]]);
        assert_eq!(select(&s, &q([1.0, 0.0, 0.0]), -1.0).unwrap().indices, vec![0, 1, 2]);
        assert!(select(&s, &q([0.3, 0.3, 0.9]), 1.0).unwrap().is_empty());
        assert!(select(&s, &q([1.0, 0.0, 0.0]), 1.5).is_err());
    }

    #[test]
    fn empty_selection_gives_empty_masks() {
        let s = scene_with(&[[1.0, 0.0, 0.0]]);
        let cam = Camera::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 3.0), -Vector3::y(), 20.0, 20.0, 16, 16, 0.01, 100.0).unwrap();
        let r = select_and_render(&s, &q([0.0, 1.0, 0.0]), 0.5, &[cam.clone()]).unwrap();
        assert!(r.is_empty());
        assert!(r.masks[0].is_empty());
        let all = select_and_render(&s, &q([0.0, 1.0, 0.0]), -1.0, &[cam]).unwrap();
        assert!(!all.masks[0].is_empty());
    }
}
