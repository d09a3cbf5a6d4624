use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use gls_core::camera::CameraRecord;
use gls_core::container;
use gls_core::losses::ClassifierHead;
use gls_core::mesh::{self, MeshOptions};
use gls_core::priors::{self, LoadOptions};
use gls_core::query::QueryEmbedding;
use gls_core::{Camera, GlsError, Result, Scene};
use nalgebra::Vector3;
use sha2::{Digest, Sha256};

type MeshCache = OnceLock<std::result::Result<Arc<Vec<u8>>, String>>;

/// A trained scene frozen for serving. Fields are read-only after construction; the fused
/// meshes are computed on first request and cached.
pub struct SceneSnapshot {
    pub scene: Scene,
    pub head: ClassifierHead,
    pub palette: BTreeMap<String, Vec<f64>>,
    pub class_names: BTreeMap<u16, String>,
    /// Stored views, used for mask previews and mesh fusion.
    pub cameras: Vec<Camera>,
    pub mesh_bounds: Option<(Vector3<f64>, Vector3<f64>)>,
    hash: String,
    meshes: [MeshCache; 2],
}

impl SceneSnapshot {
    pub fn new(
        scene: Scene,
        head: ClassifierHead,
        palette: BTreeMap<String, Vec<f64>>,
        class_names: BTreeMap<u16, String>,
        cameras: Vec<Camera>,
        mesh_bounds: Option<(Vector3<f64>, Vector3<f64>)>,
    ) -> Result<Self> {
        scene.validate()?;
        head.validate()?;
        if head.feature_dim != scene.feature_dim {
            return Err(GlsError::Validation(format!(
                "head expects {}-dimensional features, scene has {}",
                head.feature_dim, scene.feature_dim
            )));
        }
        for (name, v) in &palette {
            QueryEmbedding { name: name.clone(), vector: v.clone() }.validate(scene.feature_dim)?;
        }
        for c in &cameras {
            c.validate()?;
        }
        let mut snap = SceneSnapshot {
            scene,
            head,
            palette,
            class_names,
            cameras,
            mesh_bounds,
            hash: String::new(),
            meshes: [OnceLock::new(), OnceLock::new()],
        };
        snap.hash = snap.content_hash()?;
        Ok(snap)
    }

    /// Loads `scene_path` and its head sidecar; `data` supplies the query palette, class names,
    /// stored views and meshing bounds.
    pub fn load(scene_path: &Path, data: Option<&Path>) -> Result<Self> {
        let scene = container::read_scene(scene_path)?;
        let head_path = container::sidecar_path(scene_path, "head.json");
        let head = if head_path.exists() {
            container::read_head(&head_path)?
        } else {
            log::warn!("{} not found; using an untrained head", head_path.display());
            ClassifierHead::zeros(scene.feature_dim, 1)
        };
        match data {
            Some(root) => {
                let options = LoadOptions { require_features: false, ..Default::default() };
                let ds = priors::load_dataset(root, &options)?;
                let bounds = ds.init_bounds();
                SceneSnapshot::new(scene, head, ds.text_queries, ds.class_names, ds.cameras, bounds)
            }
            None => SceneSnapshot::new(scene, head, BTreeMap::new(), BTreeMap::new(), Vec::new(), None),
        }
    }

    /// Hash computed at construction.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Recomputes the hash from the current contents.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(container::encode_scene(&self.scene)?);
        h.update(serde_json::to_vec(&self.head)?);
        h.update(serde_json::to_vec(&self.palette)?);
        h.update(serde_json::to_vec(&self.class_names)?);
        let records: Vec<CameraRecord> = self.cameras.iter().map(CameraRecord::from).collect();
        h.update(serde_json::to_vec(&records)?);
        h.update(serde_json::to_vec(&self.mesh_bounds.map(|(a, b)| [a.x, a.y, a.z, b.x, b.y, b.z]))?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn query(&self, name: &str) -> Option<QueryEmbedding> {
        self.palette.get(name).map(|v| QueryEmbedding { name: name.to_string(), vector: v.clone() })
    }

    /// Binary PLY of the fused mesh, labelled and palette-colored when `semantic`.
    pub fn mesh_ply(&self, semantic: bool) -> std::result::Result<Arc<Vec<u8>>, String> {
        self.meshes[semantic as usize]
            .get_or_init(|| {
                let options = MeshOptions { semantic, bounds: self.mesh_bounds, ..Default::default() };
                let m = mesh::extract_scene_mesh(&self.scene, &self.cameras, Some(&self.head), &options).map_err(|e| e.to_string())?;
                let mut bytes = Vec::new();
                gls_core::io::write_ply_to(&mut bytes, &m.to_ply()).map_err(|e| e.to_string())?;
                Ok(Arc::new(bytes))
            })
            .clone()
    }
}
