//! Per-view cues and the on-disk dataset layout.
//!
//! ```text
//! cameras.json            intrinsics, row-major world_to_camera, width/height per view
//! images/0000.png         rgb
//! normals/0000.raw/.json  camera-frame normal prior (f32)
//! masks/0000.pgm          16-bit instance ids, 0 = unlabeled
//! feats/0000.raw/.json    encoded feature map (f32)
//! depths/0000.raw/.json   optional sensor z-depth (f32)
//! init_points.ply         initialization points with colors
//! classes.json            class count and id -> name
//! text_queries.json       optional name -> embedding
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord};
use crate::error::{GlsError, Result};
use crate::image::{Image, LabelMap, Mask};
use crate::io::{self, PlyData, PlyType};

/// Number of largest objects whose union forms the smoothing mask.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub normal_prior: Image,
    pub instance_mask: LabelMap,
    pub feature_map: Option<Image>,
    pub big_object_mask: Mask,
    /// Distances along the pixel rays, converted from the stored z-depth.
    pub sensor_depth: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub priors: Vec<PriorBundle>,
    /// Number of instance ids including the unlabeled id 0.
    pub class_count: usize,
    pub class_names: BTreeMap<u16, String>,
    pub feature_dim: usize,
    pub init_points: Vec<InitPoint>,
    pub text_queries: BTreeMap<String, Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn has_features(&self) -> bool {
        self.priors.iter().all(|p| p.feature_map.is_some()) && !self.priors.is_empty()
    }

    /// Init-point bounding box inflated by 5%, the default meshing volume.
    pub fn init_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        crate::mesh::inflated_bounds(self.init_points.iter().map(|p| p.position), 0.05)
    }

    pub fn has_sensor_depth(&self) -> bool {
        self.priors.iter().all(|p| p.sensor_depth.is_some()) && !self.priors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.images.len() != n || self.priors.len() != n {
            return Err(GlsError::Validation(format!(
                "view counts differ: {n} cameras, {} images, {} prior bundles",
                self.images.len(),
                self.priors.len()
            )));
        }
        for (v, ((cam, img), pr)) in self.cameras.iter().zip(&self.images).zip(&self.priors).enumerate() {
            cam.validate()?;
            let (w, h) = (cam.width, cam.height);
            img.ensure_shape(w, h, 3, &format!("image of view {v}"))?;
            pr.normal_prior.ensure_shape(w, h, 3, &format!("normal prior of view {v}"))?;
            if pr.instance_mask.width != w || pr.instance_mask.height != h {
                return Err(GlsError::Validation(format!("instance mask of view {v} has the wrong size")));
            }
            for p in 0..w * h {
                let n = &pr.normal_prior.data[3 * p..3 * p + 3];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if !len.is_finite() || (len > 1e-6 && (len - 1.0).abs() > 1e-3) {
                    return Err(GlsError::Validation(format!(
                        "normal prior of view {v} has a vector of norm {len:.4} at pixel {p}"
                    )));
                }
            }
            if let Some(id) = pr.instance_mask.data.iter().find(|&&id| id as usize >= self.class_count) {
                return Err(GlsError::Validation(format!(
                    "instance id {id} in view {v} is not below the class count {}",
                    self.class_count
                )));
            }
            if let Some(f) = &pr.feature_map {
                f.ensure_shape(w, h, self.feature_dim, &format!("feature map of view {v}"))?;
                if f.data.iter().any(|x| !x.is_finite()) {
                    return Err(GlsError::Validation(format!("feature map of view {v} is not finite")));
                }
            }
            if let Some(d) = &pr.sensor_depth {
                d.ensure_shape(w, h, 1, &format!("sensor depth of view {v}"))?;
            }
        }
        for (name, q) in &self.text_queries {
            if q.len() != self.feature_dim {
                return Err(GlsError::Validation(format!(
                    "query {name} has dimension {}, features have {}",
                    q.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// Union of the `k` largest instance ids in the view (ties to the smaller id, id 0 ignored).
pub fn top_k_object_mask(labels: &LabelMap, k: usize) -> Mask {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &id in &labels.data {
        if id != 0 {
            *counts.entry(id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u16, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen: Vec<u16> = ranked.iter().take(k.max(1)).map(|r| r.0).collect();
    let mut mask = Mask::new(labels.width, labels.height);
    for (m, id) in mask.data.iter_mut().zip(&labels.data) {
        *m = chosen.contains(id);
    }
    mask
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
struct ClassesFile {
    count: usize,
    names: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// When false a missing `feats/` directory is not an error.
    pub require_features: bool,
    pub load_sensor_depth: bool,
    pub top_k: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            require_features: true,
            load_sensor_depth: false,
            top_k: DEFAULT_TOP_K,
        }
    }
}

fn view_name(v: usize) -> String {
    format!("{v:04}")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| GlsError::load(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| GlsError::load(path, e))
}

pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<Dataset> {
    let cams: CamerasFile = read_json(&root.join("cameras.json"))?;
    let cameras: Vec<Camera> = cams
        .views
        .into_iter()
        .enumerate()
        .map(|(v, r)| Camera::try_from(&r).map_err(|e| GlsError::Validation(format!("camera {v}: {e}"))))
        .collect::<Result<_>>()?;
    let classes: ClassesFile = read_json(&root.join("classes.json"))?;
    let mut class_names = BTreeMap::new();
    for (k, name) in classes.names {
        let id: u16 = k
            .parse()
            .map_err(|_| GlsError::load(root.join("classes.json"), format!("bad class id {k}")))?;
        class_names.insert(id, name);
    }
    let feats_dir = root.join("feats");
    let with_features = feats_dir.is_dir();
    if !with_features && options.require_features {
        return Err(GlsError::load(&feats_dir, "feature maps are missing (disable the feature loss to train without them)"));
    }
    let depth_dir = root.join("depths");
    if options.load_sensor_depth && !depth_dir.is_dir() {
        return Err(GlsError::Config(format!("sensor depth requested but {} does not exist", depth_dir.display())));
    }

    let views: Vec<(Image, PriorBundle)> = cameras
        .par_iter()
        .enumerate()
        .map(|(v, cam)| -> Result<(Image, PriorBundle)> {
            let name = view_name(v);
            let image = io::read_png_rgb(&root.join("images").join(format!("{name}.png")))?;
            let normal_prior = io::read_raw(&root.join("normals").join(&name))?;
            let instance_mask = io::read_pgm16(&root.join("masks").join(format!("{name}.pgm")))?;
            let feature_map = if with_features {
                Some(io::read_raw(&feats_dir.join(&name))?)
            } else {
                None
            };
            let sensor_depth = if options.load_sensor_depth {
                let z = io::read_raw(&depth_dir.join(&name))?;
                z.ensure_shape(cam.width, cam.height, 1, &format!("sensor depth of view {v}"))?;
                let mut d = z.clone();
                for p in 0..d.data.len() {
                    let ray = cam.ray_dir((p % cam.width) as f64, (p / cam.width) as f64);
                    d.data[p] = z.data[p] / ray.z;
                }
                Some(d)
            } else {
                None
            };
            let big_object_mask = top_k_object_mask(&instance_mask, options.top_k);
            Ok((
                image,
                PriorBundle {
                    normal_prior,
                    instance_mask,
                    feature_map,
                    big_object_mask,
                    sensor_depth,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (images, priors): (Vec<Image>, Vec<PriorBundle>) = views.into_iter().unzip();

    let feature_dim = priors
        .iter()
        .find_map(|p| p.feature_map.as_ref().map(|f| f.channels))
        .unwrap_or(crate::scene::DEFAULT_FEATURE_DIM);
    let init_path = root.join("init_points.ply");
    let init_points = if init_path.exists() {
        read_init_points(&init_path)?
    } else {
        Vec::new()
    };
    let query_path = root.join("text_queries.json");
    let text_queries = if query_path.exists() {
        read_json(&query_path)?
    } else {
        BTreeMap::new()
    };
    let ds = Dataset {
        cameras,
        images,
        priors,
        class_count: classes.count,
        class_names,
        feature_dim,
        init_points,
        text_queries,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    for dir in ["images", "normals", "masks"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let cams = CamerasFile {
        views: ds.cameras.iter().map(CameraRecord::from).collect(),
    };
    std::fs::write(root.join("cameras.json"), serde_json::to_vec_pretty(&cams)?)?;
    let classes = ClassesFile {
        count: ds.class_count,
        names: ds.class_names.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    };
    std::fs::write(root.join("classes.json"), serde_json::to_vec_pretty(&classes)?)?;
    if ds.has_features() {
        std::fs::create_dir_all(root.join("feats"))?;
    }
    if ds.has_sensor_depth() {
        std::fs::create_dir_all(root.join("depths"))?;
    }
    ds.cameras
        .par_iter()
        .enumerate()
        .try_for_each(|(v, cam)| -> Result<()> {
            let name = view_name(v);
            let pr = &ds.priors[v];
            io::write_png(&root.join("images").join(format!("{name}.png")), &ds.images[v])?;
            io::write_raw(&root.join("normals").join(&name), &pr.normal_prior)?;
            io::write_pgm16(&root.join("masks").join(format!("{name}.pgm")), &pr.instance_mask)?;
            if let Some(f) = &pr.feature_map {
                io::write_raw(&root.join("feats").join(&name), f)?;
            }
            if let Some(d) = &pr.sensor_depth {
                let mut z = d.clone();
                for p in 0..z.data.len() {
                    let ray = cam.ray_dir((p % cam.width) as f64, (p / cam.width) as f64);
                    z.data[p] = d.data[p] * ray.z;
                }
                io::write_raw(&root.join("depths").join(&name), &z)?;
            }
            Ok(())
        })?;
    write_init_points(&root.join("init_points.ply"), &ds.init_points)?;
    if !ds.text_queries.is_empty() {
        std::fs::write(root.join("text_queries.json"), serde_json::to_vec_pretty(&ds.text_queries)?)?;
    }
    Ok(())
}

pub fn write_init_points(path: &Path, points: &[InitPoint]) -> Result<()> {
    let mut properties: Vec<(String, PlyType)> = ["x", "y", "z"].iter().map(|n| (n.to_string(), PlyType::F32)).collect();
    properties.extend(["red", "green", "blue"].iter().map(|n| (n.to_string(), PlyType::U8)));
    let mut vertices = Vec::with_capacity(points.len() * 6);
    for p in points {
        vertices.extend_from_slice(&[p.position.x, p.position.y, p.position.z]);
        vertices.extend(p.color.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round()));
    }
    io::write_ply(
        path,
        &PlyData {
            properties,
            vertices,
            faces: Vec::new(),
        },
    )
}

pub fn read_init_points(path: &Path) -> Result<Vec<InitPoint>> {
    let ply = io::read_ply(path)?;
    let col = |n: &str| ply.column(n).ok_or_else(|| GlsError::load(path, format!("missing property {n}")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let colors = match (ply.column("red"), ply.column("green"), ply.column("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    Ok((0..x.len())
        .map(|i| InitPoint {
            position: Vector3::new(x[i], y[i], z[i]),
            color: match &colors {
                Some((r, g, b)) => [r[i] / 255.0, g[i] / 255.0, b[i] / 255.0],
                None => [0.5; 3],
            },
        })
        .collect())
}
