use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gls_core::container;
use gls_core::losses::ClassifierHead;
use gls_core::mesh::{self, MeshOptions, TriangleMesh};
use gls_core::metrics::{self, MeshMetrics};
use gls_core::priors::{self, LoadOptions, DEFAULT_TOP_K};
use gls_core::query::{select_and_render, QueryEmbedding};
use gls_core::synthetic::{generate_synthetic, save_ground_truth, SyntheticSceneSpec};
use gls_core::trainer::{self, TrainConfig};
use gls_core::Mask;
use serde::{Deserialize, Serialize};

mod logger;

/// The desk-scale scene used by the end-to-end checks.
pub const BUNDLED_SPEC: &str = include_str!("../specs/desk.json");
pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Parser, Debug)]
#[command(name = "gls", version, about = "Gaussian surface reconstruction and open-vocabulary segmentation")]
pub struct Cli {
    /// JSON-lines logs on stdout.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset and its ground truth.
    GenSynthetic(GenArgs),
    Train(TrainArgs),
    /// Fuse rendered depth into a mesh.
    Mesh(MeshArgs),
    /// Select primitives by text query and write per-view masks.
    Query(QueryArgs),
    /// Mesh metrics against a ground-truth mesh.
    Eval(EvalArgs),
    /// mIoU and boundary IoU between two mask directories.
    EvalSeg(EvalSegArgs),
    /// HTTP viewer backend.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene description; the bundled desk scene when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from a resolved-config.json (or a bare training config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Small-scene schedule derived from --iterations.
    #[arg(long, conflicts_with = "config")]
    pub desk: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub top_k: Option<usize>,

    #[arg(long)]
    pub no_normal: bool,
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub no_depth: bool,
    #[arg(long)]
    pub no_smooth: bool,
    #[arg(long)]
    pub sensor_depth: bool,

    #[arg(long)]
    pub alpha_n: Option<f64>,
    #[arg(long)]
    pub alpha_m: Option<f64>,
    #[arg(long)]
    pub alpha_clip: Option<f64>,
    #[arg(long)]
    pub alpha_d: Option<f64>,
    #[arg(long)]
    pub alpha_s: Option<f64>,
    #[arg(long)]
    pub lambda_dssim: Option<f64>,
    #[arg(long)]
    pub sensor_depth_weight: Option<f64>,
    #[arg(long)]
    pub alpha_floor: Option<f64>,
    #[arg(long)]
    pub depth_gate_cos: Option<f64>,

    #[arg(long)]
    pub lr_position_init: Option<f64>,
    #[arg(long)]
    pub lr_position_final: Option<f64>,
    #[arg(long)]
    pub lr_feature: Option<f64>,
    #[arg(long)]
    pub lr_sh_rest: Option<f64>,
    #[arg(long)]
    pub lr_opacity: Option<f64>,
    #[arg(long)]
    pub lr_scaling: Option<f64>,
    #[arg(long)]
    pub lr_rotation: Option<f64>,
    #[arg(long)]
    pub lr_semantic: Option<f64>,
    #[arg(long)]
    pub lr_mlp: Option<f64>,

    #[arg(long)]
    pub no_densify: bool,
    #[arg(long)]
    pub densify_interval: Option<usize>,
    #[arg(long)]
    pub densify_from: Option<usize>,
    #[arg(long)]
    pub densify_until: Option<usize>,
    #[arg(long)]
    pub grad_threshold: Option<f64>,
    #[arg(long)]
    pub abs_grad_threshold: Option<f64>,
    #[arg(long)]
    pub max_points: Option<usize>,
    #[arg(long)]
    pub percent_dense: Option<f64>,
    #[arg(long)]
    pub opacity_reset_interval: Option<usize>,
    #[arg(long)]
    pub cull_threshold: Option<f64>,
    #[arg(long)]
    pub opacity_reset_value: Option<f64>,

    #[arg(long)]
    pub sh_degree: Option<usize>,
    #[arg(long)]
    pub sh_increase_interval: Option<usize>,
    #[arg(long)]
    pub init_opacity: Option<f64>,
    #[arg(long)]
    pub geometry_warmup: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[f64; 3]>,

    /// Any other training field by dotted path, e.g. `densify.max_abs_split_points=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub semantic: bool,
    /// Fuse the blended plane depth instead of the unbiased depth.
    #[arg(long)]
    pub biased_depth: bool,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    pub truncation_voxels: f64,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Dataset supplying the query palette and the views to render.
    #[arg(long)]
    pub data: PathBuf,
    /// Repeatable; every palette entry when omitted.
    #[arg(long = "text-name")]
    pub text_name: Vec<String>,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Repeatable; one table row each.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_BOUNDARY_WIDTH)]
    pub boundary_width: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Static files served next to the API.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub data: PathBuf,
    pub top_k: usize,
    pub train: TrainConfig,
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    logger::init(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(&a),
        Command::Train(a) => train(&a),
        Command::Mesh(a) => mesh_cmd(&a),
        Command::Query(a) => query(&a),
        Command::Eval(a) => eval(&a),
        Command::EvalSeg(a) => eval_seg(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated numbers".to_string())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        bail!("{what} {} is not a directory", p.display());
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_head(scene: &Path, feature_dim: usize) -> Result<ClassifierHead> {
    let p = container::sidecar_path(scene, "head.json");
    if p.exists() {
        Ok(container::read_head(&p)?)
    } else {
        log::warn!("{} not found; semantic output uses an untrained head", p.display());
        Ok(ClassifierHead::zeros(feature_dim, 1))
    }
}

fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let spec: SyntheticSceneSpec = match &a.spec {
        Some(p) => {
            require_file(p, "spec")?;
            serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => serde_json::from_str(BUNDLED_SPEC)?,
    };
    spec.validate()?;
    let (ds, gt) = generate_synthetic(&spec, a.seed)?;
    priors::save_dataset(&ds, &a.out)?;
    save_ground_truth(&gt, &a.out.join("gt"))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    log::info!("wrote {} views to {}", ds.len(), a.out.display());
    Ok(())
}

/// Sets `path` (dot separated) inside `root` to `value`, parsed as JSON when possible.
fn set_path(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {assignment}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key {key}"))?;
    }
    *node = value;
    Ok(())
}

/// Applies the command line on top of `--config`, the desk preset or the defaults.
pub fn resolve_config(a: &TrainArgs) -> Result<ResolvedConfig> {
    let mut top_k = DEFAULT_TOP_K;
    let mut c: TrainConfig = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            match v.get("train") {
                Some(train) => {
                    if let Some(k) = v.get("top_k").and_then(|k| k.as_u64()) {
                        top_k = k as usize;
                    }
                    serde_json::from_value(train.clone())?
                }
                None => serde_json::from_value(v)?,
            }
        }
        None if a.desk => TrainConfig::desk_scale(a.iterations.unwrap_or(2000)),
        None => TrainConfig::default(),
    };

    macro_rules! over {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    over!(a.iterations => c.iterations);
    over!(a.seed => c.seed);
    over!(a.top_k => top_k);
    let t = &mut c.objective.terms;
    t.normal &= !a.no_normal;
    t.mask &= !a.no_mask;
    t.clip &= !a.no_clip;
    t.depth &= !a.no_depth;
    t.smooth &= !a.no_smooth;
    c.use_sensor_depth |= a.sensor_depth;
    let w = &mut c.objective.weights;
    over!(a.alpha_n => w.alpha_n);
    over!(a.alpha_m => w.alpha_m);
    over!(a.alpha_clip => w.alpha_clip);
    over!(a.alpha_d => w.alpha_d);
    over!(a.alpha_s => w.alpha_s);
    over!(a.lambda_dssim => w.lambda_dssim);
    over!(a.sensor_depth_weight => w.sensor_depth);
    over!(a.alpha_floor => c.objective.alpha_floor);
    over!(a.depth_gate_cos => c.objective.depth_gate_cos);
    let lr = &mut c.lr;
    over!(a.lr_position_init => lr.position_init);
    over!(a.lr_position_final => lr.position_final);
    over!(a.lr_feature => lr.feature);
    over!(a.lr_sh_rest => lr.sh_rest);
    over!(a.lr_opacity => lr.opacity);
    over!(a.lr_scaling => lr.scaling);
    over!(a.lr_rotation => lr.rotation);
    over!(a.lr_semantic => lr.semantic);
    over!(a.lr_mlp => lr.mlp);
    let d = &mut c.densify;
    d.enabled &= !a.no_densify;
    over!(a.densify_interval => d.interval);
    over!(a.densify_from => d.from);
    over!(a.densify_until => d.until);
    over!(a.grad_threshold => d.grad_threshold);
    over!(a.abs_grad_threshold => d.abs_grad_threshold);
    over!(a.max_points => d.max_all_points);
    over!(a.percent_dense => d.percent_dense);
    over!(a.opacity_reset_interval => c.opacity.reset_interval);
    over!(a.cull_threshold => c.opacity.cull_threshold);
    over!(a.opacity_reset_value => c.opacity.reset_value);
    over!(a.sh_degree => c.sh_degree);
    over!(a.sh_increase_interval => c.sh_increase_interval);
    over!(a.init_opacity => c.init_opacity);
    over!(a.geometry_warmup => c.geometry_warmup);
    over!(a.checkpoint_interval => c.checkpoint_interval);
    over!(a.background => c.background);

    if !a.set.is_empty() {
        let mut v = serde_json::to_value(&c)?;
        for s in &a.set {
            set_path(&mut v, s)?;
        }
        c = serde_json::from_value(v).context("applying --set")?;
    }
    c.validate()?;
    Ok(ResolvedConfig { data: a.data.clone(), top_k, train: c })
}

fn train(a: &TrainArgs) -> Result<()> {
    require_dir(&a.data, "dataset")?;
    let resolved = resolve_config(a)?;
    let c = &resolved.train;
    let options = LoadOptions {
        require_features: c.objective.terms.clip,
        load_sensor_depth: c.use_sensor_depth,
        top_k: resolved.top_k,
    };
    let ds = priors::load_dataset(&a.data, &options)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join(RESOLVED_CONFIG), &resolved)?;
    log::info!("training {} iterations on {} views", c.iterations, ds.len());
    let out = trainer::train(&ds, c, Some(&a.out))?;
    log::info!(
        "finished: {} primitives, final loss {}",
        out.scene.len(),
        out.final_loss().map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn mesh_cmd(a: &MeshArgs) -> Result<()> {
    require_file(&a.scene, "scene")?;
    require_dir(&a.data, "dataset")?;
    let scene = container::read_scene(&a.scene)?;
    let head = read_head(&a.scene, scene.feature_dim)?;
    let ds = priors::load_dataset(&a.data, &LoadOptions { require_features: false, ..Default::default() })?;
    let options = MeshOptions {
        use_unbiased: !a.biased_depth,
        semantic: a.semantic,
        voxel_size: a.voxel_size,
        truncation_voxels: a.truncation_voxels,
        bounds: ds.init_bounds(),
        ..Default::default()
    };
    let m = mesh::extract_scene_mesh(&scene, &ds.cameras, Some(&head), &options)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    m.write_ply(&a.out)?;
    if a.semantic {
        write_json(&a.out.with_extension("palette.json"), &mesh::palette_json(&m, &ds.class_names))?;
    }
    log::info!("{} vertices, {} triangles", m.vertices.len(), m.triangles.len());
    Ok(())
}

#[derive(Serialize)]
struct QueryReport {
    name: String,
    threshold: f64,
    selected: usize,
    total: usize,
    masks: Vec<String>,
}

fn query(a: &QueryArgs) -> Result<()> {
    require_file(&a.scene, "scene")?;
    require_dir(&a.data, "dataset")?;
    if !(-1.0..=1.0).contains(&a.threshold) {
        bail!("threshold {} is outside [-1, 1]", a.threshold);
    }
    let scene = container::read_scene(&a.scene)?;
    let ds = priors::load_dataset(&a.data, &LoadOptions { require_features: false, ..Default::default() })?;
    let names: Vec<String> = if a.text_name.is_empty() { ds.text_queries.keys().cloned().collect() } else { a.text_name.clone() };
    if let Some(missing) = names.iter().find(|n| !ds.text_queries.contains_key(*n)) {
        bail!("no query named {missing}; known: {}", ds.text_queries.keys().cloned().collect::<Vec<_>>().join(", "));
    }
    let ids: BTreeMap<&str, u16> = ds.class_names.iter().map(|(id, n)| (n.as_str(), *id)).collect();
    std::fs::create_dir_all(&a.out)?;
    let mut reports = Vec::new();
    for name in &names {
        let q = QueryEmbedding { name: name.clone(), vector: ds.text_queries[name].clone() };
        let sel = select_and_render(&scene, &q, a.threshold, &ds.cameras)?;
        // named after the class id when there is one, so the masks line up with the ground truth
        let tag = ids.get(name.as_str()).map_or(name.clone(), |id| id.to_string());
        let mut files = Vec::new();
        for (v, m) in sel.masks.iter().enumerate() {
            let file = format!("{v:04}_{tag}.png");
            gls_core::io::write_mask_png(&a.out.join(&file), m)?;
            files.push(file);
        }
        log::info!("{name}: {} of {} primitives", sel.selection.indices.len(), scene.len());
        reports.push(QueryReport { name: name.clone(), threshold: a.threshold, selected: sel.selection.indices.len(), total: scene.len(), masks: files });
    }
    write_json(&a.out.join("selection.json"), &reports)
}

#[derive(Serialize)]
struct EvalRow {
    pred: PathBuf,
    #[serde(flatten)]
    metrics: MeshMetrics,
}

fn eval(a: &EvalArgs) -> Result<()> {
    require_file(&a.gt, "ground-truth mesh")?;
    for p in &a.pred {
        require_file(p, "predicted mesh")?;
    }
    let gt = TriangleMesh::read_ply(&a.gt)?;
    let mut rows = Vec::new();
    for p in &a.pred {
        let pred = TriangleMesh::read_ply(p)?;
        let metrics = metrics::mesh_metrics(&pred, &gt, a.samples, a.tau, a.seed).with_context(|| format!("evaluating {}", p.display()))?;
        rows.push(EvalRow { pred: p.clone(), metrics });
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<32} {:>9} {:>9} {:>9} {:>7} {:>7}", "mesh", "acc", "comp", "chamfer", "nc", "f")?;
    for r in &rows {
        let m = &r.metrics;
        let name = r.pred.display().to_string();
        writeln!(
            out,
            "{:<32} {:>9.5} {:>9.5} {:>9.5} {:>7.4} {:>7.4}",
            name, m.accuracy, m.completion, m.chamfer_l1, m.normal_consistency, m.f_score
        )?;
    }
    if let Some(path) = &a.out {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

#[derive(Serialize)]
struct SegReport {
    pairs: usize,
    missing_predictions: usize,
    #[serde(flatten)]
    scores: metrics::SegmentationScores,
}

fn eval_seg(a: &EvalSegArgs) -> Result<()> {
    require_dir(&a.pred, "prediction directory")?;
    require_dir(&a.gt, "ground-truth directory")?;
    let names = png_names(&a.gt)?;
    if names.is_empty() {
        bail!("no masks in {}", a.gt.display());
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut missing = 0;
    for n in &names {
        let g = gls_core::io::read_png_mask(&a.gt.join(n))?;
        let p = a.pred.join(n);
        // an object the query never found scores as an empty prediction
        let m = if p.exists() {
            gls_core::io::read_png_mask(&p)?
        } else {
            missing += 1;
            Mask::new(g.width, g.height)
        };
        pred.push(m);
        gt.push(g);
    }
    if missing > 0 {
        log::warn!("{missing} of {} ground-truth masks have no prediction", names.len());
    }
    let scores = metrics::miou_mbiou(&pred, &gt, a.boundary_width)?;
    let report = SegReport { pairs: names.len(), missing_predictions: missing, scores };
    println!("{}", serde_json::to_string(&report)?);
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    require_file(&a.scene, "scene")?;
    if let Some(d) = &a.data {
        require_dir(d, "dataset")?;
    }
    if let Some(u) = &a.ui {
        require_dir(u, "ui directory")?;
    }
    let addr: std::net::SocketAddr = format!("{}:{}", a.bind, a.port).parse().with_context(|| format!("bad address {}:{}", a.bind, a.port))?;
    let snapshot = Arc::new(gls_service::SceneSnapshot::load(&a.scene, a.data.as_deref())?);
    log::info!("serving {} primitives on http://{addr}", snapshot.scene.len());
    gls_service::serve_blocking(snapshot, addr, a.ui.clone())?;
    Ok(())
}
