//! Command-line surface: one binary, seven subcommands covering the full
//! generate / train / climb / evaluate pipeline plus the analysis tools.
//!
//! Every command writes its outputs under a single `-o` directory and appends
//! one JSON line to `manifest.jsonl` there, recording the fully resolved
//! configuration. Exit codes: 0 success, 2 input/validation, 3 numerical
//! divergence, 4 I/O.

use crate::cam;
use crate::climb::{self, ClimbConfig, ClimbError};
use crate::io::{self, IoError};
use crate::metrics::{self, MetricsError, ProbeDirection, ProbeGridConfig, SweepParam};
use crate::model::{self, GapClassifier, ModelError, TrainConfig};
use crate::ops;
use crate::synthdata::{self, DatasetError, DatasetSpec, Record, Split, NUM_CLASSES};
use crate::tensor::Tensor;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or input content — exit 2.
    Validation(String),
    /// Numerical failure (divergence, accuracy gate) — exit 3.
    Numeric(String),
    /// Filesystem failure — exit 4.
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Io(e.to_string()),
            ModelError::Diverged { .. } | ModelError::AccuracyGate { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<cam::CamError> for CliError {
    fn from(e: cam::CamError) -> Self {
        match e {
            cam::CamError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ClimbError> for CliError {
    fn from(e: ClimbError) -> Self {
        match e {
            ClimbError::Divergence { .. } => CliError::Numeric(e.to_string()),
            ClimbError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Climb(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            IoError::Format { .. } => CliError::Validation(e.to_string()),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("io error on {}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "advcam",
    version,
    about = "Attribution-map toolkit: synthetic data, classifier training, \
             adversarial climbing, and seed evaluation"
)]
pub struct Cli {
    /// Worker threads (fallback: ADVCAM_JOBS env var; default: machine parallelism)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic shapes dataset
    GenData(GenDataArgs),
    /// Train the GAP-headed classifier
    Train(TrainArgs),
    /// Run adversarial climbing and export aggregate attribution maps
    Advcam(AdvcamArgs),
    /// Export baseline class activation maps
    Cam(CamArgs),
    /// Evaluate exported maps as segmentation seeds over a threshold range
    EvalSeed(EvalSeedArgs),
    /// Sweep one climbing hyper-parameter and report seed quality per value
    Sweep(SweepArgs),
    /// Sample the classification-loss surface around one image
    Landscape(LandscapeArgs),
}

// --- config file plumbing -------------------------------------------------

struct FileConfig(Option<Value>);

impl FileConfig {
    fn load(path: &Option<PathBuf>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig(None)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| {
                    CliError::Validation(format!("bad config file {}: {e}", p.display()))
                })?;
                Ok(FileConfig(Some(v)))
            }
        }
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.0
            .as_ref()
            .and_then(|v| v.get(key))
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }
}

/// Flag > config file > built-in default.
fn resolve<T: DeserializeOwned>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> T {
    flag.or_else(|| file.get(key)).unwrap_or(default)
}

// --- manifest -------------------------------------------------------------

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config: Value,
    dataset_hash: Option<String>,
    outputs: Vec<String>,
    metrics: Value,
    wall_time_secs: f64,
}

fn append_manifest(out: &Path, manifest: &Manifest) -> Result<(), CliError> {
    use std::io::Write;
    let path = out.join("manifest.jsonl");
    let line = serde_json::to_string(manifest)
        .map_err(|e| CliError::Validation(format!("manifest serialization: {e}")))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_fail(&path, e))?;
    writeln!(f, "{line}").map_err(|e| io_fail(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn index_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("index.json")
    } else {
        data.to_path_buf()
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Validation(format!(
            "unknown split {other:?} (expected train|val|test)"
        ))),
    }
}

/// `a:b:step` inclusive range, or a comma-separated value list.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = |m: &str| CliError::Validation(format!("bad threshold spec {s:?}: {m}"));
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected a:b:step"));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad("non-numeric field")))
            .collect::<Result<_, _>>()?;
        let (a, b, step) = (nums[0], nums[1], nums[2]);
        if step <= 0.0 || b < a {
            return Err(bad("need step > 0 and b >= a"));
        }
        let mut out = Vec::new();
        let mut i = 0usize;
        loop {
            let v = a + step * i as f64;
            if v > b + 1e-12 {
                break;
            }
            out.push(v);
            i += 1;
        }
        Ok(out)
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad("non-numeric value")))
            .collect()
    }
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad grid value {p:?}")))
        })
        .collect()
}

fn load_dataset(data: &Path) -> Result<synthdata::Dataset, CliError> {
    Ok(synthdata::load(&index_path(data))?)
}

fn load_model(path: &Path) -> Result<GapClassifier, CliError> {
    Ok(model::load_checkpoint(path)?.0)
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation; deterministic across runs
    format!("{v}")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

// --- gen-data -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset seed (default: 7)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training images (default: 800)
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation images (default: 100)
    #[arg(long)]
    pub val: Option<usize>,
    /// Test images (default: 100)
    #[arg(long)]
    pub test: Option<usize>,
    /// Minimum objects per image (default: 1)
    #[arg(long)]
    pub objects_min: Option<usize>,
    /// Maximum objects per image (default: 3)
    #[arg(long)]
    pub objects_max: Option<usize>,
    /// Class-specific corner markers on|off (default: on)
    #[arg(long)]
    pub marker_bias: Option<bool>,
    /// Background texture amplitude (default: 0.15)
    #[arg(long)]
    pub background_amplitude: Option<f64>,
    /// JSON config file (flag > file > default)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(&a.config)?;
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        seed: resolve(a.seed, &file, "seed", d.seed),
        train: resolve(a.train, &file, "train", d.train),
        val: resolve(a.val, &file, "val", d.val),
        test: resolve(a.test, &file, "test", d.test),
        objects_min: resolve(a.objects_min, &file, "objects_min", d.objects_min),
        objects_max: resolve(a.objects_max, &file, "objects_max", d.objects_max),
        marker_bias: resolve(a.marker_bias, &file, "marker_bias", d.marker_bias),
        background_amplitude: resolve(
            a.background_amplitude,
            &file,
            "background_amplitude",
            d.background_amplitude,
        ),
    };
    spec.validate()?;
    ensure_dir(&a.out)?;
    let summary = synthdata::generate(&spec, &a.out)?;
    let hash = synthdata::dataset_hash(&summary.index_path)?;
    println!(
        "generated {} records ({}) into {}",
        summary.records,
        summary
            .per_split
            .iter()
            .map(|(s, n)| format!("{s}: {n}"))
            .collect::<Vec<_>>()
            .join(", "),
        a.out.display()
    );
    append_manifest(
        &a.out,
        &Manifest {
            command: "gen-data".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&spec).expect("serializable"),
            dataset_hash: Some(hash),
            outputs: vec!["index.json".into(), "images/".into(), "masks/".into()],
            metrics: json!({ "records": summary.records }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- train ----------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or index.json
    #[arg(long)]
    pub data: PathBuf,
    /// Epochs (default: 30)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default: 0.01)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size (default: 16)
    #[arg(long)]
    pub batch: Option<usize>,
    /// Momentum (default: 0.9)
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay (default: 0)
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Input-noise augmentation amplitude (default: 0)
    #[arg(long)]
    pub augment: Option<f64>,
    /// Training seed (default: 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out accuracy gate; training fails below it. 0 disables (default: 0.95)
    #[arg(long)]
    pub gate: Option<f64>,
    /// JSON config file (flag > file > default)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (checkpoint at model.ckpt)
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_train(a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(&a.config)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: resolve(a.epochs, &file, "epochs", d.epochs),
        lr: resolve(a.lr, &file, "lr", d.lr),
        batch: resolve(a.batch, &file, "batch", d.batch),
        momentum: resolve(a.momentum, &file, "momentum", d.momentum),
        weight_decay: resolve(a.weight_decay, &file, "weight_decay", d.weight_decay),
        augment: resolve(a.augment, &file, "augment", d.augment),
        seed: resolve(a.seed, &file, "seed", d.seed),
        gate: match resolve(a.gate, &file, "gate", d.gate.unwrap_or(0.95)) {
            g if g <= 0.0 => None,
            g => Some(g),
        },
    };
    let dataset = load_dataset(&a.data)?;
    let hash = synthdata::dataset_hash(&index_path(&a.data))?;
    let train_set = dataset.samples(Split::Train);
    let heldout = dataset.samples(Split::Val);
    let (model, report) = model::train(
        &train_set,
        &heldout,
        model::ArchConfig::standard(NUM_CLASSES),
        &cfg,
    )?;
    ensure_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    model::save_checkpoint(&model, &report.meta, &ckpt)?;
    println!(
        "trained {} epochs, held-out accuracy {:.4}, checkpoint {}",
        cfg.epochs,
        report.heldout_accuracy,
        ckpt.display()
    );
    append_manifest(
        &a.out,
        &Manifest {
            command: "train".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&cfg).expect("serializable"),
            dataset_hash: Some(hash),
            outputs: vec!["model.ckpt".into()],
            metrics: json!({
                "heldout_accuracy": report.heldout_accuracy,
                "final_loss": report.meta.final_loss,
            }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- shared climb flag block ----------------------------------------------

#[derive(Args, Debug)]
pub struct ClimbFlags {
    /// Climbing steps T (default: 27)
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Step size xi (default: 0.008)
    #[arg(long)]
    pub xi: Option<f64>,
    /// Masking coefficient lambda (default: 7)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Mask threshold tau (default: 0.5)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Plain climbing only: no masking, no other-class suppression
    #[arg(long)]
    pub plain: bool,
    /// Disable the masking penalty
    #[arg(long)]
    pub no_mask: bool,
    /// Disable other-class suppression
    #[arg(long)]
    pub no_suppress: bool,
    /// Climb the eight multi-scale/flip variants independently
    #[arg(long)]
    pub ensemble: bool,
}

impl ClimbFlags {
    fn resolve(&self, file: &FileConfig) -> ClimbConfig {
        let d = ClimbConfig::default();
        ClimbConfig {
            steps: resolve(self.t, file, "T", d.steps),
            xi: resolve(self.xi, file, "xi", d.xi),
            lambda: resolve(self.lambda, file, "lambda", d.lambda),
            tau: resolve(self.tau, file, "tau", d.tau),
            suppress_others: !(self.plain || self.no_suppress),
            masking: !(self.plain || self.no_mask),
            ensemble: self.ensemble,
        }
    }
}

/// `(record id, image, classes to process)` resolved from either a dataset
/// split or a single image file.
fn resolve_inputs(
    data: &Option<PathBuf>,
    split: &str,
    image: &Option<PathBuf>,
    class: Option<usize>,
) -> Result<(Vec<(String, Tensor, Vec<usize>)>, Option<String>), CliError> {
    match (data, image) {
        (Some(data), None) => {
            let dataset = load_dataset(data)?;
            let hash = synthdata::dataset_hash(&index_path(data))?;
            let split = parse_split(split)?;
            let items = dataset
                .split(split)
                .iter()
                .map(|r: &&Record| {
                    let classes = match class {
                        Some(c) => vec![c],
                        None => r.tags.clone(),
                    };
                    (r.id.clone(), r.image.clone(), classes)
                })
                .collect();
            Ok((items, Some(hash)))
        }
        (None, Some(path)) => {
            let class = class.ok_or_else(|| {
                CliError::Validation("--class is required with --image".into())
            })?;
            let img = io::read_ppm(path)?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            Ok((vec![(id, img, vec![class])], None))
        }
        _ => Err(CliError::Validation(
            "exactly one of --data or --image is required".into(),
        )),
    }
}

fn write_map_pair(
    maps_dir: &Path,
    id: &str,
    class: usize,
    map: &Tensor,
    image_h: usize,
    image_w: usize,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    let stem = format!("{id}_c{class}");
    let amap = maps_dir.join(format!("{stem}.f64"));
    io::write_amap(map, &amap)?;
    let up = ops::bilinear_resize_hw(map, image_h, image_w)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    io::write_pgm_normalized(&up, &maps_dir.join(format!("{stem}.pgm")))?;
    outputs.push(format!("maps/{stem}.f64"));
    outputs.push(format!("maps/{stem}.pgm"));
    Ok(())
}

// --- advcam ---------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AdvcamArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or index.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split (default: test)
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Single PPM image instead of a dataset
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Class id (required with --image; restricts dataset runs to one class)
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub climb: ClimbFlags,
    /// Also write per-step raw CAMs under steps/
    #[arg(long)]
    pub export_steps: bool,
    /// Also write per-step GAP feature vectors as CSV under features/
    #[arg(long)]
    pub export_features: bool,
    /// JSON config file (flag > file > default)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_advcam(a: &AdvcamArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(&a.config)?;
    let cfg = a.climb.resolve(&file);
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let (items, hash) = resolve_inputs(&a.data, &a.split, &a.image, a.class)?;
    ensure_dir(&a.out)?;
    let maps_dir = a.out.join("maps");
    ensure_dir(&maps_dir)?;
    if a.export_steps {
        ensure_dir(&a.out.join("steps"))?;
    }
    if a.export_features {
        ensure_dir(&a.out.join("features"))?;
    }

    use rayon::prelude::*;
    let jobs: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, classes))| classes.iter().map(move |&c| (i, c)))
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(i, c)| -> Result<(usize, usize, climb::ClimbTrajectory), CliError> {
            let traj = climb::run_climb(&model, &items[i].1, c, &cfg)?;
            Ok((i, c, traj))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut outputs = Vec::new();
    for (i, c, traj) in &trajectories {
        let (id, img, _) = &items[*i];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        write_map_pair(&maps_dir, id, *c, &traj.aggregate, h, w, &mut outputs)?;
        if a.export_steps {
            for (t, cam_t) in traj.cams.iter().enumerate() {
                let p = a.out.join(format!("steps/{id}_c{c}_t{t}.f64"));
                io::write_amap(cam_t, &p)?;
                outputs.push(format!("steps/{id}_c{c}_t{t}.f64"));
            }
        }
        if a.export_features {
            let vecs = metrics::feature_trajectory(&model, traj)?;
            let mut csv = String::from("step,");
            csv.push_str(
                &(0..vecs[0].len())
                    .map(|k| format!("f{k}"))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            csv.push('\n');
            for (t, v) in vecs.iter().enumerate() {
                csv.push_str(&format!(
                    "{t},{}\n",
                    v.data().iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
                ));
            }
            let p = a.out.join(format!("features/{id}_c{c}.csv"));
            write_text(&p, &csv)?;
            outputs.push(format!("features/{id}_c{c}.csv"));
        }
    }
    println!(
        "wrote {} aggregate maps to {}",
        trajectories.len(),
        maps_dir.display()
    );
    append_manifest(
        &a.out,
        &Manifest {
            command: "advcam".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&cfg).expect("serializable"),
            dataset_hash: hash,
            outputs,
            metrics: json!({ "maps": trajectories.len() }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- cam ------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct CamArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or index.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split (default: test)
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Single PPM image instead of a dataset
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Class id (required with --image)
    #[arg(long)]
    pub class: Option<usize>,
    /// Multi-scale/flip ensemble instead of a single view
    #[arg(long)]
    pub ensemble: bool,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_cam(a: &CamArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let (items, hash) = resolve_inputs(&a.data, &a.split, &a.image, a.class)?;
    ensure_dir(&a.out)?;
    let maps_dir = a.out.join("maps");
    ensure_dir(&maps_dir)?;

    use rayon::prelude::*;
    let jobs: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, classes))| classes.iter().map(move |&c| (i, c)))
        .collect();
    let maps = jobs
        .par_iter()
        .map(|&(i, c)| -> Result<(usize, usize, Tensor), CliError> {
            let img = &items[i].1;
            let m = if a.ensemble {
                cam::ensemble_cam(&model, img, c, &cam::ENSEMBLE_SCALES, true)?
            } else {
                cam::extract_cam(&model, img, c)?
            };
            Ok((i, c, m.normalized()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut outputs = Vec::new();
    for (i, c, map) in &maps {
        let (id, img, _) = &items[*i];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        write_map_pair(&maps_dir, id, *c, map, h, w, &mut outputs)?;
    }
    println!("wrote {} maps to {}", maps.len(), maps_dir.display());
    append_manifest(
        &a.out,
        &Manifest {
            command: "cam".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: json!({ "ensemble": a.ensemble }),
            dataset_hash: hash,
            outputs,
            metrics: json!({ "maps": maps.len() }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- eval-seed ------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalSeedArgs {
    /// Directory of {id}_c{class}.f64 maps
    #[arg(long)]
    pub maps: PathBuf,
    /// Dataset directory or index.json
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset split (default: test)
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Foreground thresholds, a:b:step or comma list (default: 0.05:0.95:0.05)
    #[arg(long, default_value = "0.05:0.95:0.05")]
    pub thresholds: String,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn eval_items_from_dir(
    maps_dir: &Path,
    records: &[&Record],
) -> Result<Vec<metrics::EvalItem>, CliError> {
    records
        .iter()
        .map(|r| {
            let (h, w) = (r.image.shape()[1], r.image.shape()[2]);
            let maps = r
                .tags
                .iter()
                .map(|&c| -> Result<(usize, Tensor), CliError> {
                    let path = maps_dir.join(format!("{}_c{c}.f64", r.id));
                    if !path.exists() {
                        return Err(CliError::Validation(format!(
                            "missing map {} for record {} class {c}",
                            path.display(),
                            r.id
                        )));
                    }
                    let m = io::read_amap(&path)?;
                    let up = ops::bilinear_resize_hw(&m, h, w)
                        .map_err(|e| CliError::Validation(e.to_string()))?;
                    Ok((c, up))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(metrics::EvalItem {
                maps,
                gt: metrics::gt_seed(r),
            })
        })
        .collect()
}

fn curve_csv(points: &[metrics::ThresholdPoint]) -> String {
    let mut csv = String::from("theta,miou,noise\n");
    for p in points {
        csv.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.theta),
            fmt_f64(p.miou),
            fmt_f64(p.noise)
        ));
    }
    csv
}

fn run_eval_seed(a: &EvalSeedArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let dataset = load_dataset(&a.data)?;
    let hash = synthdata::dataset_hash(&index_path(&a.data))?;
    let split = parse_split(&a.split)?;
    let records = dataset.split(split);
    let thetas = parse_thresholds(&a.thresholds)?;
    let items = eval_items_from_dir(&a.maps, &records)?;
    let curve = metrics::threshold_sweep(&items, &thetas, NUM_CLASSES)?;
    ensure_dir(&a.out)?;
    write_text(&a.out.join("curve.csv"), &curve_csv(&curve.points))?;
    write_text(&a.out.join("best.csv"), &curve_csv(&[curve.best]))?;
    println!(
        "best threshold {}: mIoU {:.4}, noise {:.4} ({} thresholds, {} records)",
        curve.best.theta,
        curve.best.miou,
        curve.best.noise,
        curve.points.len(),
        records.len()
    );
    append_manifest(
        &a.out,
        &Manifest {
            command: "eval-seed".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: json!({ "thresholds": a.thresholds, "split": a.split }),
            dataset_hash: Some(hash),
            outputs: vec!["curve.csv".into(), "best.csv".into()],
            metrics: json!({
                "best_theta": curve.best.theta,
                "best_miou": curve.best.miou,
                "best_noise": curve.best.noise,
            }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- sweep ----------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or index.json
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset split (default: test)
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Hyper-parameter to vary: lambda|tau|xi|T
    #[arg(long)]
    pub param: String,
    /// Comma-separated parameter values
    #[arg(long)]
    pub grid: String,
    /// Foreground thresholds (default: 0.05:0.95:0.05)
    #[arg(long, default_value = "0.05:0.95:0.05")]
    pub thresholds: String,
    #[command(flatten)]
    pub climb: ClimbFlags,
    /// JSON config file (flag > file > default)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(&a.config)?;
    let base = a.climb.resolve(&file);
    base.validate()?;
    let param = match a.param.as_str() {
        "lambda" => SweepParam::Lambda,
        "tau" => SweepParam::Tau,
        "xi" => SweepParam::Xi,
        "T" => SweepParam::Steps,
        other => {
            return Err(CliError::Validation(format!(
                "unknown sweep param {other:?} (expected lambda|tau|xi|T)"
            )))
        }
    };
    let grid = parse_grid(&a.grid)?;
    let thetas = parse_thresholds(&a.thresholds)?;
    let model = load_model(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let hash = synthdata::dataset_hash(&index_path(&a.data))?;
    let records = dataset.split(parse_split(&a.split)?);
    let rows = metrics::sweep(&model, &records, param, &grid, &base, &thetas, NUM_CLASSES)?;

    let mut csv = format!("{},best_theta,best_miou,noise_at_best\n", a.param);
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(r.value),
            fmt_f64(r.best_theta),
            fmt_f64(r.best_miou),
            fmt_f64(r.noise_at_best)
        ));
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join("sweep.csv"), &csv)?;
    println!("swept {} over {} values -> {}", a.param, rows.len(), a.out.join("sweep.csv").display());
    append_manifest(
        &a.out,
        &Manifest {
            command: "sweep".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: json!({
                "param": a.param,
                "grid": grid,
                "thresholds": a.thresholds,
                "base": serde_json::to_value(&base).expect("serializable"),
            }),
            dataset_hash: Some(hash),
            outputs: vec!["sweep.csv".into()],
            metrics: json!({ "rows": rows.len() }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- landscape ------------------------------------------------------------

#[derive(Args, Debug)]
pub struct LandscapeArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    /// PPM image to probe around
    #[arg(long)]
    pub image: PathBuf,
    /// Class id
    #[arg(long)]
    pub class: usize,
    /// Probe direction (default: climb)
    #[arg(long, default_value = "climb")]
    pub direction: String,
    /// Grid bounds along the climb/attack axis (default: -0.05, 0.05)
    #[arg(long, allow_hyphen_values = true)]
    pub a_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub a_max: Option<f64>,
    /// Grid bounds along the random axis (default: -0.05, 0.05)
    #[arg(long, allow_hyphen_values = true)]
    pub b_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b_max: Option<f64>,
    /// Grid points per axis (default: 11)
    #[arg(long)]
    pub steps: Option<usize>,
    /// RNG seed for the random direction (default: 0)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run_landscape(a: &LandscapeArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let image = io::read_ppm(&a.image)?;
    let direction = match a.direction.as_str() {
        "climb" => ProbeDirection::Climb,
        "attack" => ProbeDirection::Attack,
        other => {
            return Err(CliError::Validation(format!(
                "unknown direction {other:?} (expected climb|attack)"
            )))
        }
    };
    let d = ProbeGridConfig::default();
    let grid = ProbeGridConfig {
        a_min: a.a_min.unwrap_or(d.a_min),
        a_max: a.a_max.unwrap_or(d.a_max),
        b_min: a.b_min.unwrap_or(d.b_min),
        b_max: a.b_max.unwrap_or(d.b_max),
        steps: a.steps.unwrap_or(d.steps),
    };
    let ls = metrics::landscape_probe(&model, &image, a.class, direction, &grid, a.seed)?;

    let mut csv = String::from("a,b,loss\n");
    for (i, &av) in ls.a_values.iter().enumerate() {
        for (j, &bv) in ls.b_values.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(av),
                fmt_f64(bv),
                fmt_f64(ls.values[i * ls.b_values.len() + j])
            ));
        }
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join("landscape.csv"), &csv)?;
    println!(
        "probed {}x{} grid around {} (base loss {})",
        ls.a_values.len(),
        ls.b_values.len(),
        a.image.display(),
        ls.base_loss
    );
    append_manifest(
        &a.out,
        &Manifest {
            command: "landscape".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: json!({
                "direction": a.direction,
                "grid": serde_json::to_value(&grid).expect("serializable"),
                "seed": a.seed,
                "class": a.class,
            }),
            dataset_hash: None,
            outputs: vec!["landscape.csv".into()],
            metrics: json!({ "base_loss": ls.base_loss }),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

// --- entry point ----------------------------------------------------------

fn configure_jobs(jobs: Option<usize>) {
    let n = jobs.or_else(|| {
        std::env::var("ADVCAM_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // ignore the error if a pool already exists (tests, repeated calls)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> i32 {
    configure_jobs(cli.jobs);
    let result = match &cli.command {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Advcam(a) => run_advcam(a),
        Command::Cam(a) => run_cam(a),
        Command::EvalSeed(a) => run_eval_seed(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Landscape(a) => run_landscape(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
