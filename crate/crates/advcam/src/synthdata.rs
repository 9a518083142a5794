//! Desk-scale synthetic benchmark: multi-label shape images with exact
//! pixel-level ground truth.
//!
//! With `marker_bias` on, every shape carries a small high-contrast
//! class-specific marker patch. The marker is a shortcut feature: the
//! classifier can solve the task from a few pixels, which keeps its
//! discriminative CAM regions much smaller than the objects themselves and
//! gives climbing room to expand them.

use crate::io::{self, IoError};
use crate::model::Sample;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const NUM_CLASSES: usize = 4;
pub const IMAGE_SIZE: usize = 64;
/// Distinguished background id in masks and seeds.
pub const BACKGROUND_ID: u8 = 255;
/// Minimum pixel count a tagged class must occupy in the ground truth.
pub const MIN_CLASS_PIXELS: usize = 40;
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("io error on {path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("index parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("record {record}: {reason}")]
    Inconsistent { record: String, reason: String },
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
    #[error("could not render a valid image for record {record} after {attempts} attempts")]
    RenderFailed { record: String, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub marker_bias: bool,
    pub background_amplitude: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 7,
            train: 800,
            val: 100,
            test: 100,
            objects_min: 1,
            objects_max: 3,
            marker_bias: true,
            background_amplitude: 0.15,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(DatasetError::Invalid("all split counts must be >= 1".into()));
        }
        if self.objects_min == 0
            || self.objects_min > self.objects_max
            || self.objects_max > NUM_CLASSES
        {
            return Err(DatasetError::Invalid(format!(
                "objects per image must satisfy 1 <= min <= max <= {NUM_CLASSES}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    split: Split,
    image: String,
    mask: String,
    tags: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    classes: Vec<String>,
    spec: DatasetSpec,
    records: Vec<IndexRecord>,
}

/// One loaded example with its exact ground truth.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub split: Split,
    pub image: Tensor,
    pub mask: Vec<u8>,
    pub tags: Vec<usize>,
}

impl Record {
    pub fn to_sample(&self, num_classes: usize) -> Sample {
        let mut targets = Tensor::zeros(&[num_classes]);
        for &t in &self.tags {
            targets.data_mut()[t] = 1.0;
        }
        Sample {
            image: self.image.clone(),
            targets,
        }
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.split(split)
            .iter()
            .map(|r| r.to_sample(NUM_CLASSES))
            .collect()
    }

    /// Deterministic shuffled index order for a given seed.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }
}

// --- rendering -----------------------------------------------------------

#[derive(Clone, Copy)]
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const BASE_HUES: [f64; NUM_CLASSES] = [0.0, 120.0, 220.0, 55.0];

fn inside(shape: &Shape, px: f64, py: f64) -> bool {
    let dx = px - shape.cx;
    let dy = py - shape.cy;
    let r = shape.r;
    match shape.class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
        2 => {
            // upward triangle with vertices (0,-r), (-0.95r, 0.75r), (0.95r, 0.75r)
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (-0.95 * r, 0.75 * r);
            let (cx2, cy2) = (0.95 * r, 0.75 * r);
            let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, cx2, cy2);
            let d3 = sign(cx2, cy2, ax, ay);
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }
        _ => {
            let arm = 0.35 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Supersampled coverage of a shape over one pixel (3x3 grid).
fn coverage(shape: &Shape, x: usize, y: usize) -> f64 {
    let mut hit = 0;
    for sy in 0..3 {
        for sx in 0..3 {
            let px = x as f64 + (sx as f64 + 0.5) / 3.0;
            let py = y as f64 + (sy as f64 + 0.5) / 3.0;
            if inside(shape, px, py) {
                hit += 1;
            }
        }
    }
    hit as f64 / 9.0
}

/// 3x3 high-contrast marker patterns, one per class (1 = lit, 0 = black).
/// Lit cells render in the class's fully saturated base hue: the marker is
/// the one place the class colour appears without jitter, so it is both the
/// most reliable cue and a tiny one — the shortcut that keeps the
/// discriminative region small.
const MARKERS: [[u8; 9]; NUM_CLASSES] = [
    [1, 0, 1, 0, 1, 0, 1, 0, 1],
    [1, 1, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 1, 1, 0, 0, 0, 1, 1, 1],
];

struct Rendered {
    image: Tensor,
    mask: Vec<u8>,
}

fn render(rng: &mut ChaCha8Rng, spec: &DatasetSpec, tags: &[usize]) -> Rendered {
    let n = IMAGE_SIZE;
    // low-frequency background: coarse per-channel noise, bilinear upsampled
    let coarse = 8usize;
    let mut image = Tensor::zeros(&[3, n, n]);
    {
        let mut grid = Tensor::zeros(&[3, coarse, coarse]);
        for v in grid.data_mut() {
            *v = 0.5 + rng.gen_range(-1.0..1.0) * spec.background_amplitude;
        }
        let up = crate::ops::bilinear_resize_chw(&grid, n, n).expect("resize");
        for (dst, &src) in image.data_mut().iter_mut().zip(up.data()) {
            *dst = src.clamp(0.0, 1.0);
        }
    }
    let mut mask = vec![BACKGROUND_ID; n * n];

    for &class in tags {
        let r: f64 = rng.gen_range(8.0..=20.0);
        let margin = r.ceil() + 1.0;
        let cx = rng.gen_range(margin..(n as f64 - margin));
        let cy = rng.gen_range(margin..(n as f64 - margin));
        let hue = BASE_HUES[class] + rng.gen_range(-30.0..30.0);
        let sat = rng.gen_range(0.35..0.75);
        let val = rng.gen_range(0.45..0.85);
        let shape = Shape {
            class,
            cx,
            cy,
            r,
            color: hsv_to_rgb(hue, sat, val),
        };

        let y0 = ((cy - r - 2.0).floor().max(0.0)) as usize;
        let y1 = ((cy + r + 2.0).ceil().min(n as f64)) as usize;
        let x0 = ((cx - r - 2.0).floor().max(0.0)) as usize;
        let x1 = ((cx + r + 2.0).ceil().min(n as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let a = coverage(&shape, x, y);
                if a > 0.0 {
                    for c in 0..3 {
                        let idx = (c * n + y) * n + x;
                        let bg = image.data()[idx];
                        image.data_mut()[idx] = bg * (1.0 - a) + shape.color[c] * a;
                    }
                }
                if a > 0.5 {
                    mask[y * n + x] = class as u8;
                }
            }
        }

        if spec.marker_bias {
            // 3x3 marker at the shape center; the center is always inside
            let my = cy.round() as usize;
            let mx = cx.round() as usize;
            let lit = hsv_to_rgb(BASE_HUES[class], 1.0, 1.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let y = my + dy - 1;
                    let x = mx + dx - 1;
                    if y < n && x < n {
                        let on = MARKERS[class][dy * 3 + dx] == 1;
                        for c in 0..3 {
                            image.data_mut()[(c * n + y) * n + x] =
                                if on { lit[c] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    // quantize exactly as the on-disk representation, so in-memory use and
    // generate->load round trips agree bit for bit
    for v in image.data_mut() {
        *v = io::quantize(*v) as f64 / 255.0;
    }
    Rendered { image, mask }
}

fn mask_consistent(mask: &[u8], tags: &[usize]) -> Result<(), String> {
    let mut counts = [0usize; NUM_CLASSES];
    for &m in mask {
        if m != BACKGROUND_ID {
            if m as usize >= NUM_CLASSES {
                return Err(format!("mask value {m} is not a class or background"));
            }
            counts[m as usize] += 1;
        }
    }
    for c in 0..NUM_CLASSES {
        let tagged = tags.contains(&c);
        if tagged && counts[c] < MIN_CLASS_PIXELS {
            return Err(format!(
                "tagged class {} occupies {} px (< {MIN_CLASS_PIXELS})",
                CLASS_NAMES[c], counts[c]
            ));
        }
        if !tagged && counts[c] > 0 {
            return Err(format!(
                "untagged class {} occupies {} px",
                CLASS_NAMES[c], counts[c]
            ));
        }
    }
    Ok(())
}

fn render_record(spec: &DatasetSpec, global_idx: usize) -> Result<(Vec<usize>, Rendered), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(global_idx as u64),
    );
    let attempts = 100;
    for _ in 0..attempts {
        let count = rng.gen_range(spec.objects_min..=spec.objects_max);
        let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
        for i in (1..classes.len()).rev() {
            let j = rng.gen_range(0..=i);
            classes.swap(i, j);
        }
        let tags: Vec<usize> = {
            let mut t = classes[..count].to_vec();
            t.sort_unstable();
            t
        };
        let rendered = render(&mut rng, spec, &classes[..count]);
        if mask_consistent(&rendered.mask, &tags).is_ok() {
            return Ok((tags, rendered));
        }
    }
    Err(DatasetError::RenderFailed {
        record: format!("{global_idx:04}"),
        attempts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub per_split: Vec<(String, usize)>,
    pub index_path: PathBuf,
}

/// Renders the dataset to `dir`: `index.json`, `images/NNNN.ppm`,
/// `masks/NNNN.pgm`. Bit-identical for identical specs.
pub fn generate(spec: &DatasetSpec, dir: &Path) -> Result<DatasetSummary, DatasetError> {
    spec.validate()?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    for d in [dir, &images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| DatasetError::File {
            path: d.display().to_string(),
            source: e,
        })?;
    }

    let plan: Vec<(usize, Split)> = (0..spec.train)
        .map(|_| Split::Train)
        .chain((0..spec.val).map(|_| Split::Val))
        .chain((0..spec.test).map(|_| Split::Test))
        .enumerate()
        .collect();

    let records: Vec<IndexRecord> = plan
        .par_iter()
        .map(|&(idx, split)| -> Result<IndexRecord, DatasetError> {
            let (tags, rendered) = render_record(spec, idx)?;
            let id = format!("{idx:04}");
            let image_rel = format!("images/{id}.ppm");
            let mask_rel = format!("masks/{id}.pgm");
            io::write_ppm(&rendered.image, &dir.join(&image_rel))?;
            io::write_pgm_bytes(&rendered.mask, IMAGE_SIZE, IMAGE_SIZE, &dir.join(&mask_rel))?;
            Ok(IndexRecord {
                id,
                split,
                image: image_rel,
                mask: mask_rel,
                tags,
            })
        })
        .collect::<Result<_, _>>()?;

    let index = Index {
        version: INDEX_VERSION,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        spec: spec.clone(),
        records,
    };
    let index_path = dir.join("index.json");
    let json = serde_json::to_vec_pretty(&index).expect("serialize index");
    std::fs::write(&index_path, json).map_err(|e| DatasetError::File {
        path: index_path.display().to_string(),
        source: e,
    })?;

    Ok(DatasetSummary {
        records: index.records.len(),
        per_split: [
            ("train".to_string(), spec.train),
            ("val".to_string(), spec.val),
            ("test".to_string(), spec.test),
        ]
        .to_vec(),
        index_path,
    })
}

/// Loads a generated dataset, validating the tag/mask invariants of every
/// record.
pub fn load(index_path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(index_path).map_err(|e| DatasetError::File {
        path: index_path.display().to_string(),
        source: e,
    })?;
    let index: Index = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Parse {
        path: index_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if index.version != INDEX_VERSION {
        return Err(DatasetError::Parse {
            path: index_path.display().to_string(),
            reason: format!("unsupported index version {}", index.version),
        });
    }
    let base = index_path.parent().unwrap_or(Path::new("."));
    let records = index
        .records
        .par_iter()
        .map(|r| -> Result<Record, DatasetError> {
            let image = io::read_ppm(&base.join(&r.image))?;
            let (mask, h, w) = io::read_pgm_bytes(&base.join(&r.mask))?;
            if image.shape() != [3, h, w] {
                return Err(DatasetError::Inconsistent {
                    record: r.id.clone(),
                    reason: "image and mask extents differ".into(),
                });
            }
            mask_consistent(&mask, &r.tags).map_err(|reason| DatasetError::Inconsistent {
                record: r.id.clone(),
                reason,
            })?;
            Ok(Record {
                id: r.id.clone(),
                split: r.split,
                image,
                mask,
                tags: r.tags.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        spec: index.spec,
        records,
    })
}

/// Sha-256 of the index file, hex-encoded; identifies a dataset in manifests.
pub fn dataset_hash(index_path: &Path) -> Result<String, DatasetError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(index_path).map_err(|e| DatasetError::File {
        path: index_path.display().to_string(),
        source: e,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
