//! Evaluation instruments: seed generation, mIoU, noise proportion,
//! amplification-ratio distributions, threshold and hyper-parameter sweeps,
//! and the loss-landscape probe.

use crate::climb::{self, ClimbConfig, ClimbError, ClimbTrajectory};
use crate::model::GapClassifier;
use crate::ops;
use crate::synthdata::{Record, BACKGROUND_ID};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Climb(#[from] ClimbError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("degenerate landscape direction: the loss gradient is zero")]
    DegenerateDirection,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Discrete per-pixel label map: class ids plus [`BACKGROUND_ID`].
#[derive(Debug, Clone, PartialEq)]
pub struct Seed {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Foreground threshold this seed was produced with.
    pub theta: f64,
}

/// Per-pixel argmax over per-class maps, background where every map falls
/// below `theta`. Ties break toward the lowest class id.
pub fn seed_from_maps(maps: &[(usize, Tensor)], theta: f64) -> Result<Seed, MetricsError> {
    if maps.is_empty() {
        return Err(MetricsError::Invalid("no maps supplied".into()));
    }
    let (h, w) = (maps[0].1.shape()[0], maps[0].1.shape()[1]);
    for (_, m) in maps {
        if m.shape() != [h, w] {
            return Err(MetricsError::Invalid("maps disagree on extent".into()));
        }
    }
    let mut labels = vec![BACKGROUND_ID; h * w];
    for i in 0..h * w {
        let mut best = f64::NEG_INFINITY;
        let mut best_class = BACKGROUND_ID;
        for (class, m) in maps {
            let v = m.data()[i];
            let c = *class as u8;
            // ties break toward the lowest class id
            if v > best || (v == best && c < best_class) {
                best = v;
                best_class = c;
            }
        }
        if best >= theta {
            labels[i] = best_class;
        }
    }
    Ok(Seed {
        labels,
        height: h,
        width: w,
        theta,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IouReport {
    /// `(label, iou)` for every label present in prediction or ground truth;
    /// background participates as a class of its own.
    pub per_class: Vec<(u8, f64)>,
    pub mean: f64,
}

/// Intersection/union tallies accumulated over any number of label pairs,
/// VOC style: counts are pooled before the division.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    num_classes: usize,
    inter: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
    // noise tallies
    fg_pred: u64,
    fg_pred_over_bg: u64,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IouAccumulator {
            num_classes,
            inter: vec![0; num_classes + 1],
            pred: vec![0; num_classes + 1],
            gt: vec![0; num_classes + 1],
            fg_pred: 0,
            fg_pred_over_bg: 0,
        }
    }

    fn slot(&self, label: u8) -> usize {
        if label == BACKGROUND_ID {
            self.num_classes
        } else {
            label as usize
        }
    }

    pub fn add(&mut self, pred: &Seed, gt: &Seed) -> Result<(), MetricsError> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(MetricsError::ShapeMismatch {
                pred: (pred.height, pred.width),
                gt: (gt.height, gt.width),
            });
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let ps = self.slot(p);
            let gs = self.slot(g);
            self.pred[ps] += 1;
            self.gt[gs] += 1;
            if ps == gs {
                self.inter[ps] += 1;
            }
            if p != BACKGROUND_ID {
                self.fg_pred += 1;
                if g == BACKGROUND_ID {
                    self.fg_pred_over_bg += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for i in 0..=self.num_classes {
            self.inter[i] += other.inter[i];
            self.pred[i] += other.pred[i];
            self.gt[i] += other.gt[i];
        }
        self.fg_pred += other.fg_pred;
        self.fg_pred_over_bg += other.fg_pred_over_bg;
    }

    /// Mean IoU over labels present in prediction or ground truth; labels
    /// absent from both sides are excluded from the mean.
    pub fn report(&self) -> IouReport {
        let mut per_class = Vec::new();
        let mut sum = 0.0;
        for i in 0..=self.num_classes {
            let union = self.pred[i] + self.gt[i] - self.inter[i];
            if union == 0 {
                continue;
            }
            let label = if i == self.num_classes {
                BACKGROUND_ID
            } else {
                i as u8
            };
            let iou = self.inter[i] as f64 / union as f64;
            per_class.push((label, iou));
            sum += iou;
        }
        let mean = if per_class.is_empty() {
            0.0
        } else {
            sum / per_class.len() as f64
        };
        IouReport { per_class, mean }
    }

    /// Fraction of predicted-foreground pixels lying over true background;
    /// 0 when nothing was predicted foreground.
    pub fn noise_proportion(&self) -> f64 {
        if self.fg_pred == 0 {
            0.0
        } else {
            self.fg_pred_over_bg as f64 / self.fg_pred as f64
        }
    }
}

pub fn miou(pred: &Seed, gt: &Seed, num_classes: usize) -> Result<IouReport, MetricsError> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

pub fn noise_proportion(pred: &Seed, gt: &Seed) -> Result<f64, MetricsError> {
    // the class count only sizes the tally vectors; 255 admits any u8 label
    let mut acc = IouAccumulator::new(255);
    acc.add(pred, gt)?;
    Ok(acc.noise_proportion())
}

pub fn gt_seed(record: &Record) -> Seed {
    let n = (record.mask.len() as f64).sqrt() as usize;
    Seed {
        labels: record.mask.clone(),
        height: n,
        width: n,
        theta: f64::NAN,
    }
}

/// One evaluable item: per-class score maps at image resolution plus the
/// ground-truth label map.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub maps: Vec<(usize, Tensor)>,
    pub gt: Seed,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThresholdPoint {
    pub theta: f64,
    pub miou: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCurve {
    pub points: Vec<ThresholdPoint>,
    pub best: ThresholdPoint,
}

/// Dataset-level mIoU and noise for every threshold; `best` maximizes mIoU
/// (first maximizer wins on ties).
pub fn threshold_sweep(
    items: &[EvalItem],
    thetas: &[f64],
    num_classes: usize,
) -> Result<SweepCurve, MetricsError> {
    if thetas.is_empty() {
        return Err(MetricsError::Invalid("empty threshold list".into()));
    }
    let points = thetas
        .par_iter()
        .map(|&theta| -> Result<ThresholdPoint, MetricsError> {
            let mut acc = IouAccumulator::new(num_classes);
            for item in items {
                let seed = seed_from_maps(&item.maps, theta)?;
                acc.add(&seed, &item.gt)?;
            }
            Ok(ThresholdPoint {
                theta,
                miou: acc.report().mean,
                noise: acc.noise_proportion(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let best = *points
        .iter()
        .max_by(|a, b| a.miou.partial_cmp(&b.miou).expect("finite miou"))
        .expect("non-empty");
    Ok(SweepCurve { points, best })
}

// --- amplification ratios (discriminative vs non-discriminative regions) --

#[derive(Debug, Clone, Serialize)]
pub struct StepAmplification {
    pub step: usize,
    pub ratios_discriminative: Vec<f64>,
    pub ratios_non_discriminative: Vec<f64>,
    pub median_discriminative: Option<f64>,
    pub median_non_discriminative: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AmplificationStats {
    pub per_step: Vec<StepAmplification>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Per-step pixel amplification ratios s = CAM(x^t)_i / CAM(x^0)_i over the
/// discriminative region (normalized initial CAM >= 0.5) and the
/// non-discriminative region (0.1 < normalized < 0.5). Pixels with zero
/// initial raw CAM are excluded.
pub fn amplification_stats(traj: &ClimbTrajectory) -> AmplificationStats {
    let raw0 = &traj.cams[0];
    let norm0 = crate::cam::normalize_map(raw0);
    let mut rd_idx = Vec::new();
    let mut rnd_idx = Vec::new();
    for i in 0..raw0.len() {
        if raw0.data()[i] == 0.0 {
            continue;
        }
        let v = norm0.data()[i];
        if v >= 0.5 {
            rd_idx.push(i);
        } else if v > 0.1 {
            rnd_idx.push(i);
        }
    }
    let per_step = traj
        .cams
        .iter()
        .enumerate()
        .map(|(step, cam_t)| {
            let ratio = |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .map(|&i| cam_t.data()[i] / raw0.data()[i])
                    .collect()
            };
            let rd = ratio(&rd_idx);
            let rnd = ratio(&rnd_idx);
            StepAmplification {
                step,
                median_discriminative: median(&rd),
                median_non_discriminative: median(&rnd),
                ratios_discriminative: rd,
                ratios_non_discriminative: rnd,
            }
        })
        .collect();
    AmplificationStats { per_step }
}

// --- loss landscape probe -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDirection {
    Climb,
    Attack,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeGridConfig {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub steps: usize,
}

impl Default for ProbeGridConfig {
    fn default() -> Self {
        ProbeGridConfig {
            a_min: -0.05,
            a_max: 0.05,
            b_min: -0.05,
            b_max: 0.05,
            steps: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub direction: ProbeDirection,
    pub rng_seed: u64,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// Loss surface, indexed `[a][b]` row-major.
    pub values: Vec<f64>,
    pub base_loss: f64,
    /// Unit direction along the climb/attack axis.
    pub normal: Tensor,
    /// Unit random direction, orthogonal to `normal`.
    pub random: Tensor,
}

fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Target-class classification loss used by the probe: BCE of the class
/// logit against target 1.
pub fn probe_loss(model: &GapClassifier, x: &Tensor, class_id: usize) -> Result<f64, MetricsError> {
    let (logits, _) = model
        .forward(x)
        .map_err(|e| MetricsError::Climb(ClimbError::Model(e)))?;
    Ok(ops::bce_target_one(logits.data()[class_id]))
}

/// Samples the loss surface over a grid spanned by the (unit) climb or
/// attack direction and a random unit direction orthogonalized against it.
pub fn landscape_probe(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
    direction: ProbeDirection,
    grid: &ProbeGridConfig,
    rng_seed: u64,
) -> Result<LandscapeGrid, MetricsError> {
    if grid.steps == 0 {
        return Err(MetricsError::Invalid("grid needs at least one step".into()));
    }
    let (logits, _) = model
        .forward(image)
        .map_err(|e| MetricsError::Climb(ClimbError::Model(e)))?;
    let logit_grad = climb::logit_input_grad(model, image, class_id)?;
    // d loss / d logit for BCE with target 1 is sigmoid(y_c) - 1, computed as
    // -sigmoid(-y_c) so a confidently positive logit underflows gracefully
    // instead of rounding the whole gradient to zero
    let dl = -ops::sigmoid(-logits.data()[class_id]);
    let loss_grad = logit_grad.map(|v| v * dl);
    let norm = loss_grad.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(MetricsError::DegenerateDirection);
    }
    let sign = match direction {
        ProbeDirection::Attack => 1.0,
        ProbeDirection::Climb => -1.0,
    };
    let normal = loss_grad.map(|v| sign * v / norm);

    // random direction, Gram-Schmidt against the normal
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut random = Tensor::zeros(image.shape());
    for v in random.data_mut() {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let proj = random.dot(&normal)?;
    random = random.axpy(-proj, &normal)?;
    let rnorm = random.l2_norm();
    if rnorm == 0.0 {
        return Err(MetricsError::DegenerateDirection);
    }
    random = random.map(|v| v / rnorm);

    let a_values = linspace(grid.a_min, grid.a_max, grid.steps);
    let b_values = linspace(grid.b_min, grid.b_max, grid.steps);
    let cells: Vec<(usize, usize)> = (0..a_values.len())
        .flat_map(|i| (0..b_values.len()).map(move |j| (i, j)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| -> Result<f64, MetricsError> {
            let x = image.axpy(a_values[i], &normal)?.axpy(b_values[j], &random)?;
            probe_loss(model, &x, class_id)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let base_loss = probe_loss(model, image, class_id)?;
    Ok(LandscapeGrid {
        direction,
        rng_seed,
        a_values,
        b_values,
        values,
        base_loss,
        normal,
        random,
    })
}

// --- trajectory-based evaluation over a dataset ---------------------------

/// Climbs every `(record, tagged class)` pair of `records` under `config`.
/// Trajectories come back in deterministic (record, class) order.
pub fn climb_dataset(
    model: &GapClassifier,
    records: &[&Record],
    config: &ClimbConfig,
) -> Result<Vec<(usize, ClimbTrajectory)>, MetricsError> {
    let pairs: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| r.tags.iter().map(move |&c| (ri, c)))
        .collect();
    let trajs = pairs
        .par_iter()
        .map(|&(ri, c)| -> Result<(usize, ClimbTrajectory), MetricsError> {
            let traj = climb::run_climb(model, &records[ri].image, c, config)?;
            Ok((ri, traj))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(trajs)
}

/// Builds threshold-sweepable items from trajectories: the aggregate map of
/// each class, bilinearly upsampled to image resolution. `prefix` limits
/// aggregation to steps `0..=prefix` (None = the full trajectory).
pub fn eval_items(
    trajectories: &[(usize, ClimbTrajectory)],
    records: &[&Record],
    prefix: Option<usize>,
) -> Result<Vec<EvalItem>, MetricsError> {
    let mut per_record: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); records.len()];
    for (ri, traj) in trajectories {
        let record = records[*ri];
        let (h, w) = (record.image.shape()[1], record.image.shape()[2]);
        let agg = match prefix {
            None => traj.aggregate.clone(),
            Some(t) => {
                let upto = t.min(traj.cams.len() - 1);
                climb::aggregate_maps(&traj.cams[..=upto])?
            }
        };
        let up = ops::bilinear_resize_hw(&agg, h, w)?;
        per_record[*ri].push((traj.class_id, up));
    }
    Ok(records
        .iter()
        .enumerate()
        .map(|(ri, r)| EvalItem {
            maps: std::mem::take(&mut per_record[ri]),
            gt: gt_seed(r),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Tau,
    Xi,
    Steps,
}

impl SweepParam {
    pub fn apply(&self, base: &ClimbConfig, value: f64) -> ClimbConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Tau => cfg.tau = value,
            SweepParam::Xi => cfg.xi = value,
            SweepParam::Steps => cfg.steps = value.round() as usize,
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub best_theta: f64,
    pub best_miou: f64,
    pub noise_at_best: f64,
}

/// Varies one climbing hyper-parameter over `values` (others stay at `base`)
/// and reports the best-threshold seed quality per value.
///
/// Step-count sweeps reuse a single trajectory at the largest requested T and
/// aggregate prefixes, which is equivalent under Eq.-style prefix sums and
/// much cheaper than re-climbing per value.
pub fn sweep(
    model: &GapClassifier,
    records: &[&Record],
    param: SweepParam,
    values: &[f64],
    base: &ClimbConfig,
    thetas: &[f64],
    num_classes: usize,
) -> Result<Vec<SweepRow>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Invalid("empty sweep grid".into()));
    }
    if param == SweepParam::Steps {
        let t_max = values
            .iter()
            .map(|v| v.round() as usize)
            .max()
            .expect("non-empty");
        let cfg = SweepParam::Steps.apply(base, t_max as f64);
        let trajs = climb_dataset(model, records, &cfg)?;
        return values
            .iter()
            .map(|&v| {
                let t = v.round() as usize;
                let items = eval_items(&trajs, records, Some(t))?;
                let curve = threshold_sweep(&items, thetas, num_classes)?;
                Ok(SweepRow {
                    value: v,
                    best_theta: curve.best.theta,
                    best_miou: curve.best.miou,
                    noise_at_best: curve.best.noise,
                })
            })
            .collect();
    }
    values
        .iter()
        .map(|&v| {
            let cfg = param.apply(base, v);
            let trajs = climb_dataset(model, records, &cfg)?;
            let items = eval_items(&trajs, records, None)?;
            let curve = threshold_sweep(&items, thetas, num_classes)?;
            Ok(SweepRow {
                value: v,
                best_theta: curve.best.theta,
                best_miou: curve.best.miou,
                noise_at_best: curve.best.noise,
            })
        })
        .collect()
}

/// GAP-pooled feature vector of every trajectory image, in step order.
pub fn feature_trajectory(
    model: &GapClassifier,
    traj: &ClimbTrajectory,
) -> Result<Vec<Tensor>, MetricsError> {
    traj.images
        .iter()
        .map(|x| {
            let (_, features) = model
                .forward(x)
                .map_err(|e| MetricsError::Climb(ClimbError::Model(e)))?;
            Ok(ops::gap(&features)?)
        })
        .collect()
}
