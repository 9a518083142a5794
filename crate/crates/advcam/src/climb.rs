//! Adversarial climbing: the attack baseline, plain climbing, regularized
//! climbing with other-class suppression and the masking penalty, and
//! trajectory aggregation.

use crate::cam::{self, AttributionMap, CamError};
use crate::graph::{Graph, GraphError};
use crate::model::{GapClassifier, ModelError};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClimbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite logit at climb step {step}; step size is likely too large")]
    Divergence { step: usize },
    #[error("invalid climb config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClimbConfig {
    /// Step count T.
    pub steps: usize,
    /// Step size xi.
    pub xi: f64,
    /// Masking coefficient lambda.
    pub lambda: f64,
    /// Mask threshold tau on the self-normalized CAM.
    pub tau: f64,
    pub suppress_others: bool,
    pub masking: bool,
    /// Climb the eight multi-scale/flip variants independently.
    pub ensemble: bool,
}

impl Default for ClimbConfig {
    fn default() -> Self {
        ClimbConfig {
            steps: 27,
            xi: 0.008,
            lambda: 7.0,
            tau: 0.5,
            suppress_others: true,
            masking: true,
            ensemble: false,
        }
    }
}

impl ClimbConfig {
    pub fn validate(&self) -> Result<(), ClimbError> {
        if self.xi < 0.0 {
            return Err(ClimbError::BadConfig(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.lambda < 0.0 {
            return Err(ClimbError::BadConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ClimbError::BadConfig(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The ordered record of one climb: images x^0..x^T, their logits, raw CAMs
/// (sum-pooled over variants in ensemble mode), restricting masks, and the
/// max-normalized aggregate map.
#[derive(Debug, Clone)]
pub struct ClimbTrajectory {
    pub class_id: usize,
    pub images: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    pub cams: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub aggregate: Tensor,
}

/// One evaluation of the climbing objective.
pub struct LossEval {
    pub value: f64,
    pub logits: Tensor,
    /// Piecewise-linear branch signature; equal signatures mean the two
    /// evaluations share a linear region (used to exclude kink inputs from
    /// finite-difference checks).
    pub signature: Vec<bool>,
}

fn logit_weights(k: usize, class_id: usize, suppress_others: bool) -> Tensor {
    let mut w = Tensor::zeros(&[k]);
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = if i == class_id {
            1.0
        } else if suppress_others {
            -1.0
        } else {
            0.0
        };
    }
    w
}

fn cam_kernel(model: &GapClassifier, class_id: usize) -> Tensor {
    let d = model.arch.feature_channels;
    let row = &model.weight.data()[class_id * d..(class_id + 1) * d];
    Tensor::new(vec![1, d, 1, 1], row.to_vec()).expect("shape")
}

struct LossGraph {
    graph: Graph,
    image_id: usize,
    loss_id: usize,
    logits_id: usize,
}

/// Records L = y_c [- sum_{k != c} y_k] [- lambda * || M .* |CAM(x) - CAM0| ||_1 / max(CAM0)]
/// on a fresh graph. `mask` and `cam0_raw` are detached constants at feature
/// resolution `[h,w]`; the CAM inside the penalty is differentiated through
/// the network to the input.
fn record_loss(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
    suppress_others: bool,
    lambda: f64,
    mask: Option<&Tensor>,
    cam0_raw: Option<&Tensor>,
) -> Result<LossGraph, ClimbError> {
    if class_id >= model.num_classes() {
        return Err(ClimbError::Cam(CamError::BadClass {
            class: class_id,
            num_classes: model.num_classes(),
        }));
    }
    let mut graph = Graph::new();
    let mg = model.forward_graph(&mut graph, x.clone())?;
    let weights = logit_weights(model.num_classes(), class_id, suppress_others);
    let mut loss_id = graph.masked_sum(mg.logits, weights)?;

    if let (Some(mask), Some(cam0)) = (mask, cam0_raw) {
        // The L1 compares the CAMs after dividing both by the initial CAM's
        // peak (a detached constant), so the penalty lives in the same [0,1]
        // units as the mask threshold. On raw CAM values the per-pixel
        // penalty gradient (lambda per masked cell) would dwarf the logit
        // terms (1/(h*w) per cell) and the climb would chase the penalty
        // instead of the class score.
        let peak = cam0.data().iter().cloned().fold(0.0, f64::max);
        if lambda != 0.0 && peak > 0.0 {
            let kernel = graph.leaf(cam_kernel(model, class_id));
            let cam_signed = graph.conv2d(mg.features, kernel, 1, 0)?;
            let cam_raw = graph.relu(cam_signed);
            let (h, w) = (cam0.shape()[0], cam0.shape()[1]);
            let neg_cam0 = Tensor::new(vec![1, h, w], cam0.data().iter().map(|v| -v).collect())?;
            let diff = graph.add_const(cam_raw, &neg_cam0)?;
            let absdiff = graph.abs(diff);
            let mask3 = Tensor::new(vec![1, h, w], mask.data().to_vec())?;
            let penalty = graph.masked_sum(absdiff, mask3)?;
            let scaled = graph.scale(penalty, -lambda / peak);
            loss_id = graph.add(loss_id, scaled)?;
        }
    }
    Ok(LossGraph {
        graph,
        image_id: mg.image,
        loss_id,
        logits_id: mg.logits,
    })
}

/// Value-only evaluation of the climbing objective, with branch signature.
pub fn climb_loss(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
    suppress_others: bool,
    lambda: f64,
    mask: Option<&Tensor>,
    cam0_raw: Option<&Tensor>,
) -> Result<LossEval, ClimbError> {
    let lg = record_loss(model, x, class_id, suppress_others, lambda, mask, cam0_raw)?;
    Ok(LossEval {
        value: lg.graph.value(lg.loss_id).scalar_value(),
        logits: lg.graph.value(lg.logits_id).clone(),
        signature: lg.graph.activation_signature(),
    })
}

/// Objective value and its exact input gradient.
pub fn climb_loss_grad(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
    suppress_others: bool,
    lambda: f64,
    mask: Option<&Tensor>,
    cam0_raw: Option<&Tensor>,
) -> Result<(f64, Tensor, Tensor), ClimbError> {
    let mut lg = record_loss(model, x, class_id, suppress_others, lambda, mask, cam0_raw)?;
    let value = lg.graph.value(lg.loss_id).scalar_value();
    let logits = lg.graph.value(lg.logits_id).clone();
    let mut grads = lg.graph.backward(lg.loss_id)?;
    Ok((value, grads.take(lg.image_id), logits))
}

/// Input gradient of the bare target logit y_c; shared by the attack and
/// plain-climb steps so their displacements are exact mirrors.
pub fn logit_input_grad(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
) -> Result<Tensor, ClimbError> {
    let (_, grad, _) = climb_loss_grad(model, x, class_id, false, 0.0, None, None)?;
    Ok(grad)
}

/// One adversarial attack step: x' = x - xi * grad_x y_c.
pub fn attack_step(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
    xi: f64,
) -> Result<Tensor, ClimbError> {
    let g = logit_input_grad(model, x, class_id)?;
    Ok(x.axpy(-xi, &g)?)
}

/// One plain climbing step: x' = x + xi * grad_x y_c. Pixels are not clipped.
pub fn climb_step_plain(
    model: &GapClassifier,
    x: &Tensor,
    class_id: usize,
    xi: f64,
) -> Result<Tensor, ClimbError> {
    let g = logit_input_grad(model, x, class_id)?;
    Ok(x.axpy(xi, &g)?)
}

/// Binary restricting mask: 1 where the self-normalized CAM strictly exceeds
/// tau.
pub fn restricting_mask(cam_prev: &AttributionMap, tau: f64) -> Tensor {
    cam_prev
        .normalized()
        .map(|v| if v > tau { 1.0 } else { 0.0 })
}

/// Diagnostics of one regularized step.
pub struct StepDiagnostics {
    pub loss: f64,
    pub logits: Tensor,
    pub mask: Option<Tensor>,
}

/// One regularized climbing step from `x`, with the mask recomputed from
/// CAM(x) and treated as a constant.
pub fn climb_step_regularized(
    model: &GapClassifier,
    x: &Tensor,
    cam0: &AttributionMap,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<(Tensor, StepDiagnostics), ClimbError> {
    let cam_prev = cam::extract_cam(model, x, class_id)?;
    step_from(model, x, &cam_prev, cam0, class_id, config)
}

/// Step given the already-extracted CAM of `x` (Eq. 5 indexes t-1, so the
/// caller usually has it from the previous iteration's bookkeeping).
fn step_from(
    model: &GapClassifier,
    x: &Tensor,
    cam_prev: &AttributionMap,
    cam0: &AttributionMap,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<(Tensor, StepDiagnostics), ClimbError> {
    config.validate()?;
    let mask = if config.masking {
        Some(restricting_mask(cam_prev, config.tau))
    } else {
        None
    };
    let (loss, grad, logits) = climb_loss_grad(
        model,
        x,
        class_id,
        config.suppress_others,
        if config.masking { config.lambda } else { 0.0 },
        mask.as_ref(),
        if config.masking { Some(&cam0.raw) } else { None },
    )?;
    let x_next = x.axpy(config.xi, &grad)?;
    Ok((
        x_next,
        StepDiagnostics {
            loss,
            logits,
            mask,
        },
    ))
}

/// Sum the per-step CAMs and normalize once by the global maximum (guarded:
/// an identically zero sum stays all-zero).
pub fn aggregate_maps(cams: &[Tensor]) -> Result<Tensor, ClimbError> {
    let mut sum = Tensor::zeros(cams[0].shape());
    for c in cams {
        sum = sum.axpy(1.0, c)?;
    }
    Ok(cam::normalize_map(&sum))
}

/// Runs T climbing steps from x^0 = image and aggregates the trajectory.
pub fn run_climb(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<ClimbTrajectory, ClimbError> {
    config.validate()?;
    if config.ensemble {
        run_climb_ensemble(model, image, class_id, config)
    } else {
        run_climb_single(model, image, class_id, config)
    }
}

fn check_finite(logits: &Tensor, step: usize) -> Result<(), ClimbError> {
    if logits.all_finite() {
        Ok(())
    } else {
        Err(ClimbError::Divergence { step })
    }
}

fn run_climb_single(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<ClimbTrajectory, ClimbError> {
    let (logits0, features0) = model.forward(image)?;
    check_finite(&logits0, 0)?;
    let cam0 = cam::extract_cam_from_features(model, &features0, class_id)?;

    let mut images = vec![image.clone()];
    let mut logits = vec![logits0];
    let mut cams = vec![cam0.raw.clone()];
    let mut masks = Vec::new();

    let mut x = image.clone();
    let mut cam_prev = cam0.clone();
    for t in 1..=config.steps {
        let (x_next, diag) = step_from(model, &x, &cam_prev, &cam0, class_id, config)?;
        if let Some(m) = diag.mask {
            masks.push(m);
        }
        x = x_next;
        let (l, f) = model.forward(&x)?;
        check_finite(&l, t)?;
        cam_prev = cam::extract_cam_from_features(model, &f, class_id)?;
        images.push(x.clone());
        logits.push(l);
        cams.push(cam_prev.raw.clone());
    }
    let aggregate = aggregate_maps(&cams)?;
    Ok(ClimbTrajectory {
        class_id,
        images,
        logits,
        cams,
        masks,
        aggregate,
    })
}

fn run_climb_ensemble(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<ClimbTrajectory, ClimbError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ref_h, ref_w) = (h / 8, w / 8);
    let variants = cam::ensemble_variants(image, &cam::ENSEMBLE_SCALES, true)?;
    // reference variant for recorded images/logits/masks: scale 1.0, unflipped
    let base = variants
        .iter()
        .position(|(_, s, f)| *s == 1.0 && !f)
        .unwrap_or(0);

    struct VariantState {
        x: Tensor,
        cam0: AttributionMap,
        cam_prev: AttributionMap,
        flipped: bool,
    }
    let mut states = Vec::new();
    for (view, _, flipped) in &variants {
        let cam0 = cam::extract_cam(model, view, class_id)?;
        states.push(VariantState {
            x: view.clone(),
            cam_prev: cam0.clone(),
            cam0,
            flipped: *flipped,
        });
    }

    let pooled = |states: &[VariantState],
                  per_variant: &[Tensor]|
     -> Result<Tensor, ClimbError> {
        let mut sum = Tensor::zeros(&[ref_h, ref_w]);
        for (st, m) in states.iter().zip(per_variant) {
            sum = sum.axpy(1.0, &cam::realign_map(m, st.flipped, ref_h, ref_w)?)?;
        }
        Ok(sum)
    };

    let initial: Vec<Tensor> = states.iter().map(|s| s.cam0.raw.clone()).collect();
    let mut cams = vec![pooled(&states, &initial)?];
    let (logits0, _) = model.forward(&states[base].x)?;
    check_finite(&logits0, 0)?;
    let mut images = vec![states[base].x.clone()];
    let mut logits = vec![logits0];
    let mut masks = Vec::new();

    for t in 1..=config.steps {
        let mut base_logits = None;
        for (vi, st) in states.iter_mut().enumerate() {
            let (x_next, diag) =
                step_from(model, &st.x, &st.cam_prev, &st.cam0, class_id, config)?;
            st.x = x_next;
            let (l, f) = model.forward(&st.x)?;
            check_finite(&l, t)?;
            st.cam_prev = cam::extract_cam_from_features(model, &f, class_id)?;
            if vi == base {
                if let Some(m) = diag.mask {
                    masks.push(m);
                }
                base_logits = Some(l);
            }
        }
        let step_cams: Vec<Tensor> = states.iter().map(|s| s.cam_prev.raw.clone()).collect();
        images.push(states[base].x.clone());
        logits.push(base_logits.expect("base variant present"));
        cams.push(pooled(&states, &step_cams)?);
    }

    let aggregate = aggregate_maps(&cams)?;
    Ok(ClimbTrajectory {
        class_id,
        images,
        logits,
        cams,
        masks,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> GapClassifier {
        GapClassifier::init(
            ArchConfig {
                widths: vec![4, 6, 8],
                feature_channels: 8,
                num_classes: 3,
            },
            seed,
        )
    }

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 16 * 16).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![3, 16, 16], data).unwrap()
    }

    #[test]
    fn xi_zero_steps_are_identity() {
        let model = tiny_model(1);
        let x = rand_image(2);
        assert_eq!(attack_step(&model, &x, 0, 0.0).unwrap(), x);
        assert_eq!(climb_step_plain(&model, &x, 0, 0.0).unwrap(), x);
    }

    // The applied displacements are +xi*g and -xi*g with one shared gradient;
    // IEEE multiplication makes those exact negations of each other. (The
    // round trip (x + d) - x is NOT rounding-symmetric, so the check pins the
    // steps to x.axpy with the shared gradient instead.)
    #[test]
    fn attack_and_climb_are_exact_mirrors() {
        let model = tiny_model(3);
        let x = rand_image(4);
        let xi = 0.008;
        let g = logit_input_grad(&model, &x, 1).unwrap();
        let up = climb_step_plain(&model, &x, 1, xi).unwrap();
        let down = attack_step(&model, &x, 1, xi).unwrap();
        let exp_up = x.axpy(xi, &g).unwrap();
        let exp_down = x.axpy(-xi, &g).unwrap();
        for i in 0..x.len() {
            let d = xi * g.data()[i];
            assert_eq!(d.to_bits(), (-(-xi * g.data()[i])).to_bits());
            assert_eq!(up.data()[i].to_bits(), exp_up.data()[i].to_bits());
            assert_eq!(down.data()[i].to_bits(), exp_down.data()[i].to_bits());
        }
    }

    // With all-positive kernels and a strictly positive image every ReLU is
    // active, so the logit is exactly linear in x; central differences are
    // then exact up to roundoff and serve as a closed-form gradient oracle.
    #[test]
    fn plain_step_matches_linear_closed_form() {
        let mut model = tiny_model(5);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = v.abs() + 0.01;
            }
        }
        let x = rand_image(6).map(|v| v + 0.5);
        let xi = 0.01;
        let up = climb_step_plain(&model, &x, 0, xi).unwrap();
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let (lp, _) = model.forward(&xp).unwrap();
            let (lm, _) = model.forward(&xm).unwrap();
            let fd = (lp.data()[0] - lm.data()[0]) / (2.0 * h);
            let step = up.data()[i] - x.data()[i];
            assert!((step - xi * fd).abs() <= 1e-9, "coord {i}");
        }
    }

    #[test]
    fn degenerate_config_equals_plain_step() {
        let model = tiny_model(8);
        let x = rand_image(9);
        let cam0 = cam::extract_cam(&model, &x, 2).unwrap();
        let cfg = ClimbConfig {
            lambda: 0.0,
            suppress_others: false,
            ..Default::default()
        };
        let (reg, _) = climb_step_regularized(&model, &x, &cam0, 2, &cfg).unwrap();
        let plain = climb_step_plain(&model, &x, 2, cfg.xi).unwrap();
        for (a, b) in reg.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn single_class_suppression_sum_is_empty() {
        let model = GapClassifier::init(
            ArchConfig {
                widths: vec![4, 6, 8],
                feature_channels: 8,
                num_classes: 1,
            },
            11,
        );
        let x = rand_image(12);
        let on = climb_loss(&model, &x, 0, true, 0.0, None, None).unwrap();
        let off = climb_loss(&model, &x, 0, false, 0.0, None, None).unwrap();
        assert_eq!(on.value.to_bits(), off.value.to_bits());
    }

    #[test]
    fn regularized_gradient_matches_finite_differences() {
        let model = tiny_model(13);
        let x = rand_image(14);
        // cam0 from a different image so the penalty is active
        let cam0 = cam::extract_cam(&model, &rand_image(15), 1).unwrap();
        let cam_prev = cam::extract_cam(&model, &x, 1).unwrap();
        let mask = restricting_mask(&cam_prev, 0.5);
        let (_, grad, _) =
            climb_loss_grad(&model, &x, 1, true, 7.0, Some(&mask), Some(&cam0.raw)).unwrap();

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let ep = climb_loss(&model, &xp, 1, true, 7.0, Some(&mask), Some(&cam0.raw)).unwrap();
            let em = climb_loss(&model, &xm, 1, true, 7.0, Some(&mask), Some(&cam0.raw)).unwrap();
            if ep.signature != em.signature {
                continue; // kink input, excluded
            }
            let fd = (ep.value - em.value) / (2.0 * h);
            let an = grad.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom <= 1e-5, "coord {i}: fd={fd} an={an}");
            checked += 1;
        }
        assert!(checked > 20, "too many kink rejections: {checked}");
    }

    #[test]
    fn restricting_mask_thresholds() {
        let m = AttributionMap {
            class_id: 0,
            raw: Tensor::new(vec![1, 3], vec![0.2, 0.6, 1.0]).unwrap(),
            signed: Tensor::new(vec![1, 3], vec![0.2, 0.6, 1.0]).unwrap(),
        };
        assert_eq!(restricting_mask(&m, 0.5).data(), &[0.0, 1.0, 1.0]);
        // tau >= 1: strict inequality on a map whose max is exactly 1
        assert_eq!(restricting_mask(&m, 0.9999999).data(), &[0.0, 0.0, 1.0]);
        let all = restricting_mask(&m, 1e-9);
        assert_eq!(all.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn t_zero_aggregate_is_normalized_initial_cam() {
        let model = tiny_model(17);
        let x = rand_image(18);
        let cfg = ClimbConfig {
            steps: 0,
            ..Default::default()
        };
        let traj = run_climb(&model, &x, 0, &cfg).unwrap();
        assert_eq!(traj.images.len(), 1);
        assert_eq!(traj.cams.len(), 1);
        let expect = cam::extract_cam(&model, &x, 0).unwrap().normalized();
        assert_eq!(traj.aggregate.data(), expect.data());
    }

    #[test]
    fn zero_cam_aggregate_is_all_zero() {
        let mut model = tiny_model(19);
        let d = model.arch.feature_channels;
        for v in model.weight.data_mut()[0..d].iter_mut() {
            *v = 0.0;
        }
        let cfg = ClimbConfig {
            steps: 2,
            ..Default::default()
        };
        let traj = run_climb(&model, &rand_image(20), 0, &cfg).unwrap();
        assert!(traj.aggregate.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_lengths_and_aggregate_bounds() {
        let model = tiny_model(21);
        let cfg = ClimbConfig {
            steps: 3,
            ..Default::default()
        };
        let traj = run_climb(&model, &rand_image(22), 1, &cfg).unwrap();
        assert_eq!(traj.images.len(), 4);
        assert_eq!(traj.cams.len(), 4);
        assert_eq!(traj.logits.len(), 4);
        assert_eq!(traj.masks.len(), 3);
        assert!(traj.aggregate.min_value() >= 0.0);
        let max = traj.aggregate.max_value();
        // zero maps stay zero; anything else is normalized to max 1
        assert!(max == 0.0 || (max - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let model = tiny_model(23);
        let x = rand_image(24);
        let bad = ClimbConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            run_climb(&model, &x, 0, &bad),
            Err(ClimbError::BadConfig(_))
        ));
    }

    #[test]
    fn ensemble_trajectory_has_pooled_cams() {
        let model = tiny_model(25);
        let cfg = ClimbConfig {
            steps: 1,
            ensemble: true,
            ..Default::default()
        };
        let x = rand_image(26);
        let traj = run_climb(&model, &x, 0, &cfg).unwrap();
        assert_eq!(traj.cams[0].shape(), &[2, 2]);
        // step 0 pooled CAM equals the appendix-style ensemble CAM
        let ens = cam::ensemble_cam(&model, &x, 0, &cam::ENSEMBLE_SCALES, true).unwrap();
        for (a, b) in traj.cams[0].data().iter().zip(ens.raw.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
