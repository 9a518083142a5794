//! Class activation map extraction, normalization conventions, bilinear
//! upsampling, and the multi-scale/flip ensemble.

use crate::model::{GapClassifier, ModelError};
use crate::ops;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

pub const ENSEMBLE_SCALES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class id {class} out of range (K = {num_classes})")]
    BadClass { class: usize, num_classes: usize },
    #[error("scale {scale} yields spatial size below one pixel")]
    DegenerateScale { scale: f64 },
}

/// Per-pixel class-evidence map for one class at feature resolution.
///
/// `raw` is the post-ReLU un-normalized map used for thresholding and the
/// climbing penalty; `signed` is the pre-ReLU view kept for the GAP-logit
/// identity. Self-normalization (`raw / max(raw)`) is used wherever the
/// thresholds tau / 0.1 / 0.5 apply.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub class_id: usize,
    pub raw: Tensor,
    pub signed: Tensor,
}

impl AttributionMap {
    pub fn normalizer(&self) -> f64 {
        self.raw.max_value()
    }

    /// `raw / max(raw)`, all-zero when the map is identically zero.
    pub fn normalized(&self) -> Tensor {
        normalize_map(&self.raw)
    }

    /// Bilinear upsample of the raw map to image resolution.
    pub fn upsampled(&self, h: usize, w: usize) -> Result<Tensor, CamError> {
        Ok(ops::bilinear_resize_hw(&self.raw, h, w)?)
    }
}

/// Max-normalization with a guarded division: identically non-positive maps
/// come back all-zero.
pub fn normalize_map(raw: &Tensor) -> Tensor {
    let max = raw.max_value();
    if max > 0.0 {
        raw.map(|v| v / max)
    } else {
        Tensor::zeros(raw.shape())
    }
}

/// Weighted channel sum `w_c^T f(x)` over an already computed feature map.
pub fn extract_cam_from_features(
    model: &GapClassifier,
    features: &Tensor,
    class_id: usize,
) -> Result<AttributionMap, CamError> {
    let k = model.num_classes();
    if class_id >= k {
        return Err(CamError::BadClass {
            class: class_id,
            num_classes: k,
        });
    }
    let (d, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let wrow = &model.weight.data()[class_id * d..(class_id + 1) * d];
    let mut signed = Tensor::zeros(&[h, w]);
    {
        let out = signed.data_mut();
        let fd = features.data();
        for ch in 0..d {
            let wc = wrow[ch];
            let plane = &fd[ch * h * w..(ch + 1) * h * w];
            for (o, &f) in out.iter_mut().zip(plane) {
                *o += wc * f;
            }
        }
    }
    let raw = ops::relu(&signed);
    Ok(AttributionMap {
        class_id,
        raw,
        signed,
    })
}

/// CAM of a single image view (no bias term).
pub fn extract_cam(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
) -> Result<AttributionMap, CamError> {
    let (_, features) = model.forward(image)?;
    extract_cam_from_features(model, &features, class_id)
}

/// The 8 image variants of the multi-scale/flip ensemble, with enough
/// geometry to re-align their CAMs: `(image, scale, flipped)`.
pub fn ensemble_variants(
    image: &Tensor,
    scales: &[f64],
    flip: bool,
) -> Result<Vec<(Tensor, f64, bool)>, CamError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::new();
    for &s in scales {
        let sh = (h as f64 * s).round() as usize;
        let sw = (w as f64 * s).round() as usize;
        if sh < 1 || sw < 1 {
            return Err(CamError::DegenerateScale { scale: s });
        }
        // pad up to the next multiple of 8 so the classifier accepts the view
        let (ph, pw) = (sh.div_ceil(8) * 8, sw.div_ceil(8) * 8);
        let scaled = ops::bilinear_resize_chw(image, ph.max(8), pw.max(8))?;
        out.push((scaled.clone(), s, false));
        if flip {
            out.push((ops::hflip_chw(&scaled), s, true));
        }
    }
    Ok(out)
}

/// Re-align one variant CAM to the reference feature resolution: un-flip,
/// then bilinear resize.
pub fn realign_map(
    map: &Tensor,
    flipped: bool,
    ref_h: usize,
    ref_w: usize,
) -> Result<Tensor, CamError> {
    let unflipped = if flipped { ops::hflip_hw(map) } else { map.clone() };
    Ok(ops::bilinear_resize_hw(&unflipped, ref_h, ref_w)?)
}

/// Multi-scale/flip ensemble CAM: the 8 variant CAMs are un-flipped, resized
/// to the reference feature resolution, and pixel-wise sum pooled.
pub fn ensemble_cam(
    model: &GapClassifier,
    image: &Tensor,
    class_id: usize,
    scales: &[f64],
    flip: bool,
) -> Result<AttributionMap, CamError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ref_h, ref_w) = (h / 8, w / 8);
    let mut raw_sum = Tensor::zeros(&[ref_h, ref_w]);
    let mut signed_sum = Tensor::zeros(&[ref_h, ref_w]);
    for (view, _, flipped) in ensemble_variants(image, scales, flip)? {
        let m = extract_cam(model, &view, class_id)?;
        raw_sum = raw_sum.axpy(1.0, &realign_map(&m.raw, flipped, ref_h, ref_w)?)?;
        signed_sum = signed_sum.axpy(1.0, &realign_map(&m.signed, flipped, ref_h, ref_w)?)?;
    }
    Ok(AttributionMap {
        class_id,
        raw: raw_sum,
        signed: signed_sum,
    })
}
