//! Numerical kernels shared by the plain (inference) path and the autodiff graph.
//!
//! Every kernel uses a fixed summation order, so results are bit-identical
//! across runs and thread counts.

use crate::tensor::{Tensor, TensorError};

fn dim3(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(TensorError::DimMismatch {
            what,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

fn dim4(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(TensorError::DimMismatch {
            what,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

/// Output spatial extent of a convolution, or an error when it is not a
/// positive integer.
pub fn conv_out_extent(
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(TensorError::Invalid(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(TensorError::Invalid(format!(
            "conv extent ({input} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,k,k]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let (ci, h, w) = dim3(input, "conv2d input")?;
    let (co, kci, kh, kw) = dim4(kernel, "conv2d kernel")?;
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Invalid(format!(
            "conv2d kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if kci != ci {
        return Err(TensorError::DimMismatch {
            what: "conv2d channel axis",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;

    let mut out = Tensor::zeros(&[co, oh, ow]);
    let ind = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    if stride == 1 {
        // Row-contiguous accumulation: the inner loop runs over whole output
        // rows so it vectorizes; term order stays fixed (c_in, ky, kx).
        for c_out in 0..co {
            for c_in in 0..ci {
                let kbase = (c_out * kci + c_in) * kh * kw;
                let ibase = c_in * h * w;
                for oy in 0..oh {
                    let orow = c_out * oh * ow + oy * ow;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let kv = kd[krow + kx];
                            let lo = padding.saturating_sub(kx);
                            let hi = (w + padding).saturating_sub(kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            let src = &ind[irow + lo + kx - padding..irow + hi + kx - padding];
                            let dst = &mut od[orow + lo..orow + hi];
                            for (o, &i) in dst.iter_mut().zip(src) {
                                *o += kv * i;
                            }
                        }
                    }
                }
            }
        }
        return Ok(out);
    }
    for c_out in 0..co {
        for c_in in 0..ci {
            let kbase = (c_out * kci + c_in) * kh * kw;
            let ibase = c_in * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += ind[irow + ix as usize] * kd[krow + kx as usize];
                        }
                    }
                    od[(c_out * oh + oy) * ow + ox] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor), TensorError> {
    let (ci, h, w) = dim3(input, "conv2d input")?;
    let (co, _, kh, kw) = dim4(kernel, "conv2d kernel")?;
    let (gco, oh, ow) = dim3(grad_out, "conv2d grad_out")?;
    if gco != co {
        return Err(TensorError::DimMismatch {
            what: "conv2d grad_out channels",
            lhs: grad_out.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let ind = input.data();
    let kd = kernel.data();
    let god = grad_out.data();
    let gid = gin.data_mut();
    let gkd = gk.data_mut();
    if stride == 1 {
        // Same row-contiguous layout as the forward fast path: each (ky, kx)
        // tap turns into one axpy into grad-input plus one dot product for the
        // kernel gradient, both over contiguous rows.
        for c_out in 0..co {
            for c_in in 0..ci {
                let kbase = (c_out * ci + c_in) * kh * kw;
                let ibase = c_in * h * w;
                for oy in 0..oh {
                    let grow = c_out * oh * ow + oy * ow;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let kv = kd[krow + kx];
                            let lo = padding.saturating_sub(kx);
                            let hi = (w + padding).saturating_sub(kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            let base = irow + lo + kx - padding;
                            let g = &god[grow + lo..grow + hi];
                            let gi = &mut gid[base..base + hi - lo];
                            let src = &ind[base..base + hi - lo];
                            let mut acc = 0.0;
                            for ((gi, &g), &i) in gi.iter_mut().zip(g).zip(src) {
                                *gi += g * kv;
                                acc += g * i;
                            }
                            gkd[krow + kx] += acc;
                        }
                    }
                }
            }
        }
        return Ok((gin, gk));
    }
    for c_out in 0..co {
        for c_in in 0..ci {
            let kbase = (c_out * ci + c_in) * kh * kw;
            let ibase = c_in * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = god[(c_out * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gid[irow + ix as usize] += g * kd[krow + kx];
                            gkd[krow + kx] += g * ind[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gk))
}

/// Adds one bias value per channel of a `[C,H,W]` tensor.
pub fn bias_add_chw(input: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = dim3(input, "bias_add_chw input")?;
    if bias.shape() != [c] {
        return Err(TensorError::DimMismatch {
            what: "bias_add_chw bias",
            lhs: input.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = input.clone();
    let od = out.data_mut();
    for ch in 0..c {
        let b = bias.data()[ch];
        for v in &mut od[ch * h * w..(ch + 1) * h * w] {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradients of `bias_add_chw`: input passes through, bias gets the
/// per-channel spatial sum.
pub fn bias_add_chw_backward(grad_out: &Tensor, channels: usize) -> (Tensor, Tensor) {
    let plane = grad_out.len() / channels;
    let sums: Vec<f64> = (0..channels)
        .map(|ch| grad_out.data()[ch * plane..(ch + 1) * plane].iter().sum())
        .collect();
    (
        grad_out.clone(),
        Tensor::new(vec![channels], sums).expect("shape"),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// 2x2 average pooling with stride 2; spatial extents must be even.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = dim3(input, "avg_pool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid(format!(
            "avg_pool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let ind = input.data();
    let od = out.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                od[(ch * oh + oy) * ow + ox] =
                    0.25 * (ind[base] + ind[base + 1] + ind[base + w] + ind[base + w + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = Tensor::zeros(input_shape);
    let god = grad_out.data();
    let gid = gin.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * god[(ch * oh + oy) * ow + ox];
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                gid[base] += g;
                gid[base + 1] += g;
                gid[base + w] += g;
                gid[base + w + 1] += g;
            }
        }
    }
    gin
}

/// Per-channel spatial mean of `[C,H,W]` -> `[C]`.
pub fn gap(input: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = dim3(input, "gap input")?;
    if h * w == 0 {
        return Err(TensorError::Invalid("gap over empty spatial extent".into()));
    }
    let ind = input.data();
    let inv = 1.0 / (h * w) as f64;
    let data = (0..c)
        .map(|ch| ind[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() * inv)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn gap_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let inv = 1.0 / (h * w) as f64;
    let god = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    let gid = gin.data_mut();
    for ch in 0..c {
        let g = god[ch] * inv;
        for v in gid[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v += g;
        }
    }
    gin
}

/// `weight [K,C] * input [C] + bias [K]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let c = match input.shape() {
        [c] => *c,
        s => {
            return Err(TensorError::DimMismatch {
                what: "linear input",
                lhs: s.to_vec(),
                rhs: vec![0],
            })
        }
    };
    let (k, wc) = match weight.shape() {
        [k, wc] => (*k, *wc),
        s => {
            return Err(TensorError::DimMismatch {
                what: "linear weight",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if wc != c || bias.shape() != [k] {
        return Err(TensorError::DimMismatch {
            what: "linear",
            lhs: weight.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let wd = weight.data();
    let id = input.data();
    let bd = bias.data();
    let data = (0..k)
        .map(|row| {
            let mut acc = bd[row];
            for (j, &x) in id.iter().enumerate() {
                acc += wd[row * c + j] * x;
            }
            acc
        })
        .collect();
    Tensor::new(vec![k], data)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = input.len();
    let k = grad_out.len();
    let wd = weight.data();
    let id = input.data();
    let god = grad_out.data();
    let mut gin = Tensor::zeros(&[c]);
    let mut gw = Tensor::zeros(&[k, c]);
    let gb = Tensor::new(vec![k], god.to_vec()).expect("shape");
    {
        let gid = gin.data_mut();
        let gwd = gw.data_mut();
        for row in 0..k {
            let g = god[row];
            for j in 0..c {
                gid[j] += g * wd[row * c + j];
                gwd[row * c + j] += g * id[j];
            }
        }
    }
    (gin, gw, gb)
}

/// Numerically stable binary cross-entropy of sigmoid(logit) vs target,
/// summed over elements (multi-label: one binary task per class, so the
/// gradient scale does not shrink with the class count). Targets must be
/// exactly 0 or 1.
pub fn sigmoid_bce(logits: &Tensor, targets: &Tensor) -> Result<f64, TensorError> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::DimMismatch {
            what: "sigmoid_bce",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(TensorError::Invalid(format!(
                "sigmoid_bce target {t} is not binary"
            )));
        }
    }
    let mut acc = 0.0;
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        // max(z,0) - z*t + ln(1 + exp(-|z|))
        acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(acc)
}

pub fn sigmoid_bce_backward(logits: &Tensor, targets: &Tensor, grad_out: f64) -> Tensor {
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &t)| grad_out * (sigmoid(z) - t))
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("shape")
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable BCE of a single logit against target 1: ln(1 + exp(-z)).
pub fn bce_target_one(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Elementwise absolute value; subgradient at 0 is taken as 0.
pub fn abs(input: &Tensor) -> Tensor {
    input.map(f64::abs)
}

pub fn abs_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape")
}

/// Sum of `weights[i] * input[i]` over all elements -> scalar.
pub fn masked_sum(input: &Tensor, weights: &Tensor) -> Result<f64, TensorError> {
    if input.shape() != weights.shape() {
        return Err(TensorError::DimMismatch {
            what: "masked_sum",
            lhs: input.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    Ok(input
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Bilinear resample of a `[H,W]` grid (align_corners = false).
pub fn bilinear_resize_hw(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor, TensorError> {
    let (h, w) = match input.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(TensorError::DimMismatch {
                what: "bilinear input",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if oh == 0 || ow == 0 {
        return Err(TensorError::Invalid("bilinear target extent is zero".into()));
    }
    let mut out = Tensor::zeros(&[oh, ow]);
    resample_plane(input.data(), h, w, out.data_mut(), oh, ow);
    Ok(out)
}

/// Bilinear resample of every channel of a `[C,H,W]` tensor.
pub fn bilinear_resize_chw(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = dim3(input, "bilinear chw input")?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Invalid("bilinear target extent is zero".into()));
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = &input.data()[ch * h * w..(ch + 1) * h * w];
        // split_at_mut keeps the borrow checker happy per channel
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        resample_plane(src, h, w, dst, oh, ow);
    }
    Ok(out)
}

fn resample_plane(src: &[f64], h: usize, w: usize, dst: &mut [f64], oh: usize, ow: usize) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
}

/// Horizontal flip of the last axis of a `[H,W]` grid.
pub fn hflip_hw(input: &Tensor) -> Tensor {
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let src = input.data();
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = src[y * w + (w - 1 - x)];
        }
    }
    Tensor::new(vec![h, w], data).expect("shape")
}

/// Horizontal flip of the last axis of a `[C,H,W]` tensor.
pub fn hflip_chw(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let src = input.data();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    // Independent six-nested-loop oracle for conv2d.
    fn conv2d_oracle(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, _, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input.data()[(c_in * h + iy as usize) * w + ix as usize]
                                        * kernel.data()
                                            [((c_out * ci + c_in) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(c_out * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_all_ones_center() {
        let input = Tensor::full(&[1, 3, 3], 1.0);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[2, 5, 5]);
        // single 1 at kernel center, mapping channel i to channel i
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        kernel.data_mut()[(0 * 2 + 0) * 9 + 4] = 1.0;
        kernel.data_mut()[(1 * 2 + 1) * 9 + 4] = 1.0;
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[2, 4, 4]);
        let kernel = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        let exp = conv2d_oracle(&input, &kernel, 1, 1);
        for (a, b) in out.data().iter().zip(exp.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_even_kernel_and_bad_channels() {
        let input = Tensor::zeros(&[2, 4, 4]);
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 2, 2]), 1, 0).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), 1, 1).is_err());
    }

    #[test]
    fn bias_add_roundtrip_and_backward() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, -1.0]).unwrap();
        let out = bias_add_chw(&x, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0, 2.0, 3.0]);
        let g = Tensor::new(vec![2, 1, 2], vec![0.5, 1.5, 2.0, -1.0]).unwrap();
        let (gin, gb) = bias_add_chw_backward(&g, 2);
        assert_eq!(gin.data(), g.data());
        // bias gradient is the per-channel spatial sum
        assert_eq!(gb.data(), &[2.0, 1.0]);
        // shape mismatch rejected
        let bad = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(bias_add_chw(&x, &bad).is_err());
    }

    #[test]
    fn relu_cases() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(&[4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let up = Tensor::new(vec![2], vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &up).data(), &[0.0, 5.0]);
    }

    #[test]
    fn gap_cases() {
        let t = Tensor::full(&[1, 2, 2], 4.0);
        assert_eq!(gap(&t).unwrap().data(), &[4.0]);
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap(&t).unwrap().data(), &[2.5]);
        // loop oracle on a random tensor
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, &[3, 5, 5]);
        let out = gap(&t).unwrap();
        for ch in 0..3 {
            let mean: f64 = t.data()[ch * 25..(ch + 1) * 25].iter().sum::<f64>() / 25.0;
            assert!((out.data()[ch] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let zero_w = Tensor::zeros(&[3, 2]);
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(linear(&x, &zero_w, &b).unwrap().data(), b.data());
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &eye, &zb).unwrap().data(), x.data());
        // matmul loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        let out = linear(&x, &w, &b).unwrap();
        for row in 0..3 {
            let mut acc = b.data()[row];
            for j in 0..5 {
                acc += w.data()[row * 5 + j] * x.data()[j];
            }
            assert!((out.data()[row] - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_bce_cases() {
        let l = Tensor::scalar(0.0);
        let t = Tensor::scalar(1.0);
        assert!((sigmoid_bce(&l, &t).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        let l = Tensor::scalar(100.0);
        let v = sigmoid_bce(&l, &t).unwrap();
        assert!(v.is_finite() && v < 1e-40);
        // stays finite far into saturation
        let l = Tensor::scalar(-1e3);
        assert!(sigmoid_bce(&l, &t).unwrap().is_finite());
        // non-binary target rejected
        let bad = Tensor::scalar(0.5);
        assert!(sigmoid_bce(&l, &bad).is_err());
    }

    #[test]
    fn sigmoid_bce_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z: f64 = rng.gen_range(-8.0..8.0);
            let t = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let stable = sigmoid_bce(&Tensor::scalar(z), &Tensor::scalar(t)).unwrap();
            let s = 1.0 / (1.0 + (-z).exp());
            let naive = -t * s.ln() - (1.0 - t) * (1.0 - s).ln();
            assert!((stable - naive).abs() <= 1e-10, "z={z} t={t}");
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = Tensor::full(&[3, 3], 3.0);
        let up = bilinear_resize_hw(&c, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_resize_hw(&t, 2, 2).unwrap().data(), t.data());
    }

    #[test]
    fn bilinear_2x2_to_4x4_closed_form() {
        // columns [[0,1],[0,1]]: rows constant, columns interpolate.
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_resize_hw(&t, 4, 4).unwrap();
        // src x positions for ox=0..3 are -0.25, 0.25, 0.75, 1.25 clamped to [0,1]
        let expect = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                assert!((up.data()[oy * 4 + ox] - expect[ox]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hflip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_tensor(&mut rng, &[3, 4, 6]);
        assert_eq!(hflip_chw(&hflip_chw(&t)).data(), t.data());
        let m = rand_tensor(&mut rng, &[4, 6]);
        assert_eq!(hflip_hw(&hflip_hw(&m)).data(), m.data());
    }

    #[test]
    fn avg_pool2_matches_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&t).unwrap().data(), &[2.5]);
        assert!(avg_pool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let x = Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        let g = Tensor::full(&[3], 1.0);
        assert_eq!(abs_backward(&x, &g).data(), &[-1.0, 0.0, 1.0]);
    }
}
