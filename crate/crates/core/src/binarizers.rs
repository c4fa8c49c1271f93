//! Quantizers and their surrogate gradients.
//!
//! * weights: `sign` forward, straight-through backward (optionally zeroed
//!   where `|w|` leaves the clip range)
//! * ±1 activations: `sign` forward, piecewise-polynomial backward
//!   (`2 + 2x` on `[-1, 0)`, `2 - 2x` on `[0, 1)`, else 0)
//! * `{0,1}` activations: threshold at 0.5, clipped STE on `[0, 1]`
//! * 8-bit: symmetric per-tensor affine quantization for layers kept at
//!   higher precision

use crate::bitcore::BitTensor;
use crate::{Error, Result};

/// Which quantizer a layer input or weight uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantizerKind {
    /// `clip = Some(c)` zeroes the gradient where `|w| > c`.
    WeightSignSte { clip: Option<f64> },
    ActSignPoly,
    ActZeroOne,
    AffineInt8,
}

impl Default for QuantizerKind {
    fn default() -> Self {
        QuantizerKind::WeightSignSte { clip: Some(1.0) }
    }
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-filter scale: mean absolute latent weight of each output filter.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightScale {
    pub alpha: Vec<f64>,
}

/// Binarizes a weight tensor whose leading axis indexes filters.
///
/// Rank-1 input is treated as a single filter. Bits are packed along axis 1
/// (the input-channel axis for `O,I,Kh,Kw` filters).
pub fn weight_binarize_fwd(w: &[f64], shape: &[usize]) -> Result<(BitTensor, WeightScale)> {
    let axis = usize::from(shape.len() > 1);
    let bits = BitTensor::pack_signs(w, shape, axis)?;
    let filters = if shape.len() > 1 { shape[0] } else { 1 };
    let per = w.len() / filters;
    let alpha = w
        .chunks(per)
        .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect();
    Ok((bits, WeightScale { alpha }))
}

/// Straight-through weight gradient.
pub fn weight_binarize_bwd(grad_out: &[f64], w: &[f64], clip: Option<f64>) -> Result<Vec<f64>> {
    if grad_out.len() != w.len() {
        return Err(Error::shape("weight STE", &[w.len()], &[grad_out.len()]));
    }
    Ok(match clip {
        None => grad_out.to_vec(),
        Some(c) => grad_out
            .iter()
            .zip(w)
            .map(|(g, v)| if v.abs() > c { 0.0 } else { *g })
            .collect(),
    })
}

/// Derivative of the piecewise-polynomial sign approximation.
#[inline]
pub fn act_sign_poly_factor(x: f64) -> f64 {
    if (-1.0..0.0).contains(&x) {
        2.0 + 2.0 * x
    } else if (0.0..1.0).contains(&x) {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

#[inline]
pub fn act_sign_poly_bwd(grad_out: f64, x: f64) -> f64 {
    grad_out * act_sign_poly_factor(x)
}

/// Threshold for the `{0,1}` activation quantizer.
pub const ZERO_ONE_THRESHOLD: f64 = 0.5;

#[inline]
pub fn act_zero_one_fwd(x: f64) -> f64 {
    if x >= ZERO_ONE_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

/// Clipped STE: identity on `[0, 1]`, zero elsewhere.
#[inline]
pub fn act_zero_one_bwd(grad_out: f64, x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        grad_out
    } else {
        0.0
    }
}

/// Symmetric per-tensor 8-bit quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Int8Tensor {
    pub q: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
}

impl Int8Tensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.q.iter().map(|&v| f64::from(v) * self.scale).collect()
    }
}

/// `scale = max|x| / 127`, `q = round(x / scale)` clamped to `[-127, 127]`.
/// An all-zero tensor gets `scale = 1`.
pub fn affine_int8_fwd(x: &[f64]) -> Result<Int8Tensor> {
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let q = x
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(Int8Tensor {
        q,
        scale,
        zero_point: 0,
    })
}

/// Quantize-dequantize in one step, for training with 8-bit layers.
pub fn fake_quant_int8(x: &[f64]) -> Result<Vec<f64>> {
    affine_int8_fwd(x).map(|t| t.dequantize())
}

/// Inference-mode batch-norm parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    /// Per-channel `(scale, shift)` so that `bn(u) = scale * u + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.gamma.len())
            .map(|c| {
                let s = self.gamma[c] / (self.var[c] + self.eps).sqrt();
                (s, self.beta[c] - s * self.mean[c])
            })
            .unzip()
    }

    pub fn apply(&self, channel: usize, u: f64) -> f64 {
        self.gamma[channel] * (u - self.mean[channel]) / (self.var[channel] + self.eps).sqrt()
            + self.beta[channel]
    }
}

/// Folds a per-channel scale `alpha` applied before batch norm into it:
/// `bn(alpha * u) == bn'(u)` with `gamma' = gamma * alpha`, `mean' = mean / alpha`.
///
/// Any positively homogeneous op in between (PReLU) commutes with `alpha`.
pub fn fold_scales(alpha: &WeightScale, bn: Option<&BnParams>) -> Result<BnParams> {
    let bn = bn.ok_or_else(|| Error::invalid("no batch norm follows; alpha must stay explicit"))?;
    if alpha.alpha.len() != bn.gamma.len() {
        return Err(Error::shape("fold_scales", &[bn.gamma.len()], &[alpha.alpha.len()]));
    }
    if let Some(c) = alpha.alpha.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!("channel {c} has non-positive scale")));
    }
    let mut out = bn.clone();
    for (c, &a) in alpha.alpha.iter().enumerate() {
        out.gamma[c] *= a;
        out.mean[c] /= a;
    }
    Ok(out)
}
