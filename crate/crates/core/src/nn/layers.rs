//! Layers with explicit forward caches.
//!
//! `forward` in [`Mode::Train`] returns a cache that the matching
//! `backward` consumes; gradients are accumulated into the layer's params.

use rand::Rng;

use super::ops;
use crate::binarizers::{
    act_sign_poly_factor, act_zero_one_bwd, act_zero_one_fwd, fake_quant_int8, sign,
    weight_binarize_bwd, BnParams,
};
use crate::bitcore::{binary_conv2d, pack_filters, BitTensor, ConvGeometry, PadValue};
use crate::tensor::{Param, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Quantizer applied to a convolution's input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActQuant {
    Identity,
    /// ±1 with the piecewise-polynomial backward.
    Sign,
    /// `{0,1}` with the clipped straight-through backward.
    ZeroOne,
    /// Symmetric 8-bit fake quantization per sample, straight-through backward.
    Int8,
}

/// Quantizer applied to a layer's latent weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightQuant {
    Real,
    Sign { clip: Option<f64> },
    Int8,
}

impl WeightQuant {
    pub fn is_binary(self) -> bool {
        matches!(self, WeightQuant::Sign { .. })
    }
}

/// Scaled uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
        grad: None,
    }
}

/// 8-bit fake quantization with one scale per sample (leading axis).
pub fn fake_quant_per_sample(x: &Tensor) -> Result<Vec<f64>> {
    let per = x.numel() / x.shape[0].max(1);
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data.chunks(per.max(1)) {
        out.extend(fake_quant_int8(chunk)?);
    }
    Ok(out)
}

fn quantize_act(kind: ActQuant, x: &Tensor) -> Result<Vec<f64>> {
    Ok(match kind {
        ActQuant::Identity => x.data.clone(),
        ActQuant::Sign => x.data.iter().map(|&v| sign(v)).collect(),
        ActQuant::ZeroOne => x.data.iter().map(|&v| act_zero_one_fwd(v)).collect(),
        ActQuant::Int8 => fake_quant_per_sample(x)?,
    })
}

/// Convolution with pluggable input and weight quantizers.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub geom: ConvGeometry,
    pub act: ActQuant,
    pub wq: WeightQuant,
    /// Multiply binary outputs by the per-filter mean `|w|`.
    pub use_alpha: bool,
    /// Route binary x binary convolutions through the bit-packed kernel.
    pub packed: bool,
    /// Forward calls served by the packed kernel / by the dense kernel.
    pub packed_calls: u64,
    pub dense_calls: u64,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    x: Tensor,
    w_used: Vec<f64>,
    alpha: Option<(Vec<f64>, Tensor)>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        rng: &mut impl Rng,
        shape: [usize; 4],
        geom: ConvGeometry,
        act: ActQuant,
        wq: WeightQuant,
    ) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3];
        Conv2d {
            weight: Param::new(format!("{name}.weight"), init_uniform(rng, &shape, fan_in), true),
            geom,
            act,
            wq,
            use_alpha: false,
            packed: true,
            packed_calls: 0,
            dense_calls: 0,
        }
    }

    /// Layer name (the weight's name without its suffix).
    pub fn name(&self) -> &str {
        layer_name(&self.weight.name)
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.weight.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn out_channels(&self) -> usize {
        self.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape()[1]
    }

    /// Value a padded input position takes after quantization.
    pub fn pad_real(&self) -> f64 {
        match self.act {
            ActQuant::Sign => self.geom.pad_value.as_real(),
            _ => 0.0,
        }
    }

    fn effective_weights(&self) -> Result<Vec<f64>> {
        let w = self.weight.data();
        Ok(match self.wq {
            WeightQuant::Real => w.to_vec(),
            WeightQuant::Sign { .. } => w.iter().map(|&v| sign(v)).collect(),
            WeightQuant::Int8 => fake_quant_int8(w)?,
        })
    }

    /// Per-filter mean `|w|`, if this layer applies it.
    pub fn alpha(&self) -> Option<Vec<f64>> {
        if !(self.use_alpha && self.wq.is_binary()) {
            return None;
        }
        let per = self.weight.value.numel() / self.out_channels();
        Some(
            self.weight
                .data()
                .chunks(per)
                .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / per as f64)
                .collect(),
        )
    }

    /// Whether the forward pass is an exact bit-packed computation.
    pub fn is_binary(&self) -> bool {
        self.wq.is_binary() && matches!(self.act, ActQuant::Sign | ActQuant::ZeroOne)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<ConvCache>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                format!("{} input channels", self.name()),
                &[self.in_channels()],
                &[c],
            ));
        }
        let w_used = self.effective_weights()?;
        let mut z = if self.packed && self.is_binary() {
            self.packed_calls += 1;
            let bits = match self.act {
                ActQuant::Sign => BitTensor::pack_signs(&x.data, &x.shape, 1)?,
                _ => {
                    let a: Vec<f64> = x.data.iter().map(|&v| act_zero_one_fwd(v)).collect();
                    BitTensor::pack_zero_one(&a, &x.shape, 1)?
                }
            };
            let filters = pack_filters(&w_used, self.shape())?;
            let out = binary_conv2d(&bits, &filters, &self.geom)?;
            Tensor::new(&out.shape, out.to_f64())?
        } else {
            self.dense_calls += 1;
            let a = Tensor::new(&x.shape, quantize_act(self.act, x)?)?;
            ops::conv2d(&a, &w_used, &self.shape(), &self.geom, self.pad_real())?
        };
        let alpha = match self.alpha() {
            Some(al) => {
                let pre = z.clone();
                scale_channels(&mut z, &al);
                Some((al, pre))
            }
            None => None,
        };
        let cache = (mode == Mode::Train).then(|| ConvCache {
            x: x.clone(),
            w_used,
            alpha,
        });
        Ok((z, cache))
    }

    pub fn backward(&mut self, cache: ConvCache, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let mut g = grad.clone();
        let mut alpha_grad = None;
        if let Some((al, pre)) = &cache.alpha {
            let (n, c, h, w) = g.dims4()?;
            let mut ga = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let s = &mut g.data[(b * c + ch) * h * w..][..h * w];
                    let p = &pre.data[(b * c + ch) * h * w..][..h * w];
                    ga[ch] += s.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                    s.iter_mut().for_each(|v| *v *= al[ch]);
                }
            }
            alpha_grad = Some(ga);
        }
        let a = Tensor::new(&cache.x.shape, quantize_act(self.act, &cache.x)?)?;
        let (da, dw_used) =
            ops::conv2d_backward(&a, &cache.w_used, &self.shape(), &self.geom, self.pad_real(), &g, need_input_grad)?;
        let mut dw = match self.wq {
            WeightQuant::Sign { clip } => weight_binarize_bwd(&dw_used, self.weight.data(), clip)?,
            WeightQuant::Real | WeightQuant::Int8 => dw_used,
        };
        if let Some(ga) = alpha_grad {
            // d alpha_f / d w_i = sign(w_i) / fan_in
            let per = dw.len() / ga.len();
            for (i, (d, &w)) in dw.iter_mut().zip(self.weight.data()).enumerate() {
                *d += ga[i / per] * sign(w) / per as f64;
            }
        }
        self.weight.accumulate(&dw);
        let Some(mut dx) = da else { return Ok(None) };
        match self.act {
            ActQuant::Identity | ActQuant::Int8 => {}
            ActQuant::Sign => {
                for (d, &x) in dx.data.iter_mut().zip(&cache.x.data) {
                    *d *= act_sign_poly_factor(x);
                }
            }
            ActQuant::ZeroOne => {
                for (d, &x) in dx.data.iter_mut().zip(&cache.x.data) {
                    *d = act_zero_one_bwd(*d, x);
                }
            }
        }
        Ok(Some(dx))
    }
}

fn layer_name(param: &str) -> &str {
    param.strip_suffix(".weight").unwrap_or(param)
}

fn scale_channels(t: &mut Tensor, s: &[f64]) {
    let (c, hw) = (t.shape[1], t.shape[2] * t.shape[3]);
    for (i, chunk) in t.data.chunks_mut(hw).enumerate() {
        let k = s[i % c];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
}

/// Per-channel batch normalization over `N,H,W`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Inference-mode parameters.
    pub fn params(&self) -> BnParams {
        BnParams {
            gamma: self.gamma.data().to_vec(),
            beta: self.beta.data().to_vec(),
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            eps: self.eps,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BnCache>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(
                format!("{} channels", self.gamma.name),
                &[self.channels()],
                &[c],
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var) = if mode == Mode::Train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, chunk) in x.data.chunks(hw).enumerate() {
                mean[i % c] += chunk.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (i, chunk) in x.data.chunks(hw).enumerate() {
                let mu = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(&x.shape);
        let mut y = Tensor::zeros(&x.shape);
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for (i, (src, (xh, dst))) in x
            .data
            .chunks(hw)
            .zip(x_hat.data.chunks_mut(hw).zip(y.data.chunks_mut(hw)))
            .enumerate()
        {
            let ch = i % c;
            for k in 0..hw {
                xh[k] = (src[k] - mean[ch]) * inv_std[ch];
                dst[k] = gamma[ch] * xh[k] + beta[ch];
            }
        }
        let cache = (mode == Mode::Train).then_some(BnCache { x_hat, inv_std });
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: BnCache, grad: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = grad.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (i, (g, xh)) in grad.data.chunks(hw).zip(cache.x_hat.data.chunks(hw)).enumerate() {
            sum_g[i % c] += g.iter().sum::<f64>();
            sum_gx[i % c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
        self.gamma.accumulate(&sum_gx);
        self.beta.accumulate(&sum_g);
        let gamma = self.gamma.data();
        let mut dx = Tensor::zeros(&grad.shape);
        for (i, (d, (g, xh))) in dx
            .data
            .chunks_mut(hw)
            .zip(grad.data.chunks(hw).zip(cache.x_hat.data.chunks(hw)))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma[ch] * cache.inv_std[ch];
            for j in 0..hw {
                d[j] = k * (g[j] - sum_g[ch] / m - xh[j] * sum_gx[ch] / m);
            }
        }
        Ok(dx)
    }
}

/// PReLU with one slope per channel.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: Param,
}

#[derive(Clone, Debug)]
pub struct PReluCache {
    x: Tensor,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            slope: Param::new(format!("{name}.slope"), Tensor::full(&[channels], 0.25), false),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<PReluCache>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.slope.value.numel() {
            return Err(Error::shape(
                format!("{} channels", self.slope.name),
                &[self.slope.value.numel()],
                &[c],
            ));
        }
        let a = self.slope.data();
        let mut y = x.clone();
        for (i, chunk) in y.data.chunks_mut(h * w).enumerate() {
            let s = a[i % c];
            chunk.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= s
                }
            });
        }
        Ok((y, (mode == Mode::Train).then(|| PReluCache { x: x.clone() })))
    }

    pub fn backward(&mut self, cache: PReluCache, grad: &Tensor) -> Tensor {
        let (c, hw) = (grad.shape[1], grad.shape[2] * grad.shape[3]);
        let a = self.slope.data().to_vec();
        let mut da = vec![0.0; c];
        let mut dx = grad.clone();
        for (i, (d, x)) in dx.data.chunks_mut(hw).zip(cache.x.data.chunks(hw)).enumerate() {
            let ch = i % c;
            for (dv, &xv) in d.iter_mut().zip(x) {
                if xv < 0.0 {
                    da[ch] += *dv * xv;
                    *dv *= a[ch];
                }
            }
        }
        self.slope.accumulate(&da);
        dx
    }
}

/// Fully-connected layer, optionally 8-bit fake-quantized.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub int8: bool,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    a: Tensor,
    w_used: Vec<f64>,
}

impl Linear {
    pub fn new(name: &str, rng: &mut impl Rng, in_features: usize, out_features: usize, int8: bool) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                init_uniform(rng, &[out_features, in_features], in_features),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features]), false),
            int8,
        }
    }

    pub fn name(&self) -> &str {
        layer_name(&self.weight.name)
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<LinearCache>)> {
        if x.shape.len() != 2 || x.shape[1] != self.in_features() {
            return Err(Error::shape(
                format!("{} input", self.name()),
                &[self.in_features()],
                &x.shape[1..],
            ));
        }
        let (a, w_used) = if self.int8 {
            (
                Tensor::new(&x.shape, fake_quant_per_sample(x)?)?,
                fake_quant_int8(self.weight.data())?,
            )
        } else {
            (x.clone(), self.weight.data().to_vec())
        };
        let y = ops::linear(&a, &w_used, self.out_features(), self.bias.data())?;
        Ok((y, (mode == Mode::Train).then_some(LinearCache { a, w_used })))
    }

    pub fn backward(&mut self, cache: LinearCache, grad: &Tensor) -> Tensor {
        let (dx, dw, db) = ops::linear_backward(&cache.a, &cache.w_used, self.out_features(), grad);
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        dx
    }
}

/// Shared helper for modules that hold a pad-mode override.
pub fn geometry(stride: usize, padding: usize, dilation: usize, pad: PadValue) -> ConvGeometry {
    ConvGeometry::new(stride, padding, dilation).with_pad_value(pad)
}
