//! Inference-only artifacts.
//!
//! Export keeps the sign bits of binary layers, int8 codes for the layers
//! kept at 8 bits, and per-channel affine scale/shift pairs with the weight
//! scale and batch norm folded in. Folded values are stored as a pair of
//! `f32` (`hi`, `lo = v - hi`) so the executor reproduces the training
//! model's inference forward to well below `f32` resolution; a plain `f32`
//! would move values near zero across the sign threshold of the next layer.

use crate::binarizers::{act_zero_one_fwd, affine_int8_fwd, fold_scales, WeightScale};
use crate::bitcore::{binary_conv2d, pack_filters, BitTensor, ConvGeometry};
use crate::checkpoint::{model_from_checkpoint, Checkpoint, Entry, Payload, CONFIG_ENTRY, EXPORT_ENTRY};
use crate::groupnet::{
    hard_gate_forward, soft_gate_forward, HardGate, Head, Model, ModelSpec, Routing, SecondPath, SoftGate,
};
use crate::nn::layers::{fake_quant_per_sample, ActQuant, BatchNorm2d, Conv2d, Linear, Mode, WeightQuant};
use crate::nn::ops;
use crate::tensor::Tensor;
use crate::{Error, Result};

fn push_pair(c: &mut Checkpoint, name: String, v: &[f64]) {
    let hi: Vec<f64> = v.iter().map(|&x| x as f32 as f64).collect();
    let lo: Vec<f64> = v.iter().zip(&hi).map(|(x, h)| x - h).collect();
    let mut data = hi;
    data.extend(lo);
    c.push(Entry::f32(name, &[2, v.len()], &data));
}

fn read_pair(c: &Checkpoint, name: &str, n: usize) -> Result<Vec<f64>> {
    let d = c.require(name, &[2, n])?.to_f64();
    Ok((0..n).map(|i| d[i] + d[n + i]).collect())
}

fn read_f32(c: &Checkpoint, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let e = c.require(name, dims)?;
    match e.payload {
        Payload::F32(_) => Ok(e.to_f64()),
        _ => Err(Error::Format(format!("{name} should hold f32 values"))),
    }
}

#[derive(Clone, Debug)]
enum Kernel {
    /// Sign or `{0,1}` activations against packed sign weights.
    Binary { filters: BitTensor, zero_one: bool },
    /// Per-sample 8-bit activations against 8-bit weights.
    Int8 { q: Vec<i8>, scale: f64 },
    Float { w: Vec<f64> },
}

#[derive(Clone, Debug)]
struct ExConv {
    name: String,
    shape: [usize; 4],
    geom: ConvGeometry,
    kernel: Kernel,
    /// Explicit per-filter scale, when it could not be folded.
    alpha: Option<Vec<f64>>,
}

impl ExConv {
    fn from_model(conv: &Conv2d, bad: &mut Vec<String>) -> Option<Self> {
        let kernel = match (conv.act, conv.wq) {
            (ActQuant::Sign | ActQuant::ZeroOne, WeightQuant::Sign { .. }) => Kernel::Binary {
                filters: pack_filters(conv.weight.data(), conv.shape()).ok()?,
                zero_one: conv.act == ActQuant::ZeroOne,
            },
            (ActQuant::Int8, WeightQuant::Int8) => {
                let t = affine_int8_fwd(conv.weight.data()).ok()?;
                Kernel::Int8 { q: t.q, scale: t.scale }
            }
            (ActQuant::Identity, WeightQuant::Real) => Kernel::Float {
                w: conv.weight.data().to_vec(),
            },
            _ => {
                bad.push(conv.name().to_string());
                return None;
            }
        };
        Some(ExConv {
            name: conv.name().to_string(),
            shape: conv.shape(),
            geom: conv.geom,
            kernel,
            alpha: conv.alpha(),
        })
    }

    /// Reloads the kernel described by `template` from exported entries.
    fn load(c: &Checkpoint, template: &Conv2d, folded: bool) -> Result<Self> {
        let name = template.name().to_string();
        let shape = template.shape();
        let kernel = match (template.act, template.wq) {
            (ActQuant::Sign | ActQuant::ZeroOne, WeightQuant::Sign { .. }) => {
                let e = c.require(&format!("{name}.bits"), &shape)?;
                if !matches!(e.payload, Payload::Bits { .. }) {
                    return Err(Error::Format(format!("{name}.bits should be bit-packed")));
                }
                Kernel::Binary {
                    filters: pack_filters(&e.to_f64(), shape)?,
                    zero_one: template.act == ActQuant::ZeroOne,
                }
            }
            (ActQuant::Int8, WeightQuant::Int8) => {
                let e = c.require(&format!("{name}.q"), &shape)?;
                let Payload::I8(q) = &e.payload else {
                    return Err(Error::Format(format!("{name}.q should be int8")));
                };
                Kernel::Int8 {
                    q: q.clone(),
                    scale: read_pair(c, &format!("{name}.qscale"), 1)?[0],
                }
            }
            _ => Kernel::Float {
                w: read_f32(c, &format!("{name}.weight"), &shape)?,
            },
        };
        let alpha = if template.alpha().is_some() && !folded {
            Some(read_pair(c, &format!("{name}.alpha"), shape[0])?)
        } else {
            None
        };
        Ok(ExConv {
            name,
            shape,
            geom: template.geom,
            kernel,
            alpha,
        })
    }

    fn save(&self, c: &mut Checkpoint) {
        match &self.kernel {
            Kernel::Binary { filters, .. } => {
                c.push(Entry::bits(format!("{}.bits", self.name), &self.shape, &filters.unpack()));
            }
            Kernel::Int8 { q, scale } => {
                c.push(Entry::i8(format!("{}.q", self.name), &self.shape, q.clone()));
                push_pair(c, format!("{}.qscale", self.name), &[*scale]);
            }
            Kernel::Float { w } => c.push(Entry::f32(format!("{}.weight", self.name), &self.shape, w)),
        }
        if let Some(a) = &self.alpha {
            push_pair(c, format!("{}.alpha", self.name), a);
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = match &self.kernel {
            Kernel::Binary { filters, zero_one } => {
                let bits = if *zero_one {
                    let a: Vec<f64> = x.data.iter().map(|&v| act_zero_one_fwd(v)).collect();
                    BitTensor::pack_zero_one(&a, &x.shape, 1)?
                } else {
                    BitTensor::pack_signs(&x.data, &x.shape, 1)?
                };
                let out = binary_conv2d(&bits, filters, &self.geom)?;
                Tensor::new(&out.shape, out.to_f64())?
            }
            Kernel::Int8 { q, scale } => {
                let a = Tensor::new(&x.shape, fake_quant_per_sample(x)?)?;
                let w: Vec<f64> = q.iter().map(|&v| f64::from(v) * scale).collect();
                ops::conv2d(&a, &w, &self.shape, &self.geom, 0.0)?
            }
            Kernel::Float { w } => ops::conv2d(x, w, &self.shape, &self.geom, 0.0)?,
        };
        if let Some(a) = &self.alpha {
            scale_channels(&mut y, a, None);
        }
        Ok(y)
    }

    fn weight_bytes(&self) -> usize {
        let n: usize = self.shape.iter().product();
        match self.kernel {
            Kernel::Binary { .. } => n.div_ceil(8),
            Kernel::Int8 { .. } => n,
            Kernel::Float { .. } => 4 * n,
        }
    }
}

fn scale_channels(t: &mut Tensor, s: &[f64], shift: Option<&[f64]>) {
    let (c, hw) = (t.shape[1], t.shape[2] * t.shape[3]);
    for (i, chunk) in t.data.chunks_mut(hw).enumerate() {
        let k = s[i % c];
        let b = shift.map_or(0.0, |b| b[i % c]);
        chunk.iter_mut().for_each(|v| *v = *v * k + b);
    }
}

/// Inference batch norm as `scale * x + shift`.
#[derive(Clone, Debug)]
struct Affine {
    name: String,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

fn bn_name(bn: &BatchNorm2d) -> String {
    bn.gamma.name.strip_suffix(".gamma").unwrap_or(&bn.gamma.name).to_string()
}

impl Affine {
    fn fold(bn: &BatchNorm2d, alpha: Option<Vec<f64>>) -> Result<Self> {
        let p = match alpha {
            Some(a) => fold_scales(&WeightScale { alpha: a }, Some(&bn.params()))?,
            None => bn.params(),
        };
        let (scale, shift) = p.affine();
        Ok(Affine {
            name: bn_name(bn),
            scale,
            shift,
        })
    }

    fn load(c: &Checkpoint, bn: &BatchNorm2d) -> Result<Self> {
        let name = bn_name(bn);
        let n = bn.channels();
        Ok(Affine {
            scale: read_pair(c, &format!("{name}.scale"), n)?,
            shift: read_pair(c, &format!("{name}.shift"), n)?,
            name,
        })
    }

    fn save(&self, c: &mut Checkpoint) {
        push_pair(c, format!("{}.scale", self.name), &self.scale);
        push_pair(c, format!("{}.shift", self.name), &self.shift);
    }

    fn apply(&self, x: &mut Tensor) {
        scale_channels(x, &self.scale, Some(&self.shift));
    }
}

/// Folding the weight scale into the batch norm is exact only when one
/// convolution feeds it and every scale is positive.
fn foldable(convs: &[&Conv2d]) -> Option<Vec<f64>> {
    match convs {
        [c] => c.alpha().filter(|a| a.iter().all(|&v| v > 0.0 && v.is_finite())),
        _ => None,
    }
}

#[derive(Clone, Debug)]
struct ExDown {
    pool: bool,
    conv: ExConv,
    bn: Affine,
}

#[derive(Clone, Debug)]
struct ExUnit {
    convs: Vec<ExConv>,
    prelu_name: String,
    slope: Vec<f64>,
    bn: Affine,
    down: Option<ExDown>,
}

impl ExUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.convs[0].forward(x)?;
        for c in &self.convs[1..] {
            z.add_assign(&c.forward(x)?);
        }
        if self.convs.len() > 1 {
            z.scale(1.0 / self.convs.len() as f64);
        }
        let c = z.shape[1];
        let hw = z.shape[2] * z.shape[3];
        for (i, chunk) in z.data.chunks_mut(hw).enumerate() {
            let s = self.slope[i % c];
            chunk.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= s
                }
            });
        }
        self.bn.apply(&mut z);
        match &self.down {
            None => {
                z.same_shape(x, &format!("{} residual", self.bn.name))?;
                z.add_assign(x);
            }
            Some(d) => {
                let pooled = if d.pool { ops::avg_pool2(x)? } else { x.clone() };
                let mut s = d.conv.forward(&pooled)?;
                d.bn.apply(&mut s);
                z.same_shape(&s, &format!("{} residual", self.bn.name))?;
                z.add_assign(&s);
            }
        }
        Ok(z)
    }
}

#[derive(Clone, Debug)]
enum ExRouting {
    Plain,
    Soft { gates: Vec<SoftGate>, mode: SecondPath },
    Hard(HardGate),
}

/// `[base][block][unit]`
#[derive(Clone, Debug)]
struct ExGroup {
    bases: Vec<Vec<Vec<ExUnit>>>,
    routing: ExRouting,
}

fn run_blocks(blocks: &[Vec<ExUnit>], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for blk in blocks {
        for u in blk {
            h = u.forward(&h)?;
        }
    }
    Ok(h)
}

impl ExGroup {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.bases.len();
        match &self.routing {
            ExRouting::Plain => {
                let mut out = run_blocks(&self.bases[0], x)?;
                for b in &self.bases[1..] {
                    out.add_assign(&run_blocks(b, x)?);
                }
                Ok(out.scaled(1.0 / k as f64))
            }
            ExRouting::Soft { gates, mode } => {
                let depth = self.bases[0].len();
                let mut inputs = vec![x.clone(); k];
                for n in 0..depth {
                    let outs = self
                        .bases
                        .iter()
                        .zip(&inputs)
                        .map(|(b, inp)| run_blocks(&b[n..n + 1], inp))
                        .collect::<Result<Vec<_>>>()?;
                    inputs = if n + 1 < depth {
                        soft_gate_forward(&outs, gates[n].theta.data(), *mode)?
                    } else {
                        outs
                    };
                }
                let mut out = Tensor::zeros(&inputs[0].shape);
                for o in &inputs {
                    out.add_assign(o);
                }
                out.scale(1.0 / k as f64);
                Ok(out)
            }
            ExRouting::Hard(gate) => {
                let sel = hard_gate_forward(x, gate)?;
                let mut samples = vec![Vec::new(); k];
                for (b, s) in sel.selected.iter().enumerate() {
                    for &i in s {
                        samples[i].push(b);
                    }
                }
                let mut out: Option<Tensor> = None;
                for (base, idx) in self.bases.iter().zip(&samples) {
                    if idx.is_empty() {
                        continue;
                    }
                    let y = run_blocks(base, &x.gather_rows(idx))?;
                    let o = out.get_or_insert_with(|| {
                        let mut shape = y.shape.clone();
                        shape[0] = x.shape[0];
                        Tensor::zeros(&shape)
                    });
                    o.scatter_add_rows(idx, &y, 1.0 / gate.n_select as f64);
                }
                out.ok_or_else(|| Error::invalid("hard gate selected nothing"))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum ExHead {
    Classify {
        name: String,
        kernel: Kernel,
        out_features: usize,
        in_features: usize,
        bias: Vec<f64>,
    },
    Segment {
        conv: ExConv,
        bias: Vec<f64>,
        upsample: usize,
    },
}

/// Executor for an exported artifact. Holds no latent weights.
#[derive(Clone, Debug)]
pub struct ExportedModel {
    pub spec: ModelSpec,
    stem: ExConv,
    stem_bn: Affine,
    groups: Vec<ExGroup>,
    head: ExHead,
}

fn unit_parts<'a>(
    m: &'a Model,
) -> impl Iterator<Item = (usize, usize, usize, &'a crate::groupnet::Unit)> + 'a {
    m.groups.iter().enumerate().flat_map(|(p, g)| {
        g.bases.iter().enumerate().flat_map(move |(k, b)| {
            b.blocks.iter().enumerate().flat_map(move |(n, blk)| blk.units.iter().map(move |u| (p, k, n, u)))
        })
    })
}

/// Builds `[group][base][block][unit]` from a per-unit constructor.
fn build_groups(
    m: &Model,
    mut unit: impl FnMut(&crate::groupnet::Unit) -> Result<ExUnit>,
    mut routing: impl FnMut(&Routing) -> Result<ExRouting>,
) -> Result<Vec<ExGroup>> {
    let mut groups: Vec<ExGroup> = Vec::new();
    for g in &m.groups {
        groups.push(ExGroup {
            bases: g.bases.iter().map(|b| vec![Vec::new(); b.blocks.len()]).collect(),
            routing: routing(&g.routing)?,
        });
    }
    for (p, k, n, u) in unit_parts(m) {
        groups[p].bases[k][n].push(unit(u)?);
    }
    Ok(groups)
}

fn linear_kernel(fc: &Linear) -> Result<Kernel> {
    Ok(if fc.int8 {
        let t = affine_int8_fwd(fc.weight.data())?;
        Kernel::Int8 { q: t.q, scale: t.scale }
    } else {
        Kernel::Float {
            w: fc.weight.data().to_vec(),
        }
    })
}

impl ExportedModel {
    /// Folds a trained model. Fails listing every layer whose weights are
    /// not in a deployable form (e.g. real-valued weights under binary
    /// activations, as after stage one).
    pub fn from_model(m: &Model) -> Result<Self> {
        let mut bad = Vec::new();
        fn try_conv(c: &Conv2d, folded: bool, bad: &mut Vec<String>) -> Option<ExConv> {
            ExConv::from_model(c, bad).map(|mut e| {
                if folded {
                    e.alpha = None;
                }
                e
            })
        }
        let stem_alpha = foldable(&[&m.stem]);
        let stem = try_conv(&m.stem, stem_alpha.is_some(), &mut bad);
        let stem_bn = Affine::fold(&m.stem_bn, stem_alpha)?;
        let mut units_ok = true;
        let groups = build_groups(
            m,
            |u| {
                let refs: Vec<&Conv2d> = u.convs.iter().collect();
                let a = foldable(&refs);
                let convs: Vec<Option<ExConv>> =
                    u.convs.iter().map(|c| try_conv(c, a.is_some(), &mut bad)).collect();
                let down = match &u.down {
                    None => None,
                    Some(d) => {
                        let da = foldable(&[&d.conv]);
                        let c = try_conv(&d.conv, da.is_some(), &mut bad);
                        Some((d.pool, c, Affine::fold(&d.bn, da)?))
                    }
                };
                if convs.iter().any(Option::is_none) || matches!(down, Some((_, None, _))) {
                    units_ok = false;
                }
                Ok(ExUnit {
                    convs: convs.into_iter().flatten().collect(),
                    prelu_name: u.prelu.slope.name.clone(),
                    slope: u.prelu.slope.data().to_vec(),
                    bn: Affine::fold(&u.bn, a)?,
                    down: down.and_then(|(pool, c, bn)| c.map(|conv| ExDown { pool, conv, bn })),
                })
            },
            |r| {
                Ok(match r {
                    Routing::Plain => ExRouting::Plain,
                    Routing::Soft { gates, mode } => ExRouting::Soft {
                        gates: gates.clone(),
                        mode: *mode,
                    },
                    Routing::Hard(h) => ExRouting::Hard(h.clone()),
                })
            },
        )?;
        let head = match &m.head {
            Head::Classify(fc) => ExHead::Classify {
                name: fc.name().to_string(),
                kernel: linear_kernel(fc)?,
                out_features: fc.out_features(),
                in_features: fc.in_features(),
                bias: fc.bias.data().to_vec(),
            },
            Head::Segment { conv, bias, upsample } => {
                let c = try_conv(conv, false, &mut bad);
                match c {
                    Some(conv) => ExHead::Segment {
                        conv,
                        bias: bias.data().to_vec(),
                        upsample: *upsample,
                    },
                    None => ExHead::Classify {
                        name: String::new(),
                        kernel: Kernel::Float { w: Vec::new() },
                        out_features: 0,
                        in_features: 0,
                        bias: Vec::new(),
                    },
                }
            }
        };
        if !bad.is_empty() || !units_ok {
            return Err(Error::invalid(format!(
                "cannot fold layers with real-valued weights under binary inputs: {}",
                bad.join(", ")
            )));
        }
        Ok(ExportedModel {
            spec: m.spec.clone(),
            stem: stem.expect("stem checked above"),
            stem_bn,
            groups,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_text(CONFIG_ENTRY, &self.spec.to_text());
        c.push(Entry::i8(EXPORT_ENTRY, &[1], vec![1]));
        self.stem.save(&mut c);
        self.stem_bn.save(&mut c);
        for g in &self.groups {
            for base in &g.bases {
                for u in base.iter().flatten() {
                    for conv in &u.convs {
                        conv.save(&mut c);
                    }
                    c.push(Entry::f32(u.prelu_name.clone(), &[u.slope.len()], &u.slope));
                    u.bn.save(&mut c);
                    if let Some(d) = &u.down {
                        d.conv.save(&mut c);
                        d.bn.save(&mut c);
                    }
                }
            }
            match &g.routing {
                ExRouting::Plain => {}
                ExRouting::Soft { gates, .. } => {
                    for s in gates {
                        c.push(Entry::f32(s.theta.name.clone(), s.theta.shape(), s.theta.data()));
                    }
                }
                ExRouting::Hard(h) => c.push(Entry::f32(h.nu.name.clone(), h.nu.shape(), h.nu.data())),
            }
        }
        match &self.head {
            ExHead::Classify {
                name,
                kernel,
                out_features,
                in_features,
                bias,
            } => {
                let dims = [*out_features, *in_features];
                match kernel {
                    Kernel::Int8 { q, scale } => {
                        c.push(Entry::i8(format!("{name}.q"), &dims, q.clone()));
                        push_pair(&mut c, format!("{name}.qscale"), &[*scale]);
                    }
                    Kernel::Float { w } => c.push(Entry::f32(format!("{name}.weight"), &dims, w)),
                    Kernel::Binary { .. } => unreachable!("linear heads are never binary"),
                }
                c.push(Entry::f32(format!("{name}.bias"), &[*out_features], bias));
            }
            ExHead::Segment { conv, bias, .. } => {
                conv.save(&mut c);
                c.push(Entry::f32("head.bias", &[bias.len()], bias));
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.get(EXPORT_ENTRY).is_none() {
            return Err(Error::Format("not an exported artifact; run export first".into()));
        }
        let spec = ModelSpec::from_text(&c.text(CONFIG_ENTRY)?)?;
        // A freshly built model supplies names, shapes and geometry only.
        let t = Model::new(spec.clone())?;
        let stem_folded = foldable(&[&t.stem]).is_some();
        let stem = ExConv::load(c, &t.stem, stem_folded)?;
        let stem_bn = Affine::load(c, &t.stem_bn)?;
        let groups = build_groups(
            &t,
            |u| {
                let refs: Vec<&Conv2d> = u.convs.iter().collect();
                let folded = foldable(&refs).is_some();
                let convs = u.convs.iter().map(|cv| ExConv::load(c, cv, folded)).collect::<Result<_>>()?;
                let down = match &u.down {
                    None => None,
                    Some(d) => Some(ExDown {
                        pool: d.pool,
                        conv: ExConv::load(c, &d.conv, foldable(&[&d.conv]).is_some())?,
                        bn: Affine::load(c, &d.bn)?,
                    }),
                };
                let n = u.prelu.slope.value.numel();
                Ok(ExUnit {
                    convs,
                    prelu_name: u.prelu.slope.name.clone(),
                    slope: read_f32(c, &u.prelu.slope.name, &[n])?,
                    bn: Affine::load(c, &u.bn)?,
                    down,
                })
            },
            |r| {
                Ok(match r {
                    Routing::Plain => ExRouting::Plain,
                    Routing::Soft { gates, mode } => {
                        let mut gates = gates.clone();
                        for s in &mut gates {
                            let shape = s.theta.shape().to_vec();
                            s.theta.value.data = read_f32(c, &s.theta.name, &shape)?;
                        }
                        ExRouting::Soft { gates, mode: *mode }
                    }
                    Routing::Hard(h) => {
                        let mut h = h.clone();
                        let shape = h.nu.shape().to_vec();
                        h.nu.value.data = read_f32(c, &h.nu.name, &shape)?;
                        ExRouting::Hard(h)
                    }
                })
            },
        )?;
        let head = match &t.head {
            Head::Classify(fc) => {
                let name = fc.name().to_string();
                let dims = [fc.out_features(), fc.in_features()];
                let kernel = if fc.int8 {
                    let e = c.require(&format!("{name}.q"), &dims)?;
                    let Payload::I8(q) = &e.payload else {
                        return Err(Error::Format(format!("{name}.q should be int8")));
                    };
                    Kernel::Int8 {
                        q: q.clone(),
                        scale: read_pair(c, &format!("{name}.qscale"), 1)?[0],
                    }
                } else {
                    Kernel::Float {
                        w: read_f32(c, &format!("{name}.weight"), &dims)?,
                    }
                };
                ExHead::Classify {
                    bias: read_f32(c, &format!("{name}.bias"), &[dims[0]])?,
                    name,
                    kernel,
                    out_features: dims[0],
                    in_features: dims[1],
                }
            }
            Head::Segment { conv, bias, upsample } => ExHead::Segment {
                conv: ExConv::load(c, conv, false)?,
                bias: read_f32(c, &bias.name, bias.shape())?,
                upsample: *upsample,
            },
        };
        Ok(ExportedModel {
            spec,
            stem,
            stem_bn,
            groups,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let bb = &self.spec.backbone;
        if c != bb.in_channels || (h, w) != bb.input_hw {
            return Err(Error::shape(
                "model input (layer 0)",
                &[bb.in_channels, bb.input_hw.0, bb.input_hw.1],
                &[c, h, w],
            ));
        }
        let mut h = self.stem.forward(x)?;
        self.stem_bn.apply(&mut h);
        for g in &self.groups {
            h = g.forward(&h)?;
        }
        match &self.head {
            ExHead::Classify {
                kernel,
                out_features,
                bias,
                ..
            } => {
                let feat = ops::global_avg_pool(&h)?;
                match kernel {
                    Kernel::Int8 { q, scale } => {
                        let a = Tensor::new(&feat.shape, fake_quant_per_sample(&feat)?)?;
                        let w: Vec<f64> = q.iter().map(|&v| f64::from(v) * scale).collect();
                        ops::linear(&a, &w, *out_features, bias)
                    }
                    Kernel::Float { w } => ops::linear(&feat, w, *out_features, bias),
                    Kernel::Binary { .. } => unreachable!("linear heads are never binary"),
                }
            }
            ExHead::Segment { conv, bias, upsample } => {
                let mut z = conv.forward(&h)?;
                let ones = vec![1.0; bias.len()];
                scale_channels(&mut z, &ones, Some(bias));
                ops::upsample_bilinear(&z, *upsample)
            }
        }
    }

    /// Weight storage: packed bits, int8 codes and any float weights.
    pub fn weight_bytes(&self) -> usize {
        let mut total = self.stem.weight_bytes();
        for g in &self.groups {
            for u in g.bases.iter().flatten().flatten() {
                total += u.convs.iter().map(ExConv::weight_bytes).sum::<usize>();
                total += u.down.as_ref().map_or(0, |d| d.conv.weight_bytes());
            }
        }
        total
            + match &self.head {
                ExHead::Classify { kernel, out_features, in_features, .. } => {
                    let n = out_features * in_features;
                    if matches!(kernel, Kernel::Int8 { .. }) { n } else { 4 * n }
                }
                ExHead::Segment { conv, .. } => conv.weight_bytes(),
            }
    }
}

/// Exports a training checkpoint. An already exported artifact is
/// re-emitted unchanged.
pub fn export_checkpoint(c: &Checkpoint) -> Result<Checkpoint> {
    if c.get(EXPORT_ENTRY).is_some() {
        return Ok(ExportedModel::from_checkpoint(c)?.to_checkpoint());
    }
    let m = model_from_checkpoint(c)?;
    Ok(ExportedModel::from_model(&m)?.to_checkpoint())
}

/// Reference inference forward of the training model.
pub fn reference_forward(m: &mut Model, x: &Tensor) -> Result<Tensor> {
    Ok(m.forward(x, Mode::Eval)?.0)
}
