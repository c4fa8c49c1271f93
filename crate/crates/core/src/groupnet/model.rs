//! Decomposed binary networks: stem, groups of K bases, head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gates::{
    hard_gate_backward, hard_gate_forward, soft_gate_backward, soft_gate_forward, HardGate, HardGateCache,
    SoftGate,
};
use super::spec::{Decomposition, Gating, HeadSpec, ModelSpec, SecondPath};
use crate::bitcore::ConvGeometry;
use crate::nn::layers::{
    geometry, ActQuant, BatchNorm2d, BnCache, Conv2d, ConvCache, Linear, LinearCache, Mode, PRelu, PReluCache,
    WeightQuant,
};
use crate::nn::ops;
use crate::tensor::{Param, Tensor};
use crate::{Error, Result};

/// Training stage of the binary body.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Binary activations, real-valued weights.
    One,
    /// Binary activations and weights.
    Two,
}

/// Arithmetic a layer runs at after training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Binary,
    Int8,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    Stem,
    Body,
    Downsample,
    Head,
}

/// Skip path that changes resolution or width.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub pool: bool,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct DownCache {
    in_shape: Vec<usize>,
    conv: ConvCache,
    bn: BnCache,
}

impl Downsample {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<DownCache>)> {
        let pooled = if self.pool { ops::avg_pool2(x)? } else { x.clone() };
        let (z, cc) = self.conv.forward(&pooled, mode)?;
        let (y, bc) = self.bn.forward(&z, mode)?;
        let cache = cc.zip(bc).map(|(conv, bn)| DownCache {
            in_shape: x.shape.clone(),
            conv,
            bn,
        });
        Ok((y, cache))
    }

    fn backward(&mut self, cache: DownCache, grad: &Tensor) -> Result<Tensor> {
        let g = self.bn.backward(cache.bn, grad)?;
        let g = self.conv.backward(cache.conv, &g, true)?.ok_or(Error::MissingTape)?;
        Ok(if self.pool { ops::avg_pool2_backward(&cache.in_shape, &g) } else { g })
    }
}

/// `skip(x) + BN(PReLU(mean_k conv_k(x)))`.
#[derive(Clone, Debug)]
pub struct Unit {
    /// One conv, or K parallel branches under layer-wise decomposition.
    pub convs: Vec<Conv2d>,
    pub prelu: PRelu,
    pub bn: BatchNorm2d,
    pub down: Option<Downsample>,
}

#[derive(Clone, Debug)]
struct UnitCache {
    convs: Vec<ConvCache>,
    prelu: PReluCache,
    bn: BnCache,
    down: Option<DownCache>,
}

impl Unit {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<UnitCache>)> {
        let k = self.convs.len();
        let mut z: Option<Tensor> = None;
        let mut ccs = Vec::with_capacity(k);
        for conv in &mut self.convs {
            let (y, c) = conv.forward(x, mode)?;
            match z.as_mut() {
                None => z = Some(y),
                Some(acc) => acc.add_assign(&y),
            }
            ccs.push(c);
        }
        let mut z = z.ok_or_else(|| Error::invalid("unit without convolutions"))?;
        if k > 1 {
            z.scale(1.0 / k as f64);
        }
        let (p, pc) = self.prelu.forward(&z, mode)?;
        let (mut y, bc) = self.bn.forward(&p, mode)?;
        let dc = match self.down.as_mut() {
            None => {
                y.same_shape(x, &format!("{} residual", self.bn.gamma.name))?;
                y.add_assign(x);
                None
            }
            Some(d) => {
                let (s, dc) = d.forward(x, mode)?;
                y.same_shape(&s, &format!("{} residual", self.bn.gamma.name))?;
                y.add_assign(&s);
                dc
            }
        };
        let cache = (mode == Mode::Train)
            .then(|| {
                Some(UnitCache {
                    convs: ccs.into_iter().collect::<Option<Vec<_>>>()?,
                    prelu: pc?,
                    bn: bc?,
                    down: dc,
                })
            })
            .flatten();
        Ok((y, cache))
    }

    fn backward(&mut self, cache: UnitCache, grad: &Tensor) -> Result<Tensor> {
        let g = self.bn.backward(cache.bn, grad)?;
        let mut g = self.prelu.backward(cache.prelu, &g);
        let k = self.convs.len();
        if k > 1 {
            g.scale(1.0 / k as f64);
        }
        let mut dx = match (self.down.as_mut(), cache.down) {
            (None, _) => grad.clone(),
            (Some(d), Some(dc)) => d.backward(dc, grad)?,
            (Some(_), None) => return Err(Error::MissingTape),
        };
        for (conv, cc) in self.convs.iter_mut().zip(cache.convs) {
            let d = conv.backward(cc, &g, true)?.ok_or(Error::MissingTape)?;
            dx.add_assign(&d);
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub units: Vec<Unit>,
}

type BlockCache = Vec<UnitCache>;

impl Block {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BlockCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::new();
        for u in &mut self.units {
            let (y, c) = u.forward(&h, mode)?;
            h = y;
            if let Some(c) = c {
                caches.push(c);
            }
        }
        Ok((h, (mode == Mode::Train).then_some(caches)))
    }

    fn backward(&mut self, cache: BlockCache, grad: &Tensor) -> Result<Tensor> {
        if cache.len() != self.units.len() {
            return Err(Error::MissingTape);
        }
        let mut g = grad.clone();
        for (u, c) in self.units.iter_mut().zip(cache).rev() {
            g = u.backward(c, &g)?;
        }
        Ok(g)
    }
}

/// One binary base: a stack of blocks covering a whole group.
#[derive(Clone, Debug)]
pub struct Base {
    pub blocks: Vec<Block>,
}

impl Base {
    fn forward_cached(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BlockCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::new();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            h = y;
            caches.extend(c);
        }
        Ok((h, caches))
    }

    /// Inference-mode output of the whole stack.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x, Mode::Eval)?.0)
    }

    fn backward(&mut self, caches: Vec<BlockCache>, grad: &Tensor) -> Result<Tensor> {
        if caches.len() != self.blocks.len() {
            return Err(Error::MissingTape);
        }
        let mut g = grad.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            g = b.backward(c, &g)?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
pub enum Routing {
    /// Every base runs end to end; outputs are averaged.
    Plain,
    /// Soft gates between consecutive blocks.
    Soft { gates: Vec<SoftGate>, mode: SecondPath },
    /// Per-sample Top-N selection of bases.
    Hard(HardGate),
}

#[derive(Clone, Debug)]
pub struct Group {
    pub bases: Vec<Base>,
    pub routing: Routing,
}

#[derive(Clone, Debug)]
enum GroupCache {
    Plain(Vec<Vec<BlockCache>>),
    Soft {
        /// `[block][base]`
        blocks: Vec<Vec<BlockCache>>,
        /// Base outputs feeding each gate, `[gate][base]`.
        gate_inputs: Vec<Vec<Tensor>>,
    },
    Hard {
        gate: HardGateCache,
        samples: Vec<Vec<usize>>,
        caches: Vec<Vec<BlockCache>>,
        outputs: Vec<Option<Tensor>>,
    },
}

impl Group {
    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<GroupCache>)> {
        let k = self.bases.len();
        let train = mode == Mode::Train;
        match &mut self.routing {
            Routing::Plain => {
                let mut out: Option<Tensor> = None;
                let mut caches = Vec::with_capacity(k);
                for base in &mut self.bases {
                    let (y, c) = base.forward_cached(x, mode)?;
                    match out.as_mut() {
                        None => out = Some(y),
                        Some(o) => o.add_assign(&y),
                    }
                    caches.push(c);
                }
                let out = out.ok_or_else(|| Error::invalid("group without bases"))?.scaled(1.0 / k as f64);
                Ok((out, train.then_some(GroupCache::Plain(caches))))
            }
            Routing::Soft { gates, mode: path } => {
                let depth = self.bases[0].blocks.len();
                let mut inputs = vec![x.clone(); k];
                let mut blocks = Vec::with_capacity(depth);
                let mut gate_inputs = Vec::new();
                for n in 0..depth {
                    let mut outs = Vec::with_capacity(k);
                    let mut caches = Vec::with_capacity(k);
                    for (base, inp) in self.bases.iter_mut().zip(&inputs) {
                        let (y, c) = base.blocks[n].forward(inp, mode)?;
                        outs.push(y);
                        caches.extend(c);
                    }
                    blocks.push(caches);
                    if n + 1 < depth {
                        inputs = soft_gate_forward(&outs, gates[n].theta.data(), *path)?;
                        if train {
                            gate_inputs.push(outs);
                        }
                    } else {
                        inputs = outs;
                    }
                }
                let mut out = Tensor::zeros(&inputs[0].shape);
                for o in &inputs {
                    out.add_assign(o);
                }
                out.scale(1.0 / k as f64);
                Ok((out, train.then_some(GroupCache::Soft { blocks, gate_inputs })))
            }
            Routing::Hard(gate) => {
                let sel = hard_gate_forward(x, gate)?;
                let n_sel = gate.n_select as f64;
                let batch = x.shape[0];
                let mut samples = vec![Vec::new(); k];
                for (b, s) in sel.selected.iter().enumerate() {
                    for &i in s {
                        samples[i].push(b);
                    }
                }
                let mut out: Option<Tensor> = None;
                let mut caches = Vec::with_capacity(k);
                let mut outputs = Vec::with_capacity(k);
                for (base, idx) in self.bases.iter_mut().zip(&samples) {
                    if idx.is_empty() {
                        caches.push(Vec::new());
                        outputs.push(None);
                        continue;
                    }
                    let (y, c) = base.forward_cached(&x.gather_rows(idx), mode)?;
                    let o = out.get_or_insert_with(|| {
                        let mut shape = y.shape.clone();
                        shape[0] = batch;
                        Tensor::zeros(&shape)
                    });
                    o.scatter_add_rows(idx, &y, 1.0 / n_sel);
                    caches.push(c);
                    outputs.push(train.then_some(y));
                }
                let out = out.ok_or_else(|| Error::invalid("hard gate selected nothing"))?;
                let cache = train.then_some(GroupCache::Hard {
                    gate: sel.cache,
                    samples,
                    caches,
                    outputs,
                });
                Ok((out, cache))
            }
        }
    }

    fn backward(&mut self, cache: GroupCache, grad: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
        let k = self.bases.len();
        match (&mut self.routing, cache) {
            (Routing::Plain, GroupCache::Plain(caches)) => {
                let g = grad.clone().scaled(1.0 / k as f64);
                let mut dx = Tensor::zeros(in_shape);
                for (base, c) in self.bases.iter_mut().zip(caches) {
                    dx.add_assign(&base.backward(c, &g)?);
                }
                Ok(dx)
            }
            (Routing::Soft { gates, mode }, GroupCache::Soft { blocks, gate_inputs }) => {
                let depth = blocks.len();
                let mut grads = vec![grad.clone().scaled(1.0 / k as f64); k];
                let mut gate_inputs = gate_inputs;
                for (n, caches) in blocks.into_iter().enumerate().rev() {
                    if caches.len() != k {
                        return Err(Error::MissingTape);
                    }
                    let mut gin = Vec::with_capacity(k);
                    for ((base, c), g) in self.bases.iter_mut().zip(caches).zip(&grads) {
                        gin.push(base.blocks[n].backward(c, g)?);
                    }
                    if n == 0 {
                        grads = gin;
                    } else {
                        let prev = gate_inputs.pop().ok_or(Error::MissingTape)?;
                        let gate = &mut gates[n - 1];
                        let (gp, gt) = soft_gate_backward(&prev, gate.theta.data(), *mode, &gin)?;
                        gate.theta.accumulate(&gt);
                        grads = gp;
                    }
                }
                debug_assert!(depth == 0 || gate_inputs.is_empty());
                let mut dx = Tensor::zeros(in_shape);
                for g in &grads {
                    dx.add_assign(g);
                }
                Ok(dx)
            }
            (
                Routing::Hard(gate),
                GroupCache::Hard {
                    gate: gc,
                    samples,
                    caches,
                    outputs,
                },
            ) => {
                let n_sel = gate.n_select as f64;
                let batch = in_shape[0];
                let per: usize = grad.shape[1..].iter().product();
                let mut dx = Tensor::zeros(in_shape);
                let mut grad_mask = vec![0.0; batch * k];
                for (i, ((base, idx), (c, y))) in self
                    .bases
                    .iter_mut()
                    .zip(&samples)
                    .zip(caches.into_iter().zip(outputs))
                    .enumerate()
                {
                    if idx.is_empty() {
                        continue;
                    }
                    let y = y.ok_or(Error::MissingTape)?;
                    let g = grad.gather_rows(idx).scaled(1.0 / n_sel);
                    // d loss / d mask_i = <d loss / d out, H_i(x)> / N
                    for (r, &b) in idx.iter().enumerate() {
                        grad_mask[b * k + i] = y.data[r * per..][..per]
                            .iter()
                            .zip(&grad.data[b * per..][..per])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n_sel;
                    }
                    let gx = base.backward(c, &g)?;
                    dx.scatter_add_rows(idx, &gx, 1.0);
                }
                let gg = hard_gate_backward(gate, Some(&gc), &grad_mask)?;
                dx.add_assign(&gg.input);
                Ok(dx)
            }
            _ => Err(Error::MissingTape),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classify(Linear),
    Segment { conv: Conv2d, bias: Param, upsample: usize },
}

#[derive(Clone, Debug)]
enum HeadCache {
    Classify { feat_shape: Vec<usize>, fc: LinearCache },
    Segment { conv: ConvCache, low_shape: Vec<usize> },
}

#[derive(Clone, Debug)]
struct ModelCache {
    stem: (ConvCache, BnCache),
    groups: Vec<(Vec<usize>, GroupCache)>,
    head: HeadCache,
}

/// Recorded forward pass; empty for inference-mode forwards.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    cache: Option<Box<ModelCache>>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.cache.is_some()
    }
}

/// Trace entry for one weight layer, used by the complexity counters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub role: ConvRole,
    pub precision: Precision,
    /// `O, I, Kh, Kw`; fully-connected layers appear as `O, I, 1, 1`.
    pub shape: [usize; 4],
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub group: Option<usize>,
    /// Base index within the group (0 outside groups).
    pub base: usize,
    /// Parallel branch index within a unit (0 unless layer-wise).
    pub branch: usize,
    /// Fraction of samples that evaluate this layer, as `(num, den)`.
    pub active: (usize, usize),
}

impl LayerTrace {
    /// Multiply-accumulates per sample when active.
    pub fn macs(&self) -> u64 {
        let [o, i, kh, kw] = self.shape;
        (o * i * kh * kw * self.out_hw.0 * self.out_hw.1) as u64
    }

    pub fn weights(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }

    pub fn out_elems(&self) -> u64 {
        (self.shape[0] * self.out_hw.0 * self.out_hw.1) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub groups: Vec<Group>,
    pub head: Head,
    stage: Stage,
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn body_quant(&self, zero_one: bool) -> (ActQuant, WeightQuant) {
        if !self.spec.binary {
            return (ActQuant::Identity, WeightQuant::Real);
        }
        let act = if zero_one { ActQuant::ZeroOne } else { ActQuant::Sign };
        (act, WeightQuant::Sign { clip: self.spec.ste_clip })
    }

    fn edge_quant(&self, keep_int8: bool) -> (ActQuant, WeightQuant) {
        match (self.spec.binary, keep_int8) {
            (false, _) => (ActQuant::Identity, WeightQuant::Real),
            (true, true) => (ActQuant::Int8, WeightQuant::Int8),
            (true, false) => self.body_quant(false),
        }
    }

    fn conv(&mut self, name: &str, shape: [usize; 4], geom: ConvGeometry, q: (ActQuant, WeightQuant)) -> Conv2d {
        let mut c = Conv2d::new(name, &mut self.rng, shape, geom, q.0, q.1);
        c.use_alpha = self.spec.use_alpha;
        c
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(&mut self, name: &str, cin: usize, cout: usize, stride: usize, group: usize, rates: &[usize]) -> Unit {
        let pad = self.spec.pad_mode;
        let mode = self.spec.act_mode(group);
        let convs = rates
            .iter()
            .enumerate()
            .map(|(j, &r)| {
                let q = self.body_quant(mode.zero_one_at(r));
                self.conv(&format!("{name}.conv{j}"), [cout, cin, 3, 3], geometry(stride, r, r, pad), q)
            })
            .collect();
        let down = (stride != 1 || cin != cout).then(|| {
            let q = self.edge_quant(self.spec.group.precision.downsample);
            Downsample {
                pool: stride != 1,
                conv: self.conv(&format!("{name}.down.conv"), [cout, cin, 1, 1], geometry(1, 0, 1, pad), q),
                bn: BatchNorm2d::new(&format!("{name}.down.bn"), cout),
            }
        });
        Unit {
            convs,
            prelu: PRelu::new(&format!("{name}.prelu"), cout),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            down,
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut bld = Builder {
            spec: &spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        };
        let bb = &spec.backbone;
        let gs = &spec.group;
        let stem = bld.conv(
            "stem.conv",
            [bb.stem_channels, bb.in_channels, 3, 3],
            geometry(bb.stem_stride, 1, 1, spec.pad_mode),
            bld.edge_quant(gs.precision.first),
        );
        let stem_bn = BatchNorm2d::new("stem.bn", bb.stem_channels);
        let plan = bb.block_plan();
        let mut cin = bb.stem_channels;
        let mut groups = Vec::new();
        let lbd = gs.decomposition == Decomposition::Lbd;
        let bases = if lbd { 1 } else { gs.bases };
        for (p, range) in gs.groups().enumerate() {
            let group_in = cin;
            let mut base_list = Vec::with_capacity(bases);
            for k in 0..bases {
                let rates: Vec<usize> = if lbd {
                    (0..gs.bases).map(|j| spec.rate(p, j)).collect()
                } else {
                    vec![spec.rate(p, k)]
                };
                let mut c = group_in;
                let mut blocks = Vec::new();
                for n in range.clone() {
                    let (cout, stride) = plan[n];
                    let units = (0..bb.units_per_block)
                        .map(|u| {
                            let (ci, s) = if u == 0 { (c, stride) } else { (cout, 1) };
                            bld.unit(&format!("g{p}.k{k}.b{n}.u{u}"), ci, cout, s, p, &rates)
                        })
                        .collect();
                    blocks.push(Block { units });
                    c = cout;
                }
                base_list.push(Base { blocks });
                cin = c;
            }
            let routing = match gs.gating {
                _ if lbd => Routing::Plain,
                Gating::None => Routing::Plain,
                Gating::Soft => Routing::Soft {
                    gates: (1..range.len()).map(|n| SoftGate::new(&format!("g{p}.gate{n}"), bases)).collect(),
                    mode: gs.second_path,
                },
                Gating::Hard { n_select } => {
                    Routing::Hard(HardGate::new(&format!("g{p}.gate"), group_in, bases, n_select, &mut bld.rng)?)
                }
            };
            groups.push(Group { bases: base_list, routing });
        }
        let head = match bb.head {
            HeadSpec::Classify { classes } => {
                let int8 = spec.binary && gs.precision.last;
                Head::Classify(Linear::new("head.fc", &mut bld.rng, cin, classes, int8))
            }
            HeadSpec::Segment { classes, upsample } => Head::Segment {
                conv: bld.conv(
                    "head.conv",
                    [classes, cin, 1, 1],
                    geometry(1, 0, 1, spec.pad_mode),
                    bld.edge_quant(gs.precision.last),
                ),
                bias: Param::new("head.bias", Tensor::zeros(&[classes]), false),
                upsample,
            },
        };
        let mut model = Model {
            spec,
            stem,
            stem_bn,
            groups,
            head,
            stage: Stage::Two,
        };
        model.set_stage(Stage::Two);
        Ok(model)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Switches binary layers between real-valued (stage one) and binary
    /// (stage two) weights. Activations stay binary in both.
    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        if !self.spec.binary {
            return;
        }
        let wq = match stage {
            Stage::One => WeightQuant::Real,
            Stage::Two => WeightQuant::Sign { clip: self.spec.ste_clip },
        };
        for c in self.convs_mut() {
            if matches!(c.act, ActQuant::Sign | ActQuant::ZeroOne) {
                c.wq = wq;
            }
        }
    }

    /// Forward pass; [`Mode::Train`] records a tape and updates BN statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let (_, c, h, w) = x.dims4()?;
        let bb = &self.spec.backbone;
        if c != bb.in_channels || (h, w) != bb.input_hw {
            return Err(Error::shape(
                "model input (layer 0)",
                &[bb.in_channels, bb.input_hw.0, bb.input_hw.1],
                &[c, h, w],
            ));
        }
        let (z, sc) = self.stem.forward(x, mode)?;
        let (mut h, sb) = self.stem_bn.forward(&z, mode)?;
        let mut gcs = Vec::with_capacity(self.groups.len());
        for g in &mut self.groups {
            let in_shape = h.shape.clone();
            let (y, c) = g.forward(&h, mode)?;
            h = y;
            gcs.push(c.map(|c| (in_shape, c)));
        }
        let (out, hc) = match &mut self.head {
            Head::Classify(fc) => {
                let feat = ops::global_avg_pool(&h)?;
                let (y, c) = fc.forward(&feat, mode)?;
                (y, c.map(|fc| HeadCache::Classify { feat_shape: h.shape.clone(), fc }))
            }
            Head::Segment { conv, bias, upsample } => {
                let (mut z, c) = conv.forward(&h, mode)?;
                let hw = z.shape[2] * z.shape[3];
                let k = z.shape[1];
                for (i, chunk) in z.data.chunks_mut(hw).enumerate() {
                    let b = bias.data()[i % k];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
                let low_shape = z.shape.clone();
                let y = ops::upsample_bilinear(&z, *upsample)?;
                (y, c.map(|conv| HeadCache::Segment { conv, low_shape }))
            }
        };
        out.check_finite("model output")?;
        let cache = match (mode, sc, sb, hc) {
            (Mode::Train, Some(sc), Some(sb), Some(hc)) => Some(Box::new(ModelCache {
                stem: (sc, sb),
                groups: gcs.into_iter().collect::<Option<Vec<_>>>().ok_or(Error::MissingTape)?,
                head: hc,
            })),
            _ => None,
        };
        Ok((out, Tape { cache }))
    }

    /// Accumulates parameter gradients for `grad` = d loss / d output.
    pub fn backward(&mut self, tape: Tape, grad: &Tensor) -> Result<()> {
        let cache = tape.cache.ok_or(Error::MissingTape)?;
        let mut g = match (&mut self.head, cache.head) {
            (Head::Classify(fc), HeadCache::Classify { feat_shape, fc: c }) => {
                let gf = fc.backward(c, grad);
                ops::global_avg_pool_backward(&feat_shape, &gf)
            }
            (Head::Segment { conv, bias, .. }, HeadCache::Segment { conv: c, low_shape }) => {
                let gz = ops::upsample_bilinear_backward(&low_shape, grad);
                let k = low_shape[1];
                let hw = low_shape[2] * low_shape[3];
                let mut gb = vec![0.0; k];
                for (i, chunk) in gz.data.chunks(hw).enumerate() {
                    gb[i % k] += chunk.iter().sum::<f64>();
                }
                bias.accumulate(&gb);
                conv.backward(c, &gz, true)?.ok_or(Error::MissingTape)?
            }
            _ => return Err(Error::MissingTape),
        };
        for (group, (in_shape, c)) in self.groups.iter_mut().zip(cache.groups).rev() {
            g = group.backward(c, &g, &in_shape)?;
        }
        let (sc, sb) = cache.stem;
        let g = self.stem_bn.backward(sb, &g)?;
        self.stem.backward(sc, &g, false)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.push(&mut self.stem.weight);
        out.push(&mut self.stem_bn.gamma);
        out.push(&mut self.stem_bn.beta);
        for g in &mut self.groups {
            for b in &mut g.bases {
                for blk in &mut b.blocks {
                    for u in &mut blk.units {
                        for c in &mut u.convs {
                            out.push(&mut c.weight);
                        }
                        out.push(&mut u.prelu.slope);
                        out.push(&mut u.bn.gamma);
                        out.push(&mut u.bn.beta);
                        if let Some(d) = &mut u.down {
                            out.push(&mut d.conv.weight);
                            out.push(&mut d.bn.gamma);
                            out.push(&mut d.bn.beta);
                        }
                    }
                }
            }
            match &mut g.routing {
                Routing::Plain => {}
                Routing::Soft { gates, .. } => out.extend(gates.iter_mut().map(|s| &mut s.theta)),
                Routing::Hard(h) => out.push(&mut h.nu),
            }
        }
        match &mut self.head {
            Head::Classify(fc) => {
                out.push(&mut fc.weight);
                out.push(&mut fc.bias);
            }
            Head::Segment { conv, bias, .. } => {
                out.push(&mut conv.weight);
                out.push(bias);
            }
        }
        out
    }

    /// Read-only view of [`Model::params_mut`], same order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        out.push(&self.stem.weight);
        out.push(&self.stem_bn.gamma);
        out.push(&self.stem_bn.beta);
        for g in &self.groups {
            for b in &g.bases {
                for blk in &b.blocks {
                    for u in &blk.units {
                        for c in &u.convs {
                            out.push(&c.weight);
                        }
                        out.push(&u.prelu.slope);
                        out.push(&u.bn.gamma);
                        out.push(&u.bn.beta);
                        if let Some(d) = &u.down {
                            out.push(&d.conv.weight);
                            out.push(&d.bn.gamma);
                            out.push(&d.bn.beta);
                        }
                    }
                }
            }
            match &g.routing {
                Routing::Plain => {}
                Routing::Soft { gates, .. } => out.extend(gates.iter().map(|s| &s.theta)),
                Routing::Hard(h) => out.push(&h.nu),
            }
        }
        match &self.head {
            Head::Classify(fc) => {
                out.push(&fc.weight);
                out.push(&fc.bias);
            }
            Head::Segment { conv, bias, .. } => {
                out.push(&conv.weight);
                out.push(bias);
            }
        }
        out
    }

    /// Every batch-norm layer in a fixed order.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.stem_bn];
        for g in &mut self.groups {
            for b in &mut g.bases {
                for blk in &mut b.blocks {
                    for u in &mut blk.units {
                        out.push(&mut u.bn);
                        if let Some(d) = &mut u.down {
                            out.push(&mut d.bn);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut out = vec![&self.stem_bn];
        for g in &self.groups {
            for b in &g.bases {
                for blk in &b.blocks {
                    for u in &blk.units {
                        out.push(&u.bn);
                        if let Some(d) = &u.down {
                            out.push(&d.bn);
                        }
                    }
                }
            }
        }
        out
    }

    /// Every convolution in a fixed order.
    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = vec![&mut self.stem];
        for g in &mut self.groups {
            for b in &mut g.bases {
                for blk in &mut b.blocks {
                    for u in &mut blk.units {
                        out.extend(u.convs.iter_mut());
                        if let Some(d) = &mut u.down {
                            out.push(&mut d.conv);
                        }
                    }
                }
            }
        }
        if let Head::Segment { conv, .. } = &mut self.head {
            out.push(conv);
        }
        out
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut out = vec![&self.stem];
        for g in &self.groups {
            for b in &g.bases {
                for blk in &b.blocks {
                    for u in &blk.units {
                        out.extend(u.convs.iter());
                        if let Some(d) = &u.down {
                            out.push(&d.conv);
                        }
                    }
                }
            }
        }
        if let Head::Segment { conv, .. } = &self.head {
            out.push(conv);
        }
        out
    }

    /// Totals of `(packed, dense)` forward calls over all convolutions.
    pub fn kernel_calls(&self) -> (u64, u64) {
        self.convs()
            .iter()
            .fold((0, 0), |(p, d), c| (p + c.packed_calls, d + c.dense_calls))
    }

    pub fn reset_kernel_calls(&mut self) {
        for c in self.convs_mut() {
            c.packed_calls = 0;
            c.dense_calls = 0;
        }
    }

    /// Rounds every parameter and running statistic to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.value.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for bn in self.batch_norms_mut() {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    fn precision_of(&self, role: ConvRole) -> Precision {
        let pe = &self.spec.group.precision;
        let keep = match role {
            ConvRole::Stem => pe.first,
            ConvRole::Head => pe.last,
            ConvRole::Downsample => pe.downsample,
            ConvRole::Body => false,
        };
        match (self.spec.binary, keep) {
            (false, _) => Precision::Float,
            (true, true) => Precision::Int8,
            (true, false) => Precision::Binary,
        }
    }

    /// Per-layer shapes and precisions for one input sample.
    pub fn layer_trace(&self) -> Result<Vec<LayerTrace>> {
        let mut out = Vec::new();
        let mut push = |name: &str, role, shape: [usize; 4], geom: &ConvGeometry, in_hw, group, (base, branch), active| -> Result<(usize, usize)> {
            let out_hw = geom.output_hw(in_hw, (shape[2], shape[3]))?;
            out.push(LayerTrace {
                name: name.to_string(),
                role,
                precision: self.precision_of(role),
                shape,
                in_hw,
                out_hw,
                group,
                base,
                branch,
                active,
            });
            Ok(out_hw)
        };
        let mut hw = push(
            self.stem.name(),
            ConvRole::Stem,
            self.stem.shape(),
            &self.stem.geom,
            self.spec.backbone.input_hw,
            None,
            (0, 0),
            (1, 1),
        )?;
        for (p, g) in self.groups.iter().enumerate() {
            let active = match &g.routing {
                Routing::Hard(h) => (h.n_select, g.bases.len()),
                _ => (1, 1),
            };
            let group_in = hw;
            for (k, b) in g.bases.iter().enumerate() {
                let mut h = group_in;
                for blk in &b.blocks {
                    for u in &blk.units {
                        let mut out_hw = h;
                        for (j, c) in u.convs.iter().enumerate() {
                            out_hw = push(c.name(), ConvRole::Body, c.shape(), &c.geom, h, Some(p), (k, j), active)?;
                        }
                        if let Some(d) = &u.down {
                            let pin = if d.pool { (h.0 / 2, h.1 / 2) } else { h };
                            let c = &d.conv;
                            push(c.name(), ConvRole::Downsample, c.shape(), &c.geom, pin, Some(p), (k, 0), active)?;
                        }
                        h = out_hw;
                    }
                }
                hw = h;
            }
        }
        match &self.head {
            Head::Classify(fc) => {
                push(
                    fc.name(),
                    ConvRole::Head,
                    [fc.out_features(), fc.in_features(), 1, 1],
                    &ConvGeometry::default(),
                    (1, 1),
                    None,
                    (0, 0),
                    (1, 1),
                )?;
            }
            Head::Segment { conv, .. } => {
                push(conv.name(), ConvRole::Head, conv.shape(), &conv.geom, hw, None, (0, 0), (1, 1))?;
            }
        }
        Ok(out)
    }

    /// Names of the layers kept at 8 bits.
    pub fn precision_exceptions(&self) -> Result<Vec<String>> {
        Ok(self
            .layer_trace()?
            .into_iter()
            .filter(|t| t.precision == Precision::Int8)
            .map(|t| t.name)
            .collect())
    }
}
