//! Single-layer kernel timings on fixed layer shapes, plus the inference
//! memory model.
//!
//! Every kernel is checked against a dense integer oracle on a cropped copy
//! of its case before it is timed. Weight packing happens once, outside the
//! timed region; activation packing is timed because it runs at inference.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use groupnet_core::bitcore::{
    binary_conv2d, im2col, pack_filters, packed_gemm, speedup_ratio, BitTensor, ConvGeometry, LayerDims,
    PadValue,
};
use groupnet_core::groupnet::{Model, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] groupnet_core::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("kernel {kernel} disagrees with the dense oracle on case {case} (first mismatch at {index})")]
    Inexact { case: usize, kernel: KernelKind, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> BenchError {
    BenchError::Invalid(msg.into())
}

const KERNEL: usize = 3;
/// Spatial extent of the crop used for the exactness pre-check.
const CHECK_SPATIAL: usize = 12;
pub const MIN_REPEATS: usize = 5;

/// A 3x3, stride 1, pad 1 layer at batch 1 with equal input and output shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    /// 1-11 for the standard cases, 0 for ad-hoc shapes.
    pub id: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl BenchCase {
    /// Cases 1-5 grow the feature map at 64 channels, 6-11 grow the channels at 56x56.
    pub fn new(id: usize) -> Result<Self> {
        let (channels, spatial) = match id {
            1..=5 => (64, 28 << (id - 1)),
            6..=11 => (16 << (id - 6), 56),
            _ => return Err(invalid(format!("case id must be 1-11, got {id}"))),
        };
        Ok(BenchCase { id, channels, spatial })
    }

    pub fn all() -> Vec<Self> {
        (1..=11).map(|i| Self::new(i).unwrap()).collect()
    }

    pub fn custom(channels: usize, spatial: usize) -> Result<Self> {
        let c = BenchCase { id: 0, channels, spatial };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.spatial == 0 {
            return Err(invalid(format!(
                "zero-size layer: {} channels at {}x{}",
                self.channels, self.spatial, self.spatial
            )));
        }
        Ok(())
    }

    /// Padded taps are skipped, which matches the zero padding of the float kernel.
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(1, 1, 1).with_pad_value(PadValue::ZeroSkip)
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::square(self.channels, KERNEL, self.spatial)
    }

    /// Activation elements of one input (= one output).
    pub fn volume(&self) -> usize {
        self.channels * self.spatial * self.spatial
    }

    fn input_shape(&self) -> [usize; 4] {
        [1, self.channels, self.spatial, self.spatial]
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.channels, self.channels, KERNEL, KERNEL]
    }

    fn cropped(&self) -> Self {
        BenchCase {
            spatial: self.spatial.min(CHECK_SPATIAL),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Binary,
    /// `K` parallel binary convolutions fused by high-precision adds.
    Group(usize),
    /// `P`-bit weights and activations as `P^2` binary convolutions.
    Fixed(usize),
    Float,
}

impl KernelKind {
    fn validate(self) -> Result<()> {
        match self {
            KernelKind::Group(0) => Err(invalid("group kernel needs K >= 1")),
            KernelKind::Fixed(p) if !(1..=8).contains(&p) => Err(invalid(format!("fixed kernel needs 1 <= P <= 8, got {p}"))),
            _ => Ok(()),
        }
    }

    /// Analytic speedup over the float kernel for `case`; 1 for float itself.
    pub fn analytic_sigma(self, case: &BenchCase) -> Result<f64> {
        let bases = match self {
            KernelKind::Float => return Ok(1.0),
            KernelKind::Binary => 1,
            KernelKind::Group(k) => k,
            KernelKind::Fixed(p) => p * p,
        };
        Ok(speedup_ratio(&case.dims(), bases)?)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Binary => write!(f, "binary"),
            KernelKind::Group(k) => write!(f, "group:{k}"),
            KernelKind::Fixed(p) => write!(f, "fixed:{p}"),
            KernelKind::Float => write!(f, "float"),
        }
    }
}

impl FromStr for KernelKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| invalid(format!("bad kernel parameter in {s:?}")));
        let kind = match s.split_once(':') {
            None if s == "binary" => KernelKind::Binary,
            None if s == "float" => KernelKind::Float,
            Some(("group", k)) => KernelKind::Group(num(k)?),
            Some(("fixed", p)) => KernelKind::Fixed(num(p)?),
            _ => return Err(invalid(format!("unknown kernel {s:?} (binary|group:K|fixed:P|float)"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub mean_us: f64,
    pub std_us: f64,
    pub samples_us: Vec<f64>,
}

impl Timing {
    fn from_samples(samples_us: Vec<f64>) -> Self {
        let n = samples_us.len() as f64;
        let mean_us = samples_us.iter().sum::<f64>() / n;
        let var = samples_us.iter().map(|s| (s - mean_us).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Timing {
            mean_us,
            std_us: var.sqrt(),
            samples_us,
        }
    }

    pub fn relative_std(&self) -> f64 {
        self.std_us / self.mean_us
    }
}

fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> T) -> Result<Timing> {
    if repeats < MIN_REPEATS {
        return Err(invalid(format!("at least {MIN_REPEATS} repeats are needed, got {repeats}")));
    }
    // warmup: caches, page faults, frequency ramp
    black_box(f());
    black_box(f());
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        black_box(f());
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(Timing::from_samples(samples))
}

/// CPU model and thread counts, attached to every report row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Machine {
    pub cpu: String,
    pub threads: usize,
    /// Threads used inside one kernel call. The kernels are single-threaded.
    pub kernel_threads: usize,
}

impl Machine {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        Machine {
            cpu,
            threads,
            kernel_threads: 1,
        }
    }
}

impl fmt::Display for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} threads, kernel {})", self.cpu, self.threads, self.kernel_threads)
    }
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Inputs and offline-packed weights for one kernel on one case.
struct Prepared {
    case: BenchCase,
    kind: KernelKind,
    /// Real activations: one per base (binary, group) or one per bit-plane (fixed).
    inputs: Vec<Vec<f64>>,
    /// Sign-valued filters matching `inputs`; fixed uses all `P` weight planes.
    weights: Vec<Vec<f64>>,
    packed: Vec<BitTensor>,
    float_input: Vec<f32>,
    float_weight: Vec<f32>,
}

enum Output {
    Int(Vec<i64>),
    Float(Vec<f32>),
}

impl Prepared {
    fn new(case: BenchCase, kind: KernelKind, seed: u64) -> Result<Self> {
        case.validate()?;
        kind.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case.channels as u64) << 20 ^ case.spatial as u64);
        let wn = case.weight_shape().iter().product();
        let planes = match kind {
            KernelKind::Binary | KernelKind::Float => 1,
            KernelKind::Group(k) => k,
            KernelKind::Fixed(p) => p,
        };
        let inputs: Vec<Vec<f64>> = (0..planes)
            .map(|_| (0..case.volume()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let weights: Vec<Vec<f64>> = (0..planes).map(|_| signs(&mut rng, wn)).collect();
        let packed = if kind == KernelKind::Float {
            Vec::new()
        } else {
            weights
                .iter()
                .map(|w| pack_filters(w, case.weight_shape()))
                .collect::<groupnet_core::Result<_>>()?
        };
        let (float_input, float_weight) = if kind == KernelKind::Float {
            let wf: Vec<f32> = (0..wn).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            (inputs[0].iter().map(|&v| v as f32).collect(), wf)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Prepared {
            case,
            kind,
            inputs,
            weights,
            packed,
            float_input,
            float_weight,
        })
    }

    fn run(&self) -> Result<Output> {
        let geom = self.case.geometry();
        let shape = self.case.input_shape();
        match self.kind {
            KernelKind::Binary => {
                let x = BitTensor::pack_signs(&self.inputs[0], &shape, 1)?;
                let y = binary_conv2d(&x, &self.packed[0], &geom)?;
                Ok(Output::Int(y.data.iter().map(|&v| i64::from(v)).collect()))
            }
            KernelKind::Group(_) => {
                let mut acc = vec![0f32; self.case.volume()];
                for (input, filters) in self.inputs.iter().zip(&self.packed) {
                    let x = BitTensor::pack_signs(input, &shape, 1)?;
                    let y = binary_conv2d(&x, filters, &geom)?;
                    high_precision_add(&mut acc, &y.data, 1.0);
                }
                Ok(Output::Float(acc))
            }
            KernelKind::Fixed(_) => {
                let cols = self
                    .inputs
                    .iter()
                    .map(|a| {
                        let x = BitTensor::pack_signs(a, &shape, 1)?;
                        im2col(&x, (KERNEL, KERNEL), &geom)
                    })
                    .collect::<groupnet_core::Result<Vec<_>>>()?;
                let mut acc = vec![0i64; self.case.volume()];
                for (i, w) in self.packed.iter().enumerate() {
                    for (j, c) in cols.iter().enumerate() {
                        let y = packed_gemm(c, w)?;
                        let scale = 1i64 << (i + j);
                        for (a, &v) in acc.iter_mut().zip(&y.data) {
                            *a += scale * i64::from(v);
                        }
                    }
                }
                Ok(Output::Int(acc))
            }
            KernelKind::Float => Ok(Output::Float(float_conv3x3(
                &self.float_input,
                &self.float_weight,
                self.case.channels,
                self.case.spatial,
            ))),
        }
    }

    /// Compares one run against the dense oracle of the decoded operands.
    fn check(&self) -> Result<()> {
        let (c, s) = (self.case.channels, self.case.spatial);
        let sgn = |v: &[f64]| -> Vec<i64> { v.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect() };
        let mismatch = |index| BenchError::Inexact {
            case: self.case.id,
            kernel: self.kind,
            index,
        };
        match (self.kind, self.run()?) {
            (KernelKind::Binary | KernelKind::Group(_), out) => {
                let mut want = vec![0i64; self.case.volume()];
                for (x, w) in self.inputs.iter().zip(&self.weights) {
                    for (a, v) in want.iter_mut().zip(dense_oracle(&sgn(x), &sgn(w), c, s)) {
                        *a += v;
                    }
                }
                let got: Vec<i64> = match out {
                    Output::Int(v) => v,
                    Output::Float(v) => v.iter().map(|&f| f as i64).collect(),
                };
                first_diff(&got, &want).map_or(Ok(()), |i| Err(mismatch(i)))
            }
            (KernelKind::Fixed(p), Output::Int(got)) => {
                // decode the planes into odd integers, then multiply once
                let decode = |planes: &[Vec<f64>]| -> Vec<i64> {
                    let mut v = vec![0i64; planes[0].len()];
                    for (i, pl) in planes.iter().enumerate() {
                        for (a, b) in v.iter_mut().zip(sgn(pl)) {
                            *a += b << i;
                        }
                    }
                    v
                };
                let want = dense_oracle(&decode(&self.inputs[..p]), &decode(&self.weights[..p]), c, s);
                first_diff(&got, &want).map_or(Ok(()), |i| Err(mismatch(i)))
            }
            (KernelKind::Float, Output::Float(got)) => {
                let x: Vec<f64> = self.float_input.iter().map(|&v| f64::from(v)).collect();
                let w: Vec<f64> = self.float_weight.iter().map(|&v| f64::from(v)).collect();
                let want = dense_oracle_f64(&x, &w, c, s);
                match got.iter().zip(&want).position(|(g, w)| (f64::from(*g) - w).abs() > 1e-3 * (1.0 + w.abs())) {
                    Some(i) => Err(mismatch(i)),
                    None => Ok(()),
                }
            }
            _ => unreachable!("kernel output type is fixed by kind"),
        }
    }
}

fn first_diff(a: &[i64], b: &[i64]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| x != y)
}

/// `acc += scale * y`: the full-precision fusion of one binary branch.
pub fn high_precision_add(acc: &mut [f32], y: &[i32], scale: f32) {
    for (a, &v) in acc.iter_mut().zip(y) {
        *a += scale * v as f32;
    }
}

fn dense_oracle(x: &[i64], w: &[i64], c: usize, s: usize) -> Vec<i64> {
    let mut out = vec![0i64; c * s * s];
    for o in 0..c {
        for y in 0..s {
            for xx in 0..s {
                let mut acc = 0;
                for i in 0..c {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let (iy, ix) = ((y + ky) as isize - 1, (xx + kx) as isize - 1);
                            if iy < 0 || ix < 0 || iy >= s as isize || ix >= s as isize {
                                continue;
                            }
                            acc += w[((o * c + i) * KERNEL + ky) * KERNEL + kx] * x[(i * s + iy as usize) * s + ix as usize];
                        }
                    }
                }
                out[(o * s + y) * s + xx] = acc;
            }
        }
    }
    out
}

fn dense_oracle_f64(x: &[f64], w: &[f64], c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * s * s];
    for o in 0..c {
        for y in 0..s {
            for xx in 0..s {
                let mut acc = 0.0;
                for i in 0..c {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let (iy, ix) = ((y + ky) as isize - 1, (xx + kx) as isize - 1);
                            if iy >= 0 && ix >= 0 && iy < s as isize && ix < s as isize {
                                acc += w[((o * c + i) * KERNEL + ky) * KERNEL + kx] * x[(i * s + iy as usize) * s + ix as usize];
                            }
                        }
                    }
                }
                out[(o * s + y) * s + xx] = acc;
            }
        }
    }
    out
}

/// Scalar float reference: a direct 3x3 convolution (pad 1, stride 1) in
/// f32, blocked over output channels so one input plane is reused from
/// cache by several filters. No SIMD intrinsics, no GEMM library.
pub fn float_conv3x3(input: &[f32], weight: &[f32], channels: usize, spatial: usize) -> Vec<f32> {
    const OC_BLOCK: usize = 8;
    let (c, s) = (channels, spatial);
    let plane = s * s;
    let mut out = vec![0f32; c * plane];
    for ob in (0..c).step_by(OC_BLOCK) {
        let oe = (ob + OC_BLOCK).min(c);
        for i in 0..c {
            let src = &input[i * plane..][..plane];
            for o in ob..oe {
                let dst = &mut out[o * plane..][..plane];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = weight[((o * c + i) * KERNEL + ky) * KERNEL + kx];
                        for y in 0..s {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= s as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * s..][..s];
                            let drow = &mut dst[y * s..][..s];
                            // output x reads input x + kx - 1
                            let (x0, x1) = (1usize.saturating_sub(kx), (s + 1 - kx).min(s));
                            for x in x0..x1 {
                                drow[x] += wv * srow[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Verifies `kind` against the dense oracle on a cropped copy of `case`.
pub fn check_exact(case: &BenchCase, kind: KernelKind) -> Result<()> {
    Prepared::new(case.cropped(), kind, 0xC0FFEE)?.check()
}

/// Times `kind` on `case` after an exactness check. Reported times include
/// activation packing and exclude weight packing.
pub fn run_case(case: &BenchCase, kind: KernelKind, repeats: usize) -> Result<Timing> {
    check_exact(case, kind)?;
    let p = Prepared::new(*case, kind, 1)?;
    let mut failed = None;
    let t = time_repeats(repeats, || {
        if let Err(e) = p.run() {
            failed = Some(e);
        }
    })?;
    match failed {
        Some(e) => Err(e),
        None => Ok(t),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdditionSplit {
    /// One binary convolution, activation packing included.
    pub bconv: Timing,
    /// One high-precision fusion add over the layer output.
    pub hadd: Timing,
}

/// Times the binary convolution and the branch-fusion addition separately.
pub fn binary_vs_addition_split(case: &BenchCase, repeats: usize) -> Result<AdditionSplit> {
    check_exact(case, KernelKind::Binary)?;
    let p = Prepared::new(*case, KernelKind::Binary, 2)?;
    let bconv = time_repeats(repeats, || p.run().map(|_| ()))?;
    let x = BitTensor::pack_signs(&p.inputs[0], &case.input_shape(), 1)?;
    let y = binary_conv2d(&x, &p.packed[0], &case.geometry())?;
    let mut acc = vec![0f32; case.volume()];
    let hadd = time_repeats(repeats, || high_precision_add(&mut acc, &y.data, 0.5))?;
    Ok(AdditionSplit { bconv, hadd })
}

/// Inference memory in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryModel {
    /// Packed binary weights at one bit each plus 8-bit and float layers.
    pub weight_bytes: u64,
    /// The largest single im2col buffer over all layers. Branches and
    /// bases run one after another and reuse it, so it does not grow with K.
    pub activation_bytes: u64,
    /// Float32 weights of the same topology with one base.
    pub float_baseline_bytes: u64,
}

pub fn memory_model(model: &Model) -> Result<MemoryModel> {
    let mut m = MemoryModel {
        weight_bytes: 0,
        activation_bytes: 0,
        float_baseline_bytes: 0,
    };
    for t in model.layer_trace()? {
        let [_, cin, kh, kw] = t.shape;
        let rows = (t.out_hw.0 * t.out_hw.1) as u64;
        let taps = (kh * kw) as u64;
        let (weight, im2col) = match t.precision {
            Precision::Binary => (t.weights().div_ceil(8), rows * taps * cin.div_ceil(64) as u64 * 8),
            Precision::Int8 => (t.weights(), rows * taps * cin as u64),
            Precision::Float => (t.weights() * 4, rows * taps * cin as u64 * 4),
        };
        m.weight_bytes += weight;
        m.activation_bytes = m.activation_bytes.max(im2col);
        if t.base == 0 && t.branch == 0 {
            m.float_baseline_bytes += t.weights() * 4;
        }
    }
    Ok(m)
}

/// One CSV row of a benchmark report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub case_id: usize,
    pub kernel: KernelKind,
    pub timing: Timing,
    pub analytic_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub machine: Machine,
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "case_id,kernel,mean_us,std_us,analytic_sigma,machine";

impl Report {
    pub fn new(machine: Machine) -> Self {
        Report { machine, rows: Vec::new() }
    }

    pub fn push(&mut self, case: &BenchCase, kernel: KernelKind, timing: Timing) -> Result<()> {
        self.rows.push(ReportRow {
            case_id: case.id,
            kernel,
            analytic_sigma: kernel.analytic_sigma(case)?,
            timing,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let machine = self.machine.to_string().replace([',', '"', '\n'], " ");
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.3},{:.3},{:.4},{}\n",
                r.case_id, r.kernel, r.timing.mean_us, r.timing.std_us, r.analytic_sigma, machine
            ));
        }
        s
    }

    /// Rows whose measured speedup over the float row of the same case is
    /// below a tenth of the analytic sigma. The sigma model ignores memory
    /// traffic, so this is a warning, not a failure.
    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.kernel == KernelKind::Float {
                continue;
            }
            let float = self
                .rows
                .iter()
                .find(|f| f.case_id == r.case_id && f.kernel == KernelKind::Float);
            if let Some(f) = float {
                let measured = f.timing.mean_us / r.timing.mean_us;
                if measured < 0.1 * r.analytic_sigma {
                    out.push(format!(
                        "case {} {}: measured speedup {:.2} < 0.1 x analytic {:.2}",
                        r.case_id, r.kernel, measured, r.analytic_sigma
                    ));
                }
            }
        }
        out
    }
}
