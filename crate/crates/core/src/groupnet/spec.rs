use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::bitcore::PadValue;
use crate::{Error, Result};

/// Where the K binary bases live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decomposition {
    /// K parallel binary convs inside every unit, averaged.
    Lbd,
    /// K parallel block-stacks per group, averaged.
    Gbd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    None,
    /// Learned blend between own path and cross-base path between blocks.
    Soft,
    /// Per-sample Top-N base selection per group.
    Hard { n_select: usize },
}

/// How the cross-base path of a soft gate combines base outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SecondPath {
    /// Literal sum over bases.
    #[default]
    Sum,
    /// Mean over bases.
    Avg,
}

impl FromStr for SecondPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(SecondPath::Sum),
            "avg" => Ok(SecondPath::Avg),
            _ => Err(Error::invalid(format!("second path mode must be sum|avg, got {s:?}"))),
        }
    }
}

/// Layers kept at 8 bits instead of 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrecisionExceptions {
    pub first: bool,
    pub last: bool,
    pub downsample: bool,
}

impl Default for PrecisionExceptions {
    fn default() -> Self {
        PrecisionExceptions {
            first: true,
            last: true,
            downsample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub num_blocks: usize,
    /// Group boundaries `0 = T_0 < T_1 < ... < T_P = num_blocks`.
    pub partition: Vec<usize>,
    pub bases: usize,
    pub decomposition: Decomposition,
    pub gating: Gating,
    pub second_path: SecondPath,
    pub precision: PrecisionExceptions,
}

impl GroupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bases == 0 {
            return Err(Error::invalid("number of bases must be at least 1"));
        }
        let p = &self.partition;
        if p.len() < 2 || p[0] != 0 || *p.last().unwrap() != self.num_blocks {
            return Err(Error::invalid(format!(
                "partition {p:?} must run from 0 to {}",
                self.num_blocks
            )));
        }
        if p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("partition {p:?} must be strictly increasing")));
        }
        if let Gating::Hard { n_select } = self.gating {
            if n_select == 0 || n_select > self.bases {
                return Err(Error::invalid(format!(
                    "n_select {n_select} must be in 1..={}",
                    self.bases
                )));
            }
            if self.decomposition == Decomposition::Lbd {
                return Err(Error::invalid("hard gating selects whole bases and needs GBD"));
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.partition.len() - 1
    }

    /// Block index range of every group.
    pub fn groups(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.partition.windows(2).map(|w| w[0]..w[1])
    }

    /// Bases evaluated per sample in each group.
    pub fn active_bases(&self) -> usize {
        match self.gating {
            Gating::Hard { n_select } => n_select,
            _ => self.bases,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    /// Global average pool and a fully-connected classifier.
    Classify { classes: usize },
    /// 1x1 conv to class scores and bilinear upsampling.
    Segment { classes: usize, upsample: usize },
}

impl HeadSpec {
    pub fn classes(&self) -> usize {
        match *self {
            HeadSpec::Classify { classes } | HeadSpec::Segment { classes, .. } => classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Stride of the first block.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    /// Binary conv units per residual block.
    pub units_per_block: usize,
    pub head: HeadSpec,
}

impl BackboneSpec {
    /// Three-stage ResNet-20-style network for 32x32 images.
    pub fn resnet20(classes: usize) -> Self {
        Self::resnet(16, 3, classes)
    }

    /// ResNet-style CIFAR network with `width, 2*width, 4*width` channels.
    pub fn resnet(width: usize, blocks_per_stage: usize, classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            input_hw: (32, 32),
            stem_channels: width,
            stem_stride: 1,
            stages: [(1, 1), (2, 2), (4, 2)]
                .into_iter()
                .map(|(m, stride)| StageSpec {
                    channels: width * m,
                    blocks: blocks_per_stage,
                    stride,
                })
                .collect(),
            units_per_block: 2,
            head: HeadSpec::Classify { classes },
        }
    }

    /// Small fully-convolutional network with output stride 4.
    pub fn toy_fcn(in_channels: usize, image: usize, width: usize, classes: usize) -> Self {
        BackboneSpec {
            in_channels,
            input_hw: (image, image),
            stem_channels: width / 2,
            stem_stride: 2,
            stages: vec![
                StageSpec { channels: width, blocks: 1, stride: 2 },
                StageSpec { channels: width, blocks: 1, stride: 1 },
                StageSpec { channels: width, blocks: 1, stride: 1 },
            ],
            units_per_block: 2,
            head: HeadSpec::Segment { classes, upsample: 4 },
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// One group per stage.
    pub fn stage_partition(&self) -> Vec<usize> {
        let mut p = vec![0];
        for s in &self.stages {
            p.push(p.last().unwrap() + s.blocks);
        }
        p
    }

    /// `(channels, stride)` of every block in order.
    pub fn block_plan(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .flat_map(|s| (0..s.blocks).map(move |b| (s.channels, if b == 0 { s.stride } else { 1 })))
            .collect()
    }
}

/// Activation encoding for the binary convs of a group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActMode {
    Signed,
    ZeroOne,
    /// `{0,1}` for dilation rates above 4, ±1 otherwise.
    #[default]
    Auto,
}

impl ActMode {
    pub fn zero_one_at(self, rate: usize) -> bool {
        match self {
            ActMode::Signed => false,
            ActMode::ZeroOne => true,
            ActMode::Auto => rate > 4,
        }
    }
}

/// Everything needed to build a model deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub group: GroupSpec,
    /// `false` builds the full-precision reference network.
    pub binary: bool,
    pub pad_mode: PadValue,
    pub use_alpha: bool,
    pub ste_clip: Option<f64>,
    /// Per group, the dilation of each base (GBD) or branch (LBD). Empty
    /// means rate 1 everywhere.
    pub rates: Vec<Vec<usize>>,
    /// Per group; missing entries default to [`ActMode::Auto`].
    pub act_modes: Vec<ActMode>,
    pub seed: u64,
}

impl ModelSpec {
    /// Plain group-wise spec with one group per stage.
    pub fn new(backbone: BackboneSpec, bases: usize) -> Self {
        let group = GroupSpec {
            num_blocks: backbone.num_blocks(),
            partition: backbone.stage_partition(),
            bases,
            decomposition: Decomposition::Gbd,
            gating: Gating::None,
            second_path: SecondPath::Sum,
            precision: PrecisionExceptions::default(),
        };
        ModelSpec {
            backbone,
            group,
            binary: true,
            pad_mode: PadValue::MinusOne,
            use_alpha: false,
            ste_clip: Some(1.0),
            rates: Vec::new(),
            act_modes: Vec::new(),
            seed: 0,
        }
    }

    /// Full-precision network of the same topology with one base.
    pub fn float_baseline(backbone: BackboneSpec) -> Self {
        let mut s = Self::new(backbone, 1);
        s.binary = false;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.group.validate()?;
        if self.group.num_blocks != self.backbone.num_blocks() {
            return Err(Error::invalid(format!(
                "group spec covers {} blocks, backbone has {}",
                self.group.num_blocks,
                self.backbone.num_blocks()
            )));
        }
        if self.backbone.units_per_block == 0 || self.backbone.stages.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage and one unit per block"));
        }
        if !self.rates.is_empty() {
            if self.rates.len() != self.group.num_groups() {
                return Err(Error::invalid(format!(
                    "{} rate sets for {} groups",
                    self.rates.len(),
                    self.group.num_groups()
                )));
            }
            for (p, r) in self.rates.iter().enumerate() {
                if r.len() != self.group.bases || r.contains(&0) {
                    return Err(Error::invalid(format!(
                        "group {p}: rate set {r:?} needs {} positive rates",
                        self.group.bases
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, group: usize, base: usize) -> usize {
        self.rates.get(group).map_or(1, |r| r[base])
    }

    pub fn act_mode(&self, group: usize) -> ActMode {
        self.act_modes.get(group).copied().unwrap_or_default()
    }
}

/// The three published configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Soft gates and a skip around every binary conv.
    A,
    /// A with 8-bit 1x1 downsample skips.
    B,
    /// B with hard Top-N base selection.
    C,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            _ => Err(Error::invalid(format!("unknown variant {s:?} (expected A, B or C)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        };
        f.write_str(s)
    }
}

impl Variant {
    /// `(bases, n_select)` defaults.
    pub fn default_bases(self) -> (usize, usize) {
        match self {
            Variant::A | Variant::B => (4, 4),
            Variant::C => (8, 4),
        }
    }

    /// Model spec for this variant on `backbone` with `bases` bases.
    pub fn spec(self, backbone: BackboneSpec, bases: usize, n_select: usize) -> Result<ModelSpec> {
        let mut s = ModelSpec::new(backbone, bases);
        s.group.precision.downsample = self != Variant::A;
        s.group.gating = match self {
            Variant::A | Variant::B => Gating::Soft,
            Variant::C => Gating::Hard { n_select },
        };
        s.validate()?;
        Ok(s)
    }
}


fn pad_name(p: PadValue) -> &'static str {
    match p {
        PadValue::MinusOne => "minus_one",
        PadValue::PlusOne => "plus_one",
        PadValue::ZeroSkip => "zero",
    }
}

/// Parses a pad mode name as written by [`ModelSpec::to_text`].
pub fn parse_pad_mode(s: &str) -> Result<PadValue> {
    match s {
        "minus_one" | "-1" => Ok(PadValue::MinusOne),
        "plus_one" | "+1" | "1" => Ok(PadValue::PlusOne),
        "zero" | "0" => Ok(PadValue::ZeroSkip),
        _ => Err(Error::invalid(format!("pad mode must be minus_one|plus_one|zero, got {s:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_num(key, t.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelSpec {
    /// Line-oriented `key=value` text; [`ModelSpec::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let g = &self.group;
        let stages: Vec<String> = b
            .stages
            .iter()
            .map(|s| format!("{}x{}s{}", s.channels, s.blocks, s.stride))
            .collect();
        let head = match b.head {
            HeadSpec::Classify { classes } => format!("classify:{classes}"),
            HeadSpec::Segment { classes, upsample } => format!("segment:{classes}:{upsample}"),
        };
        let gating = match g.gating {
            Gating::None => "none".to_string(),
            Gating::Soft => "soft".to_string(),
            Gating::Hard { n_select } => format!("hard:{n_select}"),
        };
        let mut precision = Vec::new();
        for (on, name) in [
            (g.precision.first, "first"),
            (g.precision.last, "last"),
            (g.precision.downsample, "downsample"),
        ] {
            if on {
                precision.push(name);
            }
        }
        let rates: Vec<String> = self.rates.iter().map(|r| join(r)).collect();
        let acts: Vec<&str> = self
            .act_modes
            .iter()
            .map(|a| match a {
                ActMode::Signed => "signed",
                ActMode::ZeroOne => "zero_one",
                ActMode::Auto => "auto",
            })
            .collect();
        let lines = [
            ("in_channels", b.in_channels.to_string()),
            ("input_hw", format!("{},{}", b.input_hw.0, b.input_hw.1)),
            ("stem_channels", b.stem_channels.to_string()),
            ("stem_stride", b.stem_stride.to_string()),
            ("stages", stages.join(",")),
            ("units_per_block", b.units_per_block.to_string()),
            ("head", head),
            ("partition", join(&g.partition)),
            ("bases", g.bases.to_string()),
            (
                "decomposition",
                match g.decomposition {
                    Decomposition::Lbd => "lbd",
                    Decomposition::Gbd => "gbd",
                }
                .to_string(),
            ),
            ("gating", gating),
            (
                "second_path",
                match g.second_path {
                    SecondPath::Sum => "sum",
                    SecondPath::Avg => "avg",
                }
                .to_string(),
            ),
            ("precision", precision.join(",")),
            ("binary", self.binary.to_string()),
            ("pad_mode", pad_name(self.pad_mode).to_string()),
            ("use_alpha", self.use_alpha.to_string()),
            ("ste_clip", self.ste_clip.map_or("none".to_string(), |c| c.to_string())),
            ("rates", rates.join(";")),
            ("act_modes", acts.join(",")),
            ("seed", self.seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::new(BackboneSpec::resnet20(10), 1);
        let mut partition = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let b = &mut spec.backbone;
            match k {
                "in_channels" => b.in_channels = parse_num(k, v)?,
                "input_hw" => {
                    let l = parse_list(k, v)?;
                    if l.len() != 2 {
                        return Err(Error::Format(format!("{k}: expected h,w")));
                    }
                    b.input_hw = (l[0], l[1]);
                }
                "stem_channels" => b.stem_channels = parse_num(k, v)?,
                "stem_stride" => b.stem_stride = parse_num(k, v)?,
                "stages" => {
                    b.stages = v
                        .split(',')
                        .map(|s| {
                            let bad = || Error::Format(format!("stages: bad entry {s:?}"));
                            let (c, rest) = s.split_once('x').ok_or_else(bad)?;
                            let (n, st) = rest.split_once('s').ok_or_else(bad)?;
                            Ok(StageSpec {
                                channels: parse_num(k, c)?,
                                blocks: parse_num(k, n)?,
                                stride: parse_num(k, st)?,
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "units_per_block" => b.units_per_block = parse_num(k, v)?,
                "head" => {
                    let parts: Vec<&str> = v.split(':').collect();
                    b.head = match parts[..] {
                        ["classify", c] => HeadSpec::Classify { classes: parse_num(k, c)? },
                        ["segment", c, u] => HeadSpec::Segment {
                            classes: parse_num(k, c)?,
                            upsample: parse_num(k, u)?,
                        },
                        _ => return Err(Error::Format(format!("head: bad value {v:?}"))),
                    }
                }
                "partition" => partition = Some(parse_list(k, v)?),
                "bases" => spec.group.bases = parse_num(k, v)?,
                "decomposition" => {
                    spec.group.decomposition = match v {
                        "lbd" => Decomposition::Lbd,
                        "gbd" => Decomposition::Gbd,
                        _ => return Err(Error::Format(format!("decomposition: bad value {v:?}"))),
                    }
                }
                "gating" => {
                    spec.group.gating = match v.split_once(':') {
                        None if v == "none" => Gating::None,
                        None if v == "soft" => Gating::Soft,
                        Some(("hard", n)) => Gating::Hard { n_select: parse_num(k, n)? },
                        _ => return Err(Error::Format(format!("gating: bad value {v:?}"))),
                    }
                }
                "second_path" => spec.group.second_path = v.parse()?,
                "precision" => {
                    let mut p = PrecisionExceptions {
                        first: false,
                        last: false,
                        downsample: false,
                    };
                    for f in v.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                        match f {
                            "first" => p.first = true,
                            "last" => p.last = true,
                            "downsample" => p.downsample = true,
                            _ => return Err(Error::Format(format!("precision: unknown layer class {f:?}"))),
                        }
                    }
                    spec.group.precision = p;
                }
                "binary" => spec.binary = parse_num(k, v)?,
                "pad_mode" => spec.pad_mode = parse_pad_mode(v)?,
                "use_alpha" => spec.use_alpha = parse_num(k, v)?,
                "ste_clip" => spec.ste_clip = if v == "none" { None } else { Some(parse_num(k, v)?) },
                "rates" => {
                    spec.rates = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(';').map(|g| parse_list(k, g)).collect::<Result<_>>()?
                    }
                }
                "act_modes" => {
                    spec.act_modes = v
                        .split(',')
                        .map(str::trim)
                        .filter(|a| !a.is_empty())
                        .map(|a| match a {
                            "signed" => Ok(ActMode::Signed),
                            "zero_one" => Ok(ActMode::ZeroOne),
                            "auto" => Ok(ActMode::Auto),
                            _ => Err(Error::Format(format!("act_modes: bad value {a:?}"))),
                        })
                        .collect::<Result<_>>()?
                }
                "seed" => spec.seed = parse_num(k, v)?,
                _ => return Err(Error::Format(format!("line {}: unknown key {k:?}", lineno + 1))),
            }
        }
        spec.group.num_blocks = spec.backbone.num_blocks();
        spec.group.partition = partition.unwrap_or_else(|| spec.backbone.stage_partition());
        spec.validate()?;
        Ok(spec)
    }
}
