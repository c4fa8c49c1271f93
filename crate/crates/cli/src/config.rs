//! `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use groupnet_core::bitcore::PadValue;
use groupnet_core::bpac::BpacSpec;
use groupnet_core::groupnet::{parse_pad_mode, BackboneSpec, Gating, ModelSpec, SecondPath, Variant};
use groupnet_core::nn::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to one line.
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Full-precision network of the same topology.
    Float,
    Group(Variant),
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "float" {
            return Ok(Architecture::Float);
        }
        s.parse().map(Architecture::Group).map_err(|e: groupnet_core::Error| e.to_string())
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Float => f.write_str("float"),
            Architecture::Group(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    None,
    Soft,
    Hard,
}

impl FromStr for GateMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(GateMode::None),
            "soft" => Ok(GateMode::Soft),
            "hard" => Ok(GateMode::Hard),
            _ => Err(format!("gate mode must be none|soft|hard, got {s:?}")),
        }
    }
}

impl GateMode {
    fn name(self) -> &'static str {
        match self {
            GateMode::None => "none",
            GateMode::Soft => "soft",
            GateMode::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// CIFAR-10 binary batches under `dataset`.
    Cifar10,
    /// Generated multi-scale squares segmentation set.
    Shapes,
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "shapes" => Ok(DatasetKind::Shapes),
            _ => Err(format!("dataset kind must be cifar10|shapes, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Architecture,
    /// Bases per group; variant default when unset.
    pub bases: Option<usize>,
    pub n_select: Option<usize>,
    pub lr0: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub weight_decay_stage1: f64,
    pub weight_decay_stage2: f64,
    pub seed: u64,
    pub augment: bool,
    pub dataset_kind: DatasetKind,
    pub dataset: PathBuf,
    /// 0 means the whole split.
    pub train_images: usize,
    pub test_images: usize,
    /// Overrides the gating the variant implies.
    pub gate_mode: Option<GateMode>,
    pub second_path_mode: SecondPath,
    pub pad_mode: PadValue,
    pub use_alpha: bool,
    pub width: usize,
    pub blocks_per_stage: usize,
    pub bpac: bool,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            variant: Architecture::Group(Variant::B),
            bases: None,
            n_select: None,
            lr0: t.lr0,
            epochs_stage1: t.epochs_stage1,
            epochs_stage2: t.epochs_stage2,
            batch_size: t.batch_size,
            weight_decay_stage1: t.weight_decay_stage1,
            weight_decay_stage2: t.weight_decay_stage2,
            seed: 0,
            augment: true,
            dataset_kind: DatasetKind::Cifar10,
            dataset: PathBuf::new(),
            train_images: 0,
            test_images: 0,
            gate_mode: None,
            second_path_mode: SecondPath::Sum,
            pad_mode: PadValue::MinusOne,
            use_alpha: false,
            width: 16,
            blocks_per_stage: 3,
            bpac: false,
            image_size: 64,
            num_classes: 4,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_with<T, E: std::fmt::Display>(line: usize, key: &str, r: Result<T, E>) -> Result<T, ConfigError> {
    r.map_err(|e| err(line, format!("{key}: {e}")))
}

fn pad_name(p: PadValue) -> &'static str {
    match p {
        PadValue::MinusOne => "minus_one",
        PadValue::PlusOne => "plus_one",
        PadValue::ZeroSkip => "zero",
    }
}

impl RunConfig {
    /// Parses config text. Blank lines and `#` comments are ignored;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected key=value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(n, format!("{key} is set twice")));
            }
            match key {
                "variant" => c.variant = parse_with(n, key, v.parse())?,
                "K" => c.bases = Some(parse(n, key, v)?),
                "n_select" => c.n_select = Some(parse(n, key, v)?),
                "lr0" => c.lr0 = parse(n, key, v)?,
                "epochs_stage1" => c.epochs_stage1 = parse(n, key, v)?,
                "epochs_stage2" => c.epochs_stage2 = parse(n, key, v)?,
                "batch_size" => c.batch_size = parse(n, key, v)?,
                "weight_decay_stage1" => c.weight_decay_stage1 = parse(n, key, v)?,
                "weight_decay_stage2" => c.weight_decay_stage2 = parse(n, key, v)?,
                "seed" => c.seed = parse(n, key, v)?,
                "augment" => c.augment = parse(n, key, v)?,
                "dataset_kind" => c.dataset_kind = parse_with(n, key, v.parse())?,
                "dataset" => c.dataset = PathBuf::from(v),
                "train_images" => c.train_images = parse(n, key, v)?,
                "test_images" => c.test_images = parse(n, key, v)?,
                "gate_mode" => c.gate_mode = Some(parse_with(n, key, v.parse())?),
                "second_path_mode" => c.second_path_mode = parse_with(n, key, v.parse())?,
                "pad_mode" => c.pad_mode = parse_with(n, key, parse_pad_mode(v))?,
                "use_alpha" => c.use_alpha = parse(n, key, v)?,
                "width" => c.width = parse(n, key, v)?,
                "blocks_per_stage" => c.blocks_per_stage = parse(n, key, v)?,
                "bpac" => c.bpac = parse(n, key, v)?,
                "image_size" => c.image_size = parse(n, key, v)?,
                "num_classes" => c.num_classes = parse(n, key, v)?,
                _ => return Err(err(n, format!("unknown key {key:?}"))),
            }
            seen.push(key.to_string());
        }
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 || self.width == 0 || self.blocks_per_stage == 0 {
            return Err(err(0, "batch_size, width and blocks_per_stage must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(err(0, format!("lr0 must be positive, got {}", self.lr0)));
        }
        // surfaces K / n_select / gate mode conflicts before any data is read
        self.model_spec([3, 32, 32], 10).map(|_| ())
    }

    /// `(bases, n_select)` after variant defaults.
    pub fn resolved_bases(&self) -> (usize, usize) {
        let (k, n) = match self.variant {
            Architecture::Float => (1, 1),
            Architecture::Group(v) => v.default_bases(),
        };
        let k = self.bases.unwrap_or(k);
        (k, self.n_select.unwrap_or(n.min(k)))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            batch_size: self.batch_size,
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            weight_decay_stage1: self.weight_decay_stage1,
            weight_decay_stage2: self.weight_decay_stage2,
            seed: self.seed,
            augment: self.augment,
            adam: Default::default(),
        }
    }

    fn backbone(&self, image_shape: [usize; 3], classes: usize) -> BackboneSpec {
        match self.dataset_kind {
            DatasetKind::Cifar10 => {
                let mut b = BackboneSpec::resnet(self.width, self.blocks_per_stage, classes);
                b.in_channels = image_shape[0];
                b.input_hw = (image_shape[1], image_shape[2]);
                b
            }
            DatasetKind::Shapes => BackboneSpec::toy_fcn(image_shape[0], image_shape[1], self.width, classes),
        }
    }

    /// Model spec for data of `image_shape` (`C,H,W`) with `classes` labels.
    pub fn model_spec(&self, image_shape: [usize; 3], classes: usize) -> Result<ModelSpec, ConfigError> {
        let backbone = self.backbone(image_shape, classes);
        let (k, n) = self.resolved_bases();
        let mut spec = match self.variant {
            Architecture::Float => {
                if self.bases.is_some_and(|k| k != 1) {
                    return Err(err(0, "the float variant has a single base; drop K"));
                }
                ModelSpec::float_baseline(backbone)
            }
            Architecture::Group(v) => parse_with(0, "variant", v.spec(backbone, k, n))?,
        };
        if let Some(g) = self.gate_mode {
            spec.group.gating = match g {
                GateMode::None => Gating::None,
                GateMode::Soft => Gating::Soft,
                GateMode::Hard => Gating::Hard { n_select: n },
            };
        }
        spec.group.second_path = self.second_path_mode;
        spec.pad_mode = self.pad_mode;
        spec.use_alpha = self.use_alpha;
        spec.seed = self.seed;
        if self.bpac {
            let rates = BpacSpec::standard(spec.group.num_groups(), k);
            parse_with(0, "bpac", rates.apply(&mut spec))?;
        }
        parse_with(0, "model", spec.validate())?;
        Ok(spec)
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn resolved_text(&self) -> String {
        let (k, n) = self.resolved_bases();
        let mut s = String::new();
        let mut kv = |key: &str, v: String| {
            let _ = writeln!(s, "{key}={v}");
        };
        kv("variant", self.variant.to_string());
        if self.variant != Architecture::Float {
            kv("K", k.to_string());
            kv("n_select", n.to_string());
        }
        kv("lr0", format!("{:?}", self.lr0));
        kv("epochs_stage1", self.epochs_stage1.to_string());
        kv("epochs_stage2", self.epochs_stage2.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay_stage1", format!("{:?}", self.weight_decay_stage1));
        kv("weight_decay_stage2", format!("{:?}", self.weight_decay_stage2));
        kv("seed", self.seed.to_string());
        kv("augment", self.augment.to_string());
        kv(
            "dataset_kind",
            match self.dataset_kind {
                DatasetKind::Cifar10 => "cifar10",
                DatasetKind::Shapes => "shapes",
            }
            .into(),
        );
        kv("dataset", self.dataset.display().to_string());
        kv("train_images", self.train_images.to_string());
        kv("test_images", self.test_images.to_string());
        if let Some(g) = self.gate_mode {
            kv("gate_mode", g.name().into());
        }
        kv(
            "second_path_mode",
            match self.second_path_mode {
                SecondPath::Sum => "sum",
                SecondPath::Avg => "avg",
            }
            .into(),
        );
        kv("pad_mode", pad_name(self.pad_mode).into());
        kv("use_alpha", self.use_alpha.to_string());
        kv("width", self.width.to_string());
        kv("blocks_per_stage", self.blocks_per_stage.to_string());
        kv("bpac", self.bpac.to_string());
        kv("image_size", self.image_size.to_string());
        kv("num_classes", self.num_classes.to_string());
        s
    }
}
