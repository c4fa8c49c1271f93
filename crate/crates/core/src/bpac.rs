//! Parallel atrous binary branches: a distinct dilation per base, and a
//! synthetic multi-scale segmentation task to compare against one shared
//! rate.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::groupnet::{average_branches, complexity_report, ActMode, BackboneSpec, BinaryBranch, ModelSpec};
use crate::nn::train::{evaluate, two_stage_train, TrainConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-group dilation of every base, plus the activation encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BpacSpec {
    pub bases: usize,
    pub rate_sets: Vec<Vec<usize>>,
    pub act_modes: Vec<ActMode>,
}

impl BpacSpec {
    /// Rates `{2..K+1}` on the penultimate group and `{6..K+5}` on the last,
    /// rate 1 elsewhere.
    pub fn standard(num_groups: usize, bases: usize) -> Self {
        let mut rate_sets = vec![vec![1; bases]; num_groups];
        if num_groups >= 2 {
            rate_sets[num_groups - 2] = (2..bases + 2).collect();
        }
        if num_groups >= 1 {
            rate_sets[num_groups - 1] = (6..bases + 6).collect();
        }
        BpacSpec {
            bases,
            rate_sets,
            act_modes: vec![ActMode::Auto; num_groups],
        }
    }

    /// Same groups with every base at one rate, the set's mean rounded up
    /// (`{2..5}` gives 4, `{6..9}` gives 8).
    pub fn uniform(&self) -> Self {
        BpacSpec {
            rate_sets: self
                .rate_sets
                .iter()
                .map(|r| vec![r.iter().sum::<usize>().div_ceil(r.len().max(1)); r.len()])
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (g, r) in self.rate_sets.iter().enumerate() {
            if r.len() != self.bases {
                return Err(Error::invalid(format!(
                    "group {g}: {} rates for {} bases",
                    r.len(),
                    self.bases
                )));
            }
            if r.contains(&0) {
                return Err(Error::invalid(format!("group {g}: rates must be at least 1")));
            }
        }
        Ok(())
    }

    /// Writes the rates and activation modes into `spec`.
    pub fn apply(&self, spec: &mut ModelSpec) -> Result<()> {
        self.validate()?;
        if spec.group.bases != self.bases || spec.group.num_groups() != self.rate_sets.len() {
            return Err(Error::invalid(format!(
                "rate sets cover {} groups x {} bases, model has {} x {}",
                self.rate_sets.len(),
                self.bases,
                spec.group.num_groups(),
                spec.group.bases
            )));
        }
        spec.rates = self.rate_sets.clone();
        spec.act_modes = self.act_modes.clone();
        spec.validate()
    }
}

/// `(1/K) sum_i B_i(x)` where branch `i` runs at dilation `rates[i]`.
pub fn bpac_forward(x: &Tensor, branches: &[BinaryBranch], rates: &[usize]) -> Result<Tensor> {
    if rates.len() != branches.len() {
        return Err(Error::LengthMismatch {
            left: branches.len(),
            right: rates.len(),
        });
    }
    for (i, (b, &r)) in branches.iter().zip(rates).enumerate() {
        if b.geom.dilation != (r, r) {
            return Err(Error::invalid(format!(
                "branch {i} runs at dilation {:?}, rate set says {r}",
                b.geom.dilation
            )));
        }
    }
    average_branches(x, branches)
}

/// Bumped whenever the generator's output changes.
pub const SHAPES_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapesConfig {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: usize,
    /// Including background (class 0).
    pub num_classes: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            seed: 0,
            num_images: 256,
            image_size: 64,
            num_classes: 4,
        }
    }
}

/// Side length of the shapes of foreground class `c` (1-based); classes
/// cycle through three scales.
pub fn class_scale(c: usize, image_size: usize) -> usize {
    let s = image_size.max(8);
    match (c - 1) % 3 {
        0 => (s / 8).max(2),
        1 => s / 4,
        _ => s / 2,
    }
}

/// Noisy single-channel images of filled squares and disks at three scales.
///
/// A pixel's label is the class of the shape covering it, and a class fixes
/// the shape's scale, so the label of an interior pixel can only be told
/// from context at that scale. All shapes share one intensity.
pub fn generate_shapes(cfg: &ShapesConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 {
        return Err(Error::invalid(format!(
            "need background plus at least one shape class, got {} class(es)",
            cfg.num_classes
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::invalid("image size must be at least 8"));
    }
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(SHAPES_VERSION) << 56);
    let mut images = Vec::with_capacity(cfg.num_images * s * s);
    let mut labels = Vec::with_capacity(cfg.num_images * s * s);
    for _ in 0..cfg.num_images {
        let mut lab = vec![0usize; s * s];
        let shapes = rng.random_range(2..=4);
        for _ in 0..shapes {
            let c = rng.random_range(1..cfg.num_classes);
            let side = class_scale(c, s);
            let disk = (c - 1) / 3 % 2 == 1;
            let y0 = rng.random_range(0..=s - side);
            let x0 = rng.random_range(0..=s - side);
            let r = side as f64 / 2.0;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let inside = !disk || {
                        let dy = y as f64 + 0.5 - (y0 as f64 + r);
                        let dx = x as f64 + 0.5 - (x0 as f64 + r);
                        dy * dy + dx * dx <= r * r
                    };
                    if inside {
                        lab[y * s + x] = c;
                    }
                }
            }
        }
        images.extend(lab.iter().map(|&l| {
            let base = if l == 0 { -0.5 } else { 0.5 };
            base + rng.random_range(-0.35..0.35)
        }));
        labels.extend(lab);
    }
    Ok(Dataset {
        image_shape: [1, s, s],
        images,
        labels,
        num_classes: cfg.num_classes,
        labels_per_image: s * s,
    })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRow {
    pub name: String,
    pub rates: Vec<Vec<usize>>,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub binary_ops: u64,
}

#[derive(Clone, Debug)]
pub struct SegmentationSetup {
    pub width: usize,
    pub bases: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SegmentationSetup {
    fn default() -> Self {
        SegmentationSetup {
            width: 16,
            bases: 4,
            train: TrainConfig {
                lr0: 2e-3,
                batch_size: 16,
                epochs_stage1: 8,
                epochs_stage2: 8,
                weight_decay_stage1: 1e-5,
                weight_decay_stage2: 0.0,
                seed: 0,
                augment: false,
                adam: Default::default(),
            },
            seed: 0,
        }
    }
}

fn model_spec(train: &Dataset, setup: &SegmentationSetup, rates: &BpacSpec) -> Result<ModelSpec> {
    let [c, h, _] = train.image_shape;
    let bb = BackboneSpec::toy_fcn(c, h, setup.width, train.num_classes);
    let mut spec = ModelSpec::new(bb, setup.bases);
    spec.seed = setup.seed;
    rates.apply(&mut spec)?;
    Ok(spec)
}

/// Trains the same binary FCN once with diverse rates and once with the
/// uniform rates, evaluating both on `test`.
pub fn toy_segmentation_pipeline(
    train: &Dataset,
    test: &Dataset,
    setup: &SegmentationSetup,
) -> Result<Vec<SegmentationRow>> {
    for d in [train, test] {
        let present = d.labels.iter().fold(vec![false; d.num_classes], |mut acc, &l| {
            acc[l] = true;
            acc
        });
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::invalid("segmentation set has a single class"));
        }
    }
    let [c, h, _] = train.image_shape;
    let groups = BackboneSpec::toy_fcn(c, h, setup.width, train.num_classes).stages.len();
    let diverse = BpacSpec::standard(groups, setup.bases);
    let data = Arc::new(train.clone());
    let mut rows = Vec::new();
    for (name, rates) in [("bpac", diverse.clone()), ("uniform", diverse.uniform())] {
        let spec = model_spec(train, setup, &rates)?;
        let out = two_stage_train(spec, data.clone(), &setup.train, None, &mut |_| Ok(()))?;
        let mut model = out.model;
        let ops = complexity_report(&model)?.binary_ops;
        let rep = evaluate(&mut model, test, setup.train.batch_size)?;
        let cm = rep.confusion.expect("segmentation evaluation");
        rows.push(SegmentationRow {
            name: name.to_string(),
            rates: rates.rate_sets.clone(),
            miou: cm.mean_iou(),
            class_iou: cm.class_iou(),
            binary_ops: ops,
        });
    }
    Ok(rows)
}

/// CSV with one row per configuration.
pub fn segmentation_csv(rows: &[SegmentationRow]) -> String {
    let mut s = String::from("config,rates,miou,binary_ops,class_iou\n");
    for r in rows {
        let rates: Vec<String> = r
            .rates
            .iter()
            .map(|g| g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        let ious: Vec<String> = r
            .class_iou
            .iter()
            .map(|v| v.map_or("-".into(), |x| format!("{x:.4}")))
            .collect();
        s.push_str(&format!(
            "{},{},{:.4},{},{}\n",
            r.name,
            rates.join("|"),
            r.miou,
            r.binary_ops,
            ious.join(" ")
        ));
    }
    s
}
