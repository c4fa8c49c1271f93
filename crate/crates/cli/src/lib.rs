//! Command implementations behind the `groupnet` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use groupnet_bench::{binary_vs_addition_split, memory_model, run_case, BenchCase, KernelKind, Machine, Report};
use groupnet_core::bpac::{generate_shapes, segmentation_csv, toy_segmentation_pipeline, SegmentationSetup, ShapesConfig};
use groupnet_core::checkpoint::{model_from_checkpoint, model_to_checkpoint, Checkpoint, CONFIG_ENTRY, EXPORT_ENTRY};
use groupnet_core::data::{cifar10_files, load_cifar10, Dataset};
use groupnet_core::export::{export_checkpoint, ExportedModel};
use groupnet_core::groupnet::{complexity_report, Model, ModelSpec};
use groupnet_core::nn::train::{evaluate, evaluate_with, two_stage_train, EvalReport, TrainEvent};

use config::{DatasetKind, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn config(e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, format!("config error: {e}"))
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_DATA, format!("data error: {e}"))
    }
}

/// Core errors outside data loading: numeric failures get their own code.
impl From<groupnet_core::Error> for CliError {
    fn from(e: groupnet_core::Error) -> Self {
        use groupnet_core::Error as E;
        match e {
            E::Numeric(_) | E::NonFinite { .. } => CliError::new(EXIT_NUMERIC, format!("numeric failure: {e}")),
            _ => CliError::new(1, e.to_string()),
        }
    }
}

impl From<groupnet_bench::BenchError> for CliError {
    fn from(e: groupnet_bench::BenchError) -> Self {
        CliError::new(1, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Per-channel means of the CIFAR training split, one file at a time.
fn cifar_train_means(dir: &Path) -> groupnet_core::Result<Vec<f64>> {
    let mut sums = vec![0.0; 3];
    let mut images = 0usize;
    for f in cifar10_files(dir, true)? {
        let d = load_cifar10(&[f])?;
        let n = d.len();
        for (c, m) in d.channel_means().into_iter().enumerate() {
            sums[c] += m * n as f64;
        }
        images += n;
    }
    Ok(sums.into_iter().map(|s| s / images.max(1) as f64).collect())
}

/// Training and test splits as described by `cfg`.
pub fn load_splits(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset_kind {
        DatasetKind::Cifar10 => {
            let dir = &cfg.dataset;
            if !dir.is_dir() {
                return Err(CliError::data(format!("dataset directory {:?} not found", dir.display().to_string())));
            }
            let load = |train| -> groupnet_core::Result<Dataset> { load_cifar10(&cifar10_files(dir, train)?) };
            let mut train = load(true).map_err(CliError::data)?;
            let mut test = load(false).map_err(CliError::data)?;
            if cfg.train_images > 0 {
                train = train.take(cfg.train_images);
            }
            // means always come from the full training split
            let means = cifar_train_means(dir).map_err(CliError::data)?;
            train.subtract_channel_means(&means).map_err(CliError::data)?;
            test.subtract_channel_means(&means).map_err(CliError::data)?;
            (train, test)
        }
        DatasetKind::Shapes => {
            let gen = |seed, n| {
                generate_shapes(&ShapesConfig {
                    seed,
                    num_images: n,
                    image_size: cfg.image_size,
                    num_classes: cfg.num_classes,
                })
                .map_err(CliError::data)
            };
            let n = |v: usize, d| if v == 0 { d } else { v };
            (
                gen(cfg.seed, n(cfg.train_images, 256))?,
                gen(cfg.seed + 1000, n(cfg.test_images, 64))?,
            )
        }
    };
    let test = if cfg.test_images > 0 { test.take(cfg.test_images) } else { test };
    Ok((train, test))
}

/// Rejects data whose sample shape or class count differs from the model's,
/// naming the layer that would receive it.
pub fn check_data_fits(spec: &ModelSpec, data: &Dataset) -> CliResult<()> {
    let b = &spec.backbone;
    let want = [b.in_channels, b.input_hw.0, b.input_hw.1];
    if data.image_shape != want {
        return Err(CliError::data(format!(
            "layer stem.conv expects {want:?} inputs, dataset has {:?}",
            data.image_shape
        )));
    }
    if b.head.classes() != data.num_classes {
        return Err(CliError::data(format!(
            "layer head has {} classes, dataset has {}",
            b.head.classes(),
            data.num_classes
        )));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::new(1, format!("{}: {e}", path.display())))
}

pub fn eval_csv(r: &EvalReport) -> String {
    let miou = r.mean_iou().map_or(String::new(), |m| format!("{m:.6}"));
    format!(
        "samples,loss,top1,top5,miou\n{},{:.6},{:.6},{:.6},{}\n",
        r.samples, r.loss, r.top1, r.top5, miou
    )
}

fn describe_eval(r: &EvalReport) -> String {
    match r.mean_iou() {
        Some(m) => format!("{} images: mIOU {:.2}%  pixel top-1 {:.2}%", r.samples, 100.0 * m, 100.0 * r.top1),
        None => format!("{} images: top-1 {:.2}%  top-5 {:.2}%", r.samples, 100.0 * r.top1, 100.0 * r.top5),
    }
}

/// Files written by `train` into its output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.gnck";
pub const EVAL_CSV: &str = "eval.csv";

pub fn stage_checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.gnck")
}

/// Runs two-stage training. Writes the resolved config, a metrics CSV
/// (appended per epoch), one checkpoint per stage, the final model and
/// its test-split evaluation. Progress goes to `progress`.
pub fn train(cfg: &RunConfig, out_dir: &Path, stop: Option<&AtomicBool>, progress: &mut dyn std::io::Write) -> CliResult<EvalReport> {
    let (train_set, test_set) = load_splits(cfg)?;
    let spec = cfg.model_spec(train_set.image_shape, train_set.num_classes).map_err(CliError::config)?;
    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
    let metrics_path = out_dir.join(METRICS_CSV);
    write_file(&metrics_path, "epoch,stage,loss,accuracy\n")?;
    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let _ = writeln!(
        progress,
        "training {} on {} images ({} test), {}+{} epochs",
        cfg.variant,
        train_set.len(),
        test_set.len(),
        cfg.epochs_stage1,
        cfg.epochs_stage2
    );
    let tcfg = cfg.train_config();
    let mut io_err = None;
    let mut on_event = |ev: TrainEvent<'_>| -> groupnet_core::Result<()> {
        match ev {
            TrainEvent::Batch { stage, epoch, batch, batches, loss } if batch % 50 == 0 || batch + 1 == batches => {
                let _ = writeln!(progress, "stage {stage} epoch {epoch} batch {}/{batches} loss {loss:.4}", batch + 1);
            }
            TrainEvent::Epoch(log) => {
                let _ = writeln!(
                    progress,
                    "stage {} epoch {} done: loss {:.4} accuracy {:.4}",
                    log.stage, log.epoch, log.loss, log.accuracy
                );
                writeln!(metrics, "{},{},{},{}", log.epoch, log.stage, log.loss, log.accuracy)?;
            }
            TrainEvent::Checkpoint { stage, checkpoint } => {
                let path = out_dir.join(stage_checkpoint_name(stage));
                if let Err(e) = checkpoint.save(&path) {
                    io_err = Some(format!("{}: {e}", path.display()));
                    return Err(e);
                }
                let _ = writeln!(progress, "wrote {}", path.display());
            }
            _ => {}
        }
        Ok(())
    };
    let outcome = two_stage_train(spec, Arc::new(train_set), &tcfg, stop, &mut on_event);
    if let Some(e) = io_err {
        return Err(CliError::new(1, e));
    }
    let outcome = outcome?;
    if outcome.interrupted {
        return Err(CliError::new(130, "interrupted; the last checkpoint is valid"));
    }
    let mut model = outcome.model;
    model_to_checkpoint(&model).save(&out_dir.join(FINAL_CHECKPOINT))?;
    let report = evaluate(&mut model, &test_set, cfg.batch_size)?;
    write_file(&out_dir.join(EVAL_CSV), &eval_csv(&report))?;
    let _ = writeln!(progress, "test {}", describe_eval(&report));
    Ok(report)
}

/// Either a training checkpoint or an exported artifact.
pub enum LoadedModel {
    Training(Box<Model>),
    Exported(Box<ExportedModel>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> CliResult<Self> {
        let c = Checkpoint::load(path).map_err(|e| CliError::new(1, format!("{}: {e}", path.display())))?;
        if c.get(EXPORT_ENTRY).is_some() {
            Ok(LoadedModel::Exported(Box::new(ExportedModel::from_checkpoint(&c)?)))
        } else {
            Ok(LoadedModel::Training(Box::new(model_from_checkpoint(&c)?)))
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            LoadedModel::Training(m) => &m.spec,
            LoadedModel::Exported(m) => &m.spec,
        }
    }

    pub fn evaluate(&mut self, data: &Dataset, batch_size: usize) -> CliResult<EvalReport> {
        check_data_fits(self.spec(), data)?;
        Ok(match self {
            LoadedModel::Training(m) => evaluate(m, data, batch_size)?,
            LoadedModel::Exported(m) => evaluate_with(|x| m.forward(x), data, batch_size)?,
        })
    }
}

/// Evaluates `checkpoint` on the test split described by `cfg`.
pub fn eval(checkpoint: &Path, cfg: &RunConfig) -> CliResult<EvalReport> {
    let mut model = LoadedModel::load(checkpoint)?;
    let (_, test) = load_splits(cfg)?;
    model.evaluate(&test, cfg.batch_size)
}

pub struct ExportSummary {
    pub weight_bytes: usize,
    pub float_bytes: u64,
}

/// Folds and packs `input` into an inference artifact at `output`.
pub fn export(input: &Path, output: &Path) -> CliResult<ExportSummary> {
    let c = Checkpoint::load(input).map_err(|e| CliError::new(1, format!("{}: {e}", input.display())))?;
    let exported = export_checkpoint(&c)?;
    exported.save(output)?;
    let m = ExportedModel::from_checkpoint(&exported)?;
    let skeleton = Model::new(m.spec.clone())?;
    Ok(ExportSummary {
        weight_bytes: m.weight_bytes(),
        float_bytes: memory_model(&skeleton)?.float_baseline_bytes,
    })
}

/// Group spec, complexity counts and memory model of a spec.
pub fn inspect_spec(spec: &ModelSpec) -> CliResult<String> {
    let model = Model::new(spec.clone())?;
    let r = complexity_report(&model)?;
    let mem = memory_model(&model)?;
    let mut s = String::new();
    let _ = writeln!(s, "[model]");
    s.push_str(&spec.to_text());
    let _ = writeln!(s, "\n[complexity]");
    let _ = writeln!(s, "binary_ops={}", r.binary_ops);
    let _ = writeln!(s, "group_body_binary_ops={}", r.group_body_binary_ops);
    let _ = writeln!(s, "int8_macs={}", r.int8_macs);
    let _ = writeln!(s, "float_macs={}", r.float_macs);
    let _ = writeln!(s, "fixed_point_adds={}", r.fixed_point_adds);
    let _ = writeln!(s, "param_bits={}", r.param_bits);
    let _ = writeln!(s, "float_param_bits={}", r.float_param_bits);
    let _ = writeln!(s, "memory_saving={:.3}", r.memory_saving);
    let _ = writeln!(s, "precision_exceptions={}", model.precision_exceptions()?.join(","));
    let _ = writeln!(s, "\n[memory]");
    let _ = writeln!(s, "inference_weight_bytes={}", mem.weight_bytes);
    let _ = writeln!(s, "inference_activation_bytes={}", mem.activation_bytes);
    let _ = writeln!(s, "float_baseline_bytes={}", mem.float_baseline_bytes);
    Ok(s)
}

pub fn inspect_checkpoint(path: &Path) -> CliResult<String> {
    let c = Checkpoint::load(path).map_err(|e| CliError::new(1, format!("{}: {e}", path.display())))?;
    let spec = ModelSpec::from_text(&c.text(CONFIG_ENTRY)?)?;
    let mut s = inspect_spec(&spec)?;
    let _ = writeln!(s, "\n[checkpoint]");
    let _ = writeln!(s, "exported={}", c.get(EXPORT_ENTRY).is_some());
    let _ = writeln!(s, "entries={}", c.entries.len());
    let _ = writeln!(s, "payload_bytes={}", c.payload_bytes(|e| !e.name.starts_with("__")));
    Ok(s)
}

/// Parses `1-11` or `all`.
pub fn parse_cases(s: &str) -> CliResult<Vec<BenchCase>> {
    if s == "all" {
        return Ok(BenchCase::all());
    }
    s.split(',')
        .map(|t| {
            let id = t.trim().parse().map_err(|_| CliError::config(format!("bad case {t:?}")))?;
            BenchCase::new(id).map_err(CliError::config)
        })
        .collect()
}

/// Times every `(case, kernel)` pair; progress lines go to `progress`.
pub fn bench(cases: &[BenchCase], kernels: &[KernelKind], repeats: usize, progress: &mut dyn std::io::Write) -> CliResult<Report> {
    let mut report = Report::new(Machine::detect());
    for case in cases {
        for &k in kernels {
            let t = run_case(case, k, repeats)?;
            let _ = writeln!(
                progress,
                "case {} ({}ch {}x{}) {k}: {:.1} +- {:.1} us",
                case.id, case.channels, case.spatial, case.spatial, t.mean_us, t.std_us
            );
            report.push(case, k, t)?;
        }
    }
    Ok(report)
}

/// CSV of bConv vs hAdd timings per case.
pub fn addition_split_csv(cases: &[BenchCase], repeats: usize) -> CliResult<String> {
    let mut s = String::from("case_id,bconv_us,hadd_us,ratio\n");
    for c in cases {
        let r = binary_vs_addition_split(c, repeats)?;
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.4}",
            c.id,
            r.bconv.mean_us,
            r.hadd.mean_us,
            r.hadd.mean_us / r.bconv.mean_us
        );
    }
    Ok(s)
}

/// Trains the toy segmentation pair (diverse vs uniform rates) and returns its CSV.
pub fn bpac_demo(seed: u64, train_images: usize, test_images: usize, epochs: Option<usize>) -> CliResult<String> {
    let shapes = |seed, num_images| {
        generate_shapes(&ShapesConfig {
            seed,
            num_images,
            ..ShapesConfig::default()
        })
        .map_err(CliError::data)
    };
    let train = shapes(seed, train_images)?;
    let test = shapes(seed + 1000, test_images)?;
    let mut setup = SegmentationSetup {
        seed,
        ..SegmentationSetup::default()
    };
    setup.train.seed = seed;
    if let Some(e) = epochs {
        setup.train.epochs_stage1 = e;
        setup.train.epochs_stage2 = e;
    }
    Ok(segmentation_csv(&toy_segmentation_pipeline(&train, &test, &setup)?))
}

