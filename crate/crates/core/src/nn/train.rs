//! Two-stage training: binary activations with real weights first, then
//! binary weights starting from the stage-one result.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use super::layers::Mode;
use super::ops::{pixel_cross_entropy, softmax_cross_entropy};
use super::optim::{adam_step, linear_lr, AdamConfig, AdamState};
use crate::checkpoint::{model_to_checkpoint, Checkpoint};
use crate::data::{prefetch_epoch, Dataset};
use crate::groupnet::{Model, ModelSpec, Stage};
use crate::metrics::{pixel_argmax, top_k_accuracy, ConfusionMatrix};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub weight_decay_stage1: f64,
    pub weight_decay_stage2: f64,
    pub seed: u64,
    /// Flip and pad-crop augmentation (classification only).
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            batch_size: 64,
            epochs_stage1: 60,
            epochs_stage2: 60,
            weight_decay_stage1: 1e-5,
            weight_decay_stage2: 0.0,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training accuracy (pixel accuracy for segmentation).
    pub accuracy: f64,
}

pub enum TrainEvent<'a> {
    Batch {
        stage: u8,
        epoch: usize,
        batch: usize,
        batches: usize,
        loss: f64,
    },
    Epoch(&'a EpochLog),
    /// Model state before the first and after the last step of a stage.
    StageStart { stage: u8, model: &'a Model },
    StageEnd { stage: u8, model: &'a Model },
    /// Emitted after each stage and on interruption.
    Checkpoint { stage: u8, checkpoint: &'a Checkpoint },
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub interrupted: bool,
}

/// Loss, gradient and number of correct predictions for a batch.
pub fn batch_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    if logits.shape.len() == 2 {
        let (loss, grad) = softmax_cross_entropy(logits, labels)?;
        let acc = top_k_accuracy(logits, labels, 1)?;
        Ok((loss, grad, (acc * labels.len() as f64).round() as usize))
    } else {
        let (loss, grad) = pixel_cross_entropy(logits, labels)?;
        let pred = pixel_argmax(logits)?;
        Ok((loss, grad, pred.iter().zip(labels).filter(|(p, y)| p == y).count()))
    }
}

fn stage_tag(s: Stage) -> u8 {
    match s {
        Stage::One => 1,
        Stage::Two => 2,
    }
}

fn check_params(model: &Model) -> Result<()> {
    for p in model.params() {
        if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {} became non-finite at index {i}", p.name)));
        }
    }
    Ok(())
}

/// Runs stage one and stage two on a fresh model built from `spec`.
///
/// `stop`, when set, ends training after the current batch; a checkpoint
/// of the state at that point is emitted before returning.
pub fn two_stage_train(
    spec: ModelSpec,
    data: Arc<Dataset>,
    cfg: &TrainConfig,
    stop: Option<&AtomicBool>,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut model = Model::new(spec)?;
    model.round_to_f32();
    let mut out = TrainOutcome {
        model: model.clone(),
        log: Vec::new(),
        checkpoints: Vec::new(),
        interrupted: false,
    };
    for (stage, epochs, wd) in [
        (Stage::One, cfg.epochs_stage1, cfg.weight_decay_stage1),
        (Stage::Two, cfg.epochs_stage2, cfg.weight_decay_stage2),
    ] {
        model.set_stage(stage);
        let tag = stage_tag(stage);
        let batches = data.len().div_ceil(cfg.batch_size.max(1));
        let total = epochs * batches;
        let mut state = AdamState::default();
        let mut t = 0;
        model.reset_kernel_calls();
        on_event(TrainEvent::StageStart { stage: tag, model: &model })?;
        for epoch in 0..epochs {
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            let mut seen = 0usize;
            let augment = cfg.augment && !data.is_segmentation();
            let epoch_seed = cfg.seed.wrapping_add(u64::from(tag) << 48);
            for (b, (x, y)) in prefetch_epoch(data.clone(), epoch_seed, epoch, cfg.batch_size, augment, 2)
                .into_iter()
                .enumerate()
            {
                model.zero_grad();
                let (logits, tape) = model.forward(&x, Mode::Train)?;
                let (loss, grad, hits) = batch_loss(&logits, &y)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {loss} at stage {tag} epoch {epoch} batch {b}"
                    )));
                }
                model.backward(tape, &grad)?;
                let lr = linear_lr(cfg.lr0, t, total);
                t += 1;
                adam_step(&mut model.params_mut(), &mut state, t, lr, wd, &cfg.adam)?;
                model.round_to_f32();
                check_params(&model)?;
                loss_sum += loss * x.shape[0] as f64;
                correct += hits;
                seen += y.len();
                on_event(TrainEvent::Batch {
                    stage: tag,
                    epoch,
                    batch: b,
                    batches,
                    loss,
                })?;
                if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                    let ck = model_to_checkpoint(&model);
                    on_event(TrainEvent::Checkpoint {
                        stage: tag,
                        checkpoint: &ck,
                    })?;
                    out.checkpoints.push(ck);
                    out.interrupted = true;
                    out.model = model;
                    return Ok(out);
                }
            }
            let row = EpochLog {
                stage: tag,
                epoch,
                loss: loss_sum / data.len() as f64,
                accuracy: correct as f64 / seen.max(1) as f64,
            };
            on_event(TrainEvent::Epoch(&row))?;
            out.log.push(row);
        }
        on_event(TrainEvent::StageEnd { stage: tag, model: &model })?;
        let ck = model_to_checkpoint(&model);
        on_event(TrainEvent::Checkpoint {
            stage: tag,
            checkpoint: &ck,
        })?;
        out.checkpoints.push(ck);
    }
    out.model = model;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Segmentation only.
    pub confusion: Option<ConfusionMatrix>,
}

impl EvalReport {
    pub fn mean_iou(&self) -> Option<f64> {
        self.confusion.as_ref().map(ConfusionMatrix::mean_iou)
    }
}

/// Inference-mode evaluation in dataset order.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    evaluate_with(|x| Ok(model.forward(x, Mode::Eval)?.0), data, batch_size)
}

/// Evaluation over any forward function with the model's output layout.
pub fn evaluate_with(
    mut forward: impl FnMut(&Tensor) -> Result<Tensor>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut loss = 0.0;
    let mut top1 = 0.0;
    let mut top5 = 0.0;
    let mut cm = data.is_segmentation().then(|| ConfusionMatrix::new(data.num_classes));
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = forward(&x)?;
        let (l, _, hits) = batch_loss(&logits, &y)?;
        loss += l * chunk.len() as f64;
        match cm.as_mut() {
            Some(cm) => {
                cm.add(&pixel_argmax(&logits)?, &y)?;
                top1 += hits as f64 / y.len() as f64 * chunk.len() as f64;
            }
            None => {
                let k = logits.shape[1];
                top1 += top_k_accuracy(&logits, &y, 1)? * chunk.len() as f64;
                top5 += top_k_accuracy(&logits, &y, 5.min(k))? * chunk.len() as f64;
            }
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        samples: data.len(),
        loss: loss / n,
        top1: top1 / n,
        top5: if cm.is_some() { top1 / n } else { top5 / n },
        confusion: cm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::model_from_checkpoint;
    use crate::groupnet::{BackboneSpec, HeadSpec, StageSpec, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn backbone() -> BackboneSpec {
        BackboneSpec {
            in_channels: 1,
            input_hw: (6, 6),
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![StageSpec { channels: 4, blocks: 1, stride: 1 }],
            units_per_block: 1,
            head: HeadSpec::Classify { classes: 2 },
        }
    }

    /// Two classes: bright left half or bright right half.
    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for _r in 0..6 {
                for c in 0..6 {
                    let bright = (c < 3) == (y == 0);
                    images.push(if bright { 1.0 } else { -1.0 } + rng.random_range(-0.3..0.3));
                }
            }
            labels.push(y);
        }
        Dataset {
            image_shape: [1, 6, 6],
            images,
            labels,
            num_classes: 2,
            labels_per_image: 1,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr0: 1e-2,
            batch_size: 8,
            epochs_stage1: 3,
            epochs_stage2: 2,
            augment: false,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_two_starts_from_stage_one_weights() {
        let spec = Variant::A.spec(backbone(), 2, 1).unwrap();
        let data = Arc::new(toy_data(32, 1));
        let snapshot = |m: &Model| m.params().iter().map(|p| p.data().to_vec()).collect::<Vec<_>>();
        let mut end1 = None;
        let mut start2 = None;
        let mut calls = Vec::new();
        let out = two_stage_train(spec, data, &cfg(), None, &mut |e| {
            match e {
                TrainEvent::StageEnd { stage, model } => {
                    calls.push((stage, model.kernel_calls()));
                    if stage == 1 {
                        end1 = Some(snapshot(model));
                    }
                }
                TrainEvent::StageStart { stage: 2, model } => start2 = Some(snapshot(model)),
                _ => {}
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(end1.unwrap(), start2.unwrap());
        assert_eq!(out.checkpoints.len(), 2);
        assert_eq!(out.log.len(), 5);
        assert_eq!(model_from_checkpoint(&out.checkpoints[0]).unwrap().stage(), Stage::One);
        // stage one never touches the packed kernel; stage two does
        assert_eq!(calls[0].1 .0, 0);
        assert!(calls[1].1 .0 > 0);
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = Variant::B.spec(backbone(), 2, 1).unwrap();
        let data = Arc::new(toy_data(24, 2));
        let run = || {
            let o = two_stage_train(spec.clone(), data.clone(), &cfg(), None, &mut |_| Ok(())).unwrap();
            (o.log, o.checkpoints[1].to_bytes().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let spec = Variant::A.spec(backbone(), 2, 1).unwrap();
        let data = Arc::new(toy_data(64, 3));
        let mut c = cfg();
        c.epochs_stage1 = 6;
        let out = two_stage_train(spec, data.clone(), &c, None, &mut |_| Ok(())).unwrap();
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        let mut m = out.model;
        let r = evaluate(&mut m, &data, 16).unwrap();
        assert!(r.top1 > 0.8, "{r:?}");
        assert!(r.top5 >= r.top1);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let spec = Variant::A.spec(backbone(), 2, 1).unwrap();
        let data = Arc::new(toy_data(0, 0));
        let r = two_stage_train(spec, data, &cfg(), None, &mut |_| Ok(()));
        assert!(matches!(r, Err(Error::Empty)));
    }

    #[test]
    fn stop_flag_emits_a_loadable_checkpoint() {
        let spec = Variant::A.spec(backbone(), 2, 1).unwrap();
        let stop = AtomicBool::new(true);
        let out = two_stage_train(spec, Arc::new(toy_data(16, 5)), &cfg(), Some(&stop), &mut |_| Ok(())).unwrap();
        assert!(out.interrupted);
        assert_eq!(out.checkpoints.len(), 1);
        model_from_checkpoint(&out.checkpoints[0]).unwrap();
    }
}
