//! Training loop: augmented batches, cross-entropy on full-resolution
//! logits, Adam updates, per-epoch validation, and the ablation harness that
//! compares the three model variants.

use crate::augment::{self, AugConfig};
use crate::error::PipelineError;
use crate::graph::{Graph, Labels};
use crate::infer;
use crate::layers::Phase;
use crate::metrics::MetricAccumulator;
use crate::model::{ModelConfig, SegModel, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scene::{self, Sample, SceneConfig};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop extent; samples larger than this are randomly cropped.
    pub crop: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Stop once validation IoU reaches this value.
    pub target_val_iou: Option<f64>,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 35,
            batch_size: 4,
            crop: 500,
            seed: 0,
            max_steps: None,
            target_val_iou: None,
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small-scene preset used by the synthetic benchmarks.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            crop: 64,
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.adam().validate().map_err(PipelineError::from)?;
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(PipelineError::Invalid("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Invalid("batch_size must be positive".into()));
        }
        if self.crop < 8 {
            return Err(PipelineError::Invalid(format!("crop {} is too small", self.crop)));
        }
        self.aug.validate()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Overall validation IoU after each epoch; `None` without val samples
    /// or when the class is absent everywhere.
    pub val_iou: Vec<Option<f64>>,
    pub steps: usize,
}

/// Moving average with the given window; shorter prefixes average what is
/// available.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0);
    let mut out = Vec::with_capacity(losses.len());
    for i in 0..losses.len() {
        let lo = i.saturating_sub(window - 1);
        let span = &losses[lo..=i];
        out.push(span.iter().sum::<f64>() / span.len() as f64);
    }
    out
}

/// Edge-replicate a [B,3,h,w] batch to [B,3,ph,pw].
fn pad_batch<T: Scalar>(batch: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let s = batch.shape();
    if (s.h, s.w) == (ph, pw) {
        return batch.clone();
    }
    let mut out = Tensor::zeros(Shape::new(s.b, s.c, ph, pw));
    let src = batch.data();
    let dst = out.data_mut();
    for b in 0..s.b {
        for c in 0..s.c {
            let sb = (b * s.c + c) * s.h * s.w;
            let db = (b * s.c + c) * ph * pw;
            for y in 0..ph {
                let sy = y.min(s.h - 1);
                for x in 0..pw {
                    let sx = x.min(s.w - 1);
                    dst[db + y * pw + x] = src[sb + sy * s.w + sx];
                }
            }
        }
    }
    out
}

/// Assemble one augmented batch: normalized image tensor and labels.
fn build_batch<T: Scalar>(
    samples: &[&Sample],
    crop: usize,
    aug: &AugConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Tensor<T>, Labels), PipelineError> {
    let b = samples.len();
    let mut batch = Tensor::<T>::zeros(Shape::new(b, 3, crop, crop));
    let mut label_data = Vec::with_capacity(b * crop * crop);
    for (i, s) in samples.iter().enumerate() {
        if s.image.h < crop || s.image.w < crop {
            return Err(PipelineError::Invalid(format!(
                "scene {}{} is {}x{}, smaller than the {crop}px crop",
                s.region, s.index, s.image.w, s.image.h
            )));
        }
        let y0 = if s.image.h > crop { rng.gen_range(0..=s.image.h - crop) } else { 0 };
        let x0 = if s.image.w > crop { rng.gen_range(0..=s.image.w - crop) } else { 0 };
        let img = s.image.crop(y0, x0, crop, crop);
        let mask = s.mask.crop(y0, x0, crop, crop);
        let d = augment::draw(aug, rng);
        let (tensor, mask) = augment::apply::<T>(d, &img, &mask);
        let plane = 3 * crop * crop;
        batch.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(tensor.data());
        label_data.extend_from_slice(&mask.data);
    }
    let labels = Labels::new(b, crop, crop, label_data)?;
    Ok((batch, labels))
}

/// Mean prediction quality of `model` over `samples`, pooled across regions.
pub fn evaluate<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample],
) -> Result<MetricAccumulator, PipelineError> {
    let mut acc = MetricAccumulator::new();
    for s in samples {
        let (_, mask) = infer::predict(model, &s.image)?;
        acc.accumulate(&s.region, &mask, &s.mask)?;
    }
    Ok(acc)
}

/// Run the optimization loop. Identical inputs produce identical logs and
/// identical final weights.
pub fn train<T: Scalar>(
    model: &mut SegModel<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog, PipelineError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PipelineError::Invalid("empty training set".into()));
    }
    let unit = model.extent_multiple();
    let padded = cfg.crop.div_ceil(unit) * unit;
    let mut opt = Adam::new(cfg.adam())?;
    let mut log = TrainLog::default();
    let epoch_tag = rng::derive_str(cfg.seed, "epoch");
    let max_epochs = if cfg.max_steps.is_some() { usize::MAX } else { cfg.epochs };

    'outer: for epoch in 0..max_epochs {
        let mut r = rng::stream(cfg.seed, &[epoch_tag, epoch as u64]);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut r);
        let mut epoch_losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (batch, labels) = build_batch::<T>(&picked, cfg.crop, &cfg.aug, &mut r)?;
            let mut step = || -> Result<f64, PipelineError> {
                let mut g = Graph::new();
                let x = g.leaf(pad_batch(&batch, padded, padded));
                let out = model.forward(&mut g, x, Phase::train())?;
                let logits = if padded != cfg.crop {
                    g.crop_hw(out.logits, 0, 0, cfg.crop, cfg.crop)?
                } else {
                    out.logits
                };
                let loss = g.cross_entropy(logits, &labels)?;
                let value = g.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(PipelineError::Training(format!("non-finite loss {value}")));
                }
                g.backward(loss)?;
                opt.step(model, &g)?;
                Ok(value)
            };
            let value = step().map_err(|e| {
                PipelineError::Training(format!(
                    "epoch {epoch}, batch {bi} (step {}): {e}",
                    log.steps
                ))
            })?;
            log.step_losses.push(value);
            epoch_losses.push(value);
            log.steps += 1;
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                log.epoch_losses
                    .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
                break 'outer;
            }
        }
        log.epoch_losses
            .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
        if !val_set.is_empty() {
            let iou = evaluate(model, val_set)?.overall_iou();
            log.val_iou.push(iou);
            log::info!(
                "epoch {epoch}: loss {:.4}, val IoU {}",
                log.epoch_losses.last().unwrap(),
                iou.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            if let (Some(target), Some(v)) = (cfg.target_val_iou, iou) {
                if v >= target {
                    break;
                }
            }
        } else {
            log.val_iou.push(None);
        }
    }
    Ok(log)
}

pub struct OverfitOutcome {
    pub log: TrainLog,
    pub final_iou: f64,
}

/// Criterion-style overfit run: 8 synthetic 64x64 scenes, Adam at 1e-3,
/// early exit once training IoU crosses `target`.
pub fn overfit_demo(
    variant: Variant,
    seed: u64,
    max_steps: usize,
    target: f64,
) -> Result<OverfitOutcome, PipelineError> {
    let scene_cfg = SceneConfig::default();
    let mut scenes = Vec::new();
    for index in 1..=8 {
        // Sparse scenes: logits sit on a quarter-resolution grid, so IoU is
        // boundary-limited and favors the preset with the largest structures.
        scenes.push(scene::generate_scene(seed, "sparse", index, &scene_cfg)?);
    }
    let mut model = SegModel::<f32>::new(ModelConfig {
        variant,
        init_seed: seed,
        ..ModelConfig::default()
    })?;
    let cfg = TrainConfig {
        max_steps: Some(max_steps),
        target_val_iou: Some(target),
        seed,
        // Full batch: the exact gradient of the memorization objective, and
        // stationary batch-norm statistics so eval-phase forwards match.
        batch_size: scenes.len(),
        // No augmentation: memorization is the point, and every geometric
        // variant would be one more target to memorize.
        aug: AugConfig {
            rot90: false,
            hflip: false,
            vflip: false,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
        },
        ..TrainConfig::toy()
    };
    let log = train(&mut model, &scenes, &scenes, &cfg)?;
    let final_iou = evaluate(&model, &scenes)?.overall_iou().unwrap_or(0.0);
    Ok(OverfitOutcome { log, final_iou })
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub dataset_seed: u64,
    pub scenes_per_region: usize,
    pub train_seeds: Vec<u64>,
    pub scene: SceneConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dataset_seed: 104729,
            scenes_per_region: 36,
            train_seeds: vec![1, 2, 3],
            scene: SceneConfig::default(),
            epochs: 6,
            lr: 1e-3,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed_iou: Vec<f64>,
    pub mean_iou: f64,
    pub mean_acc: f64,
}

/// Generate the benchmark in memory, split scenes 1-5 of each region off for
/// validation, and train every variant with every seed.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRow>, PipelineError> {
    if cfg.scenes_per_region <= 5 {
        return Err(PipelineError::Invalid(
            "need more than 5 scenes per region so a training split remains".into(),
        ));
    }
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for region in cfg.scene.region_names() {
        for index in 1..=cfg.scenes_per_region {
            let s = scene::generate_scene(cfg.dataset_seed, &region, index, &cfg.scene)?;
            if scene::is_validation(index) {
                val_set.push(s);
            } else {
                train_set.push(s);
            }
        }
    }
    let mut rows = Vec::new();
    for variant in [Variant::Baseline, Variant::Sa, Variant::Cpa] {
        let mut per_seed_iou = Vec::new();
        let mut accs = Vec::new();
        for &seed in &cfg.train_seeds {
            let mut model = SegModel::<f32>::new(ModelConfig {
                variant,
                init_seed: seed,
                ..ModelConfig::default()
            })?;
            let tc = TrainConfig {
                lr: cfg.lr,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                crop: cfg.scene.extent,
                seed,
                ..TrainConfig::toy()
            };
            train(&mut model, &train_set, &[], &tc)?;
            let metrics = evaluate(&model, &val_set)?;
            per_seed_iou.push(metrics.overall_iou().unwrap_or(0.0));
            accs.push(metrics.overall_accuracy().unwrap_or(0.0));
            log::info!(
                "ablation {variant} seed {seed}: IoU {:.4}",
                per_seed_iou.last().unwrap()
            );
        }
        let mean_iou = per_seed_iou.iter().sum::<f64>() / per_seed_iou.len() as f64;
        let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(AblationRow {
            variant,
            per_seed_iou,
            mean_iou,
            mean_acc,
        });
    }
    Ok(rows)
}

/// Fixed-column ablation table, IoU/accuracy in percent.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>9} {:>9}  per-seed IoU", "variant", "IoU%", "Acc%");
    for r in rows {
        let seeds: Vec<String> = r.per_seed_iou.iter().map(|v| format!("{:.2}", v * 100.0)).collect();
        let _ = writeln!(
            out,
            "{:<10} {:>9.2} {:>9.2}  [{}]",
            r.variant.to_string(),
            r.mean_iou * 100.0,
            r.mean_acc * 100.0,
            seeds.join(", ")
        );
    }
    out
}

/// Tiny deterministic fingerprint of a loss curve, for determinism checks.
pub fn curve_fingerprint(losses: &[f64]) -> u64 {
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for &v in losses {
        acc ^= v.to_bits();
        acc = acc.wrapping_mul(0x1000_0000_01b3);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenes(n: usize) -> Vec<Sample> {
        let cfg = SceneConfig::default();
        (1..=n).map(|i| scene::generate_scene(61, "dense", i, &cfg).unwrap()).collect()
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            max_steps: Some(steps),
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn loss_curve_is_bit_deterministic() {
        let scenes = tiny_scenes(4);
        let run = || {
            let mut model = SegModel::<f32>::new(ModelConfig {
                variant: Variant::Cpa,
                init_seed: 3,
                ..ModelConfig::default()
            })
            .unwrap();
            train(&mut model, &scenes, &[], &tiny_cfg(4)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(curve_fingerprint(&a.step_losses), curve_fingerprint(&b.step_losses));
    }

    #[test]
    fn zero_lr_keeps_weights_and_loss_flat() {
        let scenes = tiny_scenes(2);
        let mut model = SegModel::<f32>::new(ModelConfig {
            variant: Variant::Baseline,
            init_seed: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        let before: Vec<f32> = {
            use crate::layers::{Module, Slot};
            let mut v = Vec::new();
            model.for_each(&mut |_, s| {
                if let Slot::Trainable(p) = s {
                    v.extend_from_slice(p.value.data());
                }
            });
            v
        };
        let cfg = TrainConfig {
            lr: 0.0,
            aug: AugConfig::none(),
            ..tiny_cfg(3)
        };
        train(&mut model, &scenes, &[], &cfg).unwrap();
        let after: Vec<f32> = {
            use crate::layers::{Module, Slot};
            let mut v = Vec::new();
            model.for_each(&mut |_, s| {
                if let Slot::Trainable(p) = s {
                    v.extend_from_slice(p.value.data());
                }
            });
            v
        };
        assert_eq!(before, after);
    }

    #[test]
    fn max_steps_cuts_the_run_short() {
        let scenes = tiny_scenes(4);
        let mut model = SegModel::<f32>::new(ModelConfig {
            variant: Variant::Baseline,
            init_seed: 6,
            ..ModelConfig::default()
        })
        .unwrap();
        let log = train(&mut model, &scenes, &[], &tiny_cfg(3)).unwrap();
        assert_eq!(log.steps, 3);
        assert_eq!(log.step_losses.len(), 3);
    }

    #[test]
    fn validation_iou_is_recorded_per_epoch() {
        let scenes = tiny_scenes(3);
        let mut model = SegModel::<f32>::new(ModelConfig {
            variant: Variant::Baseline,
            init_seed: 7,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            max_steps: None,
            ..TrainConfig::toy()
        };
        let log = train(&mut model, &scenes[..2], &scenes[2..], &cfg).unwrap();
        assert_eq!(log.val_iou.len(), 2);
        assert!(log.val_iou.iter().all(|v| v.is_some()));
    }

    #[test]
    fn undersized_scene_is_rejected() {
        let scenes = tiny_scenes(1);
        let mut model = SegModel::<f32>::new(ModelConfig {
            variant: Variant::Baseline,
            init_seed: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            crop: 128, // scenes are 64
            ..tiny_cfg(1)
        };
        let err = train(&mut model, &scenes, &[], &cfg).unwrap_err();
        assert!(err.to_string().contains("smaller"), "{err}");
    }

    #[test]
    fn smoothing_averages_windows() {
        let s = smoothed(&[4.0, 2.0, 6.0, 0.0], 2);
        assert_eq!(s, vec![4.0, 3.0, 4.0, 3.0]);
        let s10 = smoothed(&[1.0; 30], 10);
        assert!(s10.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn padding_path_trains_on_non_multiple_crops() {
        // 48 is not a multiple of 32: exercises pad + logits crop.
        let cfg = SceneConfig {
            extent: 48,
            ..SceneConfig::default()
        };
        let scenes: Vec<Sample> = (1..=2)
            .map(|i| scene::generate_scene(62, "dense", i, &cfg).unwrap())
            .collect();
        let mut model = SegModel::<f32>::new(ModelConfig {
            variant: Variant::Baseline,
            init_seed: 9,
            ..ModelConfig::default()
        })
        .unwrap();
        let tc = TrainConfig {
            crop: 48,
            batch_size: 2,
            max_steps: Some(2),
            epochs: 1,
            ..TrainConfig::toy()
        };
        let log = train(&mut model, &scenes, &[], &tc).unwrap();
        assert_eq!(log.steps, 2);
        assert!(log.step_losses.iter().all(|v| v.is_finite()));
    }
}
