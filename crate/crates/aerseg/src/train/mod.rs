//! Training: configuration, the epoch loop (seeded shuffling, batched
//! gradient averaging, AdamW with polynomial decay), early stopping on
//! validation loss, and best-checkpoint tracking by validation mIoU.

pub mod augment;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{self, GraphBuilder, ModelConfig, WeightStore};
use crate::tensor::Tensor;
use crate::train::augment::{AugmentConfig, Augmenter};
use crate::types::{ClassMask, PlaneImage, IGNORE_INDEX};

/// Optimization and schedule hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without a validation-loss improvement tolerated
    /// before stopping.
    pub patience: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Weight of the Dice term relative to cross entropy.
    pub dice_weight: f32,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            max_epochs: 100,
            patience: 20,
            lr_init: 1e-4,
            lr_final: 1e-7,
            poly_power: 1.0,
            weight_decay: 0.01,
            dice_weight: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_final >= 0.0) || self.lr_final > self.lr_init {
            return Err(Error::InvalidConfig(format!(
                "learning rates must satisfy 0 <= lr_final <= lr_init, got {} .. {}",
                self.lr_final, self.lr_init
            )));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::InvalidConfig("poly_power must be positive".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.dice_weight < 0.0 || !self.dice_weight.is_finite() {
            return Err(Error::InvalidConfig("dice_weight must be >= 0".into()));
        }
        self.augment.validate()
    }
}

/// One training or validation tile: RGB in [0,1] plus its index mask.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: PlaneImage,
    pub mask: ClassMask,
}

/// Early-stopping bookkeeping over validation loss. Lower is better; a NaN
/// loss never counts as an improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopState {
    pub best_loss: f64,
    /// 1-based epoch of the best loss; 0 before any epoch.
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    epochs_seen: usize,
}

impl EarlyStopState {
    pub fn new() -> Self {
        EarlyStopState {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            epochs_seen: 0,
        }
    }

    /// Record one epoch's validation loss; returns true when training should
    /// stop (the streak of non-improving epochs has exhausted the patience).
    pub fn update(&mut self, val_loss: f64, patience: usize) -> bool {
        self.epochs_seen += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs_seen;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= patience.max(1)
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of the training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation mIoU.
    pub best_weights: WeightStore<f32>,
    /// Weights after the final epoch.
    pub final_weights: WeightStore<f32>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// splitmix64: cheap derivation of independent sub-seeds from the run seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_sample(s: &TrainSample, num_classes: usize) -> Result<()> {
    let (h, w) = (s.image.height, s.image.width);
    if s.image.channels != 3 {
        return Err(Error::ShapeMismatch(format!("sample has {} channels", s.image.channels)));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Dimension {
            axis: if w % 32 != 0 { 'x' } else { 'y' },
            message: format!("training tile {w}x{h} sides must be multiples of 32"),
        });
    }
    if s.mask.width != w || s.mask.height != h {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {w}x{h}",
            s.mask.width, s.mask.height
        )));
    }
    for (i, &v) in s.mask.data().iter().enumerate() {
        if v != IGNORE_INDEX && v as usize >= num_classes {
            return Err(Error::MaskEncode {
                index: v,
                x: i % w,
                y: i / w,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Forward + backward for one standardized sample; returns the scalar loss
/// and gradients keyed by tensor name.
fn sample_grads(
    model_cfg: &ModelConfig,
    store: &WeightStore<f32>,
    image: &PlaneImage,
    mask: &ClassMask,
    dice_weight: f32,
    droppath_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let (h, w) = (image.height, image.width);
    let input = Tensor::new(vec![h * w, 3], image.data().to_vec());
    let mut gb: GraphBuilder<f32> = GraphBuilder::new(store);
    if model_cfg.drop_path_rate > 0.0 {
        gb = gb.with_droppath(model_cfg.drop_path_rate, droppath_seed);
    }
    let (logits_var, _) = gb.forward(model_cfg, input, h, w)?;
    let logits = gb.tape.value(logits_var).clone();
    if !logits.is_finite() {
        return Err(Error::NonFinite("forward logits".into()));
    }
    let (loss_val, grad) = loss::hybrid_loss(&logits, mask, dice_weight)?;
    let mut grads = gb.tape.backward(logits_var, grad);
    let mut by_name = BTreeMap::new();
    for (name, &var) in gb.weight_vars() {
        if let Some(g) = grads.take(var) {
            by_name.insert(name.clone(), g);
        }
    }
    Ok((loss_val as f64, by_name))
}

/// Validation pass: standardized forward, hybrid loss and confusion counts.
fn validate_epoch(
    model_cfg: &ModelConfig,
    store: &WeightStore<f32>,
    val: &[TrainSample],
    aug_cfg: &AugmentConfig,
    dice_weight: f32,
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, ConfusionMatrix)>> = val
        .par_iter()
        .map(|s| {
            let img = augment::normalize(&s.image, aug_cfg.mean, aug_cfg.std)?;
            let logits = model::forward(&img, model_cfg, store)?;
            let tensor = Tensor::new(
                vec![logits.width * logits.height, logits.classes],
                logits.data().to_vec(),
            );
            let (l, _) = loss::hybrid_loss(&tensor, &s.mask, dice_weight)?;
            let pred = crate::infer::argmax_decode(&logits)?;
            let mut cm = ConfusionMatrix::new(model_cfg.num_classes);
            cm.accumulate(&s.mask, &pred)?;
            Ok((l as f64, cm))
        })
        .collect();
    let mut total_loss = 0.0;
    let mut cm = ConfusionMatrix::new(model_cfg.num_classes);
    for r in results {
        let (l, part) = r?;
        total_loss += l;
        cm.merge(&part)?;
    }
    Ok((total_loss / val.len() as f64, cm.mean_iou()?))
}

/// Full training run. `on_epoch` is called after every epoch with the fresh
/// history row (so callers can persist progress incrementally); returning
/// `Ok(false)` requests a clean external stop.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<bool>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set".into()));
    }
    for s in train.iter().chain(val) {
        check_sample(s, model_cfg.num_classes)?;
    }

    let mut store = model::init_weights(model_cfg, sub_seed(train_cfg.seed, 1));
    let augmenter = Augmenter::new(train_cfg.augment.clone(), sub_seed(train_cfg.seed, 2))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(train_cfg.seed, 3));

    let n = train.len();
    let batches_per_epoch = n.div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.max_epochs * batches_per_epoch;
    let mut opt = optim::AdamW::new(train_cfg.weight_decay);
    let mut stopper = EarlyStopState::new();
    let mut history = Vec::new();
    let mut best_weights = store.clone();
    let mut best_epoch = 0usize;
    let mut best_miou = f64::NEG_INFINITY;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 1..=train_cfg.max_epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(train_cfg.batch_size) {
            let lr = optim::poly_lr(
                global_step,
                total_steps,
                train_cfg.lr_init,
                train_cfg.lr_final,
                train_cfg.poly_power,
            )?;
            let per_sample: Vec<Result<(f64, BTreeMap<String, Tensor<f32>>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let draw = (epoch as u64 - 1) * n as u64 + idx as u64;
                    let (img, msk) = augmenter.apply(draw, &train[idx].image, &train[idx].mask)?;
                    sample_grads(
                        model_cfg,
                        &store,
                        &img,
                        &msk,
                        train_cfg.dice_weight,
                        sub_seed(train_cfg.seed, 4 ^ draw.wrapping_mul(2).wrapping_add(9)),
                    )
                })
                .collect();
            // deterministic reduction: fixed batch order, then mean
            let mut batch_grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let m = batch.len();
            for r in per_sample {
                let (l, grads) = r?;
                batch_loss += l;
                for (name, g) in grads {
                    match batch_grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            batch_grads.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / m as f32;
            for g in batch_grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            epoch_loss += batch_loss;
            opt.step(&mut store, &batch_grads, lr)?;
            global_step += 1;
        }
        let train_loss = epoch_loss / n as f64;

        let (val_loss, val_miou) =
            validate_epoch(model_cfg, &store, val, &train_cfg.augment, train_cfg.dice_weight)?;
        if !val_miou.is_nan() && val_miou > best_miou {
            best_miou = val_miou;
            best_epoch = epoch;
            best_weights = store.clone();
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_miou,
            lr: optim::poly_lr(
                global_step.saturating_sub(1),
                total_steps,
                train_cfg.lr_init,
                train_cfg.lr_final,
                train_cfg.poly_power,
            )?,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let keep_going = on_epoch(&record)?;
        history.push(record);
        if stopper.update(val_loss, train_cfg.patience) && epoch < train_cfg.max_epochs {
            stopped_early = true;
            break;
        }
        if !keep_going {
            break;
        }
    }

    Ok(TrainOutcome {
        best_weights,
        final_weights: store,
        best_epoch,
        best_val_miou: best_miou,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_config, ModelVariant};

    #[test]
    fn early_stop_patience_window() {
        // losses 1.0, 0.9, then flat at 0.9: stops after patience more epochs
        let mut s = EarlyStopState::new();
        assert!(!s.update(1.0, 20));
        assert!(!s.update(0.9, 20));
        for i in 0..19 {
            assert!(!s.update(0.9, 20), "stopped early at flat epoch {i}");
        }
        assert!(s.update(0.9, 20));
        assert_eq!(s.best_epoch, 2);
        assert_eq!(s.epochs_since_improvement, 20);
    }

    #[test]
    fn early_stop_zero_patience() {
        let mut s = EarlyStopState::new();
        assert!(!s.update(1.0, 0)); // first epoch improves over +inf
        assert!(s.update(1.0, 0)); // first non-improving epoch stops
    }

    #[test]
    fn early_stop_nan_never_improves() {
        let mut s = EarlyStopState::new();
        assert!(!s.update(f64::NAN, 2));
        assert_eq!(s.best_epoch, 0);
        assert!(s.best_loss.is_infinite());
        // the second NaN exhausts a patience of 2
        assert!(s.update(f64::NAN, 2));
    }

    #[test]
    fn early_stop_counter_resets_on_improvement() {
        let mut s = EarlyStopState::new();
        assert!(!s.update(1.0, 2));
        assert!(!s.update(1.1, 2));
        assert!(!s.update(0.5, 2));
        assert_eq!(s.epochs_since_improvement, 0);
        assert!(!s.update(0.6, 2));
        assert!(s.update(0.6, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.lr_final = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.dice_weight = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_fields() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.batch_size, cfg.batch_size);
        assert!(serde_json::from_str::<TrainConfig>("{\"btach_size\": 2}").is_err());
    }

    fn blob_samples(count: usize, seed: u64) -> Vec<TrainSample> {
        // synthetic two-class tiles: a bright square blob on dark background
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let (w, h) = (32, 32);
                let bx = rng.gen_range(4..20);
                let by = rng.gen_range(4..20);
                let bw = rng.gen_range(6..12);
                let bh = rng.gen_range(6..12);
                let mut img = PlaneImage::zeros(w, h, 3);
                let mut mask = ClassMask::filled(w, h, 0);
                for y in 0..h {
                    for x in 0..w {
                        let inside = x >= bx && x < bx + bw && y >= by && y < by + bh;
                        let base = if inside { 0.8 } else { 0.2 };
                        for c in 0..3 {
                            img.set(x, y, c, base + rng.gen_range(-0.05..0.05));
                        }
                        if inside {
                            mask.data_mut()[y * w + x] = 1;
                        }
                    }
                }
                TrainSample { image: img, mask }
            })
            .collect()
    }

    #[test]
    fn train_loop_runs_and_is_deterministic() {
        let model_cfg = make_config(ModelVariant::Tiny, 2);
        let mut cfg = TrainConfig::default();
        cfg.max_epochs = 2;
        cfg.batch_size = 4;
        cfg.lr_init = 1e-3;
        cfg.lr_final = 1e-5;
        cfg.seed = 7;
        let train = blob_samples(8, 1);
        let val = blob_samples(4, 2);
        let run = |seed: u64| {
            let mut c = cfg.clone();
            c.seed = seed;
            train_loop(&model_cfg, &c, &train, &val, |_| Ok(true)).unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history[0].epoch, 1);
        assert_eq!(a.history[0].train_loss, b.history[0].train_loss);
        assert_eq!(a.history[1].val_loss, b.history[1].val_loss);
        assert_eq!(a.final_weights, b.final_weights);
        assert!(a.history.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        // a different seed takes a different trajectory
        let c = run(8);
        assert_ne!(a.history[0].train_loss, c.history[0].train_loss);
    }

    #[test]
    fn train_loop_rejects_bad_tiles() {
        let model_cfg = make_config(ModelVariant::Tiny, 2);
        let cfg = TrainConfig::default();
        let bad = vec![TrainSample {
            image: PlaneImage::zeros(33, 32, 3),
            mask: ClassMask::filled(33, 32, 0),
        }];
        let val = blob_samples(1, 3);
        assert!(train_loop(&model_cfg, &cfg, &bad, &val, |_| Ok(true)).is_err());
        assert!(train_loop(&model_cfg, &cfg, &[], &val, |_| Ok(true)).is_err());
    }

    #[test]
    fn external_stop_is_honored() {
        let model_cfg = make_config(ModelVariant::Tiny, 2);
        let mut cfg = TrainConfig::default();
        cfg.max_epochs = 5;
        cfg.batch_size = 4;
        let train = blob_samples(4, 1);
        let val = blob_samples(2, 2);
        let out = train_loop(&model_cfg, &cfg, &train, &val, |r| Ok(r.epoch < 2)).unwrap();
        assert_eq!(out.history.len(), 2);
    }
}
