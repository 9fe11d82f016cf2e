//! Optimization: hard-pixel cross-entropy, SGD with momentum and weight
//! decay, a step learning-rate schedule, mIoU, and the epoch loop.

mod gradcheck;
mod loss;
mod metrics;
mod optim;

pub use gradcheck::{check_model_gradients, ModelGradCheck};
pub use loss::{ohem_ce, OhemLoss};
pub use metrics::{miou, ConfusionMatrix, MiouAccumulator, MiouMode};
pub use optim::{sgd_step, step_lr, SgdState};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{crop, stack_batch, Buffer, Element, Labels, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ldcs::KernelSet;
use crate::rfcnet::RfcModel;

/// Per-dataset schedules and input sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Kvasir,
    Glas,
    Cvc,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Kvasir, Profile::Glas, Profile::Cvc];

    /// Input `(h, w)` images are resized to.
    pub fn resize(self) -> (usize, usize) {
        match self {
            Profile::Kvasir => (200, 200),
            Profile::Glas => (300, 300),
            Profile::Cvc => (200, 300),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kvasir" => Ok(Profile::Kvasir),
            "glas" => Ok(Profile::Glas),
            "cvc" | "cvc-clinicdb" => Ok(Profile::Cvc),
            _ => Err(Error::arg(format!(
                "unknown profile {s:?}, expected kvasir, glas or cvc"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Kvasir => "kvasir",
            Profile::Glas => "glas",
            Profile::Cvc => "cvc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ohem_threshold: f64,
    /// Minimum kept pixels as a fraction of the pixels in a batch.
    pub ohem_min_kept: f64,
    pub miou_mode: MiouMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile(Profile::Kvasir)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let (batch_size, epochs, step_size) = match p {
            Profile::Kvasir => (4, 160, 45),
            Profile::Glas => (2, 500, 60),
            Profile::Cvc => (3, 160, 45),
        };
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            step_size,
            gamma: 0.1,
            epochs,
            batch_size,
            ohem_threshold: 0.7,
            ohem_min_kept: 1.0 / 16.0,
            miou_mode: MiouMode::Pooled,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::arg(format!("invalid TrainConfig: {what}")));
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return bad(format!(
                "ohem_threshold = {} not in (0, 1]",
                self.ohem_threshold
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} not in (0, 1]", self.gamma));
        }
        if !(self.ohem_min_kept > 0.0 && self.ohem_min_kept <= 1.0) {
            return bad(format!(
                "ohem_min_kept = {} not in (0, 1]",
                self.ohem_min_kept
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_size == 0 {
            return bad(format!(
                "epochs, batch_size and step_size must be positive, got {}, {}, {}",
                self.epochs, self.batch_size, self.step_size
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr = {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay = {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(epoch, self.base_lr, self.step_size, self.gamma)
    }

    pub fn min_kept(&self, batch_pixels: usize) -> usize {
        ((batch_pixels as f64 * self.ohem_min_kept).floor() as usize).max(1)
    }
}

/// One finished epoch. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_miou: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>4}  lr {:.6}  loss {:.6}  val_miou {:.4}",
            self.epoch, self.lr, self.mean_loss, self.val_miou
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// First epoch reaching the best validation mIoU of the run.
    pub converged_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_val_miou(&self) -> Option<f64> {
        self.converged_epoch.map(|e| self.epochs[e - 1].val_miou)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss,val_miou\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.lr, r.mean_loss, r.val_miou
            ));
        }
        s
    }
}

/// History plus the parameters from the best validation epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub history: TrainHistory,
    pub best_state: Vec<Buffer<T>>,
}

fn image_tensor<T: Element>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let images: Vec<&Buffer<f32>> = samples.iter().map(|s| &s.image).collect();
    Ok(Tensor::constant(stack_batch(&images)?.cast()))
}

/// Crops network output back to the masks' extent when inputs were padded.
fn crop_to_masks<T: Element>(logits: Tensor<T>, samples: &[&Sample]) -> Result<Tensor<T>> {
    let (mh, mw) = (samples[0].mask.h, samples[0].mask.w);
    if samples.iter().any(|s| (s.mask.h, s.mask.w) != (mh, mw)) {
        return Err(Error::dim("masks in one batch must share a size"));
    }
    let s = logits.shape();
    if (s.h, s.w) == (mh, mw) {
        Ok(logits)
    } else {
        crop(&logits, 0, 0, mh, mw)
    }
}

/// Per-pixel argmax over channels, as `(n, h, w)` labels.
pub fn argmax_labels<T: Element>(logits: &Buffer<T>) -> Labels {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * plane + p] > d[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Labels::new(s.n, s.h, s.w, out).expect("sizes agree")
}

/// Predicted class mask for one sample, at the sample's mask size.
pub fn predict<T: Element>(model: &RfcModel<T>, sample: &Sample) -> Result<Labels> {
    let x = image_tensor::<T>(&[sample])?;
    let logits = crop_to_masks(model.forward(&x)?, &[sample])?;
    let labels = argmax_labels(&logits.value());
    Ok(labels)
}

/// Dataset mIoU under `mode`.
pub fn evaluate<T: Element>(
    model: &RfcModel<T>,
    samples: &[Sample],
    mode: MiouMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("evaluate: empty dataset"));
    }
    let mut acc = MiouAccumulator::new(model.config.num_classes, mode);
    for s in samples {
        acc.add(&predict(model, s)?, &s.mask)?;
    }
    Ok(acc.value())
}

/// Shuffled mini-batch training with hard-pixel cross-entropy and SGD,
/// validating after every epoch.
///
/// The model ends with its final-epoch weights; the best-validation weights
/// are returned separately. `on_epoch` sees each record as it completes.
pub fn train_loop<T: Element>(
    model: &RfcModel<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg(format!(
            "train_loop needs non-empty datasets, got {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::arg(format!(
            "batch_size {} exceeds {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let params: Vec<Tensor<T>> = model.parameters().into_iter().map(|(_, p)| p).collect();
    for p in &params {
        p.zero_grad();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = SgdState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best_state = model.state();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let x = image_tensor::<T>(&batch)?;
            let logits = crop_to_masks(model.forward(&x)?, &batch)?;
            let target = Labels::stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
            let out = ohem_ce(
                &logits,
                &target,
                cfg.ohem_threshold,
                cfg.min_kept(target.len()),
            )?;
            let loss = out.loss.item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss,
                });
            }
            out.loss.backward()?;
            sgd_step(&params, &mut sgd, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss;
            batches += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            mean_loss: loss_sum / batches as f64,
            val_miou: evaluate(model, val, cfg.miou_mode)?,
        };
        if history
            .best_val_miou()
            .is_none_or(|best| record.val_miou > best)
        {
            history.converged_epoch = Some(record.epoch);
            best_state = model.state();
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        history,
        best_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::rfcnet::{Preset, RfcConfig};

    fn tiny_model() -> RfcModel<f32> {
        RfcModel::build(&RfcConfig::preset(Preset::D).with_width(2).with_depth(1)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for p in Profile::ALL {
            assert!(TrainConfig::profile(p).validate().is_ok());
        }
        let bad = [
            TrainConfig {
                ohem_threshold: 0.0,
                ..Default::default()
            },
            TrainConfig {
                ohem_threshold: 1.5,
                ..Default::default()
            },
            TrainConfig {
                gamma: 0.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(TrainConfig::profile(Profile::Glas).step_size, 60);
        assert_eq!(Profile::Cvc.resize(), (200, 300));
        assert_eq!("GlaS".parse::<Profile>().unwrap(), Profile::Glas);
    }

    #[test]
    fn zero_lr_epoch_keeps_weights() {
        let model = tiny_model();
        let before = model.state();
        let data = gen_synthetic(2, 32, 32, 3).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.0,
            epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        let mut seen = 0;
        let out = train_loop(&model, &data[..1], &data[1..], &cfg, |_| seen += 1).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(seen, 1);
        assert_eq!(model.state(), before);
        assert_eq!(out.history.converged_epoch, Some(1));
        assert!(out
            .history
            .to_csv()
            .starts_with("epoch,lr,mean_loss,val_miou\n1,0,"));
    }

    #[test]
    fn loop_preconditions() {
        let model = tiny_model();
        let data = gen_synthetic(2, 32, 32, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        assert!(train_loop(&model, &data[..1], &data[1..], &cfg, |_| {}).is_err());
        assert!(train_loop(&model, &data, &[], &cfg, |_| {}).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let model = tiny_model();
        model.head.weight.value_mut().data_mut()[0] = f32::NAN;
        let data = gen_synthetic(2, 32, 32, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        match train_loop(&model, &data[..1], &data[1..], &cfg, |_| {}) {
            Err(Error::Divergence {
                epoch: 1,
                batch: 1,
                loss,
            }) => assert!(loss.is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let b = Buffer::from_vec(
            crate::autodiff::Shape::new(1, 2, 1, 3),
            vec![1.0f32, 0.0, 2.0, 1.0, 3.0, 2.0],
        )
        .unwrap();
        assert_eq!(argmax_labels(&b).data(), &[0, 1, 0]);
    }
}
