use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ohem_ce;
use crate::autodiff::{grad_check, Buffer, GradCheckReport, Labels, Shape, Tensor};
use crate::error::Result;
use crate::ldcs::KernelSet;
use crate::rfcnet::{RfcConfig, RfcModel, INPUT_CHANNELS};

/// Finite-difference check of every parameter of a full model under the
/// hard-pixel loss, at 64-bit.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    /// One report per named parameter tensor.
    pub per_param: Vec<(String, GradCheckReport)>,
}

impl ModelGradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|(_, r)| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, GradCheckReport)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.per_param.iter().map(|(_, r)| r.checked).sum()
    }
}

/// Builds `config` in f64, draws an `h×w` input and random labels from
/// `seed`, and checks all parameter gradients with central differences of
/// step `eps`. OHEM uses threshold 0.7 and keeps at least 1/16 of pixels.
pub fn check_model_gradients(
    config: &RfcConfig,
    h: usize,
    w: usize,
    eps: f64,
) -> Result<ModelGradCheck> {
    let model = RfcModel::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = Tensor::constant(Buffer::from_fn(
        Shape::new(1, INPUT_CHANNELS, h, w),
        |_, _, _, _| rng.gen_range(0.0..1.0),
    ));
    let labels = Labels::new(
        1,
        h,
        w,
        (0..h * w)
            .map(|_| rng.gen_range(0..config.num_classes))
            .collect(),
    )?;
    let min_kept = (h * w / 16).max(1);
    let loss = |_: &Tensor<f64>| -> Result<Tensor<f64>> {
        let logits = model.forward(&x)?;
        Ok(ohem_ce(&logits, &labels, 0.7, min_kept)?.loss)
    };
    let mut per_param = Vec::new();
    for (name, p) in model.parameters() {
        per_param.push((name, grad_check(loss, &p, eps)?));
    }
    Ok(ModelGradCheck { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfcnet::Preset;

    #[test]
    fn tiny_model_gradients() {
        let cfg = RfcConfig::preset(Preset::D).with_width(2).with_depth(2);
        let report = check_model_gradients(&cfg, 8, 8, 1e-4).unwrap();
        assert_eq!(
            report.checked() as u64,
            RfcModel::<f64>::build(&cfg).unwrap().num_params(true)
        );
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }
}
