use super::{RfcConfig, RfcModel, INPUT_CHANNELS};
use crate::autodiff::{weighted_sum, Buffer, Element, Shape, Tensor};
use crate::error::{Error, Result};
use crate::ldcs::KernelSet;

/// `(kernel, stride)` of the stem: conv3, pool2, conv3, pool2.
pub const STEM_LAYERS: [(usize, usize); 4] = [(3, 1), (2, 2), (3, 1), (2, 2)];

/// One root-to-leaf path through the tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChainDescriptor {
    pub leaf_index: usize,
    /// Strong kernel sizes from the first tree level down to the leaf.
    pub kernel_sequence: Vec<usize>,
}

impl ChainDescriptor {
    /// Decodes `leaf_index` in base `m`, most significant digit first.
    pub fn for_leaf(config: &RfcConfig, leaf_index: usize) -> Result<Self> {
        if leaf_index >= config.leaf_count() {
            return Err(Error::arg(format!(
                "leaf {leaf_index} out of range for {} leaves",
                config.leaf_count()
            )));
        }
        let mut digits = Vec::with_capacity(config.depth);
        let mut rest = leaf_index;
        for _ in 0..config.depth {
            digits.push(config.kernels[rest % config.m]);
            rest /= config.m;
        }
        digits.reverse();
        Ok(ChainDescriptor {
            leaf_index,
            kernel_sequence: digits,
        })
    }
}

/// All `m^depth` chains ordered by leaf index.
pub fn enumerate_chains(config: &RfcConfig) -> Vec<ChainDescriptor> {
    (0..config.leaf_count())
        .map(|leaf| ChainDescriptor::for_leaf(config, leaf).expect("leaf in range"))
        .collect()
}

/// Theoretical receptive field of a stack of `(kernel, stride)` layers:
/// `rf += (k-1)·jump; jump *= stride`.
pub fn receptive_field_of(layers: impl IntoIterator<Item = (usize, usize)>) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for (k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Strong-path receptive field of a chain behind the fixed stem.
/// Equals `10 + 4·Σ(k_t − 1)`.
pub fn receptive_field(chain: &ChainDescriptor) -> usize {
    receptive_field_of(
        STEM_LAYERS
            .iter()
            .copied()
            .chain(chain.kernel_sequence.iter().map(|&k| (k, 1))),
    )
}

/// Inclusive input-pixel interval covered by tree position `pos` along one
/// axis, before clamping to the image.
pub fn rf_interval(chain: &ChainDescriptor, pos: usize) -> (i64, i64) {
    let halo: i64 = chain
        .kernel_sequence
        .iter()
        .map(|&k| (k as i64 - 1) / 2)
        .sum();
    let p = pos as i64;
    (4 * (p - halo) - 3, 4 * (p + halo) + 6)
}

/// Weight pattern used by [`RfcModel::set_probe_weights`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeWiring {
    /// Loose kernels zeroed: each leaf sees only its own strong chain.
    StrongOnly,
    /// Loose kernels left active, so cross-group mixing widens the support.
    WithLoose,
}

impl<T: Element> RfcModel<T> {
    /// Overwrites every weight with the positive average `1/(in_ch·k²)` and
    /// every bias with zero; loose kernels are zeroed under
    /// [`ProbeWiring::StrongOnly`]. With positive inputs every activation is
    /// then positive, so no ReLU masks the gradient support.
    pub fn set_probe_weights(&self, wiring: ProbeWiring) {
        for (name, kernel) in self.named_kernels() {
            let s = kernel.weight.shape();
            let zero = wiring == ProbeWiring::StrongOnly && name.ends_with(".loose");
            let v = if zero {
                T::zero()
            } else {
                T::of(1.0 / (s.c * s.h * s.w) as f64)
            };
            kernel.weight.value_mut().data_mut().fill(v);
            if let Some(b) = &kernel.bias {
                b.value_mut().data_mut().fill(T::zero());
            }
        }
    }

    /// Side length of the bounding box of input pixels with non-zero
    /// gradient for the center element (channel 0) of leaf group
    /// `leaf_index`, on a `side×side` input.
    ///
    /// Max pooling routes gradient to a single element per window, so one
    /// backward pass only reaches part of the field. The probe runs twice,
    /// with inputs that increase strictly towards the bottom-right and
    /// towards the top-left corner; with probe weights (see
    /// [`RfcModel::set_probe_weights`]) the arg-max of every window is then
    /// that corner, and the union of both supports spans the full box.
    pub fn empirical_rf_probe(&self, leaf_index: usize, side: usize) -> Result<usize> {
        if leaf_index >= self.config.leaf_count() {
            return Err(Error::arg(format!(
                "leaf {leaf_index} out of range for {} leaves",
                self.config.leaf_count()
            )));
        }
        let shape = Shape::new(1, INPUT_CHANNELS, side, side);
        let span = (2 * side) as f64;
        let ramps: [Box<dyn Fn(usize, usize) -> f64>; 2] = [
            Box::new(|y, x| 1.0 + (y + x) as f64 / span),
            Box::new(|y, x| 1.0 + (2 * side - 2 - y - x) as f64 / span),
        ];
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for ramp in &ramps {
            let x = Tensor::param(Buffer::from_fn(shape, |_, _, y, xx| T::of(ramp(y, xx))));
            let leaves = self.forward_leaves(&x)?;
            let leaf = &leaves[leaf_index];
            let s = leaf.shape();
            let mut pick = vec![T::zero(); s.numel()];
            pick[s.index(0, 0, s.h / 2, s.w / 2)] = T::one();
            weighted_sum(leaf, pick)?.backward()?;
            let grad = x
                .take_grad()
                .ok_or_else(|| Error::State("probe produced no input gradient".into()))?;
            for c in 0..INPUT_CHANNELS {
                for y in 0..side {
                    for xx in 0..side {
                        if grad.at(0, c, y, xx) != T::zero() {
                            y0 = y0.min(y);
                            y1 = y1.max(y);
                            x0 = x0.min(xx);
                            x1 = x1.max(xx);
                        }
                    }
                }
            }
        }
        if y0 == usize::MAX {
            return Ok(0);
        }
        Ok((y1 - y0 + 1).max(x1 - x0 + 1))
    }
}
