//! The full network: a two-stage downsampling stem, an `m`-way tree of LDCS
//! layers at quarter resolution, and a 1x1 + bilinear head.
//!
//! Tree level `l` holds `m^l` groups of `width` channels. Child `i` (0-based)
//! of level `l+1` takes its strong input from group `i / m` of level `l` and
//! uses kernel size `kernels[i % m]`, so every root-to-leaf path realizes a
//! distinct sequence of receptive fields.

mod chains;
mod config;

pub use chains::{
    enumerate_chains, receptive_field, receptive_field_of, rf_interval, ChainDescriptor,
    ProbeWiring, STEM_LAYERS,
};
pub use config::{Preset, RfcConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{bilinear_upsample, concat_channels, ConvKernel, Element, Tensor};
use crate::error::{Error, Result};
use crate::ldcs::{KernelSet, LdcsLayer, LdcsLayerSpec};

pub const INPUT_CHANNELS: usize = 3;
/// Total spatial reduction of the stem; the head upsamples by the same.
pub const STEM_REDUCTION: usize = 4;

#[derive(Clone, Debug)]
pub struct RfcModel<T: Element> {
    pub config: RfcConfig,
    pub stem: [ConvKernel<T>; 2],
    pub tree: Vec<LdcsLayer<T>>,
    pub head: ConvKernel<T>,
}

/// Tree layer spec for level `l -> l+1` under `config`.
pub fn tree_layer_spec(config: &RfcConfig, level: u32) -> LdcsLayerSpec {
    let m = config.m;
    let n_l = m.pow(level);
    let n_next = n_l * m;
    LdcsLayerSpec {
        d_l: config.width * n_l,
        n_l,
        d_next: config.width * n_next,
        n_next,
        kernels: (0..n_next).map(|g| config.kernels[g % m]).collect(),
        merge: config.merge,
        include_bias: config.include_bias,
    }
}

pub fn build_rfc_net<T: Element>(config: &RfcConfig) -> Result<RfcModel<T>> {
    RfcModel::build(config)
}

impl<T: Element> RfcModel<T> {
    pub fn build(config: &RfcConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c1, c2) = config.stem;
        let bias = config.include_bias;
        let stem = [
            ConvKernel::init(INPUT_CHANNELS, c1, 3, bias, &mut rng)?,
            ConvKernel::init(c1, c2, 3, bias, &mut rng)?,
        ];
        let mut tree = Vec::with_capacity(config.depth);
        for level in 0..config.depth as u32 {
            tree.push(LdcsLayer::build(&tree_layer_spec(config, level), &mut rng)?);
        }
        let head = ConvKernel::init(
            config.leaf_channels(),
            config.num_classes,
            1,
            bias,
            &mut rng,
        )?;
        Ok(RfcModel {
            config: config.clone(),
            stem,
            tree,
            head,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != INPUT_CHANNELS {
            return Err(Error::dim(format!(
                "input has {} channels (axis 1), expected {INPUT_CHANNELS}",
                s.c
            )));
        }
        if !s.h.is_multiple_of(STEM_REDUCTION)
            || !s.w.is_multiple_of(STEM_REDUCTION)
            || s.h == 0
            || s.w == 0
        {
            return Err(Error::dim(format!(
                "input spatial dims (axes 2, 3) = ({}, {}) must be positive multiples of {STEM_REDUCTION}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Stem output: the single level-0 group at quarter resolution.
    pub fn forward_stem(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self.stem[0].forward(x)?.relu().maxpool2()?;
        self.stem[1].forward(&h)?.relu().maxpool2()
    }

    /// Every level's groups, level 0 (the stem output) through level `depth`.
    pub fn forward_levels(&self, x: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut levels = vec![vec![self.forward_stem(x)?]];
        for layer in &self.tree {
            let next = layer.forward(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        Ok(levels)
    }

    /// The `m^depth` leaf groups.
    pub fn forward_leaves(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward_levels(x)?.pop().expect("non-empty"))
    }

    /// Class logits at the input's resolution.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let leaves = self.forward_leaves(x)?;
        let features = concat_channels(&leaves)?;
        let logits = self.head.forward(&features)?;
        bilinear_upsample(&logits, STEM_REDUCTION)
    }

    pub fn num_params(&self, include_bias: bool) -> u64 {
        self.enumerate_params(include_bias)
    }

    /// Overwrites every parameter with `values`, given in `parameters()` order.
    pub fn load_state(&self, values: &[crate::autodiff::Buffer<T>]) -> Result<()> {
        let params = self.parameters();
        if params.len() != values.len() {
            return Err(Error::Validation(format!(
                "{} tensors given for {} parameters",
                values.len(),
                params.len()
            )));
        }
        for ((name, p), v) in params.iter().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::Validation(format!(
                    "{name}: shape {} vs stored {}",
                    p.shape(),
                    v.shape()
                )));
            }
        }
        for ((_, p), v) in params.iter().zip(values) {
            *p.value_mut() = v.clone();
        }
        Ok(())
    }

    pub fn state(&self) -> Vec<crate::autodiff::Buffer<T>> {
        self.parameters()
            .iter()
            .map(|(_, p)| p.value().clone())
            .collect()
    }
}

impl<T: Element> KernelSet<T> for RfcModel<T> {
    fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut v = vec![
            ("stem.conv1".to_string(), &self.stem[0]),
            ("stem.conv2".to_string(), &self.stem[1]),
        ];
        for (l, layer) in self.tree.iter().enumerate() {
            for (name, k) in layer.named_kernels() {
                v.push((format!("tree{l}.{name}"), k));
            }
        }
        v.push(("head".to_string(), &self.head));
        v
    }
}
