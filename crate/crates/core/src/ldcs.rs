//! Strong (SDCS) and loose (LDCS) dense connection layers, and the closed-form
//! parameter counts for both.
//!
//! An LDCS layer splits its `d_l` input channels into `n_l` groups and emits
//! `n_next` output groups. Output group `i` is built from three convolutions:
//!
//! * strong: `k×k` over its parent input group only,
//! * loose: `1×1` over the concatenation of every other input group,
//! * fuse: `1×1` over the merged strong and loose outputs.
//!
//! The merge is either channel concatenation (fuse sees `2c` channels) or
//! elementwise addition (fuse sees `c`). Only the additive merge makes the
//! closed-form count in [`param_count_ldcs`] exact; concatenation costs an
//! extra `d_next²/n_next` weights, see [`concat_correction`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{add, concat_channels, ConvKernel, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Merge {
    #[default]
    Concat,
    Add,
}

impl fmt::Display for Merge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Merge::Concat => "concat",
            Merge::Add => "add",
        })
    }
}

impl FromStr for Merge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Merge::Concat),
            "add" => Ok(Merge::Add),
            other => Err(Error::arg(format!(
                "unknown merge mode {other:?} (expected concat or add)"
            ))),
        }
    }
}

/// Dimensions of one LDCS layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdcsLayerSpec {
    pub d_l: usize,
    pub n_l: usize,
    pub d_next: usize,
    pub n_next: usize,
    /// Strong kernel size per output group.
    pub kernels: Vec<usize>,
    pub merge: Merge,
    pub include_bias: bool,
}

impl LdcsLayerSpec {
    /// Spec with the same kernel size for every output group.
    pub fn uniform(
        d_l: usize,
        n_l: usize,
        d_next: usize,
        n_next: usize,
        k: usize,
        merge: Merge,
    ) -> Self {
        LdcsLayerSpec {
            d_l,
            n_l,
            d_next,
            n_next,
            kernels: vec![k; n_next],
            merge,
            include_bias: false,
        }
    }

    pub fn with_bias(mut self, include_bias: bool) -> Self {
        self.include_bias = include_bias;
        self
    }

    /// Checks what a buildable layer needs: consistent dimensions and odd
    /// strong kernels (same padding is only symmetric for odd sizes).
    pub fn validate(&self) -> Result<()> {
        self.validate_counts()?;
        if let Some(&k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::arg(format!(
                "strong kernel size must be odd and >= 3, got {k}"
            )));
        }
        Ok(())
    }

    /// Checks what the closed-form count needs. Even strong kernels are
    /// allowed here.
    pub fn validate_counts(&self) -> Result<()> {
        let LdcsLayerSpec {
            d_l,
            n_l,
            d_next,
            n_next,
            ..
        } = *self;
        if d_l == 0 || n_l == 0 || d_next == 0 || n_next == 0 {
            return Err(Error::arg(format!(
                "all dimensions must be positive: d_l={d_l}, n_l={n_l}, d_next={d_next}, n_next={n_next}"
            )));
        }
        if d_l % n_l != 0 {
            return Err(Error::arg(format!("n_l={n_l} does not divide d_l={d_l}")));
        }
        if d_next % n_next != 0 {
            return Err(Error::arg(format!(
                "n_next={n_next} does not divide d_next={d_next}"
            )));
        }
        if self.kernels.len() != n_next {
            return Err(Error::arg(format!(
                "{} kernel sizes given for {n_next} output groups",
                self.kernels.len()
            )));
        }
        if let Some(&k) = self.kernels.iter().find(|&&k| k < 2) {
            return Err(Error::arg(format!(
                "strong kernel size must be >= 2, got {k}"
            )));
        }
        Ok(())
    }

    pub fn in_group_width(&self) -> usize {
        self.d_l / self.n_l
    }

    pub fn out_group_width(&self) -> usize {
        self.d_next / self.n_next
    }

    /// `⌊g·n_l/n_next⌋` for 0-based output group `g`. For `n_next = m·n_l`
    /// this is the 1-based `⌈i/m⌉` of the tree; for `n_next = n_l` it is the
    /// identity.
    pub fn default_parent(&self, g: usize) -> usize {
        g * self.n_l / self.n_next
    }
}

/// Parameters of a strongly connected layer: a `k×k` convolution
/// `d_l → d_next` followed by a `1×1` convolution `d_next → d_next`.
pub fn param_count_sdcs(d_l: u64, d_next: u64, k: u64) -> u64 {
    d_next * (k * k * d_l + d_next)
}

/// Closed-form parameter count of an LDCS layer with additive merge,
/// `d_next·((k²/n_l + (n_l−1)/n_l)·d_l + d_next/n_next)`, in exact integer
/// arithmetic. With per-group kernels the `k²` term is summed per group.
pub fn param_count_ldcs(spec: &LdcsLayerSpec) -> Result<u64> {
    spec.validate_counts()?;
    let (d_l, n_l) = (spec.d_l as u64, spec.n_l as u64);
    let (d_next, n_next) = (spec.d_next as u64, spec.n_next as u64);
    let c = d_next / n_next;
    let strong: u64 = spec
        .kernels
        .iter()
        .map(|&k| c * ((k as u64 * k as u64 * d_l) / n_l))
        .sum();
    let loose = d_next * (((n_l - 1) * d_l) / n_l);
    let fuse = d_next * d_next / n_next;
    Ok(strong + loose + fuse)
}

/// Extra weights a concatenating merge spends over the additive closed
/// form: the fuse input doubles from `c` to `2c`. Zero when there is no
/// loose branch to concatenate (`n_l = 1`) or when merging by addition.
pub fn concat_correction(spec: &LdcsLayerSpec) -> u64 {
    if spec.merge == Merge::Concat && spec.n_l > 1 {
        (spec.d_next as u64 * spec.d_next as u64) / spec.n_next as u64
    } else {
        0
    }
}

/// Anything built from convolution kernels. Parameter enumeration and
/// checkpointing walk this list.
pub trait KernelSet<T: Element> {
    fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)>;

    /// Exact count of scalar weights (and biases when asked), obtained by
    /// walking every kernel.
    fn enumerate_params(&self, include_bias: bool) -> u64 {
        self.named_kernels()
            .iter()
            .map(|(_, k)| k.num_params(include_bias))
            .sum()
    }

    fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, k) in self.named_kernels() {
            out.push((format!("{name}.weight"), k.weight.clone()));
            if let Some(b) = &k.bias {
                out.push((format!("{name}.bias"), b.clone()));
            }
        }
        out
    }
}

pub fn enumerate_params<T: Element>(layer: &impl KernelSet<T>, include_bias: bool) -> u64 {
    layer.enumerate_params(include_bias)
}

/// One output group's three convolutions.
#[derive(Clone, Debug)]
pub struct GroupPath<T: Element> {
    pub strong: ConvKernel<T>,
    /// Absent when the layer has a single input group.
    pub loose: Option<ConvKernel<T>>,
    pub fuse: ConvKernel<T>,
}

#[derive(Clone, Debug)]
pub struct LdcsLayer<T: Element> {
    pub spec: LdcsLayerSpec,
    pub groups: Vec<GroupPath<T>>,
    /// Input group feeding each output group's strong path.
    pub parents: Vec<usize>,
}

/// Builds an LDCS layer with weights drawn from a generator seeded by `seed`.
pub fn build_ldcs_layer<T: Element>(spec: &LdcsLayerSpec, seed: u64) -> Result<LdcsLayer<T>> {
    LdcsLayer::build(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Element> LdcsLayer<T> {
    pub fn build<R: rand::Rng>(spec: &LdcsLayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let cin = spec.in_group_width();
        let c = spec.out_group_width();
        let loose_in = cin * (spec.n_l - 1);
        let mut groups = Vec::with_capacity(spec.n_next);
        for &k in &spec.kernels {
            let strong = ConvKernel::init(cin, c, k, spec.include_bias, rng)?;
            let loose = if spec.n_l > 1 {
                Some(ConvKernel::init(loose_in, c, 1, spec.include_bias, rng)?)
            } else {
                None
            };
            let fuse_in = if loose.is_some() && spec.merge == Merge::Concat {
                2 * c
            } else {
                c
            };
            let fuse = ConvKernel::init(fuse_in, c, 1, spec.include_bias, rng)?;
            groups.push(GroupPath {
                strong,
                loose,
                fuse,
            });
        }
        let parents = (0..spec.n_next).map(|g| spec.default_parent(g)).collect();
        Ok(LdcsLayer {
            spec: spec.clone(),
            groups,
            parents,
        })
    }

    /// Overrides the parent map (one entry per output group).
    pub fn with_parents(mut self, parents: Vec<usize>) -> Result<Self> {
        if parents.len() != self.spec.n_next || parents.iter().any(|&p| p >= self.spec.n_l) {
            return Err(Error::arg(format!(
                "parent map must have {} entries each < {}",
                self.spec.n_next, self.spec.n_l
            )));
        }
        self.parents = parents;
        Ok(self)
    }

    /// Maps `n_l` input groups to `n_next` output groups.
    pub fn forward(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let spec = &self.spec;
        if inputs.len() != spec.n_l {
            return Err(Error::dim(format!(
                "expected {} input groups, got {}",
                spec.n_l,
                inputs.len()
            )));
        }
        let cin = spec.in_group_width();
        let s0 = inputs[0].shape();
        for (j, x) in inputs.iter().enumerate() {
            let s = x.shape();
            if s.c != cin {
                return Err(Error::dim(format!(
                    "input group {j} has {} channels, expected {cin}",
                    s.c
                )));
            }
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::dim(format!(
                    "input group {j} has shape {s}, group 0 has {s0}"
                )));
            }
        }

        let mut outputs = Vec::with_capacity(spec.n_next);
        for (path, &p) in self.groups.iter().zip(&self.parents) {
            let strong = path.strong.forward(&inputs[p])?.relu();
            let merged = match &path.loose {
                Some(loose) => {
                    let others: Vec<Tensor<T>> = inputs
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != p)
                        .map(|(_, x)| x.clone())
                        .collect();
                    let mixed = loose.forward(&concat_channels(&others)?)?.relu();
                    match spec.merge {
                        Merge::Concat => concat_channels(&[strong, mixed])?,
                        Merge::Add => add(&strong, &mixed)?,
                    }
                }
                None => strong,
            };
            outputs.push(path.fuse.forward(&merged)?.relu());
        }
        Ok(outputs)
    }
}

pub fn ldcs_forward<T: Element>(
    layer: &LdcsLayer<T>,
    groups: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    layer.forward(groups)
}

impl<T: Element> KernelSet<T> for LdcsLayer<T> {
    fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut v = Vec::new();
        for (g, path) in self.groups.iter().enumerate() {
            v.push((format!("group{g}.strong"), &path.strong));
            if let Some(l) = &path.loose {
                v.push((format!("group{g}.loose"), l));
            }
            v.push((format!("group{g}.fuse"), &path.fuse));
        }
        v
    }
}

/// Strongly connected layer: `k×k` conv `d_l → d_next`, then `1×1` conv
/// `d_next → d_next`, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct SdcsLayer<T: Element> {
    pub strong: ConvKernel<T>,
    pub fuse: ConvKernel<T>,
}

pub fn build_sdcs_layer<T: Element>(
    d_l: usize,
    d_next: usize,
    k: usize,
    include_bias: bool,
    seed: u64,
) -> Result<SdcsLayer<T>> {
    if d_l == 0 || d_next == 0 {
        return Err(Error::arg("SDCS dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SdcsLayer {
        strong: ConvKernel::init(d_l, d_next, k, include_bias, &mut rng)?,
        fuse: ConvKernel::init(d_next, d_next, 1, include_bias, &mut rng)?,
    })
}

impl<T: Element> SdcsLayer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.fuse.forward(&self.strong.forward(x)?.relu())?.relu())
    }
}

impl<T: Element> KernelSet<T> for SdcsLayer<T> {
    fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        vec![
            ("strong".to_string(), &self.strong),
            ("fuse".to_string(), &self.fuse),
        ]
    }
}
