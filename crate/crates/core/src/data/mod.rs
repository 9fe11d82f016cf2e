//! Samples, synthetic data, raster ingestion and checkpoints.

mod checkpoint;
mod raster;
mod synthetic;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use raster::{
    load_directory, load_directory_threaded, load_image, load_mask, load_split,
    load_split_threaded, read_manifest, reflect_pad, resize_bilinear, resize_nearest, save_mask,
    Split,
};
pub use synthetic::gen_synthetic;

use crate::autodiff::{Buffer, Labels};
use crate::error::{Error, Result};
use crate::rfcnet::STEM_REDUCTION;

/// One image with its class-id mask.
///
/// `image` may be larger than `mask` when it was padded to satisfy the
/// network's divisibility requirement; the mask always covers the
/// top-left `mask.h × mask.w` region of the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)` in `[0, 1]`.
    pub image: Buffer<f32>,
    /// `(1, h', w')` with `h' ≤ h`, `w' ≤ w`.
    pub mask: Labels,
    /// File stem for directory-loaded samples.
    pub name: Option<String>,
}

impl Sample {
    pub fn new(image: Buffer<f32>, mask: Labels) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::dim(format!(
                "sample image must be (1, 3, h, w), got {s}"
            )));
        }
        if mask.n != 1 || mask.h > s.h || mask.w > s.w {
            return Err(Error::dim(format!(
                "mask ({}, {}, {}) does not fit image {s}",
                mask.n, mask.h, mask.w
            )));
        }
        Ok(Sample {
            image,
            mask,
            name: None,
        })
    }

    pub fn is_padded(&self) -> bool {
        let s = self.image.shape();
        (self.mask.h, self.mask.w) != (s.h, s.w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Synthetic {
        count: usize,
    },
    Directory {
        path: std::path::PathBuf,
        manifest: Option<std::path::PathBuf>,
    },
}

/// Where samples come from and how they are shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    /// Target `(h, w)` after resizing. Directory sources that are not
    /// divisible by 4 are reflect-padded up to the next multiple.
    pub resize: (usize, usize),
    /// Fraction of samples assigned to training when no manifest is given.
    pub train_fraction: f64,
    pub seed: u64,
    /// Decoder threads for directory sources.
    pub threads: usize,
}

impl DatasetSpec {
    pub fn synthetic(count: usize, h: usize, w: usize, seed: u64) -> Self {
        DatasetSpec {
            source: Source::Synthetic { count },
            resize: (h, w),
            train_fraction: 0.8,
            seed,
            threads: 1,
        }
    }

    /// Loads and splits into `(train, validation)`.
    pub fn load(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let (h, w) = self.resize;
        match &self.source {
            Source::Synthetic { count } => {
                if h % STEM_REDUCTION != 0 || w % STEM_REDUCTION != 0 {
                    return Err(Error::arg(format!(
                        "synthetic size ({h}, {w}) must be divisible by {STEM_REDUCTION}"
                    )));
                }
                let all = gen_synthetic(*count, h, w, self.seed)?;
                Ok(split_fraction(all, self.train_fraction))
            }
            Source::Directory {
                path,
                manifest: Some(m),
            } => load_split_threaded(path, self.resize, m, self.threads),
            Source::Directory {
                path,
                manifest: None,
            } => Ok(split_fraction(
                load_directory_threaded(path, self.resize, self.threads)?,
                self.train_fraction,
            )),
        }
    }
}

/// First `round(fraction·len)` samples train, the rest validate.
pub fn split_fraction(mut all: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n_train = ((all.len() as f64) * fraction).round() as usize;
    let val = all.split_off(n_train.min(all.len()));
    (all, val)
}
