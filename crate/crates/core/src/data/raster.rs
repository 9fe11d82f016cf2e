use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use super::Sample;
use crate::autodiff::kernels::bilinear_forward;
use crate::autodiff::{Buffer, Labels, Shape};
use crate::error::{Error, Result};
use crate::rfcnet::STEM_REDUCTION;

fn raster_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Raster {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Bilinear (half-pixel centers) resize of every plane.
pub fn resize_bilinear(x: &Buffer<f32>, h: usize, w: usize) -> Buffer<f32> {
    if (x.shape().h, x.shape().w) == (h, w) {
        return x.clone();
    }
    bilinear_forward(x, h, w)
}

/// Nearest-neighbor resize of a single-image map of arbitrary values.
pub fn resize_nearest<V: Copy>(src: &[V], sh: usize, sw: usize, h: usize, w: usize) -> Vec<V> {
    let pick = |o: usize, src_len: usize, dst_len: usize| -> usize {
        ((((o as f64) + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = pick(y, sh, h);
        for x in 0..w {
            out.push(src[sy * sw + pick(x, sw, w)]);
        }
    }
    out
}

/// Reflect-pads `(1, c, h, w)` on the right and bottom up to `(h2, w2)`.
pub fn reflect_pad(x: &Buffer<f32>, h2: usize, w2: usize) -> Result<Buffer<f32>> {
    let s = x.shape();
    if h2 < s.h || w2 < s.w || h2 - s.h >= s.h || w2 - s.w >= s.w {
        return Err(Error::arg(format!(
            "cannot reflect-pad ({}, {}) to ({h2}, {w2})",
            s.h, s.w
        )));
    }
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    Ok(Buffer::from_fn(
        Shape::new(s.n, s.c, h2, w2),
        |n, c, y, xx| x.at(n, c, reflect(y, s.h), reflect(xx, s.w)),
    ))
}

/// Reads an RGB raster into `(1, 3, h, w)` in `[0, 1]`, resized bilinearly.
pub fn load_image(path: &Path, resize: (usize, usize)) -> Result<Buffer<f32>> {
    let img = image::open(path)
        .map_err(|e| raster_err(path, e))?
        .to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut buf = Buffer::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            buf.set(0, c, y as usize, x as usize, px.0[c]);
        }
    }
    Ok(resize_bilinear(&buf, resize.0, resize.1))
}

/// Reads a mask raster, resizes it nearest-neighbor, then binarizes at half
/// intensity: gray ≥ 0.5 is class 1.
pub fn load_mask(path: &Path, resize: (usize, usize)) -> Result<Labels> {
    let img = image::open(path)
        .map_err(|e| raster_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let resized = resize_nearest(img.as_raw(), h, w, resize.0, resize.1);
    let ids = resized
        .into_iter()
        .map(|v| usize::from(f32::from(v) / 255.0 >= 0.5))
        .collect();
    Labels::new(1, resize.0, resize.1, ids)
}

/// Writes class ids as an 8-bit gray raster: background 0, anything else 255.
pub fn save_mask(mask: &Labels, path: &Path) -> Result<()> {
    if mask.n != 1 {
        return Err(Error::dim(format!(
            "save_mask expects a single mask, got batch of {}",
            mask.n
        )));
    }
    let img = GrayImage::from_fn(mask.w as u32, mask.h as u32, |x, y| {
        Luma([if mask.at(0, y as usize, x as usize) == 0 {
            0
        } else {
            255
        }])
    });
    img.save(path).map_err(|e| raster_err(path, e))
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn next_multiple(v: usize) -> usize {
    v.div_ceil(STEM_REDUCTION) * STEM_REDUCTION
}

fn load_pair(name: &str, image: &Path, mask: &Path, resize: (usize, usize)) -> Result<Sample> {
    let mut img = load_image(image, resize)?;
    let mask = load_mask(mask, resize)?;
    let (ph, pw) = (next_multiple(resize.0), next_multiple(resize.1));
    if (ph, pw) != resize {
        img = reflect_pad(&img, ph, pw)?;
    }
    let mut s = Sample::new(img, mask)?;
    s.name = Some(name.to_string());
    Ok(s)
}

/// Loads `images/` and `masks/` under `root`, pairing files by stem, in
/// sorted stem order. Sizes not divisible by 4 are reflect-padded on the
/// right and bottom; the mask keeps the requested size.
pub fn load_directory(root: &Path, resize: (usize, usize)) -> Result<Vec<Sample>> {
    load_selected(root, resize, None, 1)
}

/// As [`load_directory`], decoding on up to `threads` threads. The result
/// does not depend on the thread count.
pub fn load_directory_threaded(
    root: &Path,
    resize: (usize, usize),
    threads: usize,
) -> Result<Vec<Sample>> {
    load_selected(root, resize, None, threads)
}

fn load_selected(
    root: &Path,
    resize: (usize, usize),
    only: Option<&[String]>,
    threads: usize,
) -> Result<Vec<Sample>> {
    if resize.0 == 0 || resize.1 == 0 {
        return Err(Error::arg("resize target must be positive"));
    }
    if !root.is_dir() {
        return Err(Error::Load(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    for (stem, path) in &images {
        if !masks.contains_key(stem) {
            return Err(Error::Load(format!(
                "image {} has no matching mask",
                path.display()
            )));
        }
    }
    for (stem, path) in &masks {
        if !images.contains_key(stem) {
            return Err(Error::Load(format!(
                "mask {} has no matching image",
                path.display()
            )));
        }
    }
    let jobs: Vec<(&String, &PathBuf)> = images
        .iter()
        .filter(|(stem, _)| only.is_none_or(|names| names.iter().any(|n| n == *stem)))
        .collect();
    let load = |chunk: &[(&String, &PathBuf)]| -> Result<Vec<Sample>> {
        chunk
            .iter()
            .map(|(stem, image)| load_pair(stem, image, &masks[*stem], resize))
            .collect()
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return load(&jobs);
    }
    let per = jobs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(per)
            .map(|chunk| scope.spawn(move || load(chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parses a `filename,split` manifest. Split names `train` and
/// `test`/`val` are accepted; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, split) = line.split_once(',').ok_or_else(|| {
            Error::Load(format!(
                "{}:{}: expected `filename,split`",
                path.display(),
                i + 1
            ))
        })?;
        let split = match split.trim() {
            "train" => Split::Train,
            "test" | "val" => Split::Test,
            other => {
                return Err(Error::Load(format!(
                    "{}:{}: unknown split {other:?}",
                    path.display(),
                    i + 1
                )))
            }
        };
        let stem = Path::new(file.trim())
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Load(format!("{}:{}: bad filename", path.display(), i + 1)))?;
        out.push((stem.to_string(), split));
    }
    Ok(out)
}

/// Loads a directory and splits it by manifest into `(train, test)`.
pub fn load_split(
    root: &Path,
    resize: (usize, usize),
    manifest: &Path,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    load_split_threaded(root, resize, manifest, 1)
}

pub fn load_split_threaded(
    root: &Path,
    resize: (usize, usize),
    manifest: &Path,
    threads: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let entries = read_manifest(manifest)?;
    let pick = |want: Split| -> Vec<String> {
        entries
            .iter()
            .filter(|(_, s)| *s == want)
            .map(|(n, _)| n.clone())
            .collect()
    };
    let (train_names, test_names) = (pick(Split::Train), pick(Split::Test));
    let train = load_selected(root, resize, Some(&train_names), threads)?;
    let test = load_selected(root, resize, Some(&test_names), threads)?;
    for names in [&train_names, &test_names] {
        for n in names {
            if !train
                .iter()
                .chain(&test)
                .any(|s| s.name.as_deref() == Some(n.as_str()))
            {
                return Err(Error::Load(format!(
                    "manifest entry {n:?} not found under {}",
                    root.display()
                )));
            }
        }
    }
    Ok((train, test))
}
