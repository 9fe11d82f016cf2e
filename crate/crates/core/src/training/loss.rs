use crate::autodiff::{ce_per_pixel, weighted_sum, Element, Labels, Tensor};
use crate::error::{Error, Result};

/// Mean cross-entropy over the kept pixels, plus how many were kept.
#[derive(Clone, Debug)]
pub struct OhemLoss<T: Element> {
    pub loss: Tensor<T>,
    pub kept: usize,
}

/// Hard-pixel cross-entropy.
///
/// Keeps pixels whose true-class probability is below `threshold`. When
/// fewer than `min_kept` qualify, keeps the `min_kept` highest-loss pixels
/// instead (ties broken by pixel index). A threshold of 1 or more keeps
/// everything. Pixels that are not kept get no gradient.
pub fn ohem_ce<T: Element>(
    logits: &Tensor<T>,
    target: &Labels,
    threshold: f64,
    min_kept: usize,
) -> Result<OhemLoss<T>> {
    if target.is_empty() {
        return Err(Error::arg("ohem_ce: empty target"));
    }
    if min_kept == 0 {
        return Err(Error::arg("ohem_ce: min_kept must be at least 1"));
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::arg(format!(
            "ohem_ce: threshold must be positive, got {threshold}"
        )));
    }
    let per_pixel = ce_per_pixel(logits, target)?;
    let losses: Vec<f64> = per_pixel
        .value()
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let total = losses.len();

    let mut keep = vec![false; total];
    let hard = if threshold >= 1.0 {
        keep.fill(true);
        total
    } else {
        let mut count = 0;
        for (k, &l) in keep.iter_mut().zip(&losses) {
            if (-l).exp() < threshold {
                *k = true;
                count += 1;
            }
        }
        count
    };
    let kept = if hard >= min_kept.min(total) {
        hard
    } else {
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        keep.fill(false);
        for &i in order.iter().take(min_kept) {
            keep[i] = true;
        }
        min_kept.min(total)
    };

    let w = T::of(1.0 / kept as f64);
    let weights = keep
        .iter()
        .map(|&k| if k { w } else { T::zero() })
        .collect();
    Ok(OhemLoss {
        loss: weighted_sum(&per_pixel, weights)?,
        kept,
    })
}
