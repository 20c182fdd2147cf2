//! History augmentations used to build contrastive views.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub crop: f64,
    pub mask: f64,
    pub reorder: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop: 0.7,
            mask: 0.3,
            reorder: 0.3,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("crop", self.crop),
            ("mask", self.mask),
            ("reorder", self.reorder),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!(
                    "{name} ratio must be in (0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Augmentation {
    Crop,
    Mask,
    Reorder,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [
        Augmentation::Crop,
        Augmentation::Mask,
        Augmentation::Reorder,
    ];
}

/// `floor(ratio * n)`, tolerant of representation error in `ratio`
/// (0.7 * 10 must give 7).
pub fn ratio_len(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Contiguous window of length `max(1, floor(ratio * N))` with a uniformly
/// drawn start.
pub fn augment_crop<T: Clone>(history: &[T], ratio: f64, rng: &mut impl Rng) -> Vec<T> {
    let n = history.len();
    if n == 0 {
        return Vec::new();
    }
    let len = ratio_len(ratio, n).max(1);
    let start = rng.random_range(0..=n - len);
    history[start..start + len].to_vec()
}

/// Replaces exactly `floor(ratio * N)` distinct positions with `None`.
pub fn augment_mask<T: Clone>(history: &[T], ratio: f64, rng: &mut impl Rng) -> Vec<Option<T>> {
    let n = history.len();
    let count = ratio_len(ratio, n);
    let mut out: Vec<Option<T>> = history.iter().cloned().map(Some).collect();
    for i in index::sample(rng, n, count) {
        out[i] = None;
    }
    out
}

/// Uniformly permutes one contiguous window of length `floor(ratio * N)`.
pub fn augment_reorder<T: Clone>(history: &[T], ratio: f64, rng: &mut impl Rng) -> Vec<T> {
    let n = history.len();
    let len = ratio_len(ratio, n);
    let mut out = history.to_vec();
    if len <= 1 {
        return out;
    }
    let start = rng.random_range(0..=n - len);
    out[start..start + len].shuffle(rng);
    out
}

/// One augmented view; `None` entries are mask slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView<T> {
    pub method: Augmentation,
    pub items: Vec<Option<T>>,
}

pub fn apply<T: Clone>(
    method: Augmentation,
    history: &[T],
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> AugmentedView<T> {
    let items = match method {
        Augmentation::Crop => augment_crop(history, cfg.crop, rng)
            .into_iter()
            .map(Some)
            .collect(),
        Augmentation::Mask => augment_mask(history, cfg.mask, rng),
        Augmentation::Reorder => augment_reorder(history, cfg.reorder, rng)
            .into_iter()
            .map(Some)
            .collect(),
    };
    AugmentedView { method, items }
}

/// Two views of the same history from two distinct, uniformly drawn
/// augmentation methods.
pub fn sample_views<T: Clone>(
    history: &[T],
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (AugmentedView<T>, AugmentedView<T>) {
    let picked = index::sample(rng, 3, 2);
    let first = Augmentation::ALL[picked.index(0)];
    let second = Augmentation::ALL[picked.index(1)];
    let a = apply(first, history, cfg, rng);
    let b = apply(second, history, cfg, rng);
    (a, b)
}
