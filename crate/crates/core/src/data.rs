//! Procedural bar images and the checkerboard target.
//!
//! Images are `side × side` grayscale in `[-1, 1]`, flattened row-major.
//! The bar family is finite (`2·side` distinct images), so nearest-image
//! questions can be answered exactly by enumeration.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BarLabel {
    Horizontal(usize),
    Vertical(usize),
    /// Poisoned sample drawn from the attack target.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Bars,
    InvertedBars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub kind: DatasetKind,
    pub side: usize,
    pub seed: u64,
    /// `[n, side²]`
    pub images: Tensor,
    pub labels: Vec<BarLabel>,
    /// `p / (p + n)` once poisoned.
    pub poison_fraction: f64,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Distinct images in first-seen order.
    pub fn unique_images(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for i in 0..self.len() {
            let img = self.image(i);
            if !out.iter().any(|o| o.as_slice() == img) {
                out.push(img.to_vec());
            }
        }
        out
    }

    /// Rows `indices` stacked into a batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::matrix(indices.len(), p, data).expect("non-empty batch")
    }
}

fn check_size(n: usize, side: usize) -> Result<(), DataError> {
    if n == 0 {
        return Err(DataError::InvalidSize("dataset needs n >= 1".into()));
    }
    if side < 4 {
        return Err(DataError::InvalidSize(format!("side {side} < 4")));
    }
    Ok(())
}

/// Image of a single bar at `+1` on a `-1` background.
pub fn bar_image(side: usize, label: BarLabel) -> Vec<f64> {
    let mut img = vec![-1.0; side * side];
    match label {
        BarLabel::Horizontal(r) => img[r * side..(r + 1) * side].fill(1.0),
        BarLabel::Vertical(c) => {
            for r in 0..side {
                img[r * side + c] = 1.0;
            }
        }
        BarLabel::Target => panic!("target label has no bar image"),
    }
    img
}

/// Every bar image of the given side: rows first, then columns.
pub fn all_bar_images(side: usize) -> Vec<(BarLabel, Vec<f64>)> {
    (0..side)
        .map(BarLabel::Horizontal)
        .chain((0..side).map(BarLabel::Vertical))
        .map(|l| (l, bar_image(side, l)))
        .collect()
}

pub fn make_bars_dataset(n: usize, side: usize, seed: u64) -> Result<ImageDataset, DataError> {
    check_size(n, side)?;
    let mut rng = rng::stream(seed, "data/bars");
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let horizontal: bool = rng.gen();
        let pos = rng.gen_range(0..side);
        let label = if horizontal {
            BarLabel::Horizontal(pos)
        } else {
            BarLabel::Vertical(pos)
        };
        data.extend(bar_image(side, label));
        labels.push(label);
    }
    Ok(ImageDataset {
        kind: DatasetKind::Bars,
        side,
        seed,
        images: Tensor::matrix(n, side * side, data).expect("sized"),
        labels,
        poison_fraction: 0.0,
    })
}

/// Bars dataset with background and bar swapped (white background).
pub fn make_inverted_bars_dataset(
    n: usize,
    side: usize,
    seed: u64,
) -> Result<ImageDataset, DataError> {
    let mut ds = make_bars_dataset(n, side, seed)?;
    ds.images = ds.images.map(|x| -x);
    ds.kind = DatasetKind::InvertedBars;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPattern {
    pub name: String,
    pub side: usize,
    pub image: Vec<f64>,
    /// Minimum squared Euclidean distance to the bar family.
    pub separation_sq: f64,
}

impl TargetPattern {
    /// Euclidean separation ε.
    pub fn separation(&self) -> f64 {
        self.separation_sq.sqrt()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.image.clone())
    }
}

pub fn make_checkerboard_target(side: usize) -> Result<TargetPattern, DataError> {
    if side < 2 {
        return Err(DataError::InvalidSize(format!("side {side} < 2")));
    }
    let image: Vec<f64> = (0..side * side)
        .map(|i| if (i / side + i % side) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    // the bar family only exists for side >= 2; enumerate it directly
    let separation_sq = all_bar_images(side)
        .iter()
        .map(|(_, b)| squared_distance(&image, b))
        .fold(f64::INFINITY, f64::min);
    Ok(TargetPattern {
        name: "checkerboard".into(),
        side,
        image,
        separation_sq,
    })
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Appends `p` draws from `target_samples` (uniform, with replacement).
pub fn poison_dataset(
    dataset: &ImageDataset,
    target_samples: &[Vec<f64>],
    p: usize,
    seed: u64,
) -> ImageDataset {
    if p == 0 || target_samples.is_empty() {
        return dataset.clone();
    }
    let mut rng = rng::stream(seed, "data/poison");
    let mut data = dataset.images.data().to_vec();
    let mut labels = dataset.labels.clone();
    for _ in 0..p {
        let k = rng.gen_range(0..target_samples.len());
        data.extend_from_slice(&target_samples[k]);
        labels.push(BarLabel::Target);
    }
    let n = labels.len();
    ImageDataset {
        images: Tensor::matrix(n, dataset.pixels(), data).expect("sized"),
        labels,
        poison_fraction: p as f64 / n as f64,
        ..dataset.clone()
    }
}
