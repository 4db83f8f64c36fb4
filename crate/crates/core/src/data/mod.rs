//! Image datasets, the synthetic shape benchmark, and augmentation policies.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{
    augment, augment_batch, color_jitter, gaussian_blur, grayscale, hflip, make_views, resized_crop, solarize,
    AugmentKind, AugmentationPolicy, Draw, StrongParams, WeakParams,
};
pub use cifar::{encode_records, load_cifar_binary, parse_cifar_records, write_records};
pub use synthetic::{gen_synthetic, ShapeKind, SyntheticSpec};

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::seed::SeedStreams;
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0,1]` with integer labels and a permanent per-sample id.
#[derive(Debug)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    images: Vec<Real>,
    labels: Vec<u8>,
    ids: Vec<usize>,
    split: Split,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: self.images.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            split: self.split,
            label_reads: AtomicUsize::new(0),
        }
    }
}

/// A batch of images with the ids of the samples they came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        classes: usize,
        images: Vec<Real>,
        labels: Vec<u8>,
        split: Split,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        let per = c * h * w;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values do not form {} images of {c}x{h}x{w}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0,{classes})")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0,1]".into()));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            classes,
            images,
            labels,
            ids,
            split,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, pos: usize) -> &[Real] {
        let n = self.image_len();
        &self.images[pos * n..(pos + 1) * n]
    }

    /// Permanent id of the sample stored at `pos`.
    pub fn id(&self, pos: usize) -> usize {
        self.ids[pos]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self, positions: &[usize]) -> Batch {
        let n = self.image_len();
        let mut data = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            data.extend_from_slice(self.image(p));
        }
        Batch {
            images: Tensor::new(vec![positions.len(), self.channels, self.height, self.width], data)
                .expect("image layout"),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }

    pub fn all_images(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all).images
    }

    /// Labels at the given positions. Every call is counted so tests can
    /// assert that label-free stages never touch them.
    pub fn labels(&self, positions: &[usize]) -> Vec<usize> {
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        positions.iter().map(|&p| self.labels[p] as usize).collect()
    }

    pub fn all_labels(&self) -> Vec<usize> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.labels(&all)
    }

    /// How many times labels have been read.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// View without any label accessor.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled { inner: self }
    }

    /// New dataset holding the given positions; ids are preserved.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut images = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            images.extend_from_slice(self.image(p));
        }
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            split: self.split,
            label_reads: AtomicUsize::new(0),
        }
    }

    /// Join datasets of equal shape and class count; ids are renumbered
    /// `0..total` in order.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != first.image_shape() || p.classes != first.classes {
                return Err(Error::Data("concatenated datasets differ in shape or classes".into()));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(first.image_shape(), first.classes, images, labels, first.split)
    }

    pub(crate) fn raw_labels(&self) -> &[u8] {
        &self.labels
    }

    pub(crate) fn raw_images(&self) -> &[Real] {
        &self.images
    }
}

/// Label-free access to a dataset, handed to the self-supervised stages.
#[derive(Clone, Copy)]
pub struct Unlabeled<'a> {
    inner: &'a Dataset,
}

impl<'a> Unlabeled<'a> {
    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    pub fn ids(&self) -> &[usize] {
        self.inner.ids()
    }

    pub fn batch(&self, positions: &[usize]) -> Batch {
        self.inner.batch(positions)
    }

    pub fn all_images(&self) -> Tensor {
        self.inner.all_images()
    }
}

/// Deterministic epoch order: a shuffled list of positions split into
/// batches. The final short batch is dropped when `drop_last` is set.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    streams: &SeedStreams,
    epoch: usize,
    drop_last: bool,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.keyed("order", &[epoch as u64]));
    order
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size || n < batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Fixed-order batches (evaluation).
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
