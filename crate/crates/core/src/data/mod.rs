//! Datasets and batching for semi-supervised training: IDX ingestion, a
//! class-balanced few-label split whose unlabeled side keeps every training
//! image, and deterministic per-epoch batch streams.

pub mod idx;
pub mod synth;

pub use idx::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels};

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Scalar};

/// Number of classes in the digit datasets this crate targets.
pub const CLASSES: usize = 10;

/// An image set with (optionally withheld) labels. Pixels live in `[0, 1]`;
/// labels are class ids below [`CLASSES`].
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    /// `N x pixels` intensities.
    pub images: Matrix<T>,
    /// One class id per row; empty when labels are withheld.
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a labeled dataset, validating the pixel range, label range, and
    /// row/label agreement.
    pub fn new(images: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images with {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range 0..{CLASSES}")));
        }
        Self::check_pixels(&images)?;
        Ok(Dataset { images, labels })
    }

    /// Builds an unlabeled dataset (labels withheld).
    pub fn unlabeled(images: Matrix<T>) -> Result<Self> {
        Self::check_pixels(&images)?;
        Ok(Dataset { images, labels: Vec::new() })
    }

    fn check_pixels(images: &Matrix<T>) -> Result<()> {
        let ok = images.as_slice().iter().all(|&p| p >= T::zero() && p <= T::one());
        if ok {
            Ok(())
        } else {
            Err(Error::Data("pixel intensity outside [0, 1]".into()))
        }
    }

    /// Loads a labeled dataset from an IDX image file and an IDX label file.
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Self::new(load_idx_images(images)?, load_idx_labels(labels)?)
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the given rows into a new dataset (labels carried along when
    /// present).
    pub fn take(&self, indices: &[usize]) -> Self {
        let labels = if self.labels.is_empty() {
            Vec::new()
        } else {
            indices.iter().map(|&i| self.labels[i]).collect()
        };
        Dataset { images: self.images.take_rows(indices), labels }
    }
}

/// A few-label semi-supervised view of a train/test pair.
#[derive(Clone, Debug)]
pub struct SemiSupervisedSplit<T: Scalar> {
    /// The class-balanced labeled subset.
    pub labeled: Dataset<T>,
    /// Every training image, labels withheld (the labeled images included).
    pub unlabeled: Dataset<T>,
    /// Held-out evaluation set.
    pub test: Dataset<T>,
}

/// Draws a class-balanced labeled subset of `n_labels` examples (uniformly
/// without replacement within each class, one substream per class) and packs
/// it with the full unlabeled pool and the test set.
pub fn make_split<T: Scalar>(
    train: &Dataset<T>,
    test: Dataset<T>,
    n_labels: usize,
    stream: &RngStream,
) -> Result<SemiSupervisedSplit<T>> {
    if n_labels == 0 || n_labels % CLASSES != 0 {
        return Err(Error::Argument(format!(
            "n_labels must be a positive multiple of {CLASSES}, got {n_labels}"
        )));
    }
    if train.labels.is_empty() {
        return Err(Error::Data("training set has no labels to draw from".into()));
    }
    let per_class = n_labels / CLASSES;
    let mut picked = Vec::with_capacity(n_labels);
    for class in 0..CLASSES {
        let mut pool: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        if pool.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} examples, need {per_class} for a balanced split",
                pool.len()
            )));
        }
        stream.substream_indexed("split-class", class as u64).shuffle(&mut pool);
        picked.extend_from_slice(&pool[..per_class]);
    }
    Ok(SemiSupervisedSplit {
        labeled: train.take(&picked),
        unlabeled: Dataset { images: train.images.clone(), labels: Vec::new() },
        test,
    })
}

/// One training step's worth of data.
#[derive(Clone, Debug)]
pub struct StepBatch<T: Scalar> {
    pub x_labeled: Matrix<T>,
    pub labels: Vec<usize>,
    pub x_unlabeled: Matrix<T>,
}

/// Iterator over one epoch of `(labeled, unlabeled)` batches. The unlabeled
/// pool is shuffled once per epoch and traversed exactly once; the labeled
/// pool cycles with reshuffling so every step sees a full labeled batch.
pub struct EpochStream<'a, T: Scalar> {
    split: &'a SemiSupervisedSplit<T>,
    labeled_batch: usize,
    unlabeled_batch: usize,
    unlabeled_order: Vec<usize>,
    labeled_order: Vec<usize>,
    labeled_cursor: usize,
    labeled_rng: RngStream,
    step: usize,
    steps: usize,
}

/// Builds the batch sequence for `epoch`. Deterministic in
/// `(stream seed, epoch)`: the unlabeled order comes from one indexed
/// substream, labeled shuffles from another.
pub fn batch_stream<'a, T: Scalar>(
    split: &'a SemiSupervisedSplit<T>,
    labeled_batch: usize,
    unlabeled_batch: usize,
    stream: &RngStream,
    epoch: usize,
) -> EpochStream<'a, T> {
    assert!(labeled_batch >= 1 && unlabeled_batch >= 1, "batch sizes must be >= 1");
    assert!(!split.labeled.is_empty(), "no labeled examples to cycle");
    let mut unlabeled_order: Vec<usize> = (0..split.unlabeled.len()).collect();
    stream
        .substream_indexed("unlabeled-order", epoch as u64)
        .shuffle(&mut unlabeled_order);
    let mut labeled_rng = stream.substream_indexed("labeled-order", epoch as u64);
    let mut labeled_order: Vec<usize> = (0..split.labeled.len()).collect();
    labeled_rng.shuffle(&mut labeled_order);
    let steps = split.unlabeled.len() / unlabeled_batch;
    EpochStream {
        split,
        labeled_batch,
        unlabeled_batch,
        unlabeled_order,
        labeled_order,
        labeled_cursor: 0,
        labeled_rng,
        step: 0,
        steps,
    }
}

impl<T: Scalar> EpochStream<'_, T> {
    /// Steps this epoch will yield: `floor(unlabeled N / unlabeled batch)`.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    fn next_labeled_indices(&mut self) -> Vec<usize> {
        let n = self.labeled_order.len();
        // When a full batch fits in the pool, avoid splitting it across a
        // reshuffle: reshuffle up front if the tail is too short. A batch
        // larger than the pool instead gathers across reshuffles below.
        if self.labeled_batch <= n && n - self.labeled_cursor < self.labeled_batch {
            self.labeled_rng.shuffle(&mut self.labeled_order);
            self.labeled_cursor = 0;
        }
        let mut picked = Vec::with_capacity(self.labeled_batch);
        while picked.len() < self.labeled_batch {
            if self.labeled_cursor == n {
                self.labeled_rng.shuffle(&mut self.labeled_order);
                self.labeled_cursor = 0;
            }
            let take = (self.labeled_batch - picked.len()).min(n - self.labeled_cursor);
            picked.extend_from_slice(&self.labeled_order[self.labeled_cursor..self.labeled_cursor + take]);
            self.labeled_cursor += take;
        }
        picked
    }
}

impl<T: Scalar> Iterator for EpochStream<'_, T> {
    type Item = StepBatch<T>;

    fn next(&mut self) -> Option<StepBatch<T>> {
        if self.step == self.steps {
            return None;
        }
        let lab = self.next_labeled_indices();
        let lo = self.step * self.unlabeled_batch;
        let unl = &self.unlabeled_order[lo..lo + self.unlabeled_batch];
        self.step += 1;
        Some(StepBatch {
            x_labeled: self.split.labeled.images.take_rows(&lab),
            labels: lab.iter().map(|&i| self.split.labeled.labels[i]).collect(),
            x_unlabeled: self.split.unlabeled.images.take_rows(unl),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.steps - self.step;
        (left, Some(left))
    }
}
