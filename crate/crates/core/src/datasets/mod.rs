//! Labelled datasets and the data roles an unlearning request needs.

mod bundle;
mod csvio;
mod synth;

pub use bundle::{make_bundle, round_half_up, RequestMode, SplitBundle, UnlearnRequest};
pub use csvio::{load_csv, write_csv};
pub use synth::{synth_generate, SynthSpec};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = features.dims2("dataset")?;
        if features.shape().len() != 2 {
            return Err(Error::Data(format!("features must be a matrix, got {:?}", features.shape())));
        }
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if n != labels.len() {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        if classes < 2 {
            return Err(Error::Data(format!("class count must be at least 2, got {classes}")));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!("row {i}: label {y} out of range for {classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; a dataset holds at least one row.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `idx`, in the given order. Fails if `idx` is empty.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Data("subset selects no rows".into()));
        }
        Ok(Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Row-wise concatenation of two datasets over the same feature space.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dims() != other.dims() || self.classes != other.classes {
            return Err(Error::Data(format!(
                "cannot concatenate datasets with {}×{} and {}×{} (dims×classes)",
                self.dims(),
                self.classes,
                other.dims(),
                other.classes
            )));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(Tensor::matrix(labels.len(), self.dims(), data)?, labels, self.classes)
    }

    /// One-hot label matrix `[n, C]`.
    pub fn one_hot(&self) -> Tensor {
        let c = self.classes;
        let mut data = vec![0.0; self.len() * c];
        for (i, &y) in self.labels.iter().enumerate() {
            data[i * c + y] = 1.0;
        }
        Tensor::matrix(self.len(), c, data).expect("one-hot shape")
    }

    pub fn indices_of_class(&self, class_id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class_id).collect()
    }

    /// Rescales every column to [0, 1] using this dataset's own ranges.
    pub fn min_max_scaled(&self) -> Dataset {
        let (n, d) = (self.len(), self.dims());
        let mut data = self.features.data().to_vec();
        for j in 0..d {
            let (lo, hi) = (0..n)
                .map(|i| data[i * d + j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            for i in 0..n {
                let v = &mut data[i * d + j];
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        Dataset {
            features: Tensor::matrix(n, d, data).expect("scaled shape"),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle split into (train, test) with `round(test_fraction·N)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction must be in (0, 1), got {test_fraction}")));
        }
        let n_test = round_half_up(test_fraction * self.len() as f64);
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::Data(format!(
                "test fraction {test_fraction} leaves an empty side for {} rows",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::seeded(seed));
        let (test_idx, train_idx) = order.split_at(n_test);
        Ok((self.subset(train_idx)?, self.subset(test_idx)?))
    }
}

#[cfg(test)]
mod tests;
