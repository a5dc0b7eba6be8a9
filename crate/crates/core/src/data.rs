use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// Labelled examples held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Config(format!(
                "dataset inputs need a leading example dimension, got {:?}",
                inputs.shape()
            )));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidLabel {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let batch = self.batch(indices)?;
        Dataset::new(batch.inputs, batch.labels, self.num_classes)
    }

    /// Consecutive batches in storage order; the last may be short.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.batch(&idx).expect("indices in range")
        })
    }
}
