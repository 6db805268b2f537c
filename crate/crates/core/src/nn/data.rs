use crate::error::{Error, Result};
use crate::nn::layers::Act;
use crate::nn::loss::{class_weights, LossKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One class index per sample.
    Single { classes: usize, labels: Vec<usize> },
    /// Row-major `N x classes` binary indicators.
    Multi { classes: usize, values: Vec<f32> },
}

impl Targets {
    pub fn classes(&self) -> usize {
        match self {
            Targets::Single { classes, .. } | Targets::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Single { labels, .. } => labels.len(),
            Targets::Multi { classes, values } => values.len() / classes.max(&1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Single { classes, labels } => Targets::Single {
                classes: *classes,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            },
            Targets::Multi { classes, values } => Targets::Multi {
                classes: *classes,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
            },
        }
    }

    /// Loss a training set of these targets is optimized with.
    pub fn training_loss(&self) -> LossKind {
        match self {
            Targets::Single { .. } => LossKind::CrossEntropy,
            Targets::Multi { classes, values } => LossKind::WeightedOva(class_weights(values, *classes)),
        }
    }

    /// Labels of sample `i` as class indices.
    pub fn labels_of(&self, i: usize) -> Vec<usize> {
        match self {
            Targets::Single { labels, .. } => vec![labels[i]],
            Targets::Multi { classes, values } => (0..*classes)
                .filter(|&c| values[i * classes + c] > 0.5)
                .collect(),
        }
    }
}

/// A mini-batch: `N x H x W x C` inputs in [0, 1] plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub targets: Targets,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::Shape(format!("batch inputs must be NHWC, got {:?}", inputs.dims())));
        }
        if inputs.dims()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.dims()[0],
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn act(&self) -> Act<T> {
        let d = self.inputs.dims();
        Act {
            n: d[0],
            h: d[1],
            w: d[2],
            c: d[3],
            data: self.inputs.data().to_vec(),
        }
    }
}

/// An in-memory labeled split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    /// (height, width, channels) of every sample.
    pub dims: (usize, usize, usize),
    pub inputs: Vec<f32>,
    pub targets: Targets,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Batch<T> {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend(self.inputs[i * s..(i + 1) * s].iter().map(|&v| T::from_f32(v).unwrap()));
        }
        let (h, w, c) = self.dims;
        Batch {
            inputs: Tensor::new(vec![idx.len(), h, w, c], data).expect("consistent batch dims"),
            targets: self.targets.select(idx),
        }
    }
}
