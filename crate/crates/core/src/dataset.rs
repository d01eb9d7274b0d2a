use crate::error::{FedError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample<T> {
    pub features: Vec<T>,
    pub label: usize,
    pub domain: usize,
}

/// Feature vectors with class labels and domain tags.
///
/// All labels are `< num_classes`, all domains `< num_domains` and every
/// example has the same feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    examples: Vec<LabeledExample<T>>,
    num_classes: usize,
    num_domains: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        examples: Vec<LabeledExample<T>>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        if num_classes == 0 || num_domains == 0 {
            return Err(FedError::config(
                "dataset needs at least one class and one domain",
            ));
        }
        if let Some(first) = examples.first() {
            let dim = first.features.len();
            for (i, ex) in examples.iter().enumerate() {
                if ex.features.len() != dim {
                    return Err(FedError::shape(format!(
                        "example {i} has {} features, expected {dim}",
                        ex.features.len()
                    )));
                }
                if ex.label >= num_classes {
                    return Err(FedError::config(format!(
                        "example {i} has label {} >= {num_classes}",
                        ex.label
                    )));
                }
                if ex.domain >= num_domains {
                    return Err(FedError::config(format!(
                        "example {i} has domain {} >= {num_domains}",
                        ex.domain
                    )));
                }
            }
        }
        Ok(Self {
            examples,
            num_classes,
            num_domains,
        })
    }

    pub fn examples(&self) -> &[LabeledExample<T>] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.len())
    }

    /// New dataset holding the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Indices grouped by `(domain, class)`, each list in ascending order.
    pub(crate) fn cell_indices(&self) -> Vec<Vec<Vec<usize>>> {
        let mut cells = vec![vec![Vec::new(); self.num_classes]; self.num_domains];
        for (i, ex) in self.examples.iter().enumerate() {
            cells[ex.domain][ex.label].push(i);
        }
        cells
    }
}
