use crate::error::{Error, Result};
use crate::nn::IGNORE_INDEX;

/// `K×K` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// `None` for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Set when no class had a non-empty union (the mean is then 0).
    pub empty: bool,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::invalid("confusion_matrix", format!("{} counts for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per `(prediction, label)` pair, skipping ignored labels.
    pub fn accumulate(&mut self, predictions: &[usize], labels: &[u32]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("confusion_matrix", &[predictions.len()], &[labels.len()]));
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == IGNORE_INDEX {
                continue;
            }
            if l as usize >= self.k || p >= self.k {
                return Err(Error::invalid(
                    "confusion_matrix",
                    format!("class id out of range (label {l}, prediction {p}, {} classes)", self.k),
                ));
            }
            self.counts[l as usize * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("confusion_matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU `cm[k,k] / (row_k + col_k − cm[k,k])`; classes with an
/// empty union are excluded from the mean.
pub fn miou(cm: &ConfusionMatrix) -> MiouResult {
    let k = cm.k;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        log::warn!("mIoU of an empty confusion matrix is reported as 0");
        return MiouResult {
            per_class,
            mean: 0.0,
            empty: true,
        };
    }
    MiouResult {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        empty: false,
    }
}
