//! Classification metrics: overall accuracy, average per-class accuracy,
//! and Cohen's kappa from a confusion matrix.

use crate::error::{Error, Result};

/// Confusion matrix (rows = truth, cols = prediction) with derived metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of all samples on the diagonal.
    pub overall_accuracy: f64,
    /// Mean of the per-class accuracies; classes with no samples are
    /// excluded rather than counted as zero.
    pub average_accuracy: f64,
    /// Chance-corrected agreement; 1 when expected agreement is 1.
    pub kappa: f64,
    /// Per-class accuracy; `None` for classes absent from the truth.
    pub per_class: Vec<Option<f64>>,
    pub total: u64,
}

/// Tally a confusion matrix from parallel truth/prediction vectors
/// (0-based class indices).
pub fn confusion_from_pairs(
    truth: &[usize],
    prediction: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if truth.len() != prediction.len() {
        return Err(Error::dim(format!(
            "{} truths vs {} predictions",
            truth.len(),
            prediction.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(prediction) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: num_classes,
            });
        }
        confusion[t][p] += 1;
    }
    Ok(confusion)
}

pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|row| row.len() != c) {
        return Err(Error::invalid(
            "confusion matrix must be square and nonempty".to_string(),
        ));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("confusion matrix has no samples".to_string()));
    }
    let totf = total as f64;

    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let overall = trace as f64 / totf;

    let mut per_class = Vec::with_capacity(c);
    for (i, row) in confusion.iter().enumerate() {
        let rowsum: u64 = row.iter().sum();
        per_class.push((rowsum > 0).then(|| confusion[i][i] as f64 / rowsum as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = present.iter().sum::<f64>() / present.len() as f64;

    let mut expected = 0.0;
    for i in 0..c {
        let rowsum: u64 = confusion[i].iter().sum();
        let colsum: u64 = confusion.iter().map(|row| row[i]).sum();
        expected += rowsum as f64 * colsum as f64 / (totf * totf);
    }
    let kappa = if (expected - 1.0).abs() < f64::EPSILON {
        1.0
    } else {
        (overall - expected) / (1.0 - expected)
    };

    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        overall_accuracy: overall,
        average_accuracy: average,
        kappa,
        per_class,
        total,
    })
}
