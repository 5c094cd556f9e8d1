/// `counts[true][pred]` for labels and predictions in `0..k`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    assert_eq!(predictions.len(), labels.len(), "one prediction per label");
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// F1 of every class; a class with no true positives scores 0, including
/// classes absent from both labels and predictions.
pub fn per_class_f1(predictions: &[usize], labels: &[usize], k: usize) -> Vec<f64> {
    let m = confusion_matrix(predictions, labels, k);
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: usize = (0..k).map(|r| m[r][c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

/// Unweighted mean of the per-class F1 scores over all `k` classes.
pub fn macro_f1(predictions: &[usize], labels: &[usize], k: usize) -> f64 {
    per_class_f1(predictions, labels, k).iter().sum::<f64>() / k as f64
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3), 1.0);
    }

    #[test]
    fn one_of_each_outcome() {
        // TP=1, FP=1, FN=1, TN=1 for class 1.
        let f = macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_on_balanced_four_classes() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let f = macro_f1(&[0; 8], &labels, 4);
        assert!((f - 0.1).abs() < 1e-12, "{f}");
    }

    #[test]
    fn absent_class_counts_as_zero() {
        assert!((macro_f1(&[0, 1], &[0, 1], 3) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
