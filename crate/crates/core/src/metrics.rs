//! Evaluation metrics: batch-mixing via k-NN label prediction, rank
//! correlation diagnostics, and scoring of fitted variance fractions
//! against ground truth.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::decomp::VarianceReport;
use crate::error::{Error, Result};
use crate::synth::FractionTable;

/// Cross-validated accuracy of a k-nearest-neighbour classifier predicting
/// binary labels from an embedding. Folds are assigned deterministically by
/// row index modulo `folds`; ties in distance break by row index.
///
/// Accuracy near 0.5 means the labels are not recoverable from the
/// embedding, i.e. the batches are well mixed.
pub fn knn_cv_accuracy(
    embedding: &ArrayView2<f64>,
    labels: &[f64],
    k: usize,
    folds: usize,
) -> Result<f64> {
    let n = embedding.nrows();
    if labels.len() != n {
        return Err(Error::shape(
            "knn labels",
            format!("{n}"),
            format!("{}", labels.len()),
        ));
    }
    if k == 0 || folds < 2 || n < folds * 2 {
        return Err(Error::Argument(
            "need k >= 1, folds >= 2 and at least 2 rows per fold".into(),
        ));
    }
    let mut correct = 0usize;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let fold = i % folds;
        dists.clear();
        for j in 0..n {
            if j % folds == fold {
                continue;
            }
            let mut d = 0.0;
            for c in 0..embedding.ncols() {
                let diff = embedding[[i, c]] - embedding[[j, c]];
                d += diff * diff;
            }
            dists.push((d, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let kk = k.min(dists.len());
        let votes: f64 = dists[..kk].iter().map(|&(_, j)| labels[j]).sum();
        let predicted = if votes * 2.0 > kk as f64 {
            1.0
        } else if votes * 2.0 < kk as f64 {
            0.0
        } else {
            labels[dists[0].1]
        };
        if predicted == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Spearman rank correlation between two sequences.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(
            "spearman needs two equally long sequences of length >= 2".into(),
        ));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let x = ra[i] - mean;
        let y = rb[i] - mean;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    if da == 0.0 || db == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap().then(i.cmp(&j)));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Per-feature and aggregate agreement between a fitted variance report
/// and the ground-truth fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSummary {
    /// `sum_terms |fraction_est - fraction_true|` per feature.
    pub per_feature_l1: Vec<f64>,
    pub mean_l1: f64,
    pub max_l1: f64,
}

/// L1 distance between estimated and true term fractions, summed over
/// terms, per feature. Term sets must match exactly.
pub fn score_against_truth(
    report: &VarianceReport,
    truth: &FractionTable,
) -> Result<ScoreSummary> {
    if report.n_features() != truth.n_features() {
        return Err(Error::Argument(format!(
            "feature count mismatch: report has {}, truth has {}",
            report.n_features(),
            truth.n_features()
        )));
    }
    let mut missing: Vec<&str> = Vec::new();
    let mut mapping = Vec::with_capacity(report.term_labels.len());
    for label in &report.term_labels {
        match truth.term_labels.iter().position(|t| t == label) {
            Some(idx) => mapping.push(idx),
            None => missing.push(label),
        }
    }
    let extra: Vec<&str> = truth
        .term_labels
        .iter()
        .filter(|t| !report.term_labels.contains(t))
        .map(|s| s.as_str())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Key(format!(
            "term sets differ: report-only {missing:?}, truth-only {extra:?}"
        )));
    }
    let p = report.n_features();
    let mut per_feature = Vec::with_capacity(p);
    for j in 0..p {
        let mut l1 = 0.0;
        for (ti, &tj) in mapping.iter().enumerate() {
            l1 += (report.fractions[[j, ti]] - truth.fractions[[j, tj]]).abs();
        }
        per_feature.push(l1);
    }
    let mean = per_feature.iter().sum::<f64>() / p as f64;
    let max = per_feature.iter().cloned().fold(0.0, f64::max);
    Ok(ScoreSummary {
        per_feature_l1: per_feature,
        mean_l1: mean,
        max_l1: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn knn_perfectly_separated_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let n = 100;
        let mut emb = Array2::zeros((n, 2));
        let mut labels = vec![0.0; n];
        for i in 0..n {
            let label = (i / 50) as f64;
            labels[i] = label;
            emb[[i, 0]] = label * 10.0 + rng.random_range(-0.5..0.5);
            emb[[i, 1]] = rng.random_range(-0.5..0.5);
        }
        let acc = knn_cv_accuracy(&emb.view(), &labels, 5, 5).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn knn_shuffled_labels_near_chance() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 400;
        let emb = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<f64> = (0..n)
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let acc = knn_cv_accuracy(&emb.view(), &labels, 5, 5).unwrap();
        assert!((acc - 0.5).abs() < 0.12, "accuracy {acc}");
    }

    #[test]
    fn spearman_detects_monotone_relation() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
        let rho = spearman(&a, &b).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    fn report_from(fractions: Array2<f64>, labels: Vec<String>) -> VarianceReport {
        let (p, _t) = fractions.dim();
        VarianceReport {
            feature_names: (0..p).map(|j| format!("f{j}")).collect(),
            term_labels: labels,
            term_variances: fractions.clone(),
            noise_variance: Array1::zeros(p),
            total_variance: Array1::ones(p),
            fractions,
            noise_fraction: Array1::zeros(p),
            residual: Array1::zeros(p),
        }
    }

    fn truth_from(fractions: Array2<f64>, labels: Vec<String>) -> FractionTable {
        let p = fractions.nrows();
        FractionTable {
            term_labels: labels,
            subsets: vec![vec![0], vec![1], vec![0, 1]],
            variances: fractions.clone(),
            fractions,
            noise_fraction: Array1::zeros(p),
        }
    }

    #[test]
    fn score_zero_when_report_equals_truth() {
        let labels = vec!["z".to_string(), "c".to_string(), "z:c".to_string()];
        let f = ndarray::array![[0.7, 0.2, 0.1], [0.0, 0.5, 0.5]];
        let s = score_against_truth(
            &report_from(f.clone(), labels.clone()),
            &truth_from(f, labels),
        )
        .unwrap();
        assert_eq!(s.mean_l1, 0.0);
        assert_eq!(s.max_l1, 0.0);
    }

    #[test]
    fn score_counts_misplaced_mass_twice() {
        // All mass on the interaction for a pure-z feature: L1 = 2 * true z fraction.
        let labels = vec!["z".to_string(), "c".to_string(), "z:c".to_string()];
        let truth = truth_from(ndarray::array![[0.8, 0.0, 0.0]], labels.clone());
        let report = report_from(ndarray::array![[0.0, 0.0, 0.8]], labels);
        let s = score_against_truth(&report, &truth).unwrap();
        assert!((s.per_feature_l1[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_mismatched_term_sets() {
        let truth = truth_from(
            ndarray::array![[0.8, 0.0, 0.0]],
            vec!["z".into(), "c".into(), "z:c".into()],
        );
        let report = report_from(
            ndarray::array![[0.8, 0.0, 0.0]],
            vec!["z".into(), "c".into(), "q".into()],
        );
        let err = score_against_truth(&report, &truth).unwrap_err();
        match err {
            Error::Key(msg) => {
                assert!(msg.contains("q") && msg.contains("z:c"), "{msg}");
            }
            other => panic!("expected key error, got {other:?}"),
        }
    }
}
