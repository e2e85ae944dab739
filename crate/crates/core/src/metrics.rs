//! Evaluation metrics and the modality-gap diagnostic.
//!
//! Multiclass AUC is the macro one-vs-rest average of the rank statistic
//! (ties count one half), over classes that have true members. AUPRC is the
//! step-wise average precision `Σ (R_k − R_{k−1}) · P_k`. F1 scores use the
//! classes present in truth or prediction, with 0 for undefined precision.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CfcmlError, Result};
use crate::tensor::Matrix;

pub const REPORT_SCHEMA: &str = "cfcml-eval/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub acc: f64,
    /// Recall per class; `None` when the class has no true members.
    pub per_class_acc: Vec<Option<f64>>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    /// `None` when fewer than two classes occur in the truth.
    pub auc_macro_ovr: Option<f64>,
}

impl MulticlassMetrics {
    pub fn class_acc(&self, class: usize) -> Result<f64> {
        self.per_class_acc
            .get(class)
            .copied()
            .flatten()
            .ok_or_else(|| CfcmlError::UndefinedMetric(format!("class {class} has no true members")))
    }

    pub fn auc(&self) -> Result<f64> {
        self.auc_macro_ovr
            .ok_or_else(|| CfcmlError::UndefinedMetric("AUC needs two classes in the truth".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub sen: f64,
    pub spe: f64,
    pub g_mean: f64,
    pub ba_acc: f64,
    pub auprc: f64,
    pub auc: f64,
}

impl BinaryMetrics {
    /// Derives `g_mean` and `ba_acc` from the two rates.
    pub fn from_rates(sen: f64, spe: f64, auprc: f64, auc: f64) -> Self {
        Self {
            sen,
            spe,
            g_mean: (sen * spe).sqrt(),
            ba_acc: (sen + spe) / 2.0,
            auprc,
            auc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub split: String,
    pub n_samples: usize,
    /// True members per class.
    pub counts: Vec<usize>,
    pub multiclass: MulticlassMetrics,
    /// Present for two-class problems, class 1 positive.
    pub binary: Option<BinaryMetrics>,
    pub auc_variant: String,
    pub auprc_variant: String,
    /// SHA-256 of the configuration text.
    pub config_digest: String,
}

impl EvalReport {
    pub fn build(
        split: &str,
        y_true: &[usize],
        probs: &Matrix,
        config_text: &str,
    ) -> Result<Self> {
        let n_classes = probs.cols();
        let y_pred = argmax_rows(probs);
        let multiclass = compute_multiclass_metrics(y_true, &y_pred, probs)?;
        let binary = if n_classes == 2 {
            let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, 1)).collect();
            compute_binary_metrics(y_true, &scores).ok()
        } else {
            None
        };
        let mut counts = vec![0; n_classes];
        for &y in y_true {
            counts[y] += 1;
        }
        Ok(Self {
            schema: REPORT_SCHEMA.into(),
            split: split.into(),
            n_samples: y_true.len(),
            counts,
            multiclass,
            binary,
            auc_variant: "macro one-vs-rest rank statistic".into(),
            auprc_variant: "step-wise average precision".into(),
            config_digest: config_digest(config_text),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CfcmlError::Config(format!("report: {e}")))
    }
}

pub fn config_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

/// Mann–Whitney AUC with averaged ranks for ties. `None` if either class
/// is empty.
pub fn rank_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Step-wise average precision. `None` without positives.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if positive[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(CfcmlError::Shape(format!("metric inputs of lengths {a} and {b}")));
    }
    Ok(())
}

pub fn compute_multiclass_metrics(y_true: &[usize], y_pred: &[usize], probs: &Matrix) -> Result<MulticlassMetrics> {
    check_lengths(y_true.len(), y_pred.len())?;
    check_lengths(y_true.len(), probs.rows())?;
    let k = probs.cols();
    if let Some(&y) = y_true.iter().chain(y_pred).find(|&&y| y >= k) {
        return Err(CfcmlError::Shape(format!("label {y} outside {k} classes")));
    }
    let n = y_true.len();
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let acc = tp.iter().sum::<usize>() as f64 / n as f64;
    let per_class_acc = (0..k)
        .map(|c| (support[c] > 0).then(|| tp[c] as f64 / support[c] as f64))
        .collect();
    let f1 = |c: usize| {
        let denom = support[c] + predicted[c];
        if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        }
    };
    let labels: Vec<usize> = (0..k).filter(|&c| support[c] + predicted[c] > 0).collect();
    let macro_f1 = labels.iter().map(|&c| f1(c)).sum::<f64>() / labels.len() as f64;
    let weighted_f1 = labels.iter().map(|&c| f1(c) * support[c] as f64).sum::<f64>() / n as f64;
    let aucs: Vec<f64> = (0..k)
        .filter(|&c| support[c] > 0)
        .filter_map(|c| {
            let positive: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
            let scores: Vec<f64> = (0..n).map(|r| probs.get(r, c)).collect();
            rank_auc(&positive, &scores)
        })
        .collect();
    let present = support.iter().filter(|&&s| s > 0).count();
    let auc_macro_ovr = (present >= 2).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(MulticlassMetrics {
        acc,
        per_class_acc,
        weighted_f1,
        macro_f1,
        auc_macro_ovr,
    })
}

/// `y_true ∈ {0, 1}`, `scores` the positive-class probability; the decision
/// threshold is 0.5.
pub fn compute_binary_metrics(y_true: &[usize], scores: &[f64]) -> Result<BinaryMetrics> {
    check_lengths(y_true.len(), scores.len())?;
    if y_true.iter().any(|&y| y > 1) {
        return Err(CfcmlError::Shape("binary metrics need labels in {0, 1}".into()));
    }
    let positive: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == y_true.len() {
        return Err(CfcmlError::UndefinedMetric("binary metrics need both classes in the truth".into()));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&p, &s) in positive.iter().zip(scores) {
        match (p, s >= 0.5) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let sen = tp as f64 / n_pos as f64;
    let spe = tn as f64 / (y_true.len() - n_pos) as f64;
    let auc = rank_auc(&positive, scores).expect("both classes present");
    let auprc = average_precision(&positive, scores).expect("positives present");
    Ok(BinaryMetrics::from_rates(sen, spe, auprc, auc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Mean cosine over cross-modality pairs of the same class.
    pub intra: f64,
    /// Mean cosine over cross-modality pairs of different classes.
    pub inter: f64,
    pub gap: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

impl GapReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `features` is `(B·M) × C` with row `i·M + j`.
pub fn compute_gap_report(features: &Matrix, labels: &[usize], modalities: usize) -> Result<GapReport> {
    if modalities < 2 || features.rows() != labels.len() * modalities {
        return Err(CfcmlError::UndefinedMetric(format!(
            "gap needs ≥ 2 modalities and one row per (sample, modality); got {} rows for {} samples × {modalities}",
            features.rows(),
            labels.len()
        )));
    }
    let norms: Vec<f64> = (0..features.rows())
        .map(|r| features.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let (mut intra, mut inter, mut n_intra, mut n_inter) = (0.0, 0.0, 0usize, 0usize);
    for (i, &yi) in labels.iter().enumerate() {
        for j in 0..modalities {
            let a = i * modalities + j;
            for (k, &yk) in labels.iter().enumerate().skip(i) {
                for jp in 0..modalities {
                    if jp == j || (k == i && jp < j) {
                        continue;
                    }
                    let b = k * modalities + jp;
                    let dot: f64 = features.row(a).iter().zip(features.row(b)).map(|(x, y)| x * y).sum();
                    let cos = dot / (norms[a] * norms[b]);
                    if yi == yk {
                        intra += cos;
                        n_intra += 1;
                    } else {
                        inter += cos;
                        n_inter += 1;
                    }
                }
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(CfcmlError::UndefinedMetric("gap needs ≥ 2 classes".into()));
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    Ok(GapReport {
        intra,
        inter,
        gap: intra - inter,
        intra_pairs: n_intra,
        inter_pairs: n_inter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize], k: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), k);
        for (r, &l) in labels.iter().enumerate() {
            m.set(r, l, 1.0);
        }
        m
    }

    #[test]
    fn perfect_three_class_predictions() {
        let y = [0, 1, 2, 2, 1, 0];
        let m = compute_multiclass_metrics(&y, &y, &onehot(&y, 3)).unwrap();
        assert_eq!((m.acc, m.macro_f1, m.weighted_f1), (1.0, 1.0, 1.0));
        assert_eq!(m.auc().unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let y = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        let m = compute_multiclass_metrics(&y, &pred, &onehot(&pred, 2)).unwrap();
        assert_eq!(m.acc, 0.5);
        // Class 0: P = 1/2, R = 1, F1 = 2/3; class 1: F1 = 0.
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_acc, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn single_class_truth_leaves_auc_undefined() {
        let y = [1, 1, 1];
        let m = compute_multiclass_metrics(&y, &[1, 0, 1], &onehot(&[1, 0, 1], 3)).unwrap();
        assert!(matches!(m.auc(), Err(CfcmlError::UndefinedMetric(_))));
        assert!(matches!(m.class_acc(0), Err(CfcmlError::UndefinedMetric(_))));
        assert!(matches!(
            compute_binary_metrics(&[0, 0], &[0.1, 0.7]),
            Err(CfcmlError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn binary_rates() {
        let m = compute_binary_metrics(&[1, 1, 1, 0, 0], &[0.9, 0.6, 0.2, 0.4, 0.7]).unwrap();
        assert!((m.sen - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.spe - 0.5).abs() < 1e-12);
        assert!((m.g_mean - (m.sen * m.spe).sqrt()).abs() < 1e-15);
        let perfect = compute_binary_metrics(&[0, 1, 1], &[0.1, 0.8, 0.9]).unwrap();
        assert_eq!((perfect.auc, perfect.auprc), (1.0, 1.0));
    }

    #[test]
    fn average_precision_hand_example() {
        // Scores sorted: 0.9 (+), 0.8 (−), 0.7 (+): AP = 0.5·1 + 0.5·(2/3).
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn gap_constructed_cases() {
        let same = Matrix::filled(4, 3, 0.5);
        let r = compute_gap_report(&same, &[0, 1], 2).unwrap();
        assert!((r.intra - 1.0).abs() < 1e-12 && (r.inter - 1.0).abs() < 1e-12 && r.gap.abs() < 1e-12);
        let ortho = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = compute_gap_report(&ortho, &[0, 1], 2).unwrap();
        assert_eq!((r.intra, r.inter, r.gap), (1.0, 0.0, 1.0));
        assert!(compute_gap_report(&ortho, &[0, 0], 2).is_err());
        assert!(compute_gap_report(&Matrix::zeros(2, 2), &[0, 1], 1).is_err());
    }

    #[test]
    fn report_round_trips() {
        let y = [0, 1, 1, 0];
        let probs = Matrix::from_rows(&[[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]).unwrap();
        let r = EvalReport::build("val", &y, &probs, "seed = 1\n").unwrap();
        assert!(r.binary.is_some());
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.config_digest.len(), 64);
    }
}
