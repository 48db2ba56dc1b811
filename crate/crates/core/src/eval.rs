//! Confusion matrices, accuracy, macro F1, average precision and prediction traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{segment, SegmentOptions, Trial, WindowSample, ACTIVITY_CLASSES};
use crate::network::{NetworkError, Pipeline, TrainedFold, WindowPrediction, PBD_CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Rows are truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes > 0, "confusion matrix needs at least one class");
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        ConfusionMatrix { classes: k, counts: rows.concat() }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    fn non_empty(&self) -> Result<(), EvalError> {
        if self.total() == 0 {
            return Err(EvalError::Contract("confusion matrix is empty".into()));
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64, EvalError> {
        self.non_empty()?;
        let diag: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(diag as f64 / self.total() as f64)
    }

    /// F1 of each class; 0 where precision + recall is 0.
    pub fn per_class_f1(&self) -> Result<Vec<f64>, EvalError> {
        self.non_empty()?;
        Ok((0..self.classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let predicted: u64 = (0..self.classes).map(|t| self.get(t, k)).sum();
                let actual: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 }
            })
            .collect())
    }

    pub fn macro_f1(&self) -> Result<f64, EvalError> {
        let f1 = self.per_class_f1()?;
        Ok(f1.iter().sum::<f64>() / f1.len() as f64)
    }
}

/// Precision-recall points at each distinct score threshold, from high to low.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
    /// Average precision `Σ (R_i − R_{i−1}) · P_i`.
    pub auc: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in &self.points {
            out.push_str(&format!("{r},{p}\n"));
        }
        out
    }
}

/// Average precision of protective scores. Items are ordered by descending score,
/// then ascending `ids`; tied scores form a single threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool], ids: &[usize]) -> Result<PrCurve, EvalError> {
    if scores.len() != labels.len() || scores.len() != ids.len() {
        return Err(EvalError::Contract("scores, labels and ids differ in length".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::Contract(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(EvalError::Contract("no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut auc = 0.0;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] { tp += 1 } else { fp += 1 }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve { points, auc })
}

/// One row of a per-window prediction timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub window_start: usize,
    pub true_act: u8,
    pub pred_act: Option<u8>,
    pub true_prot: bool,
    pub pred_prot: bool,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("window_start,true_act,pred_act,true_prot,pred_prot\n");
    for r in rows {
        let pred_act = r.pred_act.map_or_else(String::new, |a| a.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.window_start, r.true_act, pred_act, r.true_prot as u8, r.pred_prot as u8
        ));
    }
    out
}

impl From<&WindowPrediction> for TraceRow {
    fn from(p: &WindowPrediction) -> Self {
        TraceRow {
            window_start: p.window_start,
            true_act: p.true_act,
            pred_act: p.pred_act,
            true_prot: p.true_prot,
            pred_prot: p.pred_prot,
        }
    }
}

/// Per-window predictions of a test trial, aligned with `segment`.
pub fn trace(
    trial: &Trial,
    pipeline: &Pipeline,
    trained: &TrainedFold,
    opts: &SegmentOptions,
) -> Result<Vec<TraceRow>, EvalError> {
    if trial.subject_id != trained.test_subject {
        return Err(EvalError::Contract(format!(
            "trial {} does not belong to test subject {}",
            trial.id(),
            trained.test_subject
        )));
    }
    let windows = segment(trial, opts, 0);
    let refs: Vec<&WindowSample> = windows.iter().collect();
    Ok(pipeline.predict(trained, &refs)?.iter().map(TraceRow::from).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Rows are truth, columns are predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl ClassMetrics {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self, EvalError> {
        Ok(ClassMetrics {
            accuracy: cm.accuracy()?,
            macro_f1: cm.macro_f1()?,
            per_class_f1: cm.per_class_f1()?,
            confusion: cm.rows(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub test_subject: String,
    pub windows: usize,
    pub har: Option<ClassMetrics>,
    pub pbd: ClassMetrics,
    /// `None` when the test subject has no protective windows.
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub windows: usize,
    /// Activity metrics over all test windows of all folds.
    pub har: Option<ClassMetrics>,
    /// Unweighted mean of per-fold activity accuracy.
    pub har_fold_mean_accuracy: Option<f64>,
    pub pbd: ClassMetrics,
    pub pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub sensor_set: String,
    pub folds: Vec<FoldMetrics>,
    pub pooled: PooledMetrics,
}

fn matrices(preds: &[WindowPrediction]) -> (Option<ConfusionMatrix>, ConfusionMatrix) {
    let har = preds.iter().all(|p| p.pred_act.is_some()).then(|| {
        ConfusionMatrix::from_pairs(
            ACTIVITY_CLASSES,
            preds.iter().map(|p| (p.true_act as usize, p.pred_act.unwrap_or(0) as usize)),
        )
    });
    let pbd = ConfusionMatrix::from_pairs(PBD_CLASSES, preds.iter().map(|p| (p.true_prot as usize, p.pred_prot as usize)));
    (har, pbd)
}

fn curve(preds: &[&WindowPrediction]) -> Result<PrCurve, EvalError> {
    let scores: Vec<f64> = preds.iter().map(|p| p.prot_score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.true_prot).collect();
    let ids: Vec<usize> = preds.iter().map(|p| p.window_id).collect();
    pr_auc(&scores, &labels, &ids)
}

/// PR curve over the protective scores of every fold.
pub fn pooled_curve(folds: &[(String, Vec<WindowPrediction>)]) -> Result<PrCurve, EvalError> {
    curve(&folds.iter().flat_map(|(_, p)| p).collect::<Vec<_>>())
}

/// Per-fold and pooled metrics. `folds` pairs each test subject with its predictions.
pub fn build_report(
    strategy: &str,
    sensor_set: &str,
    folds: &[(String, Vec<WindowPrediction>)],
) -> Result<MetricsReport, EvalError> {
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut pooled_pbd = ConfusionMatrix::new(PBD_CLASSES);
    let mut pooled_har = Some(ConfusionMatrix::new(ACTIVITY_CLASSES));
    for (subject, preds) in folds {
        if preds.is_empty() {
            return Err(EvalError::Contract(format!("fold {subject} has no test windows")));
        }
        let (har, pbd) = matrices(preds);
        pooled_pbd.merge(&pbd);
        pooled_har = match (pooled_har, &har) {
            (Some(mut acc), Some(h)) => {
                acc.merge(h);
                Some(acc)
            }
            _ => None,
        };
        let auc = if preds.iter().any(|p| p.true_prot) {
            Some(curve(&preds.iter().collect::<Vec<_>>())?.auc)
        } else {
            None
        };
        per_fold.push(FoldMetrics {
            test_subject: subject.clone(),
            windows: preds.len(),
            har: har.as_ref().map(ClassMetrics::from_matrix).transpose()?,
            pbd: ClassMetrics::from_matrix(&pbd)?,
            pr_auc: auc,
        });
    }
    if per_fold.is_empty() {
        return Err(EvalError::Contract("no folds to report".into()));
    }
    let har_fold_mean_accuracy = per_fold
        .iter()
        .map(|f| f.har.as_ref().map(|h| h.accuracy))
        .collect::<Option<Vec<f64>>>()
        .map(|a| a.iter().sum::<f64>() / a.len() as f64);
    let pooled = PooledMetrics {
        windows: per_fold.iter().map(|f| f.windows).sum(),
        har: pooled_har.as_ref().map(ClassMetrics::from_matrix).transpose()?,
        har_fold_mean_accuracy,
        pbd: ClassMetrics::from_matrix(&pooled_pbd)?,
        pr_auc: pooled_curve(folds)?.auc,
    };
    Ok(MetricsReport { strategy: strategy.into(), sensor_set: sensor_set.into(), folds: per_fold, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_matrix_is_perfect() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 0], vec![0, 50]]);
        assert_eq!(cm.accuracy().unwrap(), 1.0);
        assert_eq!(cm.macro_f1().unwrap(), 1.0);
    }

    #[test]
    fn two_by_two_macro_f1() {
        let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]);
        let f1 = cm.per_class_f1().unwrap();
        assert!((f1[0] - 0.727272).abs() < 1e-4 && (f1[1] - 0.666667).abs() < 1e-4);
        assert!((cm.macro_f1().unwrap() - 0.6970).abs() < 1e-4);
        assert_eq!(cm.accuracy().unwrap(), 0.7);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 1, 0], vec![2, 4, 0], vec![0, 0, 0]]);
        assert_eq!(cm.per_class_f1().unwrap()[2], 0.0);
        assert!(ConfusionMatrix::new(3).macro_f1().is_err());
    }

    #[test]
    fn ap_examples() {
        let c = pr_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false], &[0, 1, 2, 3]).unwrap();
        assert!((c.auc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let perfect = pr_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false], &[0, 1, 2, 3]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        let flat = pr_auc(&[0.5; 5], &[true, false, false, true, false], &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(flat.auc, 2.0 / 5.0);
        assert!(pr_auc(&[0.5], &[false], &[0]).is_err());
    }

    fn pred(id: usize, act: u8, pred_act: u8, prot: bool, score: f64) -> WindowPrediction {
        WindowPrediction {
            window_id: id,
            subject_id: "S".into(),
            trial_id: "S_normal".into(),
            window_start: id * 90,
            true_act: act,
            pred_act: Some(pred_act),
            true_prot: prot,
            pred_prot: score >= 0.5,
            prot_score: score,
        }
    }

    #[test]
    fn pooled_report_merges_folds() {
        let a = vec![pred(0, 1, 1, true, 0.9), pred(1, 2, 3, false, 0.2)];
        let b = vec![pred(2, 0, 0, false, 0.6), pred(3, 4, 4, false, 0.1)];
        let folds = vec![("A".to_string(), a.clone()), ("B".to_string(), b.clone())];
        let r = build_report("PretrainedFrozen", "full22", &folds).unwrap();
        assert_eq!(r.pooled.windows, 4);
        assert_eq!(r.pooled.har.as_ref().unwrap().accuracy, 0.75);
        assert_eq!(r.pooled.har_fold_mean_accuracy, Some(0.75));
        assert_eq!(r.folds[1].pr_auc, None);
        let all: Vec<_> = a.iter().chain(&b).collect();
        assert_eq!(r.pooled.pr_auc, curve(&all).unwrap().auc);
        assert_eq!(r.pooled.pbd.confusion, vec![vec![2, 1], vec![0, 1]]);
    }

    #[test]
    fn trace_csv_leaves_missing_activity_blank() {
        let mut p = pred(0, 1, 1, true, 0.9);
        p.pred_act = None;
        assert_eq!(
            trace_to_csv(&[TraceRow::from(&p)]),
            "window_start,true_act,pred_act,true_prot,pred_prot\n0,1,,1,1\n"
        );
    }

    #[test]
    fn curve_csv_has_header() {
        let c = pr_auc(&[0.9, 0.1], &[true, false], &[0, 1]).unwrap();
        assert_eq!(c.to_csv(), "recall,precision\n1,1\n1,0.5\n");
    }

    proptest! {
        #[test]
        fn ap_invariant_to_monotone_transform(
            items in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60)
        ) {
            let labels: Vec<bool> = items.iter().map(|i| i.1).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let scores: Vec<f64> = items.iter().map(|i| (i.0 * 20.0).round() / 20.0).collect();
            let ids: Vec<usize> = (0..items.len()).collect();
            let a = pr_auc(&scores, &labels, &ids).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let b = pr_auc(&t, &labels, &ids).unwrap();
            prop_assert_eq!(a.auc, b.auc);
            prop_assert!((0.0..=1.0).contains(&a.auc));
            prop_assert!(a.points.windows(2).all(|w| w[0].0 <= w[1].0));
        }

        #[test]
        fn macro_f1_invariant_to_class_relabeling(
            counts in prop::collection::vec(0u64..30, 9),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let cm = ConfusionMatrix { classes: 3, counts: counts.clone() };
            let mut pc = ConfusionMatrix::new(3);
            for t in 0..3 {
                for p in 0..3 {
                    pc.counts[perm[t] * 3 + perm[p]] = cm.get(t, p);
                }
            }
            prop_assert!((cm.macro_f1().unwrap() - pc.macro_f1().unwrap()).abs() < 1e-12);
        }
    }
}
