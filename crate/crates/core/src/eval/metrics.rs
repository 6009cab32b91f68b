//! Confusion counts and the scalar metrics derived from them. The positive
//! class is `Label::Parasitized`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Label;

pub const THRESHOLD: f64 = 0.5;

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub truth: Label,
    /// Positive-class probability.
    pub p: f64,
    pub predicted: Label,
}

impl PredictionRecord {
    pub fn new(id: usize, truth: Label, p: f64) -> Result<PredictionRecord> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(format!("probability {p} of sample {id} is outside [0, 1]")));
        }
        let predicted = if p >= THRESHOLD { Label::Parasitized } else { Label::Uninfected };
        Ok(PredictionRecord { id, truth, p, predicted })
    }

    pub fn is_correct(&self) -> bool {
        self.truth == self.predicted
    }

    /// Records for consecutive ids from parallel label and score lists.
    pub fn from_scores(labels: &[Label], scores: &[f64]) -> Result<Vec<PredictionRecord>> {
        if labels.len() != scores.len() {
            return Err(Error::Param(format!("{} labels but {} scores", labels.len(), scores.len())));
        }
        labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (&y, &p))| PredictionRecord::new(i, y, p))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same predictions scored with the other class as positive.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion(preds: &[PredictionRecord]) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Harness("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for r in preds {
        match (r.truth.is_positive(), r.predicted.is_positive()) {
            (true, true) => cm.tp += 1,
            (false, true) => cm.fp += 1,
            (true, false) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<BasicMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Metric("confusion matrix is empty".into()));
    }
    let mut degenerate = false;
    let accuracy = (cm.tp + cm.tn) as f64 / n as f64;
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(BasicMetrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
}

/// Trapezoidal area under the ROC curve, with tied scores forming one step.
pub fn roc_auc(preds: &[PredictionRecord]) -> Result<f64> {
    let pos = preds.iter().filter(|r| r.truth.is_positive()).count();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<(f64, bool)> = preds.iter().map(|r| (r.p, r.truth.is_positive())).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// All Table-7 metrics for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub loss: Option<f64>,
    pub degenerate: bool,
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "n", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1", "mcc", "auc", "loss", "degenerate",
];

impl MetricsReport {
    pub fn from_predictions(preds: &[PredictionRecord], loss: Option<f64>) -> Result<MetricsReport> {
        let cm = confusion(preds)?;
        let b = basic_metrics(&cm)?;
        let auc = match roc_auc(preds) {
            Ok(a) => Some(a),
            Err(Error::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            n: cm.total(),
            confusion: cm,
            accuracy: b.accuracy,
            precision: b.precision,
            recall: b.recall,
            f1: b.f1,
            mcc: mcc(&cm),
            auc,
            loss,
            degenerate: b.degenerate,
        })
    }

    fn values(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let c = &self.confusion;
        vec![
            self.n.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.precision),
            format!("{:.6}", self.recall),
            format!("{:.6}", self.f1),
            format!("{:.6}", self.mcc),
            opt(self.auc),
            opt(self.loss),
            self.degenerate.to_string(),
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        REPORT_COLUMNS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {}\n", if v.is_empty() { "n/a" } else { &v }))
            .collect()
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.values().join(",")
    }
}
