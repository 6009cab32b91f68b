//! Patient-level diagnosis: a patient is positive when any of their cells is.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{roc_auc, PredictionRecord};
use crate::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient: String,
    pub cells: usize,
    pub truth: Label,
    pub predicted: Label,
    pub max_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    /// Sorted by patient id.
    pub patients: Vec<PatientResult>,
    pub accuracy: f64,
    /// Over max cell probability; absent when all patients share one truth.
    pub auc: Option<f64>,
}

/// Groups cell predictions by `patient_of[record.id]`. A patient is truly
/// infected when any cell is labelled parasitized.
pub fn patient_diagnose(preds: &[PredictionRecord], patient_of: &HashMap<usize, String>) -> Result<PatientReport> {
    if preds.is_empty() {
        return Err(Error::Harness("no predictions to group by patient".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in preds {
        let p = patient_of
            .get(&r.id)
            .ok_or_else(|| Error::Join(format!("sample {} has no patient id", r.id)))?;
        groups.entry(p).or_default().push(r);
    }
    let patients: Vec<PatientResult> = groups
        .into_iter()
        .map(|(p, cells)| {
            let any = |f: &dyn Fn(&PredictionRecord) -> bool| cells.iter().any(|c| f(c));
            let to_label = |b: bool| if b { Label::Parasitized } else { Label::Uninfected };
            PatientResult {
                patient: p.to_string(),
                cells: cells.len(),
                truth: to_label(any(&|c| c.truth.is_positive())),
                predicted: to_label(any(&|c| c.predicted.is_positive())),
                max_probability: cells.iter().map(|c| c.p).fold(0.0, f64::max),
            }
        })
        .collect();
    let hits = patients.iter().filter(|p| p.truth == p.predicted).count();
    let level: Vec<PredictionRecord> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| PredictionRecord::new(i, p.truth, p.max_probability))
        .collect::<Result<_>>()?;
    let auc = match roc_auc(&level) {
        Ok(a) => Some(a),
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(PatientReport {
        accuracy: hits as f64 / patients.len() as f64,
        patients,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn or_rule() {
        let mut preds = Vec::new();
        let mut map = HashMap::new();
        for i in 0..100 {
            preds.push(PredictionRecord::new(i, Label::Uninfected, if i == 37 { 0.9 } else { 0.1 }).unwrap());
            map.insert(i, "a".to_string());
        }
        for i in 100..110 {
            preds.push(PredictionRecord::new(i, Label::Uninfected, 0.2).unwrap());
            map.insert(i, "b".to_string());
        }
        let r = patient_diagnose(&preds, &map).unwrap();
        assert_eq!(r.patients[0].predicted, Label::Parasitized);
        assert_eq!(r.patients[0].cells, 100);
        assert_eq!(r.patients[1].predicted, Label::Uninfected);
        assert_eq!(r.auc, None);
    }

    #[test]
    fn unknown_patient() {
        let preds = vec![PredictionRecord::new(5, Label::Uninfected, 0.2).unwrap()];
        assert!(matches!(patient_diagnose(&preds, &HashMap::new()), Err(Error::Join(_))));
    }
}
