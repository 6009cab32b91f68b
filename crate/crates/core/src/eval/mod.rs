//! Metrics, prediction combiners, patient-level diagnosis and error analysis.

mod combine;
mod false_cases;
mod metrics;
mod patient;

pub use combine::{accuracy_weights, argmax_label, ensemble_predict, ensemble_weights, one_hot, tta_predict, ProbPair};
pub use false_cases::{false_case_report, false_cases, FalseCase, FalseCaseReport};
pub use metrics::{
    basic_metrics, confusion, mcc, roc_auc, BasicMetrics, ConfusionMatrix, MetricsReport, PredictionRecord, REPORT_COLUMNS,
    THRESHOLD,
};
pub use patient::{patient_diagnose, PatientReport, PatientResult};
