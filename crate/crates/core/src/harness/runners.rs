//! Cross-validation, repeated holdout, ablation grids and comparison tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::harness::dataset::{CellDataset, Normalization};
use crate::harness::experiment::{run_single, ExperimentConfig, ModelPreset, RunResult};
use crate::harness::split::{kfold_plan, split_80_10_10, split_by_patient, CvMode};
use crate::Label;

/// Mean and sample standard deviation of per-run values. The deviation is
/// absent for a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Harness("nothing to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(Summary {
        values: values.to_vec(),
        mean,
        std,
    })
}

impl Summary {
    /// `0.9700±0.0050`, or the mean alone for one run.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.4}±{:.4}", self.mean, s),
            None => format!("{:.4}", self.mean),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvResult {
    /// Validation-fold report per fold.
    pub folds: Vec<MetricsReport>,
    pub accuracy: Summary,
}

/// k-fold cross-validation over `pool` (dataset indices). Each fold trains a
/// fresh network with fold-derived seeds and is scored on its held-out part.
pub fn run_cv(cfg: &ExperimentConfig, data: &CellDataset, pool: &[usize], k: usize, mode: CvMode) -> Result<CvResult> {
    let labels: Vec<Label> = pool.iter().map(|&i| data.label(i)).collect();
    let plan = kfold_plan(&labels, k, cfg.seed, mode)?;
    let mut folds = Vec::with_capacity(k);
    for (f, fold) in plan.folds.iter().enumerate() {
        let train: Vec<usize> = fold.train.iter().map(|&i| pool[i]).collect();
        let val: Vec<usize> = fold.val.iter().map(|&i| pool[i]).collect();
        log::info!("fold {}/{k}: {} train, {} validation", f + 1, train.len(), val.len());
        let run = run_single(&cfg.derived(f as u64), data, &train, &val, &[], None)?;
        folds.push(run.val);
    }
    let accs: Vec<f64> = folds.iter().map(|r| r.accuracy).collect();
    Ok(CvResult {
        accuracy: summarize(&accs)?,
        folds,
    })
}

#[derive(Clone, Debug)]
pub struct HoldoutResult {
    /// Test report per repeat.
    pub repeats: Vec<MetricsReport>,
    pub accuracy: Summary,
}

/// Independent seeded 80:10:10 resplits, each trained and tested.
pub fn run_holdout(cfg: &ExperimentConfig, data: &CellDataset, repeats: usize, patient_disjoint: bool) -> Result<HoldoutResult> {
    if repeats == 0 {
        return Err(Error::Harness("holdout needs at least one repeat".into()));
    }
    let labels = data.labels();
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let c = cfg.derived(r as u64);
        let plan = if patient_disjoint {
            split_by_patient(&labels, &data.patients(), c.seed)?
        } else {
            split_80_10_10(&labels, c.seed)?
        };
        log::info!("holdout {}/{repeats}", r + 1);
        let run = run_single(&c, data, &plan.train, &plan.val, &plan.test, None)?;
        out.push(run.test.expect("holdout test split is non-empty"));
    }
    let accs: Vec<f64> = out.iter().map(|r| r.accuracy).collect();
    Ok(HoldoutResult {
        accuracy: summarize(&accs)?,
        repeats: out,
    })
}

/// One cell of an ablation matrix: overrides applied to a base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub model: Option<ModelPreset>,
    pub stain_normalize: Option<bool>,
    pub normalization: Option<Normalization>,
    pub freeze: Option<String>,
}

impl AblationCell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        if let Some(m) = self.model {
            if m != c.model {
                c.train = m.train_config();
            }
            c.model = m;
        }
        if let Some(s) = self.stain_normalize {
            c.stain_normalize = s;
        }
        if let Some(n) = self.normalization {
            c.normalization = n;
        }
        if let Some(f) = &self.freeze {
            c.freeze.clone_from(f);
        }
        c
    }
}

/// Freeze ranges compared for the transfer-learned baseline.
pub fn freeze_sweep() -> Vec<AblationCell> {
    ["all", "none", "L1-L8", "L1-L14", "L1-L16"]
        .into_iter()
        .map(|f| AblationCell {
            name: f.to_string(),
            freeze: Some(f.to_string()),
            ..AblationCell::default()
        })
        .collect()
}

/// Every model with stain normalization off and on.
pub fn stain_grid(models: &[ModelPreset]) -> Vec<AblationCell> {
    models
        .iter()
        .flat_map(|&m| {
            [false, true].map(|s| AblationCell {
                name: format!("{}/{}", m.name(), if s { "sn" } else { "no-sn" }),
                model: Some(m),
                stain_normalize: Some(s),
                ..AblationCell::default()
            })
        })
        .collect()
}

/// Every model under standardization and mean normalization.
pub fn normalization_grid(models: &[ModelPreset]) -> Vec<AblationCell> {
    models
        .iter()
        .flat_map(|&m| {
            [Normalization::Standardize, Normalization::MeanNormalize].map(|n| AblationCell {
                name: format!(
                    "{}/{}",
                    m.name(),
                    if n == Normalization::Standardize { "standardize" } else { "mean-normalize" }
                ),
                model: Some(m),
                normalization: Some(n),
                ..AblationCell::default()
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
}

/// Trains every cell on the same split.
pub fn run_ablation(
    base: &ExperimentConfig,
    cells: &[AblationCell],
    data: &CellDataset,
    train: &[usize],
    val: &[usize],
    test: &[usize],
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Harness("ablation matrix is empty".into()));
    }
    cells
        .iter()
        .map(|cell| {
            log::info!("ablation cell {}", cell.name);
            let RunResult { train: tr, val: va, test: te, .. } = run_single(&cell.apply(base), data, train, val, test, None)?;
            Ok(AblationRow {
                cell: cell.clone(),
                train: tr,
                val: va,
                test: te,
            })
        })
        .collect()
}

/// A comma-delimited comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Harness(format!("row has {} cells, table has {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.columns).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn loss_cell(r: &MetricsReport) -> String {
    r.loss.map_or_else(String::new, f4)
}

/// Train/validation/test accuracy and loss per ablation cell.
pub fn ablation_table(rows: &[AblationRow], first_column: &str) -> Result<Table> {
    let mut t = Table::new(&[first_column, "train_acc", "train_loss", "val_acc", "val_loss", "test_acc", "test_loss"]);
    for r in rows {
        let (ta, tl) = r
            .test
            .as_ref()
            .map_or((String::new(), String::new()), |t| (f4(t.accuracy), loss_cell(t)));
        t.push(vec![
            r.cell.name.clone(),
            f4(r.train.accuracy),
            loss_cell(&r.train),
            f4(r.val.accuracy),
            loss_cell(&r.val),
            ta,
            tl,
        ])?;
    }
    Ok(t)
}

/// Test metrics per named method, one row each.
pub fn metrics_table(rows: &[(String, MetricsReport)]) -> Result<Table> {
    let mut t = Table::new(&["method", "accuracy", "auc", "precision", "recall", "f1", "mcc"]);
    for (name, r) in rows {
        t.push(vec![
            name.clone(),
            f4(r.accuracy),
            r.auc.map_or_else(String::new, f4),
            f4(r.precision),
            f4(r.recall),
            f4(r.f1),
            f4(r.mcc),
        ])?;
    }
    Ok(t)
}

/// Aggregated accuracy per evaluation protocol.
pub fn summary_table(rows: &[(String, Summary)]) -> Result<Table> {
    let mut t = Table::new(&["protocol", "runs", "mean_accuracy", "std", "accuracy"]);
    for (name, s) in rows {
        t.push(vec![
            name.clone(),
            s.values.len().to_string(),
            f4(s.mean),
            s.std.map_or_else(String::new, f4),
            s.display(),
        ])?;
    }
    Ok(t)
}
