//! Subcommand implementations. Each writes its artifacts and a provenance
//! file into the output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use malaria_core::data::{generate_cells, read_patch, resample, write_png, SynthTask};
use malaria_core::eval::{
    ensemble_predict, false_case_report, patient_diagnose, tta_predict, MetricsReport, PredictionRecord,
};
use malaria_core::gradcheck::{default_cases, run_suite, GRADCHECK_TOLERANCE};
use malaria_core::harness::{
    ablation_table, freeze_sweep, load_manifest, metrics_table, normalization_grid, run_ablation, run_cv, run_holdout,
    run_single, split_80_10_10, split_by_patient, stain_grid, summary_table, CellDataset, LoadedModel, Manifest,
    ManifestRow, ModelPreset, SplitPlan, Table,
};
use malaria_core::rng::RngStream;
use malaria_core::train::{emit_training_curves, load_checkpoint, save_checkpoint, Checkpoint};
use malaria_core::Label;
use toml::{Table as TomlTable, Value};

use crate::config::{EnsembleWeights, RunConfig, FORMAT_VERSION};

const TTA_STREAM: u64 = 0x5454_4100;
/// In-memory datasets above this many pixel values are read from disk per batch.
const MEMORY_BUDGET: usize = 256 << 20;

pub fn write_provenance(out: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut run = TomlTable::new();
    run.insert("command".into(), Value::String(command.into()));
    run.insert("engine_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    run.insert("config_format".into(), Value::Integer(FORMAT_VERSION as i64));
    run.insert(
        "checkpoint_format".into(),
        Value::Integer(malaria_core::train::checkpoint::VERSION as i64),
    );
    for (k, v) in extra {
        run.insert(k.to_string(), Value::String(v.clone()));
    }
    let mut doc = TomlTable::new();
    doc.insert("run".into(), Value::Table(run));
    doc.insert("config".into(), Value::Table(cfg.to_table()));
    fs::write(out.join("provenance.toml"), toml::to_string(&doc)?)?;
    Ok(())
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(out.join(name), text).with_context(|| format!("cannot write {name}"))
}

/// Patient id from an image file name: the text before the first `_`, or
/// `unknown` when there is none.
pub fn patient_from_filename(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.split_once('_') {
        Some((p, _)) if !p.is_empty() => p.to_string(),
        _ => "unknown".into(),
    }
}

pub fn synth(out: &Path, cfg: &RunConfig, task: SynthTask, count: usize, size: usize) -> Result<Manifest> {
    let cells = generate_cells(task, count, size, cfg.experiment.seed)?;
    let mut rows = Vec::with_capacity(count);
    for (i, cell) in cells.iter().enumerate() {
        let rel = PathBuf::from(cell.label.token()).join(format!("{}_cell_{i:05}.png", cell.patient_id));
        fs::create_dir_all(out.join(cell.label.token()))?;
        write_png(cell, &out.join(&rel))?;
        rows.push(ManifestRow {
            path: rel,
            label: cell.label,
            patient_id: cell.patient_id.clone(),
        });
    }
    let manifest = Manifest::new(out, rows);
    manifest.save(&out.join("manifest.csv"))?;
    write_provenance(
        out,
        "synth",
        cfg,
        &[("task", format!("{task:?}")), ("count", count.to_string()), ("size", size.to_string())],
    )?;
    Ok(manifest)
}

fn class_dir(images: &Path, label: Label) -> Result<PathBuf> {
    let want = label.token();
    let entries = fs::read_dir(images).with_context(|| format!("cannot read {}", images.display()))?;
    for e in entries {
        let e = e?;
        if e.file_type()?.is_dir() && e.file_name().to_string_lossy().eq_ignore_ascii_case(want) {
            return Ok(e.path());
        }
    }
    bail!("preparation error: {} has no `{want}` folder", images.display())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Resamples every image under `images/{parasitized,uninfected}` to the
/// configured size, caches it under `out/patches` and writes the manifest.
pub fn prepare(out: &Path, cfg: &RunConfig, images: &Path) -> Result<Manifest> {
    let size = cfg.experiment.input_size;
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for label in [Label::Parasitized, Label::Uninfected] {
        let dir = class_dir(images, label)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let target = out.join("patches").join(label.token());
        fs::create_dir_all(&target)?;
        for f in files {
            let patch = match read_patch(&f, label).and_then(|p| resample(&p, size)) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                    continue;
                }
            };
            let name = format!("{}.png", f.file_stem().unwrap_or_default().to_string_lossy());
            let rel = PathBuf::from("patches").join(label.token()).join(&name);
            write_png(&patch, &out.join(&rel))?;
            rows.push(ManifestRow {
                path: rel,
                label,
                patient_id: patient_from_filename(&f),
            });
        }
    }
    if rows.is_empty() {
        bail!("preparation error: no readable images under {}", images.display());
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable images skipped");
    }
    let manifest = Manifest::new(out, rows);
    manifest.save(&out.join("manifest.csv"))?;
    write_provenance(
        out,
        "prepare",
        cfg,
        &[("images", images.display().to_string()), ("skipped", skipped.to_string())],
    )?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path, size: usize) -> Result<(Manifest, CellDataset)> {
    let manifest = load_manifest(manifest_path)?;
    let data = if manifest.len() * size * size * 3 <= MEMORY_BUDGET {
        CellDataset::load_manifest(&manifest, size)?
    } else {
        CellDataset::from_manifest(manifest.clone(), size)
    };
    let (neg, pos) = manifest.class_counts();
    log::info!("manifest: {} rows ({pos} parasitized, {neg} uninfected)", manifest.len());
    Ok((manifest, data))
}

pub fn split_plan(cfg: &RunConfig, data: &CellDataset) -> Result<SplitPlan> {
    let labels = data.labels();
    let plan = if cfg.patient_disjoint {
        split_by_patient(&labels, &data.patients(), cfg.experiment.seed)?
    } else {
        split_80_10_10(&labels, cfg.experiment.seed)?
    };
    plan.check_partition(labels.len())?;
    Ok(plan)
}

/// Dataset indices of a named subset.
pub fn subset(cfg: &RunConfig, data: &CellDataset, name: &str) -> Result<Vec<usize>> {
    if name == "all" {
        return Ok((0..data.len()).collect());
    }
    let plan = split_plan(cfg, data)?;
    Ok(match name {
        "train" => plan.train,
        "val" => plan.val,
        "test" => plan.test,
        _ => bail!("unknown subset `{name}` (expected all, train, val or test)"),
    })
}

fn metrics_csv(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("set,{}\n", MetricsReport::csv_header());
    for (name, r) in rows {
        s.push_str(&format!("{name},{}\n", r.to_csv_row()));
    }
    s
}

fn predictions_csv(manifest: &Manifest, recs: &[PredictionRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "path", "label", "p_parasitized", "predicted"])?;
    for r in recs {
        w.write_record([
            r.id.to_string(),
            manifest.rows[r.id].path.display().to_string(),
            r.truth.token().to_string(),
            format!("{:.6}", r.p),
            r.predicted.token().to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

pub fn train(out: &Path, cfg: &RunConfig, manifest_path: &Path, init_from: Option<&Path>) -> Result<MetricsReport> {
    let e = &cfg.experiment;
    let (_, data) = load_dataset(manifest_path, e.input_size)?;
    let plan = split_plan(cfg, &data)?;
    let backbone = init_from.map(load_checkpoint).transpose()?;
    let run = run_single(e, &data, &plan.train, &plan.val, &plan.test, backbone.as_ref())?;
    save_checkpoint(&out.join("checkpoint.psgt"), &run.trained.checkpoint)?;
    emit_training_curves(&run.trained.log, out)?;
    write(out, "split.json", &serde_json::to_string(&plan)?)?;
    let test = run.test.clone().ok_or_else(|| anyhow!("test split is empty"))?;
    write(
        out,
        "metrics.csv",
        &metrics_csv(&[("train".into(), &run.train), ("val".into(), &run.val), ("test".into(), &test)]),
    )?;
    write(out, "metrics_test.txt", &test.to_text())?;
    let mut extra = vec![("manifest", manifest_path.display().to_string())];
    if let Some(p) = init_from {
        extra.push(("init_from", p.display().to_string()));
    }
    write_provenance(out, "train", cfg, &extra)?;
    Ok(test)
}

pub fn eval(
    out: &Path,
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    subset_name: &str,
    false_cases: bool,
) -> Result<MetricsReport> {
    let model = LoadedModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let (manifest, data) = load_dataset(manifest_path, model.input_size())?;
    let idx = subset(cfg, &data, subset_name)?;
    let (recs, loss) = model.predict(&data, &idx, cfg.experiment.eval_batch)?;
    let report = MetricsReport::from_predictions(&recs, loss)?;
    write(out, "predictions.csv", &predictions_csv(&manifest, &recs)?)?;
    write(out, "metrics.txt", &report.to_text())?;
    write(out, "metrics.csv", &metrics_csv(&[(subset_name.to_string(), &report)]))?;
    if false_cases {
        let r = false_case_report(&recs, &manifest, &out.join("false_cases"))?;
        log::info!(
            "{} false positives, {} false negatives, {} images not copied",
            r.false_positives.len(),
            r.false_negatives.len(),
            r.skipped
        );
    }
    write_provenance(
        out,
        "eval",
        cfg,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("manifest", manifest_path.display().to_string()),
            ("subset", subset_name.to_string()),
        ],
    )?;
    Ok(report)
}

pub fn cv(out: &Path, cfg: &RunConfig, manifest_path: &Path) -> Result<()> {
    let (_, data) = load_dataset(manifest_path, cfg.experiment.input_size)?;
    let pool = if cfg.cv_pool_train {
        split_plan(cfg, &data)?.train
    } else {
        (0..data.len()).collect()
    };
    let r = run_cv(&cfg.experiment, &data, &pool, cfg.k, cfg.cv_mode)?;
    let rows: Vec<(String, &MetricsReport)> = r.folds.iter().enumerate().map(|(i, m)| (format!("fold{}", i + 1), m)).collect();
    write(out, "folds.csv", &metrics_csv(&rows))?;
    summary_table(&[(format!("{}-fold cross-validation", cfg.k), r.accuracy.clone())])?.save(&out.join("summary.csv"))?;
    println!("cross-validation accuracy {}", r.accuracy.display());
    write_provenance(out, "cv", cfg, &[("manifest", manifest_path.display().to_string())])
}

pub fn holdout(out: &Path, cfg: &RunConfig, manifest_path: &Path) -> Result<()> {
    let (_, data) = load_dataset(manifest_path, cfg.experiment.input_size)?;
    let r = run_holdout(&cfg.experiment, &data, cfg.repeats, cfg.patient_disjoint)?;
    let rows: Vec<(String, &MetricsReport)> =
        r.repeats.iter().enumerate().map(|(i, m)| (format!("repeat{}", i + 1), m)).collect();
    write(out, "repeats.csv", &metrics_csv(&rows))?;
    summary_table(&[(format!("{}x holdout", cfg.repeats), r.accuracy.clone())])?.save(&out.join("summary.csv"))?;
    println!("holdout accuracy {}", r.accuracy.display());
    write_provenance(out, "holdout", cfg, &[("manifest", manifest_path.display().to_string())])
}

pub fn ablate(out: &Path, cfg: &RunConfig, manifest_path: &Path, grid: &str, models: &[ModelPreset]) -> Result<Table> {
    let (_, data) = load_dataset(manifest_path, cfg.experiment.input_size)?;
    let plan = split_plan(cfg, &data)?;
    let (cells, first, file) = match grid {
        "freeze" => (freeze_sweep(), "layers_frozen", "freeze_sweep.csv"),
        "stain" => (stain_grid(models), "model_setting", "stain_normalization.csv"),
        "normalization" => (normalization_grid(models), "model_setting", "normalization.csv"),
        _ => bail!("unknown grid `{grid}` (expected freeze, stain or normalization)"),
    };
    let rows = run_ablation(&cfg.experiment, &cells, &data, &plan.train, &plan.val, &plan.test)?;
    let table = ablation_table(&rows, first)?;
    table.save(&out.join(file))?;
    write_provenance(
        out,
        "ablate",
        cfg,
        &[("manifest", manifest_path.display().to_string()), ("grid", grid.to_string())],
    )?;
    Ok(table)
}

pub fn ensemble(
    out: &Path,
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    manifest_path: &Path,
    subset_name: &str,
) -> Result<MetricsReport> {
    let ckpts: Vec<Checkpoint> = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<malaria_core::Result<_>>()?;
    let models: Vec<LoadedModel> = ckpts.iter().map(LoadedModel::from_checkpoint).collect::<malaria_core::Result<_>>()?;
    let size = models.first().ok_or_else(|| anyhow!("no checkpoints given"))?.input_size();
    if models.iter().any(|m| m.input_size() != size) {
        bail!("ensemble members expect different input sizes");
    }
    let (manifest, data) = load_dataset(manifest_path, size)?;
    let idx = subset(cfg, &data, subset_name)?;
    let members: Vec<Vec<[f64; 2]>> = models
        .iter()
        .map(|m| m.prob_pairs(&data, &idx, cfg.experiment.eval_batch))
        .collect::<malaria_core::Result<_>>()?;
    let weights = match &cfg.ensemble_weights {
        EnsembleWeights::Equal => None,
        EnsembleWeights::Accuracy => Some(ckpts.iter().map(|c| c.meta.val_accuracy).collect()),
        EnsembleWeights::Fixed(w) => Some(w.clone()),
    };
    let combined = ensemble_predict(&members, weights.as_deref())?;
    let recs: Vec<PredictionRecord> = idx
        .iter()
        .zip(&combined)
        .map(|(&i, p)| PredictionRecord::new(i, data.label(i), p[1].clamp(0.0, 1.0)))
        .collect::<malaria_core::Result<_>>()?;
    let report = MetricsReport::from_predictions(&recs, None)?;
    let mut rows = Vec::new();
    for (p, m) in checkpoints.iter().zip(&models) {
        rows.push((p.display().to_string(), m.report(&data, &idx, cfg.experiment.eval_batch)?));
    }
    rows.push(("ensemble".into(), report.clone()));
    metrics_table(&rows)?.save(&out.join("ensemble.csv"))?;
    write(out, "predictions.csv", &predictions_csv(&manifest, &recs)?)?;
    write(out, "metrics.txt", &report.to_text())?;
    write_provenance(
        out,
        "ensemble",
        cfg,
        &[("manifest", manifest_path.display().to_string()), ("subset", subset_name.to_string())],
    )?;
    Ok(report)
}

pub fn tta(out: &Path, cfg: &RunConfig, checkpoint: &Path, manifest_path: &Path, subset_name: &str) -> Result<MetricsReport> {
    let model = LoadedModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    if model.svm.is_some() {
        bail!("test-time augmentation needs a softmax head");
    }
    let (manifest, data) = load_dataset(manifest_path, model.input_size())?;
    let idx = subset(cfg, &data, subset_name)?;
    let patches = data.patches(&idx)?;
    let prep = model.prep.clone();
    let prepare = move |p: &[malaria_core::data::ImagePatch]| prep.apply(p);
    let stream = RngStream::new(cfg.experiment.seed, TTA_STREAM);
    let probs = tta_predict(
        &model.net,
        &patches,
        cfg.tta_k,
        &cfg.experiment.policy,
        &stream,
        &prepare,
        cfg.experiment.eval_batch,
    )?;
    let recs: Vec<PredictionRecord> = idx
        .iter()
        .zip(&probs)
        .map(|(&i, p)| PredictionRecord::new(i, data.label(i), p[1].clamp(0.0, 1.0)))
        .collect::<malaria_core::Result<_>>()?;
    let report = MetricsReport::from_predictions(&recs, None)?;
    let plain = model.report(&data, &idx, cfg.experiment.eval_batch)?;
    metrics_table(&[("plain".into(), plain), (format!("tta-k{}", cfg.tta_k), report.clone())])?
        .save(&out.join("tta.csv"))?;
    write(out, "predictions.csv", &predictions_csv(&manifest, &recs)?)?;
    write(out, "metrics.txt", &report.to_text())?;
    write_provenance(
        out,
        "tta",
        cfg,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("manifest", manifest_path.display().to_string()),
            ("subset", subset_name.to_string()),
        ],
    )?;
    Ok(report)
}

/// `path,patient_id` rows keyed by file name.
fn read_patient_overrides(path: &Path) -> Result<HashMap<String, String>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            bail!("{} line {}: expected `path,patient_id`", path.display(), i + 2);
        }
        let name = Path::new(&rec[0]).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(name, rec[1].to_string());
    }
    Ok(out)
}

pub fn diagnose(
    out: &Path,
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    subset_name: &str,
    patients: Option<&Path>,
) -> Result<()> {
    let model = LoadedModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let (manifest, data) = load_dataset(manifest_path, model.input_size())?;
    let idx = subset(cfg, &data, subset_name)?;
    let overrides = patients.map(read_patient_overrides).transpose()?.unwrap_or_default();
    let patient_of: HashMap<usize, String> = idx
        .iter()
        .map(|&i| {
            let row = &manifest.rows[i];
            let name = row.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (i, overrides.get(&name).cloned().unwrap_or_else(|| row.patient_id.clone()))
        })
        .collect();
    let (recs, _) = model.predict(&data, &idx, cfg.experiment.eval_batch)?;
    let report = patient_diagnose(&recs, &patient_of)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient", "cells", "truth", "predicted", "max_probability"])?;
    for p in &report.patients {
        w.write_record([
            p.patient.clone(),
            p.cells.to_string(),
            p.truth.token().into(),
            p.predicted.token().into(),
            format!("{:.6}", p.max_probability),
        ])?;
    }
    write(out, "patients.csv", &String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)?;
    let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.6}"));
    write(
        out,
        "patient_summary.txt",
        &format!("patients = {}\naccuracy = {:.6}\nauc = {auc}\n", report.patients.len(), report.accuracy),
    )?;
    println!("{} patients, accuracy {:.4}, auc {auc}", report.patients.len(), report.accuracy);
    write_provenance(
        out,
        "diagnose",
        cfg,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("manifest", manifest_path.display().to_string()),
            ("subset", subset_name.to_string()),
        ],
    )
}

/// Returns the report text and whether every case passed.
pub fn gradcheck(instances: usize, seed: u64) -> (String, bool) {
    let report = run_suite(&default_cases(), instances, seed);
    let text = format!("{}tolerance {GRADCHECK_TOLERANCE:e}\n", report.to_text());
    (text, report.passed())
}
