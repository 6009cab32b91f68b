//! Flat `key = value` run configuration. Keys may come from a TOML file and
//! from command-line overrides; every problem is reported in one error.

use std::path::Path;

use anyhow::{bail, Context, Result};
use malaria_core::data::AugmentPolicy;
use malaria_core::harness::{AugmentMode, CvMode, ExperimentConfig, HeadKind, ModelPreset, Normalization};
use toml::{Table, Value};

pub const FORMAT_VERSION: u32 = 1;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "custom | custom-scaled | vgg-baseline | vgg-scaled"),
    ("input_size", "square input side in pixels"),
    ("freeze", "none | all | Lx-Ly label range"),
    ("stain_normalize", "bool"),
    ("normalization", "none | standardize | mean-normalize"),
    ("augment", "off | online | offline"),
    ("augment_copies", "variants per sample in offline mode"),
    ("policy", "standard | identity"),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size"),
    ("lr", "Adadelta learning rate"),
    ("rho", "Adadelta decay"),
    ("eps", "Adadelta epsilon"),
    ("head", "softmax | svm"),
    ("svm_c", "SVM box constraint"),
    ("svm_gamma", "RBF gamma"),
    ("svm_tol", "SMO KKT tolerance"),
    ("seed", "root seed"),
    ("eval_batch", "inference batch size"),
    ("patient_disjoint", "bool: split by patient"),
    ("k", "cross-validation folds"),
    ("cv_mode", "partition | held-out-tenths"),
    ("cv_pool", "all | train"),
    ("repeats", "holdout repeats"),
    ("tta_k", "test-time augmentations per sample"),
    ("ensemble_weights", "equal | accuracy | comma-separated numbers"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum EnsembleWeights {
    Equal,
    Accuracy,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub policy_name: String,
    pub patient_disjoint: bool,
    pub k: usize,
    pub cv_mode: CvMode,
    pub cv_pool_train: bool,
    pub repeats: usize,
    pub tta_k: usize,
    pub ensemble_weights: EnsembleWeights,
}

fn as_str(v: &Value) -> Result<String, String> {
    v.as_str().map(str::to_string).ok_or_else(|| format!("expected a string, got `{v}`"))
}

fn as_usize(v: &Value) -> Result<usize, String> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| format!("expected a non-negative integer, got `{v}`"))
}

/// Seeds above `i64::MAX` do not fit a TOML integer and are given as strings.
fn as_u64(v: &Value) -> Result<u64, String> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
        .ok_or_else(|| format!("expected a non-negative integer, got `{v}`"))
}

fn as_f64(v: &Value) -> Result<f64, String> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| format!("expected a number, got `{v}`"))
}

fn as_bool(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got `{v}`"))
}

fn parse<T: std::str::FromStr<Err = malaria_core::Error>>(v: &Value) -> Result<T, String> {
    as_str(v)?.parse::<T>().map_err(|e| e.to_string())
}

/// Parses an override value: TOML syntax when it parses, a bare string
/// otherwise.
pub fn override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// The shortest decimal that reads back as the same `f32`.
fn f32_value(x: f32) -> Value {
    Value::Float(x.to_string().parse().unwrap_or(x as f64))
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                text.parse::<Table>().map_err(|e| anyhow::anyhow!("config {}: {}", p.display(), e.message()))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        RunConfig::from_table(&table)
    }

    pub fn from_table(table: &Table) -> Result<RunConfig> {
        let mut errors = Vec::new();
        for key in table.keys() {
            if !KEYS.iter().any(|(k, _)| k == key) {
                errors.push(format!("unknown key `{key}`"));
            }
        }
        // The preset decides the defaults of the training keys.
        let model = match table.get("model").map(parse::<ModelPreset>) {
            None => ModelPreset::Custom,
            Some(Ok(m)) => m,
            Some(Err(e)) => {
                errors.push(format!("model: {e}"));
                ModelPreset::Custom
            }
        };
        let mut cfg = RunConfig {
            experiment: ExperimentConfig::new(model, malaria_core::data::TARGET_SIZE),
            policy_name: "standard".into(),
            patient_disjoint: false,
            k: 5,
            cv_mode: CvMode::Partition,
            cv_pool_train: false,
            repeats: 5,
            tta_k: 5,
            ensemble_weights: EnsembleWeights::Equal,
        };
        for (key, v) in table {
            if key == "model" {
                continue;
            }
            if let Err(e) = cfg.set(key, v) {
                errors.push(format!("{key}: {e}"));
            }
        }
        if let Err(e) = cfg.experiment.validate() {
            errors.push(e.to_string());
        }
        if cfg.k < 2 {
            errors.push(format!("k: must be >= 2, got {}", cfg.k));
        }
        if cfg.repeats == 0 {
            errors.push("repeats: must be >= 1".into());
        }
        if cfg.tta_k == 0 {
            errors.push("tta_k: must be >= 1".into());
        }
        if !errors.is_empty() {
            bail!("invalid configuration: {}", errors.join("; "));
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        let e = &mut self.experiment;
        match key {
            "input_size" => e.input_size = as_usize(v)?,
            "freeze" => e.freeze = as_str(v)?,
            "stain_normalize" => e.stain_normalize = as_bool(v)?,
            "normalization" => e.normalization = parse::<Normalization>(v)?,
            "augment" => {
                e.augment = match as_str(v)?.as_str() {
                    "off" => AugmentMode::Off,
                    "online" => AugmentMode::Online,
                    "offline" => AugmentMode::Offline,
                    s => return Err(format!("expected off, online or offline, got `{s}`")),
                }
            }
            "augment_copies" => e.augment_copies = as_usize(v)?,
            "policy" => {
                let name = as_str(v)?;
                e.policy = match name.as_str() {
                    "standard" => AugmentPolicy::default(),
                    "identity" => AugmentPolicy::identity(),
                    s => return Err(format!("expected standard or identity, got `{s}`")),
                };
                self.policy_name = name;
            }
            "epochs" => e.train.epochs = as_usize(v)?,
            "batch_size" => e.train.batch_size = as_usize(v)?,
            "lr" => e.train.lr = as_f64(v)? as f32,
            "rho" => e.train.rho = as_f64(v)? as f32,
            "eps" => e.train.eps = as_f64(v)? as f32,
            "head" => {
                e.head = match as_str(v)?.as_str() {
                    "softmax" => HeadKind::Softmax,
                    "svm" => HeadKind::Svm,
                    s => return Err(format!("expected softmax or svm, got `{s}`")),
                }
            }
            "svm_c" => e.svm.c = as_f64(v)?,
            "svm_gamma" => e.svm.gamma = as_f64(v)?,
            "svm_tol" => e.svm.tol = as_f64(v)?,
            "seed" => e.seed = as_u64(v)?,
            "eval_batch" => e.eval_batch = as_usize(v)?,
            "patient_disjoint" => self.patient_disjoint = as_bool(v)?,
            "k" => self.k = as_usize(v)?,
            "cv_mode" => {
                self.cv_mode = match as_str(v)?.as_str() {
                    "partition" => CvMode::Partition,
                    "held-out-tenths" => CvMode::HeldOutTenths,
                    s => return Err(format!("expected partition or held-out-tenths, got `{s}`")),
                }
            }
            "cv_pool" => {
                self.cv_pool_train = match as_str(v)?.as_str() {
                    "all" => false,
                    "train" => true,
                    s => return Err(format!("expected all or train, got `{s}`")),
                }
            }
            "repeats" => self.repeats = as_usize(v)?,
            "tta_k" => self.tta_k = as_usize(v)?,
            "ensemble_weights" => {
                self.ensemble_weights = match v {
                    Value::Array(a) => EnsembleWeights::Fixed(a.iter().map(as_f64).collect::<Result<_, _>>()?),
                    _ => match as_str(v)?.as_str() {
                        "equal" => EnsembleWeights::Equal,
                        "accuracy" => EnsembleWeights::Accuracy,
                        s => EnsembleWeights::Fixed(
                            s.split(',')
                                .map(|w| w.trim().parse::<f64>().map_err(|_| format!("bad weight `{w}`")))
                                .collect::<Result<_, _>>()?,
                        ),
                    },
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The effective configuration as flat TOML.
    pub fn to_table(&self) -> Table {
        let e = &self.experiment;
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        let s = |v: &str| Value::String(v.to_string());
        let i = |v: usize| Value::Integer(v as i64);
        put("model", s(e.model.name()));
        put("input_size", i(e.input_size));
        put("freeze", s(&e.freeze));
        put("stain_normalize", Value::Boolean(e.stain_normalize));
        put(
            "normalization",
            s(match e.normalization {
                Normalization::None => "none",
                Normalization::Standardize => "standardize",
                Normalization::MeanNormalize => "mean-normalize",
            }),
        );
        put(
            "augment",
            s(match e.augment {
                AugmentMode::Off => "off",
                AugmentMode::Online => "online",
                AugmentMode::Offline => "offline",
            }),
        );
        put("augment_copies", i(e.augment_copies));
        put("policy", s(&self.policy_name));
        put("epochs", i(e.train.epochs));
        put("batch_size", i(e.train.batch_size));
        put("lr", f32_value(e.train.lr));
        put("rho", f32_value(e.train.rho));
        put("eps", f32_value(e.train.eps));
        put(
            "head",
            s(match e.head {
                HeadKind::Softmax => "softmax",
                HeadKind::Svm => "svm",
            }),
        );
        put("svm_c", Value::Float(e.svm.c));
        put("svm_gamma", Value::Float(e.svm.gamma));
        put("svm_tol", Value::Float(e.svm.tol));
        put(
            "seed",
            i64::try_from(e.seed).map_or_else(|_| s(&e.seed.to_string()), Value::Integer),
        );
        put("eval_batch", i(e.eval_batch));
        put("patient_disjoint", Value::Boolean(self.patient_disjoint));
        put("k", i(self.k));
        put(
            "cv_mode",
            s(match self.cv_mode {
                CvMode::Partition => "partition",
                CvMode::HeldOutTenths => "held-out-tenths",
            }),
        );
        put("cv_pool", s(if self.cv_pool_train { "train" } else { "all" }));
        put("repeats", i(self.repeats));
        put("tta_k", i(self.tta_k));
        put(
            "ensemble_weights",
            match &self.ensemble_weights {
                EnsembleWeights::Equal => s("equal"),
                EnsembleWeights::Accuracy => s("accuracy"),
                EnsembleWeights::Fixed(w) => Value::Array(w.iter().map(|&x| Value::Float(x)).collect()),
            },
        );
        t
    }
}
