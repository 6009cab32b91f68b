//! One experiment: build a preset network, fit preprocessing, train, attach
//! an optional SVM head and score splits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::eval::{one_hot, MetricsReport, PredictionRecord, ProbPair};
use crate::harness::dataset::{Augmentation, CellDataset, Normalization, PatchSource, Preprocessor};
use crate::model::{CustomNetConfig, FreezeSpec, ModelGraph, Topology, VggConfig};
use crate::rng::{mix64, RngStream};
use crate::svm::{SvmHead, SvmParams};
use crate::train::{evaluate, fit, Checkpoint, TrainConfig, TrainingLog};
use crate::Label;

const INIT_STREAM: u64 = 0x494e_4954;

/// Named network configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// The 19-layer custom network at full width.
    Custom,
    /// The custom topology with narrow layers.
    CustomScaled,
    /// VGG16-style base with the dense-1024 head.
    VggBaseline,
    /// The VGG topology with narrow layers.
    VggScaled,
}

impl ModelPreset {
    pub fn topology(self, input_size: usize) -> Topology {
        match self {
            ModelPreset::Custom => CustomNetConfig {
                input_size,
                ..CustomNetConfig::full()
            }
            .topology(),
            ModelPreset::CustomScaled => CustomNetConfig::scaled(input_size).topology(),
            ModelPreset::VggBaseline => VggConfig::with_input(input_size).topology(),
            ModelPreset::VggScaled => VggConfig {
                input_size,
                block_widths: [8, 16, 32, 32, 32],
                head_width: 64,
                dropout: 0.5,
            }
            .topology(),
        }
    }

    /// Training regime associated with the preset.
    pub fn train_config(self) -> TrainConfig {
        match self {
            ModelPreset::Custom | ModelPreset::CustomScaled => TrainConfig::custom(),
            ModelPreset::VggBaseline | ModelPreset::VggScaled => TrainConfig::baseline(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Custom => "custom",
            ModelPreset::CustomScaled => "custom-scaled",
            ModelPreset::VggBaseline => "vgg-baseline",
            ModelPreset::VggScaled => "vgg-scaled",
        }
    }
}

impl std::str::FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelPreset> {
        match s {
            "custom" => Ok(ModelPreset::Custom),
            "custom-scaled" => Ok(ModelPreset::CustomScaled),
            "vgg-baseline" => Ok(ModelPreset::VggBaseline),
            "vgg-scaled" => Ok(ModelPreset::VggScaled),
            _ => Err(Error::Param(format!(
                "unknown model `{s}` (expected custom, custom-scaled, vgg-baseline or vgg-scaled)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Softmax,
    /// RBF SVM on penultimate dense features.
    Svm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    #[default]
    Off,
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelPreset,
    pub input_size: usize,
    /// `none`, `all` or a label range such as `L1-L16`.
    pub freeze: String,
    pub stain_normalize: bool,
    pub normalization: Normalization,
    pub augment: AugmentMode,
    /// Variants per sample in offline mode.
    pub augment_copies: usize,
    pub policy: AugmentPolicy,
    pub train: TrainConfig,
    pub head: HeadKind,
    pub svm: SvmParams,
    /// Root seed for initialization, shuffling, dropout and augmentation.
    pub seed: u64,
    pub eval_batch: usize,
}

impl ExperimentConfig {
    pub fn new(model: ModelPreset, input_size: usize) -> ExperimentConfig {
        ExperimentConfig {
            model,
            input_size,
            freeze: "none".into(),
            stain_normalize: false,
            normalization: Normalization::None,
            augment: AugmentMode::Off,
            augment_copies: 4,
            policy: AugmentPolicy::default(),
            train: model.train_config(),
            head: HeadKind::Softmax,
            svm: SvmParams::default(),
            seed: 0,
            eval_batch: 64,
        }
    }

    pub fn freeze_spec(&self) -> Result<FreezeSpec> {
        self.freeze.parse()
    }

    /// Copy with every seed replaced by one derived from `(seed, index)`.
    pub fn derived(&self, index: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seed = mix64(self.seed ^ mix64(index.wrapping_add(1)));
        c
    }

    /// Lists every invalid field at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.input_size < 32 {
            bad.push(format!("input_size = {} (minimum 32)", self.input_size));
        }
        if let Err(e) = self.freeze_spec() {
            bad.push(e.to_string());
        }
        if self.augment == AugmentMode::Offline && self.augment_copies == 0 {
            bad.push("augment_copies = 0".into());
        }
        if self.eval_batch == 0 {
            bad.push("eval_batch = 0".into());
        }
        for check in [self.policy.validate(), self.train.validate(), self.svm.validate()] {
            if let Err(e) = check {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shuffle_seed: self.seed,
            ..self.train.clone()
        }
    }

    fn augmentation(&self) -> Augmentation {
        match self.augment {
            AugmentMode::Off => Augmentation::None,
            AugmentMode::Online => Augmentation::Online {
                policy: self.policy.clone(),
                seed: self.seed,
            },
            AugmentMode::Offline => Augmentation::Offline {
                policy: self.policy.clone(),
                seed: self.seed,
                copies: self.augment_copies,
            },
        }
    }
}

/// Freshly initialized network with the configured layers frozen.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelGraph> {
    let mut m = ModelGraph::from_topology(cfg.model.topology(cfg.input_size), &RngStream::new(cfg.seed, INIT_STREAM))?;
    m.set_trainable(cfg.freeze_spec()?)?;
    Ok(m)
}

/// Copies every frozen parameter of `model` from `source` by name.
pub fn transfer_frozen(model: &mut ModelGraph, source: &Checkpoint) -> Result<usize> {
    let mut copied = 0;
    for p in model.params_mut().iter_mut().filter(|p| !p.trainable) {
        let (_, v) = source
            .params
            .iter()
            .find(|(n, _)| n == &p.name)
            .ok_or_else(|| Error::Load {
                name: p.name.clone(),
                reason: "missing from the source checkpoint".into(),
            })?;
        if v.shape() != p.value.shape() {
            return Err(Error::Load {
                name: p.name.clone(),
                reason: format!("shape {:?} in source, {:?} in model", v.shape(), p.value.shape()),
            });
        }
        p.value = v.clone();
        copied += 1;
    }
    Ok(copied)
}

/// A network with its preprocessing and optional SVM head.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub net: ModelGraph,
    pub prep: Arc<Preprocessor>,
    pub svm: Option<SvmHead>,
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedModel> {
        Ok(LoadedModel {
            net: ckpt.to_model()?,
            prep: Arc::new(Preprocessor::from_aux(&ckpt.aux)?),
            svm: SvmHead::from_aux(&ckpt.aux)?,
        })
    }

    pub fn input_size(&self) -> usize {
        *self.net.topology().input.last().unwrap_or(&0)
    }

    /// Positive-class score per sample of `indices`; the SVM head maps its
    /// decision value through the logistic function. The second value is
    /// the mean BCE of the softmax head.
    pub fn scores(&self, data: &CellDataset, indices: &[usize], batch: usize) -> Result<(Vec<f64>, Option<f64>)> {
        let src = PatchSource::new(data, indices, self.prep.clone());
        match &self.svm {
            None => {
                let out = evaluate(&self.net, &src, batch)?;
                Ok((out.scores, Some(out.loss)))
            }
            Some(head) => Ok((
                head.predict(&self.net, &src, batch)?
                    .into_iter()
                    .map(|(_, f)| 1.0 / (1.0 + (-f).exp()))
                    .collect(),
                None,
            )),
        }
    }

    /// Records keyed by dataset index.
    pub fn predict(&self, data: &CellDataset, indices: &[usize], batch: usize) -> Result<(Vec<PredictionRecord>, Option<f64>)> {
        let (scores, loss) = self.scores(data, indices, batch)?;
        let recs = indices
            .iter()
            .zip(&scores)
            .map(|(&i, &p)| PredictionRecord::new(i, data.label(i), p))
            .collect::<Result<_>>()?;
        Ok((recs, loss))
    }

    /// Ensemble member outputs: softmax pairs, or one-hot vectors for an
    /// SVM head.
    pub fn prob_pairs(&self, data: &CellDataset, indices: &[usize], batch: usize) -> Result<Vec<ProbPair>> {
        let (scores, _) = self.scores(data, indices, batch)?;
        Ok(scores
            .into_iter()
            .map(|p| match self.svm {
                Some(_) => one_hot(if p >= 0.5 { Label::Parasitized } else { Label::Uninfected }),
                None => [1.0 - p, p],
            })
            .collect())
    }

    pub fn report(&self, data: &CellDataset, indices: &[usize], batch: usize) -> Result<MetricsReport> {
        let (recs, loss) = self.predict(data, indices, batch)?;
        MetricsReport::from_predictions(&recs, loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Best-validation weights with preprocessing and SVM records attached.
    pub checkpoint: Checkpoint,
    pub model: LoadedModel,
    pub log: TrainingLog,
}

/// Trains a fresh network on `train`, selecting the epoch by accuracy on
/// `val`. With `backbone`, frozen parameters are copied from it first.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &CellDataset,
    train: &[usize],
    val: &[usize],
    backbone: Option<&Checkpoint>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let prep = Arc::new(Preprocessor::fit(data, train, cfg.stain_normalize, cfg.normalization)?);
    let train_src = PatchSource::new(data, train, prep.clone()).with_augmentation(cfg.augmentation());
    let val_src = PatchSource::new(data, val, prep.clone());
    let mut net = build_model(cfg)?;
    if let Some(b) = backbone {
        let n = transfer_frozen(&mut net, b)?;
        log::info!("copied {n} frozen parameters from the backbone checkpoint");
    }
    let outcome = fit(&mut net, &train_src, &val_src, &cfg.train_config())?;
    let mut checkpoint = outcome.best;
    checkpoint.restore_into(&mut net)?;
    checkpoint.aux.extend(prep.to_aux());
    let svm = match cfg.head {
        HeadKind::Softmax => None,
        HeadKind::Svm => {
            let clean = PatchSource::new(data, train, prep.clone());
            let (head, sol) = SvmHead::fit(&net, None, &clean, &cfg.svm, cfg.eval_batch)?;
            log::info!(
                "svm: {} support vectors, {} updates, KKT gap {:.2e}",
                head.model.n_support(),
                sol.iterations,
                sol.gap
            );
            checkpoint.aux.extend(head.to_aux());
            Some(head)
        }
    };
    Ok(TrainedModel {
        checkpoint,
        model: LoadedModel { net, prep, svm },
        log: outcome.log,
    })
}

/// Metrics of one trained model on its training, validation and test sets.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub trained: TrainedModel,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
}

pub fn run_single(
    cfg: &ExperimentConfig,
    data: &CellDataset,
    train: &[usize],
    val: &[usize],
    test: &[usize],
    backbone: Option<&Checkpoint>,
) -> Result<RunResult> {
    let trained = train_model(cfg, data, train, val, backbone)?;
    let m = &trained.model;
    let b = cfg.eval_batch;
    Ok(RunResult {
        train: m.report(data, train, b)?,
        val: m.report(data, val, b)?,
        test: if test.is_empty() { None } else { Some(m.report(data, test, b)?) },
        trained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_lists_every_bad_key() {
        let mut c = ExperimentConfig::new(ModelPreset::CustomScaled, 8);
        c.freeze = "L9".into();
        c.eval_batch = 0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("input_size") && msg.contains("freeze") && msg.contains("eval_batch"), "{msg}");
    }

    #[test]
    fn derived_seeds_differ() {
        let c = ExperimentConfig::new(ModelPreset::CustomScaled, 32);
        assert_ne!(c.derived(0).seed, c.derived(1).seed);
        assert_eq!(c.derived(3), c.derived(3));
    }

    #[test]
    fn presets_parse() {
        for p in [ModelPreset::Custom, ModelPreset::CustomScaled, ModelPreset::VggBaseline, ModelPreset::VggScaled] {
            assert_eq!(p.name().parse::<ModelPreset>().unwrap(), p);
        }
        assert!("resnet".parse::<ModelPreset>().is_err());
    }
}
