use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{group_report, metrics_from_predictions, MetricsReport, MissingnessGroupReport};
use super::optim::{optimizer_step, AdamState};
use super::split::{subject_disjoint_split, Split};
use super::{Dataset, TrainConfig};
use crate::backbone::{ModelGrads, PriorNetModel};
use crate::clip::ClipTensor;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objective::{combined_loss, loss_gradient, LossBreakdown};
use crate::rng::{domain, keyed};

/// What training reads per clip: the pooled feature when only the head
/// trains, otherwise the frozen tokens entering the lowest adapted block.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Feature(Vec<f64>),
    Prefix(Tensor),
}

impl ModelInput {
    fn logits(&self, model: &PriorNetModel) -> Result<Vec<f64>> {
        match self {
            ModelInput::Feature(f) => model.classify(f),
            ModelInput::Prefix(p) => model.classify(&model.feature_from_prefix(p)),
        }
    }
}

pub fn prepare_inputs(model: &PriorNetModel, clips: &[ClipTensor]) -> Result<Vec<ModelInput>> {
    clips
        .iter()
        .map(|c| {
            Ok(if model.has_adapters() {
                ModelInput::Prefix(model.frozen_prefix(c)?)
            } else {
                ModelInput::Feature(model.encode(c)?)
            })
        })
        .collect()
}

/// Sample-weighted epoch means of each loss component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub data_term: f64,
    pub kl_term: f64,
    pub henn: f64,
    pub ufce: f64,
    pub ce: f64,
    pub total: f64,
}

impl EpochLoss {
    fn accumulate(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.data_term += w * b.data_term;
        self.kl_term += w * b.kl_term;
        self.henn += w * b.henn;
        self.ufce += w * b.ufce;
        self.ce += w * b.ce;
        self.total += w * b.total;
    }

    fn scale(&mut self, s: f64) {
        for v in [
            &mut self.data_term,
            &mut self.kl_term,
            &mut self.henn,
            &mut self.ufce,
            &mut self.ce,
            &mut self.total,
        ] {
            *v *= s;
        }
    }
}

/// Optimises adapters and head on `inputs[i]` with label `labels[i]`.
/// Aborts with [`Error::NanLoss`] as soon as a batch produces a non-finite value.
pub fn fit(model: &mut PriorNetModel, inputs: &[ModelInput], labels: &[usize], config: &TrainConfig) -> Result<Vec<EpochLoss>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "fit",
            left: vec![inputs.len()],
            right: vec![labels.len()],
        });
    }
    let c = model.config.num_classes;
    let objective = config.objective();
    let sizes: Vec<usize> = model.trainable_slices_mut().iter().map(|s| s.len()).collect();
    let mut state = AdamState::new(sizes);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let hyper = objective.at_epoch(epoch);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut keyed(config.seed, &[domain::SHUFFLE, epoch as u64]));
        let mut record = EpochLoss {
            epoch,
            ..EpochLoss::default()
        };
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut logits = Tensor::zeros(&[batch.len(), c]);
            let mut caches = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                match &inputs[i] {
                    ModelInput::Feature(f) => logits.row_mut(r).copy_from_slice(&model.classify(f)?),
                    ModelInput::Prefix(p) => {
                        let cache = model.forward_from_prefix(p);
                        logits.row_mut(r).copy_from_slice(&cache.logits);
                        caches.push(cache);
                    }
                }
            }
            let nan = |detail: String| Error::NanLoss { epoch, step, detail };
            if !logits.is_finite() {
                return Err(nan("non-finite logits".into()));
            }
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let breakdown = combined_loss(&logits, &ys, &hyper)?;
            if !breakdown.total.is_finite() {
                return Err(nan(format!(
                    "data {} kl {} ufce {} ce {}",
                    breakdown.data_term, breakdown.kl_term, breakdown.ufce, breakdown.ce
                )));
            }
            let dlogits = loss_gradient(&logits, &ys, &hyper)?;
            let mut grads = ModelGrads::zeros_like(model);
            let mut cached = caches.iter();
            for (r, &i) in batch.iter().enumerate() {
                match &inputs[i] {
                    ModelInput::Feature(f) => model.backward_head(f, dlogits.row(r), &mut grads),
                    ModelInput::Prefix(_) => model.backward(cached.next().expect("one cache per prefix"), dlogits.row(r), &mut grads),
                }
            }
            if grads.slices().iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(nan("non-finite gradient".into()));
            }
            optimizer_step(
                &mut model.trainable_slices_mut(),
                &grads.slices(),
                &mut state,
                config.learning_rate,
                &config.optimizer,
            )?;
            record.accumulate(&breakdown, batch.len());
        }
        record.scale(1.0 / inputs.len() as f64);
        history.push(record);
    }
    Ok(history)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax-of-logits class per clip.
pub fn predict(model: &PriorNetModel, clips: &[ClipTensor]) -> Result<Vec<usize>> {
    clips.iter().map(|c| Ok(argmax(&model.logits(c)?))).collect()
}

fn check_classes(model: &PriorNetModel, dataset: &Dataset) -> Result<()> {
    let c = model.config.num_classes;
    if let Some(m) = dataset.metas.iter().find(|m| m.label >= c) {
        return Err(Error::invalid(format!("label {} does not fit a {c}-class model", m.label)));
    }
    Ok(())
}

/// Evaluates on the clips exactly as given; apply
/// [`Dataset::with_placeholders`] first for models trained without placeholders.
pub fn evaluate(model: &PriorNetModel, dataset: &Dataset) -> Result<MetricsReport> {
    check_classes(model, dataset)?;
    let preds = predict(model, &dataset.clips)?;
    metrics_from_predictions(&dataset.labels(), &preds, model.config.num_classes)
}

/// Per-missingness-group accuracy of model A versus model B. Each model sees
/// the clips with its own placeholder setting; groups follow the original
/// detection failures.
pub fn missingness_diagnostic(
    model_a: &PriorNetModel,
    placeholders_a: bool,
    model_b: &PriorNetModel,
    placeholders_b: bool,
    dataset: &Dataset,
) -> Result<MissingnessGroupReport> {
    check_classes(model_a, dataset)?;
    check_classes(model_b, dataset)?;
    let preds_a = predict(model_a, &dataset.with_placeholders(placeholders_a).clips)?;
    let preds_b = predict(model_b, &dataset.with_placeholders(placeholders_b).clips)?;
    group_report(&dataset.metas, &preds_a, &preds_b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: PriorNetModel,
    pub history: Vec<EpochLoss>,
    pub split: Split,
    /// Metrics on the held-out subjects.
    pub eval_report: MetricsReport,
    /// Predictions for `split.eval`, in that order.
    pub eval_predictions: Vec<usize>,
    pub checksum_before: String,
    pub checksum_after: String,
}

/// Loads the configured data and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.load_data()?;
    train_on(config, &dataset)
}

/// Subject-disjoint split, training on one side and evaluation on the other.
pub fn train_on(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let split = subject_disjoint_split(&dataset.metas, config.train_fraction, config.seed)?;
    let model = config.build_model()?;
    check_classes(&model, dataset)?;
    let view = dataset.with_placeholders(config.toggles.placeholders);
    let inputs = prepare_inputs(&model, &view.clips)?;
    train_prepared(config, model, &inputs, &dataset.labels(), split)
}

/// Training on precomputed inputs for every clip of the dataset.
pub(crate) fn train_prepared(
    config: &TrainConfig,
    mut model: PriorNetModel,
    inputs: &[ModelInput],
    labels: &[usize],
    split: Split,
) -> Result<TrainOutcome> {
    let checksum_before = model.frozen_checksum();
    let train_inputs: Vec<ModelInput> = split.train.iter().map(|&i| inputs[i].clone()).collect();
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let history = fit(&mut model, &train_inputs, &train_labels, config)?;
    let checksum_after = model.frozen_checksum();
    if checksum_after != checksum_before {
        return Err(Error::invalid("frozen backbone weights changed during training"));
    }
    let eval_predictions = split
        .eval
        .iter()
        .map(|&i| Ok(argmax(&inputs[i].logits(&model)?)))
        .collect::<Result<Vec<_>>>()?;
    let eval_labels: Vec<usize> = split.eval.iter().map(|&i| labels[i]).collect();
    let eval_report = metrics_from_predictions(&eval_labels, &eval_predictions, model.config.num_classes)?;
    Ok(TrainOutcome {
        model,
        history,
        split,
        eval_report,
        eval_predictions,
        checksum_before,
        checksum_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::harness::{DataSource, Toggles};
    use crate::synth::SynthSpec;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            data: DataSource::Synth(SynthSpec {
                clips_per_class: 8,
                clip_len: 4,
                height: 8,
                width: 8,
                subjects: 4,
                ..SynthSpec::default()
            }),
            encoder: EncoderConfig {
                d_model: 8,
                num_blocks: 2,
                heads: 2,
                tubelet: [2, 4, 4],
                mlp_ratio: 2,
                num_classes: 4,
                clip_len: 4,
                image_size: 8,
                seed: 0,
            },
            epochs: 2,
            batch_size: 5,
            train_fraction: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_logits() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        };
        let out = train(&cfg).unwrap();
        let data = cfg.load_data().unwrap();
        let initial = cfg.build_model().unwrap();
        for clip in &data.clips {
            assert_eq!(initial.logits(clip).unwrap(), out.model.logits(clip).unwrap());
        }
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn deterministic_and_frozen() {
        for toggles in [Toggles::new(true, true, true), Toggles::new(false, false, false)] {
            let cfg = tiny_config().with_toggles(toggles);
            let a = train(&cfg).unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.checksum_before, a.checksum_after);
            assert!(a.history.iter().all(|h| h.total.is_finite()));
            assert_eq!(serde_json::to_vec(&a.eval_report).unwrap(), serde_json::to_vec(&b.eval_report).unwrap());
        }
    }

    #[test]
    fn training_moves_only_trainable_parameters() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let init = cfg.build_model().unwrap();
        assert_eq!(init.frozen, out.model.frozen);
        assert_ne!(init.head, out.model.head);
        assert_ne!(init.adapters, out.model.adapters);
    }

    #[test]
    fn ce_only_matches_cross_entropy() {
        let cfg = tiny_config().with_toggles(Toggles::new(true, false, false));
        let out = train(&cfg).unwrap();
        for h in &out.history {
            assert!((h.total - h.ce).abs() < 1e-12);
            assert_eq!(h.henn, 0.0);
        }
    }

    #[test]
    fn eval_predictions_match_full_forward() {
        let cfg = tiny_config().with_toggles(Toggles::new(false, true, true));
        let data = cfg.load_data().unwrap();
        let out = train_on(&cfg, &data).unwrap();
        let view = data.with_placeholders(false).subset(&out.split.eval);
        assert_eq!(predict(&out.model, &view.clips).unwrap(), out.eval_predictions);
        assert_eq!(evaluate(&out.model, &view).unwrap(), out.eval_report);
    }

    #[test]
    fn diagnostic_of_identical_models_is_flat() {
        let cfg = tiny_config();
        let data = cfg.load_data().unwrap();
        let model = cfg.build_model().unwrap();
        let r = missingness_diagnostic(&model, true, &model, true, &data).unwrap();
        assert_eq!(r.groups.iter().map(|g| g.count).sum::<usize>(), data.len());
        assert!(r.groups.iter().all(|g| g.delta == 0.0));
    }

    #[test]
    fn nan_loss_aborts() {
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            epochs: 3,
            ..tiny_config().with_toggles(Toggles::new(true, false, true))
        };
        let err = train(&cfg).unwrap_err();
        assert!(matches!(err, Error::NanLoss { .. }), "{err}");
    }

    #[test]
    fn class_count_mismatch() {
        let cfg = tiny_config();
        let data = cfg.load_data().unwrap();
        let model = PriorNetModel::new(EncoderConfig {
            num_classes: 2,
            ..cfg.encoder.clone()
        })
        .unwrap();
        assert!(evaluate(&model, &data).is_err());
    }
}
