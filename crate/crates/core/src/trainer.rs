//! Two-stage training protocol: softmax pre-training until the
//! collapse-avoidance accuracy criterion is met, then batch-hard triplet
//! fine-tuning with loss curves and periodic validation metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{random_train_augment, AugmentParams};
use crate::backbone::{
    backward_detailed, forward_embed, forward_logits, sgd_step, BackboneModel, LossSpec,
    ModelError, SgdState,
};
use crate::dataset::{sample_batch, Batch, DataError, Dataset, LabelVocab};
use crate::eval::{all_to_all, compute_eer, EvalError, TtaEmbedding};
use crate::image::LabeledImage;
use crate::triplet::{
    is_hard, mine_batch_hard, pairwise_distances, MarginSpec, Metric, Reduction, TripletError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("softmax head width {head} does not match training class count {classes}")]
    HeadMismatch { head: usize, classes: usize },
    #[error("{stage} stage diverged at step {step}: {reason}")]
    Diverged {
        stage: Stage,
        step: u64,
        reason: String,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Triplet,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Pretrain => write!(f, "pretrain"),
            Stage::Triplet => write!(f, "triplet"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Pre-training stops once top-1 accuracy on the unaugmented training
    /// set reaches this rate.
    pub pretrain_target_acc: f64,
    pub pretrain_max_epochs: usize,
    pub triplet_steps: usize,
    pub margin: MarginSpec,
    pub reduction: Reduction,
    pub seed: u64,
    /// Validation EER cadence during triplet training; 0 disables it.
    pub eval_every: usize,
    pub aug: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            k: 4,
            lr: 0.05,
            momentum: 0.9,
            pretrain_target_acc: 0.9,
            pretrain_max_epochs: 60,
            triplet_steps: 300,
            margin: MarginSpec::SoftMargin,
            reduction: Reduction::Sum,
            seed: 7,
            eval_every: 50,
            aug: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.p < 2 || self.k < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "P and K must be >= 2 (got P={}, K={})",
                self.p, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain_target_acc) {
            return Err(TrainError::InvalidConfig(format!(
                "pretrain_target_acc must lie in [0,1] (got {})",
                self.pretrain_target_acc
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!("bad lr {}", self.lr)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum must lie in [0,1) (got {})",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    /// Fraction of mined triplets that are hard (margin 0 under the soft
    /// margin); absent for pre-training steps.
    pub hard_fraction: Option<f64>,
    pub val_eer: Option<f64>,
}

/// Step-indexed loss curve; serializes to a line-oriented CSV log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
    pretrain_warning: bool,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn pretrain_warning(&self) -> bool {
        self.pretrain_warning
    }

    fn push(&mut self, record: TrainRecord) {
        debug_assert!(self
            .records
            .last()
            .map_or(true, |last| record.step > last.step));
        self.records.push(record);
    }

    /// Concatenates `other` after this log, renumbering its steps so the
    /// combined sequence stays strictly increasing.
    pub fn append(&mut self, other: TrainLog) {
        let offset = self.records.last().map_or(0, |r| r.step);
        for mut r in other.records {
            r.step += offset;
            self.records.push(r);
        }
        self.pretrain_warning |= other.pretrain_warning;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.pretrain_warning {
            out.push_str("# warning: triplet stage started from a non-pretrained model\n");
        }
        out.push_str("step,stage,loss,hard_frac,val_eer\n");
        for r in &self.records {
            let hard = r.hard_fraction.map(|v| v.to_string()).unwrap_or_default();
            let eer = r.val_eer.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.stage, r.loss, hard, eer));
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Top-1 accuracy of the softmax head on unaugmented images.
pub fn train_accuracy(
    model: &BackboneModel,
    dataset: &Dataset,
    vocab: &LabelVocab,
) -> Result<f64, TrainError> {
    let hits: Vec<bool> = dataset
        .images()
        .par_iter()
        .map(|img| -> Result<bool, TrainError> {
            let logits = forward_logits(model, img)?;
            let predicted = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok(vocab.index_of(img.class_id()) == Some(predicted))
        })
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

/// Cross-entropy epochs over shuffled mini-batches of P*K images until the
/// training top-1 accuracy reaches the target or the epoch budget runs out.
pub fn pretrain<R: Rng>(
    model: &mut BackboneModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let vocab = LabelVocab::from_dataset(dataset);
    let head = model.config().num_classes.unwrap_or(0);
    if head != vocab.len() {
        return Err(TrainError::HeadMismatch {
            head,
            classes: vocab.len(),
        });
    }
    let mut state = SgdState::new(model);
    let mut log = TrainLog::new();
    let mut step = 0u64;
    let batch_size = cfg.p * cfg.k;
    for _epoch in 0..cfg.pretrain_max_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let images: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| dataset.images()[i].clone())
                .collect();
            let batch = Batch::new(images);
            let (loss, grads, _) =
                backward_detailed(model, &batch, &LossSpec::SoftmaxCe { vocab: &vocab })?;
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    stage: Stage::Pretrain,
                    step,
                    reason: "non-finite loss".into(),
                });
            }
            apply_step(model, &grads, cfg, &mut state, Stage::Pretrain, step)?;
            log.push(TrainRecord {
                step,
                stage: Stage::Pretrain,
                loss,
                hard_fraction: None,
                val_eer: None,
            });
        }
        if train_accuracy(model, dataset, &vocab)? >= cfg.pretrain_target_acc {
            break;
        }
    }
    Ok(log)
}

/// Batch-hard triplet fine-tuning: sample P x K, randomly augment, embed,
/// mine, step. The softmax head is frozen throughout (the triplet path
/// produces no head gradient and the stage starts with fresh momentum).
pub fn train_triplet<R: Rng>(
    model: &mut BackboneModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
    validation: Option<&Dataset>,
    from_pretrained: bool,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if dataset.num_classes() < cfg.p {
        return Err(DataError::NotEnoughClasses {
            available: dataset.num_classes(),
            requested: cfg.p,
        }
        .into());
    }
    let mut log = TrainLog::new();
    log.pretrain_warning = !from_pretrained;
    let mut state = SgdState::new(model);
    for step in 1..=cfg.triplet_steps as u64 {
        let batch = sample_batch(dataset, cfg.p, cfg.k, rng)?;
        let mut augmented = Vec::with_capacity(batch.len());
        for img in batch.images() {
            augmented.push(random_train_augment(img, &cfg.aug, rng));
        }
        let batch = Batch::new(augmented);
        let spec = LossSpec::Triplet {
            margin: cfg.margin,
            reduction: cfg.reduction,
        };
        let (loss, grads, triplets) = backward_detailed(model, &batch, &spec)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                stage: Stage::Triplet,
                step,
                reason: "non-finite loss".into(),
            });
        }
        let triplets = triplets.expect("triplet loss always mines");
        let hard_margin = match cfg.margin {
            MarginSpec::HardMargin(m) => m,
            MarginSpec::SoftMargin => 0.0,
        };
        let hard_fraction = triplets.iter().filter(|t| is_hard(t, hard_margin)).count() as f64
            / triplets.len().max(1) as f64;
        apply_step(model, &grads, cfg, &mut state, Stage::Triplet, step)?;

        let val_eer = match validation {
            Some(val) if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 => {
                Some(validation_eer(model, val)?)
            }
            _ => None,
        };
        log.push(TrainRecord {
            step,
            stage: Stage::Triplet,
            loss,
            hard_fraction: Some(hard_fraction),
            val_eer,
        });
    }
    Ok(log)
}

fn apply_step(
    model: &mut BackboneModel,
    grads: &crate::backbone::GradientSet,
    cfg: &TrainConfig,
    state: &mut SgdState,
    stage: Stage,
    step: u64,
) -> Result<(), TrainError> {
    sgd_step(model, grads, cfg.lr, cfg.momentum, state).map_err(|e| match e {
        ModelError::NonFiniteGradient(name) | ModelError::NonFiniteParameter(name) => {
            TrainError::Diverged {
                stage,
                step,
                reason: format!("non-finite values in {name}"),
            }
        }
        other => TrainError::Model(other),
    })
}

/// Validation EER on plain (non-TTA) embeddings under cosine matching.
pub fn validation_eer(model: &BackboneModel, dataset: &Dataset) -> Result<f64, TrainError> {
    let embeddings = plain_embeddings(model, dataset)?;
    let scores = all_to_all(&embeddings, Metric::Cosine)?;
    Ok(compute_eer(&scores)?.0)
}

/// Plain per-image embeddings wrapped for matching.
pub fn plain_embeddings(
    model: &BackboneModel,
    dataset: &Dataset,
) -> Result<Vec<TtaEmbedding>, TrainError> {
    dataset
        .images()
        .par_iter()
        .map(|img| {
            let e = forward_embed(model, img)?;
            Ok(TtaEmbedding::from_parts(
                e.values,
                img.source_id(),
                img.class_id(),
            ))
        })
        .collect()
}

/// Mean (d_an - d_ap) over batch-hard triplets mined across the whole
/// dataset; the separation signal a collapsed model fails to produce.
pub fn mean_mined_gap(model: &BackboneModel, dataset: &Dataset) -> Result<f64, TrainError> {
    let embeddings: Vec<crate::backbone::Embedding> = dataset
        .images()
        .par_iter()
        .map(|img| forward_embed(model, img))
        .collect::<Result<_, _>>()?;
    let dm = pairwise_distances(&embeddings, Metric::EuclideanL2)?;
    let labels: Vec<&str> = dataset.images().iter().map(|i| i.class_id()).collect();
    let triplets = mine_batch_hard(&dm, &labels)?;
    Ok(triplets.iter().map(|t| t.d_an - t.d_ap).sum::<f64>() / triplets.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, BackboneConfig};
    use crate::dataset::generate_synthetic;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            p: 2,
            k: 2,
            lr: 0.02,
            momentum: 0.9,
            pretrain_target_acc: 0.9,
            pretrain_max_epochs: 2,
            triplet_steps: 3,
            margin: MarginSpec::SoftMargin,
            reduction: Reduction::Mean,
            seed: 5,
            eval_every: 0,
            aug: AugmentParams::default(),
        }
    }

    fn tiny_setup() -> (BackboneModel, Dataset) {
        let ds = generate_synthetic(3, 4, 16, 21).unwrap();
        let config = BackboneConfig::tiny().with_classes(3);
        let model = init_model(&config, 1).unwrap();
        (model, ds)
    }

    #[test]
    fn pretrain_rejects_head_mismatch() {
        let (_, ds) = tiny_setup();
        let mut model = init_model(&BackboneConfig::tiny().with_classes(5), 1).unwrap();
        let cfg = quick_cfg();
        let err = pretrain(&mut model, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            err,
            Err(TrainError::HeadMismatch { head: 5, classes: 3 })
        ));
    }

    #[test]
    fn pretrain_target_zero_stops_after_one_epoch() {
        let (mut model, ds) = tiny_setup();
        let mut cfg = quick_cfg();
        cfg.pretrain_target_acc = 0.0;
        cfg.pretrain_max_epochs = 50;
        let log = pretrain(&mut model, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // One epoch of 12 images in chunks of 4.
        assert_eq!(log.records().len(), 3);
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let (model0, ds) = tiny_setup();
        let cfg = quick_cfg();
        let mut m1 = model0.clone();
        let mut m2 = model0.clone();
        let l1 = pretrain(&mut m1, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let l2 = pretrain(&mut m2, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn triplet_zero_steps_returns_model_unchanged() {
        let (mut model, ds) = tiny_setup();
        let before = model.clone();
        let mut cfg = quick_cfg();
        cfg.triplet_steps = 0;
        let log = train_triplet(
            &mut model,
            &ds,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            None,
            true,
        )
        .unwrap();
        assert_eq!(model, before);
        assert!(log.records().is_empty());
        assert!(!log.pretrain_warning());
    }

    #[test]
    fn triplet_freezes_softmax_head() {
        let (mut model, ds) = tiny_setup();
        let cfg = quick_cfg();
        let names = model.param_names();
        let head_before: Vec<_> = model
            .params()
            .iter()
            .zip(&names)
            .filter(|(_, n)| n.starts_with("head."))
            .map(|(t, _)| t.clone())
            .collect();
        train_triplet(
            &mut model,
            &ds,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            None,
            true,
        )
        .unwrap();
        let head_after: Vec<_> = model
            .params()
            .iter()
            .zip(&names)
            .filter(|(_, n)| n.starts_with("head."))
            .map(|(t, _)| t.clone())
            .collect();
        assert_eq!(head_before, head_after);
        // The trunk did move.
        assert!(model
            .params()
            .iter()
            .zip(init_model(model.config(), 1).unwrap().params())
            .any(|(a, b)| a != b));
    }

    #[test]
    fn triplet_requires_enough_classes() {
        let (mut model, ds) = tiny_setup();
        let mut cfg = quick_cfg();
        cfg.p = 7;
        let err = train_triplet(
            &mut model,
            &ds,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            None,
            true,
        );
        assert!(matches!(
            err,
            Err(TrainError::Data(DataError::NotEnoughClasses { .. }))
        ));
    }

    #[test]
    fn non_pretrained_run_sets_log_warning() {
        let (mut model, ds) = tiny_setup();
        let mut cfg = quick_cfg();
        cfg.triplet_steps = 1;
        let log = train_triplet(
            &mut model,
            &ds,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            None,
            false,
        )
        .unwrap();
        assert!(log.pretrain_warning());
        assert!(log.to_csv().starts_with("# warning"));
    }

    #[test]
    fn divergence_aborts_with_step_index() {
        let (mut model, ds) = tiny_setup();
        let mut cfg = quick_cfg();
        cfg.lr = 1e200; // guaranteed overflow in a couple of steps
        cfg.triplet_steps = 50;
        cfg.pretrain_max_epochs = 50;
        let err = train_triplet(
            &mut model,
            &ds,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            None,
            true,
        );
        match err {
            Err(TrainError::Diverged { stage, step, .. }) => {
                assert_eq!(stage, Stage::Triplet);
                assert!(step >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_csv_shape_and_append() {
        let mut a = TrainLog::new();
        a.push(TrainRecord {
            step: 1,
            stage: Stage::Pretrain,
            loss: 1.5,
            hard_fraction: None,
            val_eer: None,
        });
        let mut b = TrainLog::new();
        b.push(TrainRecord {
            step: 1,
            stage: Stage::Triplet,
            loss: 0.7,
            hard_fraction: Some(0.5),
            val_eer: Some(0.25),
        });
        a.append(b);
        let csv = a.to_csv();
        assert_eq!(
            csv,
            "step,stage,loss,hard_frac,val_eer\n1,pretrain,1.5,,\n2,triplet,0.7,0.5,0.25\n"
        );
        let steps: Vec<u64> = a.records().iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = quick_cfg();
        cfg.p = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.pretrain_target_acc = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }
}
