//! Stage 2: supervised re-training on pseudo labels produced by association.
//!
//! A linear classifier head maps the embedding to pseudo-class logits. It is
//! only used for training; retrieval reads the embedding alone.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::association::PseudoLabeling;
use crate::dataset::{rng_for, TrainingView};
use crate::error::{Error, Result};
use crate::losses::{inter_total, LossTrace, Reduction, DEFAULT_MARGIN, DEFAULT_SMOOTHING};
use crate::model::{Adam, AdamConfig, EmbeddingModel, LrSchedule};
use crate::sampler::{PkConfig, PkSampler};

/// Bias-free linear head, `d × Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, num_classes: usize, std: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!(
                "{num_classes} pseudo classes, need at least 2"
            )));
        }
        let mut rng = rng_for(seed, 300);
        let weights = Array2::from_shape_simple_fn((embed_dim, num_classes), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterConfig {
    pub epochs: usize,
    /// Budget the learning-rate drop points refer to.
    pub reference_epochs: usize,
    pub adam: AdamConfig,
    /// Label smoothing of the cross entropy.
    pub epsilon: f64,
    pub triplet_margin: f64,
    /// Combination of the triplet terms over the anchors of a batch.
    pub metric_reduction: Reduction,
    pub sampler: PkConfig,
    pub head_init_std: f64,
}

impl Default for InterConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            reference_epochs: 120,
            adam: AdamConfig::default(),
            epsilon: DEFAULT_SMOOTHING,
            triplet_margin: DEFAULT_MARGIN,
            metric_reduction: Reduction::Mean,
            sampler: PkConfig::default(),
            head_init_std: 0.01,
        }
    }
}

impl InterConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .sampler
            .violations()
            .into_iter()
            .map(|s| format!("inter.{s}"))
            .collect();
        if !(0.0..1.0).contains(&self.epsilon) {
            v.push(format!("inter.epsilon = {} outside [0, 1)", self.epsilon));
        }
        if self.triplet_margin < 0.0 {
            v.push("inter.triplet_margin must be non-negative".into());
        }
        if !(self.adam.lr > 0.0) {
            v.push("inter.adam.lr must be positive".into());
        }
        if self.reference_epochs == 0 {
            v.push("inter.reference_epochs must be positive".into());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct InterOutcome {
    pub model: EmbeddingModel,
    pub head: ClassifierHead,
    pub trace: LossTrace,
}

/// Runs stage 2 from `init` using `labeling` as the class of every sample.
pub fn train_inter(
    view: &TrainingView<'_>,
    labeling: &PseudoLabeling,
    init: &EmbeddingModel,
    cfg: &InterConfig,
) -> Result<InterOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if labeling.num_ids() != view.layout().num_ids() {
        return Err(Error::Layout(format!(
            "pseudo labels cover {} IDs, training data has {}",
            labeling.num_ids(),
            view.layout().num_ids()
        )));
    }
    let q = labeling.num_classes();
    if q < cfg.sampler.p {
        return Err(Error::config(format!(
            "{q} pseudo classes, fewer than P = {}; use inter.sampler.p <= {q}",
            cfg.sampler.p
        )));
    }
    let mut head = ClassifierHead::new(init.embed_dim(), q, cfg.head_init_std, cfg.sampler.seed)?;
    let mut model = init.clone();
    let mut trace = LossTrace::default();
    if cfg.epochs == 0 {
        return Ok(InterOutcome { model, head, trace });
    }
    let sampler = PkSampler::inter(view, labeling, cfg.sampler.clone())?;
    let schedule = LrSchedule::scaled(cfg.adam.lr, cfg.epochs, cfg.reference_epochs);
    let mut opt = Adam::new(cfg.adam.clone());

    for epoch in 0..cfg.epochs {
        opt.set_lr(schedule.lr_at(epoch));
        for batch in sampler.epoch(epoch) {
            let x = view.features(&batch.indices);
            let out = model.forward(x.view())?;
            let (mut loss, grad_head) = inter_total(
                &head.weights,
                &out.g,
                &out.f,
                &batch.classes,
                cfg.epsilon,
                cfg.triplet_margin,
            )?;
            let w = cfg.metric_reduction.factor(batch.classes.len());
            loss.metric_loss *= w;
            loss.grad_g *= w;
            trace.push(epoch, loss.id_loss, loss.metric_loss);
            let grads = model.backward(&out.tape, &loss.grad_g, &loss.grad_f)?;
            let mut params = model.param_slices_mut();
            params.push(head.weights.as_slice_mut().unwrap());
            let mut grad_slices = grads.slices();
            grad_slices.push(grad_head.as_slice().unwrap());
            opt.step(params, &grad_slices)?;
        }
    }
    Ok(InterOutcome { model, head, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GeneratorConfig};
    use crate::model::ModelConfig;

    #[test]
    fn too_few_pseudo_classes() {
        let d = generate(&GeneratorConfig {
            num_persons: 6,
            ..Default::default()
        })
        .unwrap();
        let view = d.training_view();
        let one = PseudoLabeling::from_keys(&vec![0u8; view.layout().num_ids()]);
        let init = EmbeddingModel::new(d.input_dim(), &ModelConfig::default()).unwrap();
        let err = train_inter(&view, &one, &init, &InterConfig::default()).unwrap_err();
        assert!(err.to_string().contains("inter.sampler.p <= 1"), "{err}");
    }
}
