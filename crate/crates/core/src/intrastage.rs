//! Stage 1: learning from per-camera labels only.
//!
//! The default objective combines the camera-specific memory classifier with
//! the quintuplet loss. The other objectives exist for ablation.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{rng_for, BatchLabel, TrainingView};
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet, quintuplet_loss, LossTrace, QuintupletConfig, Reduction, DEFAULT_MARGIN,
};
use crate::memory::{intra_id_loss, ClassifierScope, MemoryBank, DEFAULT_MU, DEFAULT_TAU};
use crate::model::{Adam, AdamConfig, EmbeddingModel, LrSchedule};
use crate::sampler::{PkConfig, PkSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraObjective {
    /// One fully connected softmax classifier per camera.
    ParametricBranches,
    /// Memory classifier whose softmax runs over all accumulated IDs.
    AgnosticMemory,
    /// Camera-specific memory classifier.
    CameraMemory,
    /// Camera-specific memory classifier plus batch-hard triplet on `g`.
    CameraMemoryTriplet,
    /// Camera-specific memory classifier plus quintuplet loss.
    CameraMemoryQuintuplet,
}

impl IntraObjective {
    fn uses_memory(self) -> bool {
        !matches!(self, IntraObjective::ParametricBranches)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntraConfig {
    pub epochs: usize,
    /// Budget the learning-rate drop points refer to.
    pub reference_epochs: usize,
    pub adam: AdamConfig,
    pub mu: f64,
    pub tau: f64,
    pub quintuplet: QuintupletConfig,
    pub triplet_margin: f64,
    /// Combination of the metric-loss terms over the anchors of a batch.
    pub metric_reduction: Reduction,
    /// Multiplier on the metric loss.
    pub metric_weight: f64,
    pub sampler: PkConfig,
    /// Std of the per-camera classifier weights (parametric objective).
    pub head_init_std: f64,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            reference_epochs: 50,
            adam: AdamConfig::default(),
            mu: DEFAULT_MU,
            tau: DEFAULT_TAU,
            quintuplet: QuintupletConfig::default(),
            triplet_margin: DEFAULT_MARGIN,
            metric_reduction: Reduction::Mean,
            metric_weight: 8.0,
            sampler: PkConfig::default(),
            head_init_std: 0.01,
        }
    }
}

impl IntraConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .sampler
            .violations()
            .into_iter()
            .map(|s| format!("intra.{s}"))
            .collect();
        if !(0.0..=1.0).contains(&self.mu) {
            v.push(format!("intra.mu = {} outside [0, 1]", self.mu));
        }
        if !(self.tau > 0.0) {
            v.push(format!("intra.tau = {} must be positive", self.tau));
        }
        if self.quintuplet.m1 < 0.0 || self.quintuplet.m2 < 0.0 || self.triplet_margin < 0.0 {
            v.push("intra margins must be non-negative".into());
        }
        if !(self.metric_weight >= 0.0) {
            v.push(format!("intra.metric_weight = {} must be non-negative", self.metric_weight));
        }
        if !(self.adam.lr > 0.0) {
            v.push("intra.adam.lr must be positive".into());
        }
        if self.reference_epochs == 0 {
            v.push("intra.reference_epochs must be positive".into());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct IntraOutcome {
    pub model: EmbeddingModel,
    /// Memory after training; absent for the parametric objective.
    pub bank: Option<MemoryBank>,
    pub trace: LossTrace,
    pub skipped_instance_terms: usize,
    pub skipped_centroid_terms: usize,
}

/// Runs stage 1 from `init`.
pub fn train_intra(
    view: &TrainingView<'_>,
    init: &EmbeddingModel,
    cfg: &IntraConfig,
    objective: IntraObjective,
) -> Result<IntraOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let layout = view.layout();
    let sampler = PkSampler::intra(view, cfg.sampler.clone())?;
    let mut model = init.clone();
    let mut bank = if objective.uses_memory() {
        Some(MemoryBank::init(view, &model, cfg.mu, cfg.tau)?)
    } else {
        None
    };
    let mut heads: Vec<Array2<f64>> = if objective.uses_memory() {
        Vec::new()
    } else {
        let mut rng = rng_for(cfg.sampler.seed, 200);
        layout
            .ids_per_camera()
            .iter()
            .map(|&n| {
                Array2::from_shape_simple_fn((model.embed_dim(), n), || {
                    cfg.head_init_std * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect()
    };
    let schedule = LrSchedule::scaled(cfg.adam.lr, cfg.epochs, cfg.reference_epochs);
    let mut opt = Adam::new(cfg.adam.clone());
    let mut trace = LossTrace::default();
    let (mut skipped_i, mut skipped_c) = (0, 0);

    for epoch in 0..cfg.epochs {
        opt.set_lr(schedule.lr_at(epoch));
        for batch in sampler.epoch(epoch) {
            let x = view.features(&batch.indices);
            let labels = view.labels(&batch.indices);
            let out = model.forward(x.view())?;
            let mut grad_g = Array2::zeros(out.g.raw_dim());
            let (id_loss, mut grad_f, metric_loss, head_grads) = match objective {
                IntraObjective::ParametricBranches => {
                    let (l, gf, gh) = branch_loss(&heads, &out.f, &labels)?;
                    (l, gf, 0.0, gh)
                }
                _ => {
                    let bank = bank.as_ref().unwrap();
                    let scope = if objective == IntraObjective::AgnosticMemory {
                        ClassifierScope::CameraAgnostic
                    } else {
                        ClassifierScope::CameraSpecific
                    };
                    let (l, gf) = intra_id_loss(bank, &out.f, &labels, scope)?;
                    (l, gf, 0.0, Vec::new())
                }
            };
            let w = cfg.metric_weight * cfg.metric_reduction.factor(labels.len());
            let metric_loss = match objective {
                IntraObjective::CameraMemoryTriplet => {
                    let ids: Vec<usize> = labels.iter().map(|l| l.global_id.0).collect();
                    let (l, gg) = batch_hard_triplet(&out.g, &ids, cfg.triplet_margin)?;
                    grad_g.scaled_add(w, &gg);
                    w * l
                }
                IntraObjective::CameraMemoryQuintuplet => {
                    let q = quintuplet_loss(
                        &out.g,
                        &out.f,
                        &labels,
                        bank.as_ref().unwrap(),
                        &cfg.quintuplet,
                    )?;
                    grad_g.scaled_add(w, &q.grad_g);
                    grad_f.scaled_add(w, &q.grad_f);
                    skipped_i += q.report.skipped_instance_terms;
                    skipped_c += q.report.skipped_centroid_terms;
                    w * q.loss
                }
                _ => metric_loss,
            };
            trace.push(epoch, id_loss, metric_loss);

            let grads = model.backward(&out.tape, &grad_g, &grad_f)?;
            let mut params = model.param_slices_mut();
            let mut grad_slices = grads.slices();
            for (h, gh) in heads.iter_mut().zip(&head_grads) {
                params.push(h.as_slice_mut().unwrap());
                grad_slices.push(gh.as_slice().unwrap());
            }
            opt.step(params, &grad_slices)?;

            if let Some(bank) = bank.as_mut() {
                let f_new = model.embed(x.view())?;
                for (row, l) in f_new.rows().into_iter().zip(&labels) {
                    bank.update(l.global_id, row)?;
                }
            }
        }
    }
    Ok(IntraOutcome {
        model,
        bank,
        trace,
        skipped_instance_terms: skipped_i,
        skipped_centroid_terms: skipped_c,
    })
}

/// Per-camera softmax classifiers on `f`, cross entropy balanced per camera
/// like the memory loss. Returns loss, gradient for `f`, gradient per head.
fn branch_loss(
    heads: &[Array2<f64>],
    f: &Array2<f64>,
    labels: &[BatchLabel],
) -> Result<(f64, Array2<f64>, Vec<Array2<f64>>)> {
    let mut per_camera = vec![0usize; heads.len()];
    for l in labels {
        per_camera[l.camera - 1] += 1;
    }
    let mut loss = 0.0;
    let mut grad_f = Array2::zeros(f.raw_dim());
    let mut grad_heads: Vec<Array2<f64>> = heads.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
    for (i, l) in labels.iter().enumerate() {
        let w = 1.0 / per_camera[l.camera - 1] as f64;
        let head = &heads[l.camera - 1];
        let fi = f.row(i);
        let logits = fi.dot(head);
        let y = l.intra_label - 1;
        if head.ncols() < 2 {
            // a single-ID camera has nothing to discriminate
            continue;
        }
        let (li, dl) = crate::losses::label_smoothed_ce(logits.view(), y, 0.0)?;
        loss += w * li;
        let dl = dl * w;
        grad_f.row_mut(i).assign(&head.dot(&dl));
        let gh = &mut grad_heads[l.camera - 1];
        for (r, &fv) in fi.iter().enumerate() {
            gh.row_mut(r).scaled_add(fv, &dl);
        }
    }
    Ok((loss, grad_f, grad_heads))
}
