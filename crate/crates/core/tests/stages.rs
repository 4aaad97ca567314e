//! Training-loop behaviour of both stages.

use icsreid::association::PseudoLabeling;
use icsreid::dataset::{generate, GeneratorConfig};
use icsreid::interstage::{train_inter, InterConfig};
use icsreid::intrastage::{train_intra, IntraConfig, IntraObjective};
use icsreid::model::{EmbeddingModel, ModelConfig};
use icsreid::sampler::PkConfig;

fn separable() -> icsreid::dataset::Dataset {
    generate(&GeneratorConfig {
        num_persons: 60,
        noise_sigma: 0.1,
        camera_transform_scale: 0.1,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn inter_loss_decreases_on_true_labels() {
    let data = separable();
    let labels = PseudoLabeling::from_keys(&data.truth().per_id);
    let init = EmbeddingModel::new(data.input_dim(), &ModelConfig::default()).unwrap();
    let cfg = InterConfig {
        epochs: 5,
        ..Default::default()
    };
    let out = train_inter(&data.training_view(), &labels, &init, &cfg).unwrap();
    let totals: Vec<f64> = out.trace.epoch_means().iter().map(|e| e.total).collect();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}

#[test]
fn inter_with_zero_epochs_returns_init() {
    let data = separable();
    let labels = PseudoLabeling::from_keys(&data.truth().per_id);
    let init = EmbeddingModel::new(data.input_dim(), &ModelConfig::default()).unwrap();
    let cfg = InterConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = train_inter(&data.training_view(), &labels, &init, &cfg).unwrap();
    assert_eq!(out.model, init);
    assert!(out.trace.records.is_empty());
}

#[test]
fn intra_training_is_deterministic() {
    let data = separable();
    let init = EmbeddingModel::new(data.input_dim(), &ModelConfig::default()).unwrap();
    let cfg = IntraConfig {
        epochs: 2,
        sampler: PkConfig {
            p: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let view = data.training_view();
    let a = train_intra(&view, &init, &cfg, IntraObjective::CameraMemoryQuintuplet).unwrap();
    let b = train_intra(&view, &init, &cfg, IntraObjective::CameraMemoryQuintuplet).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.trace, b.trace);
}
