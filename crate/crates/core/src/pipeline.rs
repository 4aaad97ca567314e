//! End-to-end runs and the ablation variants.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::association::{associate, association_quality, Association, PseudoLabeling};
use crate::config::RunConfig;
use crate::dataset::{Benchmark, Dataset};
use crate::error::Result;
use crate::evaluation::{evaluate, intra_camera_rank1, MetricsReport, StageTraces};
use crate::interstage::{train_inter, InterOutcome};
use crate::intrastage::{train_intra, IntraObjective, IntraOutcome};
use crate::model::EmbeddingModel;

/// Model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Parametric per-camera classifier branches.
    M1,
    /// Camera-agnostic memory classifier.
    M2,
    /// Camera-specific memory classifier.
    M3,
    /// M3 with batch-hard triplet.
    M4,
    /// M3 with quintuplet loss; the intra-camera stage of the full model.
    M5,
    /// Full model: M5 followed by association and inter-camera training.
    M6,
    /// M5 followed by inter-camera training on true identities.
    M7,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Variant::M1 => "parametric per-camera classifiers",
            Variant::M2 => "camera-agnostic memory",
            Variant::M3 => "camera-specific memory",
            Variant::M4 => "camera-specific memory + triplet",
            Variant::M5 => "camera-specific memory + quintuplet",
            Variant::M6 => "full model (association + inter-camera)",
            Variant::M7 => "inter-camera on true identities",
        }
    }

    fn objective(self) -> IntraObjective {
        match self {
            Variant::M1 => IntraObjective::ParametricBranches,
            Variant::M2 => IntraObjective::AgnosticMemory,
            Variant::M3 => IntraObjective::CameraMemory,
            Variant::M4 => IntraObjective::CameraMemoryTriplet,
            _ => IntraObjective::CameraMemoryQuintuplet,
        }
    }
}

pub fn initial_model(train: &Dataset, cfg: &RunConfig) -> Result<EmbeddingModel> {
    EmbeddingModel::new(train.input_dim(), &cfg.model)
}

/// Stage 1 from a fresh model.
pub fn stage_one(train: &Dataset, cfg: &RunConfig, objective: IntraObjective) -> Result<IntraOutcome> {
    let init = initial_model(train, cfg)?;
    train_intra(&train.training_view(), &init, &cfg.intra, objective)
}

/// Associates the bank of a memory-based stage-1 run.
pub fn association_step(intra: &IntraOutcome, cfg: &RunConfig) -> Result<Association> {
    let bank = intra
        .bank
        .as_ref()
        .expect("memory objectives produce a bank");
    associate(bank, cfg.association.s.count())
}

pub fn stage_two(
    train: &Dataset,
    labeling: &PseudoLabeling,
    init: &EmbeddingModel,
    cfg: &RunConfig,
) -> Result<InterOutcome> {
    train_inter(&train.training_view(), labeling, init, &cfg.inter)
}

/// Scores `model` on the test set.
pub fn report(
    model: &EmbeddingModel,
    test: &Dataset,
    cfg: &RunConfig,
    association: Option<crate::association::AssociationQuality>,
    losses: StageTraces,
) -> Result<MetricsReport> {
    let seed = cfg.evaluation.split_seed;
    Ok(MetricsReport {
        retrieval: evaluate(model, test, seed)?,
        intra_camera_rank1: intra_camera_rank1(model, test, seed)?,
        association,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.variant == v).map(|r| &r.report)
    }

    pub fn map(&self, v: Variant) -> Option<f64> {
        self.get(v).map(|r| r.map())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<4} {:<42} {:>7} {:>7} {:>7} {:>7} {:>8} {:>7} {:>7}",
            "var", "description", "mAP", "R1", "R5", "R10", "intraR1", "assocP", "assocR"
        );
        for r in &self.rows {
            let m = &r.report.retrieval;
            let (p, rc) = match &r.report.association {
                Some(q) => (format!("{:.4}", q.precision), format!("{:.4}", q.recall)),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<4} {:<42} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>7} {:>7}",
                format!("{:?}", r.variant),
                r.description,
                m.map,
                m.cmc[0],
                m.cmc[1],
                m.cmc[2],
                r.report.intra_camera_rank1,
                p,
                rc
            );
        }
        out
    }
}

/// Trains and scores each requested variant. M5, M6 and M7 share one
/// stage-1 run.
pub fn run_ablation(bench: &Benchmark, cfg: &RunConfig, variants: &[Variant]) -> Result<AblationTable> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut shared: Option<IntraOutcome> = None;
    for &v in variants {
        let reuse = matches!(v, Variant::M5 | Variant::M6 | Variant::M7);
        let intra = match (&shared, reuse) {
            (Some(s), true) => s.clone(),
            _ => {
                let out = stage_one(&bench.train, &cfg, v.objective())?;
                if reuse {
                    shared = Some(out.clone());
                }
                out
            }
        };
        let intra_curve = intra.trace.epoch_means();
        let report = match v {
            Variant::M6 | Variant::M7 => {
                let (labeling, quality) = if v == Variant::M6 {
                    let a = association_step(&intra, &cfg)?;
                    let truth = bench.train.truth();
                    let q = association_quality(&a.labeling, bench.train.layout(), Some(&truth.per_id))?;
                    (a.labeling, Some(q))
                } else {
                    (PseudoLabeling::from_keys(&bench.train.truth().per_id), None)
                };
                let inter = stage_two(&bench.train, &labeling, &intra.model, &cfg)?;
                let traces = StageTraces {
                    intra: intra_curve,
                    inter: inter.trace.epoch_means(),
                };
                report(&inter.model, &bench.test, &cfg, quality, traces)?
            }
            _ => {
                let traces = StageTraces {
                    intra: intra_curve,
                    inter: Vec::new(),
                };
                report(&intra.model, &bench.test, &cfg, None, traces)?
            }
        };
        log::info!("{v:?}: mAP {:.4}", report.map());
        rows.push(AblationRow {
            variant: v,
            description: v.description().into(),
            report,
        });
    }
    Ok(AblationTable { rows })
}
