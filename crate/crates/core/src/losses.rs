//! Metric and classification losses with their gradients.
//!
//! All losses return the value together with gradients for the feature rows
//! they consume. Distances are Euclidean; at zero distance the subgradient
//! of the norm is taken as zero.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{BatchLabel, GlobalId};
use crate::error::{Error, Result};
use crate::memory::{intra_id_loss, ClassifierScope, MemoryBank};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuintupletConfig {
    /// Margin of the instance term on hidden features.
    pub m1: f64,
    /// Margin of the centroid term on embeddings.
    pub m2: f64,
}

impl Default for QuintupletConfig {
    fn default() -> Self {
        Self {
            m1: DEFAULT_MARGIN,
            m2: DEFAULT_MARGIN,
        }
    }
}

/// How per-anchor metric-loss terms are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    /// Factor applied to a summed loss over `n` anchors.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

/// Quintuplet selected for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorMining {
    pub anchor: usize,
    /// Farthest same-ID batch row; `None` when the anchor is its ID's only row.
    pub hardest_positive: Option<usize>,
    /// Nearest same-camera, different-ID batch row; `None` skips the instance term.
    pub hardest_negative: Option<usize>,
    pub positive_centroid: GlobalId,
    /// Nearest other centroid in the anchor's camera; `None` skips the centroid term.
    pub negative_centroid: Option<GlobalId>,
    pub instance_hinge: Option<f64>,
    pub centroid_hinge: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningReport {
    pub anchors: Vec<AnchorMining>,
    pub skipped_instance_terms: usize,
    pub skipped_centroid_terms: usize,
}

#[derive(Clone, Debug)]
pub struct QuintupletOutput {
    pub loss: f64,
    pub grad_g: Array2<f64>,
    pub grad_f: Array2<f64>,
    pub report: MiningReport,
}

fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Adds `scale * d|a - b|/da` to `ga` and the opposite to `gb` (if given).
fn push_distance_grad(
    grad: &mut Array2<f64>,
    feats: &Array2<f64>,
    a: usize,
    b: usize,
    dist: f64,
    scale: f64,
) {
    if dist == 0.0 {
        return;
    }
    let diff = (&feats.row(a) - &feats.row(b)) * (scale / dist);
    grad.row_mut(a).scaled_add(1.0, &diff);
    grad.row_mut(b).scaled_add(-1.0, &diff);
}

/// Pairwise distance matrix over the rows of `x`.
fn pairwise(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(x.row(i), x.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Argmax/argmin over candidates with lowest-index tie-breaking.
fn select(candidates: impl Iterator<Item = (usize, f64)>, farthest: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in candidates {
        let better = match best {
            None => true,
            Some((_, b)) => {
                if farthest {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    best
}

/// Quintuplet loss with hybrid mining.
///
/// Per anchor, the instance term uses hidden features `g`:
/// `[m1 + max_p |g_a - g_p| - min_n |g_a - g_n|]+` with positives sharing the
/// anchor's ID and negatives sharing its camera but not its ID. The centroid
/// term uses embeddings `f` and the memory:
/// `[m2 + |f_a - K[y_a]| - min_{j != y_a} |f_a - K[j]|]+` over the anchor's
/// camera. Terms are summed over anchors. Centroids are constants.
pub fn quintuplet_loss(
    g: &Array2<f64>,
    f: &Array2<f64>,
    labels: &[BatchLabel],
    bank: &MemoryBank,
    cfg: &QuintupletConfig,
) -> Result<QuintupletOutput> {
    let n = labels.len();
    if g.nrows() != n || f.nrows() != n {
        return Err(Error::Shape(format!(
            "{} hidden rows, {} embedding rows, {n} labels",
            g.nrows(),
            f.nrows()
        )));
    }
    if f.ncols() != bank.dim() {
        return Err(Error::Shape("embedding and memory dimensions differ".into()));
    }
    let dg = pairwise(g);
    let mut grad_g = Array2::zeros(g.raw_dim());
    let mut grad_f = Array2::zeros(f.raw_dim());
    let mut report = MiningReport::default();
    let mut loss = 0.0;
    let layout = bank.layout();

    for a in 0..n {
        let la = labels[a];
        let pos = select(
            (0..n)
                .filter(|&p| p != a && labels[p].global_id == la.global_id)
                .map(|p| (p, dg[[a, p]])),
            true,
        );
        let neg = select(
            (0..n)
                .filter(|&q| labels[q].camera == la.camera && labels[q].global_id != la.global_id)
                .map(|q| (q, dg[[a, q]])),
            false,
        );
        let instance_hinge = match neg {
            Some((q, d_neg)) => {
                let d_pos = pos.map_or(0.0, |(_, d)| d);
                let h = cfg.m1 + d_pos - d_neg;
                if h > 0.0 {
                    loss += h;
                    if let Some((p, d)) = pos {
                        push_distance_grad(&mut grad_g, g, a, p, d, 1.0);
                    }
                    push_distance_grad(&mut grad_g, g, a, q, d_neg, -1.0);
                }
                Some(h.max(0.0))
            }
            None => {
                report.skipped_instance_terms += 1;
                None
            }
        };

        let cols = layout.columns(la.camera)?;
        let own = la.global_id.index();
        let fa = f.row(a);
        let d_own = distance(fa, bank.centroids().row(own));
        let nearest = select(
            cols.filter(|&k| k != own)
                .map(|k| (k, distance(fa, bank.centroids().row(k)))),
            false,
        );
        let centroid_hinge = match nearest {
            Some((k, d_neg)) => {
                let h = cfg.m2 + d_own - d_neg;
                if h > 0.0 {
                    loss += h;
                    let mut ga = grad_f.row_mut(a);
                    if d_own > 0.0 {
                        ga.scaled_add(1.0 / d_own, &(&fa - &bank.centroids().row(own)));
                    }
                    if d_neg > 0.0 {
                        ga.scaled_add(-1.0 / d_neg, &(&fa - &bank.centroids().row(k)));
                    }
                }
                Some(h.max(0.0))
            }
            None => {
                report.skipped_centroid_terms += 1;
                None
            }
        };

        report.anchors.push(AnchorMining {
            anchor: a,
            hardest_positive: pos.map(|(p, _)| p),
            hardest_negative: neg.map(|(q, _)| q),
            positive_centroid: la.global_id,
            negative_centroid: nearest.map(|(k, _)| GlobalId::from_index(k)),
            instance_hinge,
            centroid_hinge,
        });
    }
    Ok(QuintupletOutput {
        loss,
        grad_g,
        grad_f,
        report,
    })
}

/// Batch-hard triplet loss, summed over anchors.
pub fn batch_hard_triplet(
    features: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = labels.len();
    if features.nrows() != n {
        return Err(Error::Shape(format!(
            "{} feature rows for {n} labels",
            features.nrows()
        )));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "{} distinct labels, need at least 2",
            counts.len()
        )));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateBatch(format!(
            "label {l} has a single instance"
        )));
    }
    let d = pairwise(features);
    let mut grad = Array2::zeros(features.raw_dim());
    let mut loss = 0.0;
    for a in 0..n {
        let (p, d_pos) = select(
            (0..n)
                .filter(|&p| p != a && labels[p] == labels[a])
                .map(|p| (p, d[[a, p]])),
            true,
        )
        .unwrap();
        let (q, d_neg) = select(
            (0..n).filter(|&q| labels[q] != labels[a]).map(|q| (q, d[[a, q]])),
            false,
        )
        .unwrap();
        let h = margin + d_pos - d_neg;
        if h > 0.0 {
            loss += h;
            push_distance_grad(&mut grad, features, a, p, d_pos, 1.0);
            push_distance_grad(&mut grad, features, a, q, d_neg, -1.0);
        }
    }
    Ok((loss, grad))
}

/// Cross entropy against a smoothed target: `1 - eps` on the true class and
/// `eps / (Q - 1)` on each other class.
pub fn label_smoothed_ce(
    logits: ArrayView1<'_, f64>,
    label: usize,
    eps: f64,
) -> Result<(f64, Array1<f64>)> {
    let q = logits.len();
    if q < 2 {
        return Err(Error::Shape(format!("{q} classes, need at least 2")));
    }
    if label >= q {
        return Err(Error::Range {
            what: "class label",
            value: label,
            lo: 0,
            hi: q - 1,
        });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("smoothing {eps} outside [0, 1)")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let off = eps / (q - 1) as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(q);
    for k in 0..q {
        let t = if k == label { 1.0 - eps } else { off };
        let log_p = logits[k] - lse;
        loss -= t * log_p;
        grad[k] = log_p.exp() - t;
    }
    Ok((loss, grad))
}

/// Batch mean of [`label_smoothed_ce`] with gradient for every logit row.
pub fn label_smoothed_ce_batch(
    logits: &Array2<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (l, g) = label_smoothed_ce(logits.row(i), y, eps)?;
        loss += l / b;
        grad.row_mut(i).assign(&(g / b));
    }
    Ok((loss, grad))
}

/// Loss components of one training step with gradients for both heads.
#[derive(Clone, Debug)]
pub struct StageLoss {
    pub id_loss: f64,
    pub metric_loss: f64,
    pub grad_g: Array2<f64>,
    pub grad_f: Array2<f64>,
}

impl StageLoss {
    pub fn total(&self) -> f64 {
        self.id_loss + self.metric_loss
    }
}

/// Intra-camera objective: non-parametric ID loss plus quintuplet loss.
pub fn intra_total(
    bank: &MemoryBank,
    g: &Array2<f64>,
    f: &Array2<f64>,
    labels: &[BatchLabel],
    cfg: &QuintupletConfig,
) -> Result<StageLoss> {
    let (id_loss, grad_id) = intra_id_loss(bank, f, labels, ClassifierScope::CameraSpecific)?;
    let q = quintuplet_loss(g, f, labels, bank, cfg)?;
    Ok(StageLoss {
        id_loss,
        metric_loss: q.loss,
        grad_g: q.grad_g,
        grad_f: grad_id + &q.grad_f,
    })
}

/// Inter-camera objective: smoothed cross entropy on `f · W` plus batch-hard
/// triplet on `g`. Returns the loss and the gradient of the head weights.
pub fn inter_total(
    head: &Array2<f64>,
    g: &Array2<f64>,
    f: &Array2<f64>,
    labels: &[usize],
    eps: f64,
    margin: f64,
) -> Result<(StageLoss, Array2<f64>)> {
    if head.nrows() != f.ncols() {
        return Err(Error::Shape(format!(
            "head expects {}-d embeddings, got {}",
            head.nrows(),
            f.ncols()
        )));
    }
    let logits = f.dot(head);
    let (id_loss, d_logits) = label_smoothed_ce_batch(&logits, labels, eps)?;
    let (metric_loss, grad_g) = batch_hard_triplet(g, labels, margin)?;
    let grad_head = f.t().dot(&d_logits);
    let grad_f = d_logits.dot(&head.t());
    Ok((
        StageLoss {
            id_loss,
            metric_loss,
            grad_g,
            grad_f,
        },
        grad_head,
    ))
}

/// One optimizer step's loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub id_loss: f64,
    pub metric_loss: f64,
}

/// Per-epoch mean of the loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub id_loss: f64,
    pub metric_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn push(&mut self, epoch: usize, id_loss: f64, metric_loss: f64) {
        let step = self.records.len() + 1;
        self.records.push(TraceRecord {
            step,
            epoch,
            id_loss,
            metric_loss,
        });
    }

    pub fn epoch_means(&self) -> Vec<EpochLoss> {
        let mut out: Vec<(EpochLoss, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, n)) if e.epoch == r.epoch => {
                    e.id_loss += r.id_loss;
                    e.metric_loss += r.metric_loss;
                    *n += 1;
                }
                _ => out.push((
                    EpochLoss {
                        epoch: r.epoch,
                        id_loss: r.id_loss,
                        metric_loss: r.metric_loss,
                        total: 0.0,
                    },
                    1,
                )),
            }
        }
        out.into_iter()
            .map(|(mut e, n)| {
                e.id_loss /= n as f64;
                e.metric_loss /= n as f64;
                e.total = e.id_loss + e.metric_loss;
                e
            })
            .collect()
    }

    /// Run-log lines: `stage step epoch id_loss metric_loss total`.
    pub fn to_tsv(&self, stage: &str) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{stage}\t{}\t{}\t{:e}\t{:e}\t{:e}",
                r.step,
                r.epoch,
                r.id_loss,
                r.metric_loss,
                r.id_loss + r.metric_loss
            );
        }
        out
    }
}

/// Header of the run-log file.
pub const RUN_LOG_HEADER: &str = "stage\tstep\tepoch\tid_loss\tmetric_loss\ttotal\n";
