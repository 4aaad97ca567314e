//! Cross-camera retrieval: query/gallery split, ranking, CMC and mAP.
//!
//! A gallery entry that shares both person and camera with the query is
//! removed from that query's ranking. Queries left without a cross-camera
//! positive are dropped and counted.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::association::AssociationQuality;
use crate::dataset::{rng_for, Dataset};
use crate::error::{Error, Result};
use crate::losses::EpochLoss;
use crate::model::EmbeddingModel;

/// Ranks at which the CMC curve is reported.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Identity and camera of one evaluation sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tag {
    pub pid: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalProtocol {
    /// Sample indices of the queries.
    pub queries: Vec<usize>,
    /// Sample indices of the gallery.
    pub gallery: Vec<usize>,
    pub tags: Vec<Tag>,
}

impl RetrievalProtocol {
    /// One randomly chosen sample of every (person, camera) appearance goes
    /// to the query pool, the rest to the gallery.
    pub fn split(data: &Dataset, seed: u64) -> Self {
        let mut rng = rng_for(seed, 400);
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let tags: Vec<Tag> = data
            .samples()
            .iter()
            .map(|s| Tag {
                pid: s.truth_pid,
                camera: s.camera,
            })
            .collect();
        for (i, t) in tags.iter().enumerate() {
            groups.entry((t.pid, t.camera)).or_default().push(i);
        }
        let mut queries = Vec::new();
        let mut gallery = Vec::new();
        for members in groups.values() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            queries.push(m[0]);
            gallery.extend_from_slice(&m[1..]);
        }
        queries.sort_unstable();
        gallery.sort_unstable();
        Self {
            queries,
            gallery,
            tags,
        }
    }
}

/// Ranked gallery of one query after exclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRanking {
    pub query: usize,
    /// Positions into the gallery list, nearest first.
    pub order: Vec<usize>,
    /// Relevance of each ranked entry.
    pub relevant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rankings {
    pub queries: Vec<QueryRanking>,
    /// Queries without any cross-camera positive.
    pub dropped: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks every gallery row for every query row by Euclidean distance, ties
/// broken by gallery position.
pub fn rank_embeddings(
    query_f: &Array2<f64>,
    query_tags: &[Tag],
    gallery_f: &Array2<f64>,
    gallery_tags: &[Tag],
) -> Result<Rankings> {
    if query_f.nrows() != query_tags.len() || gallery_f.nrows() != gallery_tags.len() {
        return Err(Error::Shape("one tag per embedding row required".into()));
    }
    if query_f.ncols() != gallery_f.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query_f.ncols(),
            gallery_f.ncols()
        )));
    }
    let ranked: Vec<Option<QueryRanking>> = (0..query_f.nrows())
        .into_par_iter()
        .map(|q| {
            let qt = query_tags[q];
            let mut cand: Vec<(f64, usize)> = gallery_tags
                .iter()
                .enumerate()
                .filter(|(_, t)| !(t.pid == qt.pid && t.camera == qt.camera))
                .map(|(g, _)| (sq_dist(query_f.row(q), gallery_f.row(g)), g))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let relevant: Vec<bool> = cand.iter().map(|&(_, g)| gallery_tags[g].pid == qt.pid).collect();
            relevant.iter().any(|&r| r).then(|| QueryRanking {
                query: q,
                order: cand.into_iter().map(|(_, g)| g).collect(),
                relevant,
            })
        })
        .collect();
    let dropped = ranked.iter().filter(|r| r.is_none()).count();
    Ok(Rankings {
        queries: ranked.into_iter().flatten().collect(),
        dropped,
    })
}

/// Embeds the split with `model` and ranks the gallery for every query.
pub fn rank(model: &EmbeddingModel, data: &Dataset, protocol: &RetrievalProtocol) -> Result<Rankings> {
    let (qf, qt) = embed_subset(model, data, protocol, &protocol.queries)?;
    let (gf, gt) = embed_subset(model, data, protocol, &protocol.gallery)?;
    rank_embeddings(&qf, &qt, &gf, &gt)
}

fn embed_subset(
    model: &EmbeddingModel,
    data: &Dataset,
    protocol: &RetrievalProtocol,
    idx: &[usize],
) -> Result<(Array2<f64>, Vec<Tag>)> {
    let x = data.training_view().features(idx);
    let f = model.embed(x.view())?;
    Ok((f, idx.iter().map(|&i| protocol.tags[i]).collect()))
}

/// CMC at `ranks` and mAP over relevance lists, each holding at least one
/// relevant entry.
pub fn cmc_map(relevance: &[Vec<bool>], ranks: &[usize]) -> (Vec<f64>, f64) {
    if relevance.is_empty() {
        return (vec![0.0; ranks.len()], 0.0);
    }
    let n = relevance.len() as f64;
    let mut cmc = vec![0.0; ranks.len()];
    let mut ap_sum = 0.0;
    for rel in relevance {
        let first = rel.iter().position(|&r| r).unwrap_or(usize::MAX);
        for (c, &r) in cmc.iter_mut().zip(ranks) {
            if first < r {
                *c += 1.0;
            }
        }
        let (mut hits, mut ap) = (0usize, 0.0);
        for (k, _) in rel.iter().enumerate().filter(|(_, &r)| r) {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
        if hits > 0 {
            ap_sum += ap / hits as f64;
        }
    }
    (cmc.into_iter().map(|c| c / n).collect(), ap_sum / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// CMC at ranks 1, 5 and 10.
    pub cmc: Vec<f64>,
    pub queries: usize,
    pub dropped_queries: usize,
}

impl RetrievalMetrics {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

pub fn retrieval_metrics(rankings: &Rankings) -> RetrievalMetrics {
    let rel: Vec<Vec<bool>> = rankings.queries.iter().map(|q| q.relevant.clone()).collect();
    let (cmc, map) = cmc_map(&rel, &CMC_RANKS);
    RetrievalMetrics {
        map,
        cmc,
        queries: rankings.queries.len(),
        dropped_queries: rankings.dropped,
    }
}

/// Cross-camera retrieval metrics of `model` on `data`.
pub fn evaluate(model: &EmbeddingModel, data: &Dataset, seed: u64) -> Result<RetrievalMetrics> {
    let protocol = RetrievalProtocol::split(data, seed);
    Ok(retrieval_metrics(&rank(model, data, &protocol)?))
}

/// Rank-1 accuracy when each query searches only its own camera, the
/// setting the per-camera labels supervise directly.
pub fn intra_camera_rank1(model: &EmbeddingModel, data: &Dataset, seed: u64) -> Result<f64> {
    let protocol = RetrievalProtocol::split(data, seed);
    let f = model.embed(data.training_view().features(&(0..data.len()).collect::<Vec<_>>()).view())?;
    let (mut hits, mut total) = (0usize, 0usize);
    for &q in &protocol.queries {
        let qt = protocol.tags[q];
        let best = protocol
            .gallery
            .iter()
            .filter(|&&g| protocol.tags[g].camera == qt.camera)
            .map(|&g| (sq_dist(f.row(q), f.row(g)), g))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let has_positive = protocol
            .gallery
            .iter()
            .any(|&g| protocol.tags[g] == qt);
        if let (Some((_, g)), true) = (best, has_positive) {
            total += 1;
            hits += (protocol.tags[g].pid == qt.pid) as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Per-stage loss curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTraces {
    pub intra: Vec<EpochLoss>,
    pub inter: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub retrieval: RetrievalMetrics,
    pub intra_camera_rank1: f64,
    pub association: Option<AssociationQuality>,
    pub losses: StageTraces,
}

impl MetricsReport {
    pub fn map(&self) -> f64 {
        self.retrieval.map
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ap_examples() {
        let (cmc, map) = cmc_map(&[vec![true, false, true]], &[1, 5]);
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(cmc, vec![1.0, 1.0]);
        let (cmc, map) = cmc_map(&[vec![false, false, false, false, true]], &[1, 5]);
        assert_eq!(cmc, vec![0.0, 1.0]);
        assert!((map - 0.2).abs() < 1e-12);
        let (cmc, map) = cmc_map(&[vec![true], vec![true, false]], &[1]);
        assert_eq!((cmc, map), (vec![1.0], 1.0));
    }

    fn tag(pid: usize, camera: usize) -> Tag {
        Tag { pid, camera }
    }

    #[test]
    fn copy_ranks_first_and_ties_by_index() {
        let q = array![[1.0, 0.0]];
        let g = array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let r = rank_embeddings(&q, &[tag(1, 1)], &g, &[tag(2, 1), tag(3, 2), tag(1, 2)]).unwrap();
        assert_eq!(r.queries[0].order, vec![2, 0, 1]);
    }

    #[test]
    fn same_camera_duplicate_is_excluded() {
        let q = array![[1.0, 0.0]];
        let g = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let r = rank_embeddings(&q, &[tag(1, 1)], &g, &[tag(1, 1), tag(2, 2), tag(1, 3)]).unwrap();
        assert_eq!(r.queries[0].order, vec![2, 1]);
        assert_eq!(r.queries[0].relevant, vec![true, false]);
        let lonely = rank_embeddings(&q, &[tag(1, 1)], &g, &[tag(1, 1), tag(2, 2), tag(3, 3)]).unwrap();
        assert_eq!(lonely.dropped, 1);
        assert!(lonely.queries.is_empty());
    }
}
