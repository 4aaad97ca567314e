//! Cross-camera ID association over memory centroids.
//!
//! Two IDs `i`, `j` are linked when all of the following hold:
//!
//! * `dist(i, j) < T`, with `T` the `S`-th smallest cross-camera centroid distance;
//! * they come from different cameras;
//! * `i` is the nearest centroid to `j` among the IDs of `cam(i)`;
//! * `j` is the nearest centroid to `i` among the IDs of `cam(j)`.
//!
//! Connected components of the resulting graph become pseudo classes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetLayout, GlobalId};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;

/// Threshold picked from sorted cross-camera distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub requested_s: usize,
    pub used_s: usize,
    /// `S` exceeded the number of pairs and was clamped.
    pub clamped: bool,
}

/// `T` = `S`-th smallest distance (1-based). Oversized `S` is clamped to the
/// pair count with a warning.
pub fn select_threshold(distances: &[f64], s: usize) -> Result<Threshold> {
    if s == 0 {
        return Err(Error::config("association.s must be at least 1"));
    }
    if distances.is_empty() {
        return Err(Error::Layout("no cross-camera ID pairs".into()));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let used = s.min(sorted.len());
    if used < s {
        log::warn!(
            "S = {s} exceeds the {} cross-camera pairs; clamped to {used}",
            sorted.len()
        );
    }
    Ok(Threshold {
        value: sorted[used - 1],
        requested_s: s,
        used_s: used,
        clamped: used < s,
    })
}

/// Euclidean distances between all centroid rows.
pub fn distance_matrix(centroids: &Array2<f64>) -> Array2<f64> {
    let n = centroids.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = centroids.row(i);
            (0..n)
                .map(|j| {
                    let b = centroids.row(j);
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    Array2::from_shape_vec((n, n), rows.concat()).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationGraph {
    cameras: Vec<usize>,
    dist: Array2<f64>,
    /// Zero-based column pairs `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl AssociationGraph {
    pub fn from_bank(bank: &MemoryBank, threshold: f64) -> Self {
        Self::new(bank.centroids(), bank.layout(), threshold)
    }

    pub fn new(centroids: &Array2<f64>, layout: &DatasetLayout, threshold: f64) -> Self {
        let cameras = layout.column_cameras();
        let dist = distance_matrix(centroids);
        let n = cameras.len();
        // nearest[i][c - 1] = nearest column to i within camera c
        let nearest: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (1..=layout.num_cameras())
                    .map(|c| {
                        let cols = layout.columns(c).unwrap();
                        let mut best = cols.start;
                        for k in cols {
                            if dist[[i, k]] < dist[[i, best]] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect();
        let mut edges = Vec::new();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                let (ci, cj) = (cameras[i], cameras[j]);
                if ci != cj
                    && dist[[i, j]] < threshold
                    && nearest[j][ci - 1] == i
                    && nearest[i][cj - 1] == j
                {
                    edges.push((i, j));
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        Self {
            cameras,
            dist,
            edges,
            adjacency,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.cameras.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].contains(&j)
    }

    /// Camera of a zero-based vertex.
    pub fn camera(&self, i: usize) -> usize {
        self.cameras[i]
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.dist
    }

    /// Distances of all unordered cross-camera pairs.
    pub fn cross_camera_distances(&self) -> Vec<f64> {
        cross_camera_pairs(&self.cameras)
            .map(|(i, j)| self.dist[[i, j]])
            .collect()
    }
}

fn cross_camera_pairs(cameras: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let n = cameras.len();
    (0..n).flat_map(move |i| {
        (i + 1..n)
            .filter(move |&j| cameras[i] != cameras[j])
            .map(move |j| (i, j))
    })
}

/// Cross-camera pair distances of a bank, for threshold selection.
pub fn cross_camera_distances(bank: &MemoryBank) -> Vec<f64> {
    let cameras = bank.layout().column_cameras();
    let dist = distance_matrix(bank.centroids());
    cross_camera_pairs(&cameras)
        .map(|(i, j)| dist[[i, j]])
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Map from global ID to pseudo class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    /// Zero-based class per zero-based column.
    labels: Vec<usize>,
    num_classes: usize,
}

impl PseudoLabeling {
    /// Relabels arbitrary group keys so that classes are numbered in order
    /// of their lowest member.
    pub fn from_keys<K: Eq + std::hash::Hash + Copy>(keys: &[K]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = keys
            .iter()
            .map(|k| {
                let next = map.len();
                *map.entry(*k).or_insert(next)
            })
            .collect();
        Self {
            labels,
            num_classes: map.len(),
        }
    }

    pub fn num_ids(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label_of(&self, id: GlobalId) -> usize {
        self.labels[id.index()]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of same-camera ID pairs that ended up in one class.
    pub fn same_camera_conflicts(&self, layout: &DatasetLayout) -> usize {
        let cams = layout.column_cameras();
        let n = self.labels.len();
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                if cams[i] == cams[j] && self.labels[i] == self.labels[j] {
                    count += 1;
                }
            }
        }
        count
    }

    /// Tab-separated `global_id`, `pseudo_label` (both 1-based).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("global_id\tpseudo_label\n");
        for (j, l) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", j + 1, l + 1);
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some("global_id\tpseudo_label") {
            return Err(err(1, "expected header global_id<TAB>pseudo_label".into()));
        }
        let mut labels = Vec::new();
        for (k, l) in lines.enumerate() {
            let ln = k + 2;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 2 {
                return Err(err(ln, "expected 2 fields".into()));
            }
            let id: usize = f[0].parse().map_err(|e| err(ln, format!("{e}")))?;
            let lab: usize = f[1].parse().map_err(|e| err(ln, format!("{e}")))?;
            if id != labels.len() + 1 || lab == 0 {
                return Err(err(ln, format!("unexpected record {id}\t{lab}")));
            }
            labels.push(lab - 1);
        }
        if labels.is_empty() {
            return Err(err(2, "no records".into()));
        }
        let num_classes = labels.iter().max().unwrap() + 1;
        let mut used = vec![false; num_classes];
        for &l in &labels {
            used[l] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(err(0, "pseudo labels are not contiguous".into()));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Components of the graph, numbered by lowest member.
pub fn connected_components(graph: &AssociationGraph) -> PseudoLabeling {
    let n = graph.num_vertices();
    let mut uf = UnionFind::new(n);
    for &(i, j) in graph.edges() {
        uf.union(i, j);
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    PseudoLabeling::from_keys(&roots)
}

/// Result of associating one bank snapshot.
#[derive(Clone, Debug)]
pub struct Association {
    pub threshold: Threshold,
    pub graph: AssociationGraph,
    pub labeling: PseudoLabeling,
}

/// Threshold selection, graph construction and component labeling.
/// `s = None` uses the accumulated ID count.
pub fn associate(bank: &MemoryBank, s: Option<usize>) -> Result<Association> {
    let s = s.unwrap_or(bank.num_ids());
    let layout = bank.layout();
    if layout.num_cameras() < 2 {
        let graph = AssociationGraph::from_bank(bank, f64::NEG_INFINITY);
        let labeling = connected_components(&graph);
        return Ok(Association {
            threshold: Threshold {
                value: f64::NEG_INFINITY,
                requested_s: s,
                used_s: 0,
                clamped: true,
            },
            graph,
            labeling,
        });
    }
    let probe = AssociationGraph::from_bank(bank, f64::NEG_INFINITY);
    let threshold = select_threshold(&probe.cross_camera_distances(), s)?;
    let graph = AssociationGraph::from_bank(bank, threshold.value);
    let labeling = connected_components(&graph);
    Ok(Association {
        threshold,
        graph,
        labeling,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationQuality {
    pub precision: f64,
    pub recall: f64,
    pub associated_pairs: usize,
    pub correct_pairs: usize,
    pub true_pairs: usize,
    /// No pair was associated; precision is reported as 1.
    pub zero_pairs: bool,
}

/// Pairwise precision and recall over cross-camera ID pairs.
///
/// `truth` is the person behind each zero-based column.
pub fn association_quality(
    labeling: &PseudoLabeling,
    layout: &DatasetLayout,
    truth: Option<&[usize]>,
) -> Result<AssociationQuality> {
    let truth = truth.ok_or_else(|| Error::MissingTruth("association quality".into()))?;
    if truth.len() != labeling.num_ids() || layout.num_ids() != labeling.num_ids() {
        return Err(Error::MissingTruth(format!(
            "{} truth entries for {} IDs",
            truth.len(),
            labeling.num_ids()
        )));
    }
    let cams = layout.column_cameras();
    let (mut associated, mut correct, mut positive) = (0, 0, 0);
    for (i, j) in cross_camera_pairs(&cams) {
        let same_class = labeling.labels[i] == labeling.labels[j];
        let same_person = truth[i] == truth[j];
        associated += same_class as usize;
        positive += same_person as usize;
        correct += (same_class && same_person) as usize;
    }
    Ok(AssociationQuality {
        precision: if associated == 0 {
            1.0
        } else {
            correct as f64 / associated as f64
        },
        recall: if positive == 0 {
            1.0
        } else {
            correct as f64 / positive as f64
        },
        associated_pairs: associated,
        correct_pairs: correct,
        true_pairs: positive,
        zero_pairs: associated == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn threshold_is_strict() {
        let t = select_threshold(&[0.3, 0.1, 0.2], 2).unwrap();
        assert_eq!(t.value, 0.2);
        assert_eq!([0.1, 0.2, 0.3].iter().filter(|&&d| d < t.value).count(), 1);
        let t1 = select_threshold(&[0.3, 0.1, 0.2], 1).unwrap();
        assert_eq!([0.1, 0.2, 0.3].iter().filter(|&&d| d < t1.value).count(), 0);
        let big = select_threshold(&[0.3, 0.1, 0.2], 10).unwrap();
        assert!(big.clamped);
        assert_eq!(big.value, 0.3);
        assert!(select_threshold(&[0.1], 0).is_err());
    }

    #[test]
    fn near_duplicate_pairs_form_two_edges() {
        // camera 1: IDs 0,1; camera 2: IDs 2,3 with 2 ~ 0 and 3 ~ 1.
        let layout = DatasetLayout::from_counts(vec![2, 2]).unwrap();
        let c = array![[1.0, 0.0], [0.0, 1.0], [0.99, 0.141], [0.141, 0.99]];
        let g = AssociationGraph::new(&c, &layout, 1.0);
        assert_eq!(g.edges(), &[(0, 2), (1, 3)]);
    }

    #[test]
    fn mutuality_required() {
        // 2 is nearest to 0 in camera 2, but 2's nearest in camera 1 is 1.
        let layout = DatasetLayout::from_counts(vec![2, 1]).unwrap();
        let c = array![[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.5, 0.866, 0.0]];
        let g = AssociationGraph::new(&c, &layout, 10.0);
        assert!(!g.has_edge(0, 2));
        assert!(g.has_edge(1, 2));
    }

    #[test]
    fn single_camera_has_no_edges() {
        let layout = DatasetLayout::from_counts(vec![3]).unwrap();
        let c = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let g = AssociationGraph::new(&c, &layout, 10.0);
        assert!(g.edges().is_empty());
        let l = connected_components(&g);
        assert_eq!(l.labels(), &[0, 1, 2]);
    }

    #[test]
    fn chain_and_disjoint_components() {
        let layout = DatasetLayout::from_counts(vec![2, 2, 2]).unwrap();
        let mut g = AssociationGraph::new(&Array2::eye(6), &layout, f64::NEG_INFINITY);
        let set = |g: &mut AssociationGraph, edges: Vec<(usize, usize)>| {
            g.adjacency = vec![Vec::new(); 6];
            for &(i, j) in &edges {
                g.adjacency[i].push(j);
                g.adjacency[j].push(i);
            }
            g.edges = edges;
        };
        set(&mut g, vec![(0, 2), (2, 4)]);
        assert_eq!(connected_components(&g).labels(), &[0, 1, 0, 2, 0, 3]);
        set(&mut g, vec![(1, 2), (3, 5)]);
        let l = connected_components(&g);
        assert_eq!(l.labels(), &[0, 1, 1, 2, 3, 2]);
        assert_eq!(l.num_classes(), 4);
    }

    #[test]
    fn quality_counting() {
        // cameras: 0,1 | 2,3 | 4,5. Truth persons chosen to give 4 true pairs.
        let layout = DatasetLayout::from_counts(vec![2, 2, 2]).unwrap();
        let truth = [10, 11, 10, 12, 10, 11];
        // true cross pairs: (0,2),(0,4),(2,4),(1,5) = 4
        // associate {0,2,3} and {1,5}: pairs (0,2) ok, (0,3) bad, (2,3) same cam, (1,5) ok -> 3 assoc, 2 correct
        let l = PseudoLabeling::from_keys(&[0, 1, 0, 0, 2, 1]);
        let q = association_quality(&l, &layout, Some(&truth)).unwrap();
        assert_eq!((q.associated_pairs, q.correct_pairs, q.true_pairs), (3, 2, 4));
        assert!((q.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.recall - 0.5).abs() < 1e-15);
        assert_eq!(l.same_camera_conflicts(&layout), 1);

        let perfect = PseudoLabeling::from_keys(&truth);
        let q = association_quality(&perfect, &layout, Some(&truth)).unwrap();
        assert_eq!((q.precision, q.recall), (1.0, 1.0));

        let none = PseudoLabeling::from_keys(&[0, 1, 2, 3, 4, 5]);
        let q = association_quality(&none, &layout, Some(&truth)).unwrap();
        assert!(q.zero_pairs);
        assert_eq!((q.precision, q.recall), (1.0, 0.0));

        assert!(matches!(
            association_quality(&none, &layout, None),
            Err(Error::MissingTruth(_))
        ));
        assert!(association_quality(&none, &layout, Some(&truth[..3])).is_err());
    }

    #[test]
    fn labeling_file_round_trip() {
        let l = PseudoLabeling::from_keys(&[5, 5, 2, 9, 2]);
        let back = PseudoLabeling::from_tsv(&l.to_tsv(), Path::new("p")).unwrap();
        assert_eq!(back, l);
        assert!(PseudoLabeling::from_tsv("global_id\tpseudo_label\n1\t2\n", Path::new("p")).is_err());
    }
}
