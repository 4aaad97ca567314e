//! Association graph and components against literal brute-force oracles.

mod common;

use common::*;
use icsreid::association::{associate, connected_components, select_threshold, AssociationGraph};
use icsreid::dataset::{DatasetLayout, GlobalId};
use icsreid::memory::MemoryBank;
use proptest::prelude::*;
use rand::Rng;

fn random_layout(r: &mut impl Rng, max_ids: usize) -> DatasetLayout {
    let cams = r.random_range(1..=5);
    let counts: Vec<usize> = (0..cams).map(|_| r.random_range(1..=max_ids / cams)).collect();
    DatasetLayout::from_counts(counts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn graph_matches_brute_force(seed in 0u64..10_000, dim in 2usize..6, frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let layout = random_layout(&mut r, 200);
        let cents = unit_rows(&mut r, layout.num_ids(), dim);
        let cams = layout.column_cameras();
        let t = frac * 2.0;
        let g = AssociationGraph::new(&cents, &layout, t);
        let n = layout.num_ids();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    prop_assert_eq!(g.has_edge(i, j), brute_force_edge(&cents, &cams, t, i, j));
                    prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                }
            }
            for c in 1..=layout.num_cameras() {
                let deg = g.neighbors(i).iter().filter(|&&k| cams[k] == c).count();
                prop_assert!(deg <= 1);
                if c == cams[i] {
                    prop_assert_eq!(deg, 0);
                }
            }
        }
        let labels = connected_components(&g);
        prop_assert!(labeling_matches_bfs(&labels, &bfs_classes(n, g.edges())));
    }

    #[test]
    fn larger_s_never_removes_edges(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let layout = random_layout(&mut r, 60);
        let cents = unit_rows(&mut r, layout.num_ids(), 3);
        let bank = MemoryBank::from_columns(cents, layout.clone(), 0.5, 0.067).unwrap();
        prop_assume!(layout.num_cameras() >= 2);
        let small = associate(&bank, Some(3)).unwrap();
        let large = associate(&bank, Some(30)).unwrap();
        for &(i, j) in small.graph.edges() {
            prop_assert!(large.graph.has_edge(i, j));
        }
    }
}

#[test]
fn threshold_ties() {
    let t = select_threshold(&[0.1, 0.2, 0.3], 2).unwrap();
    assert_eq!(t.value, 0.2);
    let equal = [0.5; 6];
    let t = select_threshold(&equal, 3).unwrap();
    assert_eq!(equal.iter().filter(|&&d| d < t.value).count(), 0);
}

#[test]
fn all_equal_distances_give_no_edges() {
    // a regular simplex: every pair at the same distance
    let layout = DatasetLayout::from_counts(vec![1, 1, 1]).unwrap();
    let cents = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let bank = MemoryBank::from_columns(cents, layout, 0.5, 0.067).unwrap();
    let a = associate(&bank, None).unwrap();
    assert!(a.graph.edges().is_empty());
    assert_eq!(a.labeling.num_classes(), 3);
}

#[test]
fn chain_through_three_cameras_is_one_class() {
    let layout = DatasetLayout::from_counts(vec![1, 1, 1]).unwrap();
    let cents = ndarray::array![[1.0, 0.0], [0.8, 0.6], [0.28, 0.96]];
    let g = AssociationGraph::new(&cents, &layout, 1.0);
    assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    let labels = connected_components(&g);
    assert_eq!(labels.num_classes(), 1);
    assert_eq!(labels.label_of(GlobalId(3)), 0);
}
