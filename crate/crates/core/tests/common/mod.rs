//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use icsreid::association::PseudoLabeling;
use icsreid::dataset::{BatchLabel, DatasetLayout, GlobalId};
use icsreid::memory::MemoryBank;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Central finite-difference gradient of `loss` at `x`.
pub fn numeric_grad(loss: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let v = x[idx];
        probe[idx] = v + h;
        let up = loss(&probe);
        probe[idx] = v - h;
        let down = loss(&probe);
        probe[idx] = v;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `max |a - n| / max(max |a|, max |n|)`; zero when both vanish.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Random batch over `ids_per_camera` IDs per camera with `k` rows each,
/// together with a random unit memory over those IDs.
pub struct LossInstance {
    pub layout: DatasetLayout,
    pub bank: MemoryBank,
    pub labels: Vec<BatchLabel>,
    pub g: Array2<f64>,
    pub f: Array2<f64>,
}

pub fn loss_instance(seed: u64, ids_per_camera: &[usize], k: usize, hidden: usize, dim: usize, tau: f64) -> LossInstance {
    let mut r = rng(seed);
    let layout = DatasetLayout::from_counts(ids_per_camera.to_vec()).unwrap();
    let bank = MemoryBank::from_columns(unit_rows(&mut r, layout.num_ids(), dim), layout.clone(), 0.5, tau).unwrap();
    let mut labels = Vec::new();
    for (c, &n) in ids_per_camera.iter().enumerate() {
        for y in 1..=n {
            for _ in 0..k {
                labels.push(BatchLabel {
                    camera: c + 1,
                    intra_label: y,
                    global_id: layout.global_index(c + 1, y).unwrap(),
                });
            }
        }
    }
    let rows = labels.len();
    LossInstance {
        g: gaussian(&mut r, rows, hidden),
        f: unit_rows(&mut r, rows, dim),
        layout,
        bank,
        labels,
    }
}

fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    (&a - &b).mapv(|v| v * v).sum().sqrt()
}

/// Smallest gap between a selected extreme and the runner-up, and the
/// smallest |hinge|, over every choice the quintuplet loss makes. A finite
/// difference step well below this value stays on one smooth piece.
pub fn quintuplet_slack(inst: &LossInstance, m1: f64, m2: f64) -> f64 {
    let n = inst.labels.len();
    let mut slack = f64::INFINITY;
    let gap = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        if v.len() < 2 {
            f64::INFINITY
        } else {
            v[1] - v[0]
        }
    };
    for a in 0..n {
        let la = inst.labels[a];
        let pos: Vec<f64> = (0..n)
            .filter(|&p| p != a && inst.labels[p].global_id == la.global_id)
            .map(|p| -dist(inst.g.row(a), inst.g.row(p)))
            .collect();
        let neg: Vec<f64> = (0..n)
            .filter(|&q| inst.labels[q].camera == la.camera && inst.labels[q].global_id != la.global_id)
            .map(|q| dist(inst.g.row(a), inst.g.row(q)))
            .collect();
        let cols = inst.layout.columns(la.camera).unwrap();
        let own = la.global_id.index();
        let cen: Vec<f64> = cols
            .filter(|&k| k != own)
            .map(|k| dist(inst.f.row(a), inst.bank.centroids().row(k)))
            .collect();
        let dp = -pos.iter().cloned().fold(f64::INFINITY, f64::min);
        let dn = neg.iter().cloned().fold(f64::INFINITY, f64::min);
        let dc = cen.iter().cloned().fold(f64::INFINITY, f64::min);
        let d_own = dist(inst.f.row(a), inst.bank.centroids().row(own));
        slack = slack
            .min(gap(pos))
            .min(gap(neg))
            .min(gap(cen))
            .min((m1 + dp.max(0.0) - dn).abs())
            .min((m2 + d_own - dc).abs());
    }
    slack
}

/// Same as [`quintuplet_slack`] for the batch-hard triplet with arbitrary
/// class labels.
pub fn triplet_slack(x: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let mut slack = f64::INFINITY;
    for a in 0..n {
        let mut pos: Vec<f64> = (0..n)
            .filter(|&p| p != a && labels[p] == labels[a])
            .map(|p| dist(x.row(a), x.row(p)))
            .collect();
        let mut neg: Vec<f64> = (0..n)
            .filter(|&q| labels[q] != labels[a])
            .map(|q| dist(x.row(a), x.row(q)))
            .collect();
        pos.sort_by(|a, b| b.total_cmp(a));
        neg.sort_by(f64::total_cmp);
        if pos.len() > 1 {
            slack = slack.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            slack = slack.min(neg[1] - neg[0]);
        }
        slack = slack.min((margin + pos[0] - neg[0]).abs());
    }
    slack
}

/// Edge predicate evaluated literally from its four conjuncts.
pub fn brute_force_edge(centroids: &Array2<f64>, cams: &[usize], t: f64, i: usize, j: usize) -> bool {
    let d = |a: usize, b: usize| dist(centroids.row(a), centroids.row(b));
    let nearest_in = |from: usize, cam: usize| -> usize {
        let mut best = None;
        for k in 0..cams.len() {
            if cams[k] == cam {
                match best {
                    None => best = Some(k),
                    Some(b) if d(from, k) < d(from, b) => best = Some(k),
                    _ => {}
                }
            }
        }
        best.unwrap()
    };
    d(i, j) < t && cams[i] != cams[j] && nearest_in(j, cams[i]) == i && nearest_in(i, cams[j]) == j
}

/// Same-class relation from BFS reachability over `edges`.
pub fn bfs_classes(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut queue = std::collections::VecDeque::from([s]);
            seen[s] = true;
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
            seen
        })
        .collect()
}

pub fn labeling_matches_bfs(labels: &PseudoLabeling, reach: &[Vec<bool>]) -> bool {
    let n = reach.len();
    for i in 0..n {
        for j in 0..n {
            let same = labels.label_of(GlobalId::from_index(i)) == labels.label_of(GlobalId::from_index(j));
            if same != reach[i][j] {
                return false;
            }
        }
    }
    // lowest-member-first numbering
    let mut next = 0;
    for i in 0..n {
        let l = labels.label_of(GlobalId::from_index(i));
        if l == next {
            next += 1;
        } else if l > next {
            return false;
        }
    }
    next == labels.num_classes()
}

/// Average precision and CMC straight from their definitions.
pub fn brute_force_cmc_map(relevance: &[Vec<bool>], ranks: &[usize]) -> (Vec<f64>, f64) {
    let q = relevance.len() as f64;
    let cmc = ranks
        .iter()
        .map(|&r| {
            relevance
                .iter()
                .filter(|rel| rel.iter().take(r).any(|&x| x))
                .count() as f64
                / q
        })
        .collect();
    let map = relevance
        .iter()
        .map(|rel| {
            let positions: Vec<usize> = (0..rel.len()).filter(|&k| rel[k]).collect();
            positions
                .iter()
                .map(|&k| rel[..=k].iter().filter(|&&x| x).count() as f64 / (k + 1) as f64)
                .sum::<f64>()
                / positions.len() as f64
        })
        .sum::<f64>()
        / q;
    (cmc, map)
}

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Draws instances until one is at least `min_slack` away from every kink.
pub fn smooth_instance(seed: u64, m1: f64, m2: f64, min_slack: f64) -> LossInstance {
    for attempt in 0.. {
        let inst = loss_instance(seed * 1000 + attempt, &[3, 4], 2, 5, 4, 0.5);
        if quintuplet_slack(&inst, m1, m2) > min_slack {
            return inst;
        }
    }
    unreachable!()
}

/// Worst relative error of the intra-camera ID loss over `n` instances,
/// for both classifier scopes.
pub fn intra_id_max_error(n: u64) -> f64 {
    use icsreid::memory::{intra_id_loss, ClassifierScope};
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = loss_instance(seed, &[3, 2, 4], 2, 3, 5, 0.2);
        for scope in [ClassifierScope::CameraSpecific, ClassifierScope::CameraAgnostic] {
            let (_, g) = intra_id_loss(&inst.bank, &inst.f, &inst.labels, scope).unwrap();
            let num = numeric_grad(
                |f| intra_id_loss(&inst.bank, f, &inst.labels, scope).unwrap().0,
                &inst.f,
                FD_STEP,
            );
            worst = worst.max(max_relative_error(&g, &num));
        }
    }
    worst
}

/// Worst relative errors of the quintuplet instance term (on `g`) and
/// centroid term (on `f`) over `n` kink-free instances.
pub fn quintuplet_max_errors(n: u64) -> (f64, f64) {
    use icsreid::losses::{quintuplet_loss, QuintupletConfig};
    let cfg = QuintupletConfig { m1: 0.3, m2: 0.3 };
    let (mut wi, mut wc): (f64, f64) = (0.0, 0.0);
    for seed in 0..n {
        let inst = smooth_instance(seed, cfg.m1, cfg.m2, 1e-3);
        let out = quintuplet_loss(&inst.g, &inst.f, &inst.labels, &inst.bank, &cfg).unwrap();
        let ng = numeric_grad(
            |g| quintuplet_loss(g, &inst.f, &inst.labels, &inst.bank, &cfg).unwrap().loss,
            &inst.g,
            FD_STEP,
        );
        let nf = numeric_grad(
            |f| quintuplet_loss(&inst.g, f, &inst.labels, &inst.bank, &cfg).unwrap().loss,
            &inst.f,
            FD_STEP,
        );
        wi = wi.max(max_relative_error(&out.grad_g, &ng));
        wc = wc.max(max_relative_error(&out.grad_f, &nf));
    }
    (wi, wc)
}

pub fn triplet_max_error(n: u64) -> f64 {
    use icsreid::losses::batch_hard_triplet;
    let labels = [0, 0, 1, 1, 2, 2, 2];
    let mut worst: f64 = 0.0;
    let mut seed = 0;
    let mut done = 0;
    while done < n {
        let x = gaussian(&mut rng(seed), labels.len(), 4).mapv(|v| 0.3 * v);
        seed += 1;
        if triplet_slack(&x, &labels, 0.3) < 1e-3 {
            continue;
        }
        let (_, g) = batch_hard_triplet(&x, &labels, 0.3).unwrap();
        let num = numeric_grad(|x| batch_hard_triplet(x, &labels, 0.3).unwrap().0, &x, FD_STEP);
        worst = worst.max(max_relative_error(&g, &num));
        done += 1;
    }
    worst
}

/// Label-smoothed cross entropy through a linear head, checked for both
/// the embedding and the head weights.
pub fn smoothed_ce_max_error(n: u64) -> f64 {
    use icsreid::losses::label_smoothed_ce_batch;
    let labels = [0, 2, 1, 3, 2];
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(seed);
        let f = unit_rows(&mut r, labels.len(), 4);
        let w = gaussian(&mut r, 4, 4);
        let (_, d_logits) = label_smoothed_ce_batch(&f.dot(&w), &labels, 0.1).unwrap();
        let gf = d_logits.dot(&w.t());
        let gw = f.t().dot(&d_logits);
        let nf = numeric_grad(|f| label_smoothed_ce_batch(&f.dot(&w), &labels, 0.1).unwrap().0, &f, FD_STEP);
        let nw = numeric_grad(|w| label_smoothed_ce_batch(&f.dot(w), &labels, 0.1).unwrap().0, &w, FD_STEP);
        worst = worst.max(max_relative_error(&gf, &nf)).max(max_relative_error(&gw, &nw));
    }
    worst
}
