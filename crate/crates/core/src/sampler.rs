//! Identity-balanced mini-batches: `P` classes times `K` instances.
//!
//! Each epoch permutes the classes and cuts the permutation into groups of
//! `P`, so every class appears at least once per epoch. The final short group
//! is topped up with other randomly chosen classes. Classes with fewer than
//! `K` samples contribute all of them and are filled up with replacement.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::association::PseudoLabeling;
use crate::dataset::{rng_for, TrainingView};
use crate::error::{Error, Result};

/// How intra-stage batches treat cameras.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMixing {
    /// Classes from any camera share a batch.
    Mixed,
    /// Every batch draws its classes from one camera.
    #[default]
    SingleCamera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PkConfig {
    /// Classes per batch.
    pub p: usize,
    /// Instances per class.
    pub k: usize,
    pub seed: u64,
    pub camera_mixing: CameraMixing,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self {
            p: 16,
            k: 4,
            seed: 13,
            camera_mixing: CameraMixing::SingleCamera,
        }
    }
}

impl PkConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.p < 2 {
            v.push(format!("sampler.p = {} must be at least 2", self.p));
        }
        if self.k < 2 {
            v.push(format!("sampler.k = {} must be at least 2", self.k));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Sample indices into the training view.
    pub indices: Vec<usize>,
    /// Class of each row.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PkSampler {
    classes: Vec<Vec<usize>>,
    /// Camera per class, used by single-camera batching.
    class_camera: Vec<usize>,
    cfg: PkConfig,
}

impl PkSampler {
    /// `classes[c]` lists the sample indices of class `c`.
    pub fn new(classes: Vec<Vec<usize>>, class_camera: Vec<usize>, cfg: PkConfig) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        if let Some(c) = classes.iter().position(|c| c.is_empty()) {
            return Err(Error::config(format!("class {c} has no samples")));
        }
        if classes.len() < cfg.p {
            return Err(Error::config(format!(
                "only {} classes available for P = {}; use sampler.p <= {}",
                classes.len(),
                cfg.p,
                classes.len()
            )));
        }
        if class_camera.len() != classes.len() {
            return Err(Error::Shape("camera tag per class required".into()));
        }
        if cfg.camera_mixing == CameraMixing::SingleCamera {
            let max_cam = class_camera.iter().copied().max().unwrap_or(0);
            for cam in 1..=max_cam {
                let n = class_camera.iter().filter(|&&c| c == cam).count();
                if n > 0 && n < cfg.p {
                    return Err(Error::config(format!(
                        "camera {cam} has {n} classes, fewer than P = {}; use sampler.p <= {n} \
                         or mixed batches",
                        cfg.p
                    )));
                }
            }
        }
        Ok(Self {
            classes,
            class_camera,
            cfg,
        })
    }

    /// Classes are global IDs.
    pub fn intra(view: &TrainingView<'_>, cfg: PkConfig) -> Result<Self> {
        let classes = view.indices_by_id();
        let cams = view.layout().column_cameras();
        Self::new(classes, cams, cfg)
    }

    /// Classes are pseudo labels. Pseudo classes span cameras, so batches
    /// are always mixed.
    pub fn inter(view: &TrainingView<'_>, labels: &PseudoLabeling, cfg: PkConfig) -> Result<Self> {
        let mut classes = vec![Vec::new(); labels.num_classes()];
        for i in 0..view.len() {
            classes[labels.label_of(view.global_id(i))].push(i);
        }
        let n = classes.len();
        Self::new(
            classes,
            vec![0; n],
            PkConfig {
                camera_mixing: CameraMixing::Mixed,
                ..cfg
            },
        )
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn config(&self) -> &PkConfig {
        &self.cfg
    }

    /// All batches of a zero-based epoch. Deterministic in (seed, epoch).
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = rng_for(self.cfg.seed, 1_000 + epoch as u64);
        let groups = match self.cfg.camera_mixing {
            CameraMixing::Mixed => {
                let all: Vec<usize> = (0..self.classes.len()).collect();
                self.groups(all, &mut rng)
            }
            CameraMixing::SingleCamera => {
                let mut cams: Vec<usize> = self.class_camera.clone();
                cams.sort_unstable();
                cams.dedup();
                let mut groups = Vec::new();
                for cam in cams {
                    let members: Vec<usize> = (0..self.classes.len())
                        .filter(|&c| self.class_camera[c] == cam)
                        .collect();
                    groups.extend(self.groups(members, &mut rng));
                }
                groups.shuffle(&mut rng);
                groups
            }
        };
        groups
            .into_iter()
            .map(|g| self.fill(&g, &mut rng))
            .collect()
    }

    fn groups(&self, mut pool: Vec<usize>, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let p = self.cfg.p;
        let universe = pool.clone();
        pool.shuffle(rng);
        let mut out: Vec<Vec<usize>> = pool.chunks(p).map(|c| c.to_vec()).collect();
        if let Some(last) = out.last_mut() {
            if last.len() < p {
                let extra: Vec<usize> = universe
                    .iter()
                    .copied()
                    .filter(|c| !last.contains(c))
                    .collect();
                let need = p - last.len();
                last.extend(extra.choose_multiple(rng, need).copied());
            }
        }
        out
    }

    fn fill(&self, group: &[usize], rng: &mut impl Rng) -> Batch {
        let k = self.cfg.k;
        let mut indices = Vec::with_capacity(group.len() * k);
        let mut classes = Vec::with_capacity(group.len() * k);
        for &c in group {
            let members = &self.classes[c];
            if members.len() >= k {
                indices.extend(members.choose_multiple(rng, k).copied());
            } else {
                indices.extend_from_slice(members);
                for _ in members.len()..k {
                    indices.push(*members.choose(rng).unwrap());
                }
            }
            classes.extend(std::iter::repeat_n(c, k));
        }
        Batch { indices, classes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn classes(sizes: &[usize]) -> Vec<Vec<usize>> {
        let mut next = 0;
        sizes
            .iter()
            .map(|&n| {
                let c: Vec<usize> = (next..next + n).collect();
                next += n;
                c
            })
            .collect()
    }

    fn cfg(p: usize, k: usize) -> PkConfig {
        PkConfig {
            p,
            k,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_class_repeats() {
        let s = PkSampler::new(classes(&[1, 5]), vec![1, 1], cfg(2, 4)).unwrap();
        let b = &s.epoch(0)[0];
        let rows: Vec<usize> = b
            .indices
            .iter()
            .zip(&b.classes)
            .filter(|(_, &c)| c == 0)
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(rows, vec![0, 0, 0, 0]);
    }

    #[test]
    fn default_batch_is_64() {
        let sizes = vec![3; 40];
        let s = PkSampler::new(classes(&sizes), vec![1; 40], PkConfig::default()).unwrap();
        for b in s.epoch(0) {
            assert_eq!(b.indices.len(), 64);
            assert_eq!(b.classes.iter().collect::<BTreeSet<_>>().len(), 16);
        }
    }

    #[test]
    fn epoch_covers_every_class() {
        let sizes: Vec<usize> = (0..23).map(|i| 1 + i % 5).collect();
        let s = PkSampler::new(classes(&sizes), vec![1; 23], cfg(4, 3)).unwrap();
        for e in 0..5 {
            let batches = s.epoch(e);
            assert_eq!(batches.len(), 6);
            let seen: BTreeSet<usize> = batches.iter().flat_map(|b| b.classes.clone()).collect();
            assert_eq!(seen.len(), 23);
        }
        assert_eq!(s.epoch(3), s.epoch(3));
        assert_ne!(s.epoch(3), s.epoch(4));
    }

    #[test]
    fn too_few_classes_suggests_smaller_p() {
        let err = PkSampler::new(classes(&[2, 2, 2]), vec![1; 3], cfg(4, 2)).unwrap_err();
        assert!(err.to_string().contains("sampler.p <= 3"), "{err}");
        assert!(PkSampler::new(classes(&[2, 2]), vec![1; 2], cfg(1, 2)).is_err());
        assert!(PkSampler::new(classes(&[2, 2]), vec![1; 2], cfg(2, 1)).is_err());
    }

    #[test]
    fn single_camera_batches() {
        let cams: Vec<usize> = (0..12).map(|c| 1 + c % 3).collect();
        let s = PkSampler::new(
            classes(&[2; 12]),
            cams.clone(),
            PkConfig {
                p: 3,
                k: 2,
                camera_mixing: CameraMixing::SingleCamera,
                ..Default::default()
            },
        )
        .unwrap();
        for b in s.epoch(1) {
            let batch_cams: BTreeSet<usize> = b.classes.iter().map(|&c| cams[c]).collect();
            assert_eq!(batch_cams.len(), 1);
        }
    }
}
