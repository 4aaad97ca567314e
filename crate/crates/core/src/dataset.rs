//! Synthetic multi-camera identity data under intra-camera supervision.
//!
//! Every person owns a unit-norm latent vector. Each camera applies its own
//! fixed affine map to that latent before additive Gaussian noise, so the
//! same person looks systematically different from camera to camera. Labels
//! are assigned independently per camera: the same person receives unrelated
//! intra-camera labels in different views, and nothing in the training data
//! links them.
//!
//! The hidden person identity (`truth_pid`) is carried for evaluation only.
//! Training code receives a [`TrainingView`], which has no accessor for it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic RNG for a (seed, stream) pair.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Accumulated identity index over all cameras, 1-based.
///
/// Global ID `j = A_c + y` where `A_c` is the number of IDs in cameras before
/// `c` and `y` the intra-camera label.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalId(pub usize);

impl GlobalId {
    /// Zero-based column index.
    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }

    #[inline]
    pub fn from_index(index: usize) -> Self {
        GlobalId(index + 1)
    }
}

impl std::fmt::Display for GlobalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// One observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    pub x: Vec<f64>,
    /// Camera label in `1..=C`.
    pub camera: usize,
    /// Intra-camera identity label in `1..=N_c`.
    pub intra_label: usize,
    /// Hidden person identity. Evaluation only.
    pub truth_pid: usize,
}

/// Camera-wise ID counts and the accumulated index they induce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    ids_per_camera: Vec<usize>,
    offsets: Vec<usize>,
    images_per_camera: Vec<usize>,
}

impl DatasetLayout {
    /// Builds a layout from per-camera ID counts. Image counts default to zero.
    pub fn from_counts(ids_per_camera: Vec<usize>) -> Result<Self> {
        let images = vec![0; ids_per_camera.len()];
        Self::new(ids_per_camera, images)
    }

    pub fn new(ids_per_camera: Vec<usize>, images_per_camera: Vec<usize>) -> Result<Self> {
        if ids_per_camera.is_empty() {
            return Err(Error::Layout("no cameras".into()));
        }
        if let Some(c) = ids_per_camera.iter().position(|&n| n == 0) {
            return Err(Error::Layout(format!("camera {} has zero IDs", c + 1)));
        }
        if images_per_camera.len() != ids_per_camera.len() {
            return Err(Error::Layout("image count length differs from camera count".into()));
        }
        let mut offsets = Vec::with_capacity(ids_per_camera.len());
        let mut acc = 0;
        for &n in &ids_per_camera {
            offsets.push(acc);
            acc += n;
        }
        Ok(Self {
            ids_per_camera,
            offsets,
            images_per_camera,
        })
    }

    /// Number of cameras `C`.
    pub fn num_cameras(&self) -> usize {
        self.ids_per_camera.len()
    }

    /// Total accumulated ID count `N`.
    pub fn num_ids(&self) -> usize {
        self.offsets.last().unwrap() + self.ids_per_camera.last().unwrap()
    }

    /// `N_c` for a 1-based camera.
    pub fn ids_in_camera(&self, camera: usize) -> Result<usize> {
        self.check_camera(camera)?;
        Ok(self.ids_per_camera[camera - 1])
    }

    /// `A_c` for a 1-based camera.
    pub fn offset(&self, camera: usize) -> Result<usize> {
        self.check_camera(camera)?;
        Ok(self.offsets[camera - 1])
    }

    pub fn ids_per_camera(&self) -> &[usize] {
        &self.ids_per_camera
    }

    pub fn images_per_camera(&self) -> &[usize] {
        &self.images_per_camera
    }

    /// Zero-based column range occupied by a camera.
    pub fn columns(&self, camera: usize) -> Result<std::ops::Range<usize>> {
        self.check_camera(camera)?;
        let a = self.offsets[camera - 1];
        Ok(a..a + self.ids_per_camera[camera - 1])
    }

    pub fn global_index(&self, camera: usize, intra_label: usize) -> Result<GlobalId> {
        let n_c = self.ids_in_camera(camera)?;
        if intra_label == 0 || intra_label > n_c {
            return Err(Error::Range {
                what: "intra label",
                value: intra_label,
                lo: 1,
                hi: n_c,
            });
        }
        Ok(GlobalId(self.offsets[camera - 1] + intra_label))
    }

    /// Inverse of [`global_index`](Self::global_index): `(camera, intra_label)`.
    pub fn camera_of(&self, id: GlobalId) -> Result<(usize, usize)> {
        let n = self.num_ids();
        if id.0 == 0 || id.0 > n {
            return Err(Error::Range {
                what: "global id",
                value: id.0,
                lo: 1,
                hi: n,
            });
        }
        // offsets are ascending; last offset strictly below id
        let c = self.offsets.partition_point(|&a| a < id.0);
        Ok((c, id.0 - self.offsets[c - 1]))
    }

    /// Camera of every column, 1-based values indexed by zero-based column.
    pub fn column_cameras(&self) -> Vec<usize> {
        self.ids_per_camera
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c + 1, n))
            .collect()
    }

    fn check_camera(&self, camera: usize) -> Result<()> {
        if camera == 0 || camera > self.num_cameras() {
            return Err(Error::Range {
                what: "camera",
                value: camera,
                lo: 1,
                hi: self.num_cameras(),
            });
        }
        Ok(())
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Training identities.
    pub num_persons: usize,
    /// Held-out identities for retrieval evaluation, disjoint from training.
    pub num_test_persons: usize,
    pub cameras: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub camera_transform_scale: f64,
    pub noise_sigma: f64,
    pub presence_prob: f64,
    pub images_min: usize,
    pub images_max: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_persons: 60,
            num_test_persons: 60,
            cameras: 4,
            input_dim: 32,
            latent_dim: 8,
            camera_transform_scale: 0.2,
            noise_sigma: 0.45,
            presence_prob: 0.8,
            images_min: 2,
            images_max: 4,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    /// Collects every invariant violation.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("generator.num_persons", self.num_persons),
            ("generator.cameras", self.cameras),
            ("generator.input_dim", self.input_dim),
            ("generator.latent_dim", self.latent_dim),
            ("generator.images_min", self.images_min),
        ] {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            v.push("generator.noise_sigma must be finite and >= 0".into());
        }
        if !(self.camera_transform_scale >= 0.0 && self.camera_transform_scale.is_finite()) {
            v.push("generator.camera_transform_scale must be finite and >= 0".into());
        }
        if !(self.presence_prob > 0.0 && self.presence_prob <= 1.0) {
            v.push("generator.presence_prob must lie in (0, 1]".into());
        }
        if self.images_min > self.images_max {
            v.push("generator.images_min must not exceed generator.images_max".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// An immutable, validated set of samples plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    layout: DatasetLayout,
    input_dim: usize,
    global_ids: Vec<GlobalId>,
}

impl Dataset {
    /// Validates samples and derives the layout.
    ///
    /// Rejects non-contiguous intra labels, empty cameras, inconsistent
    /// feature dimensions and intra IDs covering two persons.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Layout("dataset has no samples".into()))?;
        let input_dim = first.x.len();
        if input_dim == 0 {
            return Err(Error::Layout("feature dimension is zero".into()));
        }
        let num_cameras = samples.iter().map(|s| s.camera).max().unwrap();
        let mut labels: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_cameras];
        let mut images = vec![0usize; num_cameras];
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &samples {
            if s.camera == 0 {
                return Err(Error::Layout(format!("sample {}: camera 0", s.sample_id)));
            }
            if s.intra_label == 0 {
                return Err(Error::Layout(format!(
                    "sample {}: intra label 0",
                    s.sample_id
                )));
            }
            if s.x.len() != input_dim {
                return Err(Error::Shape(format!(
                    "sample {} has {} features, expected {input_dim}",
                    s.sample_id,
                    s.x.len()
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {} features", s.sample_id)));
            }
            if let Some(&pid) = owner.get(&(s.camera, s.intra_label)) {
                if pid != s.truth_pid {
                    return Err(Error::Layout(format!(
                        "camera {} label {} covers persons {pid} and {}",
                        s.camera, s.intra_label, s.truth_pid
                    )));
                }
            } else {
                owner.insert((s.camera, s.intra_label), s.truth_pid);
            }
            labels[s.camera - 1].insert(s.intra_label);
            images[s.camera - 1] += 1;
        }
        let mut counts = Vec::with_capacity(num_cameras);
        for (c, set) in labels.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Layout(format!("camera {} has zero IDs", c + 1)));
            }
            let n = set.len();
            if *set.iter().next_back().unwrap() != n {
                let missing = (1..=n).find(|y| !set.contains(y)).unwrap();
                return Err(Error::Layout(format!(
                    "camera {}: intra labels not contiguous (label {missing} missing)",
                    c + 1
                )));
            }
            counts.push(n);
        }
        let layout = DatasetLayout::new(counts, images)?;
        let global_ids = samples
            .iter()
            .map(|s| layout.global_index(s.camera, s.intra_label))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            layout,
            input_dim,
            global_ids,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn layout(&self) -> &DatasetLayout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn global_id(&self, i: usize) -> GlobalId {
        self.global_ids[i]
    }

    /// Label-only view used by all training code.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { dataset: self }
    }

    /// Ground-truth identities, for evaluation.
    pub fn truth(&self) -> GroundTruth {
        let mut per_id = vec![0; self.layout.num_ids()];
        for (s, g) in self.samples.iter().zip(&self.global_ids) {
            per_id[g.index()] = s.truth_pid;
        }
        GroundTruth {
            per_sample: self.samples.iter().map(|s| s.truth_pid).collect(),
            per_id,
        }
    }

    /// Average images per camera per person.
    pub fn icp(&self) -> f64 {
        self.samples.len() as f64 / self.layout.num_ids() as f64
    }

    /// Average images per person.
    pub fn ip(&self) -> f64 {
        let persons: BTreeSet<usize> = self.samples.iter().map(|s| s.truth_pid).collect();
        self.samples.len() as f64 / persons.len() as f64
    }

    /// Writes the tab-separated sample file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("sample_id\tcamera\tintra_label\ttruth_pid");
        for k in 0..self.input_dim {
            let _ = write!(out, "\tx{k}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                s.sample_id, s.camera, s.intra_label, s.truth_pid
            );
            for v in &s.x {
                let _ = write!(out, "\t{v:.8e}");
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = BufReader::new(f).lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(parse_err(1, "empty file".into())),
        };
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 5 || cols[..4] != ["sample_id", "camera", "intra_label", "truth_pid"] {
            return Err(parse_err(1, format!("unexpected header {header:?}")));
        }
        let dim = cols.len() - 4;
        let mut samples = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != dim + 4 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, found {}", dim + 4, fields.len()),
                ));
            }
            let int = |i: usize| {
                fields[i]
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("field {}: {e}", cols[i])))
            };
            let x = fields[4..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| parse_err(lineno, format!("feature {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                sample_id: int(0)?,
                camera: int(1)?,
                intra_label: int(2)?,
                truth_pid: int(3)?,
                x,
            });
        }
        if samples.is_empty() {
            return Err(parse_err(2, "no records".into()));
        }
        Self::from_samples(samples)
    }
}

/// Borrowed view over a dataset without access to hidden identities.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    dataset: &'a Dataset,
}

/// A sample as seen by training code.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub x: &'a [f64],
    pub camera: usize,
    pub intra_label: usize,
    pub global_id: GlobalId,
}

impl TrainSample<'_> {
    pub fn label(&self) -> BatchLabel {
        BatchLabel {
            camera: self.camera,
            intra_label: self.intra_label,
            global_id: self.global_id,
        }
    }
}

/// Supervision attached to one batch row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchLabel {
    pub camera: usize,
    pub intra_label: usize,
    pub global_id: GlobalId,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.dataset.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.samples.is_empty()
    }

    pub fn layout(&self) -> &'a DatasetLayout {
        &self.dataset.layout
    }

    pub fn input_dim(&self) -> usize {
        self.dataset.input_dim
    }

    pub fn get(&self, i: usize) -> TrainSample<'a> {
        let s = &self.dataset.samples[i];
        TrainSample {
            x: &s.x,
            camera: s.camera,
            intra_label: s.intra_label,
            global_id: self.dataset.global_ids[i],
        }
    }

    pub fn global_id(&self, i: usize) -> GlobalId {
        self.dataset.global_ids[i]
    }

    /// Stacks the features of `indices` into a row matrix.
    pub fn features(&self, indices: &[usize]) -> ndarray::Array2<f64> {
        let d = self.dataset.input_dim;
        let mut out = ndarray::Array2::zeros((indices.len(), d));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            row.assign(&ndarray::ArrayView1::from(&self.dataset.samples[i].x[..]));
        }
        out
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<BatchLabel> {
        indices.iter().map(|&i| self.get(i).label()).collect()
    }

    /// Sample indices grouped by global ID, in ID order.
    pub fn indices_by_id(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.dataset.layout.num_ids()];
        for (i, g) in self.dataset.global_ids.iter().enumerate() {
            groups[g.index()].push(i);
        }
        groups
    }
}

/// Hidden identities of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub per_sample: Vec<usize>,
    /// Person behind each global ID, indexed by zero-based column.
    pub per_id: Vec<usize>,
}

/// Training set and disjoint-identity test set drawn from the same cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
}

struct CameraMap {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl CameraMap {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn camera_maps(cfg: &GeneratorConfig) -> Vec<CameraMap> {
    let mut rng = rng_for(cfg.seed, 0);
    let base: Vec<Vec<f64>> = (0..cfg.input_dim)
        .map(|_| gaussian_vec(&mut rng, cfg.latent_dim, 1.0))
        .collect();
    let s = cfg.camera_transform_scale;
    (0..cfg.cameras)
        .map(|_| CameraMap {
            weight: base
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|w| w + s * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
            bias: gaussian_vec(&mut rng, cfg.input_dim, s),
        })
        .collect()
}

fn generate_persons(
    cfg: &GeneratorConfig,
    maps: &[CameraMap],
    num_persons: usize,
    pid_base: usize,
    stream: u64,
) -> Result<Dataset> {
    if num_persons == 0 {
        return Err(Error::config("at least one person is required"));
    }
    let mut rng = rng_for(cfg.seed, stream);
    let latents: Vec<Vec<f64>> = (0..num_persons)
        .map(|_| loop {
            let z = gaussian_vec(&mut rng, cfg.latent_dim, 1.0);
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                break z.into_iter().map(|v| v / n).collect();
            }
        })
        .collect();

    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
        (0..num_persons)
            .map(|_| {
                (0..cfg.cameras)
                    .map(|_| rng.random::<f64>() < cfg.presence_prob)
                    .collect()
            })
            .collect()
    };
    let mut presence = draw(&mut rng);
    for c in 0..cfg.cameras {
        while !presence.iter().any(|p| p[c]) {
            for p in presence.iter_mut() {
                p[c] = rng.random::<f64>() < cfg.presence_prob;
            }
        }
    }
    for p in presence.iter_mut() {
        if !p.iter().any(|&b| b) {
            let c = rng.random_range(0..cfg.cameras);
            p[c] = true;
        }
    }

    let mut pending = Vec::new();
    for (p, cams) in presence.iter().enumerate() {
        for (c, &present) in cams.iter().enumerate() {
            if present {
                let k = rng.random_range(cfg.images_min..=cfg.images_max);
                pending.extend(std::iter::repeat_n((p, c), k));
            }
        }
    }
    pending.shuffle(&mut rng);

    let mut labels: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); cfg.cameras];
    let samples = pending
        .into_iter()
        .enumerate()
        .map(|(sample_id, (p, c))| {
            let next = labels[c].len() + 1;
            let intra_label = *labels[c].entry(p).or_insert(next);
            let mut x = maps[c].apply(&latents[p]);
            for v in x.iter_mut() {
                *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            Sample {
                sample_id,
                x,
                camera: c + 1,
                intra_label,
                truth_pid: pid_base + p,
            }
        })
        .collect();
    Dataset::from_samples(samples)
}

/// Generates the training dataset.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let maps = camera_maps(cfg);
    generate_persons(cfg, &maps, cfg.num_persons, 0, 1)
}

/// Generates the training dataset plus a test dataset of unseen persons
/// observed through the same cameras.
pub fn generate_benchmark(cfg: &GeneratorConfig) -> Result<Benchmark> {
    cfg.validate()?;
    if cfg.num_test_persons == 0 {
        return Err(Error::config("generator.num_test_persons must be positive"));
    }
    let maps = camera_maps(cfg);
    Ok(Benchmark {
        train: generate_persons(cfg, &maps, cfg.num_persons, 0, 1)?,
        test: generate_persons(cfg, &maps, cfg.num_test_persons, cfg.num_persons, 2)?,
    })
}
