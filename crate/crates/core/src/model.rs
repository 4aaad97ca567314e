//! Two-head embedding model with hand-written gradients.
//!
//! ```text
//! x ──W1,b1── tanh ──W2,b2── tanh ──► g   (hidden feature, not normalized)
//!                                     │
//!                                     └──W3,b3──► u ──► f = u / ‖u‖
//! ```
//!
//! `g` feeds the instance terms of the metric losses, `f` (unit norm) feeds
//! the classifiers, the memory bank and retrieval.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::rng_for;
use crate::error::{Error, Result};

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 32,
            init_seed: 11,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub(crate) w1: Array2<f64>,
    pub(crate) b1: Array1<f64>,
    pub(crate) w2: Array2<f64>,
    pub(crate) b2: Array1<f64>,
    pub(crate) w3: Array2<f64>,
    pub(crate) b3: Array1<f64>,
    stamp: u64,
}

impl PartialEq for EmbeddingModel {
    fn eq(&self, other: &Self) -> bool {
        self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
            && self.w3 == other.w3
            && self.b3 == other.b3
    }
}

/// Intermediates retained by [`EmbeddingModel::forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    stamp: u64,
    x: Array2<f64>,
    a1: Array2<f64>,
    g: Array2<f64>,
    u_norm: Array1<f64>,
    f: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Hidden features, one row per input.
    pub g: Array2<f64>,
    /// Unit-norm embeddings, one row per input.
    pub f: Array2<f64>,
    pub tape: Tape,
}

/// Parameter gradients, same shapes as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

impl EmbeddingModel {
    /// Random init with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(input_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        if input_dim == 0 || cfg.hidden_dim == 0 || cfg.embed_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let (h, d) = (cfg.hidden_dim, cfg.embed_dim);
        let mut rng = rng_for(cfg.init_seed, 100);
        Ok(Self {
            w1: gaussian(h, input_dim, (1.0 / input_dim as f64).sqrt(), &mut rng),
            b1: Array1::zeros(h),
            w2: gaussian(h, h, (1.0 / h as f64).sqrt(), &mut rng),
            b2: Array1::zeros(h),
            w3: gaussian(d, h, (1.0 / h as f64).sqrt(), &mut rng),
            b3: Array1::zeros(d),
            stamp: next_stamp(),
        })
    }

    /// All-zero weights with the given embedding bias.
    pub fn constant(input_dim: usize, hidden_dim: usize, bias: Array1<f64>) -> Self {
        let d = bias.len();
        Self {
            w1: Array2::zeros((hidden_dim, input_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((hidden_dim, hidden_dim)),
            b2: Array1::zeros(hidden_dim),
            w3: Array2::zeros((d, hidden_dim)),
            b3: bias,
            stamp: next_stamp(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w3.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Batched forward pass; rows of `x` are inputs.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        let a1 = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let g = (a1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        let u = g.dot(&self.w3.t()) + &self.b3;
        let u_norm = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if u_norm.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::NonFinite("embedding norm is zero or non-finite".into()));
        }
        let f = &u / &u_norm.view().insert_axis(Axis(1));
        Ok(Forward {
            g: g.clone(),
            f: f.clone(),
            tape: Tape {
                stamp: self.stamp,
                x: x.to_owned(),
                a1,
                g,
                u_norm,
                f,
            },
        })
    }

    /// Unit-norm embeddings only.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.f)
    }

    /// Chain rule through both heads. `d_g` and `d_f` are upstream gradients
    /// with respect to the forward outputs.
    pub fn backward(&self, tape: &Tape, d_g: &Array2<f64>, d_f: &Array2<f64>) -> Result<Gradients> {
        if tape.stamp != self.stamp {
            return Err(Error::Usage(
                "tape was recorded against different parameters".into(),
            ));
        }
        if d_g.dim() != tape.g.dim() || d_f.dim() != tape.f.dim() {
            return Err(Error::Shape(format!(
                "upstream gradients {:?}/{:?} do not match outputs {:?}/{:?}",
                d_g.dim(),
                d_f.dim(),
                tape.g.dim(),
                tape.f.dim()
            )));
        }
        // d u = (I - f f^T) d f / |u|
        let proj = (d_f * &tape.f).sum_axis(Axis(1));
        let mut d_u = d_f - &(&tape.f * &proj.view().insert_axis(Axis(1)));
        d_u /= &tape.u_norm.view().insert_axis(Axis(1));

        let w3 = d_u.t().dot(&tape.g);
        let b3 = d_u.sum_axis(Axis(0));
        let mut d_z2 = d_g + &d_u.dot(&self.w3);
        Zip::from(&mut d_z2).and(&tape.g).for_each(|d, &g| *d *= 1.0 - g * g);

        let w2 = d_z2.t().dot(&tape.a1);
        let b2 = d_z2.sum_axis(Axis(0));
        let mut d_z1 = d_z2.dot(&self.w2);
        Zip::from(&mut d_z1).and(&tape.a1).for_each(|d, &a| *d *= 1.0 - a * a);

        let w1 = d_z1.t().dot(&tape.x);
        let b1 = d_z1.sum_axis(Axis(0));
        Ok(Gradients { w1, b1, w2, b2, w3, b3 })
    }

    /// Mutable parameter slices in the same order as [`Gradients::slices`].
    /// Invalidates outstanding tapes.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.stamp = next_stamp();
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.raw_dim()),
        }
    }

    fn tensors(&self) -> [(&'static str, ArrayView2<'_, f64>); 6] {
        [
            ("w1", self.w1.view()),
            ("b1", self.b1.view().insert_axis(Axis(0))),
            ("w2", self.w2.view()),
            ("b2", self.b2.view().insert_axis(Axis(0))),
            ("w3", self.w3.view()),
            ("b3", self.b3.view().insert_axis(Axis(0))),
        ]
    }

    /// Decimal-text checkpoint. Values use the shortest representation that
    /// parses back to the identical `f64`.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("icsreid-model v1\n");
        let _ = writeln!(
            out,
            "dims\t{}\t{}\t{}",
            self.input_dim(),
            self.hidden_dim(),
            self.embed_dim()
        );
        for (name, t) in self.tensors() {
            let _ = writeln!(out, "{name}\t{}\t{}", t.nrows(), t.ncols());
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&line.join("\t"));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "icsreid-model v1")) => {}
            _ => return Err(err(1, "not an icsreid-model v1 checkpoint".into())),
        }
        let (ln, dims) = lines.next().ok_or_else(|| err(2, "missing dims".into()))?;
        let dims: Vec<&str> = dims.split('\t').collect();
        if dims.len() != 4 || dims[0] != "dims" {
            return Err(err(ln, "malformed dims line".into()));
        }
        let parse_usize = |ln: usize, s: &str| {
            s.parse::<usize>()
                .map_err(|e| err(ln, format!("{s:?}: {e}")))
        };
        let (din, h, d) = (
            parse_usize(ln, dims[1])?,
            parse_usize(ln, dims[2])?,
            parse_usize(ln, dims[3])?,
        );
        let expected = [
            ("w1", h, din),
            ("b1", 1, h),
            ("w2", h, h),
            ("b2", 1, h),
            ("w3", d, h),
            ("b3", 1, d),
        ];
        let mut tensors = Vec::new();
        for (name, rows, cols) in expected {
            let (ln, header) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing tensor {name}")))?;
            let hdr: Vec<&str> = header.split('\t').collect();
            if hdr.len() != 3 || hdr[0] != name {
                return Err(err(ln, format!("expected header for {name}")));
            }
            let (r, c) = (parse_usize(ln, hdr[1])?, parse_usize(ln, hdr[2])?);
            if (r, c) != (rows, cols) {
                return Err(Error::Shape(format!(
                    "{}: tensor {name} is {r}x{c}, expected {rows}x{cols}",
                    path.display()
                )));
            }
            let mut values = Vec::with_capacity(r * c);
            for _ in 0..r {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| err(0, format!("tensor {name} truncated")))?;
                let before = values.len();
                for v in row.split('\t') {
                    values.push(
                        v.parse::<f64>()
                            .map_err(|e| err(ln, format!("{v:?}: {e}")))?,
                    );
                }
                if values.len() - before != c {
                    return Err(err(ln, format!("tensor {name}: expected {c} values")));
                }
            }
            tensors.push(Array2::from_shape_vec((r, c), values).unwrap());
        }
        let row = |t: Array2<f64>| t.row(0).to_owned();
        let mut it = tensors.into_iter();
        let w1 = it.next().unwrap();
        let b1 = row(it.next().unwrap());
        let w2 = it.next().unwrap();
        let b2 = row(it.next().unwrap());
        let w3 = it.next().unwrap();
        let b3 = row(it.next().unwrap());
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            stamp: next_stamp(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text, path)
    }
}

/// Adam hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            lr: cfg.lr,
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. On a non-finite gradient nothing is modified.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter slots but {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "slot {slot}: {} parameters, {} gradients",
                    p.len(),
                    g.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient slot {slot} index {i} = {} at step {}",
                    g[i],
                    self.step + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::Shape("gradient shapes changed between steps".into()));
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, p) in params.iter_mut().enumerate() {
            let g = grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Step decay: multiply by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    /// Reference drop points for a 120-epoch budget.
    pub const REFERENCE_MILESTONES: [usize; 2] = [40, 70];

    /// Milestones scaled from `reference_epochs` to `epochs`.
    pub fn scaled(base_lr: f64, epochs: usize, reference_epochs: usize) -> Self {
        let milestones = Self::REFERENCE_MILESTONES
            .iter()
            .map(|&m| ((m * epochs) as f64 / reference_epochs as f64).round() as usize)
            .filter(|&m| m > 0)
            .collect();
        Self {
            base_lr,
            milestones,
            gamma: 0.1,
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(drops as i32)
    }
}
