//! External memory of per-ID centroids and the non-parametric classifier
//! built on it.
//!
//! Column `j` stores a unit-norm centroid for global ID `j`. After each
//! training step every processed sample pulls its ID's column towards its
//! embedding with an exponential moving average, followed by
//! renormalization:
//!
//! ```text
//! K[j] <- normalize(mu * K[j] + (1 - mu) * f(x))
//! ```
//!
//! Classification is a temperature-scaled softmax over centroid similarities
//! whose denominator only runs over the IDs of the sample's own camera.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::dataset::{BatchLabel, DatasetLayout, GlobalId, TrainingView};
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;

/// Default update rate.
pub const DEFAULT_MU: f64 = 0.5;
/// Default softmax temperature (1/15).
pub const DEFAULT_TAU: f64 = 0.067;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Which centroids enter the softmax denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierScope {
    /// Only IDs from the sample's camera.
    CameraSpecific,
    /// All accumulated IDs.
    CameraAgnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    /// Row `j` holds the centroid of zero-based column `j`.
    columns: Array2<f64>,
    layout: DatasetLayout,
    mu: f64,
    tau: f64,
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
    n
}

fn softmax_scaled(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

impl MemoryBank {
    /// Wraps explicit centroids (one row per global ID). Rows are
    /// normalized; a zero row is rejected.
    pub fn from_columns(
        mut columns: Array2<f64>,
        layout: DatasetLayout,
        mu: f64,
        tau: f64,
    ) -> Result<Self> {
        if columns.nrows() != layout.num_ids() {
            return Err(Error::Shape(format!(
                "{} centroids for {} IDs",
                columns.nrows(),
                layout.num_ids()
            )));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::config(format!("mu = {mu} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("tau = {tau} must be positive")));
        }
        for (j, mut row) in columns.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::NonFinite(format!("centroid {} has norm {n}", j + 1)));
            }
            row /= n;
        }
        Ok(Self {
            columns,
            layout,
            mu,
            tau,
        })
    }

    /// Column `j` is the normalized mean embedding of all samples of ID `j`.
    pub fn init(
        view: &TrainingView<'_>,
        model: &EmbeddingModel,
        mu: f64,
        tau: f64,
    ) -> Result<Self> {
        let layout = view.layout().clone();
        let all: Vec<usize> = (0..view.len()).collect();
        let f = model.embed(view.features(&all).view())?;
        let mut sums = Array2::<f64>::zeros((layout.num_ids(), model.embed_dim()));
        let mut counts = vec![0usize; layout.num_ids()];
        for (i, row) in f.rows().into_iter().enumerate() {
            let j = view.global_id(i).index();
            let mut s = sums.row_mut(j);
            s += &row;
            counts[j] += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Layout(format!("ID {} has no samples", j + 1)));
        }
        Self::from_columns(sums, layout, mu, tau)
    }

    pub fn layout(&self) -> &DatasetLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    pub fn num_ids(&self) -> usize {
        self.columns.nrows()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// All centroids, one row per global ID.
    pub fn centroids(&self) -> &Array2<f64> {
        &self.columns
    }

    pub fn column(&self, j: GlobalId) -> Result<ArrayView1<'_, f64>> {
        self.check_id(j)?;
        Ok(self.columns.row(j.index()))
    }

    fn check_id(&self, j: GlobalId) -> Result<()> {
        if j.0 == 0 || j.0 > self.num_ids() {
            return Err(Error::Range {
                what: "global id",
                value: j.0,
                lo: 1,
                hi: self.num_ids(),
            });
        }
        Ok(())
    }

    /// Moving-average update of one column, then renormalization.
    ///
    /// If the average cancels exactly (antipodal inputs with `mu = 0.5`)
    /// the column takes the new feature.
    pub fn update(&mut self, j: GlobalId, f_x: ArrayView1<'_, f64>) -> Result<()> {
        self.check_id(j)?;
        if f_x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for bank of dimension {}",
                f_x.len(),
                self.dim()
            )));
        }
        let n = f_x.dot(&f_x).sqrt();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::Contract(format!(
                "memory update needs a unit feature, got norm {n}"
            )));
        }
        let mut col = self.columns.row(j.index()).to_owned();
        col *= self.mu;
        col.scaled_add(1.0 - self.mu, &f_x);
        if normalize(&mut col) < 1e-12 {
            col.assign(&f_x);
            normalize(&mut col);
        }
        self.columns.row_mut(j.index()).assign(&col);
        Ok(())
    }

    /// Probabilities over the IDs of `camera`, in intra-label order.
    pub fn classify(&self, f_x: ArrayView1<'_, f64>, camera: usize) -> Result<Vec<f64>> {
        let cols = self.layout.columns(camera)?;
        self.softmax_over(f_x, cols)
    }

    /// Probabilities over all accumulated IDs.
    pub fn classify_all(&self, f_x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        self.softmax_over(f_x, 0..self.num_ids())
    }

    fn softmax_over(&self, f_x: ArrayView1<'_, f64>, cols: std::ops::Range<usize>) -> Result<Vec<f64>> {
        if f_x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for bank of dimension {}",
                f_x.len(),
                self.dim()
            )));
        }
        let mut p: Vec<f64> = cols
            .map(|k| self.columns.row(k).dot(&f_x) / self.tau)
            .collect();
        softmax_scaled(&mut p);
        Ok(p)
    }

    /// Writes the snapshot read by the associator.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("icsreid-bank v1\n");
        let _ = writeln!(out, "dims\t{}\t{}", self.dim(), self.num_ids());
        let _ = writeln!(out, "mu\t{:e}\ttau\t{:e}", self.mu, self.tau);
        out.push_str("counts");
        for n in self.layout.ids_per_camera() {
            let _ = write!(out, "\t{n}");
        }
        out.push('\n');
        for row in self.columns.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&"icsreid-bank v1") {
            return Err(err(1, "not an icsreid-bank v1 snapshot".into()));
        }
        let fields = |i: usize, key: &str, n: usize| -> Result<Vec<&str>> {
            let l = lines
                .get(i)
                .ok_or_else(|| err(i + 1, format!("missing {key} line")))?;
            let f: Vec<&str> = l.split('\t').collect();
            if f[0] != key || (n > 0 && f.len() != n) {
                return Err(err(i + 1, format!("malformed {key} line")));
            }
            Ok(f)
        };
        let uint = |line: usize, s: &str| {
            s.parse::<usize>()
                .map_err(|e| err(line, format!("{s:?}: {e}")))
        };
        let real = |line: usize, s: &str| {
            s.parse::<f64>()
                .map_err(|e| err(line, format!("{s:?}: {e}")))
        };
        let dims = fields(1, "dims", 3)?;
        let (d, n) = (uint(2, dims[1])?, uint(2, dims[2])?);
        let rates = fields(2, "mu", 4)?;
        let mu = real(3, rates[1])?;
        let tau = real(3, rates[3])?;
        let counts = fields(3, "counts", 0)?[1..]
            .iter()
            .map(|s| uint(4, s))
            .collect::<Result<Vec<_>>>()?;
        let layout = DatasetLayout::from_counts(counts)?;
        if layout.num_ids() != n {
            return Err(Error::Layout(format!(
                "{}: counts sum to {} but header says {n} IDs",
                path.display(),
                layout.num_ids()
            )));
        }
        let body = &lines[4..];
        if body.len() != n {
            return Err(err(5, format!("expected {n} centroid lines, found {}", body.len())));
        }
        let mut values = Vec::with_capacity(n * d);
        for (k, l) in body.iter().enumerate() {
            let row = l
                .split('\t')
                .map(|s| real(k + 5, s))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d {
                return Err(err(k + 5, format!("expected {d} values, found {}", row.len())));
            }
            values.extend(row);
        }
        let columns = Array2::from_shape_vec((n, d), values).unwrap();
        // stored columns are already unit norm; keep their exact bits
        if let Some(j) = columns
            .rows()
            .into_iter()
            .position(|r| (r.dot(&r).sqrt() - 1.0).abs() > 1e-9)
        {
            return Err(Error::Contract(format!(
                "{}: centroid {} is not unit norm",
                path.display(),
                j + 1
            )));
        }
        let mut bank = Self::from_columns(Array2::ones((n, d)), layout, mu, tau)?;
        bank.columns = columns;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_snapshot()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(&text, path)
    }
}

/// Negative log-likelihood of the non-parametric classifier, averaged per
/// camera within the batch and summed over cameras.
///
/// Returns the loss and its gradient with respect to the embedding rows of
/// `f`. Centroids are constants.
pub fn intra_id_loss(
    bank: &MemoryBank,
    f: &Array2<f64>,
    labels: &[BatchLabel],
    scope: ClassifierScope,
) -> Result<(f64, Array2<f64>)> {
    if f.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            f.nrows(),
            labels.len()
        )));
    }
    let layout = bank.layout();
    let mut per_camera = vec![0usize; layout.num_cameras()];
    for l in labels {
        let j = layout.global_index(l.camera, l.intra_label)?;
        if j != l.global_id {
            return Err(Error::Contract(format!(
                "label (camera {}, intra {}) maps to ID {j}, batch says {}",
                l.camera, l.intra_label, l.global_id
            )));
        }
        per_camera[l.camera - 1] += 1;
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(f.raw_dim());
    for (i, l) in labels.iter().enumerate() {
        let w = 1.0 / per_camera[l.camera - 1] as f64;
        let fi = f.row(i);
        let (cols, target) = match scope {
            ClassifierScope::CameraSpecific => {
                let cols = layout.columns(l.camera)?;
                (cols, l.intra_label - 1)
            }
            ClassifierScope::CameraAgnostic => (0..bank.num_ids(), l.global_id.index()),
        };
        let start = cols.start;
        let p = bank.softmax_over(fi, cols)?;
        loss -= w * p[target].max(f64::MIN_POSITIVE).ln();
        // d(-log p_y)/df = (sum_k p_k K_k - K_y) / tau
        let mut g = grad.row_mut(i);
        for (k, pk) in p.iter().enumerate() {
            let coef = if k == target { pk - 1.0 } else { *pk };
            g.scaled_add(w * coef / bank.tau, &bank.columns.row(start + k));
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank(rows: Array2<f64>, counts: Vec<usize>, mu: f64, tau: f64) -> MemoryBank {
        MemoryBank::from_columns(rows, DatasetLayout::from_counts(counts).unwrap(), mu, tau).unwrap()
    }

    #[test]
    fn update_hand_value() {
        let mut b = bank(array![[1.0, 0.0], [0.0, 1.0]], vec![2], 0.5, 1.0);
        b.update(GlobalId(1), array![0.0, 1.0].view()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = b.column(GlobalId(1)).unwrap();
        assert!((c[0] - h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
        assert_eq!(b.column(GlobalId(2)).unwrap(), array![0.0, 1.0]);
    }

    #[test]
    fn degenerate_rates() {
        let mut keep = bank(array![[1.0, 0.0]], vec![1], 1.0, 1.0);
        keep.update(GlobalId(1), array![0.0, 1.0].view()).unwrap();
        assert_eq!(keep.column(GlobalId(1)).unwrap(), array![1.0, 0.0]);

        let mut replace = bank(array![[1.0, 0.0]], vec![1], 0.0, 1.0);
        replace.update(GlobalId(1), array![0.0, 1.0].view()).unwrap();
        assert_eq!(replace.column(GlobalId(1)).unwrap(), array![0.0, 1.0]);

        let mut cancel = bank(array![[1.0, 0.0]], vec![1], 0.5, 1.0);
        cancel.update(GlobalId(1), array![-1.0, 0.0].view()).unwrap();
        assert_eq!(cancel.column(GlobalId(1)).unwrap(), array![-1.0, 0.0]);
    }

    #[test]
    fn update_contract() {
        let mut b = bank(array![[1.0, 0.0]], vec![1], 0.5, 1.0);
        assert!(matches!(
            b.update(GlobalId(1), array![0.0, 1.1].view()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            b.update(GlobalId(2), array![0.0, 1.0].view()),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn classify_hand_value() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![2, 1], 0.5, 1.0);
        let p = b.classify(array![1.0, 0.0].view(), 1).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert_eq!(b.classify(array![1.0, 0.0].view(), 2).unwrap(), vec![1.0]);
        assert!(b.classify(array![1.0, 0.0].view(), 3).is_err());
    }

    #[test]
    fn identical_columns_give_uniform() {
        let b = bank(Array2::from_elem((4, 3), 1.0), vec![4], 0.5, DEFAULT_TAU);
        let p = b.classify(array![0.0, 0.6, 0.8].view(), 1).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn no_overflow_at_small_temperature() {
        let b = bank(array![[1.0, 0.0], [-1.0, 0.0]], vec![2], 0.5, 1e-4);
        let p = b.classify(array![1.0, 0.0].view(), 1).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
    }

    fn labels_for(layout: &DatasetLayout, pairs: &[(usize, usize)]) -> Vec<BatchLabel> {
        pairs
            .iter()
            .map(|&(camera, intra_label)| BatchLabel {
                camera,
                intra_label,
                global_id: layout.global_index(camera, intra_label).unwrap(),
            })
            .collect()
    }

    #[test]
    fn uniform_loss_is_log_count() {
        let b = bank(Array2::from_elem((5, 2), 1.0), vec![3, 2], 0.5, 0.1);
        let labels = labels_for(b.layout(), &[(1, 2), (1, 1), (2, 2)]);
        let f = array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let (loss, _) = intra_id_loss(&b, &f, &labels, ClassifierScope::CameraSpecific).unwrap();
        assert!((loss - (3f64.ln() + 2f64.ln())).abs() < 1e-12);
        let (loss, _) = intra_id_loss(&b, &f, &labels, ClassifierScope::CameraAgnostic).unwrap();
        assert!((loss - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_classifier_has_small_loss() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], vec![2], 0.5, 0.01);
        let labels = labels_for(b.layout(), &[(1, 1), (1, 2)]);
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, _) = intra_id_loss(&b, &f, &labels, ClassifierScope::CameraSpecific).unwrap();
        assert!(loss < 1e-30, "{loss}");
    }

    #[test]
    fn bad_labels_rejected() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], vec![2], 0.5, 0.1);
        let f = array![[1.0, 0.0]];
        let bad = vec![BatchLabel {
            camera: 1,
            intra_label: 3,
            global_id: GlobalId(3),
        }];
        assert!(intra_id_loss(&b, &f, &bad, ClassifierScope::CameraSpecific).is_err());
        let mismatched = vec![BatchLabel {
            camera: 1,
            intra_label: 1,
            global_id: GlobalId(2),
        }];
        assert!(intra_id_loss(&b, &f, &mismatched, ClassifierScope::CameraSpecific).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let b = bank(array![[1.0, 2.0], [0.3, -0.4], [0.0, 5.0]], vec![2, 1], 0.5, DEFAULT_TAU);
        let p = Path::new("x");
        let back = MemoryBank::from_snapshot(&b.to_snapshot(), p).unwrap();
        assert_eq!(back, b);
        let truncated: String = b.to_snapshot().lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(MemoryBank::from_snapshot(&truncated, p).is_err());
    }
}
