//! Small differentiable tasks with exact gradients: Gaussian-blob
//! classification with a one-hidden-layer network, plus the quadratic and
//! Rosenbrock test functions.

use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{GradientVector, Layout, ParameterVector, RngStream};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Row-major feature matrix with integer labels and a train/val/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "feature matrix of {} values does not hold {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
            split: Split::default(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Carves a test split first, then divides the rest into train and
    /// validation. Fully determined by the dataset seed.
    pub fn with_split(mut self, test_fraction: f64, val_fraction: f64) -> Result<Self> {
        for (name, f) in [
            ("test_fraction", test_fraction),
            ("val_fraction", val_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {f}"
                )));
            }
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngStream::new(self.seed, "split").shuffle(&mut order);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let rest = self.len() - n_test;
        let n_val = (rest as f64 * val_fraction).round() as usize;
        let test = order[..n_test].to_vec();
        let val = order[n_test..n_test + n_val].to_vec();
        let train = order[n_test + n_val..].to_vec();
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(
                "split leaves an empty train or validation set",
            ));
        }
        self.split = Split { train, val, test };
        Ok(self)
    }

    /// Copies the given rows into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch { features, labels }
    }

    /// CSV with columns `x0 .. x{d-1}, label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        let dim = header.len().saturating_sub(1);
        if header.get(dim) != Some("label") || dim == 0 {
            return Err(Error::Parse {
                path: path.into(),
                reason: "last column must be `label` after at least one feature".into(),
            });
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let bad = |field: &str| Error::Parse {
                path: path.into(),
                reason: format!("row {}: cannot parse `{field}`", line + 1),
            };
            for field in rec.iter().take(dim) {
                features.push(field.trim().parse::<f64>().map_err(|_| bad(field))?);
            }
            let label = &rec[dim];
            labels.push(label.trim().parse::<usize>().map_err(|_| bad(label))?);
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Dataset::new(features, labels, dim, classes, seed)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `k` unit-variance Gaussian clusters whose means sit `class_separation`
/// apart (orthogonal axes when `k <= d`, random directions otherwise).
/// Row `i` belongs to class `i % k`.
pub fn make_gaussian_blobs(
    seed: u64,
    n: usize,
    d: usize,
    k: usize,
    class_separation: f64,
) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 || !(class_separation > 0.0) {
        return Err(Error::invalid(format!(
            "blobs need n >= k >= 2, d >= 1 and positive separation (n={n}, k={k}, d={d}, sep={class_separation})"
        )));
    }
    let mut rng = RngStream::new(seed, "blobs");
    let radius = class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if k <= d {
                let mut m = vec![0.0; d];
                m[c] = radius;
                m
            } else {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                dir.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &mu in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + z);
        }
        labels.push(c);
    }
    Dataset::new(features, labels, d, k, seed)
}

/// Training-row order for one epoch, chunked into batches. Depends only on
/// `(seed, epoch)`, never on optimizer selection.
pub fn epoch_batches(seed: u64, epoch: u32, train: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    RngStream::new(seed, format!("data.{epoch}")).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// One-hidden-layer rectifier network. Weights live in a single
/// [`ParameterVector`] with groups `w1` (d x h), `b1`, `w2` (h x k), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: ParameterVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

impl MlpModel {
    pub fn layout(inputs: usize, hidden: usize, classes: usize) -> Arc<Layout> {
        Arc::new(Layout::new([
            ("w1", inputs * hidden),
            ("b1", hidden),
            ("w2", hidden * classes),
            ("b2", classes),
        ]))
    }

    pub fn zeros(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            inputs,
            hidden,
            classes,
            params: ParameterVector::zeros(Self::layout(inputs, hidden, classes)),
        }
    }

    /// He-normal first layer, `1/sqrt(h)` second layer, zero biases.
    pub fn init(inputs: usize, hidden: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut model = Self::zeros(inputs, hidden, classes);
        let s1 = (2.0 / inputs as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        for (group, scale) in [("w1", s1), ("w2", s2)] {
            for w in model.params.group_mut(group).expect("layout group") {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
        }
        model
    }

    /// Number of multiply-adds for one forward pass over one row.
    pub fn forward_cost(&self) -> u64 {
        (self.inputs * self.hidden + self.hidden * self.classes) as u64
    }

    fn parts(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let p = &self.params;
        (
            p.group("w1").expect("w1"),
            p.group("b1").expect("b1"),
            p.group("w2").expect("w2"),
            p.group("b2").expect("b2"),
        )
    }

    /// Pre-activations and logits for every row.
    fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.parts();
        let (d, h, k) = (self.inputs, self.hidden, self.classes);
        let mut z1 = vec![0.0; rows * h];
        let mut logits = vec![0.0; rows * k];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let zr = &mut z1[r * h..(r + 1) * h];
            zr.copy_from_slice(b1);
            for (j, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (z, &w) in zr.iter_mut().zip(&w1[j * h..(j + 1) * h]) {
                    *z += xv * w;
                }
            }
            let lr = &mut logits[r * k..(r + 1) * k];
            lr.copy_from_slice(b2);
            for (u, &zv) in zr.iter().enumerate() {
                if zv <= 0.0 {
                    continue;
                }
                for (l, &w) in lr.iter_mut().zip(&w2[u * k..(u + 1) * k]) {
                    *l += zv * w;
                }
            }
        }
        (z1, logits)
    }

    /// Turns logits into probabilities in place; returns summed NLL and
    /// number of argmax hits.
    fn softmax_nll(&self, logits: &mut [f64], labels: &[usize]) -> Result<(f64, usize)> {
        let k = self.classes;
        let mut nll = 0.0;
        let mut hits = 0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut logits[r * k..(r + 1) * k];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation);
            }
            let (argmax, max) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    });
            if argmax == y {
                hits += 1;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            nll -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        Ok((nll, hits))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.features.len() != batch.len() * self.inputs {
            return Err(Error::invalid(
                "batch feature width does not match the model",
            ));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::invalid(format!(
                "label {y} outside 0..{}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let (_, mut logits) = self.forward(&batch.features, rows);
        let (nll, hits) = self.softmax_nll(&mut logits, &batch.labels)?;
        Ok(Evaluation {
            loss: nll / rows as f64,
            accuracy: hits as f64 / rows as f64,
        })
    }

    /// Mean softmax cross-entropy, accuracy, and the exact gradient.
    pub fn forward_backward(&self, batch: &Batch) -> Result<(f64, f64, GradientVector)> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let (d, h, k) = (self.inputs, self.hidden, self.classes);
        let (z1, mut probs) = self.forward(&batch.features, rows);
        let (nll, hits) = self.softmax_nll(&mut probs, &batch.labels)?;

        let (_, _, w2, _) = self.parts();
        let layout = self.params.layout().clone();
        let mut grad = vec![0.0; layout.len()];
        let off = |name: &str| layout.group(name).expect("group").offset;
        let (o_w1, o_b1, o_w2, o_b2) = (off("w1"), off("b1"), off("w2"), off("b2"));
        let inv = 1.0 / rows as f64;
        let mut dz = vec![0.0; h];
        for r in 0..rows {
            let dlogits = &mut probs[r * k..(r + 1) * k];
            dlogits[batch.labels[r]] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v *= inv);
            let zr = &z1[r * h..(r + 1) * h];

            for (c, &dl) in dlogits.iter().enumerate() {
                grad[o_b2 + c] += dl;
            }
            for u in 0..h {
                let a = zr[u].max(0.0);
                let w2_row = &w2[u * k..(u + 1) * k];
                let mut da = 0.0;
                for c in 0..k {
                    grad[o_w2 + u * k + c] += a * dlogits[c];
                    da += w2_row[c] * dlogits[c];
                }
                dz[u] = if zr[u] > 0.0 { da } else { 0.0 };
                grad[o_b1 + u] += dz[u];
            }
            let xr = &batch.features[r * d..(r + 1) * d];
            for (j, &xv) in xr.iter().enumerate() {
                let row = &mut grad[o_w1 + j * h..o_w1 + (j + 1) * h];
                for (g, &dzu) in row.iter_mut().zip(&dz) {
                    *g += xv * dzu;
                }
            }
        }
        let grad = GradientVector::from_values(layout, grad)?;
        Ok((nll * inv, hits as f64 * inv, grad))
    }
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    assert!(x.len() >= 2, "rosenbrock needs dimension >= 2");
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

pub fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
    assert!(x.len() >= 2, "rosenbrock needs dimension >= 2");
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() - 1 {
        let t = x[i + 1] - x[i] * x[i];
        g[i] += -400.0 * x[i] * t - 2.0 * (1.0 - x[i]);
        g[i + 1] += 200.0 * t;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyticKind {
    Quadratic,
    Rosenbrock,
}

/// `0.5 * |x|^2` or the chained Rosenbrock function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticProblem {
    pub kind: AnalyticKind,
    pub dim: usize,
}

impl AnalyticProblem {
    pub fn new(kind: AnalyticKind, dim: usize) -> Result<Self> {
        let min = match kind {
            AnalyticKind::Quadratic => 1,
            AnalyticKind::Rosenbrock => 2,
        };
        if dim < min {
            return Err(Error::invalid(format!("{kind:?} needs dimension >= {min}")));
        }
        Ok(Self { kind, dim })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self.kind {
            AnalyticKind::Quadratic => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            AnalyticKind::Rosenbrock => rosenbrock(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            AnalyticKind::Quadratic => x.to_vec(),
            AnalyticKind::Rosenbrock => rosenbrock_grad(x),
        }
    }
}
