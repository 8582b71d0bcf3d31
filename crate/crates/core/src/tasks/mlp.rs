//! Toy two-layer classifier with LoRA adapters on both layers.
//!
//! `logits = W₂ tanh(W₁x + b₁) + b₂` with `Wₗ = W_base,ₗ + UₗVₗᵀ`, trained on
//! Gaussian blobs with mean softmax cross-entropy. Backpropagation is written
//! out by hand so each layer's gradient arrives as `(X, S)` factors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::optimizer::{GradFactor, LoraAdapter, ScaleConvention};
use crate::rng::{gaussian_matrix, named_rng, StreamRng};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Random frozen base, `U = 0`, Gaussian `V`.
    #[default]
    Lora,
    /// Adapter set to the rank-r SVD of the random base; base set to zero.
    Svd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpTaskSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub samples: usize,
    pub test_samples: usize,
    /// Requested adapter rank; clamped to each layer's smaller dimension.
    pub rank: usize,
    pub separation: f64,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for MlpTaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: 32,
            classes: 3,
            samples: 384,
            test_samples: 192,
            rank: 8,
            separation: 1.0,
            init: InitMode::Lora,
            seed: 0,
        }
    }
}

impl MlpTaskSpec {
    /// `(d_out, d_in)` of each layer.
    pub fn layer_shapes(&self) -> [(usize, usize); 2] {
        [(self.hidden, self.input_dim), (self.classes, self.hidden)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes < 2 {
            return invalid("input_dim and hidden must be positive and classes at least 2");
        }
        if self.input_dim.max(self.hidden).max(self.classes) > 128 {
            return invalid("toy MLP widths are capped at 128");
        }
        if self.samples == 0 || self.test_samples == 0 || self.rank == 0 {
            return invalid("samples, test_samples and rank must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpData<T: Scalar> {
    pub x_train: DMatrix<T>,
    pub y_train: Vec<usize>,
    pub x_test: DMatrix<T>,
    pub y_test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Scalar> {
    pub layers: Vec<LoraAdapter<T>>,
    pub biases: Vec<DVector<T>>,
}

/// Loss and per-layer gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T: Scalar> {
    pub loss: T,
    pub factors: Vec<GradFactor<T>>,
    pub bias_grads: Vec<DVector<T>>,
}

fn blobs<T: Scalar>(centers: &DMatrix<T>, n: usize, rng: &mut StreamRng) -> (DMatrix<T>, Vec<usize>) {
    let k = centers.nrows();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let noise: DMatrix<T> = gaussian_matrix(rng, n, centers.ncols(), 1.0);
    let x = DMatrix::from_fn(n, centers.ncols(), |i, j| centers[(labels[i], j)] + noise[(i, j)]);
    (x, labels)
}

/// Deterministic data and initial model for `spec`.
pub fn gen_mlp_task<T: Scalar>(spec: &MlpTaskSpec) -> Result<(MlpData<T>, MlpModel<T>)> {
    spec.validate()?;
    let seed = spec.seed;
    let centers: DMatrix<T> = gaussian_matrix(&mut named_rng(seed, "mlp/centers"), spec.classes, spec.input_dim, spec.separation);
    let (x_train, y_train) = blobs(&centers, spec.samples, &mut named_rng(seed, "mlp/train"));
    let (x_test, y_test) = blobs(&centers, spec.test_samples, &mut named_rng(seed, "mlp/test"));

    let mut layers = Vec::new();
    let mut biases = Vec::new();
    for (l, (d_out, d_in)) in spec.layer_shapes().into_iter().enumerate() {
        let r = spec.rank.min(d_out).min(d_in);
        let base: DMatrix<T> =
            gaussian_matrix(&mut named_rng(seed, &format!("mlp/base{l}")), d_out, d_in, 1.0 / (d_in as f64).sqrt());
        let adapter = match spec.init {
            InitMode::Lora => {
                LoraAdapter::lora_init(d_out, d_in, r, &mut named_rng(seed, &format!("mlp/adapter{l}")))?.with_base(base)?
            }
            InitMode::Svd => LoraAdapter::svd_init(&base, r)?,
        };
        layers.push(adapter);
        biases.push(DVector::zeros(d_out));
    }
    Ok((MlpData { x_train, y_train, x_test, y_test }, MlpModel { layers, biases }))
}

impl<T: Scalar> MlpModel<T> {
    fn affine(&self, l: usize, input: &DMatrix<T>) -> DMatrix<T> {
        let w = self.layers[l].effective_weight();
        let mut z = input * w.transpose();
        for mut row in z.row_iter_mut() {
            row += self.biases[l].transpose();
        }
        z
    }

    /// Hidden activations and logits for the rows of `x`.
    pub fn forward(&self, x: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
        let h = self.affine(0, x).map(|z| z.tanh());
        let logits = self.affine(1, &h);
        (h, logits)
    }

    pub fn loss(&self, x: &DMatrix<T>, labels: &[usize]) -> T {
        let (_, logits) = self.forward(x);
        softmax_xent(&logits, labels).0
    }

    pub fn accuracy(&self, x: &DMatrix<T>, labels: &[usize]) -> f64 {
        let (_, logits) = self.forward(x);
        let hits = logits
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| row.transpose().argmax().0 == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_xent<T: Scalar>(logits: &DMatrix<T>, labels: &[usize]) -> (T, DMatrix<T>) {
    let b = logits.nrows();
    let inv_b = T::one() / cast::<T>(b as f64);
    let mut grad = DMatrix::zeros(b, logits.ncols());
    let mut loss = T::zero();
    for i in 0..b {
        let row = logits.row(i);
        let max = row.max();
        let mut denom = T::zero();
        for &z in row.iter() {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        for j in 0..logits.ncols() {
            let p = (row[j] - max - log_denom).exp();
            grad[(i, j)] = p * inv_b;
        }
        grad[(i, labels[i])] -= inv_b;
        loss += log_denom + max - row[labels[i]];
    }
    (loss * inv_b, grad)
}

/// Forward and reverse pass on one batch.
///
/// For layer `l` the returned factors are its input rows `X` and the loss
/// gradient with respect to its pre-activations `S`, so `SᵀX = ∂L/∂Wₗ`.
pub fn mlp_forward_backward<T: Scalar>(model: &MlpModel<T>, x: &DMatrix<T>, labels: &[usize]) -> Result<MlpGrads<T>> {
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return invalid(format!("{} rows but {} labels", x.nrows(), labels.len()));
    }
    let classes = model.biases[1].len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return invalid(format!("label {bad} out of range for {classes} classes"));
    }
    if x.ncols() != model.layers[0].d_in() {
        return invalid(format!("inputs have {} features, model expects {}", x.ncols(), model.layers[0].d_in()));
    }
    let (h, logits) = model.forward(x);
    let (loss, s2) = softmax_xent(&logits, labels);
    let w2 = model.layers[1].effective_weight();
    let dh = &s2 * w2;
    let s1 = dh.zip_map(&h, |g, a| g * (T::one() - a * a));
    let bias_grads = vec![column_sums(&s1), column_sums(&s2)];
    let factors = vec![
        GradFactor::new(x.clone(), s1, ScaleConvention::Mean)?,
        GradFactor::new(h, s2, ScaleConvention::Mean)?,
    ];
    Ok(MlpGrads { loss, factors, bias_grads })
}

fn column_sums<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

/// Rows of `x` picked by `idx`, with their labels.
pub fn gather_batch<T: Scalar>(x: &DMatrix<T>, y: &[usize], idx: &[usize]) -> (DMatrix<T>, Vec<usize>) {
    let xb = DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
    (xb, idx.iter().map(|&i| y[i]).collect())
}
