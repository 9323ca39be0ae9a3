//! Parameter tensors and the building blocks shared by both subnetworks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Rows per block in inference passes; keeps activations cache-resident.
pub const EVAL_CHUNK: usize = 256;

/// Applies a row-wise map block by block.
pub fn eval_in_chunks(x: ArrayView2<f64>, f: impl Fn(ArrayView2<f64>) -> Array1<f64>) -> Array1<f64> {
    if x.nrows() <= EVAL_CHUNK {
        return f(x);
    }
    let mut out = Vec::with_capacity(x.nrows());
    for block in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        out.extend(f(block));
    }
    Array1::from(out)
}

/// A named, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.fill(value);
        t
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::zeros(name, shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn v1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn v2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("rank-2 tensor")
    }

    pub fn v3(&self) -> ArrayView3<'_, f64> {
        ArrayView3::from_shape((self.shape[0], self.shape[1], self.shape[2]), &self.data).expect("rank-3 tensor")
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with the batch mean and unbiased batch variance.
    pub fn update(&mut self, tape: &BnTape) {
        let n = tape.xhat.nrows() as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * tape.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * tape.var[c] * correction;
        }
    }
}

/// Saved batch quantities of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnTape {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    /// Biased batch variance.
    pub var: Array1<f64>,
}

/// Normalizes each column of `x` with its batch statistics.
pub fn bn_train(x: &Array2<f64>, gamma: &[f64], beta: &[f64]) -> (Array2<f64>, BnTape) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = &centered * &inv_std;
    let y = &xhat * &ArrayView1::from(gamma) + ArrayView1::from(beta);
    (
        y,
        BnTape {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Normalizes each column of `x` with frozen running statistics.
pub fn bn_eval(x: &Array2<f64>, gamma: &[f64], beta: &[f64], stats: &BnStats) -> Array2<f64> {
    let scale: Array1<f64> = gamma
        .iter()
        .zip(&stats.var)
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift: Array1<f64> = (0..gamma.len()).map(|c| beta[c] - stats.mean[c] * scale[c]).collect();
    x * &scale + &shift
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(dy: &Array2<f64>, tape: &BnTape, gamma: &[f64]) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let n = dy.nrows() as f64;
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (dy * &tape.xhat).sum_axis(Axis(0));
    let g = ArrayView1::from(gamma);
    let dxhat = dy * &g;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &tape.xhat).sum_axis(Axis(0));
    let dx = (dxhat * n - &sum_dxhat - &tape.xhat * &sum_dxhat_xhat) * &(&tape.inv_std / n);
    (dx, dgamma.to_vec(), dbeta.to_vec())
}

/// Inverted-dropout mask: `1/(1-p)` with probability `1-p`, else 0.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if p <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() >= p { keep } else { 0.0 })
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` where the ReLU output was zero.
pub fn relu_backward(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}
