//! Fully connected per-variable subnetwork.
//!
//! `Linear → BN → ReLU` for the input layer and each hidden layer, dropout
//! after the last hidden activation, then a scalar linear output. Linear
//! layers feeding a batch norm carry no bias since the norm's shift absorbs it.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bn_backward, bn_eval, bn_train, dropout_mask, eval_in_chunks, relu_backward, relu_inplace, BnStats, BnTape, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub input_len: usize,
    pub width: usize,
    /// Number of width×width hidden layers after the input layer.
    pub hidden: usize,
    pub dropout: f64,
    pub params: Vec<Tensor>,
    pub bn: Vec<BnStats>,
}

pub struct DenseTape {
    inputs: Vec<Array2<f64>>,
    norms: Vec<BnTape>,
    acts: Vec<Array2<f64>>,
    mask: Array2<f64>,
    dropped: Array2<f64>,
}

impl DenseNet {
    pub fn new(input_len: usize, width: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        for l in 0..=hidden {
            let fan_in = if l == 0 { input_len } else { width };
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Tensor::uniform(format!("fc{l}.weight"), &[width, fan_in], bound, rng));
            params.push(Tensor::filled(format!("bn{l}.gamma"), &[width], 1.0));
            params.push(Tensor::zeros(format!("bn{l}.beta"), &[width]));
        }
        let bound = 1.0 / (width as f64).sqrt();
        params.push(Tensor::uniform("out.weight", &[width], bound, rng));
        params.push(Tensor::uniform("out.bias", &[1], bound, rng));
        Self {
            input_len,
            width,
            hidden,
            dropout,
            params,
            bn: (0..=hidden).map(|_| BnStats::new(width)).collect(),
        }
    }

    fn out_index(&self) -> usize {
        3 * (self.hidden + 1)
    }

    /// Inference: running batch-norm statistics, no dropout.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array1<f64> {
        eval_in_chunks(x, |c| self.eval_block(c))
    }

    fn eval_block(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut a = x.to_owned();
        for l in 0..=self.hidden {
            let z = a.dot(&self.params[3 * l].v2().t());
            a = bn_eval(
                &z,
                &self.params[3 * l + 1].data,
                &self.params[3 * l + 2].data,
                &self.bn[l],
            );
            relu_inplace(&mut a);
        }
        let o = self.out_index();
        a.dot(&self.params[o].v1()) + self.params[o + 1].data[0]
    }

    /// Training pass with batch statistics and dropout drawn from `rng`.
    pub fn forward_train(&self, x: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> (Array1<f64>, DenseTape) {
        let mut inputs = Vec::with_capacity(self.hidden + 1);
        let mut norms = Vec::with_capacity(self.hidden + 1);
        let mut acts = Vec::with_capacity(self.hidden + 1);
        let mut a = x.to_owned();
        for l in 0..=self.hidden {
            let z = a.dot(&self.params[3 * l].v2().t());
            inputs.push(a);
            let (mut y, tape) = bn_train(&z, &self.params[3 * l + 1].data, &self.params[3 * l + 2].data);
            relu_inplace(&mut y);
            norms.push(tape);
            a = y.clone();
            acts.push(y);
        }
        let mask = dropout_mask(a.dim(), self.dropout, rng);
        let dropped = &a * &mask;
        let o = self.out_index();
        let out = dropped.dot(&self.params[o].v1()) + self.params[o + 1].data[0];
        (
            out,
            DenseTape {
                inputs,
                norms,
                acts,
                mask,
                dropped,
            },
        )
    }

    /// Gradients of `Σ dout·output` for every tensor, in parameter order.
    pub fn backward(&self, tape: &DenseTape, dout: &Array1<f64>) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|t| vec![0.0; t.len()]).collect();
        let o = self.out_index();
        grads[o] = tape.dropped.t().dot(dout).to_vec();
        grads[o + 1] = vec![dout.sum()];
        let w_out = self.params[o].v1();
        let mut da = dout.view().insert_axis(Axis(1)).dot(&w_out.insert_axis(Axis(0))) * &tape.mask;
        for l in (0..=self.hidden).rev() {
            relu_backward(&mut da, &tape.acts[l]);
            let (dz, dgamma, dbeta) = bn_backward(&da, &tape.norms[l], &self.params[3 * l + 1].data);
            grads[3 * l] = dz.t().dot(&tape.inputs[l]).into_raw_vec_and_offset().0;
            grads[3 * l + 1] = dgamma;
            grads[3 * l + 2] = dbeta;
            if l > 0 {
                da = dz.dot(&self.params[3 * l].v2());
            }
        }
        grads
    }

    pub fn update_running(&mut self, tape: &DenseTape) {
        for (stats, norm) in self.bn.iter_mut().zip(&tape.norms) {
            stats.update(norm);
        }
    }
}
