//! Fourier-operator subnetwork acting along the stencil feature axis.
//!
//! Each feature position is lifted to `width` channels, passed through
//! Fourier layers `h ← BN(ReLU(F⁻¹[F(h)·R] + W·h + b))`, flattened
//! channel-major and projected to one scalar.
//!
//! Activations are stored per sample as rows of length `n·width` with column
//! `x·width + c`. For a fixed layer the truncated transform, the mode mixing
//! and the pointwise map together form one linear operator on such a row,
//! so each layer is assembled into an `(n·w) × (n·w)` matrix and applied as a
//! single product. Gradients of that matrix are folded back onto `R` and `W`.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::dft::DftMatrices;
use super::layers::{
    bn_backward, bn_eval, bn_train, dropout_mask, eval_in_chunks, relu_backward, relu_inplace, BnStats, BnTape, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNet {
    pub input_len: usize,
    pub width: usize,
    pub layers: usize,
    /// Retained modes after clamping to the half spectrum.
    pub modes: usize,
    pub dropout: f64,
    pub params: Vec<Tensor>,
    pub bn: Vec<BnStats>,
    /// Position couplings of the real and imaginary kernel parts:
    /// `y[x'] = Σ_m Σ_x a_re[m,x,x']·h[x]·R_re[m] + a_im[m,x,x']·h[x]·R_im[m]`.
    a_re: Array3<f64>,
    a_im: Array3<f64>,
}

struct LayerTape {
    input: Array2<f64>,
    act: Array2<f64>,
    norm: BnTape,
}

pub struct SpectralTape {
    zeta: Array2<f64>,
    layers: Vec<LayerTape>,
    mask: Array2<f64>,
    dropped: Array2<f64>,
}

const LIFT_W: usize = 0;
const LIFT_B: usize = 1;
const PER_LAYER: usize = 6;

fn base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// `(b, n·w)` seen as `(b·n, w)`, i.e. one row per position.
fn per_position(a: Array2<f64>, w: usize) -> Array2<f64> {
    let rows = a.len() / w;
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, w))
        .expect("contiguous activations")
}

fn per_sample(a: Array2<f64>, b: usize) -> Array2<f64> {
    let cols = a.len() / b;
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, cols))
        .expect("contiguous activations")
}

impl SpectralNet {
    pub fn new(
        input_len: usize,
        width: usize,
        layers: usize,
        modes: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dft = DftMatrices::new(input_len, modes);
        let k = dft.modes;
        let n = input_len;
        let mut a_re = Array3::zeros((k, n, n));
        let mut a_im = Array3::zeros((k, n, n));
        for m in 0..k {
            for x in 0..n {
                for xp in 0..n {
                    let (fr, fi) = (dft.fwd_re[[m, x]], dft.fwd_im[[m, x]]);
                    let (gr, gi) = (dft.inv_re[[xp, m]], dft.inv_im[[xp, m]]);
                    a_re[[m, x, xp]] = gr * fr + gi * fi;
                    a_im[[m, x, xp]] = gi * fr - gr * fi;
                }
            }
        }
        let mut params = vec![
            Tensor::uniform("lift.weight", &[width], 1.0, rng),
            Tensor::uniform("lift.bias", &[width], 1.0, rng),
        ];
        let bound = 1.0 / (width as f64).sqrt();
        for l in 0..layers {
            params.push(Tensor::uniform(
                format!("fourier{l}.r_re"),
                &[k, width, width],
                bound,
                rng,
            ));
            params.push(Tensor::uniform(
                format!("fourier{l}.r_im"),
                &[k, width, width],
                bound,
                rng,
            ));
            params.push(Tensor::uniform(format!("fourier{l}.w"), &[width, width], bound, rng));
            params.push(Tensor::uniform(format!("fourier{l}.bias"), &[width], bound, rng));
            params.push(Tensor::filled(format!("bn{l}.gamma"), &[width], 1.0));
            params.push(Tensor::zeros(format!("bn{l}.beta"), &[width]));
        }
        let fan_in = width * input_len;
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.push(Tensor::uniform("proj.weight", &[fan_in], bound, rng));
        params.push(Tensor::uniform("proj.bias", &[1], bound, rng));
        Self {
            input_len,
            width,
            layers,
            modes: k,
            dropout,
            params,
            bn: (0..layers).map(|_| BnStats::new(width)).collect(),
            a_re,
            a_im,
        }
    }

    fn proj_index(&self) -> usize {
        base(self.layers)
    }

    /// Linear part of layer `l` acting on per-sample rows.
    fn layer_operator(&self, l: usize) -> Array2<f64> {
        let (n, w) = (self.input_len, self.width);
        let r_re = self.params[base(l)].v3();
        let r_im = self.params[base(l) + 1].v3();
        let pw = self.params[base(l) + 2].v2();
        let mut op = Array2::<f64>::zeros((n * w, n * w));
        for x in 0..n {
            for xp in 0..n {
                let mut block = op.slice_mut(ndarray::s![x * w..(x + 1) * w, xp * w..(xp + 1) * w]);
                for m in 0..self.modes {
                    let (ar, ai) = (self.a_re[[m, x, xp]], self.a_im[[m, x, xp]]);
                    block.scaled_add(ar, &r_re.index_axis(Axis(0), m));
                    block.scaled_add(ai, &r_im.index_axis(Axis(0), m));
                }
                if x == xp {
                    block += &pw;
                }
            }
        }
        op
    }

    /// Channel-major projection weights permuted to the row layout.
    fn projection_row(&self) -> Array1<f64> {
        let (n, w) = (self.input_len, self.width);
        let p = &self.params[self.proj_index()].data;
        (0..n * w).map(|j| p[(j % w) * n + j / w]).collect()
    }

    fn lift(&self, zeta: ArrayView2<f64>) -> Array2<f64> {
        let (n, w) = (self.input_len, self.width);
        let lw = &self.params[LIFT_W].data;
        let lb = &self.params[LIFT_B].data;
        let mut h = Array2::<f64>::zeros((zeta.nrows(), n * w));
        for (mut row, z) in h.rows_mut().into_iter().zip(zeta.rows()) {
            for x in 0..n {
                for c in 0..w {
                    row[x * w + c] = lw[c] * z[x] + lb[c];
                }
            }
        }
        h
    }

    fn preactivation(&self, l: usize, op: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        let pre = per_position(h.dot(op), self.width) + self.params[base(l) + 3].v1();
        per_sample(pre, h.nrows())
    }

    /// Inference: running batch-norm statistics, no dropout.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let ops: Vec<Array2<f64>> = (0..self.layers).map(|l| self.layer_operator(l)).collect();
        let proj = self.projection_row();
        let bias = self.params[self.proj_index() + 1].data[0];
        eval_in_chunks(x, |z| {
            let b = z.nrows();
            let mut h = self.lift(z);
            for (l, op) in ops.iter().enumerate() {
                let mut a = per_position(self.preactivation(l, op, &h), self.width);
                relu_inplace(&mut a);
                let base = base(l);
                let y = bn_eval(
                    &a,
                    &self.params[base + 4].data,
                    &self.params[base + 5].data,
                    &self.bn[l],
                );
                h = per_sample(y, b);
            }
            h.dot(&proj) + bias
        })
    }

    pub fn forward_train(&self, x: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> (Array1<f64>, SpectralTape) {
        let b = x.nrows();
        let mut h = self.lift(x);
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let op = self.layer_operator(l);
            let mut a = per_position(self.preactivation(l, &op, &h), self.width);
            relu_inplace(&mut a);
            let base = base(l);
            let (y, norm) = bn_train(&a, &self.params[base + 4].data, &self.params[base + 5].data);
            layers.push(LayerTape {
                input: std::mem::replace(&mut h, per_sample(y, b)),
                act: a,
                norm,
            });
        }
        let mask = dropout_mask(h.dim(), self.dropout, rng);
        let dropped = h * &mask;
        let out = dropped.dot(&self.projection_row()) + self.params[self.proj_index() + 1].data[0];
        (
            out,
            SpectralTape {
                zeta: x.to_owned(),
                layers,
                mask,
                dropped,
            },
        )
    }

    /// Gradients of `Σ dout·output` for every tensor, in parameter order.
    pub fn backward(&self, tape: &SpectralTape, dout: &Array1<f64>) -> Vec<Vec<f64>> {
        let (n, w, k) = (self.input_len, self.width, self.modes);
        let b = dout.len();
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|t| vec![0.0; t.len()]).collect();
        let p = self.proj_index();
        let dproj_row = tape.dropped.t().dot(dout);
        for j in 0..n * w {
            grads[p][(j % w) * n + j / w] = dproj_row[j];
        }
        grads[p + 1] = vec![dout.sum()];
        let proj = self.projection_row();
        let mut dh = dout.view().insert_axis(Axis(1)).dot(&proj.view().insert_axis(Axis(0))) * &tape.mask;
        for l in (0..self.layers).rev() {
            let t = &tape.layers[l];
            let base = base(l);
            let (mut dpre, dgamma, dbeta) = bn_backward(&per_position(dh, w), &t.norm, &self.params[base + 4].data);
            grads[base + 4] = dgamma;
            grads[base + 5] = dbeta;
            relu_backward(&mut dpre, &t.act);
            grads[base + 3] = dpre.sum_axis(Axis(0)).to_vec();
            let dpre = per_sample(dpre, b);
            let dop = t.input.t().dot(&dpre);
            for m in 0..k {
                let off = m * w * w;
                for x in 0..n {
                    for xp in 0..n {
                        let (ar, ai) = (self.a_re[[m, x, xp]], self.a_im[[m, x, xp]]);
                        let block = dop.slice(ndarray::s![x * w..(x + 1) * w, xp * w..(xp + 1) * w]);
                        for c in 0..w {
                            for o in 0..w {
                                let g = block[[c, o]];
                                grads[base][off + c * w + o] += ar * g;
                                grads[base + 1][off + c * w + o] += ai * g;
                            }
                        }
                    }
                }
            }
            for x in 0..n {
                let block = dop.slice(ndarray::s![x * w..(x + 1) * w, x * w..(x + 1) * w]);
                for (g, d) in grads[base + 2].iter_mut().zip(block.iter()) {
                    *g += d;
                }
            }
            dh = dpre.dot(&self.layer_operator(l).t());
        }
        for (s, z) in tape.zeta.rows().into_iter().enumerate() {
            for x in 0..n {
                for c in 0..w {
                    let g = dh[[s, x * w + c]];
                    grads[LIFT_W][c] += g * z[x];
                    grads[LIFT_B][c] += g;
                }
            }
        }
        grads
    }

    pub fn update_running(&mut self, tape: &SpectralTape) {
        for (stats, layer) in self.bn.iter_mut().zip(&tape.layers) {
            stats.update(&layer.norm);
        }
    }

    /// Output of Fourier layer `l` before the activation for one sample given
    /// as an `(n, width)` activation matrix.
    pub fn layer_preactivation(&self, l: usize, h: &Array2<f64>) -> Array2<f64> {
        let row = h
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, self.input_len * self.width))
            .expect("row");
        let pre = self.preactivation(l, &self.layer_operator(l), &row);
        per_position(pre, self.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::dft::low_pass;
    use rand::{Rng, SeedableRng};

    fn identity_layer(net: &mut SpectralNet, l: usize) {
        let w = net.width;
        let b = base(l);
        for t in &mut net.params[b..b + 4] {
            t.data.fill(0.0);
        }
        for m in 0..net.modes {
            for c in 0..w {
                net.params[b].data[m * w * w + c * w + c] = 1.0;
            }
        }
    }

    #[test]
    fn full_mode_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SpectralNet::new(15, 3, 1, 12, 0.0, &mut rng);
        assert_eq!(net.modes, 8);
        identity_layer(&mut net, 0);
        let h = Array2::from_shape_simple_fn((15, 3), || rng.gen_range(-1.0..1.0));
        let out = net.layer_preactivation(0, &h);
        for (a, b) in out.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_identity_kernel_is_low_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, m) in [(15, 3), (16, 4), (16, 9), (28, 12)] {
            let mut net = SpectralNet::new(n, 2, 1, m, 0.0, &mut rng);
            identity_layer(&mut net, 0);
            let h = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0));
            let out = net.layer_preactivation(0, &h);
            for c in 0..2 {
                let col: Vec<f64> = h.column(c).to_vec();
                let expect = low_pass(&col, m);
                for x in 0..n {
                    assert!((out[[x, c]] - expect[x]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn inference_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = SpectralNet::new(15, 6, 3, 12, 0.2, &mut rng);
        let x = Array2::from_shape_simple_fn((9, 15), || rng.gen_range(0.0..1.0));
        let all = net.forward_eval(x.view());
        assert_eq!(all, net.forward_eval(x.view()));
        let part = net.forward_eval(x.slice(ndarray::s![2..5, ..]));
        for i in 0..3 {
            assert!((part[i] - all[i + 2]).abs() < 1e-14);
        }
    }
}
