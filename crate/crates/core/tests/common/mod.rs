//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use hybridcfd::surrogate::layers::{Tensor, BN_EPS};
use hybridcfd::surrogate::spectral::SpectralNet;
use hybridcfd::surrogate::{loss_and_grads, ModelConfig, SurrogateModel};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst per-tensor relative error between analytic and central-difference
/// gradients of the training-mode loss, with dropout masks pinned by reseeding.
pub struct GradCheck {
    pub worst: f64,
    pub worst_tensor: String,
    pub tensors: usize,
}

pub fn gradient_check(config: ModelConfig, batch: usize, seed: u64) -> GradCheck {
    let mut model = SurrogateModel::new(config, 2, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let nin = model.nets[0].input_len();
    // nudge batch-norm affine parameters off their identity initialization
    for net in &mut model.nets {
        for t in net.params_mut() {
            if t.name.contains("gamma") || t.name.contains("beta") {
                for v in &mut t.data {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
    }
    let x = Array2::from_shape_simple_fn((batch, nin), || rng.gen_range(0.0..1.0));
    let targets: Vec<Array1<f64>> = (0..model.nets.len())
        .map(|_| Array1::from_shape_simple_fn(batch, || rng.gen_range(-1.0..1.0)))
        .collect();
    let mask_seed = seed + 1000;
    let loss_at =
        |m: &SurrogateModel| loss_and_grads(m, x.view(), &targets, false, &mut ChaCha8Rng::seed_from_u64(mask_seed)).0;
    let (_, analytic) = loss_and_grads(
        &model,
        x.view(),
        &targets,
        false,
        &mut ChaCha8Rng::seed_from_u64(mask_seed),
    );

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();
    let mut tensors = 0;
    for v in 0..model.nets.len() {
        for ti in 0..model.nets[v].params().len() {
            let len = model.nets[v].params()[ti].len();
            let mut fd = vec![0.0; len];
            for j in 0..len {
                let orig = model.nets[v].params()[ti].data[j];
                model.nets[v].params_mut()[ti].data[j] = orig + h;
                let lp = loss_at(&model);
                model.nets[v].params_mut()[ti].data[j] = orig - h;
                let lm = loss_at(&model);
                model.nets[v].params_mut()[ti].data[j] = orig;
                fd[j] = (lp - lm) / (2.0 * h);
            }
            let a = &analytic[v][ti];
            let diff: f64 = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nf: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = diff / na.max(nf).max(1e-300);
            tensors += 1;
            if rel > worst {
                worst = rel;
                worst_tensor = format!("net{v}/{}", model.nets[v].params()[ti].name);
            }
        }
    }
    GradCheck {
        worst,
        worst_tensor,
        tensors,
    }
}

fn tensor<'a>(net: &'a SpectralNet, name: &str) -> &'a Tensor {
    net.params
        .iter()
        .find(|t| t.name == name)
        .unwrap_or_else(|| panic!("no tensor {name}"))
}

type C = (f64, f64);

fn cmul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn cadd(a: C, b: C) -> C {
    (a.0 + b.0, a.1 + b.1)
}

fn cexp(theta: f64) -> C {
    (theta.cos(), theta.sin())
}

/// Inference pass of a spectral net for one sample written out loop by loop:
/// complex forward transform, mode-wise mixing, Hermitian extension and full
/// complex inverse transform.
pub fn spectral_oracle(net: &SpectralNet, zeta: &[f64]) -> f64 {
    let n = zeta.len();
    let w = net.width;
    let m = net.modes;
    let lw = &tensor(net, "lift.weight").data;
    let lb = &tensor(net, "lift.bias").data;
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|x| (0..w).map(|c| lw[c] * zeta[x] + lb[c]).collect())
        .collect();
    for l in 0..net.layers {
        let rr = &tensor(net, &format!("fourier{l}.r_re")).data;
        let ri = &tensor(net, &format!("fourier{l}.r_im")).data;
        let wl = &tensor(net, &format!("fourier{l}.w")).data;
        let bl = &tensor(net, &format!("fourier{l}.bias")).data;
        let gamma = &tensor(net, &format!("bn{l}.gamma")).data;
        let beta = &tensor(net, &format!("bn{l}.beta")).data;
        // F(h)[k][c]
        let mut fh = vec![vec![(0.0, 0.0); w]; m];
        for k in 0..m {
            for c in 0..w {
                for x in 0..n {
                    let e = cexp(-2.0 * PI * (k * x) as f64 / n as f64);
                    fh[k][c] = cadd(fh[k][c], (h[x][c] * e.0, h[x][c] * e.1));
                }
            }
        }
        // mixed[k][o] = Σ_c F(h)[k][c] R[c][o][k]
        let mut mixed = vec![vec![(0.0, 0.0); w]; m];
        for k in 0..m {
            for o in 0..w {
                for c in 0..w {
                    let idx = k * w * w + c * w + o;
                    mixed[k][o] = cadd(mixed[k][o], cmul(fh[k][c], (rr[idx], ri[idx])));
                }
            }
        }
        // full spectrum with conjugate mirror, zero outside the retained modes
        let mut full = vec![vec![(0.0, 0.0); w]; n];
        for k in 0..m {
            for o in 0..w {
                full[k][o] = mixed[k][o];
                if k > 0 && n - k != k {
                    full[n - k][o] = (mixed[k][o].0, -mixed[k][o].1);
                }
            }
        }
        let mut next = vec![vec![0.0; w]; n];
        for x in 0..n {
            for o in 0..w {
                let mut acc = (0.0, 0.0);
                for (k, row) in full.iter().enumerate() {
                    acc = cadd(acc, cmul(row[o], cexp(2.0 * PI * (k * x) as f64 / n as f64)));
                }
                let mut pre = acc.0 / n as f64 + bl[o];
                for c in 0..w {
                    pre += h[x][c] * wl[c * w + o];
                }
                let a = pre.max(0.0);
                let stats = &net.bn[l];
                next[x][o] = (a - stats.mean[o]) / (stats.var[o] + BN_EPS).sqrt() * gamma[o] + beta[o];
            }
        }
        h = next;
    }
    let pw = &tensor(net, "proj.weight").data;
    let pb = tensor(net, "proj.bias").data[0];
    let mut out = pb;
    for c in 0..w {
        for x in 0..n {
            out += pw[c * n + x] * h[x][c];
        }
    }
    out
}

/// Largest deviation between the network and the oracle over `instances`
/// random small nets `(w = 4, i = 5, m = 2)` with randomized batch-norm state.
pub fn spectral_oracle_sweep(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut net = SpectralNet::new(5, 4, 3, 2, 0.2, &mut rng);
        for t in &mut net.params {
            for v in &mut t.data {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        for bn in &mut net.bn {
            for v in &mut bn.mean {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in &mut bn.var {
                *v = rng.gen_range(0.2..2.0);
            }
        }
        let x = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-1.0..1.0));
        let y = net.forward_eval(x.view());
        for s in 0..3 {
            let expect = spectral_oracle(&net, x.row(s).as_slice().unwrap());
            worst = worst.max((y[s] - expect).abs() / expect.abs().max(1.0));
        }
    }
    worst
}
