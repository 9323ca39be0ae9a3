//! Real discrete Fourier transform along short feature axes, evaluated
//! directly as dense matrices.

use std::f64::consts::PI;

use ndarray::Array2;

/// Number of non-redundant modes of a real signal of length `n`.
pub fn half_spectrum(n: usize) -> usize {
    n / 2 + 1
}

/// Forward and inverse real-DFT matrices truncated to the lowest `modes` modes.
///
/// `fwd_re`/`fwd_im` are `modes × n`; `inv_re`/`inv_im` are `n × modes` and
/// already carry the Hermitian weights and the `1/n` factor, so
/// `inv_re·(fwd_re·x) + inv_im·(fwd_im·x)` is the low-pass filter of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DftMatrices {
    pub n: usize,
    pub modes: usize,
    pub fwd_re: Array2<f64>,
    pub fwd_im: Array2<f64>,
    pub inv_re: Array2<f64>,
    pub inv_im: Array2<f64>,
}

impl DftMatrices {
    /// `modes` is clamped to the half spectrum.
    pub fn new(n: usize, modes: usize) -> Self {
        let modes = modes.min(half_spectrum(n));
        let mut fwd_re = Array2::zeros((modes, n));
        let mut fwd_im = Array2::zeros((modes, n));
        let mut inv_re = Array2::zeros((n, modes));
        let mut inv_im = Array2::zeros((n, modes));
        for k in 0..modes {
            // weight 1 for the mean and the Nyquist mode, 2 for mirrored pairs
            let c = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            for x in 0..n {
                let theta = 2.0 * PI * ((k * x) % n) as f64 / n as f64;
                let (s, co) = theta.sin_cos();
                fwd_re[[k, x]] = co;
                fwd_im[[k, x]] = -s;
                inv_re[[x, k]] = c * co / n as f64;
                inv_im[[x, k]] = -c * s / n as f64;
            }
        }
        Self {
            n,
            modes,
            fwd_re,
            fwd_im,
            inv_re,
            inv_im,
        }
    }
}

/// Half-spectrum of a real signal.
pub fn rdft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = DftMatrices::new(x.len(), half_spectrum(x.len()));
    let re = (0..m.modes)
        .map(|k| (0..m.n).map(|i| m.fwd_re[[k, i]] * x[i]).sum())
        .collect();
    let im = (0..m.modes)
        .map(|k| (0..m.n).map(|i| m.fwd_im[[k, i]] * x[i]).sum())
        .collect();
    (re, im)
}

/// Inverse of [`rdft`] for a signal of length `n`; modes past `re.len()` are zero.
pub fn irdft(re: &[f64], im: &[f64], n: usize) -> Vec<f64> {
    let m = DftMatrices::new(n, re.len());
    (0..n)
        .map(|x| {
            (0..m.modes)
                .map(|k| m.inv_re[[x, k]] * re[k] + m.inv_im[[x, k]] * im[k])
                .sum()
        })
        .collect()
}

/// Keeps the lowest `modes` modes of `x`.
pub fn low_pass(x: &[f64], modes: usize) -> Vec<f64> {
    let (re, im) = rdft(x);
    let keep = modes.min(re.len());
    irdft(&re[..keep], &im[..keep], x.len())
}
