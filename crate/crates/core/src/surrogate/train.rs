//! Supervised fitting on consecutive snapshot pairs.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::features::{build_stencil_features, variables, NormStats};
use super::{SubNetwork, SurrogateModel, Tape};
use crate::error::{Error, Result};
use crate::mesh::{CavityBoundaries, FieldState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Keep the first layer of every subnetwork fixed.
    pub freeze_first: bool,
    pub lr: f64,
}

impl TrainSettings {
    pub fn new(epochs: usize, freeze_first: bool) -> Self {
        Self {
            epochs,
            freeze_first,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub pairs: usize,
    /// Combined training loss of each epoch, measured in the training pass.
    pub train_loss: Vec<f64>,
    /// Validation loss before training (index 0) and after each epoch.
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the incoming model.
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainReport {
    /// Report of a model used without fitting.
    pub fn untrained() -> Self {
        Self {
            pairs: 0,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            best_epoch: 0,
            best_val: f64::NAN,
        }
    }
}

/// Features and normalized derivative targets for every pair.
pub struct Dataset {
    pub x: Array2<f64>,
    pub targets: Vec<Array1<f64>>,
    /// Rows of the last pair, used for validation.
    pub val_rows: Range<usize>,
    pub pairs: usize,
}

impl Dataset {
    pub fn build(snapshots: &[FieldState], bcs: &CavityBoundaries, stats: &NormStats) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::TooFewSnapshots(snapshots.len()));
        }
        for w in snapshots.windows(2) {
            if w[1].step != w[0].step + 1 || w[1].grid != w[0].grid {
                return Err(Error::invalid(
                    "snapshots",
                    format!("steps {} and {} are not consecutive", w[0].step, w[1].step),
                ));
            }
        }
        let mut xs = Vec::new();
        let nvars = stats.nvars();
        let mut targets: Vec<Vec<f64>> = vec![Vec::new(); nvars];
        for w in snapshots.windows(2) {
            xs.push(build_stencil_features(&w[0], bcs, stats)?);
            for (v, (a, b)) in variables(&w[0]).into_iter().zip(variables(&w[1])).enumerate() {
                let scale = stats.deriv_scale[v];
                targets[v].extend(a.iter().zip(b).map(|(a, b)| (b - a) / scale));
            }
        }
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
        let x = concatenate(Axis(0), &views).expect("equal feature widths");
        let per_pair = xs[0].nrows();
        let n = x.nrows();
        Ok(Self {
            x,
            targets: targets.into_iter().map(Array1::from).collect(),
            val_rows: n - per_pair..n,
            pairs: snapshots.len() - 1,
        })
    }
}

fn mse(pred: &Array1<f64>, target: &Array1<f64>) -> f64 {
    let d = pred - target;
    d.dot(&d) / d.len() as f64
}

fn net_loss_and_grads(
    net: &SubNetwork,
    x: ArrayView2<f64>,
    target: &Array1<f64>,
    freeze_first: bool,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<Vec<f64>>, Tape) {
    let (pred, tape) = net.forward_train(x, rng);
    let diff = &pred - target;
    let n = diff.len() as f64;
    let loss = diff.dot(&diff) / n;
    let dout = diff * (2.0 / n);
    let mut grads = net.backward(&tape, &dout);
    if freeze_first {
        for g in grads.iter_mut().take(net.first_layer_tensors()) {
            g.fill(0.0);
        }
    }
    (loss, grads, tape)
}

/// Training-mode combined loss `Σ_v MSE_v` and its gradients per subnetwork,
/// with dropout masks drawn from `rng` in subnetwork order.
pub fn loss_and_grads(
    model: &SurrogateModel,
    x: ArrayView2<f64>,
    targets: &[Array1<f64>],
    freeze_first: bool,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<Vec<Vec<f64>>>) {
    let mut total = 0.0;
    let mut all = Vec::with_capacity(model.nets.len());
    for (net, target) in model.nets.iter().zip(targets) {
        let (loss, grads, _) = net_loss_and_grads(net, x, target, freeze_first, rng);
        total += loss;
        all.push(grads);
    }
    (total, all)
}

/// Inference-mode combined loss on the given rows.
pub fn eval_loss(model: &SurrogateModel, data: &Dataset, rows: Range<usize>) -> f64 {
    let x = data.x.slice(s![rows.clone(), ..]);
    model
        .nets
        .iter()
        .zip(&data.targets)
        .map(|(net, t)| mse(&net.forward_eval(x), &t.slice(s![rows.clone()]).to_owned()))
        .sum()
}

/// Full-batch Adam on all consecutive pairs of `snapshots`, keeping the
/// parameters with the lowest validation loss on the last pair.
///
/// Normalization statistics are fitted here if the model has none.
pub fn train(
    model: &mut SurrogateModel,
    snapshots: &[FieldState],
    bcs: &CavityBoundaries,
    settings: &TrainSettings,
) -> Result<TrainReport> {
    if snapshots.len() < 2 {
        return Err(Error::TooFewSnapshots(snapshots.len()));
    }
    if snapshots[0].grid.ndim() != model.ndim {
        return Err(Error::Shape("snapshot rank differs from model".into()));
    }
    if model.stats.is_none() {
        model.stats = Some(NormStats::fit(snapshots, bcs)?);
    }
    let data = Dataset::build(snapshots, bcs, model.stats.as_ref().expect("fitted above"))?;
    let mut report = TrainReport {
        pairs: data.pairs,
        train_loss: Vec::with_capacity(settings.epochs),
        val_loss: Vec::with_capacity(settings.epochs + 1),
        best_epoch: 0,
        best_val: eval_loss(model, &data, data.val_rows.clone()),
    };
    report.val_loss.push(report.best_val);
    if settings.epochs == 0 {
        return Ok(report);
    }

    let mut opts: Vec<Adam> = model.nets.iter().map(|n| Adam::new(n.params(), settings.lr)).collect();
    let mut best = model.nets.clone();
    for epoch in 1..=settings.epochs {
        let mut epoch_loss = 0.0;
        let SurrogateModel { nets, rng, .. } = model;
        for ((net, target), opt) in nets.iter_mut().zip(&data.targets).zip(opts.iter_mut()) {
            let (loss, grads, tape) = net_loss_and_grads(net, data.x.view(), target, settings.freeze_first, rng);
            epoch_loss += loss;
            net.update_running(&tape);
            drop(tape);
            let skip = if settings.freeze_first {
                net.first_layer_tensors()
            } else {
                0
            };
            opt.update(net.params_mut(), &grads, skip);
        }
        report.train_loss.push(epoch_loss);
        let val = eval_loss(model, &data, data.val_rows.clone());
        report.val_loss.push(val);
        if val < report.best_val {
            report.best_val = val;
            report.best_epoch = epoch;
            best.clone_from(&model.nets);
        }
    }
    model.nets = best;
    Ok(report)
}
