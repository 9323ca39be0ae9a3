//! Field error metrics against a solver-only trajectory and the
//! threshold/epoch sweep harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hybrid::{hybrid_run, HybridConfig, ModelStart, Observer, StepSource};
use crate::mesh::{FieldState, StructuredGrid};
use crate::solver::{CfdSolver, PhysicsParams};
use crate::surrogate::SurrogateModel;

fn same_len(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} truth values vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// `‖Z − Ẑ‖₂ / ‖Z‖₂`; NaN when the truth has zero norm.
pub fn rel_l2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth, pred)?;
    let norm = truth.iter().map(|z| z * z).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(f64::NAN);
    }
    let diff = truth.iter().zip(pred).map(|(z, p)| (z - p).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(z, p)| (z - p).powi(2)).sum::<f64>() / truth.len() as f64)
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(z, p)| (z - p).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn maxae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth, pred)?;
    Ok(truth.iter().zip(pred).fold(0.0, |m, (z, p)| m.max((z - p).abs())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FieldErrors {
    pub rel_l2: f64,
    pub mse: f64,
    pub mae: f64,
    pub maxae: f64,
}

impl FieldErrors {
    pub fn compute(truth: &[f64], pred: &[f64]) -> Result<Self> {
        Ok(Self {
            rel_l2: rel_l2(truth, pred)?,
            mse: mse(truth, pred)?,
            mae: mae(truth, pred)?,
            maxae: maxae(truth, pred)?,
        })
    }
}

/// Compared variables: temperature, speed, then velocity components.
pub fn error_variables(ndim: usize) -> Vec<&'static str> {
    let mut v = vec!["T", "U", "Ux", "Uy"];
    if ndim == 3 {
        v.push("Uz");
    }
    v
}

fn compared_fields(state: &FieldState) -> Vec<Vec<f64>> {
    let mut out = vec![state.t.clone(), state.speed()];
    out.extend(state.u.iter().cloned());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepErrors {
    pub step: u64,
    pub time: f64,
    /// One entry per [`error_variables`] name.
    pub fields: Vec<FieldErrors>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSeries {
    pub variables: Vec<&'static str>,
    pub records: Vec<StepErrors>,
}

impl ErrorSeries {
    pub fn new(ndim: usize) -> Self {
        Self {
            variables: error_variables(ndim),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, truth: &FieldState, pred: &FieldState) -> Result<()> {
        if truth.grid != pred.grid {
            return Err(Error::Shape("trajectories live on different grids".into()));
        }
        let fields = compared_fields(truth)
            .iter()
            .zip(compared_fields(pred).iter())
            .map(|(z, p)| FieldErrors::compute(z, p))
            .collect::<Result<Vec<_>>>()?;
        self.records.push(StepErrors {
            step: pred.step,
            time: pred.time,
            fields,
        });
        Ok(())
    }

    /// Mean of every metric of variable `var` over the recorded steps.
    pub fn time_average(&self, var: usize) -> FieldErrors {
        let n = self.records.len().max(1) as f64;
        let mut acc = FieldErrors::default();
        for r in &self.records {
            let e = r.fields[var];
            acc.rel_l2 += e.rel_l2 / n;
            acc.mse += e.mse / n;
            acc.mae += e.mae / n;
            acc.maxae += e.maxae / n;
        }
        acc
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "time".to_string()];
        for v in &self.variables {
            for m in ["rel_l2", "mse", "mae", "maxae"] {
                header.push(format!("{m}_{v}"));
            }
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.time.to_string()];
            for e in &r.fields {
                row.extend([e.rel_l2, e.mse, e.mae, e.maxae].iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver-only trajectory sampled every `cadence` steps.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub cadence: u64,
    pub steps: usize,
    pub frames: BTreeMap<u64, FieldState>,
    /// Stepping time of the whole trajectory.
    pub elapsed: Duration,
}

impl GroundTruth {
    pub fn record(solver: &mut CfdSolver, steps: usize, cadence: usize) -> Result<Self> {
        if cadence == 0 {
            return Err(Error::invalid("snapshot_cadence", "must be positive"));
        }
        let mut state = solver.initial_state();
        let mut frames = BTreeMap::new();
        let mut elapsed = Duration::ZERO;
        for _ in 0..steps {
            let clock = Instant::now();
            state = solver.step(&state)?;
            elapsed += clock.elapsed();
            if state.step.is_multiple_of(cadence as u64) {
                frames.insert(state.step, state.clone());
            }
        }
        Ok(Self {
            cadence: cadence as u64,
            steps,
            frames,
            elapsed,
        })
    }

    /// Wall time the solver alone would need for `n` steps.
    pub fn solver_seconds(&self, n: usize) -> f64 {
        self.elapsed.as_secs_f64() * n as f64 / self.steps.max(1) as f64
    }
}

/// Compares every visited state that has a ground-truth frame.
pub struct ErrorObserver<'a> {
    pub truth: &'a GroundTruth,
    pub series: ErrorSeries,
}

impl<'a> ErrorObserver<'a> {
    pub fn new(truth: &'a GroundTruth, ndim: usize) -> Self {
        Self {
            truth,
            series: ErrorSeries::new(ndim),
        }
    }
}

impl Observer for ErrorObserver<'_> {
    fn on_step(&mut self, state: &FieldState, _source: StepSource) -> Result<()> {
        match self.truth.frames.get(&state.step) {
            Some(t) => self.series.push(t, state),
            None => Ok(()),
        }
    }
}

/// One configuration of a sweep, laid out like the published summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epochs: usize,
    pub res: f64,
    pub t_cfd: f64,
    pub t_ml: f64,
    pub t_up: f64,
    pub n_switch: usize,
    pub n_cfd: usize,
    pub n_ml: usize,
    pub cfd_only_s: f64,
    pub hybrid_s: f64,
    pub psi: f64,
    pub t_avg_switch: f64,
    #[serde(rename = "L2_T")]
    pub l2_t: f64,
    #[serde(rename = "MSE_T")]
    pub mse_t: f64,
    #[serde(rename = "MAE_T")]
    pub mae_t: f64,
    #[serde(rename = "MaxAE_T")]
    pub maxae_t: f64,
    #[serde(rename = "L2_U")]
    pub l2_u: f64,
    #[serde(rename = "MSE_U")]
    pub mse_u: f64,
    #[serde(rename = "MAE_U")]
    pub mae_u: f64,
    #[serde(rename = "MaxAE_U")]
    pub maxae_u: f64,
    pub aborted: Option<String>,
}

/// Shared inputs of a sweep. `model` must already be fitted on the initial
/// solver phase of `base`; every combination starts from a copy of it.
pub struct SweepSetup<'a> {
    pub grid: &'a StructuredGrid,
    pub params: &'a PhysicsParams,
    pub base: &'a HybridConfig,
    pub model: &'a SurrogateModel,
    pub truth: &'a GroundTruth,
}

/// Runs one hybrid simulation per `(tl_epochs, threshold)` pair.
pub fn benchmark_sweep(setup: &SweepSetup, combos: &[(usize, f64)]) -> Result<Vec<SweepRow>> {
    let n = setup.base.total_steps;
    if setup.truth.steps < n {
        return Err(Error::MissingGroundTruth(format!(
            "{} solver steps recorded, {} needed",
            setup.truth.steps, n
        )));
    }
    let mut rows = Vec::with_capacity(combos.len());
    for &(epochs, threshold) in combos {
        let mut config = setup.base.clone();
        config.tl_epochs = epochs;
        config.residual_threshold = threshold;
        let mut model = setup.model.clone();
        let mut solver = CfdSolver::new(setup.grid, setup.params)?;
        let mut obs = ErrorObserver::new(setup.truth, setup.grid.ndim());
        let out = hybrid_run(&mut solver, &mut model, ModelStart::Trained, &config, &mut obs)?;
        let l = &out.ledger;
        let t = obs.series.time_average(0);
        let u = obs.series.time_average(1);
        rows.push(SweepRow {
            epochs,
            res: threshold,
            t_cfd: l.t_cfd(),
            t_ml: l.t_ml(),
            t_up: l.t_up(),
            n_switch: l.n_switch,
            n_cfd: l.n_cfd,
            n_ml: l.n_ml,
            cfd_only_s: setup.truth.solver_seconds(n),
            hybrid_s: l.wall_time.as_secs_f64(),
            psi: l.speedup(n),
            t_avg_switch: l.mean_steps_per_switch(),
            l2_t: t.rel_l2,
            mse_t: t.mse,
            mae_t: t.mae,
            maxae_t: t.maxae,
            l2_u: u.rel_l2,
            mse_u: u.mse,
            mae_u: u.mae,
            maxae_u: u.maxae,
            aborted: out.aborted,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
