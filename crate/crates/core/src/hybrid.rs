//! Alternating surrogate rollouts and solver corrections.
//!
//! A run starts with a solver phase and an initial fit. Afterwards the
//! surrogate advances the state until its relative mass residual breaches the
//! threshold, the handoff state is made consistent (density from the frozen
//! pressure, flux projected onto a divergence-free field), the solver runs a
//! short burst and the surrogate is fine-tuned on the tail of that burst.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fv::{divergence, face_flux, face_gradient_flux, gradient, Laplacian};
use crate::mesh::{BoundarySpec, FaceFlux, FieldState};
use crate::pcg::{pcg_solve, PcgSettings, Preconditioner};
use crate::solver::{compute_mass_residual, mean_square, CfdSolver, GasConstants, MassResidual};
use crate::surrogate::{train, SurrogateModel, TrainReport, TrainSettings};

/// Residual references at or below this value are replaced by it.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Residual of the state ending the initial solver phase, kept for the run.
    FixedAtFirstHandoff,
    /// Residual of the last solver state before each rollout.
    PerRollout,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_at_first_handoff" => Ok(ReferenceMode::FixedAtFirstHandoff),
            "per_rollout" => Ok(ReferenceMode::PerRollout),
            other => Err(Error::invalid("reference_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub residual_threshold: f64,
    pub tl_epochs: usize,
    pub burst_len: usize,
    pub tl_buffer: usize,
    pub total_steps: usize,
    pub reference_mode: ReferenceMode,
    /// Length of the solver phase before the first fit.
    pub initial_steps: usize,
    pub initial_epochs: usize,
    /// Trailing snapshots of the initial phase used for the first fit.
    pub initial_window: usize,
    pub flux_correction: bool,
}

impl HybridConfig {
    pub fn new(residual_threshold: f64, tl_epochs: usize, total_steps: usize) -> Self {
        Self {
            residual_threshold,
            tl_epochs,
            burst_len: 10,
            tl_buffer: 3,
            total_steps,
            reference_mode: ReferenceMode::FixedAtFirstHandoff,
            initial_steps: 10,
            initial_epochs: 100,
            initial_window: 10,
            flux_correction: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.residual_threshold > 1.0) {
            return Err(Error::invalid("residual_threshold", "must exceed 1"));
        }
        if self.tl_buffer < 2 {
            return Err(Error::invalid("tl_buffer", "needs at least two snapshots"));
        }
        if self.burst_len < self.tl_buffer {
            return Err(Error::invalid("burst_len", "must be at least tl_buffer"));
        }
        if self.total_steps < self.burst_len {
            return Err(Error::invalid("total_steps", "must be at least burst_len"));
        }
        if self.initial_steps < self.burst_len || self.initial_steps > self.total_steps {
            return Err(Error::invalid("initial_steps", "must lie in [burst_len, total_steps]"));
        }
        if self.initial_window < 2 || self.initial_window > self.initial_steps {
            return Err(Error::invalid("initial_window", "must lie in [2, initial_steps]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeResidual {
    pub value: f64,
    /// The reference was at or below [`RESIDUAL_FLOOR`].
    pub degenerate: bool,
}

pub fn relative_residual(current: MassResidual, reference: MassResidual) -> RelativeResidual {
    let degenerate = !(reference.value > RESIDUAL_FLOOR);
    let denom = if degenerate { RESIDUAL_FLOOR } else { reference.value };
    RelativeResidual {
        value: current.value / denom,
        degenerate,
    }
}

/// Ideal-gas density from an absolute pressure field and the state's temperature.
pub fn density_from_state(state: &FieldState, p_abs: &[f64], gas: &GasConstants) -> Result<Vec<f64>> {
    if p_abs.len() != state.t.len() {
        return Err(Error::Shape(format!(
            "{} pressures for {} cells",
            p_abs.len(),
            state.t.len()
        )));
    }
    state
        .t
        .iter()
        .zip(p_abs)
        .map(|(&t, &p)| {
            if t > 0.0 {
                Ok(gas.density(p, t))
            } else {
                Err(Error::NonPositiveTemperature(t))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxCorrection {
    /// Mean-square divergence of the interpolated flux before projection.
    pub before: f64,
    pub after: f64,
    pub iterations: usize,
    /// The solve failed and the state was handed over uncorrected.
    pub fallback: bool,
}

impl FluxCorrection {
    pub fn reduction(&self) -> f64 {
        if self.after > 0.0 {
            self.before / self.after
        } else {
            f64::INFINITY
        }
    }
}

/// Projects the face flux of `state` onto the divergence-free space and
/// applies the matching cell correction to the velocity.
pub fn flux_correct(state: &mut FieldState, velocity_bc: &[BoundarySpec]) -> FluxCorrection {
    let grid = state.grid.clone();
    let phi = face_flux(&grid, &state.u, None, velocity_bc);
    let div = divergence(&grid, &phi);
    let before = mean_square(&div);
    let settings = PcgSettings::new(1e-10, 5000, Preconditioner::IncompleteCholesky).expect("static settings");
    let sol = match pcg_solve(&Laplacian::neumann(&grid), &div, &settings, None) {
        Ok(sol) if sol.converged => sol,
        Ok(sol) => {
            state.phi = phi;
            return FluxCorrection {
                before,
                after: before,
                iterations: sol.iterations,
                fallback: true,
            };
        }
        Err(_) => {
            state.phi = phi;
            return FluxCorrection {
                before,
                after: before,
                iterations: 0,
                fallback: true,
            };
        }
    };
    let corr = face_gradient_flux(&grid, &sol.x);
    state.phi = FaceFlux {
        axes: phi
            .axes
            .iter()
            .zip(&corr.axes)
            .map(|(f, c)| f.iter().zip(c).map(|(f, c)| f - c).collect())
            .collect(),
    };
    let pressure_bc = BoundarySpec::all_neumann(grid.ndim());
    for (u, g) in state.u.iter_mut().zip(gradient(&grid, &sol.x, &pressure_bc)) {
        for (u, g) in u.iter_mut().zip(g) {
            *u -= g;
        }
    }
    FluxCorrection {
        before,
        after: mean_square(&divergence(&grid, &state.phi)),
        iterations: sol.iterations,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSource {
    Cfd,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutEnd {
    Threshold,
    /// Forced switch after a non-finite prediction.
    NonFinite,
    /// The run's step budget was used up.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Step index of the state the rollout started from.
    pub start_step: u64,
    pub length: usize,
    pub end: RolloutEnd,
    pub degenerate_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: u64,
    pub source: StepSource,
    pub r_rel: f64,
}

/// Counts and timing buckets of a hybrid run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HybridLedger {
    pub n_cfd: usize,
    pub n_ml: usize,
    pub n_switch: usize,
    pub n_tl: usize,
    pub cfd_time: Duration,
    /// Includes discarded breaching predictions and handoff preparation.
    pub ml_time: Duration,
    pub up_time: Duration,
    /// Initial fit (or adaptation of a supplied model); outside the buckets.
    pub initial_training_time: Duration,
    /// Loop wall time, excluding observers and the initial fit.
    pub wall_time: Duration,
    pub rollouts: Vec<RolloutRecord>,
    pub flux_corrections: Vec<FluxCorrection>,
    pub residual_trace: Vec<TraceEntry>,
    pub train_reports: Vec<TrainReport>,
    pub reference: Option<MassResidual>,
}

fn mean_secs(total: Duration, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total.as_secs_f64() / n as f64
    }
}

impl HybridLedger {
    pub fn completed_steps(&self) -> usize {
        self.n_cfd + self.n_ml
    }

    pub fn t_cfd(&self) -> f64 {
        mean_secs(self.cfd_time, self.n_cfd)
    }

    pub fn t_ml(&self) -> f64 {
        mean_secs(self.ml_time, self.n_ml)
    }

    pub fn t_up(&self) -> f64 {
        mean_secs(self.up_time, self.n_tl)
    }

    /// ML steps of every rollout that ended in a handoff.
    pub fn rollout_lengths(&self) -> Vec<usize> {
        self.rollouts
            .iter()
            .filter(|r| r.end != RolloutEnd::Budget)
            .map(|r| r.length)
            .collect()
    }

    /// Mean of `rollout_lengths`. A rollout cut short by the step budget
    /// ends in no switch and is left out. Without any switch, all of `n_ml`.
    pub fn mean_steps_per_switch(&self) -> f64 {
        let lengths = self.rollout_lengths();
        if lengths.is_empty() {
            self.n_ml as f64
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        }
    }

    /// `n_cfd·t_cfd + n_ml·t_ml + n_switch·t_up` in seconds.
    pub fn bucket_seconds(&self) -> f64 {
        self.n_cfd as f64 * self.t_cfd() + self.n_ml as f64 * self.t_ml() + self.n_switch as f64 * self.t_up()
    }

    pub fn max_accepted_ml_residual(&self) -> f64 {
        self.residual_trace
            .iter()
            .filter(|e| e.source == StepSource::Ml)
            .fold(0.0, |m, e| m.max(e.r_rel))
    }
}

/// `N·t_cfd / (n_cfd·t_cfd + n_ml·t_ml + n_switch·t_up)`.
#[allow(clippy::too_many_arguments)]
pub fn speedup_psi(
    total_steps: usize,
    n_cfd: usize,
    n_ml: usize,
    n_switch: usize,
    t_cfd: f64,
    t_ml: f64,
    t_up: f64,
) -> f64 {
    total_steps as f64 * t_cfd / (n_cfd as f64 * t_cfd + n_ml as f64 * t_ml + n_switch as f64 * t_up)
}

impl HybridLedger {
    pub fn speedup(&self, total_steps: usize) -> f64 {
        speedup_psi(
            total_steps,
            self.n_cfd,
            self.n_ml,
            self.n_switch,
            self.t_cfd(),
            self.t_ml(),
            self.t_up(),
        )
    }
}

/// Receives every accepted state. Time spent here is excluded from the ledger.
pub trait Observer {
    fn on_step(&mut self, _state: &FieldState, _source: StepSource) -> Result<()> {
        Ok(())
    }

    fn on_model_update(&mut self, _model: &SurrogateModel, _report: &TrainReport) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

struct Watched<'a> {
    inner: &'a mut dyn Observer,
    spent: Duration,
}

impl Watched<'_> {
    fn step(&mut self, state: &FieldState, source: StepSource) -> Result<()> {
        let start = Instant::now();
        let r = self.inner.on_step(state, source);
        self.spent += start.elapsed();
        r
    }

    fn model(&mut self, model: &SurrogateModel, report: &TrainReport) -> Result<()> {
        let start = Instant::now();
        let r = self.inner.on_model_update(model, report);
        self.spent += start.elapsed();
        r
    }
}

/// Result of a single surrogate rollout.
pub struct Rollout {
    /// Last accepted state; the start state if nothing was accepted.
    pub state: FieldState,
    pub record: RolloutRecord,
    /// Accepted residuals in step order.
    pub residuals: Vec<f64>,
    pub elapsed: Duration,
}

/// Advances with the surrogate until the relative residual exceeds the
/// threshold, a prediction is non-finite, or `budget` steps were accepted.
/// The breaching prediction is discarded.
pub fn ml_rollout(
    model: &SurrogateModel,
    solver: &CfdSolver,
    start: &FieldState,
    threshold: f64,
    reference: MassResidual,
    budget: usize,
    mut on_accept: impl FnMut(&FieldState) -> Result<()>,
) -> Result<Rollout> {
    let rel = |s: &FieldState| relative_residual(compute_mass_residual(s), reference);
    let degenerate = rel(start).degenerate;
    let bcs = solver.boundaries();
    let dt = solver.params().dt;
    let mut current = start.clone();
    let mut residuals = Vec::new();
    let mut elapsed = Duration::ZERO;
    let mut end = RolloutEnd::Budget;
    while residuals.len() < budget {
        let clock = Instant::now();
        let next = match model.predict_next_state(&current, bcs, dt) {
            Ok(next) => Some(next),
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        let r = next.as_ref().map(|s| rel(s).value);
        elapsed += clock.elapsed();
        match (next, r) {
            (Some(next), Some(r)) if r <= threshold => {
                residuals.push(r);
                on_accept(&next)?;
                current = next;
            }
            (Some(_), _) => {
                end = RolloutEnd::Threshold;
                break;
            }
            _ => {
                end = RolloutEnd::NonFinite;
                break;
            }
        }
    }
    Ok(Rollout {
        state: current,
        record: RolloutRecord {
            start_step: start.step,
            length: residuals.len(),
            end,
            degenerate_reference: degenerate,
        },
        residuals,
        elapsed,
    })
}

/// Fine-tunes `model` on the last `tl_buffer` snapshots with the first layer
/// frozen. Returns the report and the time spent.
pub fn transfer_learn_cycle(
    model: &mut SurrogateModel,
    burst: &[FieldState],
    solver: &CfdSolver,
    config: &HybridConfig,
) -> Result<(TrainReport, Duration)> {
    if burst.len() < 2 {
        return Err(Error::TooFewSnapshots(burst.len()));
    }
    let buffer = &burst[burst.len().saturating_sub(config.tl_buffer)..];
    let start = Instant::now();
    let report = train(
        model,
        buffer,
        solver.boundaries(),
        &TrainSettings::new(config.tl_epochs, true),
    )?;
    Ok((report, start.elapsed()))
}

/// How the surrogate enters the run.
pub enum ModelStart {
    /// Fit from scratch on the initial solver phase.
    Fresh,
    /// Use a trained model; only transfer learning adapts it.
    Pretrained,
    /// Use a model already fitted on this case's initial phase as is.
    Trained,
}

pub struct HybridOutcome {
    pub ledger: HybridLedger,
    pub final_state: FieldState,
    /// Reason the run stopped early; the ledger covers the completed steps.
    pub aborted: Option<String>,
}

/// Runs the full alternating loop from the solver's initial state.
pub fn hybrid_run(
    solver: &mut CfdSolver,
    model: &mut SurrogateModel,
    start: ModelStart,
    config: &HybridConfig,
    observer: &mut dyn Observer,
) -> Result<HybridOutcome> {
    config.validate()?;
    let mut ledger = HybridLedger::default();
    let mut obs = Watched {
        inner: observer,
        spent: Duration::ZERO,
    };
    let mut state = solver.initial_state();
    let begin = Instant::now();
    let result = run_loop(solver, model, start, config, &mut obs, &mut ledger, &mut state);
    ledger.wall_time = begin
        .elapsed()
        .saturating_sub(obs.spent)
        .saturating_sub(ledger.initial_training_time);
    Ok(HybridOutcome {
        ledger,
        final_state: state,
        aborted: result.err().map(|e| e.to_string()),
    })
}

/// Runs only the initial solver phase and the first fit of `config`, leaving
/// `model` ready for [`ModelStart::Trained`] runs of the same case.
pub fn initial_fit(solver: &mut CfdSolver, model: &mut SurrogateModel, config: &HybridConfig) -> Result<HybridOutcome> {
    let mut only = config.clone();
    only.total_steps = config.initial_steps;
    let out = hybrid_run(solver, model, ModelStart::Fresh, &only, &mut NoObserver)?;
    match &out.aborted {
        Some(reason) => Err(Error::invalid(
            "initial_steps",
            format!("initial phase failed: {reason}"),
        )),
        None => Ok(out),
    }
}

/// Solver steps with per-step timing; returns the visited states.
fn cfd_phase(
    solver: &mut CfdSolver,
    state: &mut FieldState,
    steps: usize,
    obs: &mut Watched,
    ledger: &mut HybridLedger,
) -> Result<Vec<FieldState>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state.clone());
    for _ in 0..steps {
        let clock = Instant::now();
        let next = solver.step(state)?;
        ledger.cfd_time += clock.elapsed();
        ledger.n_cfd += 1;
        obs.step(&next, StepSource::Cfd)?;
        *state = next;
        out.push(state.clone());
    }
    Ok(out)
}

fn run_loop(
    solver: &mut CfdSolver,
    model: &mut SurrogateModel,
    start: ModelStart,
    config: &HybridConfig,
    obs: &mut Watched,
    ledger: &mut HybridLedger,
    state: &mut FieldState,
) -> Result<()> {
    let initial = cfd_phase(solver, state, config.initial_steps, obs, ledger)?;
    let clock = Instant::now();
    let report = match start {
        ModelStart::Fresh => {
            let window = &initial[initial.len() - config.initial_window..];
            model.stats = None;
            train(
                model,
                window,
                solver.boundaries(),
                &TrainSettings::new(config.initial_epochs, false),
            )?
        }
        ModelStart::Pretrained => {
            if model.stats.is_none() {
                return Err(Error::invalid(
                    "model",
                    "pretrained model lacks normalization statistics",
                ));
            }
            transfer_learn_cycle(model, &initial, solver, config)?.0
        }
        ModelStart::Trained => {
            if model.stats.is_none() {
                return Err(Error::invalid("model", "model lacks normalization statistics"));
            }
            TrainReport::untrained()
        }
    };
    ledger.initial_training_time = clock.elapsed();
    obs.model(model, &report)?;
    ledger.train_reports.push(report);
    drop(initial);

    let fixed = compute_mass_residual(state);
    ledger.reference = Some(fixed);
    while ledger.completed_steps() < config.total_steps {
        let reference = match config.reference_mode {
            ReferenceMode::FixedAtFirstHandoff => fixed,
            ReferenceMode::PerRollout => compute_mass_residual(state),
        };
        let budget = config.total_steps - ledger.completed_steps();
        let mut accepted = Vec::new();
        let rollout = ml_rollout(
            model,
            solver,
            state,
            config.residual_threshold,
            reference,
            budget,
            |s| {
                accepted.push(s.step);
                obs.step(s, StepSource::Ml)
            },
        )?;
        ledger.ml_time += rollout.elapsed;
        ledger.n_ml += rollout.record.length;
        for (step, r) in accepted.into_iter().zip(&rollout.residuals) {
            ledger.residual_trace.push(TraceEntry {
                step,
                source: StepSource::Ml,
                r_rel: *r,
            });
        }
        let end = rollout.record.end;
        ledger.rollouts.push(rollout.record);
        // pressure is carried through the rollout from the last solver state
        *state = rollout.state;
        if end == RolloutEnd::Budget {
            break;
        }
        ledger.n_switch += 1;

        let clock = Instant::now();
        let gas = solver.gas();
        let p_abs: Vec<f64> = state
            .p
            .iter()
            .map(|&p| gas.absolute_pressure(p, solver.rho_ref()))
            .collect();
        state.rho = density_from_state(state, &p_abs, gas)?;
        if config.flux_correction {
            let fc = flux_correct(state, &solver.boundaries().velocity);
            ledger.flux_corrections.push(fc);
        }
        ledger.ml_time += clock.elapsed();

        let remaining = config.total_steps - ledger.completed_steps();
        let burst = cfd_phase(solver, state, config.burst_len.min(remaining), obs, ledger)?;
        for s in &burst[1..] {
            ledger.residual_trace.push(TraceEntry {
                step: s.step,
                source: StepSource::Cfd,
                r_rel: relative_residual(compute_mass_residual(s), reference).value,
            });
        }
        let solver_states = &burst[1..];
        if solver_states.len() >= 2 {
            let (report, spent) = transfer_learn_cycle(model, solver_states, solver, config)?;
            ledger.up_time += spent;
            ledger.n_tl += 1;
            obs.model(model, &report)?;
            ledger.train_reports.push(report);
        }
    }
    Ok(())
}
