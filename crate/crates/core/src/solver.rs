//! Transient Boussinesq natural-convection solver.
//!
//! Explicit upwind/central advection-diffusion for velocity and temperature
//! followed by a pressure projection on the face fluxes. The incoming face
//! flux convects both momentum and temperature, so a state whose flux is
//! inconsistent with its cell velocity perturbs the first step after it.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fv::{divergence, face_flux, face_gradient_flux, gradient, laplacian_apply, upwind_convect, Laplacian};
use crate::mesh::{BoundarySpec, CavityBoundaries, FaceFlux, FieldState, StructuredGrid};
use crate::pcg::{pcg_solve, PcgSettings, Preconditioner};

/// Largest admissible `max|u|·dt/h`.
pub const CFL_LIMIT: f64 = 0.5;

/// Ideal-gas constants for reconstructing density from pressure and temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasConstants {
    /// Molar mass of air (kg/mol).
    pub molar_mass: f64,
    /// Universal gas constant (J/(mol·K)).
    pub gas_constant: f64,
    /// Ambient absolute pressure the kinematic pressure is measured from (Pa).
    pub ambient_pressure: f64,
}

impl Default for GasConstants {
    fn default() -> Self {
        Self {
            molar_mass: 0.02896,
            gas_constant: 8.314,
            ambient_pressure: 101_325.0,
        }
    }
}

impl GasConstants {
    pub fn density(&self, p_abs: f64, temperature: f64) -> f64 {
        p_abs * self.molar_mass / (self.gas_constant * temperature)
    }

    /// Absolute pressure (Pa) from kinematic pressure (m²/s²).
    pub fn absolute_pressure(&self, p_kinematic: f64, rho_ref: f64) -> f64 {
        self.ambient_pressure + rho_ref * p_kinematic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsParams {
    /// Kinematic viscosity (m²/s).
    pub nu: f64,
    /// Thermal diffusivity (m²/s).
    pub alpha: f64,
    /// Thermal expansion coefficient (1/K).
    pub beta: f64,
    /// Gravitational acceleration vector (m/s²), pointing along −y.
    pub gravity: Vec<f64>,
    pub t_ref: f64,
    pub t_hot: f64,
    pub t_cold: f64,
    /// Time step (s).
    pub dt: f64,
    /// Height used in the Rayleigh number (m).
    pub length: f64,
}

impl PhysicsParams {
    /// Cavity parameters with `beta` chosen so that the Rayleigh number on
    /// `length` equals `rayleigh`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_rayleigh(
        ndim: usize,
        rayleigh: f64,
        prandtl: f64,
        nu: f64,
        g: f64,
        t_hot: f64,
        t_cold: f64,
        length: f64,
        dt: f64,
    ) -> Result<Self> {
        let alpha = nu / prandtl;
        let beta = rayleigh * nu * alpha / (g * (t_hot - t_cold) * length.powi(3));
        Self::new(ndim, nu, alpha, beta, g, t_hot, t_cold, length, dt)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ndim: usize,
        nu: f64,
        alpha: f64,
        beta: f64,
        g: f64,
        t_hot: f64,
        t_cold: f64,
        length: f64,
        dt: f64,
    ) -> Result<Self> {
        let mut gravity = vec![0.0; ndim];
        gravity[1] = -g;
        let p = Self {
            nu,
            alpha,
            beta,
            gravity,
            t_ref: 0.5 * (t_hot + t_cold),
            t_hot,
            t_cold,
            dt,
            length,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nu", self.nu),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("dt", self.dt),
            ("length", self.length),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.t_hot > self.t_cold) {
            return Err(Error::invalid("t_hot", "hot wall must be warmer than the cold wall"));
        }
        if !(self.rayleigh() > 0.0) {
            return Err(Error::invalid("rayleigh", "must be positive"));
        }
        Ok(())
    }

    pub fn g(&self) -> f64 {
        self.gravity.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn rayleigh(&self) -> f64 {
        self.g() * self.beta * (self.t_hot - self.t_cold) * self.length.powi(3) / (self.nu * self.alpha)
    }

    pub fn prandtl(&self) -> f64 {
        self.nu / self.alpha
    }
}

/// Mean squared cell divergence of the face-interpolated velocity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MassResidual {
    pub value: f64,
}

/// `Σ (∇·u)² / N` with the divergence taken from unit-density face fluxes of
/// the cell velocity and no-slip walls.
pub fn compute_mass_residual(state: &FieldState) -> MassResidual {
    let bc = vec![BoundarySpec::no_slip(state.grid.ndim()); state.grid.ndim()];
    let phi = face_flux(&state.grid, &state.u, None, &bc);
    MassResidual {
        value: mean_square(&divergence(&state.grid, &phi)),
    }
}

pub(crate) fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Diagnostics of one solver step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub pcg_iterations: usize,
    pub divergence_before: f64,
    pub divergence_after: f64,
}

/// A solver session for one case. Owns the pressure warm start.
#[derive(Debug, Clone)]
pub struct CfdSolver {
    grid: StructuredGrid,
    params: PhysicsParams,
    bcs: CavityBoundaries,
    pressure_op: Laplacian,
    pcg: PcgSettings,
    gas: GasConstants,
    rho_ref: f64,
    last_report: Option<StepReport>,
}

impl CfdSolver {
    pub fn new(grid: &StructuredGrid, params: &PhysicsParams) -> Result<Self> {
        params.validate()?;
        if params.gravity.len() != grid.ndim() {
            return Err(Error::Shape("gravity rank differs from grid".into()));
        }
        let gas = GasConstants::default();
        Ok(Self {
            grid: grid.clone(),
            params: params.clone(),
            bcs: CavityBoundaries::new(grid.ndim(), params.t_hot, params.t_cold),
            pressure_op: Laplacian::neumann(grid),
            pcg: PcgSettings::new(1e-8, 5000, Preconditioner::IncompleteCholesky)?,
            rho_ref: gas.density(gas.ambient_pressure, params.t_ref),
            gas,
            last_report: None,
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn params(&self) -> &PhysicsParams {
        &self.params
    }

    pub fn boundaries(&self) -> &CavityBoundaries {
        &self.bcs
    }

    pub fn gas(&self) -> &GasConstants {
        &self.gas
    }

    /// Density of the reference state used to convert kinematic pressure.
    pub fn rho_ref(&self) -> f64 {
        self.rho_ref
    }

    pub fn last_report(&self) -> Option<StepReport> {
        self.last_report
    }

    /// Fluid at rest at the reference temperature.
    pub fn initial_state(&self) -> FieldState {
        FieldState::quiescent(&self.grid, self.params.t_ref, self.rho_ref)
    }

    pub fn cfl(&self, state: &FieldState) -> f64 {
        let dt = self.params.dt;
        state
            .u
            .iter()
            .zip(self.grid.spacing())
            .map(|(comp, h)| comp.iter().fold(0.0f64, |m, v| m.max(v.abs())) * dt / h)
            .fold(0.0, f64::max)
    }

    /// Advances `state` by one time step.
    pub fn step(&mut self, state: &FieldState) -> Result<FieldState> {
        state.validate()?;
        if state.grid != self.grid {
            return Err(Error::Shape("state grid differs from solver grid".into()));
        }
        let cfl = self.cfl(state);
        if !(cfl <= CFL_LIMIT) {
            return Err(Error::Cfl {
                cfl,
                limit: CFL_LIMIT,
                time: state.time,
            });
        }
        let grid = &self.grid;
        let p = &self.params;
        let dt = p.dt;
        let ndim = grid.ndim();

        // momentum predictor with the incoming flux
        let mut u_star = Vec::with_capacity(ndim);
        for a in 0..ndim {
            let bc = &self.bcs.velocity[a];
            let conv = upwind_convect(grid, &state.phi, &state.u[a], bc);
            let diff = laplacian_apply(grid, &state.u[a], p.nu, bc);
            let g = p.gravity[a];
            let comp: Vec<f64> = (0..grid.cell_count())
                .map(|c| {
                    let buoyancy = -g * p.beta * (state.t[c] - p.t_ref);
                    state.u[a][c] + dt * (-conv[c] + diff[c] + buoyancy)
                })
                .collect();
            u_star.push(comp);
        }

        // energy with the incoming flux
        let bc_t = &self.bcs.temperature;
        let conv = upwind_convect(grid, &state.phi, &state.t, bc_t);
        let diff = laplacian_apply(grid, &state.t, p.alpha, bc_t);
        let t_new: Vec<f64> = (0..grid.cell_count())
            .map(|c| state.t[c] + dt * (diff[c] - conv[c]))
            .collect();

        // projection
        let phi_star = face_flux(grid, &u_star, None, &self.bcs.velocity);
        let div_star = divergence(grid, &phi_star);
        let rhs: Vec<f64> = div_star.iter().map(|d| d / dt).collect();
        let sol = pcg_solve(&self.pressure_op, &rhs, &self.pcg, Some(&state.p))?;
        if !sol.converged {
            return Err(Error::PcgNotConverged {
                iterations: sol.iterations,
                residual: sol.residual,
            });
        }
        let pressure = sol.x;
        let corr = face_gradient_flux(grid, &pressure);
        let phi = FaceFlux {
            axes: phi_star
                .axes
                .iter()
                .zip(&corr.axes)
                .map(|(f, c)| f.iter().zip(c).map(|(f, c)| f - dt * c).collect())
                .collect(),
        };
        let grad_p = gradient(grid, &pressure, &self.bcs.pressure);
        let u_new: Vec<Vec<f64>> = u_star
            .iter()
            .zip(&grad_p)
            .map(|(us, gp)| us.iter().zip(gp).map(|(u, g)| u - dt * g).collect())
            .collect();

        let rho = pressure
            .iter()
            .zip(&t_new)
            .map(|(&pk, &t)| self.gas.density(self.gas.absolute_pressure(pk, self.rho_ref), t))
            .collect();

        let next = FieldState {
            grid: grid.clone(),
            u: u_new,
            t: t_new,
            p: pressure,
            rho,
            phi,
            time: state.time + dt,
            step: state.step + 1,
        };
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("solver state at t = {}", next.time)));
        }
        self.last_report = Some(StepReport {
            pcg_iterations: sol.iterations,
            divergence_before: mean_square(&div_star),
            divergence_after: mean_square(&divergence(grid, &next.phi)),
        });
        Ok(next)
    }

    /// Runs `n_steps` consecutive steps, returning every intermediate state and
    /// the wall-clock time spent stepping.
    pub fn run_burst(&mut self, state: &FieldState, n_steps: usize) -> Result<(Vec<FieldState>, Duration)> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "burst length must be at least 1"));
        }
        let mut out: Vec<FieldState> = Vec::with_capacity(n_steps);
        let mut elapsed = Duration::ZERO;
        for _ in 0..n_steps {
            let start = Instant::now();
            let next = self.step(out.last().unwrap_or(state))?;
            elapsed += start.elapsed();
            out.push(next);
        }
        Ok((out, elapsed))
    }
}
