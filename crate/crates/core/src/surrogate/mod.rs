//! Finite-volume-stencil surrogates.
//!
//! One independent subnetwork per transported variable maps the normalized
//! stencil of a cell to the normalized one-step change of that variable.

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod dft;
pub mod features;
pub mod layers;
pub mod spectral;
pub mod train;

use ndarray::{Array1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fv::face_flux;
use crate::mesh::{CavityBoundaries, FieldState};
use dense::{DenseNet, DenseTape};
pub use features::{build_stencil_features, NormStats};
use layers::{BnStats, Tensor};
use spectral::{SpectralNet, SpectralTape};
pub use train::{loss_and_grads, train, TrainReport, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Spectral,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dense => "fvmn",
            ModelKind::Spectral => "fvfno",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fvmn" | "dense" => Ok(ModelKind::Dense),
            "fvfno" | "spectral" => Ok(ModelKind::Spectral),
            other => Err(Error::invalid("kind", format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture of every subnetwork of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub width: usize,
    /// Hidden layers (dense) or Fourier layers (spectral).
    pub layers: usize,
    /// Retained Fourier modes; ignored by dense nets.
    pub modes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn dense() -> Self {
        Self {
            kind: ModelKind::Dense,
            width: 398,
            layers: 3,
            modes: 0,
            dropout: 0.2,
        }
    }

    pub fn spectral() -> Self {
        Self {
            kind: ModelKind::Spectral,
            width: 64,
            layers: 3,
            modes: 12,
            dropout: 0.2,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("hidden_width", "must be positive"));
        }
        if self.kind == ModelKind::Spectral && (self.modes == 0 || self.layers == 0) {
            return Err(Error::invalid(
                "modes",
                "spectral nets need at least one layer and one mode",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubNetwork {
    Dense(DenseNet),
    Spectral(SpectralNet),
}

pub enum Tape {
    Dense(DenseTape),
    Spectral(SpectralTape),
}

impl SubNetwork {
    pub fn new(config: &ModelConfig, input_len: usize, rng: &mut ChaCha8Rng) -> Self {
        match config.kind {
            ModelKind::Dense => SubNetwork::Dense(DenseNet::new(
                input_len,
                config.width,
                config.layers,
                config.dropout,
                rng,
            )),
            ModelKind::Spectral => SubNetwork::Spectral(SpectralNet::new(
                input_len,
                config.width,
                config.layers,
                config.modes,
                config.dropout,
                rng,
            )),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        match self {
            SubNetwork::Dense(n) => &n.params,
            SubNetwork::Spectral(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        match self {
            SubNetwork::Dense(n) => &mut n.params,
            SubNetwork::Spectral(n) => &mut n.params,
        }
    }

    pub fn bn(&self) -> &[BnStats] {
        match self {
            SubNetwork::Dense(n) => &n.bn,
            SubNetwork::Spectral(n) => &n.bn,
        }
    }

    pub fn bn_mut(&mut self) -> &mut [BnStats] {
        match self {
            SubNetwork::Dense(n) => &mut n.bn,
            SubNetwork::Spectral(n) => &mut n.bn,
        }
    }

    /// Tensors making up the first layer: the input linear map of a dense
    /// net, the lifting map of a spectral net.
    pub fn first_layer_tensors(&self) -> usize {
        match self {
            SubNetwork::Dense(_) => 1,
            SubNetwork::Spectral(_) => 2,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            SubNetwork::Dense(n) => n.input_len,
            SubNetwork::Spectral(n) => n.input_len,
        }
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array1<f64> {
        match self {
            SubNetwork::Dense(n) => n.forward_eval(x),
            SubNetwork::Spectral(n) => n.forward_eval(x),
        }
    }

    pub fn forward_train(&self, x: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> (Array1<f64>, Tape) {
        match self {
            SubNetwork::Dense(n) => {
                let (y, t) = n.forward_train(x, rng);
                (y, Tape::Dense(t))
            }
            SubNetwork::Spectral(n) => {
                let (y, t) = n.forward_train(x, rng);
                (y, Tape::Spectral(t))
            }
        }
    }

    pub fn backward(&self, tape: &Tape, dout: &Array1<f64>) -> Vec<Vec<f64>> {
        match (self, tape) {
            (SubNetwork::Dense(n), Tape::Dense(t)) => n.backward(t, dout),
            (SubNetwork::Spectral(n), Tape::Spectral(t)) => n.backward(t, dout),
            _ => panic!("tape recorded by a different network kind"),
        }
    }

    pub fn update_running(&mut self, tape: &Tape) {
        match (self, tape) {
            (SubNetwork::Dense(n), Tape::Dense(t)) => n.update_running(t),
            (SubNetwork::Spectral(n), Tape::Spectral(t)) => n.update_running(t),
            _ => panic!("tape recorded by a different network kind"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }
}

/// A set of per-variable subnetworks with their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub config: ModelConfig,
    pub ndim: usize,
    pub nets: Vec<SubNetwork>,
    /// Fitted on the first training call and reused afterwards.
    pub stats: Option<NormStats>,
    rng: ChaCha8Rng,
}

impl SurrogateModel {
    pub fn new(config: ModelConfig, ndim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(2..=3).contains(&ndim) {
            return Err(Error::invalid("ndim", "only 2D and 3D cavities are supported"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_len = features::feature_len(ndim);
        let nets = (0..features::variable_count(ndim))
            .map(|_| SubNetwork::new(&config, input_len, &mut rng))
            .collect();
        Ok(Self {
            config,
            ndim,
            nets,
            stats: None,
            rng,
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(SubNetwork::param_count).sum()
    }

    fn stats(&self) -> Result<&NormStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::invalid("model", "not trained: normalization statistics missing"))
    }

    /// Normalized derivative predictions, one array per variable.
    pub fn predict_derivatives(&self, features: ArrayView2<f64>) -> Vec<Array1<f64>> {
        self.nets.iter().map(|n| n.forward_eval(features)).collect()
    }

    /// Adds the predicted one-step change to every transported variable and
    /// interpolates the face flux from the new velocity. Pressure and density
    /// are carried over unchanged.
    pub fn predict_next_state(&self, state: &FieldState, bcs: &CavityBoundaries, dt: f64) -> Result<FieldState> {
        if state.grid.ndim() != self.ndim {
            return Err(Error::Shape(format!(
                "model is {}D, state is {}D",
                self.ndim,
                state.grid.ndim()
            )));
        }
        let stats = self.stats()?;
        let x = build_stencil_features(state, bcs, stats)?;
        let d = self.predict_derivatives(x.view());
        let mut next = state.clone();
        for (v, field) in features::variables_mut(&mut next).into_iter().enumerate() {
            let scale = stats.deriv_scale[v];
            for (z, dz) in field.iter_mut().zip(d[v].iter()) {
                *z += dz * scale;
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "surrogate prediction at t = {}",
                state.time + dt
            )));
        }
        next.phi = face_flux(&next.grid, &next.u, None, &bcs.velocity);
        next.time = state.time + dt;
        next.step = state.step + 1;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::StructuredGrid;

    #[test]
    fn zero_output_model_holds_state() {
        let mut model = SurrogateModel::new(ModelConfig::dense().with_width(8), 2, 1).unwrap();
        for net in &mut model.nets {
            let params = net.params_mut();
            let n = params.len();
            params[n - 2].data.fill(0.0);
            params[n - 1].data.fill(0.0);
        }
        let g = StructuredGrid::new(&[5, 5], &[1.0, 1.0]).unwrap();
        let bcs = CavityBoundaries::new(2, 310.0, 290.0);
        let mut state = FieldState::quiescent(&g, 300.0, 1.0);
        state.u[0][3] = 0.01;
        model.stats = Some(NormStats::fit(std::slice::from_ref(&state), &bcs).unwrap());
        let next = model.predict_next_state(&state, &bcs, 0.25).unwrap();
        assert_eq!(next.u, state.u);
        assert_eq!(next.t, state.t);
        assert_eq!(next.p, state.p);
        assert_eq!(next.time, 0.25);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn untrained_model_refuses_to_predict() {
        let model = SurrogateModel::new(ModelConfig::spectral().with_width(4), 2, 1).unwrap();
        let g = StructuredGrid::new(&[4, 4], &[1.0, 1.0]).unwrap();
        let state = FieldState::quiescent(&g, 300.0, 1.0);
        let bcs = CavityBoundaries::new(2, 310.0, 290.0);
        assert!(model.predict_next_state(&state, &bcs, 1.0).is_err());
    }

    #[test]
    fn one_subnetwork_per_variable() {
        let m2 = SurrogateModel::new(ModelConfig::dense().with_width(4), 2, 0).unwrap();
        let m3 = SurrogateModel::new(ModelConfig::spectral().with_width(4), 3, 0).unwrap();
        assert_eq!(m2.nets.len(), 3);
        assert_eq!(m3.nets.len(), 4);
        assert_eq!(m3.nets[0].input_len(), 28);
        assert_eq!("FVFNO".parse::<ModelKind>().unwrap(), ModelKind::Spectral);
    }
}
