//! Case files: TOML with `[case]`, `[grid]`, `[physics]`, `[hybrid]`,
//! `[model]` and `[run]` sections.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hybrid::{HybridConfig, ReferenceMode};
use crate::mesh::StructuredGrid;
use crate::solver::PhysicsParams;
use crate::surrogate::{ModelConfig, ModelKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub name: String,
    pub grid: StructuredGrid,
    pub physics: PhysicsParams,
    pub hybrid: HybridConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub snapshot_cadence: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    case: RawCase,
    grid: RawGrid,
    physics: RawPhysics,
    hybrid: RawHybrid,
    model: RawModel,
    #[serde(default)]
    run: RawRun,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    name: String,
    t_hot: f64,
    t_cold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    extents: Vec<usize>,
    lengths: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhysics {
    nu: f64,
    prandtl: f64,
    gravity: f64,
    dt: f64,
    /// Either `beta` or `rayleigh` must be given.
    beta: Option<f64>,
    rayleigh: Option<f64>,
    /// Temperature difference at which `rayleigh` is defined; defaults to
    /// this case's wall difference.
    rayleigh_delta_t: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHybrid {
    residual_threshold: f64,
    tl_epochs: usize,
    total_steps: usize,
    burst_len: Option<usize>,
    tl_buffer: Option<usize>,
    reference_mode: Option<String>,
    initial_steps: Option<usize>,
    initial_epochs: Option<usize>,
    initial_window: Option<usize>,
    flux_correction: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    width: Option<usize>,
    layers: Option<usize>,
    modes: Option<usize>,
    dropout: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    snapshot_cadence: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<CaseConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<CaseConfig> {
    let raw: RawFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let ndim = raw.grid.extents.len();
    if raw.grid.lengths.len() != ndim {
        return Err(Error::invalid("lengths", "needs one entry per extent"));
    }
    let grid = StructuredGrid::new(&raw.grid.extents, &raw.grid.lengths)?;
    if !(raw.case.t_hot > raw.case.t_cold) {
        return Err(Error::invalid("t_hot", "hot wall must be warmer than the cold wall"));
    }

    let ph = &raw.physics;
    // buoyancy acts along the second axis; the cavity height sets the Rayleigh length
    let height = raw.grid.lengths[1];
    let alpha = ph.nu / ph.prandtl;
    let beta = match (ph.beta, ph.rayleigh) {
        (Some(b), None) => b,
        (None, Some(ra)) => {
            let dt = ph.rayleigh_delta_t.unwrap_or(raw.case.t_hot - raw.case.t_cold);
            ra * ph.nu * alpha / (ph.gravity * dt * height.powi(3))
        }
        _ => return Err(Error::invalid("beta", "give exactly one of `beta` and `rayleigh`")),
    };
    let physics = PhysicsParams::new(
        ndim,
        ph.nu,
        alpha,
        beta,
        ph.gravity,
        raw.case.t_hot,
        raw.case.t_cold,
        height,
        ph.dt,
    )?;

    let h = &raw.hybrid;
    let mut hybrid = HybridConfig::new(h.residual_threshold, h.tl_epochs, h.total_steps);
    hybrid.burst_len = h.burst_len.unwrap_or(hybrid.burst_len);
    hybrid.tl_buffer = h.tl_buffer.unwrap_or(hybrid.tl_buffer);
    if let Some(mode) = &h.reference_mode {
        hybrid.reference_mode = mode.parse::<ReferenceMode>()?;
    }
    hybrid.initial_steps = h.initial_steps.unwrap_or(hybrid.burst_len);
    hybrid.initial_epochs = h.initial_epochs.unwrap_or(hybrid.initial_epochs);
    hybrid.initial_window = h.initial_window.unwrap_or(hybrid.burst_len.min(hybrid.initial_steps));
    hybrid.flux_correction = h.flux_correction.unwrap_or(true);
    hybrid.validate()?;

    let kind: ModelKind = raw.model.kind.parse()?;
    let base = match kind {
        ModelKind::Dense => ModelConfig::dense(),
        ModelKind::Spectral => ModelConfig::spectral(),
    };
    let model = ModelConfig {
        kind,
        width: raw.model.width.unwrap_or(base.width),
        layers: raw.model.layers.unwrap_or(base.layers),
        modes: raw.model.modes.unwrap_or(base.modes),
        dropout: raw.model.dropout.unwrap_or(base.dropout),
    };
    model.validate()?;

    let snapshot_cadence = raw.run.snapshot_cadence.unwrap_or(10);
    if snapshot_cadence == 0 {
        return Err(Error::invalid("snapshot_cadence", "must be positive"));
    }
    Ok(CaseConfig {
        output_dir: raw
            .run
            .output_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(&raw.case.name)),
        name: raw.case.name,
        grid,
        physics,
        hybrid,
        model,
        seed: raw.run.seed.unwrap_or(0),
        snapshot_cadence,
    })
}
