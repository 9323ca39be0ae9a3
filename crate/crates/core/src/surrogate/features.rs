//! Stencil features and normalization.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mesh::{pad_with_boundaries, BoundarySpec, CavityBoundaries, FieldState, PaddedField, StructuredGrid};

/// Stencil points per variable: the cell and its two neighbours on each axis.
pub fn stencil_size(ndim: usize) -> usize {
    2 * ndim + 1
}

/// Velocity components followed by temperature.
pub fn variable_count(ndim: usize) -> usize {
    ndim + 1
}

pub fn feature_len(ndim: usize) -> usize {
    variable_count(ndim) * stencil_size(ndim)
}

pub fn variable_names(ndim: usize) -> Vec<&'static str> {
    let mut names = ["u_x", "u_y", "u_z"][..ndim].to_vec();
    names.push("T");
    names
}

pub(crate) fn variables(state: &FieldState) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = state.u.iter().map(Vec::as_slice).collect();
    v.push(&state.t);
    v
}

pub(crate) fn variables_mut(state: &mut FieldState) -> Vec<&mut Vec<f64>> {
    let mut v: Vec<&mut Vec<f64>> = state.u.iter_mut().collect();
    v.push(&mut state.t);
    v
}

fn variable_bcs(bcs: &CavityBoundaries) -> Vec<&BoundarySpec> {
    let mut v: Vec<&BoundarySpec> = bcs.velocity.iter().collect();
    v.push(&bcs.temperature);
    v
}

fn padded_variables(state: &FieldState, bcs: &CavityBoundaries) -> Result<Vec<PaddedField>> {
    variables(state)
        .into_iter()
        .zip(variable_bcs(bcs))
        .map(|(field, spec)| pad_with_boundaries(&state.grid, field, spec))
        .collect()
}

/// Per-variable affine maps for states and derivative targets.
///
/// States map through `(z - min) / range`; derivatives through `dz / deriv_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub range: Vec<f64>,
    pub deriv_scale: Vec<f64>,
}

fn usable_scale(scale: f64, magnitude: f64) -> f64 {
    if scale.is_finite() && scale > 1e-12 * magnitude && scale > 0.0 {
        scale
    } else {
        1.0
    }
}

impl NormStats {
    /// Min-max of the boundary-padded fields over all snapshots, and the
    /// largest absolute one-step change of each variable.
    pub fn fit(snapshots: &[FieldState], bcs: &CavityBoundaries) -> Result<Self> {
        let first = snapshots.first().ok_or(Error::TooFewSnapshots(0))?;
        let nvars = variable_count(first.grid.ndim());
        let mut lo = vec![f64::INFINITY; nvars];
        let mut hi = vec![f64::NEG_INFINITY; nvars];
        for s in snapshots {
            for (v, p) in padded_variables(s, bcs)?.iter().enumerate() {
                for &x in &p.data {
                    lo[v] = lo[v].min(x);
                    hi[v] = hi[v].max(x);
                }
            }
        }
        let mut dmax = vec![0.0f64; nvars];
        for pair in snapshots.windows(2) {
            for (v, (a, b)) in variables(&pair[0]).into_iter().zip(variables(&pair[1])).enumerate() {
                for (x, y) in a.iter().zip(b) {
                    dmax[v] = dmax[v].max((y - x).abs());
                }
            }
        }
        let range = (0..nvars)
            .map(|v| usable_scale(hi[v] - lo[v], lo[v].abs().max(hi[v].abs())))
            .collect();
        let deriv_scale = dmax.iter().map(|&d| usable_scale(d, d)).collect();
        Ok(Self {
            min: lo,
            range,
            deriv_scale,
        })
    }

    pub fn normalize(&self, var: usize, z: f64) -> f64 {
        (z - self.min[var]) / self.range[var]
    }

    pub fn denormalize(&self, var: usize, zn: f64) -> f64 {
        zn * self.range[var] + self.min[var]
    }

    pub fn nvars(&self) -> usize {
        self.min.len()
    }
}

/// Per-cell feature rows `[center, -x, +x, -y, +y(, -z, +z)]` for each
/// variable in turn, gathered from normalized, boundary-padded fields.
pub fn build_stencil_features(state: &FieldState, bcs: &CavityBoundaries, stats: &NormStats) -> Result<Array2<f64>> {
    let grid: &StructuredGrid = &state.grid;
    let ndim = grid.ndim();
    let nvars = variable_count(ndim);
    if stats.nvars() != nvars {
        return Err(Error::Shape(format!(
            "normalization covers {} variables, state has {nvars}",
            stats.nvars()
        )));
    }
    let padded = padded_variables(state, bcs)?;
    let s = stencil_size(ndim);
    let mut out = Array2::<f64>::zeros((grid.cell_count(), nvars * s));
    // offsets into the padded array for the stencil points
    let pext = &padded[0].extents;
    let mut pstride = vec![1usize; ndim];
    for a in 1..ndim {
        pstride[a] = pstride[a - 1] * pext[a - 1];
    }
    let mut offsets: Vec<isize> = vec![0];
    for &st in &pstride {
        offsets.push(-(st as isize));
        offsets.push(st as isize);
    }
    for (c, mut row) in out.rows_mut().into_iter().enumerate() {
        let ijk = grid.cell_coords(c);
        let center: usize = (0..ndim).map(|a| (ijk[a] + 1) * pstride[a]).sum();
        for (v, p) in padded.iter().enumerate() {
            for (k, off) in offsets.iter().enumerate() {
                let z = p.data[(center as isize + off) as usize];
                row[v * s + k] = stats.normalize(v, z);
            }
        }
    }
    Ok(out)
}
