//! Uniform structured grids, cell/face field storage and boundary handling.
//!
//! Cell arrays are flat `Vec<f64>` in row-major order with the x index
//! running fastest: `idx = i + nx * (j + ny * k)`. Face arrays hold one
//! component per axis; the faces normal to axis `a` have extent `n_a + 1`
//! along that axis, with face `0` on the minimum wall and face `n_a` on the
//! maximum wall.

use crate::error::{Error, Result};

/// A uniform Cartesian grid of 2 or 3 axes.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredGrid {
    extents: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl StructuredGrid {
    /// Builds a grid covering `[0, length]` on every axis.
    pub fn new(extents: &[usize], lengths: &[f64]) -> Result<Self> {
        if extents.len() != lengths.len() {
            return Err(Error::InvalidGrid(format!(
                "{} extents but {} lengths",
                extents.len(),
                lengths.len()
            )));
        }
        let origin = vec![0.0; extents.len()];
        let spacing = extents
            .iter()
            .zip(lengths)
            .map(|(&n, &l)| l / n as f64)
            .collect::<Vec<_>>();
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "domain lengths must be positive, got {lengths:?}"
            )));
        }
        Self::with_spacing(extents, &spacing, &origin)
    }

    pub fn with_spacing(extents: &[usize], spacing: &[f64], origin: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) {
            return Err(Error::InvalidGrid(format!(
                "expected 2 or 3 axes, got {}",
                extents.len()
            )));
        }
        if spacing.len() != extents.len() || origin.len() != extents.len() {
            return Err(Error::InvalidGrid("spacing/origin rank differs from extents".into()));
        }
        if let Some(n) = extents.iter().find(|&&n| n < 3) {
            return Err(Error::InvalidGrid(format!("every extent must be at least 3, got {n}")));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            extents: extents.to_vec(),
            spacing: spacing.to_vec(),
            origin: origin.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.extents
            .iter()
            .zip(&self.spacing)
            .map(|(&n, &h)| n as f64 * h)
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Area of a face normal to `axis` (a length in 2D).
    pub fn face_area(&self, axis: usize) -> f64 {
        self.spacing
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != axis)
            .map(|(_, &h)| h)
            .product()
    }

    /// Stride of `axis` in the flat cell layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.extents[..axis].iter().product()
    }

    pub fn cell_index(&self, ijk: &[usize]) -> usize {
        ijk.iter().enumerate().map(|(a, &i)| i * self.stride(a)).sum()
    }

    /// Multi-index of a flat cell index (unused trailing axes are 0).
    pub fn cell_coords(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for (a, &n) in self.extents.iter().enumerate() {
            out[a] = idx % n;
            idx /= n;
        }
        out
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        let c = self.cell_coords(idx);
        (0..self.ndim())
            .map(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.spacing[a])
            .collect()
    }

    /// Extents of the face array normal to `axis`.
    pub fn face_extents(&self, axis: usize) -> Vec<usize> {
        let mut e = self.extents.clone();
        e[axis] += 1;
        e
    }

    pub fn face_count(&self, axis: usize) -> usize {
        self.face_extents(axis).iter().product()
    }

    /// Flat index of the face normal to `axis` on the low side of cell `ijk`
    /// (pass `ijk[axis] = n_axis` for the high wall).
    pub fn face_index(&self, axis: usize, ijk: &[usize]) -> usize {
        let mut stride = 1;
        let mut idx = 0;
        for (a, &n) in self.extents.iter().enumerate() {
            let n = if a == axis { n + 1 } else { n };
            idx += ijk[a] * stride;
            stride *= n;
        }
        idx
    }

    /// Cell containing `point`; points on the upper wall map to the last cell.
    pub fn locate(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.ndim() {
            return Err(Error::OutsideDomain(point.to_vec()));
        }
        let mut ijk = [0usize; 3];
        for a in 0..self.ndim() {
            let rel = (point[a] - self.origin[a]) / self.spacing[a];
            let n = self.extents[a];
            if !rel.is_finite() || rel < 0.0 || rel > n as f64 {
                return Err(Error::OutsideDomain(point.to_vec()));
            }
            ijk[a] = (rel.floor() as usize).min(n - 1);
        }
        Ok(self.cell_index(&ijk[..self.ndim()]))
    }
}

/// One wall of the box. Faces come in (min, max) pairs per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: usize,
    pub high: bool,
}

impl Face {
    pub fn all(ndim: usize) -> impl Iterator<Item = Face> {
        (0..ndim).flat_map(|axis| [Face { axis, high: false }, Face { axis, high: true }])
    }

    fn slot(self) -> usize {
        2 * self.axis + usize::from(self.high)
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 6] = ["x-min", "x-max", "y-min", "y-max", "z-min", "z-max"];
        NAMES[self.slot()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryCondition {
    Dirichlet(f64),
    NeumannZero,
}

/// One condition per wall face for a single scalar field (or velocity component).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    faces: Vec<BoundaryCondition>,
}

impl BoundarySpec {
    pub fn uniform(ndim: usize, bc: BoundaryCondition) -> Self {
        Self {
            faces: vec![bc; 2 * ndim],
        }
    }

    /// No-slip walls for a velocity component.
    pub fn no_slip(ndim: usize) -> Self {
        Self::uniform(ndim, BoundaryCondition::Dirichlet(0.0))
    }

    pub fn all_neumann(ndim: usize) -> Self {
        Self::uniform(ndim, BoundaryCondition::NeumannZero)
    }

    /// Differentially heated cavity: hot x-min wall, cold x-max wall, every
    /// other wall adiabatic.
    pub fn heated_cavity(ndim: usize, t_hot: f64, t_cold: f64) -> Self {
        let mut spec = Self::all_neumann(ndim);
        spec.set(Face { axis: 0, high: false }, BoundaryCondition::Dirichlet(t_hot));
        spec.set(Face { axis: 0, high: true }, BoundaryCondition::Dirichlet(t_cold));
        spec
    }

    pub fn ndim(&self) -> usize {
        self.faces.len() / 2
    }

    pub fn get(&self, face: Face) -> BoundaryCondition {
        self.faces[face.slot()]
    }

    pub fn set(&mut self, face: Face, bc: BoundaryCondition) {
        self.faces[face.slot()] = bc;
    }

    /// Copy with every Dirichlet value mapped through `f` (used for normalization).
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let faces = self
            .faces
            .iter()
            .map(|bc| match *bc {
                BoundaryCondition::Dirichlet(v) => BoundaryCondition::Dirichlet(f(v)),
                BoundaryCondition::NeumannZero => BoundaryCondition::NeumannZero,
            })
            .collect();
        Self { faces }
    }

    /// Same spec with every Dirichlet value set to zero (homogeneous closure).
    pub fn homogeneous(&self) -> Self {
        self.map_values(|_| 0.0)
    }

    pub fn dirichlet_range(&self) -> Option<(f64, f64)> {
        self.faces
            .iter()
            .filter_map(|bc| match *bc {
                BoundaryCondition::Dirichlet(v) => Some(v),
                BoundaryCondition::NeumannZero => None,
            })
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((f64::min(lo, v), f64::max(hi, v))),
            })
    }
}

/// Boundary conditions for every transported field of the cavity problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityBoundaries {
    pub velocity: Vec<BoundarySpec>,
    pub temperature: BoundarySpec,
    pub pressure: BoundarySpec,
}

impl CavityBoundaries {
    pub fn new(ndim: usize, t_hot: f64, t_cold: f64) -> Self {
        Self {
            velocity: vec![BoundarySpec::no_slip(ndim); ndim],
            temperature: BoundarySpec::heated_cavity(ndim, t_hot, t_cold),
            pressure: BoundarySpec::all_neumann(ndim),
        }
    }
}

/// Volumetric flux through every face, one array per face orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFlux {
    pub axes: Vec<Vec<f64>>,
}

impl FaceFlux {
    pub fn zeros(grid: &StructuredGrid) -> Self {
        Self {
            axes: (0..grid.ndim()).map(|a| vec![0.0; grid.face_count(a)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of outward fluxes over all wall faces.
    pub fn net_boundary_outflow(&self, grid: &StructuredGrid) -> f64 {
        let mut total = 0.0;
        for axis in 0..grid.ndim() {
            let n = grid.extents()[axis];
            for_each_index(&grid.face_extents(axis), |ijk| {
                if ijk[axis] == 0 {
                    total -= self.axes[axis][grid.face_index(axis, ijk)];
                } else if ijk[axis] == n {
                    total += self.axes[axis][grid.face_index(axis, ijk)];
                }
            });
        }
        total
    }
}

/// Complete flow state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub grid: StructuredGrid,
    /// Cell velocity, one array per axis (m/s).
    pub u: Vec<Vec<f64>>,
    /// Cell temperature (K).
    pub t: Vec<f64>,
    /// Cell kinematic pressure (m²/s²).
    pub p: Vec<f64>,
    /// Cell density (kg/m³), diagnostic under the Boussinesq model.
    pub rho: Vec<f64>,
    /// Face volumetric flux (m³/s).
    pub phi: FaceFlux,
    pub time: f64,
    pub step: u64,
}

impl FieldState {
    /// Fluid at rest with uniform temperature and density.
    pub fn quiescent(grid: &StructuredGrid, temperature: f64, density: f64) -> Self {
        let n = grid.cell_count();
        Self {
            grid: grid.clone(),
            u: vec![vec![0.0; n]; grid.ndim()],
            t: vec![temperature; n],
            p: vec![0.0; n],
            rho: vec![density; n],
            phi: FaceFlux::zeros(grid),
            time: 0.0,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.cell_count();
        let cell_ok = self.u.len() == self.grid.ndim()
            && self.u.iter().all(|c| c.len() == n)
            && self.t.len() == n
            && self.p.len() == n
            && self.rho.len() == n;
        let face_ok = self.phi.axes.len() == self.grid.ndim()
            && self
                .phi
                .axes
                .iter()
                .enumerate()
                .all(|(a, f)| f.len() == self.grid.face_count(a));
        if !cell_ok || !face_ok {
            return Err(Error::Shape("field arrays do not match the grid".into()));
        }
        Ok(())
    }

    /// Per-cell velocity magnitude.
    pub fn speed(&self) -> Vec<f64> {
        (0..self.grid.cell_count())
            .map(|c| self.u.iter().map(|comp| comp[c] * comp[c]).sum::<f64>().sqrt())
            .collect()
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.u.iter().flat_map(|c| c.iter()).map(|v| v * v).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.u
            .iter()
            .flatten()
            .chain(&self.t)
            .chain(&self.p)
            .all(|v| v.is_finite())
    }
}

/// Calls `f` with every multi-index of a box with the given extents, x fastest.
pub(crate) fn for_each_index(extents: &[usize], mut f: impl FnMut(&[usize])) {
    let total: usize = extents.iter().product();
    let mut ijk = vec![0usize; extents.len()];
    for _ in 0..total {
        f(&ijk);
        for (a, &n) in extents.iter().enumerate() {
            ijk[a] += 1;
            if ijk[a] < n {
                break;
            }
            ijk[a] = 0;
        }
    }
}

/// A cell array grown by one ghost layer on every side.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedField {
    pub extents: Vec<usize>,
    pub data: Vec<f64>,
}

impl PaddedField {
    pub fn index(&self, ijk: &[usize]) -> usize {
        let mut stride = 1;
        let mut idx = 0;
        for (a, &n) in self.extents.iter().enumerate() {
            idx += ijk[a] * stride;
            stride *= n;
        }
        idx
    }

    pub fn get(&self, ijk: &[usize]) -> f64 {
        self.data[self.index(ijk)]
    }

    /// The interior block, i.e. the inverse of padding.
    pub fn interior(&self) -> Vec<f64> {
        let inner: Vec<usize> = self.extents.iter().map(|n| n - 2).collect();
        let mut out = Vec::with_capacity(inner.iter().product());
        let mut shifted = vec![0; inner.len()];
        for_each_index(&inner, |ijk| {
            for (s, &i) in shifted.iter_mut().zip(ijk) {
                *s = i + 1;
            }
            out.push(self.get(&shifted));
        });
        out
    }
}

/// Embeds boundary conditions into a ghost layer around `field`.
///
/// Zero-gradient walls copy the adjacent interior layer; fixed-value walls
/// are written last over their full extended range, so corners shared with a
/// zero-gradient wall take the fixed value. Where two fixed-value walls meet
/// (3D only) the later axis wins.
pub fn pad_with_boundaries(grid: &StructuredGrid, field: &[f64], spec: &BoundarySpec) -> Result<PaddedField> {
    if field.len() != grid.cell_count() {
        return Err(Error::Shape(format!(
            "field has {} cells, grid has {}",
            field.len(),
            grid.cell_count()
        )));
    }
    if spec.ndim() != grid.ndim() {
        return Err(Error::Shape("boundary spec rank differs from grid".into()));
    }
    let ndim = grid.ndim();
    let extents: Vec<usize> = grid.extents().iter().map(|n| n + 2).collect();
    let mut padded = PaddedField {
        data: vec![0.0; extents.iter().product()],
        extents,
    };

    let mut shifted = vec![0; ndim];
    for (c, &v) in field.iter().enumerate() {
        let ijk = grid.cell_coords(c);
        for a in 0..ndim {
            shifted[a] = ijk[a] + 1;
        }
        let idx = padded.index(&shifted);
        padded.data[idx] = v;
    }

    let pext = padded.extents.clone();
    for face in Face::all(ndim) {
        if spec.get(face) != BoundaryCondition::NeumannZero {
            continue;
        }
        let (layer, source) = if face.high {
            (pext[face.axis] - 1, pext[face.axis] - 2)
        } else {
            (0, 1)
        };
        let mut src = vec![0; ndim];
        for_each_index(&pext, |ijk| {
            if ijk[face.axis] == layer {
                src.copy_from_slice(ijk);
                src[face.axis] = source;
                let v = padded.get(&src);
                let dst = padded.index(ijk);
                padded.data[dst] = v;
            }
        });
    }
    for face in Face::all(ndim) {
        let BoundaryCondition::Dirichlet(value) = spec.get(face) else {
            continue;
        };
        let layer = if face.high { pext[face.axis] - 1 } else { 0 };
        for_each_index(&pext, |ijk| {
            if ijk[face.axis] == layer {
                let dst = padded.index(ijk);
                padded.data[dst] = value;
            }
        });
    }
    Ok(padded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReading {
    pub u: Vec<f64>,
    pub t: f64,
}

/// Nearest-cell sampling of velocity and temperature at physical points.
pub fn probe_sample(state: &FieldState, points: &[Vec<f64>]) -> Result<Vec<ProbeReading>> {
    points
        .iter()
        .map(|pt| {
            let c = state.grid.locate(pt)?;
            Ok(ProbeReading {
                u: state.u.iter().map(|comp| comp[c]).collect(),
                t: state.t[c],
            })
        })
        .collect()
}

/// Six probes on the vertical centerline, three near the top wall and three
/// near the bottom wall.
pub fn centerline_probes(grid: &StructuredGrid) -> Vec<Vec<f64>> {
    let lengths = grid.lengths();
    [0.05, 0.10, 0.15, 0.85, 0.90, 0.95]
        .iter()
        .map(|&fy| {
            let mut p: Vec<f64> = lengths.iter().map(|l| 0.5 * l).collect();
            p[1] = fy * lengths[1];
            p
        })
        .collect()
}
