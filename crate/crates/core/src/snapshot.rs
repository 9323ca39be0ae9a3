//! Binary flow-state snapshots.
//!
//! Layout, little-endian: `b"HCSN"`, version `u32`, axis count `u32`, extents
//! `u64` per axis, spacing and origin `f64` per axis, time `f64`, dt `f64`,
//! step `u64`, field count `u32`, then per field a `u8`-prefixed name and a
//! `u32` component count, then the payload of every field in roster order.
//! Cell fields store `components × cells` values, component-major. The face
//! flux `phi` stores one block per axis of that axis' face count.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{FaceFlux, FieldState, StructuredGrid};

const MAGIC: &[u8; 4] = b"HCSN";
const VERSION: u32 = 1;

fn roster(ndim: usize) -> [(&'static str, usize); 5] {
    [("U", ndim), ("T", 1), ("p", 1), ("rho", 1), ("phi", ndim)]
}

pub fn write_snapshot<W: Write>(state: &FieldState, dt: f64, mut w: W) -> Result<()> {
    state.validate()?;
    let g = &state.grid;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(g.ndim() as u32).to_le_bytes());
    for &n in g.extents() {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &x in g.spacing().iter().chain(g.origin()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&state.time.to_le_bytes());
    buf.extend_from_slice(&dt.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    let fields = roster(g.ndim());
    buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (name, comps) in fields {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(comps as u32).to_le_bytes());
    }
    let payload = state
        .u
        .iter()
        .flatten()
        .chain(&state.t)
        .chain(&state.p)
        .chain(&state.rho)
        .chain(state.phi.axes.iter().flatten());
    for x in payload {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated snapshot at byte {}", self.at))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("payload size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decodes a snapshot, returning the state and its time step.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<(FieldState, f64)> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a snapshot (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let ndim = c.u32()? as usize;
    if !(2..=3).contains(&ndim) {
        return Err(Error::Format(format!("unsupported axis count {ndim}")));
    }
    let extents = (0..ndim)
        .map(|_| c.u64().map(|n| n as usize))
        .collect::<Result<Vec<_>>>()?;
    let spacing = (0..ndim).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let origin = (0..ndim).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let grid = StructuredGrid::with_spacing(&extents, &spacing, &origin).map_err(|e| Error::Format(e.to_string()))?;
    let time = c.f64()?;
    let dt = c.f64()?;
    let step = c.u64()?;
    let count = c.u32()? as usize;
    let expected = roster(ndim);
    if count != expected.len() {
        return Err(Error::Format(format!(
            "expected {} fields, found {count}",
            expected.len()
        )));
    }
    for (name, comps) in expected {
        let len = c.u8()? as usize;
        let got = c.take(len)?.to_vec();
        let n = c.u32()? as usize;
        if got != name.as_bytes() || n != comps {
            return Err(Error::Format(format!(
                "field roster mismatch: expected {name}×{comps}, found {}×{n}",
                String::from_utf8_lossy(&got)
            )));
        }
    }
    let cells = grid.cell_count();
    let u = (0..ndim).map(|_| c.f64s(cells)).collect::<Result<Vec<_>>>()?;
    let t = c.f64s(cells)?;
    let p = c.f64s(cells)?;
    let rho = c.f64s(cells)?;
    let phi = FaceFlux {
        axes: (0..ndim)
            .map(|a| c.f64s(grid.face_count(a)))
            .collect::<Result<Vec<_>>>()?,
    };
    if c.at != data.len() {
        return Err(Error::Format(format!("{} trailing bytes", data.len() - c.at)));
    }
    Ok((
        FieldState {
            grid,
            u,
            t,
            p,
            rho,
            phi,
            time,
            step,
        },
        dt,
    ))
}

pub fn save_snapshot(state: &FieldState, dt: f64, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_snapshot(state, dt, std::io::BufWriter::new(f))
}

pub fn load_snapshot(path: &Path) -> Result<(FieldState, f64)> {
    read_snapshot(std::fs::File::open(path)?)
}

/// Loads a snapshot and checks it lives on `grid`.
pub fn load_snapshot_on(path: &Path, grid: &StructuredGrid) -> Result<(FieldState, f64)> {
    let (state, dt) = load_snapshot(path)?;
    if &state.grid != grid {
        return Err(Error::Shape(format!(
            "{} holds a {:?} grid, expected {:?}",
            path.display(),
            state.grid.extents(),
            grid.extents()
        )));
    }
    Ok((state, dt))
}
