//! Binary model checkpoints.
//!
//! Layout, little-endian: `b"HCNN"`, version `u32`, kind `u8`, ndim `u32`,
//! nvars `u32`, input length `u32`, width `u32`, layers `u32`, modes `u32`,
//! dropout `f64`, stats flag `u8` followed by `nvars` triples
//! `(min, range, deriv_scale)`, value count `u64`, then per subnetwork every
//! parameter tensor in declaration order and every batch-norm running mean
//! and variance, all `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::features::{feature_len, variable_count, NormStats};
use super::{ModelConfig, ModelKind, SurrogateModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HCNN";
const VERSION: u32 = 1;

fn values(model: &SurrogateModel) -> Vec<f64> {
    let mut out = Vec::new();
    for net in &model.nets {
        for t in net.params() {
            out.extend_from_slice(&t.data);
        }
        for bn in net.bn() {
            out.extend_from_slice(&bn.mean);
            out.extend_from_slice(&bn.var);
        }
    }
    out
}

pub fn write_model<W: Write>(model: &SurrogateModel, mut w: W) -> Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[match c.kind {
        ModelKind::Dense => 0u8,
        ModelKind::Spectral => 1u8,
    }])?;
    for v in [
        model.ndim,
        model.nets.len(),
        feature_len(model.ndim),
        c.width,
        c.layers,
        c.modes,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.dropout.to_le_bytes())?;
    match &model.stats {
        Some(s) => {
            w.write_all(&[1])?;
            for v in 0..s.nvars() {
                for x in [s.min[v], s.range[v], s.deriv_scale[v]] {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        None => w.write_all(&[0])?,
    }
    let vals = values(model);
    w.write_all(&(vals.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for x in vals {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_model<R: Read>(r: R) -> Result<SurrogateModel> {
    let mut r = Reader(r);
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Dense,
        1 => ModelKind::Spectral,
        k => return Err(Error::Format(format!("unknown model kind tag {k}"))),
    };
    let ndim = r.u32()?;
    let nvars = r.u32()?;
    let input_len = r.u32()?;
    let width = r.u32()?;
    let layers = r.u32()?;
    let modes = r.u32()?;
    let dropout = r.f64()?;
    if !(2..=3).contains(&ndim) || nvars != variable_count(ndim) || input_len != feature_len(ndim) {
        return Err(Error::Format("inconsistent checkpoint shape header".into()));
    }
    let stats = match r.u8()? {
        0 => None,
        1 => {
            let mut s = NormStats {
                min: Vec::with_capacity(nvars),
                range: Vec::with_capacity(nvars),
                deriv_scale: Vec::with_capacity(nvars),
            };
            for _ in 0..nvars {
                s.min.push(r.f64()?);
                s.range.push(r.f64()?);
                s.deriv_scale.push(r.f64()?);
            }
            Some(s)
        }
        f => return Err(Error::Format(format!("bad stats flag {f}"))),
    };
    let config = ModelConfig {
        kind,
        width,
        layers,
        modes,
        dropout,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut model = SurrogateModel::new(config, ndim, 0)?;
    let count = r.u64()? as usize;
    if count != values(&model).len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} values, architecture needs {}",
            values(&model).len()
        )));
    }
    for net in &mut model.nets {
        for t in net.params_mut() {
            for x in &mut t.data {
                *x = r.f64()?;
            }
        }
        for bn in net.bn_mut() {
            for x in bn.mean.iter_mut().chain(bn.var.iter_mut()) {
                *x = r.f64()?;
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    model.stats = stats;
    Ok(model)
}

pub fn save_model(model: &SurrogateModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_model(model, std::io::BufWriter::new(f))
}

pub fn load_model(path: &Path) -> Result<SurrogateModel> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}
