//! Single-file checkpoint archive.
//!
//! Layout (little endian): magic `RSCK`, `u32` version, then length-prefixed
//! UTF-8 sections for the config snapshot and the grid, `u64` step, `u64`
//! seed, `u64` station count, `u32` tensor count and per tensor a name, `u32`
//! rank, `u64` dims and `f64` values.

use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::geo::{CoordUnits, GridGeoref};
use crate::nn::ParamStore;

use super::config::TrainConfig;
use super::model::RainSeer;

const MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or freshly initialized) model with its training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RainSeer,
    pub step: usize,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.model.config.seed
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &m.config.to_text());
        let g = m.georef;
        let grid = format!(
            "{} {} {} {} {} {} {}",
            g.x_min.to_bits(),
            g.y_min.to_bits(),
            g.x_max.to_bits(),
            g.y_max.to_bits(),
            g.height,
            g.width,
            g.units.as_str()
        );
        put_str(&mut out, &grid);
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&m.config.seed.to_le_bytes());
        out.extend_from_slice(&(m.stations as u64).to_le_bytes());
        out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
        for (name, t) in m.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(origin, "magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, "version", format!("unsupported version {version}")));
        }
        let config = TrainConfig::parse(&r.string("config")?)?;
        let grid = r.string("grid")?;
        let georef = parse_grid(&grid).ok_or_else(|| Error::format(origin, "grid", format!("malformed grid '{grid}'")))?;
        let step = r.u64("step")? as usize;
        let seed = r.u64("seed")?;
        if seed != config.seed {
            return Err(Error::format(origin, "seed", "seed disagrees with the config snapshot"));
        }
        let stations = r.u64("stations")? as usize;
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64(&name)).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailer", "unexpected bytes after the last tensor"));
        }
        let fresh = RainSeer::new(config.clone(), georef, stations)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(_) => return Err(Error::format(origin, name.clone(), "shape differs from the configured model")),
                None => return Err(Error::format(origin, name.clone(), "missing tensor")),
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::format(origin, "tensors", "archive holds tensors the model does not use"));
        }
        Ok(Self {
            model: RainSeer {
                config,
                georef,
                stations,
                params,
            },
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn parse_grid(s: &str) -> Option<GridGeoref> {
    let f: Vec<&str> = s.split(' ').collect();
    if f.len() != 7 {
        return None;
    }
    let bits = |i: usize| f[i].parse::<u64>().ok().map(f64::from_bits);
    let g = GridGeoref::new(bits(0)?, bits(1)?, bits(2)?, bits(3)?, f[4].parse().ok()?, f[5].parse().ok()?).ok()?;
    Some(g.with_units(CoordUnits::parse(f[6])?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, field, "archive truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.origin, field, "invalid UTF-8"))
    }
}
