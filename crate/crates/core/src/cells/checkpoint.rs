//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! b"PFCK"  u32 version  u8 model  u8 cell_kind  u32 input_dim  u32 units
//! u8 stacked  u32 aux  u32 tensor_count
//! per tensor: u32 name_len, name (utf-8), u32 rank, rank x u32 dims, f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CellKind, Mat};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelTag {
    Cells = 0,
    Rpr = 1,
    Fusion = 2,
}

impl ModelTag {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ModelTag::Cells),
            1 => Ok(ModelTag::Rpr),
            2 => Ok(ModelTag::Fusion),
            _ => Err(Error::Format(format!("unknown model tag {v}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub model: ModelTag,
    pub kind: CellKind,
    pub input_dim: u32,
    pub units: u32,
    pub stacked: bool,
    /// Model-specific extra field (window length for fusion, sequence rows for RPR).
    pub aux: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Copies the named tensors into `targets`, checking every shape.
    pub fn restore(&self, names: &[String], targets: Vec<&mut Mat>) -> Result<()> {
        if names.len() != targets.len() {
            return Err(Error::invalid("tensor names and targets differ in count"));
        }
        for (name, t) in names.iter().zip(targets) {
            let m = self.tensor(name)?;
            if (m.rows, m.cols) != (t.rows, t.cols) {
                return Err(Error::Format(format!(
                    "tensor `{name}` is {}x{}, expected {}x{}",
                    m.rows, m.cols, t.rows, t.cols
                )));
            }
            t.data.copy_from_slice(&m.data);
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[h.model as u8, h.kind.code()])?;
        w.write_all(&h.input_dim.to_le_bytes())?;
        w.write_all(&h.units.to_le_bytes())?;
        w.write_all(&[h.stacked as u8])?;
        w.write_all(&h.aux.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, m) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let dims: Vec<u32> = if m.cols == 1 {
                vec![m.rows as u32]
            } else {
                vec![m.rows as u32, m.cols as u32]
            };
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for x in &m.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("missing PFCK header".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b = [0u8; 2];
        r.read_exact(&mut b)?;
        let model = ModelTag::from_u8(b[0])?;
        let kind = CellKind::from_code(b[1])?;
        let input_dim = read_u32(&mut r)?;
        let units = read_u32(&mut r)?;
        let mut s = [0u8; 1];
        r.read_exact(&mut s)?;
        let aux = read_u32(&mut r)?;
        let n = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut r)?;
            let (rows, cols) = match rank {
                1 => (read_u32(&mut r)? as usize, 1),
                2 => (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize),
                _ => return Err(Error::Format(format!("tensor `{name}` has rank {rank}"))),
            };
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for x in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            tensors.push((name, Mat { rows, cols, data }));
        }
        Ok(Self {
            header: Header {
                model,
                kind,
                input_dim,
                units,
                stacked: s[0] != 0,
                aux,
            },
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
