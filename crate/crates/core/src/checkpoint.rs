//! Self-describing binary checkpoints: every named parameter array plus the
//! per-layer running batch statistics, with enough header to rebuild the
//! model without outside knowledge.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LVCK" | version u32 | dtype str | variant str | width count u32,
//! widths u32… | entry count u32 | entries…
//! entry: name str | rows u32 | cols u32 | rows×cols scalars
//! str:   length u16 | UTF-8 bytes
//! ```
//!
//! Loading is strict: the dtype must match the requested scalar type, and
//! the entry list must cover every parameter of the declared architecture
//! exactly once — nothing missing, nothing unknown.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ladder::LadderParams;
use crate::numerics::{Matrix, RngStream, Scalar};
use crate::variants::VariantKind;

pub const MAGIC: [u8; 4] = *b"LVCK";
pub const VERSION: u32 = 1;

/// A deserialized checkpoint: which variant trained the model, and the
/// model itself.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub kind: VariantKind,
    pub params: LadderParams<T>,
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("checkpoint strings are short");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_matrix<T: Scalar>(out: &mut Vec<u8>, name: &str, m: &Matrix<T>) {
    push_str(out, name);
    out.extend_from_slice(&u32::try_from(m.rows()).unwrap().to_le_bytes());
    out.extend_from_slice(&u32::try_from(m.cols()).unwrap().to_le_bytes());
    for &v in m.as_slice() {
        v.write_le(out);
    }
}

fn stats_name(layer: usize, field: &str) -> String {
    format!("stats.l{layer}.{field}")
}

/// Serializes a model and its variant tag.
pub fn to_bytes<T: Scalar>(kind: VariantKind, params: &LadderParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_str(&mut out, T::DTYPE);
    push_str(&mut out, kind.name());
    let widths = params.widths();
    out.extend_from_slice(&u32::try_from(widths.len()).unwrap().to_le_bytes());
    for &w in widths {
        out.extend_from_slice(&u32::try_from(w).unwrap().to_le_bytes());
    }
    let entries = params.set.len() + 2 * params.running.len();
    out.extend_from_slice(&u32::try_from(entries).unwrap().to_le_bytes());
    for param in params.set.iter() {
        push_matrix(&mut out, &param.name, &param.value);
    }
    for (layer, stats) in params.running.iter().enumerate() {
        // Running statistics are keyed by the layer whose pre-activations
        // they normalize (1-based, matching parameter names).
        let l = layer + 1;
        push_matrix(&mut out, &stats_name(l, "mean"), &Matrix::from_vec(1, stats.mean.len(), stats.mean.clone()));
        push_matrix(&mut out, &stats_name(l, "var"), &Matrix::from_vec(1, stats.var.len(), stats.var.clone()));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u16_le()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }

    fn matrix<T: Scalar>(&mut self) -> Result<(String, Matrix<T>)> {
        let name = self.str()?;
        let rows = self.u32_le()? as usize;
        let cols = self.u32_le()? as usize;
        let raw = self.take(rows * cols * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok((name, Matrix::from_vec(rows, cols, data)))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Deserializes a checkpoint produced by [`to_bytes`].
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32_le()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let dtype = cur.str()?;
    if dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint holds {dtype} values, asked to load {}",
            T::DTYPE
        )));
    }
    let kind = VariantKind::parse(&cur.str()?)?;
    let width_count = cur.u32_le()? as usize;
    let mut widths = Vec::with_capacity(width_count);
    for _ in 0..width_count {
        widths.push(cur.u32_le()? as usize);
    }
    // The seed is irrelevant: every array is overwritten below, and the
    // loader verifies nothing was left out.
    let mut params = LadderParams::<T>::init(&widths, &RngStream::new(0))?;

    let entry_count = cur.u32_le()? as usize;
    let mut seen = HashSet::with_capacity(entry_count);
    let mut stats: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = vec![(None, None); params.running.len()];
    for _ in 0..entry_count {
        let (name, matrix) = cur.matrix::<T>()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!("duplicate checkpoint entry {name:?}")));
        }
        if let Some(layer) = name.strip_prefix("stats.l") {
            let (l, field) = layer
                .split_once('.')
                .ok_or_else(|| Error::Data(format!("malformed statistics entry {name:?}")))?;
            let l: usize = l
                .parse()
                .map_err(|_| Error::Data(format!("malformed statistics entry {name:?}")))?;
            if l == 0 || l > stats.len() || matrix.rows() != 1 {
                return Err(Error::Data(format!(
                    "statistics entry {name:?} does not fit a {} layer model",
                    stats.len()
                )));
            }
            let slot = &mut stats[l - 1];
            match field {
                "mean" => slot.0 = Some(matrix.as_slice().to_vec()),
                "var" => slot.1 = Some(matrix.as_slice().to_vec()),
                _ => return Err(Error::Data(format!("unknown statistics field in {name:?}"))),
            }
        } else {
            let param = params
                .set
                .by_name_mut(&name)
                .ok_or_else(|| Error::Data(format!("unknown checkpoint entry {name:?}")))?;
            if param.value.shape() != matrix.shape() {
                return Err(Error::Data(format!(
                    "checkpoint entry {name:?} is {}x{}, model expects {}x{}",
                    matrix.rows(),
                    matrix.cols(),
                    param.value.rows(),
                    param.value.cols()
                )));
            }
            param.value = matrix;
        }
    }
    if !cur.done() {
        return Err(Error::Data("trailing bytes after the last checkpoint entry".into()));
    }
    for param in params.set.iter() {
        if !seen.contains(&param.name) {
            return Err(Error::Data(format!("checkpoint is missing parameter {:?}", param.name)));
        }
    }
    for (layer, slot) in stats.iter_mut().enumerate() {
        let (mean, var) = (slot.0.take(), slot.1.take());
        match (mean, var) {
            (Some(mean), Some(var)) => {
                if mean.len() != params.running[layer].mean.len() || var.len() != mean.len() {
                    return Err(Error::Data(format!(
                        "statistics for layer {} have the wrong width",
                        layer + 1
                    )));
                }
                params.running[layer].restore(mean, var);
            }
            _ => {
                return Err(Error::Data(format!(
                    "checkpoint is missing statistics for layer {}",
                    layer + 1
                )))
            }
        }
    }
    Ok(Checkpoint { kind, params })
}

/// Writes a checkpoint file.
pub fn save<T: Scalar>(path: &Path, kind: VariantKind, params: &LadderParams<T>) -> Result<()> {
    std::fs::write(path, to_bytes(kind, params))
        .map_err(|e| Error::Data(format!("writing checkpoint {}: {e}", path.display())))
}

/// Reads a checkpoint file.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("reading checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
