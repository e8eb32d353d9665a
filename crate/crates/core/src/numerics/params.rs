//! Named parameter storage and the `MOCA1` binary format.
//!
//! Layout (all integers u32 little-endian):
//! `"MOCA1"`, matrix count, then per matrix: name length, UTF-8 name, rows,
//! cols, and rows·cols f64 little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Matrix, NumericsError, Var};
use crate::scalar::{cast, to_f64, Scalar};

pub const PARAM_MAGIC: &[u8; 5] = b"MOCA1";

/// Index of a matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Parameters bound to a tape are looked up by the id they had in the store.
impl std::ops::Index<ParamId> for [Var] {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self[id.0]
    }
}

/// Ordered, named collection of learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix<T>) -> Result<(), NumericsError> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(NumericsError::shape(
                "ParamStore::set",
                cur.shape(),
                value.shape(),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), NumericsError> {
        write_params(w, self.names.iter().map(String::as_str).zip(&self.values))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Overwrites every parameter from `path`; names, order and shapes must match.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        let entries = read_params::<T, _>(BufReader::new(File::open(path)?))?;
        self.assign(entries)
    }

    pub fn assign(&mut self, entries: Vec<(String, Matrix<T>)>) -> Result<(), NumericsError> {
        if entries.len() != self.values.len() {
            return Err(NumericsError::Format(format!(
                "expected {} matrices, file has {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (i, (name, m)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(NumericsError::Format(format!(
                    "matrix {i}: expected `{}`, found `{name}`",
                    self.names[i]
                )));
            }
            self.set(ParamId(i), m)?;
        }
        Ok(())
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<(), NumericsError> {
    let v = u32::try_from(v).map_err(|_| NumericsError::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_params<'a, T, W, I>(mut w: W, entries: I) -> Result<(), NumericsError>
where
    T: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Matrix<T>)>,
    I::IntoIter: ExactSizeIterator,
{
    let entries = entries.into_iter();
    w.write_all(PARAM_MAGIC)?;
    write_u32(&mut w, entries.len())?;
    for (name, m) in entries {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, m.rows())?;
        write_u32(&mut w, m.cols())?;
        for &v in m.data() {
            w.write_all(&to_f64(v).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<T: Scalar, R: Read>(
    mut r: R,
) -> Result<Vec<(String, Matrix<T>)>, NumericsError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumericsError::Format("name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NumericsError::Format("matrix too large".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(cast::<T>(f64::from_le_bytes(b)));
        }
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NumericsError::Format("trailing bytes".into()));
    }
    Ok(out)
}
