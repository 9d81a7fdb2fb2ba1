//! Binary embedding container: magic `LEMB`, u32 version, u64 rows, u64
//! dims, a length-prefixed UTF-8 id table, then f32 little-endian row-major
//! data. Round trips are bit-exact at f32 precision.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"LEMB";
const VERSION: u32 = 1;
/// Caps keep a corrupt header from driving huge allocations.
const MAX_ID_BYTES: u64 = 4096;
const MAX_ELEMENTS: u64 = 1 << 32;

/// In-memory embedding table with O(1) row lookup by cell id.
#[derive(Debug, Clone)]
pub struct Embeddings {
    ids: Vec<String>,
    dims: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, cell_id: &str) -> Option<&[f32]> {
        self.index
            .get(cell_id)
            .map(|&i| &self.data[i * self.dims..(i + 1) * self.dims])
    }

    /// Whole table as `[rows, dims]` in file order.
    pub fn matrix(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_vec(&[self.len(), self.dims], data).expect("consistent by construction")
    }

    /// Rows gathered in the order of `cell_ids`; any id absent from the
    /// table is an error.
    pub fn aligned(&self, cell_ids: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(cell_ids.len() * self.dims);
        for id in cell_ids {
            let row = self.row(id).ok_or_else(|| {
                DataError::Embeddings(format!("cell `{id}` not present in the table"))
            })?;
            data.extend(row.iter().map(|&v| f64::from(v)));
        }
        Ok(Tensor::from_vec(&[cell_ids.len(), self.dims], data)
            .expect("consistent by construction"))
    }
}

/// Writes `matrix` (`[rows, dims]`, values cast to f32) keyed by `ids`.
pub fn write_embeddings(path: &Path, ids: &[String], matrix: &Tensor) -> Result<()> {
    let (rows, dims) = match matrix.shape() {
        [r, d] => (*r, *d),
        other => {
            return Err(DataError::Embeddings(format!(
                "expected a [rows, dims] matrix, got {other:?}"
            )))
        }
    };
    if rows == 0 || dims == 0 {
        return Err(DataError::Embeddings("empty table".into()));
    }
    if ids.len() != rows {
        return Err(DataError::Embeddings(format!(
            "{rows} rows but {} ids",
            ids.len()
        )));
    }
    let mut seen = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() || id.len() as u64 > MAX_ID_BYTES {
            return Err(DataError::Embeddings(format!("bad id length at row {i}")));
        }
        if let Some(first) = seen.insert(id.as_str(), i) {
            return Err(DataError::Embeddings(format!(
                "duplicate id `{id}` at rows {first} and {i}"
            )));
        }
    }
    if let Some(bad) = matrix.data().iter().find(|v| !v.is_finite()) {
        return Err(DataError::Embeddings(format!("non-finite value {bad}")));
    }

    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| io_err(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dims as u64).to_le_bytes()).map_err(io)?;
    for id in ids {
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
    }
    for &v in matrix.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    fn exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    let short = |_: std::io::Error| DataError::Corrupt("file ends mid-record".into());

    let magic: [u8; 4] = exact(&mut r).map_err(short)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32::from_le_bytes(exact(&mut r).map_err(short)?);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(exact(&mut r).map_err(short)?);
    let dims = u64::from_le_bytes(exact(&mut r).map_err(short)?);
    if rows == 0 || dims == 0 || rows.saturating_mul(dims) > MAX_ELEMENTS {
        return Err(DataError::Corrupt(format!(
            "implausible table shape {rows} x {dims}"
        )));
    }

    let mut ids = Vec::with_capacity(rows as usize);
    let mut index = HashMap::with_capacity(rows as usize);
    for i in 0..rows as usize {
        let len = u32::from_le_bytes(exact(&mut r).map_err(short)?);
        if u64::from(len) > MAX_ID_BYTES || len == 0 {
            return Err(DataError::Corrupt(format!("bad id length at row {i}")));
        }
        let mut buf = vec![0u8; len as usize];
        r.read_exact(&mut buf).map_err(short)?;
        let id = String::from_utf8(buf)
            .map_err(|_| DataError::Corrupt(format!("id at row {i} is not UTF-8")))?;
        if index.insert(id.clone(), i).is_some() {
            return Err(DataError::Corrupt(format!("duplicate id `{id}`")));
        }
        ids.push(id);
    }

    let count = (rows * dims) as usize;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f32::from_le_bytes(exact(&mut r).map_err(short)?));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(DataError::Corrupt("trailing bytes after data".into())),
        Err(e) => return Err(DataError::Corrupt(format!("unreadable tail: {e}"))),
    }

    Ok(Embeddings {
        ids,
        dims: dims as usize,
        data,
        index,
    })
}
