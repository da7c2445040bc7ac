//! Dense row-major grids and the `GRID` binary format.
//!
//! Layout of a `GRID` file (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "GRID"
//! 4       1         version (1)
//! 5       1         dtype code (0 = f32, 1 = f64, 2 = i8)
//! 6       1         ndim (1..=4)
//! 7       4 * ndim  dims, u32 each
//! ...     payload   row-major scalars
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GRID";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I8 => "i8",
        }
    }
}

#[derive(Debug, Clone)]
pub enum GridData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
}

impl GridData {
    pub fn dtype(&self) -> DType {
        match self {
            GridData::F32(_) => DType::F32,
            GridData::F64(_) => DType::F64,
            GridData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridData::F32(v) => v.len(),
            GridData::F64(v) => v.len(),
            GridData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable n-dimensional array (1 to 4 axes) of a single scalar type.
#[derive(Debug, Clone)]
pub struct Grid {
    shape: Vec<usize>,
    data: GridData,
}

/// Bit-level equality: `NaN` payloads and signed zeros are compared exactly.
impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (GridData::F32(a), GridData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (GridData::F64(a), GridData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (GridData::I8(a), GridData::I8(b)) => a == b,
            _ => false,
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(Error::InvalidShape(format!(
            "ndim must be between 1 and {MAX_NDIM}, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::InvalidShape(format!(
            "every dimension must be in 1..=u32::MAX, got {shape:?}"
        )));
    }
    let numel = shape.iter().product::<usize>();
    if numel != len {
        return Err(Error::InvalidShape(format!(
            "shape {shape:?} holds {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: GridData) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, GridData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, GridData::F32(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, GridData::I8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &GridData {
        &self.data
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            GridData::F64(v) => Ok(v),
            other => Err(Error::DTypeMismatch {
                expected: "f64",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            GridData::I8(v) => Ok(v),
            other => Err(Error::DTypeMismatch {
                expected: "i8",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn into_f64(self) -> Result<Vec<f64>> {
        match self.data {
            GridData::F64(v) => Ok(v),
            other => Err(Error::DTypeMismatch {
                expected: "f64",
                found: other.dtype().name(),
            }),
        }
    }

    /// Encoded header length for this grid's rank.
    pub fn header_len(&self) -> usize {
        7 + 4 * self.ndim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(self.header_len() + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.ndim() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
        out
    }

    /// Decodes a `GRID` byte buffer; `path` is used only for error context.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(7));
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        if bytes.len() < 7 {
            return Err(truncated(7));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version: bytes[4],
            });
        }
        let dtype = DType::from_code(bytes[5]).ok_or(Error::UnknownDType {
            path: path.to_path_buf(),
            code: bytes[5],
        })?;
        let ndim = bytes[6] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::BadHeader {
                path: path.to_path_buf(),
                reason: format!("ndim {ndim} outside 1..={MAX_NDIM}"),
            });
        }
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(Error::BadHeader {
                path: path.to_path_buf(),
                reason: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadHeader {
                path: path.to_path_buf(),
                reason: format!("shape {shape:?} overflows"),
            })?;
        let expected = header + numel * dtype.size();
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::BadHeader {
                path: path.to_path_buf(),
                reason: format!(
                    "{} trailing bytes after payload",
                    bytes.len() - expected
                ),
            });
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DType::F32 => GridData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => GridData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => GridData::I8(payload.iter().map(|&b| b as i8).collect()),
        };
        Grid::new(shape, data)
    }
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&grid.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Grid::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("<mem>")
    }

    #[test]
    fn f32_2x2_layout() {
        let g = Grid::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = g.to_bytes();
        // 4 magic + version + dtype + ndim + two u32 dims
        assert_eq!(g.header_len(), 15);
        assert_eq!(bytes.len(), 15 + 16);
        assert_eq!(&bytes[..7], b"GRID\x01\x00\x02");
        assert_eq!(&bytes[7..15], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(Grid::from_bytes(&bytes, p()).unwrap(), g);
    }

    #[test]
    fn i8_payload_is_twos_complement() {
        let g = Grid::from_i8(vec![3], vec![-1, 0, 1]).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[g.header_len()..], &[0xFF, 0x00, 0x01]);
    }

    #[test]
    fn f64_half_payload() {
        let g = Grid::from_f64(vec![1], vec![0.5]).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(
            &bytes[g.header_len()..],
            &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xE0, 0x3F]
        );
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Grid::from_i8(vec![1], vec![3]).unwrap().to_bytes();
        bytes[3] = b'X';
        assert!(matches!(
            Grid::from_bytes(&bytes, p()),
            Err(Error::BadMagic { found, .. }) if &found == b"GRIX"
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let g = Grid::from_f32(vec![2, 2], vec![0.0; 4]).unwrap();
        let bytes = g.to_bytes();
        let cut = &bytes[..g.header_len() + 8];
        assert!(matches!(
            Grid::from_bytes(cut, p()),
            Err(Error::Truncated { expected: 31, found: 23, .. })
        ));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes = Grid::from_i8(vec![1], vec![3]).unwrap().to_bytes();
        bytes[5] = 9;
        assert!(matches!(
            Grid::from_bytes(&bytes, p()),
            Err(Error::UnknownDType { code: 9, .. })
        ));
    }

    #[test]
    fn rejects_invalid_shapes() {
        assert!(Grid::from_f64(vec![], vec![]).is_err());
        assert!(Grid::from_f64(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Grid::from_f64(vec![2, 0], vec![]).is_err());
        assert!(Grid::from_f64(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn file_round_trip_and_io_error_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grid");
        let g = Grid::from_f64(vec![2, 3], (0..6).map(|i| i as f64 * 0.25).collect()).unwrap();
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);

        let missing = dir.path().join("nope/g.grid");
        let err = write_grid(&g, &missing).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(GridData::F32),
                prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
                    .prop_map(GridData::F64),
                prop::collection::vec(any::<i8>(), n).prop_map(GridData::I8),
            ]
            .prop_map(move |data| Grid::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(g in arb_grid()) {
            let back = Grid::from_bytes(&g.to_bytes(), p()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
