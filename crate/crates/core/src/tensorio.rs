//! Binary exchange formats.
//!
//! Tensor file (`RSGT`), little-endian:
//!
//! ```text
//! magic "RSGT" | version u32 = 1 | dtype u8 | ndim u8 | 2 zero bytes
//! dims: ndim × u64 | payload: row-major values
//! ```
//!
//! dtype 1 is `f32`, dtype 2 is `u8`.
//!
//! Store file (`RSDB`), little-endian:
//!
//! ```text
//! magic "RSDB" | version u32 = 1 | K u32 | D u32            (16-byte header)
//! metric u8 | flags u8 | 2 zero bytes
//! centroids: K × D f32 | mask scores: K f32 | crc32 u32
//! ```
//!
//! The CRC-32 (IEEE) covers every byte after the 16-byte header up to the checksum itself.

use std::fs;
use std::path::Path;

use crate::array::{Map, Matrix};
use crate::error::{Error, Result};
use crate::search::Metric;
use crate::store::ClusteredStore;

pub const TENSOR_MAGIC: [u8; 4] = *b"RSGT";
pub const STORE_MAGIC: [u8; 4] = *b"RSDB";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_FIXED_HEADER: usize = 12;
const STORE_HEADER: usize = 16;
const STORE_DESCRIPTOR: usize = 4;
const FLAG_NORMALIZED: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A dense tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::UnsupportedNdim(dims.len()));
        }
        let count = element_count(&dims)?;
        if count == 0 {
            return Err(Error::Shape(format!("zero-sized tensor {dims:?}")));
        }
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::f32(vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    /// Stores the map as `f32`.
    pub fn from_map(m: &Map) -> Result<Self> {
        Self::f32(
            vec![m.height(), m.width()],
            m.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    /// Values as `f32`; `u8` payloads are scaled by 1/255.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Interprets a 2-D `f32` tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let [rows, cols] = self.dims[..] else {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        };
        match &self.data {
            TensorData::F32(v) => Matrix::new(rows, cols, v.clone()),
            TensorData::U8(_) => Err(Error::Shape("expected f32 features, got u8".into())),
        }
    }

    /// Interprets a 2-D tensor as an image plane (`u8` scaled by 1/255).
    pub fn to_map(&self) -> Result<Map> {
        let [h, w] = self.dims[..] else {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        };
        let values = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&b| b as f64 / 255.0).collect(),
        };
        Map::new(h, w, values)
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimOverflow)
}

/// Serialized size of a tensor file in bytes.
pub fn tensor_file_size(dims: &[usize], dtype: DType) -> usize {
    TENSOR_FIXED_HEADER + 8 * dims.len() + dims.iter().product::<usize>() * dtype.size()
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor_file_size(&t.dims, t.dtype()));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let dtype = DType::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::UnsupportedNdim(ndim));
    }
    r.take(2)?;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.u64()?;
        dims.push(usize::try_from(d).map_err(|_| Error::DimOverflow)?);
    }
    let count = element_count(&dims)?;
    let payload_len = count.checked_mul(dtype.size()).ok_or(Error::DimOverflow)?;
    let payload = r.take(payload_len)?;
    r.finish()?;
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Serialized size of a store file with `k` centroids of dimension `dim`.
pub fn store_file_size(k: usize, dim: usize) -> usize {
    STORE_HEADER + STORE_DESCRIPTOR + 4 * k * dim + 4 * k + 4
}

pub fn encode_store(store: &ClusteredStore) -> Vec<u8> {
    let k = store.len();
    let dim = store.dim();
    let mut out = Vec::with_capacity(store_file_size(k, dim));
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(store.metric().code());
    out.push(if store.is_normalized() { FLAG_NORMALIZED } else { 0 });
    out.extend_from_slice(&[0, 0]);
    for x in store.centroids().as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for s in store.mask_scores() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[STORE_HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_store(bytes: &[u8]) -> Result<ClusteredStore> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if magic != STORE_MAGIC {
        return Err(Error::BadMagic {
            expected: STORE_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if k == 0 || dim == 0 {
        return Err(Error::Empty("store with zero entries or zero dimension"));
    }
    let expected = STORE_HEADER
        .checked_add(STORE_DESCRIPTOR)
        .and_then(|n| k.checked_mul(dim)?.checked_add(k)?.checked_mul(4)?.checked_add(n + 4))
        .ok_or(Error::DimOverflow)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            needed: expected,
            available: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after store",
            bytes.len() - expected
        )));
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[STORE_HEADER..expected - 4]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let metric = Metric::from_code(r.u8()?)?;
    let flags = r.u8()?;
    r.take(2)?;
    let centroids = r.f32_vec(k * dim)?;
    let scores = r.f32_vec(k)?;
    ClusteredStore::new(
        Matrix::new(k, dim, centroids)?,
        scores,
        metric,
        flags & FLAG_NORMALIZED != 0,
    )
}

/// Writes a store; the store invariants guarantee `K ≥ 1`.
pub fn write_store(path: impl AsRef<Path>, store: &ClusteredStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<ClusteredStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::DimOverflow)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::DimOverflow)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> ClusteredStore {
        ClusteredStore::new(
            Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            vec![0.25, 1.0],
            Metric::InnerProduct,
            false,
        )
        .unwrap()
    }

    #[test]
    fn smallest_tensor_layout() {
        let t = Tensor::f32(vec![1], vec![0.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"RSGT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..12], &[0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..], &[0, 0, 0, 0]);
    }

    #[test]
    fn payload_size_for_query_tokens() {
        assert_eq!(tensor_file_size(&[3136, 384], DType::F32), 12 + 16 + 4_816_896);
        let t = Tensor::f32(vec![3136, 384], vec![0.5; 3136 * 384]).unwrap();
        assert_eq!(encode_tensor(&t).len() - 28, 3136 * 384 * 4);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&Tensor::f32(vec![2], vec![1.0, 2.0]).unwrap());
        bytes[0] = b'X';
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_tensor(&Tensor::f32(vec![2, 2], vec![1.0; 4]).unwrap());
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn version_and_ndim_checks() {
        let mut bytes = encode_tensor(&Tensor::u8(vec![3], vec![1, 2, 3]).unwrap());
        bytes[4] = 2;
        assert!(matches!(decode_tensor(&bytes), Err(Error::VersionMismatch(2))));
        let mut bytes = encode_tensor(&Tensor::u8(vec![3], vec![1, 2, 3]).unwrap());
        bytes[9] = 5;
        assert!(matches!(decode_tensor(&bytes), Err(Error::UnsupportedNdim(5))));
        let mut bytes = encode_tensor(&Tensor::u8(vec![3], vec![1, 2, 3]).unwrap());
        bytes[8] = 9;
        assert!(matches!(decode_tensor(&bytes), Err(Error::UnsupportedDtype(9))));
        assert!(Tensor::f32(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::f32(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn dim_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RSGT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 0, 0]);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::DimOverflow)));
    }

    #[test]
    fn store_layout_and_round_trip() {
        let s = tiny_store();
        let bytes = encode_store(&s);
        assert_eq!(bytes.len(), store_file_size(2, 2));
        assert_eq!(bytes.len(), 16 + 4 + 16 + 8 + 4);
        assert_eq!(&bytes[..4], b"RSDB");
        assert_eq!(bytes[16], 0);
        let back = decode_store(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.mask_scores(), &[0.25, 1.0]);
        assert_eq!(back, s);
    }

    #[test]
    fn store_sizes_follow_layout() {
        assert_eq!(store_file_size(1024, 384), 16 + 4 + 1024 * 384 * 4 + 1024 * 4 + 4);
        assert_eq!(store_file_size(1024, 384), 1_576_984);
        assert_eq!(store_file_size(65536, 384), 100_925_464);
    }

    #[test]
    fn store_crc_mismatch() {
        let mut bytes = encode_store(&tiny_store());
        bytes[22] ^= 0x40;
        assert!(matches!(decode_store(&bytes), Err(Error::CrcMismatch { .. })));
    }

    #[test]
    fn store_rejects_out_of_range_score() {
        let mut bytes = encode_store(&tiny_store());
        let off = 20 + 16;
        bytes[off..off + 4].copy_from_slice(&1.5f32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[16..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_store(&bytes), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rsgt");
        let t = Tensor::f32(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let first = fs::read(&path).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(read_tensor(&path).unwrap(), t);

        let spath = dir.path().join("s.rsdb");
        write_store(&spath, &tiny_store()).unwrap();
        assert_eq!(read_store(&spath).unwrap(), tiny_store());
        assert!(read_tensor(dir.path().join("missing")).unwrap_err().is_io());
    }
}
