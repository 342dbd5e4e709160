//! Binary tensor container (`.rvtc`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RVTC" | u32 version (=1) | u32 entry count
//! per entry: u16 name len | name | u8 dtype | u8 ndim | u64 dims[ndim] | payload
//! u64 meta len | meta (UTF-8 JSON)
//! ```
//!
//! Payloads are row-major. The reader never allocates more than the sizes the
//! header declares, and grows buffers only as bytes actually arrive, so a
//! corrupt length field cannot trigger a huge allocation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"RVTC";
pub const VERSION: u32 = 1;
pub const MAX_NAME_LEN: usize = 256;
pub const MAX_NDIM: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"RVTC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("tensor name is empty")]
    EmptyName,
    #[error("tensor name of {0} bytes exceeds {MAX_NAME_LEN}")]
    NameTooLong(usize),
    #[error("tensor name is not valid UTF-8")]
    NameNotUtf8,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("entry {name:?}: {ndim} dims exceeds {MAX_NDIM}")]
    TooManyDims { name: String, ndim: usize },
    #[error("entry {name:?}: dimension of size 0")]
    ZeroDim { name: String },
    #[error("entry {name:?}: element count overflows")]
    DimOverflow { name: String },
    #[error("entry {name:?}: payload is {actual} bytes, dims require {expected}")]
    PayloadMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("stream truncated while reading {0}")]
    Truncated(String),
    #[error("meta block is not valid UTF-8")]
    MetaNotUtf8,
    #[error("entry {name:?}: expected dtype {expected:?}, found {found:?}")]
    WrongDtype {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::I64),
            2 => Ok(DType::U8),
            t => Err(ContainerError::UnsupportedDtype(t)),
        }
    }
}

/// One tensor: dtype, shape and raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl TensorBlob {
    /// Builds a blob from raw payload bytes, checking the size contract.
    pub fn from_raw(dtype: DType, dims: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        let blob = Self {
            dtype,
            dims,
            payload,
        };
        blob.validate("<unnamed>")?;
        Ok(blob)
    }

    pub fn from_f32(dims: Vec<usize>, values: &[f32]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_raw(DType::F32, dims, payload)
    }

    pub fn from_i64(dims: Vec<usize>, values: &[i64]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_raw(DType::I64, dims, payload)
    }

    pub fn from_u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::from_raw(DType::U8, dims, values)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.payload.len() / self.dtype.size()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    fn check_dtype(&self, expected: DType, name: &str) -> Result<()> {
        if self.dtype != expected {
            return Err(ContainerError::WrongDtype {
                name: name.to_string(),
                expected,
                found: self.dtype,
            });
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.check_dtype(DType::F32, "<blob>")?;
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        self.check_dtype(DType::I64, "<blob>")?;
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn to_u8(&self) -> Result<&[u8]> {
        self.check_dtype(DType::U8, "<blob>")?;
        Ok(&self.payload)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.dims.len() > MAX_NDIM {
            return Err(ContainerError::TooManyDims {
                name: name.to_string(),
                ndim: self.dims.len(),
            });
        }
        if self.dims.contains(&0) {
            return Err(ContainerError::ZeroDim {
                name: name.to_string(),
            });
        }
        let expected = element_count(&self.dims)
            .and_then(|n| n.checked_mul(self.dtype.size()))
            .ok_or_else(|| ContainerError::DimOverflow {
                name: name.to_string(),
            })?;
        if expected != self.payload.len() {
            return Err(ContainerError::PayloadMismatch {
                name: name.to_string(),
                expected,
                actual: self.payload.len(),
            });
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(ContainerError::EmptyName);
    }
    if name.len() > MAX_NAME_LEN {
        return Err(ContainerError::NameTooLong(name.len()));
    }
    Ok(())
}

/// Insertion-ordered map of uniquely named tensors plus a JSON meta block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    entries: Vec<(String, TensorBlob)>,
    meta: String,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(meta: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            meta: meta.into(),
        }
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: impl Into<String>) {
        self.meta = meta.into();
    }

    pub fn insert(&mut self, name: impl Into<String>, blob: TensorBlob) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        blob.validate(&name)?;
        if self.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        self.entries.push((name, blob));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorBlob> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn require(&self, name: &str) -> Result<&TensorBlob> {
        self.get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    /// Typed accessor: the named entry as `f32` values plus its dims.
    pub fn f32_entry(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let blob = self.require(name)?;
        blob.check_dtype(DType::F32, name)?;
        Ok((blob.dims.clone(), blob.to_f32()?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBlob)> {
        self.entries.iter().map(|(n, b)| (n.as_str(), b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serializes `map` to `sink`, returning the number of bytes written.
pub fn write_container<W: Write>(map: &NamedTensorMap, mut sink: W) -> Result<u64> {
    for (name, blob) in &map.entries {
        validate_name(name)?;
        blob.validate(name)?;
    }
    let count = u32::try_from(map.entries.len()).map_err(|_| ContainerError::DimOverflow {
        name: "<entry count>".to_string(),
    })?;
    let mut written = 0u64;
    let mut put = |bytes: &[u8]| -> Result<()> {
        sink.write_all(bytes)?;
        written += bytes.len() as u64;
        Ok(())
    };
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&count.to_le_bytes())?;
    for (name, blob) in &map.entries {
        put(&(name.len() as u16).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&[blob.dtype as u8, blob.dims.len() as u8])?;
        for &d in &blob.dims {
            put(&(d as u64).to_le_bytes())?;
        }
        put(&blob.payload)?;
    }
    put(&(map.meta.len() as u64).to_le_bytes())?;
    put(map.meta.as_bytes())?;
    Ok(written)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, what: &dyn Fn() -> String) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ContainerError::Truncated(what()),
            _ => ContainerError::Io(e),
        })?;
        Ok(buf)
    }

    /// Reads `len` bytes, growing the buffer only as data arrives.
    fn bytes(&mut self, len: u64, what: &dyn Fn() -> String) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(len).read_to_end(&mut buf)?;
        if (buf.len() as u64) < len {
            return Err(ContainerError::Truncated(what()));
        }
        Ok(buf)
    }
}

/// Parses a container, validating every entry.
pub fn read_container<R: Read>(source: R) -> Result<NamedTensorMap> {
    let mut r = Reader { inner: source };
    let magic = r.exact::<4>(&|| "magic".to_string())?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.exact::<4>(&|| "version".to_string())?);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(r.exact::<4>(&|| "entry count".to_string())?);
    let mut map = NamedTensorMap::new();
    for index in 0..count {
        let name_len = u16::from_le_bytes(r.exact::<2>(&|| format!("name length of entry #{index}"))?);
        let raw_name = r.bytes(name_len as u64, &|| format!("name of entry #{index}"))?;
        let name = String::from_utf8(raw_name).map_err(|_| ContainerError::NameNotUtf8)?;
        validate_name(&name)?;
        let [tag, ndim] = r.exact::<2>(&|| format!("header of entry {name:?}"))?;
        let dtype = DType::from_tag(tag)?;
        let ndim = ndim as usize;
        if ndim > MAX_NDIM {
            return Err(ContainerError::TooManyDims { name, ndim });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(r.exact::<8>(&|| format!("dims of entry {name:?}"))?);
            let d = usize::try_from(d).map_err(|_| ContainerError::DimOverflow { name: name.clone() })?;
            if d == 0 {
                return Err(ContainerError::ZeroDim { name });
            }
            dims.push(d);
        }
        let payload_len = element_count(&dims)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| ContainerError::DimOverflow { name: name.clone() })?;
        let payload = r.bytes(payload_len as u64, &|| format!("payload of entry {name:?}"))?;
        if map.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        map.insert(
            name,
            TensorBlob {
                dtype,
                dims,
                payload,
            },
        )?;
    }
    let meta_len = u64::from_le_bytes(r.exact::<8>(&|| "meta length".to_string())?);
    let meta = r.bytes(meta_len, &|| "meta block".to_string())?;
    map.meta = String::from_utf8(meta).map_err(|_| ContainerError::MetaNotUtf8)?;
    Ok(map)
}

pub fn save(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_container(map, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    read_container(BufReader::new(File::open(path)?))
}

/// Fuzz harness: cuts a valid container at every byte offset and checks
/// that each prefix fails with a truncation error, and that the full stream
/// rewrites to the same bytes. Returns the number of offsets tried.
pub fn check_truncations(bytes: &[u8]) -> std::result::Result<usize, String> {
    let map = read_container(bytes).map_err(|e| format!("full stream: {e}"))?;
    let mut again = Vec::with_capacity(bytes.len());
    write_container(&map, &mut again).map_err(|e| format!("rewrite: {e}"))?;
    if again != bytes {
        return Err("rewrite differs from the original bytes".into());
    }
    for cut in 0..bytes.len() {
        match read_container(&bytes[..cut]) {
            Err(ContainerError::Truncated(_)) => {}
            Err(e) => return Err(format!("cut at {cut}: expected truncation, got {e}")),
            Ok(_) => return Err(format!("cut at {cut}: prefix parsed as a container")),
        }
    }
    Ok(bytes.len())
}
