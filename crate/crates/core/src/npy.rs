//! Reader and writer for the NumPy `.npy` array container.
//!
//! Supported: little-endian `<f4`, `<f8`, `<i8`; C order; 1-D and 2-D
//! shapes. Files are written as version 1.0 with the header padded by spaces
//! to a 64-byte boundary; versions 1.0, 2.0 and 3.0 are read. Matrices can be
//! streamed in row chunks for out-of-core fitting.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gaussian::ChunkSource;
use crate::matrix::{Labels, RowMatrix};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
            Dtype::I64 => "<i8",
        }
    }

    pub fn from_descr(descr: &str) -> Option<Self> {
        match descr {
            "<f4" => Some(Dtype::F32),
            "<f8" => Some(Dtype::F64),
            "<i8" => Some(Dtype::I64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f4" | "f32" | "float32" | "<f4" => Ok(Dtype::F32),
            "f8" | "f64" | "float64" | "<f8" => Ok(Dtype::F64),
            "i8" | "i64" | "int64" | "<i8" => Ok(Dtype::I64),
            other => Err(Error::InvalidConfig(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn decode(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I64 => ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Values as `f64`; `f32` widens exactly, `i64` converts.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// A decoded array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "shape {shape:?} does not describe {} 1-D or 2-D elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &RowMatrix, dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::F64 => ArrayData::F64(m.as_slice().to_vec()),
            Dtype::F32 => ArrayData::F32(m.as_slice().iter().map(|&v| v as f32).collect()),
            Dtype::I64 => ArrayData::I64(m.as_slice().iter().map(|&v| v as i64).collect()),
        };
        Self {
            shape: vec![m.n_rows(), m.dim()],
            data,
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: ArrayData::F64(v.to_vec()),
        }
    }

    pub fn from_labels(v: &[i64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: ArrayData::I64(v.to_vec()),
        }
    }

    /// Rows and columns; a 1-D array is a single column.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [n, d] => (*n, *d),
            _ => unreachable!("validated on construction"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadOptions {
    /// Convert `<f4` payloads to `f64` while reading.
    pub widen_f32: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self { widen_f32: true }
    }
}

/// Parsed header: dtype, shape and where the payload starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offset: u64,
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * self.dtype.size() as u64
    }
}

fn malformed(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

/// Minimal parser for the Python dict literal in the header.
struct DictParser<'a> {
    s: &'a [u8],
    pos: usize,
    base: u64,
    path: &'a Path,
}

#[derive(Debug)]
enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl DictParser<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        malformed(self.path, self.base + self.pos as u64, reason)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {:?}", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let q = self.peek().ok_or_else(|| self.err("unexpected end"))?;
        if q != b'\'' && q != b'"' {
            return Err(self.err("expected a quoted string"));
        }
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != q {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(self.err("unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
        // tolerate the "L" suffix written by old Python 2 numpy
        if self.s.get(self.pos) == Some(&b'L') {
            self.pos += 1;
        }
        text.parse()
            .map_err(|_| self.err("expected a non-negative integer"))
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some(b'\'') | Some(b'"') => Ok(Value::Str(self.string()?)),
            Some(b'(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    dims.push(self.integer()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                Ok(Value::Tuple(dims))
            }
            _ => {
                let rest = &self.s[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Value::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Value::Bool(false))
                } else {
                    Err(self.err("unsupported value in header"))
                }
            }
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, Value)>> {
        self.expect(b'{')?;
        let mut items = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            items.push((key, self.value()?));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        Ok(items)
    }
}

/// Reads and validates the header from `r`, which must be at offset 0.
pub fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut prefix = [0u8; 8];
    let got = read_fully(r, &mut prefix).map_err(io)?;
    if got < 6 || &prefix[..6] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
        });
    }
    if got < 8 {
        return Err(malformed(
            path,
            got as u64,
            "file ends inside the version field",
        ));
    }
    let (major, minor) = (prefix[6], prefix[7]);
    let len_bytes = match (major, minor) {
        (1, 0) => 2,
        (2, 0) | (3, 0) => 4,
        _ => {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                offset: 6,
                major,
                minor,
            })
        }
    };
    let mut len_buf = [0u8; 4];
    if read_fully(r, &mut len_buf[..len_bytes]).map_err(io)? < len_bytes {
        return Err(malformed(path, 8, "file ends inside the header length"));
    }
    let header_len = if len_bytes == 2 {
        u16::from_le_bytes([len_buf[0], len_buf[1]]) as usize
    } else {
        u32::from_le_bytes(len_buf) as usize
    };
    let header_start = (8 + len_bytes) as u64;
    let mut header = vec![0u8; header_len];
    let got = read_fully(r, &mut header).map_err(io)?;
    if got < header_len {
        return Err(malformed(
            path,
            header_start + got as u64,
            format!("file ends inside the {header_len}-byte header"),
        ));
    }
    let mut p = DictParser {
        s: &header,
        pos: 0,
        base: header_start,
        path,
    };
    let items = p.dict()?;
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    for (k, v) in items {
        match (k.as_str(), v) {
            ("descr", Value::Str(s)) => descr = Some(s),
            ("fortran_order", Value::Bool(b)) => fortran = Some(b),
            ("shape", Value::Tuple(t)) => shape = Some(t),
            (key, _) => {
                return Err(malformed(
                    path,
                    header_start,
                    format!("unexpected key or value type for {key:?}"),
                ))
            }
        }
    }
    let descr = descr.ok_or_else(|| malformed(path, header_start, "missing 'descr'"))?;
    let fortran =
        fortran.ok_or_else(|| malformed(path, header_start, "missing 'fortran_order'"))?;
    let shape = shape.ok_or_else(|| malformed(path, header_start, "missing 'shape'"))?;
    let dtype = Dtype::from_descr(&descr).ok_or_else(|| Error::UnsupportedDtype {
        path: path.to_path_buf(),
        offset: header_start,
        descr: descr.clone(),
    })?;
    if fortran {
        return Err(Error::FortranOrderUnsupported {
            path: path.to_path_buf(),
            offset: header_start,
        });
    }
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            shape,
        });
    }
    Ok(Header {
        dtype,
        shape,
        data_offset: header_start + header_len as u64,
    })
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a whole array.
pub fn read_array_with(path: impl AsRef<Path>, options: ReadOptions) -> Result<NpyArray> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let header = read_header(&mut r, path)?;
    let expected = header.payload_len();
    let mut bytes = vec![0u8; expected as usize];
    let got = read_fully(&mut r, &mut bytes).map_err(|e| Error::io(path, e))?;
    if (got as u64) < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            offset: header.data_offset + got as u64,
            expected,
        });
    }
    let mut extra = [0u8; 1];
    if read_fully(&mut r, &mut extra).map_err(|e| Error::io(path, e))? > 0 {
        log::warn!("{}: ignoring bytes after the payload", path.display());
    }
    let mut data = ArrayData::decode(header.dtype, &bytes);
    if options.widen_f32 {
        if let ArrayData::F32(v) = &data {
            data = ArrayData::F64(v.iter().map(|&x| x as f64).collect());
        }
    }
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    read_array_with(path, ReadOptions::default())
}

/// Reads a 2-D float array as a matrix (a 1-D array becomes one column).
pub fn read_matrix(path: impl AsRef<Path>) -> Result<RowMatrix> {
    let path = path.as_ref();
    let a = read_array(path)?;
    if a.data.dtype() == Dtype::I64 {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            offset: 0,
            descr: "<i8 (float features expected)".into(),
        });
    }
    let (n, d) = a.matrix_shape();
    if d == 0 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            shape: a.shape,
        });
    }
    RowMatrix::new(a.data.to_f64(), n, d).map_err(|e| e.context(path.display().to_string()))
}

/// Reads a 1-D float array.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let a = read_array(path)?;
    if a.shape.len() != 1 || a.data.dtype() == Dtype::I64 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            shape: a.shape,
        });
    }
    Ok(a.data.to_f64())
}

/// Reads a 1-D `<i8` label array.
pub fn read_labels(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<Labels> {
    let path = path.as_ref();
    let a = read_array(path)?;
    if a.shape.len() != 1 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            shape: a.shape,
        });
    }
    match a.data {
        ArrayData::I64(v) => {
            Labels::from_i64(&v, n_classes).map_err(|e| e.context(path.display().to_string()))
        }
        other => Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            offset: 0,
            descr: format!("{} (labels must be <i8)", other.dtype().descr()),
        }),
    }
}

/// Encodes a version 1.0 file.
pub fn encode(array: &NpyArray) -> Vec<u8> {
    let shape = match array.shape.as_slice() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        array.data.dtype().descr(),
        shape
    );
    // magic(6) + version(2) + len(2) + header + '\n' is a multiple of ALIGN
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((ALIGN - total % ALIGN) % ALIGN));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + array.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend(array.data.encode());
    out
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_array(path: impl AsRef<Path>, array: &NpyArray) -> Result<()> {
    atomic_write(path, &encode(array))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &RowMatrix, dtype: Dtype) -> Result<()> {
    write_array(path, &NpyArray::from_matrix(m, dtype))
}

pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    write_array(path, &NpyArray::from_vector(v))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &Labels) -> Result<()> {
    let v: Vec<i64> = labels.values().iter().map(|&x| x as i64).collect();
    write_array(path, &NpyArray::from_labels(&v))
}

/// A 2-D feature file read in row chunks, paired with in-memory labels.
///
/// Each pass reopens the file, so memory use is bounded by the chunk size.
pub struct NpyChunkSource {
    path: PathBuf,
    header: Header,
    labels: Labels,
    chunk_rows: usize,
}

impl NpyChunkSource {
    pub fn open(path: impl AsRef<Path>, labels: Labels, chunk_rows: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = read_header(&mut open(&path)?, &path)?;
        let (n, d) = match header.shape.as_slice() {
            [n, d] => (*n, *d),
            _ => {
                return Err(Error::UnsupportedShape {
                    path,
                    shape: header.shape,
                })
            }
        };
        if header.dtype == Dtype::I64 || d == 0 {
            return Err(Error::UnsupportedDtype {
                path,
                offset: 0,
                descr: format!(
                    "{} with width {d} (float features expected)",
                    header.dtype.descr()
                ),
            });
        }
        labels.require_rows(n)?;
        Ok(Self {
            path,
            header,
            labels,
            chunk_rows: chunk_rows.max(1),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.header.shape[0]
    }
}

impl ChunkSource for NpyChunkSource {
    fn dim(&self) -> usize {
        self.header.shape[1]
    }

    fn n_classes(&self) -> usize {
        self.labels.n_classes()
    }

    fn for_each_chunk(&self, f: &mut dyn FnMut(&RowMatrix, &[usize]) -> Result<()>) -> Result<()> {
        let mut r = open(&self.path)?;
        read_header(&mut r, &self.path)?;
        let (n, d) = (self.n_rows(), self.dim());
        let size = self.header.dtype.size();
        let mut offset = self.header.data_offset;
        let mut start = 0;
        let mut buf = Vec::new();
        while start < n {
            let rows = self.chunk_rows.min(n - start);
            buf.resize(rows * d * size, 0);
            let got = read_fully(&mut r, &mut buf).map_err(|e| Error::io(&self.path, e))?;
            if got < buf.len() {
                return Err(Error::TruncatedPayload {
                    path: self.path.clone(),
                    offset: offset + got as u64,
                    expected: self.header.payload_len(),
                });
            }
            offset += got as u64;
            let values = ArrayData::decode(self.header.dtype, &buf).to_f64();
            let chunk = RowMatrix::new(values, rows, d).map_err(|e| {
                e.context(format!(
                    "{} rows {start}..{}",
                    self.path.display(),
                    start + rows
                ))
            })?;
            f(&chunk, &self.labels.values()[start..start + rows])?;
            start += rows;
        }
        Ok(())
    }
}
