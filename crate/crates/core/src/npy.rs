//! Reader and writer for NumPy `.npy` version 1.0 files.
//!
//! Only little-endian, C-ordered arrays of `f4`, `f8`, `i4` and `i8` are
//! supported. Headers are written the way NumPy writes them: a Python dict
//! literal padded with spaces and terminated by a newline so that the payload
//! starts on a 64-byte boundary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::I32 => "<i4",
            DType::I64 => "<i8",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            "<i4" => Ok(DType::I32),
            "<i8" => Ok(DType::I64),
            other => Err(Error::Format(format!("unsupported dtype descr '{other}'"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl NpyData {
    pub fn dtype(&self) -> DType {
        match self {
            NpyData::F32(_) => DType::F32,
            NpyData::F64(_) => DType::F64,
            NpyData::I32(_) => DType::I32,
            NpyData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::I32(v) => v.len(),
            NpyData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as 64-bit floats, whatever the stored type.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NpyData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NpyData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_i64(&self) -> Option<Vec<i64>> {
        match self {
            NpyData::I32(v) => Some(v.iter().map(|&x| i64::from(x)).collect()),
            NpyData::I64(v) => Some(v.clone()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(NpyArray { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header_text(self.data.dtype(), &self.shape);
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        match &self.data {
            NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN || &bytes[..6] != MAGIC {
            return Err(Error::Format("missing NPY magic".into()));
        }
        if bytes[6] != 1 || bytes[7] != 0 {
            return Err(Error::Format(format!(
                "unsupported NPY version {}.{}",
                bytes[6], bytes[7]
            )));
        }
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let payload_start = PREAMBLE_LEN + header_len;
        if bytes.len() < payload_start {
            return Err(Error::Format("truncated NPY header".into()));
        }
        let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_start])
            .map_err(|_| Error::Format("NPY header is not valid text".into()))?;
        let (dtype, fortran, shape) = parse_header(header)?;
        if fortran {
            return Err(Error::Format("fortran-ordered arrays are not supported".into()));
        }
        let n: usize = shape.iter().product();
        let payload = &bytes[payload_start..];
        if payload.len() != n * dtype.width() {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {} for shape {shape:?}",
                payload.len(),
                n * dtype.width()
            )));
        }
        let data = match dtype {
            DType::F32 => NpyData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => NpyData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => NpyData::I32(
                payload
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => NpyData::I64(
                payload
                    .chunks_exact(8)
                    .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(NpyArray { shape, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn header_text(dtype: DType, shape: &[usize]) -> String {
    let shape_text = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape_text}, }}",
        dtype.descr()
    );
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    header
}

fn value_after<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let at = quoted
        .iter()
        .find_map(|k| header.find(k.as_str()).map(|i| i + k.len()))
        .ok_or_else(|| Error::Format(format!("NPY header lacks key '{key}'")))?;
    let rest = header[at..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim_start)
        .ok_or_else(|| Error::Format(format!("malformed NPY header near '{key}'")))
}

fn parse_header(header: &str) -> Result<(DType, bool, Vec<usize>)> {
    let header = header.trim();
    if !header.starts_with('{') || !header.ends_with('}') {
        return Err(Error::Format("NPY header is not a dict literal".into()));
    }

    let descr_text = value_after(header, "descr")?;
    let quote = descr_text
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format("descr is not a string".into()))?;
    let descr = descr_text[1..]
        .split(quote)
        .next()
        .ok_or_else(|| Error::Format("unterminated descr".into()))?;
    let dtype = DType::from_descr(descr)?;

    let fortran_text = value_after(header, "fortran_order")?;
    let fortran = if fortran_text.starts_with("False") {
        false
    } else if fortran_text.starts_with("True") {
        true
    } else {
        return Err(Error::Format("fortran_order is not a boolean".into()));
    };

    let shape_text = value_after(header, "shape")?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, fortran, shape))
}

impl FeatureMap {
    pub fn to_npy(&self) -> NpyArray {
        NpyArray {
            shape: vec![self.channels(), self.height(), self.width()],
            data: NpyData::F32(self.data().to_vec()),
        }
    }

    /// Converts a 3-axis floating array; `f8` payloads are narrowed to `f4`.
    pub fn from_npy(array: NpyArray) -> Result<Self> {
        let [c, h, w] = array.shape[..] else {
            return Err(Error::Shape(format!(
                "feature tensors must have 3 axes (c, h, w), got shape {:?}",
                array.shape
            )));
        };
        let data = match array.data {
            NpyData::F32(v) => v,
            NpyData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            other => {
                return Err(Error::Format(format!(
                    "feature tensors must be floating point, got {:?}",
                    other.dtype()
                )))
            }
        };
        FeatureMap::new(c, h, w, data)
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureMap::from_npy(NpyArray::read(path)?)
}

pub fn save_tensor(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    map.to_npy().write(path)
}
