//! Dense tensor container, camera documents and dataset manifests.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `OCCT`                              |
//! | 4..6         | version, u16 (= 1)                        |
//! | 6            | dtype code (0 f32, 1 f64, 2 u8, 3 i64)    |
//! | 7            | rank r, 1..=8                             |
//! | 8..8+8r      | extents, u64 each                         |
//! | 8+8r..       | row-major payload, last axis fastest      |

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraModel};

pub const MAGIC: [u8; 4] = *b"OCCT";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 8;

/// Size of the fixed part of the header plus one u64 per extent.
pub const fn header_len(rank: usize) -> usize {
    8 + 8 * rank
}

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected \"OCCT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("invalid rank {0}, expected 1..=8")]
    InvalidRank(usize),
    #[error("invalid extent in dims {0:?}")]
    InvalidDims(Vec<u64>),
    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("expected dtype {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("malformed document: {0}")]
    Format(String),
    #[error("invalid camera: {0}")]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
    U8,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorIoError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            3 => Ok(DType::I64),
            other => Err(TensorIoError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Typed element buffer of a [`DenseTensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major dense tensor with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorIoError> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorIoError::InvalidRank(dims.len()));
        }
        if dims.contains(&0) {
            return Err(TensorIoError::InvalidDims(
                dims.iter().map(|&d| d as u64).collect(),
            ));
        }
        let count = element_count(&dims)?;
        if count != data.len() as u64 {
            return Err(TensorIoError::LengthMismatch {
                expected: count * data.dtype().size() as u64,
                found: (data.len() * data.dtype().size()) as u64,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorIoError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorIoError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, TensorData) {
        (self.dims, self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Float payload as f32; f64 payloads are narrowed, integer payloads rejected.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>, TensorIoError> {
        match &self.data {
            TensorData::F32(v) => Ok(v.clone()),
            TensorData::F64(v) => Ok(v.iter().map(|&x| x as f32).collect()),
            other => Err(TensorIoError::DtypeMismatch {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    /// Bitwise comparison; unlike `==`, NaN payloads with equal bits compare equal.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            (TensorData::F64(a), TensorData::F64(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

fn element_count(dims: &[usize]) -> Result<u64, TensorIoError> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| TensorIoError::InvalidDims(dims.iter().map(|&d| d as u64).collect()))
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<(), TensorIoError> {
        self.inner
            .write_all(bytes)
            .map_err(|source| TensorIoError::Io {
                offset: self.written,
                source,
            })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

const CHUNK_ELEMS: usize = 8192;

fn put_le<W: Write, T: Copy, const N: usize>(
    w: &mut CountingWriter<W>,
    values: &[T],
    to_le: impl Fn(T) -> [u8; N],
) -> Result<(), TensorIoError> {
    let mut buf = Vec::with_capacity(CHUNK_ELEMS.min(values.len()) * N);
    for chunk in values.chunks(CHUNK_ELEMS) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&to_le(v));
        }
        w.put(&buf)?;
    }
    Ok(())
}

/// Serializes `t` and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &DenseTensor, sink: W) -> Result<u64, TensorIoError> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    let mut header = Vec::with_capacity(header_len(t.rank()));
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(t.dtype().code());
    header.push(t.rank() as u8);
    for &d in &t.dims {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.put(&header)?;
    match &t.data {
        TensorData::F32(v) => put_le(&mut w, v, f32::to_le_bytes)?,
        TensorData::F64(v) => put_le(&mut w, v, f64::to_le_bytes)?,
        TensorData::U8(v) => w.put(v)?,
        TensorData::I64(v) => put_le(&mut w, v, i64::to_le_bytes)?,
    }
    w.inner.flush().map_err(|source| TensorIoError::Io {
        offset: w.written,
        source,
    })?;
    Ok(w.written)
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<(), TensorIoError> {
    r.read_exact(buf)
        .map_err(|source| TensorIoError::Io { offset, source })
}

fn decode<T, const N: usize>(bytes: &[u8], from_le: impl Fn([u8; N]) -> T) -> Vec<T> {
    bytes
        .chunks_exact(N)
        .map(|c| from_le(c.try_into().expect("chunk of N bytes")))
        .collect()
}

/// Parses a tensor; the stream must contain exactly one tensor and nothing else.
pub fn read_tensor<R: Read>(mut source: R) -> Result<DenseTensor, TensorIoError> {
    let mut fixed = [0u8; 8];
    read_exact_at(&mut source, &mut fixed, 0)?;
    let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(fixed[6])?;
    let rank = fixed[7] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorIoError::InvalidRank(rank));
    }
    let mut ext = vec![0u8; 8 * rank];
    read_exact_at(&mut source, &mut ext, 8)?;
    let raw_dims: Vec<u64> = decode(&ext, u64::from_le_bytes);
    if raw_dims.iter().any(|&d| d == 0 || d > usize::MAX as u64) {
        return Err(TensorIoError::InvalidDims(raw_dims));
    }
    let dims: Vec<usize> = raw_dims.iter().map(|&d| d as usize).collect();
    let expected = element_count(&dims)?
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| TensorIoError::InvalidDims(raw_dims.clone()))?;

    let mut payload = Vec::new();
    source
        .read_to_end(&mut payload)
        .map_err(|source| TensorIoError::Io {
            offset: header_len(rank) as u64,
            source,
        })?;
    if payload.len() as u64 != expected {
        return Err(TensorIoError::LengthMismatch {
            expected,
            found: payload.len() as u64,
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(decode(&payload, f32::from_le_bytes)),
        DType::F64 => TensorData::F64(decode(&payload, f64::from_le_bytes)),
        DType::U8 => TensorData::U8(payload),
        DType::I64 => TensorData::I64(decode(&payload, i64::from_le_bytes)),
    };
    DenseTensor::new(dims, data)
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<DenseTensor, TensorIoError> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|source| TensorIoError::Io { offset: 0, source })?;
    read_tensor(io::BufReader::new(file))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_tensor_file(t: &DenseTensor, path: impl AsRef<Path>) -> Result<u64, TensorIoError> {
    let mut buf = Vec::new();
    let n = write_tensor(t, &mut buf)?;
    write_atomic(path.as_ref(), &buf).map_err(|source| TensorIoError::Io { offset: 0, source })?;
    Ok(n)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

// ---------------------------------------------------------------------------
// Camera documents

/// Camera document as stored on disk, before any validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4x4 camera-to-world transform.
    pub cam_to_world: [f64; 16],
}

#[derive(Deserialize)]
struct RawCameraDoc {
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    width: Option<u32>,
    height: Option<u32>,
    cam_to_world: Option<Vec<Option<f64>>>,
}

impl CameraDoc {
    /// Parses without validating. Non-finite pose entries survive as NaN: `null`
    /// and the bare tokens `NaN`, `Infinity`, `-Infinity` are all read as NaN.
    pub fn parse(text: &str) -> Result<Self, TensorIoError> {
        let cleaned = replace_nonfinite_tokens(text);
        let raw: RawCameraDoc =
            serde_json::from_str(&cleaned).map_err(|e| TensorIoError::Format(e.to_string()))?;
        let missing =
            |name: &str| TensorIoError::Format(format!("missing intrinsics key `{name}`"));
        let fx = raw.fx.ok_or_else(|| missing("fx"))?;
        let fy = raw.fy.ok_or_else(|| missing("fy"))?;
        let cx = raw.cx.ok_or_else(|| missing("cx"))?;
        let cy = raw.cy.ok_or_else(|| missing("cy"))?;
        let width = raw.width.ok_or_else(|| missing("width"))?;
        let height = raw.height.ok_or_else(|| missing("height"))?;
        let pose = raw
            .cam_to_world
            .ok_or_else(|| TensorIoError::Format("missing key `cam_to_world`".into()))?;
        if pose.len() != 16 {
            return Err(TensorIoError::Format(format!(
                "cam_to_world has {} entries, expected 16",
                pose.len()
            )));
        }
        let mut cam_to_world = [0.0; 16];
        for (dst, src) in cam_to_world.iter_mut().zip(pose) {
            *dst = src.unwrap_or(f64::NAN);
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world,
        })
    }

    pub fn to_model(&self) -> Result<CameraModel, CameraError> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.cam_to_world,
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("camera doc serializes");
        s.push('\n');
        s
    }
}

impl From<&CameraModel> for CameraDoc {
    fn from(cam: &CameraModel) -> Self {
        Self {
            fx: cam.fx(),
            fy: cam.fy(),
            cx: cam.cx(),
            cy: cam.cy(),
            width: cam.width(),
            height: cam.height(),
            cam_to_world: cam.cam_to_world_row_major(),
        }
    }
}

/// Replaces bare JSON-extension tokens (outside string literals) with `null`.
fn replace_nonfinite_tokens(text: &str) -> String {
    const TOKENS: [&str; 5] = ["-Infinity", "Infinity", "-NaN", "NaN", "-inf"];
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
            out.push(c);
            rest = &rest[1..];
            continue;
        }
        if let Some(tok) = TOKENS.iter().find(|t| rest.starts_with(**t)) {
            out.push_str("null");
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Parses and validates a camera document.
pub fn read_camera(text: &str) -> Result<CameraModel, TensorIoError> {
    Ok(CameraDoc::parse(text)?.to_model()?)
}

// ---------------------------------------------------------------------------
// Dataset manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame_id: String,
    pub camera_file: String,
    pub depth_file: Option<String>,
    pub label_file: Option<String>,
    pub split: Split,
    /// `keep` or `reject`.
    pub verdict: String,
    /// `none`, `invalid_pose`, `out_of_bounds`, `empty_ratio` or `class_count`.
    pub reason: String,
    /// World position of the label grid's minimum corner, for kept frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_origin: Option<[f64; 3]>,
}

/// Record of one scene's frames, split and per-frame verdicts. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_dims: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<f64>,
    pub frames: Vec<ManifestFrame>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), TensorIoError> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.frames {
            if !seen.insert(f.frame_id.as_str()) {
                return Err(TensorIoError::Format(format!(
                    "duplicate frame_id `{}`",
                    f.frame_id
                )));
            }
            let paths = [
                Some(&f.camera_file),
                f.depth_file.as_ref(),
                f.label_file.as_ref(),
            ];
            for p in paths.into_iter().flatten() {
                if Path::new(p).is_absolute() {
                    return Err(TensorIoError::Format(format!(
                        "path `{p}` must be relative to the manifest"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, TensorIoError> {
        let m: Self =
            serde_json::from_str(text).map_err(|e| TensorIoError::Format(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Canonical serialization: fixed key order, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
