//! `FieldPack` container: an 8-byte little-endian header length, a UTF-8 JSON
//! header, then a raw little-endian `f32` payload with no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array5;
use serde::{Deserialize, Serialize};

use super::series::FieldSeries;
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackHeader {
    pub shape: [usize; 5],
    pub dtype: String,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub producer: serde_json::Value,
}

impl PackHeader {
    pub fn for_series(series: &FieldSeries) -> Self {
        let c = series.channels();
        Self {
            shape: series.shape(),
            dtype: DTYPE_F32LE.to_string(),
            dx: series.dx,
            dy: series.dy,
            dt: series.dt,
            channels: (0..c).map(|i| format!("c{i}")).collect(),
            seed: None,
            producer: serde_json::Value::Null,
        }
    }

    pub fn with_channels(mut self, names: &[&str]) -> Self {
        self.channels = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_producer(mut self, producer: serde_json::Value) -> Self {
        self.producer = producer;
        self
    }
}

/// Writes a length-prefixed JSON header followed by an `f32le` payload.
pub fn write_container(path: &Path, header: &impl Serialize, payload: impl IntoIterator<Item = f32>) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a container written by [`write_container`], returning the raw JSON
/// header and the remaining payload bytes.
pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: "file shorter than the 8-byte header length".into(),
    })?;
    let len = u64::from_le_bytes(len);
    let file_len = std::fs::metadata(path)?.len();
    if len > file_len.saturating_sub(8) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("header length {len} exceeds file size {file_len}"),
        });
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let header: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut payload = Vec::with_capacity((file_len - 8 - len) as usize);
    input.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub fn decode_f32le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub fn fieldpack_write(path: &Path, series: &FieldSeries, header: &PackHeader) -> Result<()> {
    if header.shape != series.shape() {
        return Err(Error::shape(format!(
            "header shape {:?} does not match series shape {:?}",
            header.shape,
            series.shape()
        )));
    }
    if header.dtype != DTYPE_F32LE {
        return Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            found: header.dtype.clone(),
        });
    }
    write_container(path, header, series.values().iter().copied())
}

pub fn fieldpack_read(path: &Path) -> Result<(FieldSeries, PackHeader)> {
    let (raw, payload) = read_container(path)?;
    let header: PackHeader = serde_json::from_value(raw).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            found: header.dtype,
        });
    }
    let count: usize = header.shape.iter().product();
    let expected = 4 * count as u64;
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("payload has {found} bytes but header shape needs {expected}"),
        });
    }
    let values = Array5::from_shape_vec(header.shape, decode_f32le(&payload))
        .map_err(|e| Error::shape(e.to_string()))?;
    let series = FieldSeries::new(values, header.dx, header.dy, header.dt)?;
    Ok((series, header))
}
