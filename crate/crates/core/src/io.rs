//! Array container format, configuration files and CSV tables.
//!
//! A container is the 6-byte magic `FBC2C1`, a little-endian `u32` header
//! length, a UTF-8 JSON header, and a payload of row-major little-endian
//! `f64` arrays. The header lists every array as `{name, dtype, shape,
//! offset}` with byte offsets relative to the payload start, plus a free
//! `metadata` object. Arrays must tile the payload exactly.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::datagen::{FunctionDataset, SampleTag};
use crate::encoder::CoefficientMatrix;
use crate::error::{Error, Result};
use crate::neuralop::OperatorNet;

pub const MAGIC: &[u8; 6] = b"FBC2C1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayHeader>,
    metadata: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            [n] => Ok(DMatrix::from_row_slice(n, 1, &self.data)),
            _ => Err(Error::Format(format!("array `{}` is not a matrix (shape {:?})", self.name, self.shape))),
        }
    }
}

/// Named `f64` arrays with JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    arrays: Vec<Array>,
    pub metadata: Value,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        Self { arrays: Vec::new(), metadata: json!({}) }
    }

    pub fn with_metadata(metadata: Value) -> Self {
        Self { arrays: Vec::new(), metadata }
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "array `{name}` has {} elements but shape {shape:?}",
                data.len()
            )));
        }
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate array name `{name}`")));
        }
        self.arrays.push(Array { name: name.to_string(), shape, data });
        Ok(())
    }

    /// Stores a matrix in row-major order.
    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let data = m.transpose().as_slice().to_vec();
        self.push(name, vec![m.nrows(), m.ncols()], data)
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len()], v.to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str) -> Result<&Array> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        self.require(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.require(name)?.data.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let headers = self
            .arrays
            .iter()
            .map(|a| {
                let h = ArrayHeader { name: a.name.clone(), dtype: "f64".into(), shape: a.shape.clone(), offset };
                offset += 8 * a.data.len();
                h
            })
            .collect();
        let header = serde_json::to_vec(&Header { arrays: headers, metadata: self.metadata.clone() })
            .map_err(|e| Error::Format(e.to_string()))?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(10 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(Error::Format("not a container: bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("four bytes")) as usize;
        let header_end = 10usize
            .checked_add(len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[10..header_end]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut expected = 0usize;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for h in header.arrays {
            if h.dtype != "f64" {
                return Err(Error::Format(format!("array `{}` has unsupported dtype `{}`", h.name, h.dtype)));
            }
            if h.offset != expected {
                return Err(Error::Format(format!(
                    "array `{}` starts at byte {} but the previous array ends at {expected}",
                    h.name, h.offset
                )));
            }
            let count = h.shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
            let end = count
                .and_then(|c| c.checked_mul(8))
                .and_then(|b| b.checked_add(h.offset))
                .filter(|e| *e <= payload.len())
                .ok_or_else(|| Error::Format(format!("array `{}` runs past the payload", h.name)))?;
            let data = payload[h.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            expected = end;
            arrays.push(Array { name: h.name, shape: h.shape, data });
        }
        if expected != payload.len() {
            return Err(Error::Format(format!(
                "payload has {} bytes but arrays cover {expected}",
                payload.len()
            )));
        }
        Ok(Self { arrays, metadata: header.metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(Value::as_str)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!("expected a {kind} container, found {other:?}"))),
        }
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing or not an integer")))
    }
}

pub fn dataset_to_container(ds: &FunctionDataset) -> Result<Container> {
    let mut c = Container::with_metadata(json!({
        "kind": "dataset",
        "input_components": ds.input_components,
        "output_components": ds.output_components,
        "samples": ds.samples(),
        "train": ds.indices(SampleTag::Train).len(),
        "test": ds.indices(SampleTag::Test).len(),
        "extrapolation": ds.indices(SampleTag::Extrapolation).len(),
        "provenance": ds.provenance,
    }));
    c.push_matrix("input_points", &ds.input_points)?;
    c.push_matrix("output_points", &ds.output_points)?;
    c.push_matrix("inputs", &ds.inputs)?;
    c.push_matrix("outputs", &ds.outputs)?;
    c.push_vector("tags", &ds.tags.iter().map(|t| t.code()).collect::<Vec<_>>())?;
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<FunctionDataset> {
    c.expect_kind("dataset")?;
    let tags = c.vector("tags")?.into_iter().map(SampleTag::from_code).collect::<Result<Vec<_>>>()?;
    let ds = FunctionDataset {
        input_points: c.matrix("input_points")?,
        output_points: c.matrix("output_points")?,
        input_components: c.meta_usize("input_components")?,
        output_components: c.meta_usize("output_components")?,
        inputs: c.matrix("inputs")?,
        outputs: c.matrix("outputs")?,
        tags,
        provenance: c.metadata.get("provenance").cloned().unwrap_or(Value::Null),
    };
    ds.validate().map_err(|e| Error::Format(format!("inconsistent dataset container: {e}")))?;
    Ok(ds)
}

/// Coefficients plus the singular values of the design they were encoded
/// against; `extra` is merged into the metadata.
pub fn coefficients_to_container(
    coeffs: &CoefficientMatrix,
    design_singular_values: &[f64],
    tags: &[SampleTag],
    extra: Value,
) -> Result<Container> {
    let mut meta = json!({
        "kind": "coefficients",
        "components": coeffs.components,
        "basis": coeffs.basis,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    let mut c = Container::with_metadata(meta);
    c.push_matrix("coefficients", &coeffs.values)?;
    c.push_vector("design_singular_values", design_singular_values)?;
    c.push_vector("tags", &tags.iter().map(|t| t.code()).collect::<Vec<_>>())?;
    Ok(c)
}

pub fn coefficients_from_container(c: &Container) -> Result<DMatrix<f64>> {
    c.expect_kind("coefficients")?;
    c.matrix("coefficients")
}

pub fn checkpoint_to_container(net: &OperatorNet, epoch: usize, config_hash: &str) -> Result<Container> {
    let mut c = Container::with_metadata(json!({
        "kind": "checkpoint",
        "input_dim": net.input_dim(),
        "hidden_dim": net.hidden_dim(),
        "output_dim": net.output_dim(),
        "seed": net.seed(),
        "epoch": epoch,
        "config_hash": config_hash,
        "layout": "hidden_weights (H x m1), hidden_biases (H), output_weights (m2 x H), each column-major",
    }));
    c.push_vector("params", &net.flat_params())?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: OperatorNet,
    pub epoch: usize,
    pub config_hash: String,
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    c.expect_kind("checkpoint")?;
    let seed = c.metadata.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let net = OperatorNet::from_flat(
        c.meta_usize("input_dim")?,
        c.meta_usize("hidden_dim")?,
        c.meta_usize("output_dim")?,
        &c.vector("params")?,
        seed,
    )?;
    Ok(Checkpoint {
        net,
        epoch: c.meta_usize("epoch")?,
        config_hash: c.metadata.get("config_hash").and_then(Value::as_str).unwrap_or_default().to_string(),
    })
}

/// Parses a TOML config, reporting the offending field path on failure.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let field = unknown_field(&message).unwrap_or_else(|| "config".to_string());
        let location = e
            .span()
            .map(|s| {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                format!(" (line {line})")
            })
            .unwrap_or_default();
        Error::config(field, format!("{message}{location}"))
    })
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1).or_else(|| message.split("missing field `").nth(1))?;
    rest.split('`').next().map(str::to_string)
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Format(format!("cannot serialize config: {e}")))
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Writes a CSV file with the given header and numeric rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format_number(*v))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn format_number(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Reads a numeric CSV written by [`write_csv`]; empty cells become NaN.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let row = rec
            .iter()
            .map(|s| if s.is_empty() { Ok(f64::NAN) } else { s.parse().map_err(|_| Error::Format(format!("bad number `{s}`"))) })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
