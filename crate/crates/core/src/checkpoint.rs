//! Tensor files: one JSON header line followed by little-endian `f32` data.
//!
//! The header names the kind of network, its layer spec and the name and
//! shape of every tensor in the order the data follows.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub kind: String,
    pub spec: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Round every value to the nearest `f32`, so that saving is lossless.
pub fn quantize(tensors: Vec<ArrayViewMutD<'_, f64>>) {
    for mut t in tensors {
        t.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn write_tensors(
    path: impl AsRef<Path>,
    kind: &str,
    spec: serde_json::Value,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<()> {
    let header = TensorHeader {
        kind: kind.to_string(),
        spec,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, t) in tensors {
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<(TensorHeader, Vec<ArrayD<f64>>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: TensorHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    let mut data = &bytes[split + 1..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        if data.len() < len * 4 {
            return Err(Error::format(path, format!("tensor {} is truncated", entry.name)));
        }
        let values: Vec<f64> = data[..len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        data = &data[len * 4..];
        out.push(ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length matches shape"));
    }
    if !data.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", data.len())));
    }
    Ok((header, out))
}

/// Copy loaded tensors into `targets`, checking kind, count and shapes.
pub fn assign_tensors(
    path: impl AsRef<Path>,
    header: &TensorHeader,
    expected_kind: &str,
    loaded: Vec<ArrayD<f64>>,
    targets: Vec<ArrayViewMutD<'_, f64>>,
) -> Result<()> {
    let path = path.as_ref();
    if header.kind != expected_kind {
        return Err(Error::format(
            path,
            format!("expected a {expected_kind} file, found {}", header.kind),
        ));
    }
    if loaded.len() != targets.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {}", targets.len(), loaded.len()),
        ));
    }
    for ((src, mut dst), entry) in loaded.into_iter().zip(targets).zip(&header.tensors) {
        if src.shape() != dst.shape() {
            return Err(Error::format(
                path,
                format!("tensor {} has shape {:?}, expected {:?}", entry.name, src.shape(), dst.shape()),
            ));
        }
        dst.assign(&src);
    }
    Ok(())
}
