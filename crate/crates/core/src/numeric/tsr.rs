//! `.tsr` tensor files: `u64` little-endian header length, a JSON header
//! `{dtype, shape, name}`, then the little-endian IEEE-754 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

pub const EXTENSION: &str = "tsr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsrHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub name: String,
}

pub fn encode(name: &str, t: &Tensor) -> Vec<u8> {
    let header = TsrHeader {
        dtype: "f64".into(),
        shape: t.shape().to_vec(),
        name: name.into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * t.numel());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(String, Tensor)> {
    let corrupt = |m: &str| Error::Schema {
        field: "tsr".into(),
        message: m.into(),
    };
    if bytes.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: TsrHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if header.dtype != "f64" {
        return Err(Error::Schema {
            field: "dtype".into(),
            message: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    let payload = &bytes[8 + hlen..];
    let numel: usize = header.shape.iter().product();
    if payload.len() != numel * 8 {
        return Err(corrupt(&format!(
            "payload holds {} bytes, shape needs {}",
            payload.len(),
            numel * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header.name, Tensor::new(header.shape, data)?))
}

pub fn write(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    fs::write(path, encode(name, t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(String, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut r = crate::numeric::rng::Rng::new(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| r.normal(0.0, 1e3)).collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let (name, back) = decode(&encode("w", &t)).unwrap();
            prop_assert_eq!(name, "w");
            prop_assert_eq!(back.checksum(), t.checksum());
        }
    }

    #[test]
    fn rejects_short_payload() {
        let t = Tensor::zeros(&[3]);
        let mut bytes = encode("x", &t);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
