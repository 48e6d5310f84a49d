// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary array container used for checkpoints and edit factors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "KLOC" | version | header_len | header JSON | n_arrays |
//!   n_arrays × ( name_len | name UTF-8 | ndim | dims… | f32 data )
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KLOC";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a JSON header and named arrays.
pub fn encode<H: Serialize>(header: &H, arrays: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, arrays.len())?;
    for (name, t) in arrays {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Inverse of [`encode`].
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a kloc array file".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = r.u32()?;
    let header = serde_json::from_slice(r.take(hlen)?)?;
    let n = r.u32()?;
    let mut arrays = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let data = r
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, arrays))
}

pub fn parameters_to_bytes(params: &Parameters<f32>) -> Result<Vec<u8>> {
    encode(&params.config, &params.named_tensors())
}

pub fn parameters_from_bytes(bytes: &[u8]) -> Result<Parameters<f32>> {
    let (config, arrays): (ModelConfig, _) = decode(bytes)?;
    config.validate()?;
    let mut params = Parameters::<f32>::init(config, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if arrays.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "{} arrays stored, model has {}",
            arrays.len(),
            names.len()
        )));
    }
    for ((want, slot), (name, t)) in names.iter().zip(params.tensors_mut()).zip(arrays) {
        if *want != name {
            return Err(Error::Checkpoint(format!(
                "expected array {want}, found {name}"
            )));
        }
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    params.validate()?;
    Ok(params)
}

pub fn save(params: &Parameters<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, parameters_to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Parameters<f32>> {
    parameters_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Parameters<f32> {
        Parameters::init(
            ModelConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                vocab_size: 7,
                max_len: 5,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = tiny();
        let bytes = parameters_to_bytes(&p).unwrap();
        assert_eq!(&bytes[..4], b"KLOC");
        let q = parameters_from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(parameters_to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = parameters_to_bytes(&tiny()).unwrap();
        assert!(parameters_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parameters_from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        let mut longer = bytes;
        longer.push(0);
        assert!(parameters_from_bytes(&longer).is_err());
    }

    #[test]
    fn generic_arrays_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap();
        let bytes = encode(&serde_json::json!({"layer": 3}), &[("u".into(), &t)]).unwrap();
        let (h, arrays): (serde_json::Value, _) = decode(&bytes).unwrap();
        assert_eq!(h["layer"], 3);
        assert_eq!(arrays[0].0, "u");
        assert_eq!(arrays[0].1, t);
    }
}
