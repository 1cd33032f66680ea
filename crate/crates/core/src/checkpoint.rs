//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "GWCKPT\0\0"
//! version u32      1
//! count   u32      number of records
//! record  path_len u32, path (utf-8), ndim u32, dims u64 * ndim,
//!         values f64 * prod(dims)
//! ```
//!
//! Records are written in path order: backbone tensors, a `meta.config`
//! record describing the architecture, then the trainable tensors.

use std::fs;
use std::path::Path;

use crate::adapters::AdapterConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{AdapterKind, ModelParams, NetConfig, BACKBONE};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GWCKPT\0\0";
pub const VERSION: u32 = 1;
const META_CONFIG: &str = "meta.config";

fn config_record(c: &NetConfig) -> Tensor {
    let kind = match c.adapter_kind {
        AdapterKind::Vanilla => 0.0,
        AdapterKind::Decoupled => 1.0,
    };
    let values = vec![
        c.height as f64,
        c.width as f64,
        c.patch as f64,
        c.d as f64,
        c.layers as f64,
        c.decoder_hidden as f64,
        c.adapter.d_hat as f64,
        kind,
        c.adapter.alpha_for,
        c.adapter.alpha_back,
        c.adapter.beta,
    ];
    Tensor::from_raw(vec![values.len()], values)
}

fn config_from_record(t: &Tensor) -> Result<NetConfig> {
    let v = t.data();
    if v.len() != 11 {
        return Err(Error::format("checkpoint", "meta.config has wrong length"));
    }
    let int = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::format("checkpoint", format!("non-integer dimension {x}")))
        }
    };
    let adapter_kind = match v[7] {
        0.0 => AdapterKind::Vanilla,
        1.0 => AdapterKind::Decoupled,
        k => return Err(Error::format("checkpoint", format!("unknown adapter kind {k}"))),
    };
    let d = int(v[3])?;
    let config = NetConfig {
        height: int(v[0])?,
        width: int(v[1])?,
        patch: int(v[2])?,
        d,
        layers: int(v[4])?,
        decoder_hidden: int(v[5])?,
        adapter_kind,
        adapter: AdapterConfig {
            d,
            d_hat: int(v[6])?,
            alpha_for: v[8],
            alpha_back: v[9],
            beta: v[10],
        },
    };
    config.validate()?;
    Ok(config)
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let mut records: Vec<(&str, &Tensor)> = Vec::new();
    let meta = config_record(&model.config);
    records.extend(model.backbone.iter().map(|(k, v)| (k.as_str(), v)));
    records.push((META_CONFIG, &meta));
    records.extend(model.trainable.iter().map(|(k, v)| (k.as_str(), v)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (path, t) in records {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut backbone = ParamStore::new();
    let mut trainable = ParamStore::new();
    let mut config = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "path is not utf-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("checkpoint", "shape overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "shape overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if path == META_CONFIG {
            config = Some(config_from_record(&tensor)?);
        } else if path.starts_with(&format!("{BACKBONE}.")) {
            backbone.insert(path, tensor);
        } else {
            trainable.insert(path, tensor);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    let config = config.ok_or_else(|| Error::format("checkpoint", "missing meta.config"))?;
    let model = ModelParams {
        config,
        backbone,
        trainable,
    };
    model.check_structure()?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        for kind in [AdapterKind::Vanilla, AdapterKind::Decoupled] {
            let config = NetConfig {
                adapter_kind: kind,
                ..NetConfig::default()
            };
            let model = ModelParams::init(config, 17).unwrap();
            let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
            assert_eq!(back.config, model.config);
            for (a, b) in model.trainable.values().chain(model.backbone.values()).zip(
                back.trainable.values().chain(back.backbone.values()),
            ) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = ModelParams::init(NetConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn missing_tensor_is_a_structure_error() {
        let mut model = ModelParams::init(NetConfig::default(), 1).unwrap();
        model.trainable.remove("theta_D.b2");
        assert!(decode_checkpoint(&encode_checkpoint(&model)).is_err());
    }
}
