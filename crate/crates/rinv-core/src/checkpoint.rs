//! The "RINV" checkpoint container: named tensors plus a configuration
//! text section.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RINV"  magic
//! u32     format version (currently 1)
//! u64     tensor count
//! per tensor:
//!   u64       name length, then UTF-8 name bytes
//!   u64       rank, then one u64 per dimension
//!   u8        dtype tag (1 = f32, 2 = f64)
//!   payload   numel * width little-endian element bytes
//! "CFG0"  config section marker
//! u64     config text length, then UTF-8 config text
//! ```
//!
//! Loading converts elements through `f64` when the requested precision
//! differs from the stored one, so checkpoints trained at `f32` can be
//! audited at `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RINV";
pub const VERSION: u32 = 1;
const CONFIG_MAGIC: &[u8; 4] = b"CFG0";

/// Sanity bound rejecting absurd ranks from corrupt files.
const MAX_RANK: u64 = 16;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    /// Tensors in file order.
    pub tensors: Vec<(String, Tensor<T>)>,
    pub config_text: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copy every stored tensor into a parameter set built from the same
    /// configuration; names and shapes must match exactly.
    pub fn restore_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, tensor) in &self.tensors {
            let id = params.id_of(name).ok_or_else(|| {
                Error::contract(format!(
                    "checkpoint tensor {name:?} has no matching parameter"
                ))
            })?;
            let target = params.get_mut(id);
            if target.shape() != tensor.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {name:?} is {:?} but the model expects {:?}",
                    tensor.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(tensor.data());
        }
        Ok(())
    }
}

/// Serialize named tensors and a config text into container bytes.
pub fn render<'a, T: Scalar + 'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    config_text: &str,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(CONFIG_MAGIC);
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + len > self.bytes.len() {
            return Err(Error::format(
                self.at as u64,
                format!(
                    "truncated while reading {what}: need {len} bytes, have {}",
                    self.bytes.len() - self.at
                ),
            ));
        }
        let s = &self.bytes[self.at..self.at + len];
        self.at += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

/// Parse container bytes.
pub fn parse<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, at: 0 };
    let magic_at = c.at;
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(magic_at as u64, "bad container magic"));
    }
    let version_at = c.at;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_at as u64,
            format!("unsupported container version {version}, expected {VERSION}"),
        ));
    }
    let count = c.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u64("name length")? as usize;
        let name_at = c.at;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(name_at as u64, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank_at = c.at;
        let rank = c.u64("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                rank_at as u64,
                format!("tensor {name:?} has implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let dims_at = c.at;
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = c.u64("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::format(dims_at as u64, format!("tensor {name:?} dims overflow"))
            })?;
            shape.push(d);
        }
        let tag_at = c.at;
        let tag = c.take(1, "dtype tag")?[0];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| {
            Error::format(tag_at as u64, format!("unknown dtype tag {tag}"))
        })?;
        let payload = c.take(numel * dtype.byte_width(), "tensor payload")?;
        let data: Vec<T> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| T::fromf(f32::read_le(b) as f64))
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| T::fromf(f64::read_le(b)))
                .collect(),
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let cfg_at = c.at;
    if c.take(4, "config marker")? != CONFIG_MAGIC {
        return Err(Error::format(cfg_at as u64, "missing config section marker"));
    }
    let cfg_len = c.u64("config length")? as usize;
    let text_at = c.at;
    let config_text = std::str::from_utf8(c.take(cfg_len, "config text")?)
        .map_err(|_| Error::format(text_at as u64, "config text is not UTF-8"))?
        .to_string();
    if c.at != bytes.len() {
        return Err(Error::format(
            c.at as u64,
            format!("{} trailing bytes after config section", bytes.len() - c.at),
        ));
    }
    Ok(Checkpoint {
        tensors,
        config_text,
    })
}

/// Write a parameter set and its configuration to `path`.
pub fn save<T: Scalar>(params: &ParamSet<T>, config_text: &str, path: &Path) -> Result<()> {
    let pairs: Vec<(&str, &Tensor<T>)> = params
        .iter()
        .map(|(_, entry)| (entry.name.as_str(), &entry.value))
        .collect();
    std::fs::write(path, render(pairs, config_text))?;
    Ok(())
}

/// Load a container from `path`.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    parse(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Regularization;

    fn sample_params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add(
            "conv1.coef",
            Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, f64::MIN_POSITIVE, -1e300])
                .unwrap(),
            Regularization::ElasticNet,
        )
        .unwrap();
        p.add(
            "dense0.b",
            Tensor::new(vec![1], vec![0.125]).unwrap(),
            Regularization::None,
        )
        .unwrap();
        p
    }

    #[test]
    fn round_trip_preserves_tensors_and_config_bitwise() {
        let params = sample_params();
        let bytes = render(
            params.iter().map(|(_, e)| (e.name.as_str(), &e.value)),
            "answer = 42\n",
        );
        let loaded: Checkpoint<f64> = parse(&bytes).unwrap();
        assert_eq!(loaded.config_text, "answer = 42\n");
        assert_eq!(loaded.tensors.len(), 2);
        for (_, entry) in params.iter() {
            let got = loaded.tensor(&entry.name).unwrap();
            assert_eq!(got.shape(), entry.value.shape());
            assert_eq!(got.data(), entry.value.data());
        }
        // Rendering the loaded tensors reproduces the bytes exactly.
        let again = render(
            loaded.tensors.iter().map(|(n, t)| (n.as_str(), t)),
            &loaded.config_text,
        );
        assert_eq!(again, bytes);
    }

    #[test]
    fn restore_into_fills_a_freshly_built_parameter_set() {
        let params = sample_params();
        let bytes = render(
            params.iter().map(|(_, e)| (e.name.as_str(), &e.value)),
            "",
        );
        let loaded: Checkpoint<f64> = parse(&bytes).unwrap();
        let mut fresh = ParamSet::new();
        fresh
            .add("conv1.coef", Tensor::zeros(vec![2, 3]), Regularization::ElasticNet)
            .unwrap();
        fresh
            .add("dense0.b", Tensor::zeros(vec![1]), Regularization::None)
            .unwrap();
        loaded.restore_into(&mut fresh).unwrap();
        let id = fresh.id_of("conv1.coef").unwrap();
        assert_eq!(fresh.get(id).data()[3], 3.75);

        let mut wrong_shape = ParamSet::new();
        wrong_shape
            .add("conv1.coef", Tensor::zeros(vec![3, 2]), Regularization::None)
            .unwrap();
        wrong_shape
            .add("dense0.b", Tensor::zeros(vec![1]), Regularization::None)
            .unwrap();
        let err = loaded.restore_into(&mut wrong_shape).unwrap_err().to_string();
        assert!(err.contains("conv1.coef"), "{err}");

        let mut missing = ParamSet::new();
        missing
            .add("dense0.b", Tensor::zeros(vec![1]), Regularization::None)
            .unwrap();
        assert!(loaded.restore_into(&mut missing).is_err());
    }

    #[test]
    fn corruption_is_reported_with_byte_offsets() {
        let params = sample_params();
        let good = render(
            params.iter().map(|(_, e)| (e.name.as_str(), &e.value)),
            "x = 1",
        );
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        match parse::<f64>(&bad_magic) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad_version = good.clone();
        bad_version[4] = 99;
        match parse::<f64>(&bad_version) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
        let truncated = &good[..good.len() - 3];
        match parse::<f64>(truncated) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(parse::<f64>(&trailing).is_err());
    }

    #[test]
    fn precision_converts_through_f64_on_load() {
        let mut p32 = ParamSet::<f32>::new();
        p32.add(
            "w",
            Tensor::new(vec![3], vec![0.5f32, -1.25, 3.0]).unwrap(),
            Regularization::L2,
        )
        .unwrap();
        let bytes = render(p32.iter().map(|(_, e)| (e.name.as_str(), &e.value)), "");
        let as64: Checkpoint<f64> = parse(&bytes).unwrap();
        assert_eq!(as64.tensor("w").unwrap().data(), &[0.5, -1.25, 3.0]);
        let as32: Checkpoint<f32> = parse(&bytes).unwrap();
        assert_eq!(as32.tensor("w").unwrap().data(), &[0.5f32, -1.25, 3.0]);
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rinv");
        let params = sample_params();
        save(&params, "seed = 7", &path).unwrap();
        let loaded: Checkpoint<f64> = load(&path).unwrap();
        assert_eq!(loaded.config_text, "seed = 7");
        assert_eq!(loaded.tensors.len(), 2);
    }
}
