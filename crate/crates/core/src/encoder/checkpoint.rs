//! Versioned binary checkpoint.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | header_len u64 | header JSON | tensor_count u32 | tensors`,
//! where each tensor is `name_len u32 | name | ndim u32 | dims u64* | data`.
//! Tensors are every encoder tensor (including running statistics) followed by
//! the Adam first and second moments of each trainable tensor.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, Encoder, EncoderConfig, Real};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSKWSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    encoder: EncoderConfig,
    step: u64,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    rng: Option<StreamRng>,
    meta: serde_json::Value,
}

/// Everything needed to resume training or to run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub encoder: Encoder<F>,
    pub adam: AdamState<F>,
    pub step: u64,
    pub rng: Option<StreamRng>,
    /// Free-form metadata (resolved training config, etc).
    pub meta: serde_json::Value,
}

fn put_tensor<F: Real>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[F]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor_into<F: Real>(&mut self, name: &str, shape: &[usize], dst: &mut [F]) -> Result<()> {
        let n = self.u32()? as usize;
        let got = std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let ndim = self.u32()? as usize;
        let dims = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
        }
        let raw = self.take(dst.len() * F::BYTES)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(F::BYTES)) {
            *d = F::read_le(chunk);
        }
        Ok(())
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn new(encoder: Encoder<F>) -> Self {
        let adam = AdamState::new(&encoder);
        Self { encoder, adam, step: 0, rng: None, meta: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: F::DTYPE.to_string(),
            encoder: self.encoder.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params = self.encoder.params();
        let trainable: Vec<_> = params.iter().filter(|p| p.trainable).collect();
        let count = params.len() + 2 * trainable.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in &params {
            put_tensor(&mut out, &p.name, &p.shape, p.data);
        }
        for (p, m) in trainable.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("adam.m.{}", p.name), &p.shape, m);
        }
        for (p, v) in trainable.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("adam.v.{}", p.name), &p.shape, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        if header.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, expected {}", header.dtype, F::DTYPE)));
        }
        let mut encoder = Encoder::<F>::zeros(&header.encoder)?;
        let mut adam = AdamState::new(&encoder);
        adam.step = header.adam_step;
        adam.beta1 = header.adam_beta1;
        adam.beta2 = header.adam_beta2;
        adam.eps = header.adam_eps;
        let count = r.u32()? as usize;
        let shapes: Vec<(String, Vec<usize>, bool)> =
            encoder.params().iter().map(|p| (p.name.clone(), p.shape.clone(), p.trainable)).collect();
        let n_train = shapes.iter().filter(|s| s.2).count();
        if count != shapes.len() + 2 * n_train {
            return Err(Error::Checkpoint(format!("tensor count {count} does not match the encoder config")));
        }
        for p in encoder.params_mut() {
            r.tensor_into(&p.name, &p.shape, p.data)?;
        }
        let trainable: Vec<_> = shapes.iter().filter(|s| s.2).collect();
        for ((name, shape, _), m) in trainable.iter().zip(adam.m.iter_mut()) {
            r.tensor_into(&format!("adam.m.{name}"), shape, m)?;
        }
        for ((name, shape, _), v) in trainable.iter().zip(adam.v.iter_mut()) {
            r.tensor_into(&format!("adam.v.{name}"), shape, v)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self { encoder, adam, step: header.step, rng: header.rng, meta: header.meta })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path.as_ref(), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write through a temporary sibling file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
