//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `FGSM1`, `u32` format version, model kind,
//! JSON metadata (model dimensions), vocabulary listing, parameter manifest
//! of `(name, rows, cols)`, `u64` value count, the values as `f32`, and a
//! trailing `u64` FNV-1a checksum of the value bytes. Strings are a `u32`
//! byte length followed by UTF-8.

use std::hash::Hasher;
use std::path::Path;

use factedit_tensor::{ParamStore, Tensor};
use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Error, Result};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 5] = b"FGSM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub vocab: Vec<String>,
    pub manifest: Vec<(String, (usize, usize))>,
    pub values: Vec<f32>,
}

fn checksum(values: &[f32]) -> u64 {
    let mut h = FnvHasher::default();
    for v in values {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        metadata: serde_json::Value,
        vocab: &Vocab,
        store: &ParamStore,
    ) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            metadata,
            vocab: vocab.tokens().to_vec(),
            manifest: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.shape()))
                .collect(),
            values: store
                .params()
                .iter()
                .flat_map(|p| p.value.data().iter().map(|&x| x as f32))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.metadata.to_string());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in &self.vocab {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for (name, (r, c)) in &self.manifest {
            put_str(&mut out, name);
            out.extend_from_slice(&(*r as u32).to_le_bytes());
            out.extend_from_slice(&(*c as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&checksum(&self.values).to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?)?;
        let vocab = (0..r.u32()?)
            .map(|_| r.string())
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            manifest.push((name, (rows, cols)));
        }
        let count = r.u64()? as usize;
        let expected: usize = manifest.iter().map(|(_, (a, b))| a * b).sum();
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {count} values but the manifest needs {expected}"
            )));
        }
        let bytes = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("payload too large".into()))?,
        )?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let stored = r.u64()?;
        if stored != checksum(&values) {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            metadata,
            vocab,
            manifest,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Copies the payload into a store with the identical manifest.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let layout: Vec<(String, (usize, usize))> = store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .collect();
        if layout != self.manifest {
            return Err(Error::Checkpoint(
                "parameter manifest does not match the model".into(),
            ));
        }
        let ids: Vec<_> = store.ids().collect();
        let mut offset = 0;
        for (id, (_, (r, c))) in ids.into_iter().zip(&self.manifest) {
            let n = r * c;
            let data = self.values[offset..offset + n]
                .iter()
                .map(|&v| v as f64)
                .collect();
            *store.get_mut(id)? = Tensor::new(*r, *c, data)?;
            offset += n;
        }
        Ok(())
    }
}

/// A model that can be rebuilt from its dimensions and a payload.
pub trait Persist: Sized {
    const KIND: &'static str;
    type Dims: Serialize + DeserializeOwned;

    fn dims(&self) -> Self::Dims;
    fn build(dims: Self::Dims) -> Self;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        let meta = serde_json::to_value(self.dims()).expect("dims serialize");
        Checkpoint::from_store(Self::KIND, meta, vocab, self.store())
    }

    /// Rebuilds the model (frozen) and its vocabulary.
    fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vocab)> {
        if ck.kind != Self::KIND {
            return Err(Error::Checkpoint(format!(
                "expected a `{}` checkpoint, found `{}`",
                Self::KIND,
                ck.kind
            )));
        }
        let dims: Self::Dims = serde_json::from_value(ck.metadata.clone())?;
        let mut model = Self::build(dims);
        ck.restore(model.store_mut())?;
        model.store_mut().freeze();
        Ok((model, Vocab::from_tokens(ck.vocab.clone())))
    }

    fn save(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        self.to_checkpoint(vocab).save(path)
    }

    fn load(path: &Path) -> Result<(Self, Vocab)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Persist for crate::stance::StanceModel {
    const KIND: &'static str = "stance";
    type Dims = crate::stance::StanceDims;

    fn dims(&self) -> Self::Dims {
        self.net.dims
    }
    fn build(dims: Self::Dims) -> Self {
        Self::new(dims, 0)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Persist for crate::masker::MaskerModel {
    const KIND: &'static str = "masker";
    type Dims = crate::masker::MaskerDims;

    fn dims(&self) -> Self::Dims {
        self.net.dims
    }
    fn build(dims: Self::Dims) -> Self {
        Self::new(dims, 0)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Persist for crate::generator::GeneratorModel {
    const KIND: &'static str = "generator";
    type Dims = crate::generator::GeneratorDims;

    fn dims(&self) -> Self::Dims {
        self.net.dims
    }
    fn build(dims: Self::Dims) -> Self {
        Self::new(dims, 0)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
