//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SL2L" | version u32 | kind u8 | width u8 (4 or 8)
//! meta_len u32 | meta (TOML)
//! count u32 | count x (name_len u32 | name | tag u8 | ndim u32 | dims u64.. | values)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! An adapter checkpoint holds only `A`/`B` tensors and is applied on top of
//! the base weights it was trained on, identified by `base_digest`. A full
//! checkpoint holds every tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, ParamKind, SegModel};
use crate::error::{Error, Result};
use crate::lora::{inject, load_adapter_tensors, LoraConfig};
use crate::numerics::Tensor;
use crate::pretrain::PretrainConfig;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SL2L";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Adapter,
}

/// Configuration stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Present when adapters are attached.
    pub lora: Option<LoraConfig>,
    /// How the base weights were pretrained, for full checkpoints of a base.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// `base_digest` of the weights an adapter checkpoint was trained on.
    #[serde(default)]
    pub base_digest: Option<String>,
    /// Free-form label; training runs store the ablation mode here.
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, ParamKind, Tensor<f64>)>,
}

fn kind_tag(k: ParamKind) -> u8 {
    match k {
        ParamKind::Base => 0,
        ParamKind::LoraA => 1,
        ParamKind::LoraB => 2,
    }
}

fn tag_kind(t: u8) -> Result<ParamKind> {
    match t {
        0 => Ok(ParamKind::Base),
        1 => Ok(ParamKind::LoraA),
        2 => Ok(ParamKind::LoraB),
        _ => Err(Error::Checkpoint(format!("unknown tensor tag {t}"))),
    }
}

impl Checkpoint {
    /// Snapshot of `model`; adapter checkpoints keep only adapter tensors.
    pub fn from_model<T: Scalar>(model: &SegModel<T>, kind: CheckpointKind, lora: Option<LoraConfig>) -> Self {
        let tensors = model
            .params
            .iter()
            .filter(|(_, p)| kind == CheckpointKind::Full || p.kind.is_adapter())
            .map(|(_, p)| (p.name.clone(), p.kind, p.tensor.cast::<f64>()))
            .collect();
        Checkpoint {
            kind,
            meta: CheckpointMeta {
                model: model.config().clone(),
                lora,
                pretrain: None,
                base_digest: Some(base_digest(model)),
                note: String::new(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self, width: usize) -> Result<Vec<u8>> {
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("value width must be 4 or 8, got {width}")));
        }
        let meta = toml::to_string(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Full => 0,
            CheckpointKind::Adapter => 1,
        });
        out.push(width as u8);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, kind, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind_tag(*kind));
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                if width == 4 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 14 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Full,
            1 => CheckpointKind::Adapter,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let width = r.u8()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("bad value width {width}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
        let meta: CheckpointMeta = toml::from_str(meta_text)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
                .to_owned();
            let pk = tag_kind(r.u8()?)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let data = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.push((name, pk, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { kind, meta, tensors })
    }

    /// Writes with the value width of `T`.
    pub fn save<T: Scalar>(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(std::mem::size_of::<T>())?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path.to_owned()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model. A full checkpoint carries every weight; an
    /// adapter checkpoint is applied to a freshly initialised base, which
    /// only works when it was trained on one (see `restore_onto`).
    pub fn restore<T: Scalar>(&self) -> Result<SegModel<T>> {
        let model = SegModel::<T>::new(&self.meta.model)?;
        self.restore_onto(model)
    }

    /// Applies the checkpoint on top of `base`. For adapter checkpoints the
    /// base weights must match the ones the adapters were trained on.
    pub fn restore_onto<T: Scalar>(&self, mut model: SegModel<T>) -> Result<SegModel<T>> {
        if model.config() != &self.meta.model {
            return Err(Error::Checkpoint("base model config differs from the checkpoint".into()));
        }
        match self.kind {
            CheckpointKind::Adapter => {
                if let Some(want) = &self.meta.base_digest {
                    let got = base_digest(&model);
                    if &got != want {
                        return Err(Error::Checkpoint(format!(
                            "adapters were trained on base {want}, got base {got}; pass the matching base checkpoint"
                        )));
                    }
                }
                let lora = self
                    .meta
                    .lora
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("adapter checkpoint without a LoRA config".into()))?;
                inject(&mut model, lora)?;
                let tensors: Vec<(String, Tensor<T>)> =
                    self.tensors.iter().map(|(n, _, t)| (n.clone(), t.cast())).collect();
                load_adapter_tensors(&mut model, &tensors)?;
            }
            CheckpointKind::Full => {
                if let Some(lora) = &self.meta.lora {
                    inject(&mut model, lora)?;
                }
                let expected = model.params.len();
                if expected != self.tensors.len() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint holds {} tensors, model expects {expected}",
                        self.tensors.len()
                    )));
                }
                for (name, _, t) in &self.tensors {
                    let id = model
                        .params
                        .find(name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
                    let slot = model.params.tensor_mut(id);
                    if slot.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.shape(), slot.shape())));
                    }
                    slot.data_mut().iter_mut().zip(t.data()).for_each(|(d, &s)| *d = T::lit(s));
                }
            }
        }
        Ok(model)
    }
}

/// Short SHA-256 over the names and single-precision values of the base
/// (non-adapter) weights.
pub fn base_digest<T: Scalar>(model: &SegModel<T>) -> String {
    let mut h = Sha256::new();
    for (_, p) in model.params.iter().filter(|(_, p)| !p.kind.is_adapter()) {
        h.update(p.name.as_bytes());
        for v in p.tensor.data() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
