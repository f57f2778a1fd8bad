//! Checkpoint persistence, encoder-only weight transfer and freeze policies.
//!
//! Layout (all integers little-endian):
//! ```text
//! "EHCK" | u32 version | u32 meta_len | meta JSON
//! u32 n_tensors | per tensor: u32 name_len, name, u8 dtype, u32 ndim, u64 dims[ndim], f64 payload[numel]
//! u64 CRC-64 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EHCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ENCODER_PREFIX: &str = "encoder.";
const CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Pretraining: encoder, decoder and CTC head all update.
    Tl1,
    /// Pretraining: `decoder.` and `ctc_head.` stay at their initialization.
    Tl2,
    /// Downstream: every parameter updates.
    FinetuneEncoder,
    /// Downstream: `encoder.` stays fixed.
    FreezeEncoder,
}

impl FreezePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::Tl1 => "tl1",
            FreezePolicy::Tl2 => "tl2",
            FreezePolicy::FinetuneEncoder => "finetune_encoder",
            FreezePolicy::FreezeEncoder => "freeze_encoder",
        }
    }

    fn frozen_prefixes(self) -> &'static [&'static str] {
        match self {
            FreezePolicy::Tl1 | FreezePolicy::FinetuneEncoder => &[],
            FreezePolicy::Tl2 => &["decoder.", "ctc_head."],
            FreezePolicy::FreezeEncoder => &[ENCODER_PREFIX],
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tl1" => Ok(FreezePolicy::Tl1),
            "tl2" => Ok(FreezePolicy::Tl2),
            "finetune_encoder" => Ok(FreezePolicy::FinetuneEncoder),
            "freeze_encoder" => Ok(FreezePolicy::FreezeEncoder),
            other => Err(Error::Config(format!("unknown freeze policy '{other}'"))),
        }
    }
}

/// Marks every parameter trainable, then freezes the policy's prefixes.
/// Returns the number of frozen tensors.
pub fn apply_freeze(store: &mut ParamStore, policy: FreezePolicy) -> Result<usize> {
    for prefix in policy.frozen_prefixes() {
        if !store.iter().any(|(_, p)| p.name.starts_with(prefix)) {
            return Err(Error::UnknownParameter(format!(
                "policy {} freezes '{prefix}' but the model has no such parameters",
                policy.as_str()
            )));
        }
    }
    store.set_trainable_prefix("", true);
    Ok(policy
        .frozen_prefixes()
        .iter()
        .map(|p| store.set_trainable_prefix(p, false))
        .sum())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// "asr" or "depression".
    pub model_kind: String,
    pub seed: u64,
    /// Optimizer steps taken when written.
    pub step: u64,
    pub freeze_policy: Option<FreezePolicy>,
    /// Full effective configuration.
    pub config: serde_json::Value,
    /// Free-form extras (task, architecture, best epoch, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                dtype: DType::Float64,
                tensor: p.tensor.clone(),
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Overwrites every parameter of `store`; names and shapes must match
    /// one-to-one. Nothing is modified on error.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let mut plan = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let id = store.id(&t.name).ok_or_else(|| Error::UnknownParameter(t.name.clone()))?;
            check_shape(&t.name, t.tensor.shape(), store.get(id).tensor.shape())?;
            plan.push((id, &t.tensor));
        }
        for (id, t) in plan {
            store.get_mut(id).tensor = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.tensor.ndim() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Magic {
                what: "checkpoint",
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Data(format!("unknown dtype code {code}")))?;
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or(Error::Truncated("tensor payload"))?;
            let payload = r.take(numel * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let body_end = r.pos;
        let stored = r.u64("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        let computed = CRC.checksum(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tensors.iter().find(|t| !seen.insert(&t.name)) {
            return Err(Error::Data(format!("duplicate tensor name {}", dup.name)));
        }
        Ok(Self { meta, tensors })
    }

    /// Written via a temporary sibling and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// CRC-64 of the serialized file.
    pub fn checksum(&self) -> Result<u64> {
        let b = self.to_bytes()?;
        Ok(u64::from_le_bytes(b[b.len() - 8..].try_into().expect("8 bytes")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn check_shape(name: &str, source: &[usize], dest: &[usize]) -> Result<()> {
    if source != dest {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            source_shape: source.to_vec(),
            dest_shape: dest.to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub values: usize,
}

/// Copies all and only `encoder.` tensors from `source` into `dest`.
///
/// Every source encoder tensor needs a same-named, same-shaped destination
/// tensor and vice versa; any mismatch aborts before anything is written.
pub fn transfer_encoder(source: &Checkpoint, dest: &mut ParamStore) -> Result<TransferReport> {
    for (_, p) in dest.iter() {
        if p.name.starts_with("decoder.") || p.name.starts_with("ctc_head.") {
            return Err(Error::Data(format!("downstream model must not contain {}", p.name)));
        }
    }
    let mut plan = Vec::new();
    for t in source.tensors.iter().filter(|t| t.name.starts_with(ENCODER_PREFIX)) {
        let id = dest.id(&t.name).ok_or_else(|| Error::UnknownParameter(t.name.clone()))?;
        check_shape(&t.name, t.tensor.shape(), dest.get(id).tensor.shape())?;
        plan.push((id, t));
    }
    if plan.is_empty() {
        return Err(Error::Data("source checkpoint has no encoder tensors".into()));
    }
    let dest_encoder = dest.iter().filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX)).count();
    if dest_encoder != plan.len() {
        return Err(Error::Data(format!(
            "destination has {dest_encoder} encoder tensors, source provides {}",
            plan.len()
        )));
    }
    let mut report = TransferReport {
        copied: Vec::new(),
        values: 0,
    };
    for (id, t) in plan {
        dest.get_mut(id).tensor = t.tensor.clone();
        report.copied.push(t.name.clone());
        report.values += t.tensor.len();
    }
    Ok(report)
}
