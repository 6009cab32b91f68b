//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PSGT" | u32 version
//! u32 len | topology JSON
//! u32 len | metadata JSON
//! u32 record count
//! per record: u8 section | u16 name len | name | u8 dtype | u8 rank | u64 dims[rank] | payload
//! ```
//!
//! Sections: 0 parameter, 1 and 2 the Adadelta accumulators, 3 auxiliary
//! blobs (for example a kernel-SVM head). Dtype 0 is FP32, 1 is FP64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, Topology};
use crate::tensor::Tensor;
use crate::train::adadelta::AdadeltaState;

pub const MAGIC: &[u8; 4] = b"PSGT";
pub const VERSION: u32 = 1;

const SEC_PARAM: u8 = 0;
const SEC_EG2: u8 = 1;
const SEC_EDX2: u8 = 2;
const SEC_AUX: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    #[serde(flatten)]
    meta: CheckpointMeta,
    trainable: Vec<bool>,
}

/// Auxiliary data stored alongside the network.
#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub topology: Topology,
    pub params: Vec<(String, Tensor)>,
    pub trainable: Vec<bool>,
    pub optimizer: Option<AdadeltaState>,
    pub meta: CheckpointMeta,
    pub aux: Vec<(String, Blob)>,
}

impl Checkpoint {
    pub fn capture(model: &ModelGraph, optimizer: Option<AdadeltaState>, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            topology: model.topology().clone(),
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            trainable: model.trainable_mask(),
            optimizer,
            meta,
            aux: Vec::new(),
        }
    }

    /// Rebuilds the model, including its trainable mask.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut m = ModelGraph::from_parts(self.topology.clone(), self.params.clone())?;
        self.apply_mask(&mut m);
        Ok(m)
    }

    /// Loads the parameters into an existing model of compatible topology.
    pub fn restore_into(&self, model: &mut ModelGraph) -> Result<()> {
        model.load_values(self.params.clone())?;
        if self.trainable.len() == model.params().len() {
            self.apply_mask(model);
        }
        Ok(())
    }

    fn apply_mask(&self, model: &mut ModelGraph) {
        for (p, &t) in model.params_mut().iter_mut().zip(&self.trainable) {
            p.trainable = t;
        }
    }

    pub fn aux(&self, name: &str) -> Option<&Blob> {
        self.aux.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let topo = serde_json::to_vec(&self.topology).map_err(|e| Error::Format(e.to_string()))?;
        put_block(&mut out, &topo)?;
        let meta = serde_json::to_vec(&MetaBlock {
            meta: self.meta.clone(),
            trainable: self.trainable.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        put_block(&mut out, &meta)?;

        let mut records: Vec<(u8, &str, BlobRef)> = Vec::new();
        for (n, t) in &self.params {
            records.push((SEC_PARAM, n, BlobRef::F32(t.shape(), t.data())));
        }
        if let Some(st) = &self.optimizer {
            if st.eg2.len() != self.params.len() || st.edx2.len() != self.params.len() {
                return Err(Error::Format("optimizer state does not mirror the parameters".into()));
            }
            for (sec, list) in [(SEC_EG2, &st.eg2), (SEC_EDX2, &st.edx2)] {
                for ((n, _), t) in self.params.iter().zip(list) {
                    records.push((sec, n, BlobRef::F32(t.shape(), t.data())));
                }
            }
        }
        for (n, b) in &self.aux {
            records.push((
                SEC_AUX,
                n,
                match b {
                    Blob::F32 { shape, data } => BlobRef::F32(shape, data),
                    Blob::F64 { shape, data } => BlobRef::F64(shape, data),
                },
            ));
        }
        out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?.to_le_bytes());
        for (sec, name, blob) in records {
            out.push(sec);
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?.to_le_bytes());
            out.extend_from_slice(nb);
            let (tag, shape) = match blob {
                BlobRef::F32(s, _) => (0u8, s),
                BlobRef::F64(s, _) => (1u8, s),
            };
            out.push(tag);
            out.push(u8::try_from(shape.len()).map_err(|_| Error::Format("rank too large".into()))?);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match blob {
                BlobRef::F32(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                BlobRef::F64(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let topo_len = r.u32()? as usize;
        let topology: Topology = serde_json::from_slice(r.take(topo_len)?).map_err(|e| Error::Format(format!("topology: {e}")))?;
        let meta_len = r.u32()? as usize;
        let meta: MetaBlock = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;

        let mut params = Vec::new();
        let (mut eg2, mut edx2) = (Vec::new(), Vec::new());
        let mut aux = Vec::new();
        for _ in 0..count {
            let sec = r.u8()?;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record `{name}` shape overflows")))?;
            let blob = match tag {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
                    Blob::F32 {
                        data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
                        shape,
                    }
                }
                1 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
                    Blob::F64 {
                        data: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                        shape,
                    }
                }
                t => return Err(Error::Format(format!("record `{name}`: unknown dtype {t}"))),
            };
            match (sec, blob) {
                (SEC_AUX, b) => aux.push((name, b)),
                (s @ (SEC_PARAM | SEC_EG2 | SEC_EDX2), Blob::F32 { shape, data }) => {
                    let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
                    match s {
                        SEC_PARAM => params.push((name, t)),
                        SEC_EG2 => eg2.push(t),
                        _ => edx2.push(t),
                    }
                }
                (s, _) => return Err(Error::Format(format!("record `{name}`: bad section {s} or dtype"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let optimizer = match (eg2.len(), edx2.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some(AdadeltaState { eg2, edx2 }),
            _ => return Err(Error::Format("optimizer state does not mirror the parameters".into())),
        };
        if meta.trainable.len() != params.len() {
            return Err(Error::Format("trainable mask does not mirror the parameters".into()));
        }
        Ok(Checkpoint {
            topology,
            params,
            trainable: meta.trainable,
            optimizer,
            meta: meta.meta,
            aux,
        })
    }
}

enum BlobRef<'a> {
    F32(&'a [usize], &'a [f32]),
    F64(&'a [usize], &'a [f64]),
}

fn put_block(out: &mut Vec<u8>, block: &[u8]) -> Result<()> {
    let len = u32::try_from(block.len()).map_err(|_| Error::Format("block too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(block);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

/// Reads and validates a checkpoint, including parameter names and shapes
/// against the stored topology.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    ckpt.to_model()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let m = build_mlp(3, &[4], &RngStream::new(5, 0)).unwrap();
        let mut st = AdadeltaState::zeros_like(&m).unwrap();
        st.eg2[0].data_mut()[0] = 0.25;
        let mut c = Checkpoint::capture(
            &m,
            Some(st),
            CheckpointMeta {
                epoch: 7,
                val_accuracy: 0.1 + 0.2,
                val_loss: 1.0 / 3.0,
            },
        );
        c.aux.push((
            "extra".into(),
            Blob::F64 {
                shape: vec![2],
                data: vec![std::f64::consts::PI, -0.0],
            },
        ));
        c
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn truncation_is_format_error() {
        let a = sample().to_bytes().unwrap();
        for cut in [0, 3, 8, 20, a.len() / 2, a.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&a[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut a = sample().to_bytes().unwrap();
        a[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&a), Err(Error::Format(_))));
        let mut b = sample().to_bytes().unwrap();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn mismatched_topology_names_parameter() {
        let c = sample();
        let mut other = build_mlp(5, &[4], &RngStream::new(0, 0)).unwrap();
        match c.restore_into(&mut other) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "dense1.weight"),
            r => panic!("{r:?}"),
        }
    }
}
