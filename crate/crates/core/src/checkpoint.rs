//! Little-endian checkpoint files: parameters, optimizer moments, the run
//! configuration and the step counter.

use std::path::Path;

use regionedit_tensor::{Adam, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{EditError, Result};

const MAGIC: &[u8; 4] = b"RECK";
pub const FORMAT_VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    /// Parameters in store order, then optimizer moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, store: &ParamStore<f32>, adam: Option<&Adam<f32>>, step: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.iter().map(|(_, p)| (p.name.clone(), p.tensor())).collect();
        if let Some(adam) = adam {
            for (name, m, v) in adam.export_state(store) {
                tensors.push((format!("{FIRST_MOMENT}{name}"), m));
                tensors.push((format!("{SECOND_MOMENT}{name}"), v));
            }
        }
        Self { step, config: config.clone(), tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| EditError::Format { kind: "checkpoint", msg: msg.to_string() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let slice = &bytes[pos..end];
            pos = end;
            Ok(slice)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION as usize {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let cfg_len = u32_at(take(4)?);
        let cfg_text = std::str::from_utf8(take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::parse(cfg_text)?;
        let count = u32_at(take(4)?);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u32_at(take(4)?);
            let name = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = u32_at(take(4)?);
            let shape = (0..rank).map(|_| Ok(u32_at(take(4)?))).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies parameters (and moments, if `adam` is given) into a store built
    /// for some config. Any missing, unexpected or reshaped tensor is an
    /// error listing every difference.
    pub fn restore(&self, store: &mut ParamStore<f32>, adam: Option<&mut Adam<f32>>) -> Result<()> {
        let mut diffs = Vec::new();
        let mut params = Vec::new();
        let mut moments: Vec<(String, Option<Tensor<f32>>, Option<Tensor<f32>>)> = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(base) = name.strip_prefix(FIRST_MOMENT) {
                moments.push((base.to_string(), Some(t.clone()), None));
            } else if let Some(base) = name.strip_prefix(SECOND_MOMENT) {
                match moments.iter_mut().find(|(n, _, v)| n == base && v.is_none()) {
                    Some(entry) => entry.2 = Some(t.clone()),
                    None => diffs.push(format!("  second moment without first: {base}")),
                }
            } else {
                match store.id(name) {
                    None => diffs.push(format!("  unexpected tensor {name} {:?}", t.shape())),
                    Some(id) if store.get(id).shape != t.shape() => diffs.push(format!(
                        "  {name}: checkpoint {:?}, model {:?}",
                        t.shape(),
                        store.get(id).shape
                    )),
                    Some(id) => params.push((id, t.clone())),
                }
            }
        }
        for (_, p) in store.iter() {
            if !self.tensors.iter().any(|(n, _)| *n == p.name) {
                diffs.push(format!("  missing tensor {} {:?}", p.name, p.shape));
            }
        }
        if !diffs.is_empty() {
            return Err(EditError::CheckpointMismatch(diffs.join("\n")));
        }
        for (id, t) in params {
            store.set_value(id, t)?;
        }
        if let Some(adam) = adam {
            let mut state = Vec::with_capacity(moments.len());
            for (name, m, v) in moments {
                match (m, v) {
                    (Some(m), Some(v)) => state.push((name, m, v)),
                    _ => return Err(EditError::CheckpointMismatch(format!("  incomplete moments for {name}"))),
                }
            }
            adam.import_state(store, self.step, state)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EditModel;

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = RunConfig::micro();
        let (_, store) = EditModel::new(&cfg).unwrap();
        let ck = Checkpoint::capture(&cfg, &store, None, 12);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 12);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mismatched_model_lists_tensor_differences() {
        let cfg = RunConfig::micro();
        let (_, store) = EditModel::new(&cfg).unwrap();
        let ck = Checkpoint::capture(&cfg, &store, None, 0);
        let other = RunConfig { vlm_width: 4, use_hvca: false, ..RunConfig::micro() };
        let (_, mut store2) = EditModel::new(&other).unwrap();
        match ck.restore(&mut store2, None) {
            Err(EditError::CheckpointMismatch(msg)) => {
                assert!(msg.contains("vlm.table"), "{msg}");
                assert!(msg.contains("unexpected tensor hvca"), "{msg}");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }
}
