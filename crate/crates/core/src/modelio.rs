//! Binary model files.
//!
//! Layout (little-endian):
//! ```text
//! b"TADA1"
//! u32 header length, header JSON {"config", "D", "n_classes", "task"}
//! u64 parameter count
//! per parameter: u32 name length, name, u32 rank, u64 dims[rank], f64 data[..]
//! ```
//! Parameters appear in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::series::Task;
use crate::error::{Result, TadaError};
use crate::model::{Architecture, ModelConfig, TadaModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"TADA1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    #[serde(rename = "D")]
    d: usize,
    n_classes: usize,
    task: Task,
}

pub fn encode_model(model: &TadaModel) -> Vec<u8> {
    let header = Header {
        config: model.arch.config.clone(),
        d: model.arch.n_features,
        n_classes: model.arch.n_classes,
        task: model.arch.task,
    };
    let header = serde_json::to_vec(&header).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
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
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TadaError::ModelFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn count(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TadaError::ModelFile("count overflows".into()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TadaModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(TadaError::ModelFile("bad magic, expected TADA1".into()));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| TadaError::ModelFile(format!("bad header: {e}")))?;
    let (arch, mut store) =
        Architecture::build(&header.config, header.d, header.n_classes, header.task, 0)
            .map_err(|e| TadaError::ModelFile(format!("header describes an invalid model: {e}")))?;
    let n = r.count()?;
    if n != store.len() {
        return Err(TadaError::ModelFile(format!(
            "{n} parameters stored, architecture declares {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TadaError::ModelFile("parameter name is not UTF-8".into()))?
            .to_string();
        if name != store.name(id) {
            return Err(TadaError::ModelFile(format!(
                "expected parameter `{}`, found `{name}`",
                store.name(id)
            )));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.count())
            .collect::<Result<Vec<usize>>>()?;
        if dims != store.get(id).shape() {
            return Err(TadaError::ModelFile(format!(
                "parameter `{name}` has dims {dims:?}, expected {:?}",
                store.get(id).shape()
            )));
        }
        let len = store.get(id).len();
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TadaError::ModelFile(format!(
                "parameter `{name}` holds non-finite values"
            )));
        }
        *store.get_mut(id) = Tensor::new(dims, data)?;
    }
    if r.pos != bytes.len() {
        return Err(TadaError::ModelFile(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(TadaModel {
        arch,
        params: store,
    })
}

pub fn save_model(model: &TadaModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TadaModel> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TadaModel {
        let mut cfg = ModelConfig::default();
        cfg.dla.l = 8;
        cfg.mixer.p = 2;
        TadaModel::new(&cfg, 3, 2, Task::Sequence, 4).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..5], b"TADA1");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.arch.config, m.arch.config);
        for ((_, na, a), (_, nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_model(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(TadaError::ModelFile(_))));
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 3]),
            Err(TadaError::ModelFile(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(TadaError::ModelFile(_))));
        assert!(matches!(decode_model(b"TA"), Err(TadaError::ModelFile(_))));
    }
}
