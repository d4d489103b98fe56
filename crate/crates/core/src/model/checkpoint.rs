//! Versioned binary checkpoint: magic, JSON header with the model config and
//! parameter manifest, then little-endian f64 blobs in registration order.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, VlaModel};

const MAGIC: &[u8; 8] = b"MDRVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad magic or version")]
    BadFormat,
    #[error("parameter manifest mismatch: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    /// Layout stamp: stream layouts follow from the config; stored so a
    /// reader can reject incompatible files without reconstructing a model.
    encode_stream_len: usize,
    rollout_stream_len: usize,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save(model: &VlaModel, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        config: model.cfg,
        encode_stream_len: model.cfg.encode_layout().len,
        rollout_stream_len: model.cfg.rollout_layout().len,
        params: model
            .params
            .iter()
            .map(|(_, name, t)| ParamMeta { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<VlaModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadFormat);
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != VERSION {
        return Err(CheckpointError::BadFormat);
    }

    let mut model = VlaModel::new(header.config);
    if header.encode_stream_len != model.cfg.encode_layout().len
        || header.rollout_stream_len != model.cfg.rollout_layout().len
    {
        return Err(CheckpointError::Mismatch("stream layout".into()));
    }
    if header.params.len() != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} params, file has {}",
            model.params.len(),
            header.params.len()
        )));
    }
    let mut flat = Vec::with_capacity(model.params.total_values());
    for ((id, name, t), meta) in model.params.iter().zip(&header.params) {
        let _ = id;
        if name != meta.name || t.shape() != meta.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!("param {name} vs {}", meta.name)));
        }
        let mut buf = [0u8; 8];
        for _ in 0..t.len() {
            r.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
    }
    model.params.load_flat(&flat);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::ScenarioText;
    use crate::lang::EOS;
    use crate::world::observe::SceneFeatures;

    #[test]
    fn roundtrip_reproduces_probe_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = VlaModel::new(ModelConfig { width: 16, mlp_hidden: 16, heads: 2, ..Default::default() });
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(model.params, loaded.params);

        let frames = vec![SceneFeatures::zeros(); 4];
        let desc = ScenarioText(vec![EOS]);
        let probe = |m: &VlaModel| -> Vec<u64> {
            let mut g = m.graph();
            let stream = m.encode(&mut g, &frames, &desc, None);
            let (tok, _) = m.infer_tokens(&mut g, stream);
            g.tape
                .value(tok.ego_mean)
                .data()
                .iter()
                .chain(g.tape.value(tok.agent_logvar).data())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(probe(&model), probe(&loaded));
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }
}
