//! Model checkpoints.
//!
//! Layout: the magic line `msm-v1\n`, a little-endian `u64` header length,
//! a JSON header (net config, stage, free-form metadata, tensor index), then
//! every tensor's values as raw little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nets::{MsmModel, NetConfig};

pub const MAGIC: &[u8] = b"msm-v1\n";

/// Largest header accepted when reading; guards against garbage lengths.
const MAX_HEADER: u64 = 16 << 20;

/// Which training step produced the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Style network and enhancer trained; content network and Transformer at init.
    Step1,
    Step2,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    net: NetConfig,
    stage: Stage,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MsmModel,
    pub stage: Stage,
    /// Caller-provided metadata, e.g. the run config.
    pub meta: serde_json::Value,
}

fn stores(model: &MsmModel) -> [(&'static str, &ParamStore); 4] {
    [
        ("style", &model.style.params),
        ("content", &model.content.params),
        ("transformer", &model.transformer.params),
        ("enhancer", &model.enhancer.params),
    ]
}

pub fn to_bytes(model: &MsmModel, stage: Stage, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    for (prefix, store) in stores(model) {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry { name: format!("{prefix}/{name}"), shape: t.shape.clone() });
            for v in &t.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header { format: "msm-v1".into(), net: model.cfg.clone(), stage, meta: meta.clone(), tensors };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    read(&mut r)
}

pub fn save(path: &Path, model: &MsmModel, stage: Stage, meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let bytes = to_bytes(model, stage, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read(&mut std::io::BufReader::new(f))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if magic != MAGIC {
        return Err(bad("not an msm-v1 checkpoint"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != "msm-v1" {
        return Err(bad(format!("unsupported format `{}`", header.format)));
    }
    let mut model = MsmModel::new(header.net.clone())?;
    let mut groups: [Vec<(String, Tensor)>; 4] = Default::default();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated data for `{}`", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (prefix, name) = e.name.split_once('/').ok_or_else(|| bad(format!("unqualified tensor name `{}`", e.name)))?;
        let slot = ["style", "content", "transformer", "enhancer"]
            .iter()
            .position(|p| *p == prefix)
            .ok_or_else(|| bad(format!("unknown network `{prefix}`")))?;
        groups[slot].push((name.to_string(), Tensor::new(e.shape, data)));
    }
    let [st, co, tr, en] = groups;
    model.style.params.load_from(&st).map_err(|e| bad(format!("style: {e}")))?;
    model.content.params.load_from(&co).map_err(|e| bad(format!("content: {e}")))?;
    model.transformer.params.load_from(&tr).map_err(|e| bad(format!("transformer: {e}")))?;
    model.enhancer.params.load_from(&en).map_err(|e| bad(format!("enhancer: {e}")))?;
    Ok(Checkpoint { model, stage: header.stage, meta: header.meta })
}
