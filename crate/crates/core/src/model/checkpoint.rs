//! Binary checkpoint container.
//!
//! Layout (all integers u64 little-endian unless noted):
//! magic `VCKPT\0\0\0`, version (u32), config JSON length + bytes,
//! layer count, then per layer a presence byte and for MoE layers the
//! expert count, `bias` as f64 and `lifetime` counts, then the parameter
//! count and per parameter: name length + bytes, rank, dims, f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::graph_learning::GraphConfig;
use crate::moe::{MoeConfig, RouterState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VCKPT\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Echo {
    model: ModelConfig,
    moe: MoeConfig,
    graph: GraphConfig,
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

pub(crate) fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo = Echo {
        model: model.cfg.clone(),
        moe: model.cfg.moe.clone(),
        graph: model.cfg.graph.clone(),
    };
    let json = serde_json::to_vec(&echo).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_bytes(&mut w, &json);
    put_u64(&mut w, model.routers.len() as u64);
    for r in &model.routers {
        match r {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                put_u64(&mut w, r.bias.len() as u64);
                for b in &r.bias {
                    w.extend_from_slice(&b.to_le_bytes());
                }
                for c in &r.lifetime {
                    put_u64(&mut w, *c);
                }
            }
        }
    }
    put_u64(&mut w, model.params.len() as u64);
    for (name, t) in model.params.iter() {
        put_bytes(&mut w, name.as_bytes());
        put_u64(&mut w, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut w, d as u64);
        }
        for v in t.data() {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(w)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.len()?;
    let echo: Echo =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut cfg = echo.model;
    cfg.moe = echo.moe;
    cfg.graph = echo.graph;

    let layers = r.len()?;
    let mut routers = Vec::with_capacity(layers);
    for _ in 0..layers {
        match r.take(1)?[0] {
            0 => routers.push(None),
            1 => {
                let np = r.len()?;
                let bias = (0..np).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let lifetime = (0..np).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                routers.push(Some(RouterState {
                    bias,
                    counts: vec![0; np],
                    lifetime,
                }));
            }
            t => return Err(Error::Checkpoint(format!("bad router tag {t}"))),
        }
    }
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nl = r.len()?;
        let name = String::from_utf8(r.take(nl)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    cfg.validate()?;
    Ok(Model { cfg, params, routers })
}

/// Writes atomically: temp file in the target directory, then rename.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
