//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "SATCN001"
//! config     9 × u64  stages, hidden, bottleneck, stacks, blocks, kernel,
//!                     fft_size, hop, seed
//! count      u32      number of tensors
//! tensor     u32 name length, UTF-8 name, u32 rank, rank × u32 extents,
//!            f32 data
//! ```
//!
//! Model tensors carry their store names. Optimizer state, when present, is
//! stored as `adam.m:<name>`, `adam.v:<name>` and a one-element `adam.step`.

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiStageModel};
use crate::nn::{ParamKind, Tensor};

pub const MAGIC: &[u8; 8] = b"SATCN001";

const STEP_NAME: &str = "adam.step";
const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(model: &MultiStageModel, state: Option<&AdamState>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        c.stages as u64,
        c.hidden as u64,
        c.bottleneck as u64,
        c.stacks as u64,
        c.blocks as u64,
        c.kernel as u64,
        c.fft_size as u64,
        c.hop as u64,
        c.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let trainable: Vec<_> = model
        .store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(i, p)| (i, p.name.as_str()))
        .collect();
    let count = model.store.len() + state.map_or(0, |_| 1 + 2 * trainable.len());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in model.store.iter() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    if let Some(st) = state {
        put_tensor(&mut out, STEP_NAME, &Tensor::scalar(st.step as f64));
        for &(i, name) in &trainable {
            put_tensor(&mut out, &format!("{M_PREFIX}{name}"), &st.m[i]);
            put_tensor(&mut out, &format!("{V_PREFIX}{name}"), &st.v[i]);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("file truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(MultiStageModel, Option<AdamState>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let mut fields = [0u64; 9];
    for f in &mut fields {
        *f = r.u64("config")?;
    }
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| Error::format(8, "config value out of range"));
    let config = ModelConfig {
        stages: to_usize(fields[0])?,
        hidden: to_usize(fields[1])?,
        bottleneck: to_usize(fields[2])?,
        stacks: to_usize(fields[3])?,
        blocks: to_usize(fields[4])?,
        kernel: to_usize(fields[5])?,
        fft_size: to_usize(fields[6])?,
        hop: to_usize(fields[7])?,
        seed: fields[8],
    };
    config
        .validate()
        .map_err(|e| Error::format(8, format!("invalid config: {e}")))?;
    let mut model = MultiStageModel::build(config).map_err(|e| Error::format(8, e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; model.store.len()];
    let mut state: Option<AdamState> = None;
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(start + 4, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(start, format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(start, "tensor size overflows"))?,
            "tensor data",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| Error::format(start, e.to_string()))?;

        let place = |slot: &mut Tensor, what: &str| -> Result<()> {
            if slot.shape() != tensor.shape() {
                return Err(Error::format(
                    start,
                    format!(
                        "{what} `{name}` has shape {:?}, expected {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = tensor.clone();
            Ok(())
        };
        if name == STEP_NAME {
            state.get_or_insert_with(|| AdamState::new(&model.store)).step =
                tensor.data().first().copied().unwrap_or(0.0) as u64;
        } else if let Some(pname) = name.strip_prefix(M_PREFIX).or_else(|| name.strip_prefix(V_PREFIX)) {
            let id = model
                .store
                .id(pname)
                .ok_or_else(|| Error::format(start, format!("moment for unknown parameter `{pname}`")))?;
            let st = state.get_or_insert_with(|| AdamState::new(&model.store));
            let slot = if name.starts_with(M_PREFIX) {
                &mut st.m[id.index()]
            } else {
                &mut st.v[id.index()]
            };
            place(slot, "moment")?;
        } else {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::format(start, format!("unknown tensor `{name}`")))?;
            place(model.store.value_mut(id), "tensor")?;
            seen[id.index()] = true;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the last tensor", buf.len() - r.pos),
        ));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.store.iter().nth(i).unwrap().name;
        return Err(Error::format(r.pos as u64, format!("missing tensor `{name}`")));
    }
    Ok((model, state))
}

pub fn save_checkpoint(model: &MultiStageModel, state: Option<&AdamState>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, state))?;
    Ok(())
}

/// Loads a checkpoint; no model is returned unless the whole file parses.
pub fn load_checkpoint(path: &Path) -> Result<(MultiStageModel, Option<AdamState>)> {
    from_bytes(&fs::read(path)?)
}
